//! CTR network topology and the fixed/adaptive parameter partition.
//!
//! Layers are numbered the way the layer-freezing ablation addresses them:
//! layer 1 holds every slot embedding table, layers `2..=1+H` are the hidden
//! layers and layer `2+H` is the two-unit classifier.

use std::collections::BTreeSet;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nncore::{self, ParameterSet, SegmentKind};

/// Number of output units of the classifier head (softmax over click / no click).
pub const OUTPUT_UNITS: usize = 2;

/// Layer number as used by [`PartitionSpec`]: 1 = embeddings, last = classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId(pub u8);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_sizes: Vec<usize>,
    pub embed_dim: usize,
    pub hidden_sizes: Vec<usize>,
}

impl ModelConfig {
    /// Desk-scale network: 4-dim embeddings, hidden [16, 8].
    pub fn desk(vocab_sizes: Vec<usize>) -> Self {
        Self {
            vocab_sizes,
            embed_dim: 4,
            hidden_sizes: vec![16, 8],
        }
    }

    /// Desk-scale network with three hidden layers, so the five-layer
    /// ablation numbering (emb, hid, hid, hid, clf) applies.
    pub fn benchmark(vocab_sizes: Vec<usize>) -> Self {
        Self {
            vocab_sizes,
            embed_dim: 4,
            hidden_sizes: vec![16, 8, 8],
        }
    }

    /// Production-scale network: 571 slots, 16-dim embeddings, hidden [128, 64, 32].
    pub fn production(vocab_per_slot: usize) -> Self {
        Self {
            vocab_sizes: vec![vocab_per_slot; 571],
            embed_dim: 16,
            hidden_sizes: vec![128, 64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkTopology {
    vocab_sizes: Vec<usize>,
    embed_dim: usize,
    hidden_sizes: Vec<usize>,
}

/// Shape of one parameter segment in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentShape {
    pub layer: LayerId,
    pub kind: SegmentKind,
    pub rows: usize,
    pub cols: usize,
}

pub fn build_topology(config: &ModelConfig) -> Result<NetworkTopology> {
    if config.vocab_sizes.is_empty() {
        return Err(Error::config("slot count must be positive"));
    }
    if let Some(i) = config.vocab_sizes.iter().position(|&v| v == 0) {
        return Err(Error::config(format!("vocab size of slot {i} must be positive")));
    }
    if config.embed_dim == 0 {
        return Err(Error::config("embed_dim must be positive"));
    }
    if config.hidden_sizes.is_empty() {
        return Err(Error::config("hidden layer list must be non-empty"));
    }
    if config.hidden_sizes.contains(&0) {
        return Err(Error::config("hidden layer widths must be positive"));
    }
    // layer ids are u8 and 1 + H + 1 must fit
    if config.hidden_sizes.len() > 200 {
        return Err(Error::config("too many hidden layers"));
    }
    Ok(NetworkTopology {
        vocab_sizes: config.vocab_sizes.clone(),
        embed_dim: config.embed_dim,
        hidden_sizes: config.hidden_sizes.clone(),
    })
}

impl NetworkTopology {
    pub fn slot_count(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    pub fn output_units(&self) -> usize {
        OUTPUT_UNITS
    }

    /// Number of layers in ablation numbering: embeddings, hidden layers, classifier.
    pub fn layer_count(&self) -> usize {
        self.hidden_sizes.len() + 2
    }

    pub fn classifier_layer(&self) -> LayerId {
        LayerId(self.layer_count() as u8)
    }

    /// Widths of the dense chain: `[m*d, h1, ..., hH, 2]`.
    pub fn dense_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_sizes.len() + 2);
        widths.push(self.slot_count() * self.embed_dim);
        widths.extend_from_slice(&self.hidden_sizes);
        widths.push(OUTPUT_UNITS);
        widths
    }

    /// Segments in canonical order: one embedding table per slot, then
    /// (weight, bias) pairs in depth order. Weights are `fan_in x fan_out`.
    pub fn segment_shapes(&self) -> Vec<SegmentShape> {
        let mut shapes: Vec<SegmentShape> = self
            .vocab_sizes
            .iter()
            .map(|&v| SegmentShape {
                layer: LayerId(1),
                kind: SegmentKind::Embedding,
                rows: v,
                cols: self.embed_dim,
            })
            .collect();
        let widths = self.dense_widths();
        for (i, pair) in widths.windows(2).enumerate() {
            let layer = LayerId(i as u8 + 2);
            shapes.push(SegmentShape {
                layer,
                kind: SegmentKind::DenseWeight,
                rows: pair[0],
                cols: pair[1],
            });
            shapes.push(SegmentShape {
                layer,
                kind: SegmentKind::DenseBias,
                rows: 1,
                cols: pair[1],
            });
        }
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.segment_shapes().iter().map(|s| s.rows * s.cols).sum()
    }

    /// Hex digest identifying the topology; checkpoints carry it.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"metarec-topology-v1;");
        for s in self.segment_shapes() {
            hasher.update(format!("{}:{}:{}x{};", s.layer, s.kind, s.rows, s.cols).as_bytes());
        }
        hex::encode(hasher.finalize())[..16].to_string()
    }
}

/// One impression: a categorical id per slot plus the click label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub slot_ids: Vec<u32>,
    pub label: u8,
}

impl Example {
    pub fn new(slot_ids: Vec<u32>, label: u8) -> Self {
        Self { slot_ids, label }
    }
}

/// Which layers stay frozen during online adaptation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PartitionSpec {
    pub fixed_layers: BTreeSet<u8>,
}

impl PartitionSpec {
    pub fn new(fixed: impl IntoIterator<Item = u8>) -> Self {
        Self {
            fixed_layers: fixed.into_iter().collect(),
        }
    }

    /// Nothing fixed: conventional meta learning that finetunes everything.
    pub fn all_adaptive() -> Self {
        Self::default()
    }

    /// Fix the first two hidden layers, the best row of the layer-freezing ablation.
    pub fn first_two_hidden() -> Self {
        Self::new([2, 3])
    }

    /// Fix every hidden layer; embeddings and classifier adapt.
    pub fn all_hidden(topology: &NetworkTopology) -> Self {
        Self::new(2..=(topology.layer_count() as u8 - 1))
    }

    /// Parse a comma separated layer list such as `"2,3"`. Empty string or
    /// `"none"` means all-adaptive.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text.eq_ignore_ascii_case("none") {
            return Ok(Self::all_adaptive());
        }
        let mut fixed = BTreeSet::new();
        for part in text.split(',') {
            let part = part.trim();
            let id: u8 = part
                .parse()
                .map_err(|_| Error::config(format!("invalid layer id {part:?} in partition")))?;
            fixed.insert(id);
        }
        Ok(Self { fixed_layers: fixed })
    }

    pub fn validate(&self, topology: &NetworkTopology) -> Result<()> {
        let layers = topology.layer_count();
        if let Some(&bad) = self
            .fixed_layers
            .iter()
            .find(|&&l| l == 0 || l as usize > layers)
        {
            return Err(Error::config(format!(
                "unknown layer id {bad} (topology has layers 1..={layers})"
            )));
        }
        if self.fixed_layers.len() == layers {
            return Err(Error::config("partition fixes every layer; nothing left to adapt"));
        }
        Ok(())
    }

    pub fn is_fixed(&self, layer: LayerId) -> bool {
        self.fixed_layers.contains(&layer.0)
    }
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.fixed_layers.is_empty() {
            return write!(f, "none");
        }
        let parts: Vec<String> = self.fixed_layers.iter().map(|l| l.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Per-segment adaptive flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMask {
    adaptive: Vec<bool>,
}

pub fn partition_mask(topology: &NetworkTopology, spec: &PartitionSpec) -> Result<PartitionMask> {
    spec.validate(topology)?;
    let adaptive = topology
        .segment_shapes()
        .iter()
        .map(|s| !spec.is_fixed(s.layer))
        .collect();
    Ok(PartitionMask { adaptive })
}

impl PartitionMask {
    pub fn all_adaptive(topology: &NetworkTopology) -> Self {
        Self {
            adaptive: vec![true; topology.segment_shapes().len()],
        }
    }

    /// Mask with no adaptive segment. Only [`crate::nncore::sgd_step`] accepts it;
    /// partition specs that fix everything are rejected.
    pub fn all_fixed(topology: &NetworkTopology) -> Self {
        Self {
            adaptive: vec![false; topology.segment_shapes().len()],
        }
    }

    pub fn from_flags(adaptive: Vec<bool>) -> Self {
        Self { adaptive }
    }

    pub fn len(&self) -> usize {
        self.adaptive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adaptive.is_empty()
    }

    pub fn is_adaptive(&self, segment: usize) -> bool {
        self.adaptive[segment]
    }

    pub fn flags(&self) -> &[bool] {
        &self.adaptive
    }

    /// Split scalars into (fixed, adaptive) in canonical segment order.
    pub fn split(&self, params: &ParameterSet) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(params)?;
        let mut fixed = Vec::new();
        let mut adaptive = Vec::new();
        for (seg, &flag) in params.segments().iter().zip(&self.adaptive) {
            if flag {
                adaptive.extend_from_slice(&seg.values);
            } else {
                fixed.extend_from_slice(&seg.values);
            }
        }
        Ok((fixed, adaptive))
    }

    /// Inverse of [`PartitionMask::split`].
    pub fn merge(
        &self,
        topology: &NetworkTopology,
        fixed: &[f64],
        adaptive: &[f64],
    ) -> Result<ParameterSet> {
        let mut params = ParameterSet::zeros(topology);
        self.check(&params)?;
        let (mut fi, mut ai) = (0usize, 0usize);
        for (seg, &flag) in params.segments_mut().iter_mut().zip(&self.adaptive) {
            let n = seg.values.len();
            let (src, cursor) = if flag {
                (adaptive, &mut ai)
            } else {
                (fixed, &mut fi)
            };
            let chunk = src
                .get(*cursor..*cursor + n)
                .ok_or_else(|| Error::contract("partition merge: too few scalars"))?;
            seg.values.copy_from_slice(chunk);
            *cursor += n;
        }
        if fi != fixed.len() || ai != adaptive.len() {
            return Err(Error::contract("partition merge: too many scalars"));
        }
        Ok(params)
    }

    pub(crate) fn check(&self, params: &ParameterSet) -> Result<()> {
        if self.adaptive.len() != params.segments().len() {
            return Err(Error::contract(format!(
                "mask covers {} segments, parameters have {}",
                self.adaptive.len(),
                params.segments().len()
            )));
        }
        Ok(())
    }
}

/// Click probability for a single example.
pub fn predict_ctr(params: &ParameterSet, topology: &NetworkTopology, example: &Example) -> Result<f64> {
    let probs = nncore::forward(params, topology, std::slice::from_ref(example))?;
    Ok(probs[0])
}
