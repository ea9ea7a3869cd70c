//! Forward pass, exact backward pass, masked SGD and a central-difference
//! gradient oracle for the slot-embedding MLP.
//!
//! All arithmetic is `f64`. Hidden layers use ReLU; the classifier emits two
//! logits and the click probability is the softmax mass on class 1. The loss is
//! the mean binary cross-entropy over the batch.

use std::fmt;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Example, LayerId, NetworkTopology, PartitionMask};

/// Half-width of the uniform range used for embedding rows.
pub const EMBEDDING_INIT_RANGE: f64 = 0.05;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside [`loss`].
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Embedding,
    DenseWeight,
    DenseBias,
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SegmentKind::Embedding => "embedding",
            SegmentKind::DenseWeight => "dense-weight",
            SegmentKind::DenseBias => "dense-bias",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SegmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(SegmentKind::Embedding),
            "dense-weight" => Ok(SegmentKind::DenseWeight),
            "dense-bias" => Ok(SegmentKind::DenseBias),
            other => Err(Error::contract(format!("unknown segment kind {other:?}"))),
        }
    }
}

/// One layer block, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub layer: LayerId,
    pub kind: SegmentKind,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// All network parameters in canonical segment order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    segments: Vec<Segment>,
}

impl ParameterSet {
    pub fn zeros(topology: &NetworkTopology) -> Self {
        let segments = topology
            .segment_shapes()
            .into_iter()
            .map(|s| Segment {
                layer: s.layer,
                kind: s.kind,
                rows: s.rows,
                cols: s.cols,
                values: vec![0.0; s.rows * s.cols],
            })
            .collect();
        Self { segments }
    }

    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if s.values.len() != s.rows * s.cols {
                return Err(Error::contract(format!(
                    "segment {i}: {} values for shape {}x{}",
                    s.values.len(),
                    s.rows,
                    s.cols
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_congruent(&self, other: &ParameterSet) -> bool {
        self.segments.len() == other.segments.len()
            && self.segments.iter().zip(&other.segments).all(|(a, b)| {
                a.layer == b.layer && a.kind == b.kind && a.rows == b.rows && a.cols == b.cols
            })
    }

    pub fn matches_topology(&self, topology: &NetworkTopology) -> bool {
        let shapes = topology.segment_shapes();
        shapes.len() == self.segments.len()
            && shapes.iter().zip(&self.segments).all(|(sh, seg)| {
                sh.layer == seg.layer && sh.kind == seg.kind && sh.rows == seg.rows && sh.cols == seg.cols
            })
    }

    pub fn all_finite(&self) -> bool {
        self.iter_flat().all(f64::is_finite)
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().flat_map(|s| s.values.iter().copied())
    }

    /// Mutable access to the scalar at a flat (canonical order) index.
    pub fn flat_mut(&mut self, mut index: usize) -> &mut f64 {
        for seg in &mut self.segments {
            if index < seg.values.len() {
                return &mut seg.values[index];
            }
            index -= seg.values.len();
        }
        panic!("flat index out of range");
    }

    /// SHA-256 of one segment's shape and exact value bits.
    pub fn segment_digest(&self, segment: usize) -> String {
        let seg = &self.segments[segment];
        let mut hasher = Sha256::new();
        hasher.update(format!("{}:{}:{}x{};", seg.layer, seg.kind, seg.rows, seg.cols).as_bytes());
        for v in &seg.values {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub(crate) fn check_congruent(&self, other: &ParameterSet, what: &str) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::contract(format!("{what}: parameter shapes differ")))
        }
    }
}

/// Loss gradients, shape-congruent with the [`ParameterSet`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(ParameterSet);

impl GradientSet {
    pub fn zeros(topology: &NetworkTopology) -> Self {
        GradientSet(ParameterSet::zeros(topology))
    }

    pub fn from_params(values: ParameterSet) -> Self {
        GradientSet(values)
    }

    pub fn as_params(&self) -> &ParameterSet {
        &self.0
    }

    pub fn into_params(self) -> ParameterSet {
        self.0
    }

    pub fn segments(&self) -> &[Segment] {
        self.0.segments()
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter_flat()
    }

    /// Largest elementwise relative error against `other`, using
    /// `|a - b| / max(|a|, |b|, floor)`.
    pub fn max_relative_error(&self, other: &GradientSet, floor: f64) -> f64 {
        self.iter_flat()
            .zip(other.iter_flat())
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Per-layer activations kept for the backward pass.
struct Trace {
    /// `inputs[l]` is the input vector of dense layer `l` (inputs[0] = embeddings).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each dense layer; the last entry holds the logits.
    pre: Vec<Vec<f64>>,
}

fn validate_batch(topology: &NetworkTopology, batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("batch must hold at least one example"));
    }
    let m = topology.slot_count();
    for ex in batch {
        if ex.slot_ids.len() != m {
            return Err(Error::contract(format!(
                "example has {} slot ids, topology expects {m}",
                ex.slot_ids.len()
            )));
        }
        for (slot, (&id, &vocab)) in ex.slot_ids.iter().zip(topology.vocab_sizes()).enumerate() {
            if id as usize >= vocab {
                return Err(Error::Input { slot, id, vocab });
            }
        }
    }
    Ok(())
}

fn check_params(params: &ParameterSet, topology: &NetworkTopology) -> Result<()> {
    if params.matches_topology(topology) {
        Ok(())
    } else {
        Err(Error::contract("parameters do not match the topology"))
    }
}

fn trace_example(params: &ParameterSet, topology: &NetworkTopology, ex: &Example) -> Trace {
    let m = topology.slot_count();
    let d = topology.embed_dim();
    let segs = params.segments();

    let mut x = Vec::with_capacity(m * d);
    for (slot, &id) in ex.slot_ids.iter().enumerate() {
        let row = id as usize * d;
        x.extend_from_slice(&segs[slot].values[row..row + d]);
    }

    let n_dense = topology.hidden_sizes().len() + 1;
    let mut inputs = Vec::with_capacity(n_dense);
    let mut pre = Vec::with_capacity(n_dense);
    for l in 0..n_dense {
        let w = &segs[m + 2 * l];
        let b = &segs[m + 2 * l + 1];
        let (fan_in, fan_out) = (w.rows, w.cols);
        let mut z = b.values.clone();
        for (i, &xi) in x.iter().enumerate().take(fan_in) {
            if xi == 0.0 {
                continue;
            }
            let row = &w.values[i * fan_out..(i + 1) * fan_out];
            for (zj, &wij) in z.iter_mut().zip(row) {
                *zj += xi * wij;
            }
        }
        let next = if l + 1 < n_dense {
            z.iter().map(|&v| v.max(0.0)).collect()
        } else {
            Vec::new()
        };
        inputs.push(x);
        pre.push(z);
        x = next;
    }
    Trace { inputs, pre }
}

/// Softmax mass on class 1 for two logits, computed as a logistic of the gap.
fn click_probability(logits: &[f64]) -> f64 {
    let gap = logits[1] - logits[0];
    if gap >= 0.0 {
        1.0 / (1.0 + (-gap).exp())
    } else {
        let e = gap.exp();
        e / (1.0 + e)
    }
}

/// Click probability for every example in the batch.
pub fn forward(params: &ParameterSet, topology: &NetworkTopology, batch: &[Example]) -> Result<Vec<f64>> {
    check_params(params, topology)?;
    validate_batch(topology, batch)?;
    Ok(batch
        .iter()
        .map(|ex| click_probability(trace_example(params, topology, ex).pre.last().unwrap()))
        .collect())
}

/// Mean binary cross-entropy.
pub fn loss(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} probabilities vs {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(Error::contract("loss of an empty batch"));
    }
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probabilities.len() as f64)
}

/// Forward + loss in one call.
pub fn batch_loss(params: &ParameterSet, topology: &NetworkTopology, batch: &[Example]) -> Result<f64> {
    let probs = forward(params, topology, batch)?;
    let labels: Vec<u8> = batch.iter().map(|e| e.label).collect();
    loss(&probs, &labels)
}

/// Exact gradient of the mean batch loss with respect to every parameter.
pub fn backward(params: &ParameterSet, topology: &NetworkTopology, batch: &[Example]) -> Result<GradientSet> {
    check_params(params, topology)?;
    validate_batch(topology, batch)?;
    let mut grads = GradientSet::zeros(topology);
    accumulate_gradients(params, topology, batch, &mut grads);
    Ok(grads)
}

fn accumulate_gradients(
    params: &ParameterSet,
    topology: &NetworkTopology,
    batch: &[Example],
    grads: &mut GradientSet,
) {
    let m = topology.slot_count();
    let d = topology.embed_dim();
    let n_dense = topology.hidden_sizes().len() + 1;
    let scale = 1.0 / batch.len() as f64;
    let segs = params.segments();

    for ex in batch {
        let trace = trace_example(params, topology, ex);
        let p = click_probability(trace.pre.last().unwrap());
        let err = (p - f64::from(ex.label)) * scale;
        let mut dz = vec![-err, err];

        for l in (0..n_dense).rev() {
            let w = &segs[m + 2 * l];
            let (fan_in, fan_out) = (w.rows, w.cols);
            let x = &trace.inputs[l];
            let gsegs = grads.0.segments_mut();
            {
                let gw = &mut gsegs[m + 2 * l].values;
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * fan_out..(i + 1) * fan_out];
                    for (g, &dzj) in row.iter_mut().zip(&dz) {
                        *g += xi * dzj;
                    }
                }
            }
            for (g, &dzj) in gsegs[m + 2 * l + 1].values.iter_mut().zip(&dz) {
                *g += dzj;
            }
            let mut dx = vec![0.0; fan_in];
            for (i, dxi) in dx.iter_mut().enumerate() {
                let row = &w.values[i * fan_out..(i + 1) * fan_out];
                *dxi = row.iter().zip(&dz).map(|(&wij, &dzj)| wij * dzj).sum();
            }
            if l > 0 {
                for (dxi, &z) in dx.iter_mut().zip(&trace.pre[l - 1]) {
                    if z <= 0.0 {
                        *dxi = 0.0;
                    }
                }
                dz = dx;
            } else {
                // scatter into the looked-up embedding rows; duplicates add up
                for (slot, &id) in ex.slot_ids.iter().enumerate() {
                    let row = id as usize * d;
                    let g = &mut gsegs[slot].values[row..row + d];
                    for (gk, &dk) in g.iter_mut().zip(&dx[slot * d..(slot + 1) * d]) {
                        *gk += dk;
                    }
                }
            }
        }
    }
}

/// Apply `p - lr * g` to adaptive segments in place; fixed segments are untouched.
pub fn sgd_step_in_place(
    params: &mut ParameterSet,
    grads: &GradientSet,
    lr: f64,
    mask: &PartitionMask,
) -> Result<()> {
    params.check_congruent(grads.as_params(), "sgd_step")?;
    mask.check(params)?;
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::contract(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    for (i, (seg, gseg)) in params.segments.iter_mut().zip(grads.segments()).enumerate() {
        if !mask.is_adaptive(i) {
            continue;
        }
        for (p, &g) in seg.values.iter_mut().zip(&gseg.values) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Masked SGD step returning a new parameter set.
pub fn sgd_step(
    params: &ParameterSet,
    grads: &GradientSet,
    lr: f64,
    mask: &PartitionMask,
) -> Result<ParameterSet> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr, mask)?;
    Ok(out)
}

/// Central differences `(L(p + h) - L(p - h)) / 2h` for every scalar.
pub fn finite_diff_grad(
    params: &ParameterSet,
    topology: &NetworkTopology,
    batch: &[Example],
    h: f64,
) -> Result<GradientSet> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    check_params(params, topology)?;
    validate_batch(topology, batch)?;
    let mut probe = params.clone();
    let mut grads = GradientSet::zeros(topology);
    let n = params.len();
    for idx in 0..n {
        let orig = *probe.flat_mut(idx);
        *probe.flat_mut(idx) = orig + h;
        let up = batch_loss(&probe, topology, batch)?;
        *probe.flat_mut(idx) = orig - h;
        let down = batch_loss(&probe, topology, batch)?;
        *probe.flat_mut(idx) = orig;
        *grads.0.flat_mut(idx) = (up - down) / (2.0 * h);
    }
    Ok(grads)
}

/// Glorot-uniform dense weights, uniform ±0.05 embeddings, zero biases.
pub fn init_params(topology: &NetworkTopology, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::zeros(topology);
    for seg in params.segments_mut() {
        let limit = match seg.kind {
            SegmentKind::Embedding => EMBEDDING_INIT_RANGE,
            SegmentKind::DenseWeight => (6.0 / (seg.rows + seg.cols) as f64).sqrt(),
            SegmentKind::DenseBias => continue,
        };
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite init range");
        for v in &mut seg.values {
            *v = dist.sample(&mut rng);
        }
    }
    params
}
