#![allow(dead_code)]

use metarec::model::{build_topology, Example, ModelConfig, NetworkTopology};
use metarec::nncore::{self, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small random network plus a batch that fits it.
pub struct SmallCase {
    pub topology: NetworkTopology,
    pub params: ParameterSet,
    pub batch: Vec<Example>,
}

pub fn small_case(seed: u64) -> SmallCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = rng.random_range(1..=4);
    let vocab_sizes: Vec<usize> = (0..slots).map(|_| rng.random_range(1..=6)).collect();
    let hidden_sizes: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=6)).collect();
    let topology = build_topology(&ModelConfig {
        vocab_sizes: vocab_sizes.clone(),
        embed_dim: rng.random_range(1..=3),
        hidden_sizes,
    })
    .unwrap();
    let mut params = nncore::init_params(&topology, seed);
    // larger embeddings than the init range so every layer carries signal
    for seg in params.segments_mut() {
        for v in seg.values.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let n = rng.random_range(1..=6);
    let batch = (0..n)
        .map(|_| {
            Example::new(
                vocab_sizes.iter().map(|&v| rng.random_range(0..v as u32)).collect(),
                rng.random_range(0..=1u8),
            )
        })
        .collect();
    SmallCase {
        topology,
        params,
        batch,
    }
}

/// Mean binary cross-entropy written out directly from the forward probabilities.
pub fn reference_loss(params: &ParameterSet, topology: &NetworkTopology, batch: &[Example]) -> f64 {
    let probs = nncore::forward(params, topology, batch).unwrap();
    let total: f64 = probs
        .iter()
        .zip(batch)
        .map(|(&p, ex)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            if ex.label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / batch.len() as f64
}

/// Central differences over every scalar.
pub fn reference_fd(params: &ParameterSet, topology: &NetworkTopology, batch: &[Example], h: f64) -> Vec<f64> {
    let mut work = params.clone();
    (0..params.len())
        .map(|i| {
            let orig = *work.flat_mut(i);
            *work.flat_mut(i) = orig + h;
            let up = reference_loss(&work, topology, batch);
            *work.flat_mut(i) = orig - h;
            let down = reference_loss(&work, topology, batch);
            *work.flat_mut(i) = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Fraction of positive/negative pairs ordered correctly, ties counted half.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                good += 1.0;
            } else if si == sj {
                good += 0.5;
            }
        }
    }
    good / pairs
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
