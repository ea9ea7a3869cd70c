mod common;

use metarec::checkpoint::{read_checkpoint, write_checkpoint};
use metarec::datagen::{read_dataset, split_support_query, support_len, write_dataset, TaskDataset};
use metarec::eval::{auc_scores, log_from_scores, EvalLog};
use metarec::metalearn::{
    finetune_stream, linear_anneal, online_meta_train, outer_update, Hyperparams, MetaState,
};
use metarec::model::{partition_mask, Example, PartitionMask, PartitionSpec};
use metarec::nncore::{self, ParameterSet};
use proptest::prelude::*;

use common::{brute_force_auc, max_rel_err, reference_fd, small_case};

fn random_mask(len: usize, bits: u64) -> PartitionMask {
    PartitionMask::from_flags((0..len).map(|i| bits >> (i % 64) & 1 == 1).collect())
}

fn tasks_for(c: &common::SmallCase, users: usize) -> Vec<TaskDataset> {
    (0..users)
        .map(|u| TaskDataset {
            user_id: u as u64,
            examples: c.batch.iter().cycle().skip(u).take(c.batch.len() + u % 3).cloned().collect(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_matches_finite_differences(seed in 0u64..1_000_000) {
        let c = small_case(seed);
        let analytic: Vec<f64> = nncore::backward(&c.params, &c.topology, &c.batch).unwrap().iter_flat().collect();
        let fd = reference_fd(&c.params, &c.topology, &c.batch, 1e-5);
        prop_assert!(max_rel_err(&analytic, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn library_fd_agrees_with_reference(seed in 0u64..1_000_000) {
        let c = small_case(seed);
        let lib: Vec<f64> = nncore::finite_diff_grad(&c.params, &c.topology, &c.batch, 1e-5).unwrap().iter_flat().collect();
        let reference = reference_fd(&c.params, &c.topology, &c.batch, 1e-5);
        prop_assert!(max_rel_err(&lib, &reference, 1e-6) < 1e-6);
    }

    #[test]
    fn probabilities_in_unit_interval_and_loss_nonnegative(seed in 0u64..1_000_000) {
        let c = small_case(seed);
        let probs = nncore::forward(&c.params, &c.topology, &c.batch).unwrap();
        prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        let labels: Vec<u8> = c.batch.iter().map(|e| e.label).collect();
        prop_assert!(nncore::loss(&probs, &labels).unwrap() >= 0.0);
    }

    #[test]
    fn sgd_never_touches_fixed_segments(seed in 0u64..1_000_000, bits in any::<u64>(), lr in 0.0f64..2.0) {
        let c = small_case(seed);
        let mask = random_mask(c.params.segments().len(), bits);
        let g = nncore::backward(&c.params, &c.topology, &c.batch).unwrap();
        let next = nncore::sgd_step(&c.params, &g, lr, &mask).unwrap();
        for (s, (a, b)) in c.params.segments().iter().zip(next.segments()).enumerate() {
            if !mask.is_adaptive(s) {
                prop_assert_eq!(&a.values, &b.values);
            }
        }
    }

    #[test]
    fn outer_update_is_convex_and_masked(seed in 0u64..1_000_000, bits in any::<u64>(), beta in 0.0f64..=1.0) {
        let c = small_case(seed);
        let other = nncore::init_params(&c.topology, seed ^ 1);
        let third = nncore::init_params(&c.topology, seed ^ 2);
        let mask = random_mask(c.params.segments().len(), bits);
        let out = outer_update(&c.params, &[other.clone(), third.clone()], beta, &mask).unwrap();
        for (s, seg) in out.segments().iter().enumerate() {
            for (j, &v) in seg.values.iter().enumerate() {
                let t0 = c.params.segments()[s].values[j];
                if !mask.is_adaptive(s) {
                    prop_assert_eq!(v.to_bits(), t0.to_bits());
                    continue;
                }
                let mean = (other.segments()[s].values[j] + third.segments()[s].values[j]) / 2.0;
                let (lo, hi) = (t0.min(mean), t0.max(mean));
                prop_assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn anneal_is_monotone_and_bounded(total in 1usize..500, start in 0.0f64..2.0, frac in 0.0f64..=1.0) {
        let end = start * frac;
        let mut prev = f64::INFINITY;
        for step in 0..total {
            let b = linear_anneal(step, total, start, end).unwrap();
            prop_assert!(b <= prev && b >= end - 1e-12 && b <= start + 1e-12);
            prev = b;
        }
        prop_assert!(linear_anneal(total, total, start, end).is_err());
    }

    #[test]
    fn split_merge_round_trip(seed in 0u64..1_000_000, fixed in proptest::collection::btree_set(1u8..=4, 0..3)) {
        let c = small_case(seed);
        let spec = PartitionSpec::new(fixed.iter().copied().filter(|&l| (l as usize) < c.topology.layer_count()));
        let mask = partition_mask(&c.topology, &spec).unwrap();
        let (f, a) = mask.split(&c.params).unwrap();
        prop_assert_eq!(f.len() + a.len(), c.params.len());
        prop_assert_eq!(mask.merge(&c.topology, &f, &a).unwrap(), c.params.clone());
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        raw in proptest::collection::vec((0u8..8, 0u8..=1), 2..120)
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 8.0).collect();
        let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
        match auc_scores(&scores, &labels) {
            Ok(a) => prop_assert!((a - brute_force_auc(&scores, &labels)).abs() <= 1e-12),
            Err(_) => prop_assert!(labels.iter().all(|&l| l == labels[0])),
        }
    }

    #[test]
    fn auc_rank_invariant(raw in proptest::collection::vec((0.0f64..1.0, 0u8..=1), 2..100)) {
        let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auc_scores(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        prop_assert!((auc_scores(&warped, &labels).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc_scores(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn support_split_is_a_partition(n in 2usize..60, fraction in 0.01f64..0.99) {
        let task = TaskDataset {
            user_id: 1,
            examples: (0..n).map(|i| Example::new(vec![i as u32 % 3], (i % 2) as u8)).collect(),
        };
        let (s, q) = split_support_query(&task, fraction).unwrap();
        prop_assert!(!s.is_empty() && !q.is_empty());
        prop_assert_eq!(s.len(), support_len(n, fraction));
        let joined: Vec<Example> = s.into_iter().chain(q).collect();
        prop_assert_eq!(joined, task.examples);
    }

    #[test]
    fn dataset_round_trip(seed in 0u64..1_000_000, users in 1usize..6) {
        let c = small_case(seed);
        let tasks = tasks_for(&c, users);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &tasks, c.topology.vocab_sizes(), Some("prop")).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        prop_assert_eq!(back.vocab_sizes, c.topology.vocab_sizes().to_vec());
        prop_assert_eq!(back.tasks, tasks);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1_000_000, step in 0usize..10_000) {
        let c = small_case(seed);
        let state = MetaState { theta0: c.params.clone(), outer_step: step, rng_seed: seed };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &state, &c.topology, "h").unwrap();
        let back = read_checkpoint(&buf[..]).unwrap().state;
        let bits = |p: &ParameterSet| p.iter_flat().map(f64::to_bits).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.theta0), bits(&state.theta0));
        prop_assert_eq!(back.outer_step, step);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// With nothing fixed and no online outer step, the proposed method is
    /// plain per-user finetuning from θ⁰.
    #[test]
    fn online_reduces_to_finetuning(seed in 0u64..1_000_000, users in 1usize..12) {
        let c = small_case(seed);
        let stream = tasks_for(&c, users);
        let hp = Hyperparams {
            inner_lr: 0.3,
            online_outer_lr_start: 0.0,
            online_outer_lr_end: 0.0,
            ..Hyperparams::desk()
        };
        let meta = MetaState { theta0: c.params.clone(), outer_step: 0, rng_seed: seed };
        let (state, log) = online_meta_train(&meta, &stream, &hp, &c.topology, &PartitionSpec::all_adaptive()).unwrap();
        let reference = finetune_stream(&c.params, &stream, &hp, &c.topology).unwrap();
        prop_assert_eq!(log, reference);
        prop_assert_eq!(state.theta0, c.params.clone());
    }

    /// Scores in the log depend only on earlier labels: flipping the label of
    /// the final item changes no recorded score.
    #[test]
    fn prequential_scores_ignore_future_labels(seed in 0u64..1_000_000, users in 1usize..8) {
        let c = small_case(seed);
        let stream = tasks_for(&c, users);
        let hp = Hyperparams { inner_lr: 0.3, ..Hyperparams::desk() };
        let meta = MetaState { theta0: c.params.clone(), outer_step: 0, rng_seed: seed };
        let spec = PartitionSpec::all_adaptive();
        let (_, log) = online_meta_train(&meta, &stream, &hp, &c.topology, &spec).unwrap();
        let mut flipped = stream.clone();
        let last = flipped.last_mut().unwrap().examples.last_mut().unwrap();
        last.label = 1 - last.label;
        let (_, log2) = online_meta_train(&meta, &flipped, &hp, &c.topology, &spec).unwrap();
        prop_assert_eq!(log.scores(), log2.scores());
    }

    #[test]
    fn online_run_is_deterministic(seed in 0u64..1_000_000) {
        let c = small_case(seed);
        let stream = tasks_for(&c, 7);
        let hp = Hyperparams::desk();
        let meta = MetaState { theta0: c.params.clone(), outer_step: 0, rng_seed: seed };
        let spec = PartitionSpec::all_adaptive();
        let a = online_meta_train(&meta, &stream, &hp, &c.topology, &spec).unwrap();
        let b = online_meta_train(&meta, &stream, &hp, &c.topology, &spec).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }
}

#[test]
fn log_from_scores_matches_auc() {
    let c = small_case(3);
    let tasks = tasks_for(&c, 4);
    let total: usize = tasks.iter().map(|t| t.len()).sum();
    let scores: Vec<f64> = (0..total).map(|i| (i as f64 * 0.37).sin()).collect();
    let log: EvalLog = log_from_scores(&tasks, &scores).unwrap();
    let labels = log.labels();
    if labels.contains(&0) && labels.contains(&1) {
        assert!((metarec::eval::auc(&log).unwrap() - brute_force_auc(&scores, &labels)).abs() < 1e-12);
    }
    assert!(log_from_scores(&tasks, &scores[1..]).is_err());
}
