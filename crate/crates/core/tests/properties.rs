use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tpc_core::bias::{bc_loss, explicit_normalize, group_stats, BcConfig};
use tpc_core::masking::{phase1_mask, phase2_mask, MaskContext};
use tpc_core::metrics::{amca_of, evaluate, EvalMode};
use tpc_core::net::{softmax_rows, Activation, DenseLayer};
use tpc_core::replay::{balanced_quotas, batch_ratio};
use tpc_core::scenario::LabeledSplit;
use tpc_core::strategies::phase_epochs;
use tpc_core::{Matrix, SplitModel};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn softmax_with_labels() -> impl Strategy<Value = (Matrix, Vec<usize>)> {
    (1usize..6, 2usize..7).prop_flat_map(|(n, c)| {
        (
            matrix(n, c, -6.0, 6.0).prop_map(|m| softmax_rows(&m)),
            prop::collection::vec(0..c, n),
        )
    })
}

fn head(out: usize, width: usize) -> impl Strategy<Value = DenseLayer> {
    (matrix(out, width, -2.0, 2.0), prop::collection::vec(-1.0..1.0f64, out))
        .prop_map(|(w, b)| DenseLayer::new(w, b, Activation::Identity).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(m in (1usize..8, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c, -50.0, 50.0))) {
        let p = softmax_rows(&m);
        prop_assert_eq!(p.shape(), m.shape());
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn phase1_mask_opens_novel_columns_only(
        n_mb in 1usize..10,
        n_classes in 1usize..12,
        novel in prop::collection::btree_set(0usize..12, 0..6),
    ) {
        let empty = BTreeSet::new();
        let ctx = MaskContext { batch_labels: &[], novel: &novel, experience_classes: &empty, t: 0.5 };
        let mask = phase1_mask(&ctx, n_mb, n_classes);
        prop_assert_eq!(mask.shape(), (n_mb, n_classes));
        for r in 0..n_mb {
            for k in 0..n_classes {
                prop_assert_eq!(mask.is_open(r, k), novel.contains(&k));
            }
        }
    }

    #[test]
    fn phase2_mask_rule(
        (p, labels) in softmax_with_labels(),
        exp in prop::collection::btree_set(0usize..7, 0..4),
        t in 0.01f64..=1.0,
    ) {
        let novel = BTreeSet::new();
        let ctx = MaskContext { batch_labels: &labels, novel: &novel, experience_classes: &exp, t };
        let mask = phase2_mask(&ctx, &p).unwrap();
        prop_assert_eq!(mask.shape(), p.shape());
        for (r, &y) in labels.iter().enumerate() {
            // the label column is never blocked since p < t·p fails for t ≤ 1
            prop_assert!(mask.is_open(r, y));
            for k in 0..p.cols() {
                let blocked = !exp.contains(&k) && p.get(r, k) < t * p.get(r, y);
                prop_assert_eq!(mask.is_open(r, k), !blocked);
            }
        }
    }

    #[test]
    fn batch_ratio_partitions_total(n_s in 0usize..5000, n_replay in 0usize..5000, total in 1usize..512) {
        prop_assume!(n_s + n_replay > 0);
        let plan = batch_ratio(n_s, n_replay, total).unwrap();
        prop_assert_eq!(plan.total(), total);
        let exact = total as f64 * n_s as f64 / (n_s + n_replay) as f64;
        prop_assert!((plan.n_mbe as f64 - exact).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn quotas_fill_capacity_and_balance(
        capacity in 0usize..300,
        seen in prop::collection::btree_map(0usize..20, 1u64..200, 1..10),
    ) {
        let q = balanced_quotas(capacity, &seen);
        let total_seen: u64 = seen.values().sum();
        prop_assert_eq!(q.values().sum::<usize>() as u64, (capacity as u64).min(total_seen));
        for (c, &n) in &q {
            prop_assert!(n as u64 <= seen[c]);
        }
        // water level: a class below its own supply sits within one of the largest quota
        let top = q.values().copied().max().unwrap_or(0);
        for (c, &n) in &q {
            if (n as u64) < seen[c] {
                prop_assert!(n + 1 >= top, "class {c}: {n} vs {top}");
            }
        }
    }

    #[test]
    fn bc_loss_is_bounded_below(h in (1usize..6, 2usize..10).prop_flat_map(|(o, w)| head(o, w)), s in 0.01f64..2.0) {
        let cfg = BcConfig { s, ..BcConfig::default() };
        let active: BTreeSet<usize> = (0..h.out_dim()).collect();
        let loss = bc_loss(&h, &active, &cfg).unwrap();
        prop_assert!(loss.is_finite());
        prop_assert!(loss >= -cfg.eps / 2.0 - 1e-12, "loss {loss}");
    }

    #[test]
    fn explicit_normalize_hits_target(
        mut h in (1usize..6, 2usize..10).prop_flat_map(|(o, w)| head(o, w)),
        s in 0.01f64..2.0,
        pick in prop::collection::vec(any::<bool>(), 6),
    ) {
        let cfg = BcConfig { s, ..BcConfig::default() };
        let active: BTreeSet<usize> = (0..h.out_dim()).filter(|&j| pick[j]).collect();
        let before = h.clone();
        let report = explicit_normalize(&mut h, &active, &cfg).unwrap();
        let stats = group_stats(&h, &active).unwrap();
        for (&j, st) in &stats.groups {
            if report.skipped.contains(&j) {
                continue;
            }
            prop_assert!(st.mean.abs() < 1e-12);
            prop_assert!((st.std - s).abs() < 1e-9);
        }
        for j in (0..h.out_dim()).filter(|j| !active.contains(j)) {
            prop_assert_eq!(h.weights.row(j), before.weights.row(j));
        }
        prop_assert_eq!(&h.bias, &before.bias);
    }

    #[test]
    fn phase_epochs_sum_to_total(total in 1usize..200, f1 in 0.0f64..=0.5, f3 in 0.0f64..=0.5, p3 in any::<bool>()) {
        match phase_epochs(total, f1, f3, p3) {
            Ok((e1, e2, e3)) => {
                prop_assert_eq!(e1 + e2 + e3, total);
                if f1 > 0.0 { prop_assert!(e1 >= 1); } else { prop_assert_eq!(e1, 0); }
                if !p3 || f3 == 0.0 { prop_assert_eq!(e3, 0); }
            }
            // only tiny budgets can fail to host both outer phases
            Err(_) => prop_assert!(total < 2 || (f1 > 0.0 && p3 && f3 > 0.0 && total <= 3)),
        }
    }

    #[test]
    fn amca_lies_within_record_range(seed in any::<u64>(), n_exp in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SplitModel::mlp(3, &[5], &[], 4, &mut rng);
        let x = Matrix::from_vec(40, 3, (0..120).map(|i| ((i * 37 % 17) as f64 - 8.0) / 3.0).collect()).unwrap();
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let test = LabeledSplit { x, y };
        let seen: BTreeSet<usize> = (0..4).collect();
        let mut records = Vec::new();
        for e in 1..=n_exp {
            let mut m = model.clone();
            for w in m.head_mut().weights.as_mut_slice() {
                *w *= e as f64 - 2.5;
            }
            records.push(evaluate(&m, &test, &seen, EvalMode::Fixed, e).unwrap());
        }
        let a = amca_of(&records);
        let lo = records.iter().map(|r| r.mean_class_accuracy).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.mean_class_accuracy).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn evaluate_matches_counting_oracle(seed in any::<u64>(), growing in any::<bool>(), n_seen in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SplitModel::mlp(4, &[6], &[6], 5, &mut rng);
        let data: Vec<f64> = (0..400).map(|i| (((i as u64).wrapping_mul(seed | 1) % 1000) as f64 - 500.0) / 150.0).collect();
        let x = Matrix::from_vec(100, 4, data).unwrap();
        let y: Vec<usize> = (0..100).map(|i| (i * 7 + seed as usize) % 5).collect();
        let test = LabeledSplit { x: x.clone(), y: y.clone() };
        let seen: BTreeSet<usize> = (0..n_seen).collect();
        let mode = if growing { EvalMode::Growing } else { EvalMode::Fixed };
        let rec = evaluate(&model, &test, &seen, mode, 1).unwrap();

        let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (r, &label) in y.iter().enumerate() {
            if growing && !seen.contains(&label) {
                continue;
            }
            let logits = model.forward(&Matrix::from_rows(&[x.row(r).to_vec()]).unwrap()).unwrap().logits;
            let row = logits.row(0);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            let e = hits.entry(label).or_default();
            e.1 += 1;
            if best == label {
                e.0 += 1;
            }
        }
        let oracle: Vec<f64> = hits.values().map(|&(c, n)| c as f64 / n as f64).collect();
        prop_assert_eq!(rec.per_class.len(), oracle.len());
        for ((_, got), want) in rec.per_class.iter().zip(&oracle) {
            prop_assert!((got - want).abs() < 1e-15);
        }
        let mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
        prop_assert!((rec.mean_class_accuracy - mean).abs() < 1e-12);
    }
}
