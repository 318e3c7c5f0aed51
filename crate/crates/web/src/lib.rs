//! Browser demo: gradient masks on a fixed example batch, head bias
//! correction, and a small TPC vs naive run. Every exported function returns
//! a JSON string; failures come back as `{"error": "..."}`.

use std::collections::BTreeSet;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use tpc_core::bias::{bc_loss, explicit_normalize, group_stats, BcConfig};
use tpc_core::masking::{phase1_mask, phase2_mask, MaskContext};
use tpc_core::net::{Activation, DenseLayer};
use tpc_core::scenario::{gen_synthetic, make_class_incremental};
use tpc_core::strategies::{run_stream, Architecture, RunSettings, StrategyKind, TrainConfig};
use tpc_core::{Matrix, Result};

/// Example mini-batch: 7 samples over 5 classes, labels 0-based.
const LABELS: [usize; 7] = [3, 3, 1, 1, 0, 1, 2];
const SOFTMAX: [[f64; 5]; 7] = [
    [0.15, 0.15, 0.25, 0.40, 0.05],
    [0.30, 0.05, 0.10, 0.50, 0.05],
    [0.10, 0.60, 0.20, 0.05, 0.05],
    [0.05, 0.70, 0.10, 0.10, 0.05],
    [0.70, 0.10, 0.10, 0.05, 0.05],
    [0.30, 0.55, 0.05, 0.05, 0.05],
    [0.10, 0.10, 0.65, 0.10, 0.05],
];

#[derive(Debug, Serialize)]
pub struct MaskView {
    pub labels: Vec<usize>,
    pub novel: Vec<usize>,
    pub experience: Vec<usize>,
    pub t: f64,
    pub softmax: Vec<Vec<f64>>,
    pub phase1_open: Vec<Vec<bool>>,
    pub phase2_open: Vec<Vec<bool>>,
}

fn open_rows(m: &tpc_core::masking::MaskMatrix) -> Vec<Vec<bool>> {
    let (rows, cols) = m.shape();
    (0..rows).map(|r| (0..cols).map(|k| m.is_open(r, k)).collect()).collect()
}

pub fn mask_view(t: f64) -> Result<MaskView> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(tpc_core::Error::Config(format!("t must be in (0, 1], got {t}")));
    }
    let novel = BTreeSet::from([3]);
    let experience = BTreeSet::from([1, 3]);
    let softmax = Matrix::from_rows(&SOFTMAX.map(|r| r.to_vec()))?;
    let ctx = MaskContext {
        batch_labels: &LABELS,
        novel: &novel,
        experience_classes: &experience,
        t,
    };
    Ok(MaskView {
        labels: LABELS.to_vec(),
        novel: novel.iter().copied().collect(),
        experience: experience.iter().copied().collect(),
        t,
        softmax: SOFTMAX.iter().map(|r| r.to_vec()).collect(),
        phase1_open: open_rows(&phase1_mask(&ctx, LABELS.len(), 5)),
        phase2_open: open_rows(&phase2_mask(&ctx, &softmax)?),
    })
}

#[derive(Debug, Serialize)]
pub struct RowSummary {
    pub mean: f64,
    pub std: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct BiasView {
    pub s: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub before: Vec<RowSummary>,
    pub after: Vec<RowSummary>,
}

fn summarize(head: &DenseLayer, active: &BTreeSet<usize>) -> Result<Vec<RowSummary>> {
    let stats = group_stats(head, active)?;
    Ok(stats
        .groups
        .iter()
        .map(|(&j, st)| RowSummary {
            mean: st.mean,
            std: st.std,
            weights: head.weights.row(j).to_vec(),
        })
        .collect())
}

/// A head whose later rows are shifted and stretched, the way a head
/// drifts towards recently trained classes, before and after rescaling
/// every row to zero mean and standard deviation `s`.
pub fn bias_view(s: f64, drift: f64, seed: u64) -> Result<BiasView> {
    let (classes, width) = (5, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let mut w = Matrix::zeros(classes, width);
    for j in 0..classes {
        let scale = 1.0 + drift * j as f64;
        for c in 0..width {
            w.set(j, c, scale * noise.sample(&mut rng) + drift * 0.05 * j as f64);
        }
    }
    let mut head = DenseLayer::new(w, vec![0.0; classes], Activation::Identity)?;
    let cfg = BcConfig {
        s,
        ..BcConfig::default()
    };
    cfg.validate()?;
    let active: BTreeSet<usize> = (0..classes).collect();
    let before = summarize(&head, &active)?;
    let loss_before = bc_loss(&head, &active, &cfg)?;
    explicit_normalize(&mut head, &active, &cfg)?;
    Ok(BiasView {
        s,
        loss_before,
        loss_after: bc_loss(&head, &active, &cfg)?,
        before,
        after: summarize(&head, &active)?,
    })
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub strategy: String,
    pub accuracy: Vec<f64>,
}

/// Mean-class accuracy after each experience of a 6-class stream
/// (2 classes first, then one per experience).
pub fn toy_curves(seed: u64, epochs: usize) -> Result<Vec<Curve>> {
    let ds = gen_synthetic(6, 8, 40, 6.0, seed)?;
    let stream = make_class_incremental(&ds, 5, 2, 1, seed)?;
    let mut settings = RunSettings {
        arch: Architecture {
            llf: vec![16],
            csf: vec![16],
        },
        train: TrainConfig {
            epochs,
            replay_capacity: 40,
            ..TrainConfig::default()
        },
        timing: false,
        ..RunSettings::default()
    };
    settings.tpc.bc.s = 0.3;
    [StrategyKind::Tpc, StrategyKind::Naive]
        .into_iter()
        .map(|kind| {
            let h = run_stream(kind, &stream, &ds.test, ds.n_classes, &settings, seed)?;
            Ok(Curve {
                strategy: h.strategy,
                accuracy: h.records.iter().map(|r| r.mean_class_accuracy).collect(),
            })
        })
        .collect()
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[wasm_bindgen]
pub fn masks(t: f64) -> String {
    to_json(mask_view(t))
}

#[wasm_bindgen]
pub fn bias_correction(s: f64, drift: f64, seed: u32) -> String {
    to_json(bias_view(s, drift, seed as u64))
}

#[wasm_bindgen]
pub fn tpc_vs_naive(seed: u32, epochs: u32) -> String {
    to_json(toy_curves(seed as u64, epochs.clamp(1, 20) as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_at_half_match_example() {
        let v = mask_view(0.5).unwrap();
        // sample 0 is class 3: classes 0 and 4 fall below 0.20, class 2 does not
        assert_eq!(v.phase2_open[0], vec![false, true, true, true, false]);
        assert_eq!(v.phase2_open[1], vec![true, true, false, true, false]);
        assert!(v.phase1_open.iter().all(|r| *r == vec![false, false, false, true, false]));
    }

    #[test]
    fn tiny_threshold_opens_everything() {
        let v = mask_view(1e-6).unwrap();
        assert!(v.phase2_open.iter().flatten().all(|&o| o));
    }

    #[test]
    fn bad_threshold_is_reported() {
        let out = masks(0.0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v["error"].as_str().unwrap().contains("t must be"));
    }

    #[test]
    fn bias_view_normalizes() {
        let v = bias_view(0.05, 1.0, 3).unwrap();
        assert!(v.loss_before > v.loss_after);
        assert!(v.loss_after.abs() < 1e-6);
        for r in &v.after {
            assert!(r.mean.abs() < 1e-12);
            assert!((r.std - 0.05).abs() < 1e-12);
        }
        assert!(v.before[4].std > v.before[0].std);
    }

    #[test]
    fn curves_have_one_point_per_experience() {
        let out = tpc_vs_naive(1, 4);
        let v: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[0]["strategy"], "tpc");
        assert_eq!(v[0]["accuracy"].as_array().unwrap().len(), 5);
        let last = |i: usize| v[i]["accuracy"].as_array().unwrap().last().unwrap().as_f64().unwrap();
        assert!(last(0) > last(1));
    }
}
