//! Online class-bias correction of the classification head.
//!
//! Each head row `j` is treated as a sample from a distribution with mean
//! `μ_j` and (population) standard deviation `σ_j`. Bias is removed either
//! by rescaling rows directly to `N(0, s)` or by a KL penalty towards it.
//! Bias entries of the head are not part of the statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{ClassId, DenseLayer};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    /// Target standard deviation of each weight group.
    pub s: f64,
    /// Weight of the BC term in the total loss.
    pub w_bc: f64,
    pub eps: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            s: 0.05,
            w_bc: 5.0,
            eps: 1e-8,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("bc.s must be positive, got {}", self.s)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("bc.eps must be positive, got {}", self.eps)));
        }
        if !(self.w_bc >= 0.0 && self.w_bc.is_finite()) {
            return Err(Error::Config(format!("bc.w_bc must be non-negative, got {}", self.w_bc)));
        }
        Ok(())
    }
}

/// How bias correction is applied during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcMode {
    /// KL penalty added to the cross-entropy loss.
    #[default]
    Loss,
    /// Rescale every active group after each optimizer step.
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupStats {
    pub groups: BTreeMap<ClassId, GroupStat>,
}

impl GroupStats {
    pub fn get(&self, j: ClassId) -> Option<GroupStat> {
        self.groups.get(&j).copied()
    }
}

fn row_stat(row: &[f64]) -> GroupStat {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;
    GroupStat {
        mean,
        std: var.sqrt(),
    }
}

fn check_active(head: &DenseLayer, active: &BTreeSet<ClassId>) -> Result<()> {
    let n_classes = head.out_dim();
    if let Some(&j) = active.iter().find(|&&j| j >= n_classes) {
        return Err(Error::ClassOutOfRange { class: j, n_classes });
    }
    if !active.is_empty() && head.in_dim() < 2 {
        return Err(Error::DegenerateGroup {
            class: *active.iter().next().unwrap(),
            width: head.in_dim(),
        });
    }
    Ok(())
}

/// Mean and population standard deviation of each active head row.
pub fn group_stats(head: &DenseLayer, active: &BTreeSet<ClassId>) -> Result<GroupStats> {
    check_active(head, active)?;
    let groups = active
        .iter()
        .map(|&j| (j, row_stat(head.weights.row(j))))
        .collect();
    Ok(GroupStats { groups })
}

/// Result of [`explicit_normalize`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NormalizeReport {
    /// Active classes left untouched because their row had zero spread.
    pub skipped: Vec<ClassId>,
}

/// Rescales each active row to zero mean and standard deviation `s`.
/// Rows with `σ_j == 0` are skipped and reported.
pub fn explicit_normalize(
    head: &mut DenseLayer,
    active: &BTreeSet<ClassId>,
    cfg: &BcConfig,
) -> Result<NormalizeReport> {
    let stats = group_stats(head, active)?;
    let mut report = NormalizeReport::default();
    for (&j, st) in &stats.groups {
        if st.std == 0.0 {
            report.skipped.push(j);
            continue;
        }
        let scale = cfg.s / st.std;
        for w in head.weights.row_mut(j) {
            *w = (*w - st.mean) * scale;
        }
    }
    if !report.skipped.is_empty() {
        log::debug!("explicit_normalize skipped constant groups {:?}", report.skipped);
    }
    Ok(report)
}

/// KL divergence of each active group from `N(0, s)`, averaged over the
/// active classes.
pub fn bc_loss(head: &DenseLayer, active: &BTreeSet<ClassId>, cfg: &BcConfig) -> Result<f64> {
    let stats = group_stats(head, active)?;
    if stats.groups.is_empty() {
        return Ok(0.0);
    }
    let s2 = cfg.s * cfg.s;
    let sum: f64 = stats
        .groups
        .values()
        .map(|st| {
            let m = st.mean * st.mean / s2;
            let u = st.std * st.std / s2;
            m + u - (u + cfg.eps).ln() - 1.0
        })
        .sum();
    Ok(sum / (2.0 * stats.groups.len() as f64))
}

/// Analytic gradient of [`bc_loss`] w.r.t. the head weights. Inactive rows
/// are exactly zero.
pub fn bc_loss_grad(head: &DenseLayer, active: &BTreeSet<ClassId>, cfg: &BcConfig) -> Result<Matrix> {
    let stats = group_stats(head, active)?;
    let mut grad = Matrix::zeros(head.out_dim(), head.in_dim());
    if stats.groups.is_empty() {
        return Ok(grad);
    }
    let n = head.in_dim() as f64;
    let s2 = cfg.s * cfg.s;
    let outer = 1.0 / (2.0 * stats.groups.len() as f64);
    for (&j, st) in &stats.groups {
        let var = st.std * st.std;
        // ∂/∂σ² of the log term, guarded like the loss: s² / (σ² + ε·s²)
        let spread = 1.0 - s2 / (var + cfg.eps * s2);
        let mean_part = 2.0 * st.mean / (n * s2);
        let row = head.weights.row(j);
        for (g, &w) in grad.row_mut(j).iter_mut().zip(row) {
            *g = outer * (mean_part + spread * 2.0 * (w - st.mean) / (n * s2));
        }
    }
    Ok(grad)
}

/// Gradients of the combined loss, split by where they enter the network.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    /// ∂L_CE/∂logits, to be masked and backpropagated.
    pub logits: Matrix,
    /// `w_BC · ∂L_BC/∂head`, added straight to the head weight gradient.
    pub head: Matrix,
}

pub fn combined_loss(
    ce: f64,
    ce_grad_logits: Matrix,
    bc: f64,
    bc_grad_head: &Matrix,
    cfg: &BcConfig,
) -> (f64, GradBundle) {
    let total = ce + cfg.w_bc * bc;
    let head = bc_grad_head.map(|g| cfg.w_bc * g);
    (
        total,
        GradBundle {
            logits: ce_grad_logits,
            head,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Activation;

    fn head_from(rows: &[Vec<f64>]) -> DenseLayer {
        let w = Matrix::from_rows(rows).unwrap();
        let n = w.rows();
        DenseLayer::new(w, vec![0.0; n], Activation::Identity).unwrap()
    }

    fn set(items: &[ClassId]) -> BTreeSet<ClassId> {
        items.iter().copied().collect()
    }

    #[test]
    fn stats_simple_rows() {
        let h = head_from(&[vec![1.0, -1.0], vec![0.0, 0.0]]);
        let st = group_stats(&h, &set(&[0, 1])).unwrap();
        assert_eq!(st.get(0), Some(GroupStat { mean: 0.0, std: 1.0 }));
        assert_eq!(st.get(1), Some(GroupStat { mean: 0.0, std: 0.0 }));
    }

    #[test]
    fn stats_errors() {
        let narrow = head_from(&[vec![1.0], vec![2.0]]);
        assert!(matches!(
            group_stats(&narrow, &set(&[0])),
            Err(Error::DegenerateGroup { width: 1, .. })
        ));
        let h = head_from(&[vec![1.0, 2.0]]);
        assert!(matches!(
            group_stats(&h, &set(&[3])),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn normalize_two_weight_row() {
        let mut h = head_from(&[vec![1.0, -1.0], vec![3.0, 7.0]]);
        let cfg = BcConfig::default();
        let report = explicit_normalize(&mut h, &set(&[0]), &cfg).unwrap();
        assert!(report.skipped.is_empty());
        assert_eq!(h.weights.row(0), &[0.05, -0.05]);
        // inactive row untouched
        assert_eq!(h.weights.row(1), &[3.0, 7.0]);
    }

    #[test]
    fn normalize_skips_constant_rows() {
        let mut h = head_from(&[vec![0.0, 0.0, 0.0], vec![2.0, 2.0, 2.0]]);
        let report = explicit_normalize(&mut h, &set(&[0, 1]), &BcConfig::default()).unwrap();
        assert_eq!(report.skipped, vec![0, 1]);
        assert_eq!(h.weights.row(1), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn normalized_row_is_fixed_point() {
        let mut h = head_from(&[vec![0.05, -0.05, 0.05, -0.05]]);
        let before = h.clone();
        explicit_normalize(&mut h, &set(&[0]), &BcConfig::default()).unwrap();
        for (a, b) in h.weights.as_slice().iter().zip(before.weights.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bc_loss_at_target_is_near_zero() {
        let h = head_from(&[vec![0.05, -0.05], vec![-0.05, 0.05]]);
        let cfg = BcConfig::default();
        let l = bc_loss(&h, &set(&[0, 1]), &cfg).unwrap();
        assert!((l - (-(1.0f64 + cfg.eps).ln() / 2.0)).abs() < 1e-15);
        let g = bc_loss_grad(&h, &set(&[0, 1]), &cfg).unwrap();
        assert!(g.as_slice().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn bc_loss_closed_form_single_row() {
        let h = head_from(&[vec![0.1, -0.1]]);
        let cfg = BcConfig::default();
        let l = bc_loss(&h, &set(&[0]), &cfg).unwrap();
        // μ = 0, σ = 0.1, (σ/s)² = 4
        let oracle = 0.5 * (0.0 + 4.0 - (4.0f64 + 1e-8).ln() - 1.0);
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn bc_grad_zero_on_inactive_rows() {
        let h = head_from(&[vec![0.3, -0.2, 0.9], vec![1.0, 2.0, -3.0], vec![0.1, 0.1, 0.4]]);
        let g = bc_loss_grad(&h, &set(&[0, 2]), &BcConfig::default()).unwrap();
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        assert!(g.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn combined_loss_weighting() {
        let cfg = BcConfig::default();
        let (total, bundle) = combined_loss(0.0, Matrix::zeros(1, 2), 0.5, &Matrix::zeros(2, 3), &cfg);
        assert_eq!(total, 2.5);
        assert_eq!(bundle.head.shape(), (2, 3));

        let off = BcConfig { w_bc: 0.0, ..cfg };
        let bc_grad = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (total, bundle) = combined_loss(1.25, Matrix::zeros(1, 1), 7.0, &bc_grad, &off);
        assert_eq!(total, 1.25);
        assert!(bundle.head.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(BcConfig::default().validate().is_ok());
        assert!(BcConfig { s: 0.0, ..Default::default() }.validate().is_err());
        assert!(BcConfig { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(BcConfig { w_bc: -1.0, ..Default::default() }.validate().is_err());
    }
}
