//! Binary gates on the `(n_mb × n_classes)` logit-gradient tensor.
//!
//! A zero entry `(r, k)` blocks the correction that sample `r` would send
//! through the output neuron of class `k`.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::ClassId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    open: Vec<bool>,
}

impl MaskMatrix {
    pub fn ones(rows: usize, cols: usize) -> Self {
        MaskMatrix {
            rows,
            cols,
            open: vec![true; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MaskMatrix {
            rows,
            cols,
            open: vec![false; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// True when the correction for `(r, k)` is allowed through.
    pub fn is_open(&self, r: usize, k: usize) -> bool {
        self.open[r * self.cols + k]
    }

    fn set(&mut self, r: usize, k: usize, open: bool) {
        self.open[r * self.cols + k] = open;
    }

    /// Blocked `(row, class)` cells.
    pub fn blocked(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |k| (r, k)))
            .filter(|&(r, k)| !self.is_open(r, k))
            .collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self.open.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("shape by construction")
    }
}

#[derive(Clone, Debug)]
pub struct MaskContext<'a> {
    pub batch_labels: &'a [ClassId],
    /// Classes never seen before the current experience.
    pub novel: &'a BTreeSet<ClassId>,
    /// All classes present in the current experience.
    pub experience_classes: &'a BTreeSet<ClassId>,
    pub t: f64,
}

/// Phase I: only the columns of novel classes stay open, in every row.
pub fn phase1_mask(ctx: &MaskContext<'_>, n_mb: usize, n_classes: usize) -> MaskMatrix {
    let mut mask = MaskMatrix::zeros(n_mb, n_classes);
    for r in 0..n_mb {
        for &k in ctx.novel.iter().filter(|&&k| k < n_classes) {
            mask.set(r, k, true);
        }
    }
    mask
}

/// Phase II: block `(r, k)` iff `k` is not a class of the current
/// experience and `softmax[r, k] < t · softmax[r, y_r]`.
pub fn phase2_mask(ctx: &MaskContext<'_>, softmax: &Matrix) -> Result<MaskMatrix> {
    let (n_mb, n_classes) = softmax.shape();
    if ctx.batch_labels.len() != n_mb {
        return Err(Error::shape("phase2_mask", n_mb, ctx.batch_labels.len()));
    }
    let mut mask = MaskMatrix::ones(n_mb, n_classes);
    for (r, &y) in ctx.batch_labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::Label { label: y, n_classes });
        }
        let row = softmax.row(r);
        let threshold = ctx.t * row[y];
        for (k, &p) in row.iter().enumerate() {
            if !ctx.experience_classes.contains(&k) && p < threshold {
                mask.set(r, k, false);
            }
        }
    }
    Ok(mask)
}

pub fn apply_mask(grad_logits: &Matrix, mask: &MaskMatrix) -> Result<Matrix> {
    if grad_logits.shape() != mask.shape() {
        return Err(Error::shape(
            "apply_mask",
            format!("{:?}", grad_logits.shape()),
            format!("{:?}", mask.shape()),
        ));
    }
    let mut out = grad_logits.clone();
    for (v, &open) in out.as_mut_slice().iter_mut().zip(&mask.open) {
        if !open {
            *v = 0.0;
        }
    }
    Ok(out)
}
