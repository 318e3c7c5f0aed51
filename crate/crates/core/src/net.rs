//! Feed-forward network engine with manual backpropagation.
//!
//! A [`SplitModel`] is the composition `head ∘ csf ∘ llf` of three blocks of
//! dense layers. The `llf` block extracts generic low-level features, `csf`
//! holds the shared class-specific features and the head is a single linear
//! layer whose row `j` (weights plus bias entry) belongs exclusively to
//! class `j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub type ClassId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape("DenseLayer::new", weights.rows(), bias.len()));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::shape("DenseLayer::new", "finite parameters", "non-finite"));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Fan-in scaled uniform initialization, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let gain = match activation {
            Activation::Relu => 6.0,
            Activation::Identity => 3.0,
        };
        let limit = (gain / in_dim as f64).sqrt();
        let mut layer = DenseLayer::zeros(in_dim, out_dim, activation);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Returns `(pre_activation, post_activation)`.
    fn forward(&self, x: &Matrix) -> (Matrix, Matrix) {
        let mut pre = x.matmul_t(&self.weights);
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        let post = match self.activation {
            Activation::Identity => pre.clone(),
            act => pre.map(|v| act.apply(v)),
        };
        (pre, post)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Llf,
    Csf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    llf: Vec<DenseLayer>,
    csf: Vec<DenseLayer>,
    head: DenseLayer,
    frozen_llf: bool,
    frozen_csf: bool,
}

/// Activations recorded by [`SplitModel::forward`] for one mini-batch.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input fed to each layer, in `llf, csf, head` order.
    pub inputs: Vec<Matrix>,
    /// Pre-activation of each layer, same order.
    pub pre: Vec<Matrix>,
    pub logits: Matrix,
    pub softmax: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.logits.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrad {
            weights: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    fn matches(&self, layer: &DenseLayer) -> bool {
        self.weights.shape() == layer.weights.shape() && self.bias.len() == layer.bias.len()
    }

    fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(&self.bias)
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }
}

/// Parameter gradients. Frozen blocks carry `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub llf: Option<Vec<LayerGrad>>,
    pub csf: Option<Vec<LayerGrad>>,
    pub head: LayerGrad,
}

impl Gradients {
    /// Adds `grad` (shaped like the head weights) to the head weight gradient.
    pub fn add_head_weights(&mut self, grad: &Matrix) -> Result<()> {
        if grad.shape() != self.head.weights.shape() {
            return Err(Error::shape(
                "Gradients::add_head_weights",
                format!("{:?}", self.head.weights.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        for (g, d) in self
            .head
            .weights
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
        {
            *g += d;
        }
        Ok(())
    }

    /// Flattens in [`SplitModel::flat_params`] order; frozen blocks as zeros.
    pub fn flatten(&self, model: &SplitModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.n_params());
        for (grads, layers) in [(&self.llf, &model.llf), (&self.csf, &model.csf)] {
            match grads {
                Some(gs) => gs.iter().for_each(|g| out.extend(g.iter())),
                None => layers
                    .iter()
                    .for_each(|l| out.extend(std::iter::repeat_n(0.0, l.weights.as_slice().len() + l.bias.len()))),
            }
        }
        out.extend(self.head.iter());
        out
    }
}

impl SplitModel {
    pub fn new(llf: Vec<DenseLayer>, csf: Vec<DenseLayer>, head: DenseLayer) -> Result<Self> {
        if head.activation != Activation::Identity {
            return Err(Error::shape("SplitModel::new", "identity head", "non-identity head"));
        }
        let mut width: Option<usize> = None;
        for layer in llf.iter().chain(&csf).chain(std::iter::once(&head)) {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape("SplitModel::new", layer.out_dim(), layer.bias.len()));
            }
            if let Some(w) = width {
                if layer.in_dim() != w {
                    return Err(Error::shape("SplitModel::new", w, layer.in_dim()));
                }
            }
            width = Some(layer.out_dim());
        }
        Ok(SplitModel {
            llf,
            csf,
            head,
            frozen_llf: false,
            frozen_csf: false,
        })
    }

    /// ReLU hidden layers with fan-in uniform init and an all-zero head.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        llf_widths: &[usize],
        csf_widths: &[usize],
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut width = input_dim;
        let mut build = |widths: &[usize], rng: &mut R| {
            widths
                .iter()
                .map(|&w| {
                    let layer = DenseLayer::init_uniform(width, w, Activation::Relu, rng);
                    width = w;
                    layer
                })
                .collect::<Vec<_>>()
        };
        let llf = build(llf_widths, rng);
        let csf = build(csf_widths, rng);
        let head = DenseLayer::zeros(width, n_classes, Activation::Identity);
        SplitModel::new(llf, csf, head).expect("widths chain by construction")
    }

    pub fn input_dim(&self) -> usize {
        self.layers().next().map_or(0, DenseLayer::in_dim)
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn llf(&self) -> &[DenseLayer] {
        &self.llf
    }

    pub fn csf(&self) -> &[DenseLayer] {
        &self.csf
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut DenseLayer {
        &mut self.head
    }

    pub fn block(&self, block: Block) -> &[DenseLayer] {
        match block {
            Block::Llf => &self.llf,
            Block::Csf => &self.csf,
        }
    }

    pub fn is_frozen(&self, block: Block) -> bool {
        match block {
            Block::Llf => self.frozen_llf,
            Block::Csf => self.frozen_csf,
        }
    }

    /// Sets the freeze flag. Returns true on a frozen→unfrozen transition.
    fn set_frozen(&mut self, block: Block, flag: bool) -> bool {
        let slot = match block {
            Block::Llf => &mut self.frozen_llf,
            Block::Csf => &mut self.frozen_csf,
        };
        let unfroze = *slot && !flag;
        *slot = flag;
        unfroze
    }

    fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.llf.iter().chain(&self.csf).chain(std::iter::once(&self.head))
    }

    pub fn n_params(&self) -> usize {
        self.layers()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameters: each layer's weights (row-major) then bias, in
    /// `llf, csf, head` order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in self.layers() {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::shape("SplitModel::set_flat_params", self.n_params(), params.len()));
        }
        let mut it = params.iter();
        let layers = self
            .llf
            .iter_mut()
            .chain(self.csf.iter_mut())
            .chain(std::iter::once(&mut self.head));
        for l in layers {
            for p in l.weights.as_mut_slice().iter_mut().chain(l.bias.iter_mut()) {
                *p = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape("SplitModel::forward", self.input_dim(), batch.cols()));
        }
        let n_layers = self.llf.len() + self.csf.len() + 1;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut x = batch.clone();
        for layer in self.layers() {
            let (z, a) = layer.forward(&x);
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        let softmax = softmax_rows(&x);
        Ok(ForwardCache {
            inputs,
            pre,
            logits: x,
            softmax,
        })
    }

    /// Argmax predictions, ties resolved to the lowest class id.
    pub fn predict(&self, batch: &Matrix) -> Result<Vec<ClassId>> {
        let cache = self.forward(batch)?;
        Ok((0..cache.logits.rows())
            .map(|r| argmax(cache.logits.row(r)))
            .collect())
    }

    /// Backpropagates `grad_logits` (∂L/∂logits) through the network.
    ///
    /// Frozen blocks still pass activation gradients down to lower trainable
    /// blocks but receive no parameter gradients themselves.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Gradients> {
        if grad_logits.shape() != cache.logits.shape() {
            return Err(Error::shape(
                "SplitModel::backward",
                format!("{:?}", cache.logits.shape()),
                format!("{:?}", grad_logits.shape()),
            ));
        }
        let n_llf = self.llf.len();
        let n_csf = self.csf.len();
        if cache.inputs.len() != n_llf + n_csf + 1 {
            return Err(Error::shape("SplitModel::backward", n_llf + n_csf + 1, cache.inputs.len()));
        }
        let layers: Vec<&DenseLayer> = self.layers().collect();
        let trainable = |idx: usize| {
            if idx < n_llf {
                !self.frozen_llf
            } else if idx < n_llf + n_csf {
                !self.frozen_csf
            } else {
                true
            }
        };
        // Lowest layer index that still needs a parameter gradient.
        let lowest = (0..layers.len()).find(|&i| trainable(i)).unwrap_or(layers.len() - 1);

        let mut grads: Vec<Option<LayerGrad>> = vec![None; layers.len()];
        // ∂L/∂pre of the current layer; the head is linear.
        let mut delta = grad_logits.clone();
        for idx in (lowest..layers.len()).rev() {
            let layer = layers[idx];
            if trainable(idx) {
                grads[idx] = Some(LayerGrad {
                    weights: delta.t_matmul(&cache.inputs[idx]),
                    bias: delta.column_sums(),
                });
            }
            if idx == lowest {
                break;
            }
            let mut below = delta.matmul(&layer.weights);
            let prev = layers[idx - 1];
            if prev.activation != Activation::Identity {
                let pre = &cache.pre[idx - 1];
                for (d, &z) in below.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= prev.activation.derivative(z);
                }
            }
            delta = below;
        }

        let mut it = grads.into_iter();
        let llf: Vec<Option<LayerGrad>> = it.by_ref().take(n_llf).collect();
        let csf: Vec<Option<LayerGrad>> = it.by_ref().take(n_csf).collect();
        let head = it.next().flatten().expect("head is always trainable");
        let collect_block = |v: Vec<Option<LayerGrad>>, frozen: bool| {
            if frozen {
                None
            } else {
                Some(v.into_iter().map(|g| g.expect("trainable layer")).collect())
            }
        };
        Ok(Gradients {
            llf: collect_block(llf, self.frozen_llf),
            csf: collect_block(csf, self.frozen_csf),
            head,
        })
    }

    /// Zeroes head row `j` and its bias entry.
    pub fn reset_head_group(&mut self, j: ClassId) -> Result<()> {
        if j >= self.n_classes() {
            return Err(Error::ClassOutOfRange {
                class: j,
                n_classes: self.n_classes(),
            });
        }
        self.head.weights.row_mut(j).fill(0.0);
        self.head.bias[j] = 0.0;
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> ClassId {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits,
/// `(softmax − onehot) / n_mb`.
pub fn softmax_ce_loss(cache: &ForwardCache, labels: &[ClassId]) -> Result<(f64, Matrix)> {
    let (n, k) = cache.softmax.shape();
    if labels.len() != n {
        return Err(Error::shape("softmax_ce_loss", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label {
            label: bad,
            n_classes: k,
        });
    }
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, k)));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = cache.softmax.clone();
    for (r, &y) in labels.iter().enumerate() {
        // log-softmax from logits keeps the loss finite when p_y underflows
        let logits = cache.logits.row(r);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, grad))
}

/// SGD with momentum: `v ← m·v + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    learning_rate: f64,
    momentum: f64,
    llf: Vec<LayerGrad>,
    csf: Vec<LayerGrad>,
    head: LayerGrad,
}

impl OptimizerState {
    pub fn new(model: &SplitModel, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            llf: model.llf.iter().map(LayerGrad::zeros_like).collect(),
            csf: model.csf.iter().map(LayerGrad::zeros_like).collect(),
            head: LayerGrad::zeros_like(&model.head),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn reset_block(&mut self, block: Block) {
        let v = match block {
            Block::Llf => &mut self.llf,
            Block::Csf => &mut self.csf,
        };
        v.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
    }

    pub fn reset_head_group(&mut self, j: ClassId) {
        if j < self.head.bias.len() {
            self.head.weights.row_mut(j).fill(0.0);
            self.head.bias[j] = 0.0;
        }
    }

    pub fn velocity_is_zero(&self, block: Block) -> bool {
        let v = match block {
            Block::Llf => &self.llf,
            Block::Csf => &self.csf,
        };
        v.iter().all(|g| g.iter().all(|&x| x == 0.0))
    }

    /// One optimizer step on every non-frozen parameter.
    pub fn step(&mut self, model: &mut SplitModel, grads: &Gradients) -> Result<()> {
        let lr = self.learning_rate;
        let m = self.momentum;
        let update = |layers: &mut [DenseLayer], vel: &mut [LayerGrad], gs: &[LayerGrad]| -> Result<()> {
            if layers.len() != gs.len() {
                return Err(Error::shape("OptimizerState::step", layers.len(), gs.len()));
            }
            for ((layer, v), g) in layers.iter_mut().zip(vel.iter_mut()).zip(gs) {
                if !g.matches(layer) {
                    return Err(Error::shape(
                        "OptimizerState::step",
                        format!("{:?}", layer.weights.shape()),
                        format!("{:?}", g.weights.shape()),
                    ));
                }
                let params = layer.weights.as_mut_slice().iter_mut().chain(layer.bias.iter_mut());
                for ((p, v), g) in params.zip(v.iter_mut()).zip(g.iter()) {
                    *v = m * *v + g;
                    *p -= lr * *v;
                }
            }
            Ok(())
        };
        if !model.frozen_llf {
            let gs = grads
                .llf
                .as_ref()
                .ok_or_else(|| Error::shape("OptimizerState::step", "llf gradients", "none"))?;
            update(&mut model.llf, &mut self.llf, gs)?;
        }
        if !model.frozen_csf {
            let gs = grads
                .csf
                .as_ref()
                .ok_or_else(|| Error::shape("OptimizerState::step", "csf gradients", "none"))?;
            update(&mut model.csf, &mut self.csf, gs)?;
        }
        update(
            std::slice::from_mut(&mut model.head),
            std::slice::from_mut(&mut self.head),
            std::slice::from_ref(&grads.head),
        )
    }
}

/// Freezes or unfreezes a block. Unfreezing zeroes the block's velocities.
pub fn set_block_frozen(model: &mut SplitModel, opt: &mut OptimizerState, block: Block, flag: bool) {
    if model.set_frozen(block, flag) {
        opt.reset_block(block);
    }
}
