//! Training strategies over an experience stream.
//!
//! [`tpc_train_experience`] learns each experience in three phases:
//!
//! 1. bootstrap of the novel classes: only their output columns receive
//!    cross-entropy corrections and `csf` is frozen (after the first
//!    experience);
//! 2. joint update of all classes, where small activations of classes
//!    outside the experience are tolerated instead of corrected;
//! 3. a short class-balanced pass over the replay memory alone.
//!
//! A KL penalty keeps every seen head row close to `N(0, s)` during all
//! three phases and one explicit rescaling closes the experience.
//!
//! The baselines (naive fine-tuning, plain replay, CWR*, joint training)
//! share the same batch composition and RNG discipline, so switching every
//! TPC mechanism off reproduces naive fine-tuning bit for bit.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{bc_loss_grad, explicit_normalize, BcConfig, BcMode};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, phase1_mask, phase2_mask, MaskContext, MaskMatrix};
use crate::metrics::{evaluate, EvalMode, EvalRecord, RunHistory};
use crate::net::{set_block_frozen, softmax_ce_loss, Block, ClassId, DenseLayer, OptimizerState, SplitModel};
use crate::replay::{
    batch_ratio, compose_minibatch, memory_epoch, Batch, BatchPlan, ExperienceCursor, ReplayMemory,
    ReplaySampler,
};
use crate::scenario::{make_class_incremental, Dataset, Experience, ExperienceStream, LabeledSplit};

/// Hidden layer widths of the `llf` and `csf` blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub llf: Vec<usize>,
    pub csf: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            llf: vec![32],
            csf: vec![32],
        }
    }
}

/// Settings shared by every strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs per experience.
    pub epochs: usize,
    /// Epochs for the first experience, if different.
    pub epochs_first: Option<usize>,
    /// Total mini-batch size `n_mbe + n_mbr`.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub replay_capacity: usize,
    /// Train `llf` on the first experience's data up front and keep it
    /// frozen for the whole stream.
    pub pretrained: bool,
    /// Freeze feature blocks after the first experience (`llf` when not
    /// pretrained, `csf` as well when running without replay). Applies to
    /// TPC and CWR*.
    pub freeze_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            epochs_first: None,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            replay_capacity: 200,
            pretrained: false,
            freeze_features: true,
        }
    }
}

impl TrainConfig {
    pub fn epochs_for(&self, experience: usize) -> usize {
        if experience == 1 {
            self.epochs_first.unwrap_or(self.epochs)
        } else {
            self.epochs
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs_first == Some(0) {
            return Err(Error::Config("training.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("training.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "training.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpcConfig {
    pub phase1_frac: f64,
    pub phase3_frac: f64,
    pub bc: BcConfig,
    pub bc_mode: BcMode,
    /// Phase-II tolerance threshold.
    pub t: f64,
    pub use_replay: bool,
    pub bias_correction: bool,
    pub gradient_masking: bool,
    pub phase3: bool,
    /// Mini-batch size of phase III; defaults to `batch_size`.
    pub phase3_batch: Option<usize>,
}

impl Default for TpcConfig {
    fn default() -> Self {
        TpcConfig {
            phase1_frac: 0.10,
            phase3_frac: 0.10,
            bc: BcConfig::default(),
            bc_mode: BcMode::Loss,
            t: 0.5,
            use_replay: true,
            bias_correction: true,
            gradient_masking: true,
            phase3: true,
            phase3_batch: None,
        }
    }
}

impl TpcConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("phase1_frac", self.phase1_frac), ("phase3_frac", self.phase3_frac)] {
            if !(0.0..=0.5).contains(&f) {
                return Err(Error::Config(format!("tpc.{name} must lie in [0, 0.5], got {f}")));
            }
        }
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::Config(format!("tpc.t must lie in (0, 1], got {}", self.t)));
        }
        if self.phase3_batch == Some(0) {
            return Err(Error::Config("tpc.phase3_batch must be at least 1".into()));
        }
        self.bc.validate()
    }

    fn phase3_enabled(&self) -> bool {
        self.phase3 && self.use_replay
    }
}

/// `(epochs_1, epochs_2, epochs_3)` for an experience of `total` epochs.
/// Enabled outer phases get `max(1, round(frac · total))` epochs and phase
/// II takes the rest.
pub fn phase_epochs(total: usize, phase1_frac: f64, phase3_frac: f64, phase3: bool) -> Result<(usize, usize, usize)> {
    let outer = |frac: f64| {
        if frac > 0.0 {
            ((frac * total as f64).round() as usize).max(1)
        } else {
            0
        }
    };
    let e1 = outer(phase1_frac);
    let e3 = if phase3 { outer(phase3_frac) } else { 0 };
    if e1 + e3 > total {
        return Err(Error::Config(format!(
            "{total} epochs cannot host {e1} phase-I and {e3} phase-III epochs"
        )));
    }
    Ok((e1, total - e1 - e3, e3))
}

/// Mutable state one strategy carries across the stream.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub model: SplitModel,
    pub optimizer: OptimizerState,
    pub memory: ReplayMemory,
    pub sampler: ReplaySampler,
    pub known: BTreeSet<ClassId>,
    pub experiences_done: usize,
    rng: ChaCha8Rng,
}

impl TrainerState {
    /// Builds the model and the training RNG from one seed.
    pub fn new(
        input_dim: usize,
        n_classes: usize,
        arch: &Architecture,
        train: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SplitModel::mlp(input_dim, &arch.llf, &arch.csf, n_classes, &mut rng);
        Self::from_model(model, train, rng)
    }

    pub fn from_model(model: SplitModel, train: &TrainConfig, rng: ChaCha8Rng) -> Result<Self> {
        let optimizer = OptimizerState::new(&model, train.lr, train.momentum)?;
        Ok(TrainerState {
            model,
            optimizer,
            memory: ReplayMemory::new(train.replay_capacity),
            sampler: ReplaySampler::new(),
            known: BTreeSet::new(),
            experiences_done: 0,
            rng,
        })
    }

    fn reset_unseen_heads(&mut self) -> Result<()> {
        for j in 0..self.model.n_classes() {
            if !self.known.contains(&j) {
                self.model.reset_head_group(j)?;
                self.optimizer.reset_head_group(j);
            }
        }
        Ok(())
    }

    fn set_frozen(&mut self, block: Block, flag: bool) {
        set_block_frozen(&mut self.model, &mut self.optimizer, block, flag);
    }

    /// Trains the whole network with plain cross-entropy on `data`, then
    /// freezes `llf` and clears the head.
    pub fn pretrain(&mut self, data: &LabeledSplit, epochs: usize, batch_size: usize) -> Result<()> {
        let ids: Vec<usize> = (0..data.len()).collect();
        let empty = ReplayMemory::new(0);
        let mut sampler = ReplaySampler::new();
        let plan = BatchPlan {
            n_mbe: batch_size,
            n_mbr: 0,
        };
        let mut cursor = ExperienceCursor::new(data.len());
        for _ in 0..epochs {
            cursor.start_epoch(&mut self.rng);
            while let Some(batch) = compose_minibatch(
                &data.x, &data.y, &ids, &mut cursor, &empty, &mut sampler, plan, &mut self.rng,
            ) {
                self.plain_step(&batch, None)?;
            }
        }
        self.set_frozen(Block::Llf, true);
        for j in 0..self.model.n_classes() {
            self.model.reset_head_group(j)?;
        }
        self.optimizer = OptimizerState::new(&self.model, self.optimizer.learning_rate(), self.optimizer.momentum())?;
        Ok(())
    }

    /// CE step, optionally restricted to a column mask.
    fn plain_step(&mut self, batch: &Batch, columns: Option<&BTreeSet<ClassId>>) -> Result<f64> {
        let cache = self.model.forward(&batch.x)?;
        let (loss, mut grad) = softmax_ce_loss(&cache, &batch.y)?;
        if let Some(open) = columns {
            let ctx = MaskContext {
                batch_labels: &batch.y,
                novel: open,
                experience_classes: open,
                t: 1.0,
            };
            grad = apply_mask(&grad, &phase1_mask(&ctx, batch.len(), self.model.n_classes()))?;
        }
        let grads = self.model.backward(&cache, &grad)?;
        self.optimizer.step(&mut self.model, &grads)?;
        Ok(loss)
    }

    /// Plan for phases I–II: experience-only while the memory is empty.
    fn batch_plan(&self, n_s: usize, batch_size: usize, use_replay: bool) -> Result<BatchPlan> {
        if !use_replay || self.memory.is_empty() {
            return Ok(BatchPlan {
                n_mbe: batch_size,
                n_mbr: 0,
            });
        }
        let mut plan = batch_ratio(n_s, self.memory.len(), batch_size)?;
        if plan.n_mbe == 0 {
            plan = BatchPlan {
                n_mbe: 1,
                n_mbr: batch_size - 1,
            };
        }
        Ok(plan)
    }

    /// One epoch of composed mini-batches over `exp`.
    fn for_each_batch(
        &mut self,
        exp: &Experience,
        plan: BatchPlan,
        mut step: impl FnMut(&mut Self, &Batch) -> Result<f64>,
    ) -> Result<(f64, usize)> {
        let mut cursor = ExperienceCursor::new(exp.len());
        cursor.start_epoch(&mut self.rng);
        let (mut loss, mut n) = (0.0, 0);
        loop {
            let batch = compose_minibatch(
                &exp.x,
                &exp.y,
                &exp.ids,
                &mut cursor,
                &self.memory,
                &mut self.sampler,
                plan,
                &mut self.rng,
            );
            let Some(batch) = batch else { break };
            loss += step(self, &batch)?;
            n += 1;
        }
        Ok((loss, n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    One,
    Two,
    Three,
}

/// Phase boundary notifications, for inspection in tests and demos.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseEvent {
    Start(Phase),
    End(Phase),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperienceReport {
    pub phase_epochs: (usize, usize, usize),
    pub steps: usize,
    pub mean_loss: f64,
    pub plan: Option<BatchPlan>,
}

struct TpcStep<'a> {
    phase: Phase,
    novel: &'a BTreeSet<ClassId>,
    experience_classes: &'a BTreeSet<ClassId>,
    active: &'a BTreeSet<ClassId>,
    cfg: &'a TpcConfig,
}

fn tpc_step(state: &mut TrainerState, batch: &Batch, s: &TpcStep<'_>) -> Result<f64> {
    let cfg = s.cfg;
    let cache = state.model.forward(&batch.x)?;
    let (ce, mut grad) = softmax_ce_loss(&cache, &batch.y)?;
    if cfg.gradient_masking {
        let ctx = MaskContext {
            batch_labels: &batch.y,
            novel: s.novel,
            experience_classes: s.experience_classes,
            t: cfg.t,
        };
        let mask: Option<MaskMatrix> = match s.phase {
            Phase::One => Some(phase1_mask(&ctx, batch.len(), state.model.n_classes())),
            Phase::Two => Some(phase2_mask(&ctx, &cache.softmax)?),
            Phase::Three => None,
        };
        if let Some(mask) = mask {
            grad = apply_mask(&grad, &mask)?;
        }
    }
    let mut grads = state.model.backward(&cache, &grad)?;
    let mut total = ce;
    let bc_online = cfg.bias_correction && cfg.bc_mode == BcMode::Loss && cfg.bc.w_bc > 0.0;
    if bc_online {
        let head = state.model.head();
        total += cfg.bc.w_bc * crate::bias::bc_loss(head, s.active, &cfg.bc)?;
        let g = bc_loss_grad(head, s.active, &cfg.bc)?;
        grads.add_head_weights(&g.map(|v| cfg.bc.w_bc * v))?;
    }
    state.optimizer.step(&mut state.model, &grads)?;
    if cfg.bias_correction && cfg.bc_mode == BcMode::Explicit {
        explicit_normalize(state.model.head_mut(), s.active, &cfg.bc)?;
    }
    Ok(total)
}

/// One experience of three-phase consolidation.
pub fn tpc_train_experience(
    state: &mut TrainerState,
    exp: &Experience,
    train: &TrainConfig,
    cfg: &TpcConfig,
) -> Result<ExperienceReport> {
    tpc_train_experience_observed(state, exp, train, cfg, &mut |_, _| {})
}

/// [`tpc_train_experience`] with a callback at every phase boundary.
pub fn tpc_train_experience_observed(
    state: &mut TrainerState,
    exp: &Experience,
    train: &TrainConfig,
    cfg: &TpcConfig,
    observer: &mut dyn FnMut(PhaseEvent, &SplitModel),
) -> Result<ExperienceReport> {
    cfg.validate()?;
    let i = state.experiences_done + 1;
    state.experiences_done = i;
    if exp.is_empty() {
        log::warn!("experience {i} is empty; skipped");
        return Ok(ExperienceReport::default());
    }

    state.reset_unseen_heads()?;
    let classes = exp.classes();
    let novel: BTreeSet<ClassId> = classes.difference(&state.known).copied().collect();
    let active: BTreeSet<ClassId> = state.known.union(&classes).copied().collect();
    let (e1, e2, e3) = phase_epochs(
        train.epochs_for(i),
        cfg.phase1_frac,
        cfg.phase3_frac,
        cfg.phase3_enabled(),
    )?;
    let later = i > 1 && train.freeze_features;
    state.set_frozen(Block::Llf, train.pretrained || later);
    let plan = state.batch_plan(exp.len(), train.batch_size, cfg.use_replay)?;
    let mut report = ExperienceReport {
        phase_epochs: (e1, e2, e3),
        plan: Some(plan),
        ..Default::default()
    };
    let mut loss_sum = 0.0;
    let mut accumulate = |(l, n): (f64, usize), report: &mut ExperienceReport| {
        loss_sum += l;
        report.steps += n;
    };

    // Phase I
    if e1 > 0 {
        if i > 1 {
            state.set_frozen(Block::Csf, true);
        }
        observer(PhaseEvent::Start(Phase::One), &state.model);
        let step = TpcStep {
            phase: Phase::One,
            novel: &novel,
            experience_classes: &classes,
            active: &active,
            cfg,
        };
        for _ in 0..e1 {
            let r = state.for_each_batch(exp, plan, |st, b| tpc_step(st, b, &step))?;
            accumulate(r, &mut report);
        }
        observer(PhaseEvent::End(Phase::One), &state.model);
    }

    // Phase II
    let csf_locked = later && !cfg.use_replay;
    state.set_frozen(Block::Csf, csf_locked);
    observer(PhaseEvent::Start(Phase::Two), &state.model);
    let step = TpcStep {
        phase: Phase::Two,
        novel: &novel,
        experience_classes: &classes,
        active: &active,
        cfg,
    };
    for _ in 0..e2 {
        let r = state.for_each_batch(exp, plan, |st, b| tpc_step(st, b, &step))?;
        accumulate(r, &mut report);
    }
    observer(PhaseEvent::End(Phase::Two), &state.model);

    if cfg.use_replay {
        state.memory.update(&exp.x, &exp.y, &exp.ids, &mut state.rng)?;
    }

    // Phase III
    if e3 > 0 && !state.memory.is_empty() {
        observer(PhaseEvent::Start(Phase::Three), &state.model);
        let step = TpcStep {
            phase: Phase::Three,
            novel: &novel,
            experience_classes: &classes,
            active: &active,
            cfg,
        };
        let size = cfg.phase3_batch.unwrap_or(train.batch_size);
        for _ in 0..e3 {
            for batch in memory_epoch(&state.memory, size, &mut state.rng) {
                loss_sum += tpc_step(state, &batch, &step)?;
                report.steps += 1;
            }
        }
        observer(PhaseEvent::End(Phase::Three), &state.model);
    }

    if cfg.bias_correction {
        explicit_normalize(state.model.head_mut(), &active, &cfg.bc)?;
    }
    state.known.extend(classes);
    report.mean_loss = if report.steps > 0 {
        loss_sum / report.steps as f64
    } else {
        0.0
    };
    Ok(report)
}

/// Plain cross-entropy fine-tuning on the experience alone.
pub fn naive_train_experience(state: &mut TrainerState, exp: &Experience, train: &TrainConfig) -> Result<ExperienceReport> {
    plain_train_experience(state, exp, train, false)
}

/// Cross-entropy on experience + replay mini-batches; the memory is updated
/// at the end of the experience.
pub fn replay_train_experience(state: &mut TrainerState, exp: &Experience, train: &TrainConfig) -> Result<ExperienceReport> {
    plain_train_experience(state, exp, train, true)
}

fn plain_train_experience(
    state: &mut TrainerState,
    exp: &Experience,
    train: &TrainConfig,
    use_replay: bool,
) -> Result<ExperienceReport> {
    let i = state.experiences_done + 1;
    state.experiences_done = i;
    if exp.is_empty() {
        log::warn!("experience {i} is empty; skipped");
        return Ok(ExperienceReport::default());
    }
    state.reset_unseen_heads()?;
    state.set_frozen(Block::Llf, train.pretrained);
    let epochs = train.epochs_for(i);
    let plan = state.batch_plan(exp.len(), train.batch_size, use_replay)?;
    let mut report = ExperienceReport {
        phase_epochs: (0, epochs, 0),
        plan: Some(plan),
        ..Default::default()
    };
    let mut loss_sum = 0.0;
    for _ in 0..epochs {
        let (l, n) = state.for_each_batch(exp, plan, |st, b| st.plain_step(b, None))?;
        loss_sum += l;
        report.steps += n;
    }
    if use_replay {
        state.memory.update(&exp.x, &exp.y, &exp.ids, &mut state.rng)?;
    }
    state.known.extend(exp.classes());
    report.mean_loss = if report.steps > 0 { loss_sum / report.steps as f64 } else { 0.0 };
    Ok(report)
}

/// Consolidated head and per-class sample counts kept by CWR*.
#[derive(Clone, Debug, PartialEq)]
pub struct CwrState {
    pub consolidated: DenseLayer,
    pub past_counts: Vec<u64>,
}

impl CwrState {
    pub fn new(head: &DenseLayer) -> Self {
        CwrState {
            consolidated: DenseLayer::zeros(head.in_dim(), head.out_dim(), head.activation),
            past_counts: vec![0; head.out_dim()],
        }
    }
}

/// `sqrt(n_past / n_cur)`.
pub fn cwr_past_weight(n_past: u64, n_cur: u64) -> f64 {
    if n_cur == 0 {
        return 0.0;
    }
    (n_past as f64 / n_cur as f64).sqrt()
}

/// Weighted average `(w · past + current) / (w + 1)`.
pub fn cwr_consolidate(past: &[f64], current: &[f64], w_past: f64) -> Vec<f64> {
    past.iter()
        .zip(current)
        .map(|(p, c)| (w_past * p + c) / (w_past + 1.0))
        .collect()
}

/// CWR*: current classes are trained on a head loaded from the consolidated
/// copy; at the end their rows are mean-shifted and averaged into it.
///
/// With replay enabled the classes held in memory are trained and
/// consolidated alongside the experience's own classes.
pub fn cwr_star_train_experience(
    state: &mut TrainerState,
    cwr: &mut CwrState,
    exp: &Experience,
    train: &TrainConfig,
    use_replay: bool,
) -> Result<ExperienceReport> {
    let i = state.experiences_done + 1;
    state.experiences_done = i;
    if exp.is_empty() {
        log::warn!("experience {i} is empty; skipped");
        return Ok(ExperienceReport::default());
    }
    let mut current: BTreeSet<ClassId> = exp.classes();
    let mut counts = vec![0u64; state.model.n_classes()];
    for &y in &exp.y {
        counts[y] += 1;
    }
    if use_replay {
        for s in state.memory.samples() {
            current.insert(s.label);
            counts[s.label] += 1;
        }
    }

    // Load only the current classes from the consolidated head.
    {
        let head = state.model.head_mut();
        for j in 0..head.out_dim() {
            if current.contains(&j) {
                head.weights.row_mut(j).copy_from_slice(cwr.consolidated.weights.row(j));
                head.bias[j] = cwr.consolidated.bias[j];
            } else {
                head.weights.row_mut(j).fill(0.0);
                head.bias[j] = 0.0;
            }
        }
    }
    for j in 0..state.model.n_classes() {
        state.optimizer.reset_head_group(j);
    }

    let later = i > 1 && train.freeze_features;
    state.set_frozen(Block::Llf, train.pretrained || later);
    state.set_frozen(Block::Csf, later && !use_replay);
    let epochs = train.epochs_for(i);
    let plan = state.batch_plan(exp.len(), train.batch_size, use_replay)?;
    let mut report = ExperienceReport {
        phase_epochs: (0, epochs, 0),
        plan: Some(plan),
        ..Default::default()
    };
    let mut loss_sum = 0.0;
    for _ in 0..epochs {
        let (l, n) = state.for_each_batch(exp, plan, |st, b| st.plain_step(b, Some(&current)))?;
        loss_sum += l;
        report.steps += n;
    }

    let head = state.model.head();
    for &j in &current {
        let row = head.weights.row(j);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let shifted: Vec<f64> = row.iter().map(|w| w - mean).collect();
        let w = cwr_past_weight(cwr.past_counts[j], counts[j]);
        let merged = cwr_consolidate(cwr.consolidated.weights.row(j), &shifted, w);
        cwr.consolidated.weights.row_mut(j).copy_from_slice(&merged);
        cwr.consolidated.bias[j] = (w * cwr.consolidated.bias[j] + head.bias[j]) / (w + 1.0);
        cwr.past_counts[j] += counts[j];
    }
    *state.model.head_mut() = cwr.consolidated.clone();

    if use_replay {
        state.memory.update(&exp.x, &exp.y, &exp.ids, &mut state.rng)?;
    }
    state.known.extend(exp.classes());
    report.mean_loss = if report.steps > 0 { loss_sum / report.steps as f64 } else { 0.0 };
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Tpc,
    Naive,
    Replay,
    CwrStar,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Tpc => "tpc",
            StrategyKind::Naive => "naive",
            StrategyKind::Replay => "replay",
            StrategyKind::CwrStar => "cwr_star",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpc" => Ok(StrategyKind::Tpc),
            "naive" => Ok(StrategyKind::Naive),
            "replay" => Ok(StrategyKind::Replay),
            "cwr_star" | "cwr*" => Ok(StrategyKind::CwrStar),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Everything needed to drive one strategy over one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub arch: Architecture,
    pub train: TrainConfig,
    pub tpc: TpcConfig,
    pub eval_mode: EvalMode,
    pub eval_interval: usize,
    /// Wall-clock timing; when off, per-experience times are recorded as 0.
    pub timing: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            arch: Architecture::default(),
            train: TrainConfig::default(),
            tpc: TpcConfig::default(),
            eval_mode: EvalMode::Fixed,
            eval_interval: 1,
            timing: true,
        }
    }
}

/// Experiences after which `run_stream` evaluates (1-based): the first,
/// every multiple of `interval`, and the last.
pub fn eval_points(n_experiences: usize, interval: usize) -> Vec<usize> {
    let interval = interval.max(1);
    (1..=n_experiences)
        .filter(|&k| k == 1 || k % interval == 0 || k == n_experiences)
        .collect()
}

/// Trains `strategy` experience by experience and evaluates on `test`.
pub fn run_stream(
    strategy: StrategyKind,
    stream: &ExperienceStream,
    test: &LabeledSplit,
    n_classes: usize,
    settings: &RunSettings,
    seed: u64,
) -> Result<RunHistory> {
    run_stream_with_state(strategy, stream, test, n_classes, settings, seed).map(|(h, _)| h)
}

/// [`run_stream`], also returning the final trainer state.
pub fn run_stream_with_state(
    strategy: StrategyKind,
    stream: &ExperienceStream,
    test: &LabeledSplit,
    n_classes: usize,
    settings: &RunSettings,
    seed: u64,
) -> Result<(RunHistory, TrainerState)> {
    let first = stream
        .experiences
        .first()
        .ok_or_else(|| Error::Config("experience stream is empty".into()))?;
    settings.tpc.validate()?;
    let mut state = TrainerState::new(first.x.cols(), n_classes, &settings.arch, &settings.train, seed)?;
    if settings.train.pretrained {
        let data = LabeledSplit {
            x: first.x.clone(),
            y: first.y.clone(),
        };
        state.pretrain(&data, settings.train.epochs_for(1), settings.train.batch_size)?;
    }
    let mut cwr = CwrState::new(state.model.head());
    let points = eval_points(stream.len(), settings.eval_interval);
    let mut records: Vec<EvalRecord> = Vec::with_capacity(points.len());
    let mut wall_clock = Vec::with_capacity(stream.len());
    for exp in &stream.experiences {
        // the clock is only read when asked for: it is unavailable on wasm32
        let started = settings.timing.then(Instant::now);
        match strategy {
            StrategyKind::Tpc => {
                tpc_train_experience(&mut state, exp, &settings.train, &settings.tpc)?;
            }
            StrategyKind::Naive => {
                naive_train_experience(&mut state, exp, &settings.train)?;
            }
            StrategyKind::Replay => {
                replay_train_experience(&mut state, exp, &settings.train)?;
            }
            StrategyKind::CwrStar => {
                cwr_star_train_experience(&mut state, &mut cwr, exp, &settings.train, settings.tpc.use_replay)?;
            }
        }
        wall_clock.push(started.map_or(0.0, |t| t.elapsed().as_secs_f64()));
        if points.contains(&exp.index) {
            records.push(evaluate(&state.model, test, &state.known, settings.eval_mode, exp.index)?);
        }
    }
    let history = RunHistory {
        strategy: strategy.name().to_string(),
        seed,
        records,
        wall_clock,
        config: serde_json::Value::Null,
    };
    Ok((history, state))
}

/// Upper bound: naive training on the whole training split at once.
pub fn joint_train(ds: &Dataset, settings: &RunSettings, seed: u64) -> Result<(SplitModel, EvalRecord)> {
    let stream = make_class_incremental(ds, 1, ds.n_classes, 0, seed)?;
    let (history, state) = run_stream_with_state(StrategyKind::Naive, &stream, &ds.test, ds.n_classes, settings, seed)?;
    let record = history
        .records
        .into_iter()
        .last()
        .expect("single experience is always evaluated");
    Ok((state.model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::scenario::gen_synthetic;

    #[test]
    fn phase_schedule_rounding() {
        assert_eq!(phase_epochs(4, 0.1, 0.1, true).unwrap(), (1, 2, 1));
        assert_eq!(phase_epochs(35, 0.1, 0.1, true).unwrap(), (4, 27, 4));
        assert_eq!(phase_epochs(200, 0.1, 0.1, true).unwrap(), (20, 160, 20));
        assert_eq!(phase_epochs(4, 0.1, 0.1, false).unwrap(), (1, 3, 0));
        assert_eq!(phase_epochs(4, 0.0, 0.0, true).unwrap(), (0, 4, 0));
        assert_eq!(phase_epochs(2, 0.1, 0.1, true).unwrap(), (1, 0, 1));
        assert!(phase_epochs(1, 0.1, 0.1, true).is_err());
    }

    #[test]
    fn eval_point_rule() {
        assert_eq!(eval_points(12, 5), vec![1, 5, 10, 12]);
        assert_eq!(eval_points(1, 5), vec![1]);
        assert_eq!(eval_points(3, 1), vec![1, 2, 3]);
    }

    #[test]
    fn cwr_weights() {
        assert_eq!(cwr_past_weight(10, 10), 1.0);
        assert_eq!(cwr_past_weight(0, 10), 0.0);
        assert_eq!(cwr_past_weight(40, 10), 2.0);
        assert_eq!(cwr_consolidate(&[1.0, 3.0], &[3.0, -1.0], 1.0), vec![2.0, 1.0]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [StrategyKind::Tpc, StrategyKind::Naive, StrategyKind::Replay, StrategyKind::CwrStar] {
            assert_eq!(s.name().parse::<StrategyKind>().unwrap(), s);
        }
        assert!("bic".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn empty_experience_is_noop() {
        let ds = gen_synthetic(3, 4, 10, 3.0, 0).unwrap();
        let train = TrainConfig::default();
        let mut state = TrainerState::new(4, 3, &Architecture::default(), &train, 1).unwrap();
        let before = state.model.clone();
        let exp = Experience {
            index: 1,
            x: Matrix::zeros(0, 4),
            y: vec![],
            ids: vec![],
            novel: BTreeSet::new(),
            rep: BTreeSet::new(),
        };
        let r = tpc_train_experience(&mut state, &exp, &train, &TpcConfig::default()).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(state.model, before);
        assert!(state.known.is_empty());
        drop(ds);
    }
}
