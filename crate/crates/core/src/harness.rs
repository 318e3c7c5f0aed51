//! Configuration-driven experiment runner.
//!
//! A JSON [`ExperimentConfig`] describes the data, the scenario, the
//! strategies and the seeds. [`cmd_run`] trains every (strategy, seed) pair
//! and writes
//!
//! * `history_<label>_seed<k>.csv` per run,
//! * `summary.csv` with AMCA, final accuracy and wall-clock per run plus a
//!   seed-averaged row per strategy,
//! * `accuracy.svg`, the seed-averaged accuracy curves.
//!
//! The first seed is kept for tuning: it is run and written out like the
//! others but left out of the averages, unless it is the only seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{amca, final_accuracy, EvalMode, RunHistory};
use crate::scenario::{gen_synthetic, write_csv, Dataset, ExperienceStream, ScenarioSpec};
use crate::strategies::{
    joint_train, phase_epochs, run_stream, Architecture, RunSettings, StrategyKind, TpcConfig, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        n_classes: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::Synthetic {
                classes,
                dim,
                per_class,
                separation,
                seed,
            } => gen_synthetic(*classes, *dim, *per_class, *separation, *seed),
            DatasetConfig::Csv {
                train,
                test,
                n_classes,
                seed,
            } => {
                // fall back to the `<stem>.test.csv` written next to it by gen-data
                let sibling = test_path_for(train);
                let test = test.clone().or_else(|| sibling.is_file().then_some(sibling));
                Dataset::from_csv(train, test.as_deref(), *n_classes, *seed)
            }
        }
    }

    fn known_classes(&self) -> Option<usize> {
        match self {
            DatasetConfig::Synthetic { classes, .. } => Some(*classes),
            DatasetConfig::Csv { n_classes, .. } => *n_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub interval: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Fixed,
            interval: 1,
        }
    }
}

fn default_strategies() -> Vec<StrategyKind> {
    vec![StrategyKind::Tpc, StrategyKind::Naive]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub tpc: TpcConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Also train the joint upper bound and draw it in the chart.
    #[serde(default = "yes")]
    pub joint: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Write measured wall-clock seconds into the summary. Off by default so
    /// that reruns produce byte-identical files.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.tpc.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies must not be empty".into()));
        }
        let mut unique = self.strategies.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != self.strategies.len() {
            return Err(Error::Config("strategies contains duplicates".into()));
        }
        if self.eval.interval == 0 {
            return Err(Error::Config("eval.interval must be at least 1".into()));
        }
        if self.model.llf.contains(&0) || self.model.csf.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.model.llf.is_empty() && self.model.csf.is_empty() {
            return Err(Error::Config("model needs at least one hidden layer".into()));
        }
        let enabled = self.tpc.phase3 && self.tpc.use_replay;
        for epochs in [self.training.epochs_for(1), self.training.epochs] {
            phase_epochs(epochs, self.tpc.phase1_frac, self.tpc.phase3_frac, enabled)
                .map_err(|e| Error::Config(format!("training.epochs: {e}")))?;
        }
        if let Some(n) = self.dataset.known_classes() {
            check_scenario(&self.scenario, n)?;
        }
        Ok(())
    }

    /// Seeds whose runs enter the averaged metrics.
    pub fn reported_seeds(&self) -> &[u64] {
        if self.seeds.len() > 1 {
            &self.seeds[1..]
        } else {
            &self.seeds
        }
    }

    fn settings(&self) -> RunSettings {
        RunSettings {
            arch: self.model.clone(),
            train: self.training.clone(),
            tpc: self.tpc.clone(),
            eval_mode: self.eval.mode,
            eval_interval: self.eval.interval,
            timing: self.record_wall_clock,
        }
    }
}

/// Checks the scenario arithmetic against the dataset's class count.
pub fn check_scenario(spec: &ScenarioSpec, n_classes: usize) -> Result<()> {
    match *spec {
        ScenarioSpec::ClassIncremental {
            experiences,
            first,
            per_experience,
        } => {
            if experiences == 0 || first == 0 || (experiences > 1 && per_experience == 0) {
                return Err(Error::Config(format!(
                    "scenario {experiences}/{first}-{per_experience} needs positive counts (A/B-C rule)"
                )));
            }
            let covered = first + (experiences - 1) * per_experience;
            if covered != n_classes {
                return Err(Error::Config(format!(
                    "scenario {experiences}/{first}-{per_experience} covers {covered} classes but the dataset has \
                     {n_classes}; the A/B-C rule requires B + (A-1)*C == number of classes"
                )));
            }
        }
        ScenarioSpec::Nic {
            chunks_per_class,
            first,
        } => {
            if chunks_per_class == 0 || first == 0 || first > n_classes {
                return Err(Error::Config(format!(
                    "nic scenario needs chunks_per_class >= 1 and 1 <= first <= {n_classes}"
                )));
            }
        }
    }
    Ok(())
}

/// Reads and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
        other => other,
    })
}

/// Process exit code for the outcome of a command.
pub fn exit_code<T>(outcome: &Result<T>) -> i32 {
    match outcome {
        Ok(_) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    }
}

/// Variants of TPC used by ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub no_bias_correction: bool,
    pub no_gradient_masking: bool,
    pub no_phase3: bool,
    pub no_replay: bool,
}

impl AblationSpec {
    pub fn all() -> Self {
        AblationSpec {
            no_bias_correction: true,
            no_gradient_masking: true,
            no_phase3: true,
            no_replay: true,
        }
    }

    /// Parses a comma separated toggle list; `all` and `none` are accepted.
    pub fn parse(list: &str) -> Result<Self> {
        let mut spec = AblationSpec::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "all" => spec = AblationSpec::all(),
                "none" => {}
                "no_bias_correction" => spec.no_bias_correction = true,
                "no_gradient_masking" => spec.no_gradient_masking = true,
                "no_phase3" => spec.no_phase3 = true,
                "no_replay" => spec.no_replay = true,
                other => return Err(Error::Config(format!("unknown ablation toggle `{other}`"))),
            }
        }
        Ok(spec)
    }

    fn columns(&self) -> Vec<Variant> {
        let mut v = vec![Variant::Full];
        if self.no_bias_correction {
            v.push(Variant::NoBiasCorrection);
        }
        if self.no_gradient_masking {
            v.push(Variant::NoGradientMasking);
        }
        if self.no_phase3 {
            v.push(Variant::NoPhase3);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    Full,
    NoBiasCorrection,
    NoGradientMasking,
    NoPhase3,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBiasCorrection => "no_bias_correction",
            Variant::NoGradientMasking => "no_gradient_masking",
            Variant::NoPhase3 => "no_phase3",
        }
    }

    fn apply(self, base: &TpcConfig, replay: bool) -> TpcConfig {
        let mut cfg = base.clone();
        cfg.use_replay = replay;
        match self {
            Variant::Full => {}
            Variant::NoBiasCorrection => cfg.bias_correction = false,
            Variant::NoGradientMasking => cfg.gradient_masking = false,
            Variant::NoPhase3 => cfg.phase3 = false,
        }
        cfg
    }
}

/// One (label, strategy, settings) combination run over every seed.
#[derive(Clone, Debug)]
struct Job {
    label: String,
    strategy: StrategyKind,
    settings: RunSettings,
    seed: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Histories keyed by run label, in seed order.
    pub histories: BTreeMap<String, Vec<RunHistory>>,
    /// Seed-averaged final accuracy of joint training, if requested.
    pub joint: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Runs every configured strategy over every seed and writes the outputs
/// to `cfg.out_dir`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let settings = cfg.settings();
    let labels: Vec<(String, StrategyKind, RunSettings)> = cfg
        .strategies
        .iter()
        .map(|&s| (s.name().to_string(), s, settings.clone()))
        .collect();
    execute(cfg, &labels)
}

/// Full TPC and the selected single-toggle variants on identical streams and
/// seeds. Besides the usual outputs, writes `ablation.csv` with one row per
/// replay mode and one column per variant (seed-averaged AMCA).
pub fn cmd_ablate(cfg: &ExperimentConfig, spec: &AblationSpec) -> Result<RunOutcome> {
    cfg.validate()?;
    let base = cfg.settings();
    let mut rows = vec![true];
    if spec.no_replay {
        rows.push(false);
    }
    let mut labels = Vec::new();
    for &replay in &rows {
        for v in spec.columns() {
            if !replay && v == Variant::NoPhase3 {
                continue;
            }
            let mut settings = base.clone();
            settings.tpc = v.apply(&base.tpc, replay);
            labels.push((ablation_label(v, replay), StrategyKind::Tpc, settings));
        }
    }
    let outcome = execute(cfg, &labels)?;

    let path = cfg.out_dir.join("ablation.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    let columns = spec.columns();
    let mut header = vec!["scenario".to_string(), "replay".to_string()];
    header.extend(columns.iter().map(|v| v.name().to_string()));
    wtr.write_record(&header)?;
    let scenario = scenario_name(&cfg.scenario);
    for &replay in &rows {
        let mut record = vec![scenario.clone(), if replay { "yes" } else { "no" }.to_string()];
        let full = mean_amca(&outcome.histories[&ablation_label(Variant::Full, replay)], cfg);
        for &v in &columns {
            if !replay && v == Variant::NoPhase3 {
                record.push("-".into());
                continue;
            }
            let value = mean_amca(&outcome.histories[&ablation_label(v, replay)], cfg);
            if v != Variant::Full && value > full {
                log::warn!(
                    "ablation ordering: {} ({value:.4}) beats full TPC ({full:.4}) with replay={replay}",
                    v.name()
                );
            }
            record.push(value.to_string());
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    let mut outcome = outcome;
    outcome.files.push(path);
    Ok(outcome)
}

fn ablation_label(v: Variant, replay: bool) -> String {
    let mut label = String::from("tpc");
    if !replay {
        label.push_str("-no_replay");
    }
    if v != Variant::Full {
        label.push('-');
        label.push_str(v.name());
    }
    label
}

fn scenario_name(spec: &ScenarioSpec) -> String {
    match *spec {
        ScenarioSpec::ClassIncremental {
            experiences,
            first,
            per_experience,
        } => format!("{experiences}/{first}-{per_experience}"),
        ScenarioSpec::Nic {
            chunks_per_class,
            first,
        } => format!("nic {first}+{chunks_per_class}x"),
    }
}

fn mean_amca(histories: &[RunHistory], cfg: &ExperimentConfig) -> f64 {
    let reported = cfg.reported_seeds();
    let values: Vec<f64> = histories
        .iter()
        .filter(|h| reported.contains(&h.seed))
        .map(amca)
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn run_parallel<T: Send>(n_jobs: usize, work: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(n_jobs.max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n_jobs).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n_jobs {
                    break;
                }
                let out = work(i);
                results.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn execute(cfg: &ExperimentConfig, labels: &[(String, StrategyKind, RunSettings)]) -> Result<RunOutcome> {
    let ds = cfg.dataset.load().map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot load dataset: {io}")),
        other => other,
    })?;
    check_scenario(&cfg.scenario, ds.n_classes)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let snapshot = serde_json::to_value(cfg)?;

    let streams: Vec<ExperienceStream> = cfg
        .seeds
        .iter()
        .map(|&seed| ExperienceStream::build(&ds, &cfg.scenario, seed))
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for (label, strategy, settings) in labels {
        for &seed in &cfg.seeds {
            jobs.push(Job {
                label: label.clone(),
                strategy: *strategy,
                settings: settings.clone(),
                seed,
            });
        }
    }
    let n_seeds = cfg.seeds.len();
    let results = run_parallel(jobs.len(), |i| {
        let job = &jobs[i];
        log::info!("running {} seed {}", job.label, job.seed);
        run_stream(job.strategy, &streams[i % n_seeds], &ds.test, ds.n_classes, &job.settings, job.seed)
    });

    let mut histories: BTreeMap<String, Vec<RunHistory>> = BTreeMap::new();
    let mut files = Vec::new();
    let mut failure = None;
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(mut h) => {
                h.strategy = job.label.clone();
                h.config = snapshot.clone();
                let path = cfg.out_dir.join(format!("history_{}_seed{}.csv", job.label, job.seed));
                write_history(&h, &path)?;
                files.push(path);
                histories.entry(job.label.clone()).or_default().push(h);
            }
            Err(e) => {
                log::error!("{} seed {} failed: {e}", job.label, job.seed);
                failure.get_or_insert(e);
            }
        }
    }

    let summary = cfg.out_dir.join("summary.csv");
    write_summary(&histories, cfg.reported_seeds(), &summary)?;
    files.push(summary);

    let joint = if cfg.joint && failure.is_none() {
        let settings = cfg.settings();
        let values = run_parallel(cfg.reported_seeds().len(), |i| {
            joint_train(&ds, &settings, cfg.reported_seeds()[i]).map(|(_, r)| r.mean_class_accuracy)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        log::info!("joint training upper bound: {mean:.4}");
        Some(mean)
    } else {
        None
    };

    let series: Vec<Series> = histories
        .iter()
        .map(|(label, hs)| {
            let reported: Vec<&RunHistory> = hs.iter().filter(|h| cfg.reported_seeds().contains(&h.seed)).collect();
            Series::average(label, &reported)
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    if !series.is_empty() {
        let svg = cfg.out_dir.join("accuracy.svg");
        emit_svg(&series, joint, &svg)?;
        files.push(svg);
    }

    match failure {
        Some(e) => Err(e),
        None => Ok(RunOutcome {
            histories,
            joint,
            files,
        }),
    }
}

/// `experience,class_id,accuracy` rows followed, per experience, by a row
/// whose `class_id` is `mean_class_accuracy`.
pub fn write_history(h: &RunHistory, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["experience", "class_id", "accuracy"])?;
    for r in &h.records {
        for (c, a) in &r.per_class {
            wtr.write_record([r.experience.to_string(), c.to_string(), a.to_string()])?;
        }
        wtr.write_record([
            r.experience.to_string(),
            "mean_class_accuracy".to_string(),
            r.mean_class_accuracy.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads back the `(experience, mean_class_accuracy)` rows of a history CSV.
pub fn read_history_means(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        if &row[1] != "mean_class_accuracy" {
            continue;
        }
        let parse_err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message: m,
        };
        let e = row[0].parse().map_err(|e| parse_err(format!("{e}")))?;
        let v = row[2].parse().map_err(|e| parse_err(format!("{e}")))?;
        out.push((e, v));
    }
    Ok(out)
}

fn write_summary(histories: &BTreeMap<String, Vec<RunHistory>>, reported: &[u64], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["strategy", "seed", "amca", "final_accuracy", "wall_clock_s"])?;
    for (label, hs) in histories {
        for h in hs {
            wtr.write_record([
                label.clone(),
                h.seed.to_string(),
                amca(h).to_string(),
                final_accuracy(h).to_string(),
                h.total_wall_clock().to_string(),
            ])?;
        }
        let used: Vec<&RunHistory> = hs.iter().filter(|h| reported.contains(&h.seed)).collect();
        if used.is_empty() {
            continue;
        }
        let n = used.len() as f64;
        let mean = |f: &dyn Fn(&RunHistory) -> f64| used.iter().map(|h| f(h)).sum::<f64>() / n;
        wtr.write_record([
            label.clone(),
            "mean".to_string(),
            mean(&amca).to_string(),
            mean(&final_accuracy).to_string(),
            mean(&RunHistory::total_wall_clock).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// A seed-averaged accuracy curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(experience, mean-class accuracy)`.
    pub points: Vec<(usize, f64)>,
    pub amca: f64,
}

impl Series {
    /// Averages record-wise; every history must share the same evaluation
    /// points.
    pub fn average(label: &str, histories: &[&RunHistory]) -> Series {
        let Some(first) = histories.first() else {
            return Series {
                label: label.to_string(),
                points: vec![],
                amca: f64::NAN,
            };
        };
        let n = histories.len() as f64;
        let points: Vec<(usize, f64)> = first
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let sum: f64 = histories.iter().map(|h| h.records[i].mean_class_accuracy).sum();
                (r.experience, sum / n)
            })
            .collect();
        let amca = histories.iter().map(|h| amca(h)).sum::<f64>() / n;
        Series {
            label: label.to_string(),
            points,
            amca,
        }
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Accuracy-vs-experience chart with an optional dashed upper bound.
pub fn emit_svg(series: &[Series], upper_bound: Option<f64>, path: &Path) -> Result<()> {
    let svg = render_svg(series, upper_bound);
    let mut f = fs::File::create(path)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}

pub fn render_svg(series: &[Series], upper_bound: Option<f64>) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 200.0, 20.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let max_x = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(2);
    let sx = |e: usize| left + (e as f64 - 1.0) / (max_x as f64 - 1.0) * plot_w;
    let sy = |a: f64| top + (1.0 - a.clamp(0.0, 1.0)) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<g id="axes" stroke="black"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h
    );
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let y = sy(a);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{a:.2}</text>"##,
            left,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    for e in 1..=max_x {
        let x = sx(e);
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" text-anchor="middle">{e}</text>"#,
            top + plot_h + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">experience</text>"#,
        left + plot_w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">mean class accuracy</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );

    if let Some(ub) = upper_bound {
        let y = sy(ub);
        let _ = writeln!(
            out,
            r#"<line class="upper-bound" x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="gray" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
            left + plot_w
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .map(|&(e, a)| format!("{:.2},{:.2}", sx(e), sy(a)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            xml_escape(&s.label),
            points.join(" ")
        );
    }

    let lx = left + plot_w + 16.0;
    let _ = writeln!(out, r#"<g id="legend">"#);
    let mut ly = top + 10.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} (AMCA {:.4})</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            xml_escape(&s.label),
            s.amca
        );
        ly += 18.0;
    }
    if let Some(ub) = upper_bound {
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="gray" stroke-dasharray="6 4"/><text x="{}" y="{}">joint ({ub:.4})</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}

/// Parameters of `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenDataParams {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Writes the synthetic train split to `out` and the test split next to it
/// as `<stem>.test.csv`. Returns both paths.
pub fn gen_data(p: &GenDataParams, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let ds = gen_synthetic(p.classes, p.dim, p.per_class, p.separation, p.seed)?;
    let test = test_path_for(out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_csv(&ds.train, out)?;
    write_csv(&ds.test, &test)?;
    Ok((out.to_path_buf(), test))
}

pub fn test_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.test.csv"))
}
