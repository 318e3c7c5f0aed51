use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ClassId, SplitModel};
use crate::scenario::LabeledSplit;

/// Which test samples an evaluation looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Every class of the dataset, seen or not.
    #[default]
    Fixed,
    /// Only the classes seen so far.
    Growing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub experience: usize,
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean_class_accuracy: f64,
    pub overall_accuracy: f64,
    pub mode: EvalMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub strategy: String,
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    /// Training wall-clock seconds, one entry per experience.
    pub wall_clock: Vec<f64>,
    pub config: serde_json::Value,
}

impl RunHistory {
    pub fn total_wall_clock(&self) -> f64 {
        self.wall_clock.iter().sum()
    }
}

/// Per-class accuracy of argmax predictions.
///
/// `seen` is only used in [`EvalMode::Growing`], where both the test
/// samples and the averaging set are restricted to it. Classes without test
/// samples are left out of the mean.
pub fn evaluate(
    model: &SplitModel,
    test: &LabeledSplit,
    seen: &BTreeSet<ClassId>,
    mode: EvalMode,
    experience: usize,
) -> Result<EvalRecord> {
    let classes: BTreeSet<ClassId> = match mode {
        EvalMode::Fixed => (0..model.n_classes()).collect(),
        EvalMode::Growing => seen.clone(),
    };
    let rows = test.rows_of(&classes);
    let subset = test.select(&rows);
    let predictions = if subset.is_empty() {
        Vec::new()
    } else {
        model.predict(&subset.x)?
    };

    let mut total: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut correct: BTreeMap<ClassId, usize> = BTreeMap::new();
    for (&y, &p) in subset.y.iter().zip(&predictions) {
        *total.entry(y).or_default() += 1;
        if y == p {
            *correct.entry(y).or_default() += 1;
        }
    }
    let missing: Vec<ClassId> = classes.iter().filter(|c| !total.contains_key(c)).copied().collect();
    if !missing.is_empty() {
        log::warn!("classes {missing:?} have no test samples; excluded from the mean");
    }
    if total.is_empty() {
        return Err(Error::Config("evaluation set has no test samples".into()));
    }
    let per_class: BTreeMap<ClassId, f64> = total
        .iter()
        .map(|(&c, &n)| (c, *correct.get(&c).unwrap_or(&0) as f64 / n as f64))
        .collect();
    let mean_class_accuracy = per_class.values().sum::<f64>() / per_class.len() as f64;
    let overall_accuracy = correct.values().sum::<usize>() as f64 / subset.len() as f64;
    Ok(EvalRecord {
        experience,
        per_class,
        mean_class_accuracy,
        overall_accuracy,
        mode,
    })
}

/// Average of the mean-class accuracies of all evaluation records
/// (NaN for an empty history).
pub fn amca(history: &RunHistory) -> f64 {
    amca_of(&history.records)
}

pub fn amca_of(records: &[EvalRecord]) -> f64 {
    records.iter().map(|r| r.mean_class_accuracy).sum::<f64>() / records.len() as f64
}

/// Mean-class accuracy after the last evaluated experience.
pub fn final_accuracy(history: &RunHistory) -> f64 {
    history
        .records
        .last()
        .map_or(f64::NAN, |r| r.mean_class_accuracy)
}
