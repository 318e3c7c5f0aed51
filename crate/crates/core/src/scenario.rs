//! Datasets and experience streams.
//!
//! Two stream shapes are supported: class-incremental `A/B-C` splits (`A`
//! experiences, `B` classes in the first, `C` fresh classes in each later
//! one) and class-incremental streams with repetition, where each later
//! experience carries one chunk of one class that may already be known.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::ClassId;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub x: Matrix,
    pub y: Vec<ClassId>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, rows: &[usize]) -> LabeledSplit {
        LabeledSplit {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    /// Rows whose label is in `classes`, in original order.
    pub fn rows_of(&self, classes: &BTreeSet<ClassId>) -> Vec<usize> {
        (0..self.len()).filter(|&r| classes.contains(&self.y[r])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: LabeledSplit,
    pub test: LabeledSplit,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    /// 1-based position in the stream.
    pub index: usize,
    pub x: Matrix,
    pub y: Vec<ClassId>,
    /// Row ids into the training split.
    pub ids: Vec<usize>,
    pub novel: BTreeSet<ClassId>,
    pub rep: BTreeSet<ClassId>,
}

impl Experience {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.y.iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSpec {
    ClassIncremental {
        experiences: usize,
        first: usize,
        per_experience: usize,
    },
    Nic {
        chunks_per_class: usize,
        first: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceStream {
    pub experiences: Vec<Experience>,
    pub scenario: ScenarioSpec,
    pub seed: u64,
}

impl ExperienceStream {
    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    pub fn build(ds: &Dataset, spec: &ScenarioSpec, seed: u64) -> Result<Self> {
        match *spec {
            ScenarioSpec::ClassIncremental {
                experiences,
                first,
                per_experience,
            } => make_class_incremental(ds, experiences, first, per_experience, seed),
            ScenarioSpec::Nic {
                chunks_per_class,
                first,
            } => make_nic(ds, chunks_per_class, first, seed),
        }
    }
}

/// `C` unit-covariance Gaussian clusters whose means have norm `separation`.
/// Each class gets `per_class` training samples and a 20% held-out test
/// share (`round(per_class / 4)` samples).
pub fn gen_synthetic(
    n_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes and 2 dimensions, got {n_classes} and {dim}"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be non-negative, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test_per_class = (per_class as f64 / 4.0).round() as usize;
    let mut train_x = Vec::with_capacity(n_classes * per_class * dim);
    let mut train_y = Vec::with_capacity(n_classes * per_class);
    let mut test_x = Vec::with_capacity(n_classes * test_per_class * dim);
    let mut test_y = Vec::with_capacity(n_classes * test_per_class);
    for c in 0..n_classes {
        let mut mean: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { separation / norm } else { 0.0 };
        mean.iter_mut().for_each(|v| *v *= scale);
        for i in 0..per_class + test_per_class {
            let (xs, ys) = if i < per_class {
                (&mut train_x, &mut train_y)
            } else {
                (&mut test_x, &mut test_y)
            };
            for m in &mean {
                let noise: f64 = rng.sample(StandardNormal);
                xs.push(m + noise);
            }
            ys.push(c);
        }
    }
    Ok(Dataset {
        train: LabeledSplit {
            x: Matrix::from_vec(train_y.len(), dim, train_x)?,
            y: train_y,
        },
        test: LabeledSplit {
            x: Matrix::from_vec(test_y.len(), dim, test_x)?,
            y: test_y,
        },
        n_classes,
    })
}

/// `labels \ known` and `labels ∩ known`.
pub fn split_labels(
    labels: &BTreeSet<ClassId>,
    known: &BTreeSet<ClassId>,
) -> (BTreeSet<ClassId>, BTreeSet<ClassId>) {
    let novel = labels.difference(known).copied().collect();
    let rep = labels.intersection(known).copied().collect();
    (novel, rep)
}

fn assemble(ds: &Dataset, groups: Vec<Vec<usize>>, scenario: ScenarioSpec, seed: u64) -> ExperienceStream {
    let mut known = BTreeSet::new();
    let experiences = groups
        .into_iter()
        .enumerate()
        .map(|(i, rows)| {
            let split = ds.train.select(&rows);
            let labels: BTreeSet<ClassId> = split.y.iter().copied().collect();
            let (novel, rep) = split_labels(&labels, &known);
            known.extend(labels);
            Experience {
                index: i + 1,
                x: split.x,
                y: split.y,
                ids: rows,
                novel,
                rep,
            }
        })
        .collect();
    ExperienceStream {
        experiences,
        scenario,
        seed,
    }
}

/// Class-incremental `A/B-C` stream; the class order is a seeded permutation.
pub fn make_class_incremental(
    ds: &Dataset,
    experiences: usize,
    first: usize,
    per_experience: usize,
    seed: u64,
) -> Result<ExperienceStream> {
    if experiences == 0 || first == 0 || (experiences > 1 && per_experience == 0) {
        return Err(Error::Config(format!(
            "A/B-C scenario {experiences}/{first}-{per_experience} must have positive parts"
        )));
    }
    let covered = first + (experiences - 1) * per_experience;
    if covered != ds.n_classes {
        return Err(Error::Config(format!(
            "A/B-C rule violated: B + (A-1)*C = {first} + {}*{per_experience} = {covered}, \
             but the dataset has {} classes",
            experiences - 1,
            ds.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<ClassId> = (0..ds.n_classes).collect();
    order.shuffle(&mut rng);
    let mut groups = Vec::with_capacity(experiences);
    let mut start = 0;
    for i in 0..experiences {
        let width = if i == 0 { first } else { per_experience };
        let classes: BTreeSet<ClassId> = order[start..start + width].iter().copied().collect();
        start += width;
        groups.push(ds.train.rows_of(&classes));
    }
    Ok(assemble(
        ds,
        groups,
        ScenarioSpec::ClassIncremental {
            experiences,
            first,
            per_experience,
        },
        seed,
    ))
}

/// Class-incremental stream with repetition. Every class's training rows
/// are shuffled and cut into `chunks_per_class` contiguous chunks. The first
/// experience holds chunk 0 of `first` classes; every remaining chunk becomes
/// its own experience, in seeded random order.
pub fn make_nic(ds: &Dataset, chunks_per_class: usize, first: usize, seed: u64) -> Result<ExperienceStream> {
    if chunks_per_class == 0 || first == 0 || first > ds.n_classes {
        return Err(Error::Config(format!(
            "NIC scenario needs chunks >= 1 and 1 <= first <= {}, got chunks={chunks_per_class}, first={first}",
            ds.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chunks: Vec<Vec<Vec<usize>>> = Vec::with_capacity(ds.n_classes);
    for c in 0..ds.n_classes {
        let mut rows = ds.train.rows_of(&BTreeSet::from([c]));
        if rows.len() < chunks_per_class {
            return Err(Error::Config(format!(
                "class {c} has {} training samples, fewer than {chunks_per_class} chunks",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        let base = rows.len() / chunks_per_class;
        let extra = rows.len() % chunks_per_class;
        let mut out = Vec::with_capacity(chunks_per_class);
        let mut start = 0;
        for k in 0..chunks_per_class {
            let len = base + usize::from(k < extra);
            let mut chunk = rows[start..start + len].to_vec();
            chunk.sort_unstable();
            out.push(chunk);
            start += len;
        }
        chunks.push(out);
    }
    let mut order: Vec<ClassId> = (0..ds.n_classes).collect();
    order.shuffle(&mut rng);
    let initial: BTreeSet<ClassId> = order[..first].iter().copied().collect();

    let mut first_rows: Vec<usize> = initial.iter().flat_map(|&c| chunks[c][0].iter().copied()).collect();
    first_rows.sort_unstable();
    let mut rest: Vec<(ClassId, usize)> = Vec::new();
    for c in 0..ds.n_classes {
        let from = usize::from(initial.contains(&c));
        rest.extend((from..chunks_per_class).map(|k| (c, k)));
    }
    rest.shuffle(&mut rng);
    if rest.is_empty() {
        return Err(Error::Config(
            "NIC scenario yields a single experience; need at least 2".into(),
        ));
    }
    let mut groups = vec![first_rows];
    groups.extend(rest.into_iter().map(|(c, k)| chunks[c][k].clone()));
    Ok(assemble(
        ds,
        groups,
        ScenarioSpec::Nic {
            chunks_per_class,
            first,
        },
        seed,
    ))
}

/// Reads `f0,...,f{d-1},label`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledSplit> {
    let path = path.as_ref();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let n_cols = headers.len();
    if n_cols < 2 || headers.get(n_cols - 1) != Some("label") {
        return Err(parse_err(1, "last header column must be `label`".into()));
    }
    for (i, h) in headers.iter().take(n_cols - 1).enumerate() {
        if h != format!("f{i}") {
            return Err(parse_err(1, format!("expected header `f{i}`, found `{h}`")));
        }
    }
    let dim = n_cols - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != n_cols {
            return Err(parse_err(line, format!("expected {n_cols} fields, found {}", record.len())));
        }
        for (i, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column f{i}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{i}: non-finite value")));
            }
            data.push(v);
        }
        let raw = &record[dim];
        let label: ClassId = raw
            .parse()
            .map_err(|_| parse_err(line, format!("label `{raw}` is not a non-negative integer")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(LabeledSplit {
        x: Matrix::from_vec(labels.len(), dim, data)?,
        y: labels,
    })
}

pub fn write_csv(split: &LabeledSplit, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..split.dim()).map(|i| format!("f{i}")).chain(["label".into()]).collect();
    writeln!(w, "{}", header.join(","))?;
    for r in 0..split.len() {
        let mut line = String::new();
        for v in split.x.row(r) {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&split.y[r].to_string());
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

impl Dataset {
    /// Builds a dataset from CSV files. Without a test file, a seeded 20%
    /// of each class is held out.
    pub fn from_csv(train: &Path, test: Option<&Path>, n_classes: Option<usize>, seed: u64) -> Result<Dataset> {
        let loaded = load_csv(train)?;
        let (train, test) = match test {
            Some(p) => (loaded, load_csv(p)?),
            None => holdout(&loaded, seed),
        };
        if train.dim() != test.dim() && !test.is_empty() {
            return Err(Error::Config(format!(
                "train has {} features but test has {}",
                train.dim(),
                test.dim()
            )));
        }
        let max_label = train.y.iter().chain(&test.y).copied().max().unwrap_or(0);
        let n_classes = n_classes.unwrap_or(max_label + 1);
        if max_label >= n_classes {
            return Err(Error::Label {
                label: max_label,
                n_classes,
            });
        }
        Ok(Dataset { train, test, n_classes })
    }
}

fn holdout(all: &LabeledSplit, seed: u64) -> (LabeledSplit, LabeledSplit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: BTreeSet<ClassId> = all.y.iter().copied().collect();
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for c in classes {
        let mut rows = all.rows_of(&BTreeSet::from([c]));
        rows.shuffle(&mut rng);
        let n_test = (rows.len() as f64 * 0.2).round() as usize;
        test_rows.extend_from_slice(&rows[..n_test]);
        train_rows.extend_from_slice(&rows[n_test..]);
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    (all.select(&train_rows), all.select(&test_rows))
}
