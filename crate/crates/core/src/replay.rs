//! Class-balanced reservoir replay memory and mini-batch composition.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::ClassId;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row index of the sample in its source training split.
    pub id: usize,
    pub label: ClassId,
    pub features: Vec<f64>,
}

/// A labeled mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<ClassId>,
    /// Source ids, experience rows first, then replay rows.
    pub ids: Vec<usize>,
    /// Number of leading rows drawn from the current experience.
    pub n_experience: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ClassSlot {
    seen: u64,
    stored: Vec<Sample>,
}

/// Fixed-capacity store with a per-class reservoir over each class's full
/// seen stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayMemory {
    capacity: usize,
    classes: BTreeMap<ClassId, ClassSlot>,
    generation: u64,
}

/// Splits `capacity` over the classes of `seen` as evenly as possible.
///
/// Classes with fewer seen samples than their fair share keep all of them and
/// the surplus goes to the rest. The final remainder is handed out one slot
/// at a time to the lowest class ids.
pub fn balanced_quotas(capacity: usize, seen: &BTreeMap<ClassId, u64>) -> BTreeMap<ClassId, usize> {
    let mut quotas: BTreeMap<ClassId, usize> = seen.keys().map(|&c| (c, 0)).collect();
    let mut open: Vec<ClassId> = seen.iter().filter(|(_, &n)| n > 0).map(|(&c, _)| c).collect();
    let mut remaining = capacity;
    while !open.is_empty() {
        let share = (remaining / open.len()) as u64;
        let (small, big): (Vec<ClassId>, Vec<ClassId>) = open.iter().partition(|c| seen[c] <= share);
        if small.is_empty() {
            break;
        }
        for c in small {
            quotas.insert(c, seen[&c] as usize);
            remaining -= seen[&c] as usize;
        }
        open = big;
    }
    if !open.is_empty() {
        let base = remaining / open.len();
        let extra = remaining % open.len();
        for (i, c) in open.into_iter().enumerate() {
            quotas.insert(c, base + usize::from(i < extra));
        }
    }
    quotas
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        ReplayMemory {
            capacity,
            classes: BTreeMap::new(),
            generation: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(|s| s.stored.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bumped on every update; samplers use it to notice stale orderings.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        self.classes
            .iter()
            .map(|(&c, s)| (c, s.stored.len()))
            .filter(|&(_, n)| n > 0)
            .collect()
    }

    pub fn seen_counts(&self) -> BTreeMap<ClassId, u64> {
        self.classes.iter().map(|(&c, s)| (c, s.seen)).collect()
    }

    /// Stored samples, grouped by class id.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.classes.values().flat_map(|s| s.stored.iter())
    }

    /// Streams one experience's samples through the per-class reservoirs.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        x: &Matrix,
        labels: &[ClassId],
        ids: &[usize],
        rng: &mut R,
    ) -> Result<()> {
        if x.rows() != labels.len() || ids.len() != labels.len() {
            return Err(Error::shape("ReplayMemory::update", x.rows(), labels.len()));
        }
        let mut totals = self.seen_counts();
        for &y in labels {
            *totals.entry(y).or_insert(0) += 1;
        }
        let quotas = balanced_quotas(self.capacity, &totals);

        // A uniform subset of a uniform reservoir is still uniform.
        for (c, slot) in self.classes.iter_mut() {
            let q = quotas[c];
            if slot.stored.len() > q {
                slot.stored.shuffle(rng);
                slot.stored.truncate(q);
            }
        }

        for (r, (&y, &id)) in labels.iter().zip(ids).enumerate() {
            let q = quotas[&y];
            let slot = self.classes.entry(y).or_default();
            slot.seen += 1;
            let sample = || Sample {
                id,
                label: y,
                features: x.row(r).to_vec(),
            };
            if slot.stored.len() < q {
                slot.stored.push(sample());
            } else if q > 0 {
                let j = rng.random_range(0..slot.seen);
                if (j as usize) < q {
                    slot.stored[j as usize] = sample();
                }
            }
        }
        self.generation += 1;
        debug_assert!(self.len() <= self.capacity);
        Ok(())
    }

    /// Audit dump: `sample_id,class,f0,...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.samples().next().map_or(0, |s| s.features.len());
        let mut header = String::from("sample_id,class");
        for i in 0..dim {
            header.push_str(&format!(",f{i}"));
        }
        writeln!(w, "{header}")?;
        for s in self.samples() {
            let mut line = format!("{},{}", s.id, s.label);
            for v in &s.features {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Epoch-shuffled cursor over the replay memory. Wraps around and
/// reshuffles when demand exceeds the stored count.
#[derive(Clone, Debug, Default)]
pub struct ReplaySampler {
    order: Vec<usize>,
    cursor: usize,
    generation: Option<u64>,
}

impl ReplaySampler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws `n` samples, without replacement within each pass.
    pub fn sample_batch<'m, R: Rng + ?Sized>(
        &mut self,
        mem: &'m ReplayMemory,
        n: usize,
        rng: &mut R,
    ) -> Vec<&'m Sample> {
        if n == 0 {
            return Vec::new();
        }
        let flat: Vec<&Sample> = mem.samples().collect();
        if flat.is_empty() {
            log::warn!("replay requested {n} samples from an empty memory");
            return Vec::new();
        }
        if self.generation != Some(mem.generation()) || self.order.len() != flat.len() {
            self.order = (0..flat.len()).collect();
            self.cursor = self.order.len();
            self.generation = Some(mem.generation());
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(flat[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }
}

/// Split of one mini-batch between experience and replay rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n_mbe: usize,
    pub n_mbr: usize,
}

impl BatchPlan {
    pub fn total(&self) -> usize {
        self.n_mbe + self.n_mbr
    }
}

/// `n_mbe : n_mbr = n_s : n_replay`, with `n_mbe` rounded half away from zero.
pub fn batch_ratio(n_s: usize, n_replay: usize, total: usize) -> Result<BatchPlan> {
    if total == 0 {
        return Err(Error::Config("mini-batch size must be at least 1".into()));
    }
    if n_s == 0 && n_replay == 0 {
        return Err(Error::Config("batch ratio undefined with n_s = n_replay = 0".into()));
    }
    if n_replay == 0 {
        return Ok(BatchPlan { n_mbe: total, n_mbr: 0 });
    }
    // round(total·n_s / (n_s + n_replay)) in exact integer arithmetic
    let num = total as u128 * n_s as u128;
    let den = (n_s + n_replay) as u128;
    let n_mbe = ((2 * num + den) / (2 * den)) as usize;
    Ok(BatchPlan {
        n_mbe,
        n_mbr: total - n_mbe,
    })
}

/// Shuffled single-pass cursor over the rows of the current experience.
#[derive(Clone, Debug)]
pub struct ExperienceCursor {
    order: Vec<usize>,
    pos: usize,
}

impl ExperienceCursor {
    pub fn new(n: usize) -> Self {
        ExperienceCursor {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn start_epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos >= self.order.len()
    }

    fn take(&mut self, n: usize) -> &[usize] {
        let end = (self.pos + n).min(self.order.len());
        let chunk = &self.order[self.pos..end];
        self.pos = end;
        chunk
    }
}

/// Next mini-batch of the epoch: `n_mbe` experience rows followed by
/// `n_mbr` replay rows. The last batch of an epoch may be short, in which
/// case the replay share shrinks proportionally (rounded down).
/// Returns `None` once the experience is exhausted.
#[allow(clippy::too_many_arguments)]
pub fn compose_minibatch<R: Rng + ?Sized>(
    exp_x: &Matrix,
    exp_y: &[ClassId],
    exp_ids: &[usize],
    cursor: &mut ExperienceCursor,
    mem: &ReplayMemory,
    sampler: &mut ReplaySampler,
    plan: BatchPlan,
    rng: &mut R,
) -> Option<Batch> {
    if cursor.is_exhausted() || plan.n_mbe == 0 {
        return None;
    }
    let rows = cursor.take(plan.n_mbe).to_vec();
    let n_rep = if rows.len() == plan.n_mbe {
        plan.n_mbr
    } else {
        plan.n_mbr * rows.len() / plan.n_mbe
    };
    let replay = sampler.sample_batch(mem, n_rep, rng);

    let dim = exp_x.cols();
    let mut data = Vec::with_capacity((rows.len() + replay.len()) * dim);
    let mut y = Vec::with_capacity(rows.len() + replay.len());
    let mut ids = Vec::with_capacity(rows.len() + replay.len());
    for &r in &rows {
        data.extend_from_slice(exp_x.row(r));
        y.push(exp_y[r]);
        ids.push(exp_ids[r]);
    }
    for s in &replay {
        data.extend_from_slice(&s.features);
        y.push(s.label);
        ids.push(s.id);
    }
    let x = Matrix::from_vec(y.len(), dim, data).expect("rows share the experience width");
    Some(Batch {
        x,
        y,
        ids,
        n_experience: rows.len(),
    })
}

/// Batches drawn from the memory only, one shuffled pass per call.
pub fn memory_epoch<R: Rng + ?Sized>(mem: &ReplayMemory, batch_size: usize, rng: &mut R) -> Vec<Batch> {
    let flat: Vec<&Sample> = mem.samples().collect();
    if flat.is_empty() || batch_size == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let dim = flat[0].features.len();
            let mut data = Vec::with_capacity(chunk.len() * dim);
            let mut y = Vec::with_capacity(chunk.len());
            let mut ids = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&flat[i].features);
                y.push(flat[i].label);
                ids.push(flat[i].id);
            }
            Batch {
                x: Matrix::from_vec(chunk.len(), dim, data).expect("uniform width"),
                y,
                ids,
                n_experience: 0,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stream(labels: &[ClassId], start_id: usize) -> (Matrix, Vec<ClassId>, Vec<usize>) {
        let ids: Vec<usize> = (start_id..start_id + labels.len()).collect();
        let x = Matrix::from_vec(labels.len(), 1, ids.iter().map(|&i| i as f64).collect()).unwrap();
        (x, labels.to_vec(), ids)
    }

    #[test]
    fn single_class_fills_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mem = ReplayMemory::new(10);
        let (x, y, ids) = stream(&[0; 100], 0);
        mem.update(&x, &y, &ids, &mut rng).unwrap();
        assert_eq!(mem.len(), 10);
        assert_eq!(mem.class_counts(), BTreeMap::from([(0, 10)]));
        assert_eq!(mem.seen_counts(), BTreeMap::from([(0, 100)]));
    }

    #[test]
    fn two_classes_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mem = ReplayMemory::new(10);
        let (x, y, ids) = stream(&[0; 7], 0);
        mem.update(&x, &y, &ids, &mut rng).unwrap();
        assert_eq!(mem.class_counts(), BTreeMap::from([(0, 7)]));
        let (x, y, ids) = stream(&[1; 20], 7);
        mem.update(&x, &y, &ids, &mut rng).unwrap();
        assert_eq!(mem.class_counts(), BTreeMap::from([(0, 5), (1, 5)]));
    }

    #[test]
    fn quotas_redistribute_surplus() {
        let seen = BTreeMap::from([(0, 2u64), (1, 100), (2, 100)]);
        assert_eq!(balanced_quotas(10, &seen), BTreeMap::from([(0, 2), (1, 4), (2, 4)]));
        let seen = BTreeMap::from([(0, 50u64), (1, 50), (2, 50)]);
        assert_eq!(balanced_quotas(10, &seen), BTreeMap::from([(0, 4), (1, 3), (2, 3)]));
        let seen = BTreeMap::from([(0, 1u64), (1, 1)]);
        assert_eq!(balanced_quotas(10, &seen), BTreeMap::from([(0, 1), (1, 1)]));
    }

    #[test]
    fn zero_capacity_stores_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mem = ReplayMemory::new(0);
        let (x, y, ids) = stream(&[0, 1, 2], 0);
        mem.update(&x, &y, &ids, &mut rng).unwrap();
        assert!(mem.is_empty());
    }

    #[test]
    fn sampler_permutation_and_wrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mem = ReplayMemory::new(6);
        let (x, y, ids) = stream(&[0, 0, 0, 1, 1, 1], 0);
        mem.update(&x, &y, &ids, &mut rng).unwrap();
        let mut sampler = ReplaySampler::new();
        let mut got: Vec<usize> = sampler.sample_batch(&mem, 6, &mut rng).iter().map(|s| s.id).collect();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4, 5]);
        assert!(sampler.sample_batch(&mem, 0, &mut rng).is_empty());

        let mut counts = [0usize; 6];
        let mut fresh = ReplaySampler::new();
        for _ in 0..4 {
            for s in fresh.sample_batch(&mem, 3, &mut rng) {
                counts[s.id] += 1;
            }
        }
        assert_eq!(counts, [2; 6]);
    }

    #[test]
    fn sampler_on_empty_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mem = ReplayMemory::new(5);
        assert!(ReplaySampler::new().sample_batch(&mem, 3, &mut rng).is_empty());
    }

    #[test]
    fn batch_ratio_cases() {
        assert_eq!(batch_ratio(2418, 1500, 256).unwrap(), BatchPlan { n_mbe: 158, n_mbr: 98 });
        assert_eq!(batch_ratio(2500, 2000, 256).unwrap(), BatchPlan { n_mbe: 142, n_mbr: 114 });
        assert_eq!(batch_ratio(50, 0, 128).unwrap(), BatchPlan { n_mbe: 128, n_mbr: 0 });
        // exact tie rounds away from zero
        assert_eq!(batch_ratio(1, 3, 2).unwrap(), BatchPlan { n_mbe: 1, n_mbr: 1 });
        assert_eq!(batch_ratio(3, 5, 4).unwrap(), BatchPlan { n_mbe: 2, n_mbr: 2 });
        assert!(batch_ratio(0, 0, 8).is_err());
        assert!(batch_ratio(1, 1, 0).is_err());
    }

    #[test]
    fn compose_uses_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ex, ey, eids) = stream(&[3, 3, 4, 4, 4], 100);
        let mut mem = ReplayMemory::new(4);
        let (mx, my, mids) = stream(&[1, 1, 1], 0);
        mem.update(&mx, &my, &mids, &mut rng).unwrap();
        let mut sampler = ReplaySampler::new();

        let mut cur = ExperienceCursor::new(5);
        cur.start_epoch(&mut rng);
        let plan = BatchPlan { n_mbe: 4, n_mbr: 0 };
        let b = compose_minibatch(&ex, &ey, &eids, &mut cur, &mem, &mut sampler, plan, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.ids.iter().all(|&i| i >= 100));

        let mut cur = ExperienceCursor::new(5);
        cur.start_epoch(&mut rng);
        let plan = BatchPlan { n_mbe: 2, n_mbr: 2 };
        let b = compose_minibatch(&ex, &ey, &eids, &mut cur, &mem, &mut sampler, plan, &mut rng).unwrap();
        assert_eq!(b.y[2..], [1, 1]);
        assert_eq!(b.n_experience, 2);
        compose_minibatch(&ex, &ey, &eids, &mut cur, &mem, &mut sampler, plan, &mut rng).unwrap();
        // final short batch: 1 experience row, replay share floor(2·1/2) = 1
        let last = compose_minibatch(&ex, &ey, &eids, &mut cur, &mem, &mut sampler, plan, &mut rng).unwrap();
        assert_eq!((last.n_experience, last.len()), (1, 2));
        assert!(compose_minibatch(&ex, &ey, &eids, &mut cur, &mem, &mut sampler, plan, &mut rng).is_none());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mem = ReplayMemory::new(2);
        let (x, y, ids) = stream(&[0, 1], 7);
        mem.update(&x, &y, &ids, &mut rng).unwrap();
        let mut buf = Vec::new();
        mem.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "sample_id,class,f0\n7,0,7\n8,1,8\n");
    }
}
