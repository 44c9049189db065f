//! Class balancing through a surplus pool, random test selection and
//! stratified N-fold cross-validation plans.
//!
//! The *active pool* is every record in the train or validation split whose
//! status keeps it in the corpus. Balancing and splitting only move records
//! between splits; no record is created or destroyed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, SizeReport, Split, Status};

fn in_active_pool(r: &crate::manifest::SampleRecord) -> bool {
    matches!(r.split, Split::Train | Split::Validation) && !r.status.is_excluded()
}

/// Active pool ids per class, each list sorted by id.
fn pool_by_class(manifest: &DatasetManifest) -> Result<Vec<Vec<String>>> {
    let mut by_class = vec![Vec::new(); manifest.num_classes()];
    for r in manifest.records().filter(|r| in_active_pool(r)) {
        if r.status == Status::Unverified {
            return Err(Error::InvalidRecord {
                id: r.id.clone(),
                message: "unverified sample in the active pool".into(),
            });
        }
        by_class[r.label.index()].push(r.id.clone());
    }
    Ok(by_class)
}

/// Moves randomly chosen excess samples of every class to the surplus split
/// so that each class keeps exactly the smallest class count.
pub fn balance_classes<R: Rng + ?Sized>(manifest: &DatasetManifest, rng: &mut R) -> Result<DatasetManifest> {
    let by_class = pool_by_class(manifest)?;
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(manifest.classes()[empty].clone()));
    }
    let target = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut next_rank = manifest
        .records()
        .filter_map(|r| r.surplus_rank)
        .max()
        .map_or(0, |r| r + 1);
    let mut out = manifest.clone();
    for mut ids in by_class {
        if ids.len() == target {
            continue;
        }
        ids.shuffle(rng);
        for id in &ids[target..] {
            out.update(id, |r| {
                r.split = Split::Surplus;
                r.surplus_rank = Some(next_rank);
            })?;
            next_rank += 1;
        }
    }
    Ok(out)
}

/// Moves up to `budget` surplus samples back into train, one class at a
/// time starting with the smallest active class, oldest surplus first
/// within a class. Stops before the size budget would break.
pub fn restore_from_surplus<R: Rng + ?Sized>(manifest: &DatasetManifest, budget: usize, rng: &mut R) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    if budget == 0 {
        return Ok(out);
    }
    let mut surplus: Vec<Vec<(u64, String)>> = vec![Vec::new(); manifest.num_classes()];
    let mut active = vec![0usize; manifest.num_classes()];
    for r in manifest.records() {
        if r.split == Split::Surplus && !r.status.is_excluded() {
            surplus[r.label.index()].push((r.surplus_rank.unwrap_or(u64::MAX), r.id.clone()));
        } else if in_active_pool(r) {
            active[r.label.index()] += 1;
        }
    }
    for list in &mut surplus {
        // popped from the back, so oldest last
        list.sort_by(|a, b| b.cmp(a));
    }
    let mut order: Vec<usize> = (0..surplus.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&c| active[c]);

    let size = out.validate_size_constraint();
    let room = size.n_max.saturating_sub(size.train + size.validation + 1);
    let mut left = budget.min(room);
    while left > 0 {
        let mut moved = false;
        for &c in &order {
            if left == 0 {
                break;
            }
            if let Some((_, id)) = surplus[c].pop() {
                out.update(&id, |r| {
                    r.split = Split::Train;
                    r.surplus_rank = None;
                })?;
                left -= 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(out)
}

/// Splits `size` across classes proportionally (largest remainder).
fn stratified_quota(counts: &[usize], size: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * size / total).collect();
    let mut remainders: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c * size % total, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = size - quota.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(short) {
        quota[i] += 1;
    }
    quota
}

/// Marks a class-stratified uniform sample of the active pool as test.
pub fn select_test_set<R: Rng + ?Sized>(manifest: &DatasetManifest, size: usize, rng: &mut R) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    if size == 0 {
        return Ok(out);
    }
    let by_class = pool_by_class(manifest)?;
    let pool: usize = by_class.iter().map(Vec::len).sum();
    if size > pool {
        return Err(Error::Config(format!("test size {size} exceeds the active pool of {pool}")));
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quota = stratified_quota(&counts, size);
    for (mut ids, q) in by_class.into_iter().zip(quota) {
        ids.shuffle(rng);
        for id in &ids[..q] {
            out.update(id, |r| r.split = Split::Test)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub assignments: BTreeMap<String, usize>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
}

impl FoldPlan {
    /// `(train, validation)` ids of fold `i`: fold `i` validates, the rest train.
    pub fn fold(&self, i: usize) -> (Vec<&str>, Vec<&str>) {
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for (id, &f) in &self.assignments {
            if f == i {
                validation.push(id.as_str());
            } else {
                train.push(id.as_str());
            }
        }
        (train, validation)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Size budget for every `(train, validation)` pair of the plan.
    pub fn size_reports(&self, n_max: usize) -> Vec<SizeReport> {
        (0..self.n_folds)
            .map(|i| {
                let (t, v) = self.fold(i);
                SizeReport::new(t.len(), v.len(), n_max)
            })
            .collect()
    }

    /// Copy of `manifest` whose train/validation splits realise fold `i`.
    pub fn materialize(&self, manifest: &DatasetManifest, i: usize) -> Result<DatasetManifest> {
        let mut out = manifest.clone();
        for (id, &f) in &self.assignments {
            let split = if f == i { Split::Validation } else { Split::Train };
            out.update(id, |r| r.split = split)?;
        }
        out.validate_size_constraint().into_result()?;
        Ok(out)
    }
}

/// Stratified partition of the active pool into `n_folds` folds. Within each
/// class the shuffled ids are dealt round-robin, continuing where the
/// previous class stopped, so per-class and total fold sizes differ by at
/// most one.
pub fn make_folds(manifest: &DatasetManifest, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::Config("at least two folds are required".into()));
    }
    let by_class = pool_by_class(manifest)?;
    let pool: usize = by_class.iter().map(Vec::len).sum();
    if pool < n_folds {
        return Err(Error::Config(format!("active pool of {pool} is smaller than {n_folds} folds")));
    }
    if pool >= manifest.n_max {
        return Err(Error::Budget {
            train: pool - pool / n_folds,
            validation: pool / n_folds,
            n_max: manifest.n_max,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut position = 0usize;
    for mut ids in by_class {
        ids.shuffle(&mut rng);
        for id in ids {
            assignments.insert(id, position % n_folds);
            position += 1;
        }
    }
    let test_ids = manifest
        .records()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.id.clone())
        .collect();
    Ok(FoldPlan {
        n_folds,
        assignments,
        test_ids,
        seed,
    })
}

/// Per-class counts of each fold, `[fold][class]`.
pub fn fold_class_counts(plan: &FoldPlan, manifest: &DatasetManifest) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0; manifest.num_classes()]; plan.n_folds];
    for (id, &f) in &plan.assignments {
        if let Some(r) = manifest.get(id) {
            counts[f][r.label.index()] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ClassId, Digest256, SampleRecord};

    fn pool(counts: &[usize], n_max: usize) -> DatasetManifest {
        let classes: Vec<String> = (0..counts.len()).map(|i| format!("c{i}")).collect();
        let mut m = DatasetManifest::new(classes, n_max).unwrap();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let mut r = SampleRecord::new(format!("c{c}-{i:04}"), "x.png", Digest256([0; 32]), ClassId::from(c));
                r.status = Status::Certified;
                r.split = Split::Train;
                m.insert(r).unwrap();
            }
        }
        m
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn balance_to_min_count() {
        let m = pool(&[250, 200, 210], 10_000);
        let out = balance_classes(&m, &mut rng()).unwrap();
        assert_eq!(out.class_histogram(Split::Train), vec![200, 200, 200]);
        assert_eq!(out.count_split(Split::Surplus), 60);
        assert_eq!(out.len(), m.len());
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let m = pool(&[5, 5], 10_000);
        assert_eq!(balance_classes(&m, &mut rng()).unwrap(), m);
    }

    #[test]
    fn empty_class_is_an_error() {
        let m = pool(&[5, 0, 3], 10_000);
        assert!(matches!(balance_classes(&m, &mut rng()), Err(Error::EmptyClass(c)) if c == "c1"));
    }

    #[test]
    fn restore_round_robin_and_fifo() {
        let m = pool(&[4, 2], 10_000);
        let balanced = balance_classes(&m, &mut rng()).unwrap();
        let extra = pool(&[1, 4], 10_000);
        // surplus {c0: 2} plus one more class with surplus
        let mut m2 = balanced.clone();
        for r in extra.records().filter(|r| r.label == ClassId(1)).take(1) {
            let mut r = r.clone();
            r.id = format!("extra-{}", r.id);
            r.split = Split::Surplus;
            r.surplus_rank = Some(100);
            m2.insert(r).unwrap();
        }
        assert_eq!(restore_from_surplus(&m2, 0, &mut rng()).unwrap(), m2);
        let out = restore_from_surplus(&m2, 2, &mut rng()).unwrap();
        assert_eq!(out.class_histogram(Split::Train), vec![3, 3]);
        // the oldest c0 surplus sample came back first
        let oldest = m2
            .records()
            .filter(|r| r.split == Split::Surplus && r.label == ClassId(0))
            .min_by_key(|r| r.surplus_rank)
            .unwrap();
        assert_eq!(out.get(&oldest.id).unwrap().split, Split::Train);

        let all = restore_from_surplus(&m2, 100, &mut rng()).unwrap();
        assert_eq!(all.count_split(Split::Surplus), 0);
    }

    #[test]
    fn restore_respects_budget() {
        let m = pool(&[6, 2], 7);
        let balanced = balance_classes(&m, &mut rng()).unwrap();
        let out = restore_from_surplus(&balanced, 10, &mut rng()).unwrap();
        assert!(out.validate_size_constraint().satisfied);
        assert_eq!(out.count_split(Split::Train), 6);
    }

    #[test]
    fn folds_partition_arithmetic() {
        let m = pool(&[80; 10], 10_000);
        let plan = make_folds(&m, 8, 13).unwrap();
        assert_eq!(plan.fold_sizes(), vec![100; 8]);
        let (t, v) = plan.fold(3);
        assert_eq!((t.len(), v.len()), (700, 100));
        assert!(plan.size_reports(m.n_max).iter().all(|r| r.satisfied));
        let fold_m = plan.materialize(&m, 3).unwrap();
        assert_eq!(fold_m.count_split(Split::Validation), 100);
    }

    #[test]
    fn fold_errors() {
        let m = pool(&[3, 3], 10_000);
        assert!(make_folds(&m, 1, 0).is_err());
        assert!(make_folds(&m, 8, 0).is_err());
        let tight = pool(&[5, 5], 10);
        assert!(matches!(make_folds(&tight, 2, 0), Err(Error::Budget { .. })));
    }

    #[test]
    fn stratified_test_selection() {
        let m = pool(&[50; 10], 10_000);
        let out = select_test_set(&m, 100, &mut rng()).unwrap();
        assert_eq!(out.class_histogram(Split::Test), vec![10; 10]);
        assert_eq!(select_test_set(&m, 0, &mut rng()).unwrap(), m);
        let everything = select_test_set(&m, 500, &mut rng()).unwrap();
        assert_eq!(everything.count_split(Split::Test), 500);
        assert!(select_test_set(&m, 501, &mut rng()).is_err());
        let plan = make_folds(&select_test_set(&m, 100, &mut rng()).unwrap(), 8, 1).unwrap();
        assert_eq!(plan.assignments.len(), 400);
        assert_eq!(plan.test_ids.len(), 100);
    }

    #[test]
    fn quota_sums_to_size() {
        assert_eq!(stratified_quota(&[3, 3, 4], 5).iter().sum::<usize>(), 5);
        assert_eq!(stratified_quota(&[1, 99], 10), vec![0, 10]);
    }
}
