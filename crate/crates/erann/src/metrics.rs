//! Ranking and classification metrics (AP / mAP / accuracy) and the
//! cross-validation fold plans.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Step-wise, non-interpolated average precision over the score-descending
/// ranking. Ties keep input order (stable sort).
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::InvalidInput("scores/positives length mismatch".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::InvalidInput("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut ap = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / total_pos as f64)
}

#[derive(Debug, Clone)]
pub struct MapReport {
    pub map: f64,
    /// Per-class AP; None where the class had no positives.
    pub per_class: Vec<Option<f64>>,
    pub skipped_classes: usize,
}

/// Unweighted mean of per-class AP over classes with at least one positive.
/// `targets` entries must be 0 or 1.
pub fn mean_average_precision(scores: &Tensor<f32>, targets: &Tensor<f32>) -> Result<MapReport> {
    let (n, c) = scores.dims2();
    if targets.shape() != [n, c] {
        return Err(Error::InvalidShape("scores/targets shape mismatch".into()));
    }
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0f64;
    let mut counted = 0usize;
    for cls in 0..c {
        let col: Vec<f64> = (0..n).map(|i| scores.data[i * c + cls] as f64).collect();
        let mut pos = Vec::with_capacity(n);
        for i in 0..n {
            match targets.data[i * c + cls] {
                t if t == 0.0 => pos.push(false),
                t if t == 1.0 => pos.push(true),
                t => return Err(Error::InvalidInput(format!("target {t} is not binary"))),
            }
        }
        if pos.iter().any(|&p| p) {
            let ap = average_precision(&col, &pos)?;
            per_class.push(Some(ap));
            sum += ap;
            counted += 1;
        } else {
            per_class.push(None);
        }
    }
    if counted == 0 {
        return Err(Error::InvalidInput("no class has a positive example".into()));
    }
    Ok(MapReport { map: sum / counted as f64, per_class, skipped_classes: c - counted })
}

/// Index of the row maximum; ties resolve to the lowest class index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the target class.
pub fn accuracy(scores: &Tensor<f32>, target_classes: &[usize]) -> Result<f64> {
    let (n, c) = scores.dims2();
    if target_classes.len() != n {
        return Err(Error::InvalidInput("targets length mismatch".into()));
    }
    if let Some(&t) = target_classes.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidInput(format!("target class {t} out of range 0..{c}")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("accuracy over an empty set".into()));
    }
    let hits = (0..n)
        .filter(|&i| argmax_row(&scores.data[i * c..(i + 1) * c]) == target_classes[i])
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FoldScheme {
    /// Folds read from the manifest's fold column (official 5/10-fold splits).
    Official,
    /// Groups (e.g. actors) assigned whole to k folds.
    GroupedKFold(usize),
    /// Single train/eval split: fold 0 trains, fold 1 evaluates.
    Holdout,
}

#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub scheme: FoldScheme,
    /// Clip index → fold id in 0..n_folds.
    pub assignments: Vec<usize>,
    pub n_folds: usize,
}

impl FoldPlan {
    /// Build from explicit fold labels (manifest fold column). Distinct
    /// labels are compacted to 0..n_folds in ascending label order.
    pub fn official(fold_labels: &[i64]) -> Result<Self> {
        if fold_labels.is_empty() {
            return Err(Error::InvalidPlan("empty dataset".into()));
        }
        let mut distinct: Vec<i64> = fold_labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::InvalidPlan("official folds need at least 2 distinct ids".into()));
        }
        let assignments = fold_labels
            .iter()
            .map(|l| distinct.binary_search(l).expect("member of distinct"))
            .collect();
        Ok(FoldPlan { scheme: FoldScheme::Official, assignments, n_folds: distinct.len() })
    }

    /// Assign whole groups to k folds, greedily balancing clip counts.
    /// Deterministic: groups are processed largest-first, names tie-break.
    pub fn grouped(groups: &[String], k: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidPlan("empty dataset".into()));
        }
        if k < 2 {
            return Err(Error::InvalidPlan("grouped folds need k >= 2".into()));
        }
        let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, gr) in groups.iter().enumerate() {
            if gr.is_empty() {
                return Err(Error::InvalidPlan(format!("clip {i} has no group key")));
            }
            by_group.entry(gr).or_default().push(i);
        }
        if by_group.len() < k {
            return Err(Error::InvalidPlan(format!(
                "{} groups cannot fill {k} folds",
                by_group.len()
            )));
        }
        let mut order: Vec<(&str, Vec<usize>)> = by_group.into_iter().collect();
        order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
        let mut loads = vec![0usize; k];
        let mut assignments = vec![0usize; groups.len()];
        for (_, clips) in order {
            let fold = (0..k).min_by_key(|&f| (loads[f], f)).expect("k >= 2 folds");
            loads[fold] += clips.len();
            for i in clips {
                assignments[i] = fold;
            }
        }
        Ok(FoldPlan { scheme: FoldScheme::GroupedKFold(k), assignments, n_folds: k })
    }

    /// Fold column 0 → train, anything else → the single evaluation fold.
    pub fn holdout(fold_labels: &[i64]) -> Result<Self> {
        if fold_labels.is_empty() {
            return Err(Error::InvalidPlan("empty dataset".into()));
        }
        let assignments: Vec<usize> =
            fold_labels.iter().map(|&l| if l == 0 { 0 } else { 1 }).collect();
        Ok(FoldPlan { scheme: FoldScheme::Holdout, assignments, n_folds: 2 })
    }

    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    /// (train indices, eval indices) for one evaluation fold.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let eval = self.fold_members(fold);
        let train =
            (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect();
        (train, eval)
    }

    /// Folds that serve as evaluation sets: all of them, except under
    /// holdout where only fold 1 evaluates.
    pub fn eval_folds(&self) -> Vec<usize> {
        match self.scheme {
            FoldScheme::Holdout => vec![1],
            _ => (0..self.n_folds).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvReport {
    /// metric[repeat][eval-fold position]
    pub per_fold: Vec<Vec<f64>>,
    pub repeat_means: Vec<f64>,
    pub grand_mean: f64,
}

/// Run `train_eval(train_indices, eval_indices, repeat)` over every
/// evaluation fold, `repeats` times, and aggregate.
pub fn cross_validate(
    plan: &FoldPlan,
    repeats: usize,
    train_eval: &mut dyn FnMut(&[usize], &[usize], usize) -> Result<f64>,
) -> Result<CvReport> {
    if repeats == 0 {
        return Err(Error::InvalidPlan("repeats must be >= 1".into()));
    }
    let eval_folds = plan.eval_folds();
    for &f in &eval_folds {
        if plan.fold_members(f).is_empty() {
            return Err(Error::InvalidPlan(format!("fold {f} has no clips")));
        }
        let (train, _) = plan.split(f);
        if train.is_empty() {
            return Err(Error::InvalidPlan(format!("fold {f} leaves no training clips")));
        }
    }
    let mut per_fold = Vec::with_capacity(repeats);
    let mut repeat_means = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut row = Vec::with_capacity(eval_folds.len());
        for &f in &eval_folds {
            let (train, eval) = plan.split(f);
            row.push(train_eval(&train, &eval, rep)?);
        }
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        repeat_means.push(mean);
        per_fold.push(row);
    }
    let grand_mean = repeat_means.iter().sum::<f64>() / repeats as f64;
    Ok(CvReport { per_fold, repeat_means, grand_mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force oracle: precision at every prefix ending in a positive.
    fn ap_oracle(scores: &[f64], positives: &[bool]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let ranked: Vec<bool> = order.iter().map(|&i| positives[i]).collect();
        let total = ranked.iter().filter(|&&p| p).count();
        let mut sum = 0.0;
        for k in 1..=ranked.len() {
            if ranked[k - 1] {
                let tp = ranked[..k].iter().filter(|&&p| p).count();
                sum += tp as f64 / k as f64;
            }
        }
        sum / total as f64
    }

    #[test]
    fn ap_basic_values() {
        // perfect ranking
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        // the worked example
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        // single positive item
        assert_eq!(average_precision(&[0.3], &[true]).unwrap(), 1.0);
        // no positives -> error
        assert!(average_precision(&[0.3], &[false]).is_err());
    }

    #[test]
    fn ap_matches_oracle_exhaustively() {
        // all positive-flag patterns on up to 8 items, several score draws
        let mut lcg = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((lcg >> 33) as f64) / (u32::MAX as f64)
        };
        for n in 1..=8usize {
            for pattern in 1u32..(1 << n) {
                let positives: Vec<bool> = (0..n).map(|i| pattern & (1 << i) != 0).collect();
                for _ in 0..3 {
                    let scores: Vec<f64> = (0..n).map(|_| next()).collect();
                    let got = average_precision(&scores, &positives).unwrap();
                    let want = ap_oracle(&scores, &positives);
                    assert!((got - want).abs() < 1e-12, "n={n} pattern={pattern:b}");
                }
            }
        }
    }

    #[test]
    fn ap_tie_stability() {
        // equal scores: stable order keeps the earlier item first
        let ap1 = average_precision(&[0.5, 0.5], &[true, false]).unwrap();
        let ap2 = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(ap1, 1.0);
        assert_eq!(ap2, 0.5);
    }

    proptest! {
        #[test]
        fn ap_monotone_invariance(
            scores in proptest::collection::vec(-50.0f64..50.0, 1..12),
            mask in proptest::collection::vec(any::<bool>(), 1..12),
        ) {
            let n = scores.len().min(mask.len());
            let scores = &scores[..n];
            let positives = &mask[..n];
            prop_assume!(positives.iter().any(|&p| p));
            let base = average_precision(scores, positives).unwrap();
            // strictly monotone transforms preserve the ranking
            let exp: Vec<f64> = scores.iter().map(|v| (v * 0.1).exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|v| 3.0 * v + 7.0).collect();
            let atan: Vec<f64> = scores.iter().map(|v| v.atan()).collect();
            for t in [&exp, &affine, &atan] {
                let ap = average_precision(t, positives).unwrap();
                prop_assert!((ap - base).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn map_behavior() {
        // identical perfect classes -> 1
        let scores = Tensor::from_vec(&[2, 2], vec![0.9, 0.9, 0.1, 0.1]).unwrap();
        let targets = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = mean_average_precision(&scores, &targets).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.skipped_classes, 0);

        // one-class case equals average_precision
        let scores = Tensor::from_vec(&[3, 1], vec![0.9, 0.8, 0.7]).unwrap();
        let targets = Tensor::from_vec(&[3, 1], vec![1.0, 0.0, 1.0]).unwrap();
        let r = mean_average_precision(&scores, &targets).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-12);

        // positive-free class skipped and counted
        let scores = Tensor::from_vec(&[2, 2], vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let targets = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = mean_average_precision(&scores, &targets).unwrap();
        assert_eq!(r.skipped_classes, 1);
        assert!(r.per_class[1].is_none());

        // random 5x4 vs per-class oracle
        let mut vals = Vec::new();
        let mut x = 1u64;
        for _ in 0..20 {
            x = x.wrapping_mul(48271) % 0x7fffffff;
            vals.push((x % 1000) as f32 / 1000.0);
        }
        let scores = Tensor::from_vec(&[5, 4], vals).unwrap();
        let tvals: Vec<f32> =
            (0..20).map(|i| if (i * 7 + 3) % 5 < 2 { 1.0 } else { 0.0 }).collect();
        let targets = Tensor::from_vec(&[5, 4], tvals).unwrap();
        let r = mean_average_precision(&scores, &targets).unwrap();
        let mut sum = 0.0;
        let mut cnt = 0;
        for c in 0..4 {
            let col: Vec<f64> = (0..5).map(|i| scores.data[i * 4 + c] as f64).collect();
            let pos: Vec<bool> = (0..5).map(|i| targets.data[i * 4 + c] == 1.0).collect();
            if pos.iter().any(|&p| p) {
                sum += ap_oracle(&col, &pos);
                cnt += 1;
            }
        }
        assert!((r.map - sum / cnt as f64).abs() < 1e-12);

        // all-negative matrix -> error
        let z = Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(mean_average_precision(&scores, &z).is_err());
    }

    #[test]
    fn accuracy_values() {
        let s = Tensor::from_vec(&[4, 3], vec![
            0.9, 0.0, 0.1, // -> 0
            0.1, 0.8, 0.1, // -> 1
            0.2, 0.3, 0.5, // -> 2
            0.4, 0.4, 0.2, // tie -> 0
        ])
        .unwrap();
        assert_eq!(accuracy(&s, &[0, 1, 2, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&s, &[1, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&s, &[0, 1, 2, 1]).unwrap(), 0.75);
        assert!(accuracy(&s, &[0, 1, 2, 9]).is_err());
    }

    #[test]
    fn fold_plans() {
        // official: labels compacted, partition preserved
        let plan = FoldPlan::official(&[1, 2, 3, 1, 2, 3]).unwrap();
        assert_eq!(plan.n_folds, 3);
        assert_eq!(plan.assignments, vec![0, 1, 2, 0, 1, 2]);
        let (train, eval) = plan.split(1);
        assert_eq!(eval, vec![1, 4]);
        assert_eq!(train, vec![0, 2, 3, 5]);

        // grouped: no group straddles folds
        let groups: Vec<String> = ["a", "a", "b", "b", "c", "d", "e", "e", "e"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let plan = FoldPlan::grouped(&groups, 4).unwrap();
        for g in ["a", "b", "c", "d", "e"] {
            let folds: Vec<usize> = (0..groups.len())
                .filter(|&i| groups[i] == g)
                .map(|i| plan.assignments[i])
                .collect();
            assert!(folds.windows(2).all(|w| w[0] == w[1]), "group {g} split: {folds:?}");
        }
        // deterministic
        let again = FoldPlan::grouped(&groups, 4).unwrap();
        assert_eq!(plan.assignments, again.assignments);

        // holdout: only fold 1 evaluates
        let plan = FoldPlan::holdout(&[0, 0, 1, 0]).unwrap();
        assert_eq!(plan.eval_folds(), vec![1]);
        assert_eq!(plan.split(1).1, vec![2]);
    }

    #[test]
    fn cross_validation_flow() {
        // constant predictor on a balanced 2-class set -> 0.5 per fold
        let plan = FoldPlan::official(&[1, 1, 2, 2]).unwrap();
        let classes = [0usize, 1, 0, 1];
        let mut run = |_train: &[usize], eval: &[usize], _rep: usize| -> crate::Result<f64> {
            let hits = eval.iter().filter(|&&i| classes[i] == 0).count();
            Ok(hits as f64 / eval.len() as f64)
        };
        let r = cross_validate(&plan, 3, &mut run).unwrap();
        assert_eq!(r.grand_mean, 0.5);
        for row in &r.per_fold {
            for &m in row {
                assert_eq!(m, 0.5);
            }
        }
        // identical seeds -> identical metrics (the callable is deterministic)
        let r2 = cross_validate(&plan, 3, &mut run).unwrap();
        assert_eq!(r.per_fold, r2.per_fold);

        // empty fold -> error
        let bad = FoldPlan { scheme: FoldScheme::Official, assignments: vec![0, 0], n_folds: 2 };
        assert!(cross_validate(&bad, 1, &mut run).is_err());
    }
}
