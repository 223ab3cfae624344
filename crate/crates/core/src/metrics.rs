//! Evaluation statistics: ROC analysis, operating-point tables, Pearson
//! correlation and linearly weighted Cohen's kappa.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::calibrate_threshold;
use crate::error::{Error, Result};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

/// Mann–Whitney AUC with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(
            "scores and labels differ in length".into(),
        ));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyClass("roc_auc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                pos_rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC points `(fpr, tpr)` from the strictest threshold to the loosest,
/// starting at (0, 0); tied scores move along a diagonal.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(
            "scores and labels differ in length".into(),
        ));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::EmptyClass("roc_curve needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// Trapezoidal area under a polyline of `(x, y)` points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingRow {
    pub target_sensitivity: f64,
    pub threshold: f64,
    pub n_discarded: usize,
    pub n_review: usize,
    /// Missed positive cores per ISUP grade 1..5.
    pub missed_by_grade: [usize; 5],
    pub missed_men: usize,
}

/// Counts at a fixed threshold; cores scoring `>= threshold` go to review.
pub fn operating_row_at(
    threshold: f64,
    target_sensitivity: f64,
    scores: &[f64],
    grades: &[u8],
    man_ids: &[String],
) -> Result<OperatingRow> {
    if scores.len() != grades.len() || scores.len() != man_ids.len() {
        return Err(Error::DimensionMismatch(
            "operating table inputs differ in length".into(),
        ));
    }
    let mut row = OperatingRow {
        target_sensitivity,
        threshold,
        n_discarded: 0,
        n_review: 0,
        missed_by_grade: [0; 5],
        missed_men: 0,
    };
    // man -> (has positive core, any positive core detected)
    let mut men: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for ((&s, &g), man) in scores.iter().zip(grades).zip(man_ids) {
        if g > 5 {
            return Err(Error::InvalidParam(format!("grade {g} outside 0..=5")));
        }
        let review = s >= threshold;
        if review {
            row.n_review += 1;
        } else {
            row.n_discarded += 1;
        }
        let e = men.entry(man.as_str()).or_default();
        if g >= 1 {
            e.0 = true;
            if review {
                e.1 = true;
            } else {
                row.missed_by_grade[g as usize - 1] += 1;
            }
        }
    }
    row.missed_men = men.values().filter(|&&(has, hit)| has && !hit).count();
    Ok(row)
}

/// One row per target; thresholds calibrated on this same set. `grades` is
/// 0 for benign cores and the ISUP grade otherwise.
pub fn operating_table(
    scores: &[f64],
    grades: &[u8],
    man_ids: &[String],
    targets: &[f64],
) -> Result<Vec<OperatingRow>> {
    let labels: Vec<bool> = grades.iter().map(|&g| g >= 1).collect();
    targets
        .iter()
        .map(|&t| {
            let thr = calibrate_threshold(scores, &labels, t)?;
            operating_row_at(thr, t, scores, grades, man_ids)
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(
            "pearson inputs differ in length".into(),
        ));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate(
            "pearson needs at least two points".into(),
        ));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson input is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Square contingency table, rows = rater A, columns = rater B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<u8>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        if counts.iter().flatten().sum::<u64>() == 0 {
            return Err(Error::Degenerate("confusion matrix is empty".into()));
        }
        Ok(ConfusionMatrix {
            categories: (0..k as u8).collect(),
            counts,
        })
    }

    /// Tabulates paired ratings over the ordered `categories`.
    pub fn from_pairs(a: &[u8], b: &[u8], categories: &[u8]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch(
                "rating vectors differ in length".into(),
            ));
        }
        let pos = |v: u8| {
            categories
                .iter()
                .position(|&c| c == v)
                .ok_or_else(|| Error::InvalidParam(format!("rating {v} not among categories")))
        };
        let k = categories.len();
        let mut counts = vec![vec![0u64; k]; k];
        for (&x, &y) in a.iter().zip(b) {
            counts[pos(x)?][pos(y)?] += 1;
        }
        let mut cm = ConfusionMatrix::from_counts(counts)?;
        cm.categories = categories.to_vec();
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn transpose(&self) -> Self {
        let k = self.k();
        ConfusionMatrix {
            categories: self.categories.clone(),
            counts: (0..k)
                .map(|i| (0..k).map(|j| self.counts[j][i]).collect())
                .collect(),
        }
    }
}

/// Cohen's kappa with weights `|i−j|`. A table with no disagreement at all,
/// observed or expected, counts as perfect agreement.
pub fn weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k();
    let total: f64 = cm.counts.iter().flatten().sum::<u64>() as f64;
    let rows: Vec<f64> = cm
        .counts
        .iter()
        .map(|r| r.iter().sum::<u64>() as f64 / total)
        .collect();
    let cols: Vec<f64> = (0..k)
        .map(|j| cm.counts.iter().map(|r| r[j]).sum::<u64>() as f64 / total)
        .collect();
    let (mut obs, mut exp) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = (i as f64 - j as f64).abs();
            obs += w * cm.counts[i][j] as f64 / total;
            exp += w * rows[i] * cols[j];
        }
    }
    if exp == 0.0 {
        return if obs == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::Degenerate("zero expected disagreement".into()))
        };
    }
    Ok(1.0 - obs / exp)
}

/// ISUP 1 → 1, 2–3 → 2, 4–5 → 3.
pub fn group_isup(grades: &[u8]) -> Result<Vec<u8>> {
    grades
        .iter()
        .map(|&g| match g {
            1 => Ok(1),
            2 | 3 => Ok(2),
            4 | 5 => Ok(3),
            _ => Err(Error::InvalidParam(format!("ISUP grade {g} outside 1..=5"))),
        })
        .collect()
}

/// Per-rater mean of weighted kappa against every other rater.
/// `ratings[case][rater]`.
pub fn pairwise_mean_kappa(ratings: &[Vec<u8>], categories: &[u8]) -> Result<Vec<f64>> {
    let r = ratings.first().map_or(0, |c| c.len());
    if r < 2 {
        return Err(Error::InvalidParam("need at least two raters".into()));
    }
    if ratings.iter().any(|c| c.len() != r) {
        return Err(Error::DimensionMismatch("ragged ratings matrix".into()));
    }
    let column = |j: usize| ratings.iter().map(|c| c[j]).collect::<Vec<u8>>();
    let cols: Vec<Vec<u8>> = (0..r).map(column).collect();
    let mut pair = vec![vec![0.0; r]; r];
    for a in 0..r {
        for b in a + 1..r {
            let k = weighted_kappa(&ConfusionMatrix::from_pairs(
                &cols[a], &cols[b], categories,
            )?)?;
            pair[a][b] = k;
            pair[b][a] = k;
        }
    }
    Ok((0..r)
        .map(|a| (0..r).filter(|&b| b != a).map(|b| pair[a][b]).sum::<f64>() / (r - 1) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn auc_examples() {
        let l = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.2, 0.1, 0.8], &l).unwrap(), 0.75);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(weighted_kappa(&cm(&[&[3, 0], &[0, 4]])).unwrap(), 1.0);
        assert!(weighted_kappa(&cm(&[&[1, 1], &[1, 1]])).unwrap().abs() < 1e-15);
        assert!((weighted_kappa(&cm(&[&[2, 1], &[1, 2]])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // all mass in one cell: no disagreement possible
        assert_eq!(weighted_kappa(&cm(&[&[5, 0], &[0, 0]])).unwrap(), 1.0);
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1., 2., 3.], &[-1., -2., -3.]).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1., 2., 3.], &[1., 3., 2.]).unwrap() - 0.5).abs() < 1e-15);
        assert!(pearson(&[1., 1.], &[0., 2.]).is_err());
    }

    #[test]
    fn grouping() {
        assert_eq!(group_isup(&[1, 2, 3, 4, 5]).unwrap(), vec![1, 2, 2, 3, 3]);
        assert!(group_isup(&[0]).is_err());
    }

    #[test]
    fn missed_men_counts_only_fully_missed() {
        // man a: ISUP1 core missed but ISUP3 core found; man b: benign only; man c: found
        let scores = [0.2, 0.9, 0.1, 0.15, 0.8, 0.05];
        let grades = [1, 3, 0, 0, 2, 0];
        let men: Vec<String> = ["a", "a", "b", "b", "c", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let row = operating_row_at(0.5, 0.9, &scores, &grades, &men).unwrap();
        assert_eq!(row.missed_by_grade, [1, 0, 0, 0, 0]);
        assert_eq!(row.missed_men, 0);
        assert_eq!((row.n_discarded, row.n_review), (4, 2));
        let full = operating_table(&scores, &grades, &men, &[1.0]).unwrap();
        assert_eq!(full[0].missed_by_grade, [0; 5]);
        let low = operating_row_at(0.0, 1.0, &scores, &grades, &men).unwrap();
        assert_eq!(low.n_discarded, 0);
    }

    #[test]
    fn pairwise_identical_raters() {
        let ratings = vec![vec![1, 1, 1], vec![3, 3, 3], vec![5, 5, 5]];
        assert_eq!(
            pairwise_mean_kappa(&ratings, &[1, 2, 3, 4, 5]).unwrap(),
            vec![1.0; 3]
        );
    }

    proptest! {
        #[test]
        fn auc_flip_and_trapezoid(v in proptest::collection::vec((0u8..20, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = v.iter().map(|p| p.0 as f64 / 7.0).collect();
            let labels: Vec<bool> = v.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = roc_auc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert!((a - roc_auc(&exp, &labels).unwrap()).abs() < 1e-12);
            let curve = roc_curve(&scores, &labels).unwrap();
            prop_assert!((a - trapezoid_area(&curve)).abs() < 1e-12);
        }

        #[test]
        fn kappa_symmetric_and_binary_matches_cohen(c in proptest::collection::vec(0u64..20, 4)) {
            prop_assume!(c.iter().sum::<u64>() > 0);
            let m = cm(&[&c[0..2], &c[2..4]]);
            let (Ok(k), Ok(kt)) = (weighted_kappa(&m), weighted_kappa(&m.transpose())) else {
                return Ok(());
            };
            prop_assert!((k - kt).abs() < 1e-12);
            let n = c.iter().sum::<u64>() as f64;
            let po = (c[0] + c[3]) as f64 / n;
            let pe = ((c[0] + c[1]) * (c[0] + c[2]) + (c[2] + c[3]) * (c[1] + c[3])) as f64 / (n * n);
            if pe < 1.0 {
                prop_assert!((k - (po - pe) / (1.0 - pe)).abs() < 1e-12);
            }
        }
    }
}
