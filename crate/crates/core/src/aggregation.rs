//! Slide-level heads on top of patch probabilities: summary features, boosted
//! tree heads per ensemble member, threshold calibration and the asymmetric
//! Bayes grade rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbt::{train_gbt, FeatureMatrix, GbtModel, GbtParams, Objective};
use crate::patch_model::ProbMatrix;

/// Percentiles reported per class, in feature order.
pub const PERCENTILES: [f64; 9] = [99.75, 99.5, 99.25, 99.0, 98.0, 95.0, 90.0, 80.0, 10.0];
/// Probability cut-offs for the per-class counts, in feature order.
pub const COUNT_CUTOFFS: [f64; 3] = [0.999, 0.99, 0.9];

pub fn slide_feature_len(n_classes: usize) -> usize {
    16 * n_classes + 1
}

/// Percentile with linear interpolation between closest ranks (inclusive
/// definition) of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * q / 100.0;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Fixed-order summary of an `n × c` probability matrix: sum, median, max,
/// [`PERCENTILES`], [`COUNT_CUTOFFS`] counts (each a block of `c` values),
/// then `n`, then per-class argmax counts.
pub fn slide_features(rows: &[Vec<f64>], n_classes: usize) -> Vec<f64> {
    let c = n_classes;
    let n = rows.len();
    let mut out = Vec::with_capacity(slide_feature_len(c));
    let columns: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            col.sort_by(f64::total_cmp);
            col
        })
        .collect();
    let block = |out: &mut Vec<f64>, f: &dyn Fn(&[f64]) -> f64| {
        out.extend(
            columns
                .iter()
                .map(|col| if col.is_empty() { 0.0 } else { f(col) }),
        );
    };
    block(&mut out, &|col| col.iter().sum());
    block(&mut out, &|col| percentile_sorted(col, 50.0));
    block(&mut out, &|col| *col.last().unwrap());
    for q in PERCENTILES {
        block(&mut out, &|col| percentile_sorted(col, q));
    }
    for cut in COUNT_CUTOFFS {
        block(&mut out, &|col| {
            col.iter().filter(|&&p| p > cut).count() as f64
        });
    }
    out.push(n as f64);
    let mut argmax = vec![0.0; c];
    for r in rows {
        let mut best = 0;
        for k in 1..c {
            if r[k] > r[best] {
                best = k;
            }
        }
        argmax[best] += 1.0;
    }
    out.extend(argmax);
    out
}

pub fn prob_matrix_features(pm: &ProbMatrix) -> Vec<f64> {
    slide_features(&pm.probs, pm.stage.n_classes())
}

/// Asymmetric ordinal loss over ISUP grades: `over·|y−a|` when the call is
/// too high, `under·|y−a|` when too low.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMatrix {
    pub over: f64,
    pub under: f64,
}

impl Default for LossMatrix {
    fn default() -> Self {
        LossMatrix {
            over: 0.1,
            under: 0.2,
        }
    }
}

impl LossMatrix {
    /// Loss of calling grade `a` when the truth is `y` (both 1..=5).
    pub fn cost(&self, y: u8, a: u8) -> f64 {
        let d = (y as f64 - a as f64).abs();
        if a > y {
            self.over * d
        } else {
            self.under * d
        }
    }

    /// Conditional risk of each call 1..=5 under `probs` over grades 1..=5.
    pub fn risks(&self, probs: &[f64; 5]) -> [f64; 5] {
        let mut r = [0.0; 5];
        for (a, ra) in r.iter_mut().enumerate() {
            *ra = (0..5)
                .map(|y| probs[y] * self.cost(y as u8 + 1, a as u8 + 1))
                .sum();
        }
        r
    }
}

/// Risk-minimizing ISUP grade; ties go to the higher grade.
pub fn bayes_grade(probs: &[f64; 5], loss: &LossMatrix) -> u8 {
    let r = loss.risks(probs);
    let mut best = 0;
    for a in 1..5 {
        if r[a] <= r[best] {
            best = a;
        }
    }
    best as u8 + 1
}

/// Largest threshold `t` for which predicting positive on `score >= t`
/// reaches at least `target` sensitivity on this set.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool], target: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(
            "scores and labels differ in length".into(),
        ));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "target sensitivity {target} outside (0, 1]"
        )));
    }
    let mut pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() {
        return Err(Error::NoPositives);
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let k = ((target * pos.len() as f64 - 1e-9).ceil() as usize).clamp(1, pos.len());
    Ok(pos[k - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTask {
    Detection,
    Length,
    Grading,
}

impl HeadTask {
    pub fn default_params(self) -> GbtParams {
        match self {
            HeadTask::Detection => GbtParams::new(Objective::BinaryLogistic, 5, 100),
            HeadTask::Length => GbtParams::new(Objective::SquaredError, 2, 200),
            HeadTask::Grading => GbtParams::new(Objective::Softmax { num_class: 5 }, 3, 300),
        }
    }
}

/// Per-sample weights inversely proportional to class frequency, scaled so
/// they average 1 over the samples.
pub fn inverse_frequency_weights(labels: &[u8]) -> Vec<f64> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let (n, k) = (labels.len() as f64, counts.len() as f64);
    labels.iter().map(|l| n / (k * counts[l] as f64)).collect()
}

/// Slide-level features for every ensemble member of one stage.
pub type MemberFeatures = Vec<Vec<f64>>;

fn check_members(slides: &[MemberFeatures]) -> Result<usize> {
    let m = slides.first().map_or(0, |s| s.len());
    if m == 0 {
        return Err(Error::Degenerate("no ensemble members".into()));
    }
    if slides.iter().any(|s| s.len() != m) {
        return Err(Error::IdMismatch(
            "member count differs across slides".into(),
        ));
    }
    Ok(m)
}

/// One model per member: member `i` learns from feature vectors derived
/// from patch-model member `i`.
pub fn train_task_heads(
    slides: &[MemberFeatures],
    targets: &[f64],
    weights: &[f64],
    params: &GbtParams,
    seed: u64,
) -> Result<Vec<GbtModel>> {
    let m = check_members(slides)?;
    (0..m)
        .map(|i| {
            let rows: Vec<Vec<f64>> = slides.iter().map(|s| s[i].clone()).collect();
            let x = FeatureMatrix::from_rows(&rows)?;
            train_gbt(&x, targets, weights, params, seed.wrapping_add(i as u64))
        })
        .collect()
}

/// Mean over members of each model's output on its own member's features.
pub fn mean_member_output(models: &[GbtModel], features: &MemberFeatures) -> Result<Vec<f64>> {
    if models.len() != features.len() || models.is_empty() {
        return Err(Error::IdMismatch(format!(
            "{} head models for {} member feature vectors",
            models.len(),
            features.len()
        )));
    }
    let mut acc: Vec<f64> = Vec::new();
    for (m, f) in models.iter().zip(features) {
        let out = m.predict_row(f)?;
        if acc.is_empty() {
            acc = vec![0.0; out.len()];
        }
        acc.iter_mut().zip(&out).for_each(|(a, o)| *a += o);
    }
    let k = models.len() as f64;
    Ok(acc.into_iter().map(|v| v / k).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideHeads {
    pub detection: Vec<GbtModel>,
    pub length: Vec<GbtModel>,
    pub grading: Vec<GbtModel>,
    pub loss: LossMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub p_malignant: f64,
    pub length_mm: f64,
    /// 0 benign, 1..=5 ISUP.
    pub grade: u8,
    pub grade_probs: [f64; 5],
}

pub fn predict_slide(
    heads: &SlideHeads,
    detection: &MemberFeatures,
    grading: &MemberFeatures,
    threshold: f64,
) -> Result<SlidePrediction> {
    let p = mean_member_output(&heads.detection, detection)?[0];
    let length_mm = mean_member_output(&heads.length, detection)?[0].max(0.0);
    let gp = mean_member_output(&heads.grading, grading)?;
    if gp.len() != 5 {
        return Err(Error::DimensionMismatch(format!(
            "grading heads emit {} classes, expected 5",
            gp.len()
        )));
    }
    let grade_probs = [gp[0], gp[1], gp[2], gp[3], gp[4]];
    let grade = if p < threshold {
        0
    } else {
        bayes_grade(&grade_probs, &heads.loss)
    };
    Ok(SlidePrediction {
        p_malignant: p,
        length_mm,
        grade,
        grade_probs,
    })
}

/// Man-level roll-up: highest core probability, summed cancer length.
pub fn aggregate_patient(cores: &[(f64, f64)]) -> Result<(f64, f64)> {
    if cores.is_empty() {
        return Err(Error::Degenerate("patient has no cores".into()));
    }
    let p = cores.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    Ok((p, cores.iter().map(|c| c.1).sum()))
}

/// Head bundle descriptor written next to the member model files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub task: HeadTask,
    pub members: Vec<String>,
    pub threshold: Option<f64>,
    pub calibration_set_digest: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_row_features() {
        let f = slide_features(&[vec![0.3, 0.7]], 2);
        assert_eq!(f.len(), 33);
        for block in 0..12 {
            assert_eq!(&f[block * 2..block * 2 + 2], &[0.3, 0.7]);
        }
        assert_eq!(&f[24..30], &[0.0; 6]);
        assert_eq!(f[30], 1.0);
        assert_eq!(&f[31..33], &[0.0, 1.0]);
    }

    #[test]
    fn empty_and_four_class_lengths() {
        assert_eq!(slide_features(&[], 2), vec![0.0; 33]);
        assert_eq!(slide_features(&[vec![0.25; 4]], 4).len(), 65);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 50.0), 2.5);
        assert_eq!(percentile_sorted(&v, 100.0), 4.0);
        assert!((percentile_sorted(&v, 10.0) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn bayes_examples() {
        let l = LossMatrix::default();
        let r = l.risks(&[0.2; 5]);
        for (a, b) in r.iter().zip([0.4, 0.26, 0.18, 0.16, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(bayes_grade(&[0.2; 5], &l), 4);
        assert_eq!(bayes_grade(&[0.0, 1.0, 0.0, 0.0, 0.0], &l), 2);
        assert_eq!(bayes_grade(&[0.6, 0.4, 0.0, 0.0, 0.0], &l), 2);
    }

    #[test]
    fn bayes_grade_is_first_grade_past_two_thirds_cdf() {
        // With under = 2·over the risk minimizer is the smallest a with
        // F(a) > 2/3, which can sit two grades below the mode.
        let p = [0.24, 0.24, 0.24, 0.0, 0.28];
        assert_eq!(bayes_grade(&p, &LossMatrix::default()), 3);
    }

    #[test]
    fn threshold_examples() {
        let t = calibrate_threshold(&[0.9, 0.8, 0.3], &[true, true, false], 0.99).unwrap();
        assert!(t > 0.3 && t <= 0.8);
        assert_eq!(
            calibrate_threshold(&[0.9, 0.4, 0.3], &[true, true, false], 1.0).unwrap(),
            0.4
        );
        assert_eq!(
            calibrate_threshold(&[0.9, 0.4], &[true, true], 0.5).unwrap(),
            0.9
        );
        assert!(matches!(
            calibrate_threshold(&[0.9], &[false], 0.9),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let mut labels = vec![1u8; 50];
        labels.extend([2u8; 25]);
        labels.extend([3u8; 25]);
        labels.extend([4u8; 10]);
        labels.extend([5u8; 10]);
        let w = inverse_frequency_weights(&labels);
        assert!((w.iter().sum::<f64>() / w.len() as f64 - 1.0).abs() < 1e-12);
        assert!((w[0] / w[119] - 10.0 / 50.0).abs() < 1e-12);
        assert!((w[50] / w[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn head_defaults() {
        let d = HeadTask::Detection.default_params();
        assert_eq!((d.max_depth, d.n_rounds), (5, 100));
        let l = HeadTask::Length.default_params();
        assert_eq!((l.max_depth, l.n_rounds), (2, 200));
        let g = HeadTask::Grading.default_params();
        assert_eq!((g.max_depth, g.n_rounds), (3, 300));
    }

    #[test]
    fn patient_rollup() {
        assert_eq!(
            aggregate_patient(&[(0.1, 0.0), (0.99, 4.0), (0.98, 2.0)]).unwrap(),
            (0.99, 6.0)
        );
        assert_eq!(aggregate_patient(&[(0.05, 0.0)]).unwrap(), (0.05, 0.0));
        assert!(aggregate_patient(&[]).is_err());
    }

    proptest! {
        #[test]
        fn features_ignore_patch_order(mut rows in proptest::collection::vec(0.0f64..1.0, 1..40), rot in 0usize..40) {
            let m: Vec<Vec<f64>> = rows.iter().map(|&p| vec![p, 1.0 - p]).collect();
            let a = slide_features(&m, 2);
            let r = rot % rows.len();
            rows.rotate_left(r);
            rows.reverse();
            let m2: Vec<Vec<f64>> = rows.iter().map(|&p| vec![p, 1.0 - p]).collect();
            prop_assert_eq!(a, slide_features(&m2, 2));
        }

        #[test]
        fn one_hot_identity(g in 0usize..5) {
            let mut p = [0.0; 5];
            p[g] = 1.0;
            prop_assert_eq!(bayes_grade(&p, &LossMatrix::default()), g as u8 + 1);
        }
    }
}
