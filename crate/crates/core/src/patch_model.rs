//! Patch classification stages, the boosted-tree reference classifier and
//! per-slide probability matrices.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{dihedral_action, extract_patch_features, N_FEATURES};
use crate::gbt::{train_gbt, FeatureMatrix, GbtModel, GbtParams, Objective};
use crate::patching::{balanced_epochs, Dihedral};
use crate::raster::{label, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// benign / malignant
    Detection,
    /// benign / G3 / G4 / G5
    Grading,
}

impl Stage {
    pub fn n_classes(self) -> usize {
        match self {
            Stage::Detection => 2,
            Stage::Grading => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Detection => "detection",
            Stage::Grading => "grading",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(Stage::Detection),
            "grading" => Ok(Stage::Grading),
            _ => Err(Error::InvalidParam(format!("unknown stage {s:?}"))),
        }
    }
}

/// Validated probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs(Vec<f64>);

impl ClassProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let s: f64 = probs.iter().sum();
        if probs.is_empty()
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || (s - 1.0).abs() > 1e-9
        {
            return Err(Error::Degenerate(format!(
                "not a probability vector: {probs:?}"
            )));
        }
        Ok(ClassProbs(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Per-patch class probabilities of one slide from one ensemble member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMatrix {
    pub slide_id: String,
    pub stage: Stage,
    /// Patch origins in base coordinates, one per row.
    pub coords: Vec<(u32, u32)>,
    pub probs: Vec<Vec<f64>>,
}

impl ProbMatrix {
    pub fn empty(slide_id: &str, stage: Stage) -> Self {
        ProbMatrix {
            slide_id: slide_id.to_string(),
            stage,
            coords: Vec::new(),
            probs: Vec::new(),
        }
    }

    pub fn n_patches(&self) -> usize {
        self.probs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.probs.len() {
            return Err(Error::DimensionMismatch(
                "coords and probability rows differ".into(),
            ));
        }
        let c = self.stage.n_classes();
        for row in &self.probs {
            if row.len() != c {
                return Err(Error::DimensionMismatch(format!(
                    "row with {} classes, stage has {c}",
                    row.len()
                )));
            }
            ClassProbs::new(row.clone())?;
        }
        Ok(())
    }
}

/// Training class of a patch for a stage, or `None` when the patch is not
/// used. `slide_grades` are the Gleason patterns present on the slide.
pub fn training_class(stage: Stage, patch_label: u8, slide_grades: &[u8]) -> Option<usize> {
    match (stage, patch_label) {
        (_, label::UNKNOWN) => None,
        (_, label::BENIGN) => Some(0),
        (Stage::Detection, _) => Some(1),
        (Stage::Grading, label::GLEASON3..=label::GLEASON5) => Some((patch_label - 2) as usize),
        (Stage::Grading, label::MIXED) => slide_grades.iter().max().map(|&g| (g - 2) as usize),
        (Stage::Grading, label::CANCER) => {
            let first = *slide_grades.first()?;
            if slide_grades.iter().all(|&g| g == first) && (3..=5).contains(&first) {
                Some((first - 2) as usize)
            } else {
                None
            }
        }
        _ => None,
    }
}

/// One labelled training patch, already reduced to its descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPatch {
    pub features: Vec<f64>,
    pub label: u8,
    pub slide_grades: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchTrainConfig {
    pub n_members: usize,
    pub epochs: usize,
    pub max_depth: usize,
    pub n_rounds: usize,
    pub eta: f64,
}

impl Default for PatchTrainConfig {
    fn default() -> Self {
        PatchTrainConfig {
            n_members: 5,
            epochs: 3,
            max_depth: 4,
            n_rounds: 30,
            eta: 0.3,
        }
    }
}

/// Ensemble member: a softmax boosted-tree model over patch descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchClassifier {
    pub stage: Stage,
    pub member: usize,
    pub seed: u64,
    pub model: GbtModel,
}

impl PatchClassifier {
    pub fn classify_features(&self, features: &[f64]) -> Result<ClassProbs> {
        let p = self.model.predict_row(features)?;
        if p.len() != self.stage.n_classes() {
            return Err(Error::DimensionMismatch(format!(
                "model emits {} classes, stage {} needs {}",
                p.len(),
                self.stage.name(),
                self.stage.n_classes()
            )));
        }
        ClassProbs::new(p)
    }

    pub fn classify(&self, patch: &RgbImage) -> Result<ClassProbs> {
        self.classify_features(&extract_patch_features(patch))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn train_member(
    stage: Stage,
    rows: &[&TrainingPatch],
    classes: &[usize],
    cfg: &PatchTrainConfig,
    seed: u64,
    member: usize,
) -> Result<PatchClassifier> {
    let k = stage.n_classes();
    let epochs = balanced_epochs(classes, k, cfg.epochs, seed)?;
    let mut aug = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut data = Vec::new();
    let mut y = Vec::new();
    for epoch in &epochs {
        for &i in epoch {
            let d = Dihedral::random(&mut aug);
            data.extend(dihedral_action(&rows[i].features, d));
            y.push(classes[i] as f64);
        }
    }
    let n = y.len();
    let x = FeatureMatrix::new(n, N_FEATURES, data)?;
    let mut params = GbtParams::new(
        Objective::Softmax { num_class: k },
        cfg.max_depth,
        cfg.n_rounds,
    );
    params.eta = cfg.eta;
    let model = train_gbt(&x, &y, &vec![1.0; n], &params, seed)?;
    Ok(PatchClassifier {
        stage,
        member,
        seed,
        model,
    })
}

/// Trains `cfg.n_members` classifiers; member `i` draws its balanced epochs
/// and augmentations from seed `seed + i`.
pub fn train_patch_ensemble(
    patches: &[TrainingPatch],
    stage: Stage,
    cfg: &PatchTrainConfig,
    seed: u64,
) -> Result<Vec<PatchClassifier>> {
    if cfg.n_members == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidParam(
            "need at least one member and one epoch".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for p in patches {
        if p.features.len() != N_FEATURES {
            return Err(Error::DimensionMismatch(format!(
                "patch descriptor of length {}",
                p.features.len()
            )));
        }
        if let Some(c) = training_class(stage, p.label, &p.slide_grades) {
            rows.push(p);
            classes.push(c);
        }
    }
    for c in 0..stage.n_classes() {
        if !classes.contains(&c) {
            return Err(Error::EmptyClass(format!(
                "{} stage has no patches of class {c}",
                stage.name()
            )));
        }
    }
    (0..cfg.n_members)
        .into_par_iter()
        .map(|i| train_member(stage, &rows, &classes, cfg, seed.wrapping_add(i as u64), i))
        .collect()
}

/// Probability rows for one slide, in the given patch order.
pub fn predict_prob_matrix(
    member: &PatchClassifier,
    slide_id: &str,
    coords: &[(u32, u32)],
    features: &[Vec<f64>],
) -> Result<ProbMatrix> {
    if coords.len() != features.len() {
        return Err(Error::DimensionMismatch(
            "coords and descriptors differ in length".into(),
        ));
    }
    let probs = features
        .iter()
        .map(|f| member.classify_features(f).map(ClassProbs::into_vec))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbMatrix {
        slide_id: slide_id.to_string(),
        stage: member.stage,
        coords: coords.to_vec(),
        probs,
    })
}

#[derive(Serialize, Deserialize)]
struct ProbLine {
    slide_id: String,
    x: u32,
    y: u32,
    probs: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    member: Option<usize>,
}

/// Writes one JSON line per patch.
pub fn write_prob_jsonl<W: Write>(
    out: &mut W,
    pm: &ProbMatrix,
    member: Option<usize>,
) -> Result<()> {
    for (&(x, y), p) in pm.coords.iter().zip(&pm.probs) {
        let line = ProbLine {
            slide_id: pm.slide_id.clone(),
            x,
            y,
            probs: p.clone(),
            member,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

/// Reads probability lines back, grouped by member (absent = 0) then by
/// slide, keeping line order within each group.
pub fn read_prob_jsonl<R: BufRead>(
    input: R,
    stage: Stage,
) -> Result<BTreeMap<usize, BTreeMap<String, ProbMatrix>>> {
    let mut out: BTreeMap<usize, BTreeMap<String, ProbMatrix>> = BTreeMap::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProbLine = serde_json::from_str(&line)?;
        let pm = out
            .entry(rec.member.unwrap_or(0))
            .or_default()
            .entry(rec.slide_id.clone())
            .or_insert_with(|| ProbMatrix::empty(&rec.slide_id, stage));
        pm.coords.push((rec.x, rec.y));
        pm.probs.push(rec.probs);
    }
    for slides in out.values() {
        for pm in slides.values() {
            pm.validate()?;
        }
    }
    Ok(out)
}

/// Draws one dihedral view index per sample; exposed for tests of the
/// augmentation stream.
pub fn augmentation_draws(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Dihedral::random(&mut rng).index()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_mapping() {
        assert_eq!(training_class(Stage::Detection, 1, &[]), Some(0));
        assert_eq!(training_class(Stage::Detection, 255, &[3, 4]), Some(1));
        assert_eq!(training_class(Stage::Detection, 0, &[]), None);
        assert_eq!(training_class(Stage::Grading, 4, &[3, 4]), Some(2));
        assert_eq!(training_class(Stage::Grading, 255, &[3, 5]), Some(3));
        assert_eq!(training_class(Stage::Grading, 2, &[4, 4]), Some(2));
        assert_eq!(training_class(Stage::Grading, 2, &[3, 4]), None);
    }

    fn toy_patches() -> Vec<TrainingPatch> {
        (0..60)
            .map(|i| {
                let malignant = i % 3 == 0;
                let mut f = vec![0.0; N_FEATURES];
                f[0] = if malignant {
                    100.0 + i as f64
                } else {
                    200.0 - i as f64 * 0.1
                };
                f[7] = (i % 7) as f64;
                TrainingPatch {
                    features: f,
                    label: if malignant { 2 } else { 1 },
                    slide_grades: vec![3],
                }
            })
            .collect()
    }

    #[test]
    fn ensemble_separates_and_is_deterministic() {
        let p = toy_patches();
        let cfg = PatchTrainConfig {
            n_members: 3,
            ..Default::default()
        };
        let a = train_patch_ensemble(&p, Stage::Detection, &cfg, 11).unwrap();
        let b = train_patch_ensemble(&p, Stage::Detection, &cfg, 11).unwrap();
        assert_eq!(a.len(), 3);
        for (m, n) in a.iter().zip(&b) {
            assert_eq!(m.to_json().unwrap(), n.to_json().unwrap());
            let correct = p
                .iter()
                .filter(|t| {
                    let pr = m.classify_features(&t.features).unwrap();
                    (pr.as_slice()[1] > 0.5) == (t.label == 2)
                })
                .count();
            assert!(correct as f64 / p.len() as f64 >= 0.95);
        }
        assert!(train_patch_ensemble(&p, Stage::Grading, &cfg, 11).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let pm = ProbMatrix {
            slide_id: "s1".into(),
            stage: Stage::Detection,
            coords: vec![(0, 0), (299, 0)],
            probs: vec![vec![0.25, 0.75], vec![1.0, 0.0]],
        };
        let mut buf = Vec::new();
        write_prob_jsonl(&mut buf, &pm, Some(2)).unwrap();
        write_prob_jsonl(&mut buf, &ProbMatrix::empty("s2", Stage::Detection), None).unwrap();
        let back = read_prob_jsonl(buf.as_slice(), Stage::Detection).unwrap();
        assert_eq!(back[&2]["s1"], pm);
    }

    #[test]
    fn empty_slide_matrix() {
        let p = toy_patches();
        let cfg = PatchTrainConfig {
            n_members: 1,
            ..Default::default()
        };
        let m = train_patch_ensemble(&p, Stage::Detection, &cfg, 1)
            .unwrap()
            .remove(0);
        let pm = predict_prob_matrix(&m, "x", &[], &[]).unwrap();
        assert_eq!(pm.n_patches(), 0);
    }
}
