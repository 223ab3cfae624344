//! Stage orchestration: annotation and patch extraction per slide, patch
//! ensembles, slide heads with out-of-fold threshold calibration, and the
//! evaluation report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{
    calibrate_threshold, inverse_frequency_weights, mean_member_output, prob_matrix_features,
    train_task_heads, HeadTask, LossMatrix, MemberFeatures, SlideHeads,
};
use crate::annotation::{build_label_mask, refine_label_mask, DigitizerParams};
use crate::error::{Error, Result};
use crate::features::extract_patch_features;
use crate::gbt::{GbtModel, GbtParams};
use crate::metrics::{
    operating_row_at, operating_table, pairwise_mean_kappa, pearson, roc_auc, weighted_kappa,
    ConfusionMatrix, OperatingRow,
};
use crate::patch_model::{
    predict_prob_matrix, train_patch_ensemble, PatchClassifier, PatchTrainConfig, ProbMatrix,
    Stage, TrainingPatch,
};
use crate::patching::{extract_patch, label_patch, plan_patch_grid, PatchGridConfig};
use crate::raster::{BinaryMask, LabelMask};
use crate::segmentation::{segment_penmarks, segment_tissue, SegmentationParams};
use crate::slide_io::ImagePyramid;
use crate::synth::{generate_slide, split_by_man, Manifest, ManifestEntry};

/// Hex SHA-256 of a byte string.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub detection: GbtParams,
    pub length: GbtParams,
    pub grading: GbtParams,
}

impl Default for HeadParams {
    fn default() -> Self {
        HeadParams {
            detection: HeadTask::Detection.default_params(),
            length: HeadTask::Length.default_params(),
            grading: HeadTask::Grading.default_params(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub segmentation: SegmentationParams,
    pub digitizer: DigitizerParams,
    pub patch_grid: PatchGridConfig,
    pub patch_train: PatchTrainConfig,
    pub heads: HeadParams,
    pub loss: LossMatrix,
    pub threshold_sensitivity: f64,
    /// Folds (grouped by man) for the out-of-fold detection scores used to
    /// calibrate the threshold.
    pub calibration_folds: usize,
    pub operating_targets: Vec<f64>,
    /// Share of men held out by the synthetic pipeline run.
    pub test_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: PathsConfig::default(),
            segmentation: SegmentationParams::default(),
            digitizer: DigitizerParams::default(),
            patch_grid: PatchGridConfig::default(),
            patch_train: PatchTrainConfig::default(),
            heads: HeadParams::default(),
            loss: LossMatrix::default(),
            threshold_sensitivity: 0.99,
            calibration_folds: 5,
            operating_targets: vec![0.95, 0.98, 0.99, 1.0],
            test_fraction: 0.2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.digitizer.validate()?;
        self.patch_grid.validate()?;
        for p in [
            &self.heads.detection,
            &self.heads.length,
            &self.heads.grading,
        ] {
            p.validate()?;
        }
        if !(self.threshold_sensitivity > 0.0 && self.threshold_sensitivity <= 1.0) {
            return Err(Error::InvalidParam(
                "threshold_sensitivity must lie in (0, 1]".into(),
            ));
        }
        if self.calibration_folds < 2 {
            return Err(Error::InvalidParam(
                "calibration_folds must be at least 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidParam(
                "test_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Reference labels of one core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub slide_id: String,
    pub man_id: String,
    /// 0 benign, 1..=5 ISUP.
    pub isup: u8,
    pub length_mm: f64,
    /// Gleason patterns reported for the core.
    #[serde(default)]
    pub patterns: Option<(u8, u8)>,
}

impl TruthRecord {
    pub fn slide_grades(&self) -> Vec<u8> {
        match self.patterns {
            Some((p, s)) if p == s => vec![p],
            Some((p, s)) => vec![p, s],
            None => Vec::new(),
        }
    }
}

pub fn truth_records(manifest: &Manifest) -> Vec<TruthRecord> {
    manifest
        .slides
        .iter()
        .map(|s| TruthRecord {
            slide_id: s.slide_id.clone(),
            man_id: s.man_id.clone(),
            isup: s.isup,
            length_mm: s.cancer_length_mm,
            patterns: s.patterns,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SlideMasks {
    pub tissue: BinaryMask,
    pub pen: BinaryMask,
    /// Refined label mask.
    pub labels: LabelMask,
    pub warnings: Vec<String>,
}

/// Tissue and pen segmentation followed by digitization and refinement.
pub fn annotate_slide(
    pyr: &ImagePyramid,
    grade_coded: bool,
    cfg: &PipelineConfig,
) -> Result<SlideMasks> {
    let tissue = segment_tissue(pyr, &cfg.segmentation)?;
    let pen = segment_penmarks(pyr, &tissue, &cfg.segmentation)?;
    let image = pyr.read_region(cfg.segmentation.work_downsample, pyr.full_rect())?;
    let px = pyr.pixel_size_um();
    let raw = build_label_mask(&tissue, &pen, &image, grade_coded, &cfg.digitizer, px)?;
    let labels = refine_label_mask(&raw.labels, &tissue, &cfg.digitizer, px)?;
    Ok(SlideMasks {
        tissue,
        pen,
        labels,
        warnings: raw.warnings,
    })
}

/// Patch descriptors of one slide in grid order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidePatches {
    pub slide_id: String,
    pub window_size: u32,
    pub coords: Vec<(u32, u32)>,
    pub labels: Vec<u8>,
    pub features: Vec<Vec<f64>>,
}

pub fn extract_slide_patches(
    slide_id: &str,
    pyr: &ImagePyramid,
    masks: &SlideMasks,
    grid: &PatchGridConfig,
) -> Result<SlidePatches> {
    let windows = plan_patch_grid(
        &masks.tissue,
        grid,
        pyr.pixel_size_um(),
        pyr.base_width(),
        pyr.base_height(),
    )?;
    let rows = windows
        .par_iter()
        .map(|w| {
            let label = label_patch(w, &masks.labels, &masks.tissue)?;
            let img = extract_patch(pyr, w, &masks.tissue, Some(&masks.pen), grid)?;
            Ok(((w.x, w.y), label, extract_patch_features(&img)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = SlidePatches {
        slide_id: slide_id.to_string(),
        window_size: grid.window_base_px(pyr.pixel_size_um()),
        coords: Vec::with_capacity(rows.len()),
        labels: Vec::with_capacity(rows.len()),
        features: Vec::with_capacity(rows.len()),
    };
    for (c, l, f) in rows {
        out.coords.push(c);
        out.labels.push(l);
        out.features.push(f);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchModels {
    pub detection: Vec<PatchClassifier>,
    pub grading: Vec<PatchClassifier>,
}

pub fn train_patch_models(
    slides: &[SlidePatches],
    truths: &BTreeMap<String, TruthRecord>,
    cfg: &PipelineConfig,
) -> Result<PatchModels> {
    let mut patches = Vec::new();
    for s in slides {
        let truth = truths
            .get(&s.slide_id)
            .ok_or_else(|| Error::IdMismatch(format!("no truth for {}", s.slide_id)))?;
        let grades = truth.slide_grades();
        for (f, &l) in s.features.iter().zip(&s.labels) {
            patches.push(TrainingPatch {
                features: f.clone(),
                label: l,
                slide_grades: grades.clone(),
            });
        }
    }
    Ok(PatchModels {
        detection: train_patch_ensemble(&patches, Stage::Detection, &cfg.patch_train, cfg.seed)?,
        grading: train_patch_ensemble(
            &patches,
            Stage::Grading,
            &cfg.patch_train,
            cfg.seed.wrapping_add(1000),
        )?,
    })
}

/// Per-member probability matrices of one slide for both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideProbs {
    pub slide_id: String,
    pub detection: Vec<ProbMatrix>,
    pub grading: Vec<ProbMatrix>,
}

impl SlideProbs {
    pub fn detection_features(&self) -> MemberFeatures {
        self.detection.iter().map(prob_matrix_features).collect()
    }

    pub fn grading_features(&self) -> MemberFeatures {
        self.grading.iter().map(prob_matrix_features).collect()
    }
}

pub fn predict_patches(models: &PatchModels, slide: &SlidePatches) -> Result<SlideProbs> {
    let run = |members: &[PatchClassifier]| -> Result<Vec<ProbMatrix>> {
        members
            .iter()
            .map(|m| predict_prob_matrix(m, &slide.slide_id, &slide.coords, &slide.features))
            .collect()
    };
    Ok(SlideProbs {
        slide_id: slide.slide_id.clone(),
        detection: run(&models.detection)?,
        grading: run(&models.grading)?,
    })
}

/// Out-of-fold detection scores used for threshold selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub slide_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl Calibration {
    pub fn threshold(&self, target_sensitivity: f64) -> Result<f64> {
        calibrate_threshold(&self.scores, &self.labels, target_sensitivity)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(digest(serde_json::to_string(self)?.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadBundle {
    pub heads: SlideHeads,
    pub threshold: f64,
    pub threshold_sensitivity: f64,
    pub calibration: Calibration,
}

fn pair_truths<'a>(
    probs: &'a [SlideProbs],
    truths: &'a BTreeMap<String, TruthRecord>,
) -> Result<Vec<(&'a SlideProbs, &'a TruthRecord)>> {
    probs
        .iter()
        .map(|p| {
            truths
                .get(&p.slide_id)
                .map(|t| (p, t))
                .ok_or_else(|| Error::IdMismatch(format!("no truth for {}", p.slide_id)))
        })
        .collect()
}

fn detection_heads(
    det: &[MemberFeatures],
    labels: &[bool],
    params: &GbtParams,
    seed: u64,
) -> Result<Vec<GbtModel>> {
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    train_task_heads(det, &y, &vec![1.0; y.len()], params, seed)
}

/// Fold index per slide; all cores of a man share a fold.
pub fn man_folds(man_ids: &[&str], k: usize, seed: u64) -> Vec<usize> {
    let mut men: Vec<&str> = man_ids
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    men.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold: BTreeMap<&str, usize> = men.iter().enumerate().map(|(i, m)| (*m, i % k)).collect();
    man_ids.iter().map(|m| fold[m]).collect()
}

/// Trains the three heads on all slides and calibrates the detection
/// threshold on out-of-fold scores of the same slides.
pub fn train_slide_heads(
    probs: &[SlideProbs],
    truths: &BTreeMap<String, TruthRecord>,
    cfg: &PipelineConfig,
) -> Result<HeadBundle> {
    let pairs = pair_truths(probs, truths)?;
    let det: Vec<MemberFeatures> = pairs.iter().map(|(p, _)| p.detection_features()).collect();
    let labels: Vec<bool> = pairs.iter().map(|(_, t)| t.isup > 0).collect();
    if !labels.iter().any(|&l| l) {
        return Err(Error::NoPositives);
    }
    let seed = cfg.seed.wrapping_add(2000);
    let detection = detection_heads(&det, &labels, &cfg.heads.detection, seed)?;

    let lengths: Vec<f64> = pairs.iter().map(|(_, t)| t.length_mm).collect();
    let length = train_task_heads(
        &det,
        &lengths,
        &vec![1.0; lengths.len()],
        &cfg.heads.length,
        seed + 100,
    )?;

    let malignant: Vec<usize> = (0..pairs.len()).filter(|&i| labels[i]).collect();
    let gra: Vec<MemberFeatures> = malignant
        .iter()
        .map(|&i| pairs[i].0.grading_features())
        .collect();
    let grades: Vec<u8> = malignant.iter().map(|&i| pairs[i].1.isup).collect();
    let weights = inverse_frequency_weights(&grades);
    let targets: Vec<f64> = grades.iter().map(|&g| (g - 1) as f64).collect();
    let grading = train_task_heads(&gra, &targets, &weights, &cfg.heads.grading, seed + 200)?;

    let men: Vec<&str> = pairs.iter().map(|(_, t)| t.man_id.as_str()).collect();
    let folds = man_folds(&men, cfg.calibration_folds, seed + 300);
    let mut scores = vec![0.0; pairs.len()];
    let fold_scores = (0..cfg.calibration_folds)
        .into_par_iter()
        .map(|f| -> Result<Vec<(usize, f64)>> {
            let (train, held): (Vec<usize>, Vec<usize>) =
                (0..pairs.len()).partition(|&i| folds[i] != f);
            if held.is_empty() {
                return Ok(Vec::new());
            }
            let x: Vec<MemberFeatures> = train.iter().map(|&i| det[i].clone()).collect();
            let y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let models = detection_heads(&x, &y, &cfg.heads.detection, seed)?;
            held.iter()
                .map(|&i| Ok((i, mean_member_output(&models, &det[i])?[0])))
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, s) in fold_scores.into_iter().flatten() {
        scores[i] = s;
    }
    let calibration = Calibration {
        slide_ids: pairs.iter().map(|(p, _)| p.slide_id.clone()).collect(),
        scores,
        labels,
    };
    let threshold = calibration.threshold(cfg.threshold_sensitivity)?;
    Ok(HeadBundle {
        heads: SlideHeads {
            detection,
            length,
            grading,
            loss: cfg.loss,
        },
        threshold,
        threshold_sensitivity: cfg.threshold_sensitivity,
        calibration,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub slide_id: String,
    pub p_malignant: f64,
    pub length_mm: f64,
    pub grade: u8,
    pub grade_probs: [f64; 5],
}

pub fn predict_slides(
    heads: &SlideHeads,
    probs: &[SlideProbs],
    threshold: f64,
) -> Result<Vec<PredictionRecord>> {
    probs
        .par_iter()
        .map(|p| {
            let pred = crate::aggregation::predict_slide(
                heads,
                &p.detection_features(),
                &p.grading_features(),
                threshold,
            )?;
            Ok(PredictionRecord {
                slide_id: p.slide_id.clone(),
                p_malignant: pred.p_malignant,
                length_mm: pred.length_mm,
                grade: pred.grade,
                grade_probs: pred.grade_probs,
            })
        })
        .collect()
}

/// Grades per case and rater, optionally compared with the model's calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    pub case_ids: Vec<String>,
    pub raters: Vec<String>,
    /// `grades[case][rater]`, ISUP 1..=5.
    pub grades: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterKappas {
    pub raters: Vec<String>,
    pub without_model: Vec<f64>,
    /// Last entry belongs to the model.
    pub with_model: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub core_all: Option<f64>,
    pub core_positive: Option<f64>,
    pub man_all: Option<f64>,
    pub man_positive: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappas {
    /// All cores, benign included as category 0.
    pub all: Option<f64>,
    /// Cores malignant by reference, benign calls kept as category 0.
    pub positive: Option<f64>,
    pub grouped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_cores: usize,
    pub n_men: usize,
    pub auc: f64,
    pub man_auc: Option<f64>,
    pub threshold: Option<f64>,
    pub at_threshold: Option<OperatingRow>,
    pub operating_table: Vec<OperatingRow>,
    pub correlations: Correlations,
    pub kappa: Kappas,
    pub rater_kappas: Option<RaterKappas>,
}

fn grouped(g: u8) -> u8 {
    match g {
        0 => 0,
        1 => 1,
        2 | 3 => 2,
        _ => 3,
    }
}

fn kappa_over(pairs: &[(u8, u8)], categories: &[u8]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let (a, b): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
    ConfusionMatrix::from_pairs(&a, &b, categories)
        .and_then(|cm| weighted_kappa(&cm))
        .ok()
}

/// Joins predictions and references by slide id; the id sets must match.
pub fn join_records<'a>(
    preds: &'a [PredictionRecord],
    truths: &'a [TruthRecord],
) -> Result<Vec<(&'a PredictionRecord, &'a TruthRecord)>> {
    let t: BTreeMap<&str, &TruthRecord> = truths.iter().map(|t| (t.slide_id.as_str(), t)).collect();
    let p_ids: BTreeSet<&str> = preds.iter().map(|p| p.slide_id.as_str()).collect();
    if p_ids.len() != preds.len() || t.len() != truths.len() {
        return Err(Error::IdMismatch("duplicate slide ids".into()));
    }
    if p_ids != t.keys().copied().collect::<BTreeSet<_>>() {
        let missing: Vec<&str> = p_ids
            .symmetric_difference(&t.keys().copied().collect())
            .copied()
            .take(3)
            .collect();
        return Err(Error::IdMismatch(format!(
            "prediction and truth ids differ ({})",
            missing.join(", ")
        )));
    }
    Ok(preds.iter().map(|p| (p, t[p.slide_id.as_str()])).collect())
}

pub fn evaluate(
    preds: &[PredictionRecord],
    truths: &[TruthRecord],
    threshold: Option<f64>,
    targets: &[f64],
    group_isup: bool,
    ratings: Option<&RatingsMatrix>,
) -> Result<Report> {
    let rows = join_records(preds, truths)?;
    let scores: Vec<f64> = rows.iter().map(|(p, _)| p.p_malignant).collect();
    let grades: Vec<u8> = rows.iter().map(|(_, t)| t.isup).collect();
    let labels: Vec<bool> = grades.iter().map(|&g| g > 0).collect();
    let men: Vec<String> = rows.iter().map(|(_, t)| t.man_id.clone()).collect();
    let auc = roc_auc(&scores, &labels)?;

    // man level: max probability, summed length
    let mut by_man: BTreeMap<&str, (f64, f64, f64, bool)> = BTreeMap::new();
    for (p, t) in &rows {
        let e = by_man
            .entry(t.man_id.as_str())
            .or_insert((f64::NEG_INFINITY, 0.0, 0.0, false));
        e.0 = e.0.max(p.p_malignant);
        e.1 += p.length_mm;
        e.2 += t.length_mm;
        e.3 |= t.isup > 0;
    }
    let man_scores: Vec<f64> = by_man.values().map(|v| v.0).collect();
    let man_labels: Vec<bool> = by_man.values().map(|v| v.3).collect();

    let corr = |sel: &dyn Fn(&TruthRecord) -> bool| {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|(_, t)| sel(t))
            .map(|(p, t)| (p.length_mm, t.length_mm))
            .unzip();
        pearson(&x, &y).ok()
    };
    let man_corr = |positive_only: bool| {
        let (x, y): (Vec<f64>, Vec<f64>) = by_man
            .values()
            .filter(|v| !positive_only || v.3)
            .map(|v| (v.1, v.2))
            .unzip();
        pearson(&x, &y).ok()
    };
    let correlations = Correlations {
        core_all: corr(&|_| true),
        core_positive: corr(&|t| t.isup > 0),
        man_all: man_corr(false),
        man_positive: man_corr(true),
    };

    let map = |g: u8| if group_isup { grouped(g) } else { g };
    let categories: Vec<u8> = if group_isup {
        (0..=3).collect()
    } else {
        (0..=5).collect()
    };
    let all_pairs: Vec<(u8, u8)> = rows
        .iter()
        .map(|(p, t)| (map(t.isup), map(p.grade)))
        .collect();
    let pos_pairs: Vec<(u8, u8)> = rows
        .iter()
        .filter(|(_, t)| t.isup > 0)
        .map(|(p, t)| (map(t.isup), map(p.grade)))
        .collect();
    let kappa = Kappas {
        all: kappa_over(&all_pairs, &categories),
        positive: kappa_over(&pos_pairs, &categories),
        grouped: group_isup,
    };

    let at_threshold = match threshold {
        Some(t) => Some(operating_row_at(t, 0.0, &scores, &grades, &men)?),
        None => None,
    };
    let rater_kappas = match ratings {
        Some(r) => Some(rater_kappas(r, preds, group_isup)?),
        None => None,
    };
    Ok(Report {
        n_cores: rows.len(),
        n_men: by_man.len(),
        auc,
        man_auc: roc_auc(&man_scores, &man_labels).ok(),
        threshold,
        at_threshold,
        operating_table: operating_table(&scores, &grades, &men, targets)?,
        correlations,
        kappa,
        rater_kappas,
    })
}

fn rater_kappas(
    r: &RatingsMatrix,
    preds: &[PredictionRecord],
    group_isup: bool,
) -> Result<RaterKappas> {
    if r.grades.len() != r.case_ids.len() || r.grades.iter().any(|row| row.len() != r.raters.len())
    {
        return Err(Error::DimensionMismatch("ratings matrix shape".into()));
    }
    let p: BTreeMap<&str, u8> = preds
        .iter()
        .map(|p| (p.slide_id.as_str(), p.grade))
        .collect();
    let map = |g: u8| if group_isup { grouped(g) } else { g };
    let categories: Vec<u8> = if group_isup {
        (1..=3).collect()
    } else {
        (1..=5).collect()
    };
    let without: Vec<Vec<u8>> = r
        .grades
        .iter()
        .map(|row| row.iter().map(|&g| map(g)).collect())
        .collect();
    let with = r
        .case_ids
        .iter()
        .zip(&without)
        .map(|(id, row)| {
            let g = *p
                .get(id.as_str())
                .ok_or_else(|| Error::IdMismatch(format!("rated case {id} has no prediction")))?;
            // benign calls count as the lowest grade among raters
            let mut row = row.clone();
            row.push(map(g.max(1)));
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RaterKappas {
        raters: r.raters.clone(),
        without_model: pairwise_mean_kappa(&without, &categories)?,
        with_model: pairwise_mean_kappa(&with, &categories)?,
    })
}

/// Everything a synthetic run produces, in memory.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub patch_models: PatchModels,
    pub heads: HeadBundle,
    pub predictions: Vec<PredictionRecord>,
    pub report: Report,
    pub warnings: Vec<String>,
}

impl RunOutput {
    /// Digests of the serialized models, predictions and report.
    pub fn digests(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        out.insert(
            "patch_models".into(),
            digest(serde_json::to_string(&self.patch_models)?.as_bytes()),
        );
        out.insert(
            "heads".into(),
            digest(serde_json::to_string(&self.heads)?.as_bytes()),
        );
        out.insert(
            "predictions".into(),
            digest(&predictions_jsonl(&self.predictions)?),
        );
        out.insert(
            "report".into(),
            digest(serde_json::to_string_pretty(&self.report)?.as_bytes()),
        );
        Ok(out)
    }
}

pub fn predictions_jsonl(preds: &[PredictionRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in preds {
        out.extend(serde_json::to_vec(p)?);
        out.push(b'\n');
    }
    Ok(out)
}

/// Loads (or renders) one slide of a manifest.
pub type SlideSource<'a> = dyn Fn(&ManifestEntry) -> Result<ImagePyramid> + Sync + 'a;

/// Annotates the listed slides and extracts their patches, slide by slide
/// so only a few pyramids are alive at once.
pub fn manifest_patches(
    manifest: &Manifest,
    ids: &[String],
    source: &SlideSource,
    cfg: &PipelineConfig,
) -> Result<(Vec<SlidePatches>, Vec<String>)> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let rows = manifest
        .slides
        .par_iter()
        .filter(|s| wanted.contains(s.slide_id.as_str()))
        .map(|s| {
            let pyr = source(s)?;
            let masks = annotate_slide(&pyr, s.spec.grade_coded, cfg)?;
            let patches = extract_slide_patches(&s.slide_id, &pyr, &masks, &cfg.patch_grid)?;
            let warnings = masks
                .warnings
                .iter()
                .map(|w| format!("{}: {w}", s.slide_id))
                .collect::<Vec<_>>();
            Ok((patches, warnings))
        })
        .collect::<Result<Vec<_>>>()?;
    let (patches, warnings): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok((patches, warnings.into_iter().flatten().collect()))
}

/// Renders slides straight from their specifications.
pub fn render_source(entry: &ManifestEntry) -> Result<ImagePyramid> {
    generate_slide(&entry.spec).map(|(pyr, _)| pyr)
}

/// Man-grouped split, training on the training men and evaluation on the
/// held-out men.
pub fn run_manifest(
    manifest: &Manifest,
    source: &SlideSource,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    let (train_ids, test_ids) = split_by_man(manifest, cfg.test_fraction, cfg.seed);
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::Degenerate(
            "split leaves an empty training or test set".into(),
        ));
    }
    let truths: BTreeMap<String, TruthRecord> = truth_records(manifest)
        .into_iter()
        .map(|t| (t.slide_id.clone(), t))
        .collect();
    let (train, mut warnings) = manifest_patches(manifest, &train_ids, source, cfg)?;
    log::info!("extracted {} training slides", train.len());
    let patch_models = train_patch_models(&train, &truths, cfg)?;
    log::info!("trained patch ensembles");
    let train_probs = train
        .iter()
        .map(|s| predict_patches(&patch_models, s))
        .collect::<Result<Vec<_>>>()?;
    drop(train);
    let heads = train_slide_heads(&train_probs, &truths, cfg)?;
    log::info!("trained slide heads, threshold {}", heads.threshold);
    let (test, test_warnings) = manifest_patches(manifest, &test_ids, source, cfg)?;
    warnings.extend(test_warnings);
    let test_probs = test
        .iter()
        .map(|s| predict_patches(&patch_models, s))
        .collect::<Result<Vec<_>>>()?;
    let predictions = predict_slides(&heads.heads, &test_probs, heads.threshold)?;
    let test_truths: Vec<TruthRecord> = test_probs
        .iter()
        .map(|p| truths[&p.slide_id].clone())
        .collect();
    let report = evaluate(
        &predictions,
        &test_truths,
        Some(heads.threshold),
        &cfg.operating_targets,
        false,
        None,
    )?;
    Ok(RunOutput {
        train_ids,
        test_ids,
        patch_models,
        heads,
        predictions,
        report,
        warnings,
    })
}

/// [`run_manifest`] over slides rendered in memory.
pub fn run_synthetic(manifest: &Manifest, cfg: &PipelineConfig) -> Result<RunOutput> {
    run_manifest(manifest, &render_source, cfg)
}
