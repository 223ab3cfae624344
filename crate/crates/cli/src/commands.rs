//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pathgrade::annotation::{build_label_mask, refine_label_mask};
use pathgrade::features::extract_patch_features;
use pathgrade::patch_model::{
    predict_prob_matrix, train_patch_ensemble, write_prob_jsonl, PatchClassifier, Stage,
    TrainingPatch,
};
use pathgrade::patching::{extract_patch, label_patch, plan_patch_grid};
use pathgrade::pipeline::{
    evaluate, predict_slides, predictions_jsonl, run_manifest, train_slide_heads, truth_records,
    PipelineConfig, PredictionRecord, RatingsMatrix, SlideMasks, TruthRecord,
};
use pathgrade::rendering::{build_confidence_mask, render_overlay};
use pathgrade::segmentation::{segment_penmarks, segment_tissue};
use pathgrade::slide_io::{
    load_binary_mask, load_label_mask, load_slidepack, save_mask, save_rgb_png, ImagePyramid, Mask,
};
use pathgrade::synth::{load_manifest, plan_dataset, slide_dir, write_dataset, DatasetConfig};
use rayon::prelude::*;

use crate::archive::{
    digests, join_probs, load_head_bundle, read_json, read_jsonl, read_patch_archive, read_probs,
    run_log_path, save_head_bundle, write_json, write_jsonl, write_lines, write_patch_index,
    PatchLine, RunLog,
};
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    let mut cfg: PipelineConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut ctx = RunContext {
        cfg,
        name: "",
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::Synth(a) => synth(&mut ctx, a),
        Command::Segment(a) => segment(&mut ctx, a),
        Command::Digitize(a) => digitize(&mut ctx, a),
        Command::Extract(a) => extract(&mut ctx, a),
        Command::TrainPatch(a) => train_patch(&mut ctx, a),
        Command::PredictPatch(a) => predict_patch(&mut ctx, a),
        Command::TrainSlide(a) => train_slide(&mut ctx, a),
        Command::PredictSlide(a) => predict_slide(&mut ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&mut ctx, a),
        Command::Render(a) => render(&mut ctx, a),
        Command::Pipeline(a) => pipeline(&mut ctx, a),
    }?;
    ctx.write_run_log()
}

/// Per-invocation state: effective configuration and the files touched.
struct RunContext {
    cfg: PipelineConfig,
    name: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunContext {
    fn start(&mut self, name: &'static str, inputs: &[&Path]) -> Result<()> {
        self.cfg.validate()?;
        self.name = name;
        for p in inputs {
            if !p.exists() {
                bail!(pathgrade::Error::InvalidParam(format!(
                    "input {} does not exist",
                    p.display()
                )));
            }
            self.inputs.push(p.to_path_buf());
        }
        Ok(())
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    fn write_run_log(&self) -> Result<()> {
        let Some(primary) = self.outputs.first() else {
            return Ok(());
        };
        let ins: Vec<&Path> = self.inputs.iter().map(PathBuf::as_path).collect();
        let outs: Vec<&Path> = self.outputs.iter().map(PathBuf::as_path).collect();
        let log = RunLog {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.name,
            args: std::env::args().skip(1).collect(),
            config: &self.cfg,
            inputs: digests(&ins)?,
            outputs: digests(&outs)?,
        };
        write_json(&run_log_path(primary), &log)
    }
}

fn slide_name(pack: &Path, explicit: &Option<String>) -> String {
    explicit.clone().unwrap_or_else(|| {
        pack.canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "slide".into())
    })
}

fn synth(ctx: &mut RunContext, a: &crate::SynthArgs) -> Result<()> {
    ctx.start("synth", &[])?;
    let mut cfg = DatasetConfig {
        counts: [a.benign, a.isup1, a.isup2, a.isup3, a.isup4, a.isup5],
        seed: ctx.cfg.seed,
        ..Default::default()
    };
    if let Some(r) = a.core_length_mm {
        cfg.core_length_mm = r;
    }
    if let Some((lo, hi)) = a.cores_per_man {
        cfg.min_cores_per_man = lo;
        cfg.max_cores_per_man = hi;
    }
    let manifest = plan_dataset(&cfg)?;
    write_dataset(&manifest, &a.out)?;
    write_jsonl(&a.out.join("truth.jsonl"), &truth_records(&manifest))?;
    log::info!(
        "wrote {} slides to {}",
        manifest.slides.len(),
        a.out.display()
    );
    ctx.output(&a.out);
    Ok(())
}

fn segment(ctx: &mut RunContext, a: &crate::SegmentArgs) -> Result<()> {
    ctx.start("segment", &[&a.slidepack])?;
    let pyr = load_slidepack(&a.slidepack)?;
    let tissue = segment_tissue(&pyr, &ctx.cfg.segmentation)?;
    let pen = segment_penmarks(&pyr, &tissue, &ctx.cfg.segmentation)?;
    save_mask(&Mask::Binary(tissue), &a.out_tissue)?;
    save_mask(&Mask::Binary(pen), &a.out_pen)?;
    ctx.output(&a.out_tissue);
    ctx.output(&a.out_pen);
    Ok(())
}

fn digitize(ctx: &mut RunContext, a: &crate::DigitizeArgs) -> Result<()> {
    ctx.start("digitize", &[&a.slidepack, &a.tissue, &a.pen])?;
    let pyr = load_slidepack(&a.slidepack)?;
    let tissue = load_binary_mask(&a.tissue)?;
    let pen = load_binary_mask(&a.pen)?;
    let image = pyr.read_region(tissue.downsample, pyr.full_rect())?;
    let px = pyr.pixel_size_um();
    let out = build_label_mask(&tissue, &pen, &image, a.grade_coded, &ctx.cfg.digitizer, px)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    let labels = if a.no_refine {
        out.labels
    } else {
        refine_label_mask(&out.labels, &tissue, &ctx.cfg.digitizer, px)?
    };
    save_mask(&Mask::Label(labels), &a.out)?;
    ctx.output(&a.out);
    Ok(())
}

fn extract(ctx: &mut RunContext, a: &crate::ExtractArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.slidepack, &a.labels];
    inputs.extend(a.tissue.as_deref());
    inputs.extend(a.pen.as_deref());
    let grid = &mut ctx.cfg.patch_grid;
    if let Some(v) = a.stride {
        grid.stride_px = v;
    }
    if let Some(v) = a.size {
        grid.patch_px = v;
    }
    if let Some(v) = a.level {
        grid.level = v;
    }
    ctx.start("extract", &inputs)?;
    let cfg = &ctx.cfg;
    let pyr = load_slidepack(&a.slidepack)?;
    let tissue = match &a.tissue {
        Some(p) => load_binary_mask(p)?,
        None => segment_tissue(&pyr, &cfg.segmentation)?,
    };
    let pen = match &a.pen {
        Some(p) => load_binary_mask(p)?,
        None => segment_penmarks(&pyr, &tissue, &cfg.segmentation)?,
    };
    let masks = SlideMasks {
        labels: load_label_mask(&a.labels)?,
        tissue,
        pen,
        warnings: Vec::new(),
    };
    let slide_id = slide_name(&a.slidepack, &a.slide_id);
    let dir = a.out.join(&slide_id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let windows = plan_patch_grid(
        &masks.tissue,
        &cfg.patch_grid,
        pyr.pixel_size_um(),
        pyr.base_width(),
        pyr.base_height(),
    )?;
    let lines = windows
        .par_iter()
        .map(|w| -> Result<PatchLine> {
            let label = label_patch(w, &masks.labels, &masks.tissue)?;
            let img = extract_patch(&pyr, w, &masks.tissue, Some(&masks.pen), &cfg.patch_grid)?;
            let file = (!a.features_only).then(|| format!("{}_{}.png", w.x, w.y));
            if let Some(f) = &file {
                save_rgb_png(&img, &dir.join(f))?;
            }
            Ok(PatchLine {
                slide_id: slide_id.clone(),
                x: w.x,
                y: w.y,
                size: w.size,
                label,
                file,
                features: extract_patch_features(&img),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_patch_index(&dir, &lines)?;
    log::info!("{slide_id}: {} patches", lines.len());
    ctx.output(&dir);
    Ok(())
}

fn truth_map(path: &Path) -> Result<BTreeMap<String, TruthRecord>> {
    let rows: Vec<TruthRecord> = read_jsonl(path)?;
    Ok(rows.into_iter().map(|t| (t.slide_id.clone(), t)).collect())
}

fn train_patch(ctx: &mut RunContext, a: &crate::TrainPatchArgs) -> Result<()> {
    if let Some(m) = a.members {
        ctx.cfg.patch_train.n_members = m;
    }
    ctx.start("train-patch", &[&a.patches, &a.truth])?;
    let slides = read_patch_archive(&a.patches)?;
    let truths = truth_map(&a.truth)?;
    let mut patches = Vec::new();
    for s in &slides {
        let t = truths
            .get(&s.slide_id)
            .ok_or_else(|| pathgrade::Error::IdMismatch(format!("no truth for {}", s.slide_id)))?;
        let grades = t.slide_grades();
        for (f, &l) in s.features.iter().zip(&s.labels) {
            patches.push(TrainingPatch {
                features: f.clone(),
                label: l,
                slide_grades: grades.clone(),
            });
        }
    }
    // grading members draw from a separate seed range, as in the pipeline
    let seed = match a.stage {
        Stage::Detection => ctx.cfg.seed,
        Stage::Grading => ctx.cfg.seed.wrapping_add(1000),
    };
    let members = train_patch_ensemble(&patches, a.stage, &ctx.cfg.patch_train, seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for m in &members {
        let p = a.out.join(format!("{}_{}.json", a.stage.name(), m.member));
        fs::write(&p, m.to_json()?).with_context(|| format!("writing {}", p.display()))?;
    }
    ctx.output(&a.out);
    Ok(())
}

fn load_members(dir: &Path) -> Result<Vec<PatchClassifier>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().is_some_and(|n| n != "run_log.json")
        })
        .collect();
    files.sort();
    let mut members = files
        .iter()
        .map(|p| {
            let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(PatchClassifier::from_json(&s)
                .with_context(|| format!("parsing {}", p.display()))?)
        })
        .collect::<Result<Vec<_>>>()?;
    if members.is_empty() {
        bail!("no patch models in {}", dir.display());
    }
    members.sort_by_key(|m| m.member);
    if members.iter().any(|m| m.stage != members[0].stage) {
        bail!("{} mixes detection and grading models", dir.display());
    }
    Ok(members)
}

fn predict_patch(ctx: &mut RunContext, a: &crate::PredictPatchArgs) -> Result<()> {
    ctx.start("predict-patch", &[&a.models, &a.patches])?;
    let members = load_members(&a.models)?;
    let slides = read_patch_archive(&a.patches)?;
    let mut out = Vec::new();
    for m in &members {
        let mats = slides
            .par_iter()
            .map(|s| predict_prob_matrix(m, &s.slide_id, &s.coords, &s.features))
            .collect::<pathgrade::Result<Vec<_>>>()?;
        for pm in &mats {
            write_prob_jsonl(&mut out, pm, Some(m.member))?;
        }
    }
    write_lines(&a.out, &out)?;
    ctx.output(&a.out);
    Ok(())
}

fn train_slide(ctx: &mut RunContext, a: &crate::TrainSlideArgs) -> Result<()> {
    if let Some(t) = a.threshold_sensitivity {
        ctx.cfg.threshold_sensitivity = t;
    }
    ctx.start("train-slide", &[&a.det, &a.gra, &a.truth])?;
    let probs = join_probs(
        read_probs(&a.det, Stage::Detection)?,
        read_probs(&a.gra, Stage::Grading)?,
    )?;
    let truths = truth_map(&a.truth)?;
    let bundle = train_slide_heads(&probs, &truths, &ctx.cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_head_bundle(&a.out, &bundle)?;
    ctx.output(&a.out);
    Ok(())
}

fn predict_slide(ctx: &mut RunContext, a: &crate::PredictSlideArgs) -> Result<()> {
    ctx.start("predict-slide", &[&a.heads, &a.det, &a.gra])?;
    let bundle = load_head_bundle(&a.heads)?;
    let threshold = match (a.threshold, a.threshold_sensitivity) {
        (Some(t), _) => t,
        (None, Some(s)) => bundle.calibration.threshold(s)?,
        (None, None) => bundle.threshold,
    };
    if !(0.0..=1.0).contains(&threshold) {
        bail!(pathgrade::Error::InvalidParam(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let probs = join_probs(
        read_probs(&a.det, Stage::Detection)?,
        read_probs(&a.gra, Stage::Grading)?,
    )?;
    let preds = predict_slides(&bundle.heads, &probs, threshold)?;
    write_lines(&a.out, &predictions_jsonl(&preds)?)?;
    ctx.output(&a.out);
    Ok(())
}

fn evaluate_cmd(ctx: &mut RunContext, a: &crate::EvaluateArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.pred, &a.truth];
    inputs.extend(a.ratings.as_deref());
    ctx.start("evaluate", &inputs)?;
    let preds: Vec<PredictionRecord> = read_jsonl(&a.pred)?;
    let truths: Vec<TruthRecord> = read_jsonl(&a.truth)?;
    let ratings: Option<RatingsMatrix> = a.ratings.as_deref().map(read_json).transpose()?;
    let report = evaluate(
        &preds,
        &truths,
        a.threshold,
        &ctx.cfg.operating_targets,
        a.group_isup,
        ratings.as_ref(),
    )?;
    write_json(&a.report, &report)?;
    ctx.output(&a.report);
    Ok(())
}

fn render(ctx: &mut RunContext, a: &crate::RenderArgs) -> Result<()> {
    ctx.start("render", &[&a.slidepack, &a.probs.0, &a.probs.1])?;
    let pyr = load_slidepack(&a.slidepack)?;
    let slide_id = slide_name(&a.slidepack, &a.slide_id);
    let pick = |path: &Path, stage: Stage| -> Result<Vec<_>> {
        let mut by_slide = read_probs(path, stage)?;
        by_slide.remove(&slide_id).ok_or_else(|| {
            pathgrade::Error::IdMismatch(format!("{} has no rows for {slide_id}", path.display()))
                .into()
        })
    };
    let det = pick(&a.probs.0, Stage::Detection)?;
    let gra = pick(&a.probs.1, Stage::Grading)?;
    let window = ctx.cfg.patch_grid.window_base_px(pyr.pixel_size_um());
    let mask = build_confidence_mask(
        &det,
        &gra,
        window,
        pyr.base_width(),
        pyr.base_height(),
        a.downsample,
    )?;
    render_overlay(&pyr, &mask, a.alpha, &a.out)?;
    ctx.output(&a.out);
    if let Some(p) = &a.mask_out {
        save_rgb_png(&mask.image, p)?;
        ctx.output(p);
    }
    Ok(())
}

fn pipeline(ctx: &mut RunContext, a: &crate::PipelineArgs) -> Result<()> {
    let data = a
        .data
        .clone()
        .or_else(|| ctx.cfg.paths.data.clone())
        .context("--data is required")?;
    let out = a
        .out
        .clone()
        .or_else(|| ctx.cfg.paths.out.clone())
        .context("--out is required")?;
    let manifest_path = data.join("manifest.json");
    ctx.start("pipeline", &[&manifest_path])?;
    let manifest = load_manifest(&manifest_path)?;
    let source = |e: &pathgrade::synth::ManifestEntry| -> pathgrade::Result<ImagePyramid> {
        load_slidepack(&slide_dir(&data, &e.slide_id))
    };
    let run = run_manifest(&manifest, &source, &ctx.cfg)?;
    for w in &run.warnings {
        log::warn!("{w}");
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let models = out.join("patch_models");
    fs::create_dir_all(&models)?;
    for m in run
        .patch_models
        .detection
        .iter()
        .chain(&run.patch_models.grading)
    {
        fs::write(
            models.join(format!("{}_{}.json", m.stage.name(), m.member)),
            m.to_json()?,
        )?;
    }
    save_head_bundle(&out.join("heads"), &run.heads)?;
    write_lines(
        &out.join("predictions.jsonl"),
        &predictions_jsonl(&run.predictions)?,
    )?;
    write_json(&out.join("report.json"), &run.report)?;
    write_json(
        &out.join("split.json"),
        &serde_json::json!({ "train": run.train_ids, "test": run.test_ids }),
    )?;
    ctx.output(&out);
    Ok(())
}
