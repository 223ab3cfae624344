//! On-disk formats owned by the command-line driver: patch archives, JSONL
//! record files, head bundles and run logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pathgrade::aggregation::HeadManifest;
use pathgrade::aggregation::{HeadTask, LossMatrix, SlideHeads};
use pathgrade::gbt::GbtModel;
use pathgrade::patch_model::{read_prob_jsonl, ProbMatrix, Stage};
use pathgrade::pipeline::{
    digest, Calibration, HeadBundle, PipelineConfig, SlidePatches, SlideProbs,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "index.jsonl";

/// One line of a patch archive index.
#[derive(Debug, Serialize, Deserialize)]
pub struct PatchLine {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub features: Vec<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(rows)
}

pub fn write_patch_index(dir: &Path, lines: &[PatchLine]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_jsonl(&dir.join(INDEX_FILE), lines)
}

/// Reads every `<root>/<slide_id>/index.jsonl`, in slide id order.
pub fn read_patch_archive(root: &Path) -> Result<Vec<SlidePatches>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(INDEX_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no patch indexes under {}", root.display());
    }
    dirs.iter()
        .map(|d| {
            let lines: Vec<PatchLine> = read_jsonl(&d.join(INDEX_FILE))?;
            let slide_id = match lines.first() {
                Some(l) => l.slide_id.clone(),
                None => d
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
            };
            let mut s = SlidePatches {
                slide_id,
                window_size: lines.first().map_or(0, |l| l.size),
                coords: Vec::new(),
                labels: Vec::new(),
                features: Vec::new(),
            };
            for l in lines {
                s.coords.push((l.x, l.y));
                s.labels.push(l.label);
                s.features.push(l.features);
            }
            Ok(s)
        })
        .collect()
}

/// Probability matrices per slide, members in index order.
pub fn read_probs(path: &Path, stage: Stage) -> Result<BTreeMap<String, Vec<ProbMatrix>>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let by_member = read_prob_jsonl(BufReader::new(f), stage)?;
    let mut out: BTreeMap<String, Vec<ProbMatrix>> = BTreeMap::new();
    let n_members = by_member.len();
    for slides in by_member.into_values() {
        for (id, pm) in slides {
            out.entry(id).or_default().push(pm);
        }
    }
    if let Some((id, _)) = out.iter().find(|(_, v)| v.len() != n_members) {
        bail!(pathgrade::Error::IdMismatch(format!(
            "slide {id} is missing from some members"
        )));
    }
    Ok(out)
}

/// Pairs detection and grading matrices by slide id.
pub fn join_probs(
    det: BTreeMap<String, Vec<ProbMatrix>>,
    mut gra: BTreeMap<String, Vec<ProbMatrix>>,
) -> Result<Vec<SlideProbs>> {
    if det.len() != gra.len() || det.keys().any(|k| !gra.contains_key(k)) {
        bail!(pathgrade::Error::IdMismatch(
            "detection and grading files cover different slides".into()
        ));
    }
    Ok(det
        .into_iter()
        .map(|(id, detection)| {
            let grading = gra.remove(&id).unwrap_or_default();
            SlideProbs {
                slide_id: id,
                detection,
                grading,
            }
        })
        .collect())
}

fn task_name(task: HeadTask) -> &'static str {
    match task {
        HeadTask::Detection => "detection",
        HeadTask::Length => "length",
        HeadTask::Grading => "grading",
    }
}

#[derive(Serialize, Deserialize)]
struct BundleExtras {
    loss: LossMatrix,
    threshold_sensitivity: f64,
}

/// Writes `<dir>/<task>.json` manifests, `<dir>/models/<task>_<i>.json`,
/// `<dir>/calibration.json` and `<dir>/decision.json`.
pub fn save_head_bundle(dir: &Path, bundle: &HeadBundle) -> Result<Vec<PathBuf>> {
    let calib_digest = bundle.calibration.digest()?;
    let mut written = Vec::new();
    for (task, models) in [
        (HeadTask::Detection, &bundle.heads.detection),
        (HeadTask::Length, &bundle.heads.length),
        (HeadTask::Grading, &bundle.heads.grading),
    ] {
        let mut members = Vec::new();
        for (i, m) in models.iter().enumerate() {
            let rel = format!("models/{}_{i}.json", task_name(task));
            let p = dir.join(&rel);
            fs::create_dir_all(p.parent().expect("has parent"))?;
            fs::write(&p, m.to_json()?).with_context(|| format!("writing {}", p.display()))?;
            written.push(p);
            members.push(rel);
        }
        let detection = task == HeadTask::Detection;
        let manifest = HeadManifest {
            task,
            members,
            threshold: detection.then_some(bundle.threshold),
            calibration_set_digest: detection.then(|| calib_digest.clone()),
        };
        let p = dir.join(format!("{}.json", task_name(task)));
        write_json(&p, &manifest)?;
        written.push(p);
    }
    let p = dir.join("calibration.json");
    write_json(&p, &bundle.calibration)?;
    written.push(p);
    let p = dir.join("decision.json");
    write_json(
        &p,
        &BundleExtras {
            loss: bundle.heads.loss,
            threshold_sensitivity: bundle.threshold_sensitivity,
        },
    )?;
    written.push(p);
    Ok(written)
}

pub fn load_head_bundle(dir: &Path) -> Result<HeadBundle> {
    let load = |task: HeadTask| -> Result<(HeadManifest, Vec<GbtModel>)> {
        let manifest: HeadManifest = read_json(&dir.join(format!("{}.json", task_name(task))))?;
        if manifest.task != task {
            bail!(
                "{} manifest declares task {:?}",
                task_name(task),
                manifest.task
            );
        }
        let models = manifest
            .members
            .iter()
            .map(|rel| {
                let p = dir.join(rel);
                let s =
                    fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                Ok(GbtModel::from_json(&s)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((manifest, models))
    };
    let (det_manifest, detection) = load(HeadTask::Detection)?;
    let (_, length) = load(HeadTask::Length)?;
    let (_, grading) = load(HeadTask::Grading)?;
    let calibration: Calibration = read_json(&dir.join("calibration.json"))?;
    if det_manifest.calibration_set_digest.as_deref() != Some(calibration.digest()?.as_str()) {
        bail!("calibration.json does not match the detection manifest digest");
    }
    let extras: BundleExtras = read_json(&dir.join("decision.json"))?;
    Ok(HeadBundle {
        heads: SlideHeads {
            detection,
            length,
            grading,
            loss: extras.loss,
        },
        threshold: det_manifest
            .threshold
            .context("detection manifest has no threshold")?,
        threshold_sensitivity: extras.threshold_sensitivity,
        calibration,
    })
}

/// Digest of a file, or of every file below a directory (sorted by path).
pub fn path_digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        let mut acc = Vec::new();
        for f in files {
            let rel = f
                .strip_prefix(path)
                .unwrap_or(&f)
                .to_string_lossy()
                .replace('\\', "/");
            acc.extend(rel.as_bytes());
            acc.push(0);
            acc.extend(digest(&fs::read(&f)?).as_bytes());
            acc.push(b'\n');
        }
        Ok(digest(&acc))
    } else {
        Ok(digest(
            &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        ))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()) != Some(RUN_LOG) {
            out.push(p);
        }
    }
    Ok(())
}

pub const RUN_LOG: &str = "run_log.json";

/// Reproducibility record written next to every command's outputs.
#[derive(Serialize)]
pub struct RunLog<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub args: Vec<String>,
    pub config: &'a PipelineConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn run_log_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join(RUN_LOG)
    } else {
        let mut name = primary.file_name().unwrap_or_default().to_os_string();
        name.push(".run_log.json");
        primary.with_file_name(name)
    }
}

pub fn digests(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), path_digest(p)?)))
        .collect()
}

pub fn write_lines(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes)?;
    Ok(())
}
