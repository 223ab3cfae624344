//! Drives the `pathgrade` binary end to end on small synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pathgrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathgrade"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pathgrade(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn slide_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_requested_slides() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let out = pathgrade(&[
        "synth",
        "--out",
        s(&ds),
        "--benign",
        "2",
        "--isup1",
        "2",
        "--seed",
        "7",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(slide_dirs(&ds).len(), 4);
    assert!(ds.join("manifest.json").is_file());
    assert_eq!(
        fs::read_to_string(ds.join("truth.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    assert!(ds.join("run_log.json").is_file());
}

#[test]
fn evaluate_rejects_mismatched_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred.jsonl");
    let truth = tmp.path().join("truth.jsonl");
    fs::write(
        &pred,
        "{\"slide_id\":\"a\",\"p_malignant\":0.9,\"length_mm\":1.0,\"grade\":2,\"grade_probs\":[0.1,0.6,0.1,0.1,0.1]}\n",
    )
    .unwrap();
    fs::write(
        &truth,
        "{\"slide_id\":\"b\",\"man_id\":\"m\",\"isup\":2,\"length_mm\":1.0}\n",
    )
    .unwrap();
    let report = tmp.path().join("report.json");
    let out = pathgrade(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--truth",
        s(&truth),
        "--report",
        s(&report),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("id mismatch"), "{err}");
    assert!(err.contains("kind=id_mismatch"), "{err}");
    assert!(!report.exists());
}

#[test]
fn evaluate_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred.jsonl");
    let truth = tmp.path().join("truth.jsonl");
    let rows = [
        ("a", 0.9, 2.0, 2, "m1", 2, 2.1),
        ("b", 0.7, 3.0, 3, "m1", 3, 3.2),
        ("c", 0.2, 0.0, 0, "m2", 0, 0.0),
        ("d", 0.1, 0.1, 0, "m2", 0, 0.0),
    ];
    let (mut p, mut t) = (String::new(), String::new());
    for (id, score, len, grade, man, isup, tlen) in rows {
        p += &format!(
            "{{\"slide_id\":\"{id}\",\"p_malignant\":{score},\"length_mm\":{len},\"grade\":{grade},\"grade_probs\":[0.2,0.2,0.2,0.2,0.2]}}\n"
        );
        t += &format!(
            "{{\"slide_id\":\"{id}\",\"man_id\":\"{man}\",\"isup\":{isup},\"length_mm\":{tlen}}}\n"
        );
    }
    fs::write(&pred, p).unwrap();
    fs::write(&truth, t).unwrap();
    let report = tmp.path().join("report.json");
    ok(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--truth",
        s(&truth),
        "--report",
        s(&report),
        "--threshold",
        "0.5",
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["auc"], 1.0);
    assert!(r["correlations"]["core_all"].as_f64().unwrap() > 0.99);
    assert_eq!(r["at_threshold"]["missed_men"], 0);
}

#[test]
fn unknown_stage_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pathgrade(&[
        "train-patch",
        "--stage",
        "staging",
        "--patches",
        s(tmp.path()),
        "--truth",
        s(&tmp.path().join("t.jsonl")),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn slide_stages_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let ds = root.join("ds");
    ok(&[
        "synth",
        "--out",
        s(&ds),
        "--benign",
        "1",
        "--isup1",
        "1",
        "--isup4",
        "1",
        "--isup5",
        "1",
        "--seed",
        "3",
        "--core-length-mm",
        "3,4",
    ]);
    let patches = root.join("patches");
    for slide in slide_dirs(&ds) {
        let id = slide.file_name().unwrap().to_str().unwrap().to_string();
        let work = root.join("work").join(&id);
        let (tissue, pen, labels) = (
            work.join("tissue.png"),
            work.join("pen.png"),
            work.join("labels.png"),
        );
        ok(&[
            "segment",
            s(&slide),
            "--out-tissue",
            s(&tissue),
            "--out-pen",
            s(&pen),
        ]);
        let truth: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(slide.join("truth.json")).unwrap()).unwrap();
        let mut digitize = vec![
            "digitize",
            s(&slide),
            "--tissue",
            s(&tissue),
            "--pen",
            s(&pen),
            "--out",
            s(&labels),
        ];
        if truth["grade_coded"] == true {
            digitize.push("--grade-coded");
        }
        ok(&digitize);
        ok(&[
            "extract",
            s(&slide),
            "--labels",
            s(&labels),
            "--tissue",
            s(&tissue),
            "--pen",
            s(&pen),
            "--out",
            s(&patches),
            "--features-only",
        ]);
        assert!(patches.join(&id).join("index.jsonl").is_file());
    }
    let truth = ds.join("truth.jsonl");
    let (models, probs) = (root.join("models"), root.join("probs"));
    fs::create_dir_all(&probs).unwrap();
    for stage in ["detection", "grading"] {
        let m = models.join(stage);
        ok(&[
            "train-patch",
            "--stage",
            stage,
            "--patches",
            s(&patches),
            "--truth",
            s(&truth),
            "--members",
            "2",
            "--out",
            s(&m),
        ]);
        ok(&[
            "predict-patch",
            "--models",
            s(&m),
            "--patches",
            s(&patches),
            "--out",
            s(&probs.join(format!("{stage}.jsonl"))),
        ]);
    }
    let det = probs.join("detection.jsonl");
    let members: std::collections::BTreeSet<(String, u64)> = fs::read_to_string(&det)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (
                v["slide_id"].as_str().unwrap().to_string(),
                v["member"].as_u64().unwrap(),
            )
        })
        .collect();
    assert_eq!(members.len(), 2 * 4, "two members, four slides");

    let slide = &slide_dirs(&ds)[0];
    let overlay = root.join("overlay.png");
    let mask = root.join("mask.png");
    let probs_arg = format!("{},{}", s(&det), s(&probs.join("grading.jsonl")));
    ok(&[
        "render",
        s(slide),
        "--probs",
        &probs_arg,
        "--out",
        s(&overlay),
        "--mask-out",
        s(&mask),
    ]);
    assert!(overlay.is_file() && mask.is_file());
}

#[test]
fn pipeline_on_small_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, run) = (tmp.path().join("ds"), tmp.path().join("run"));
    ok(&[
        "synth",
        "--out",
        s(&ds),
        "--benign",
        "6",
        "--isup1",
        "2",
        "--isup2",
        "2",
        "--isup3",
        "2",
        "--isup4",
        "2",
        "--isup5",
        "2",
        "--seed",
        "11",
        "--core-length-mm",
        "3,4",
        "--cores-per-man",
        "2,2",
    ]);
    ok(&["pipeline", "--data", s(&ds), "--out", s(&run)]);
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for key in ["auc", "operating_table", "correlations", "kappa"] {
        assert!(!r[key].is_null(), "report lacks {key}");
    }
    assert!(run.join("predictions.jsonl").is_file());
    assert!(run.join("heads").join("detection.json").is_file());
    assert!(run.join("run_log.json").is_file());
}
