use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use coresetkit::embeddings::{write_embeddings, EmbeddingMatrix};
use coresetkit::harness::RunRecord;
use coresetkit::listing::{self, CoresetFile};
use coresetkit::raster::{self, LabelMask};

const BIN: &str = env!("CARGO_BIN_EXE_coresetkit");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn embeddings(dir: &Path, n: usize) -> std::path::PathBuf {
    let rows: Vec<Vec<f32>> = (0..n).map(|i| vec![(i % 7) as f32, (i / 7) as f32]).collect();
    let ids = (0..n).map(|i| format!("img{}:0:{}", i / 10, (i % 10) * 112)).collect();
    let path = dir.join("f.emb");
    write_embeddings(&EmbeddingMatrix::from_rows(&rows, ids).unwrap(), &path).unwrap();
    path
}

fn test_set(dir: &Path) {
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::create_dir_all(dir.join("masks")).unwrap();
    let mut m = LabelMask::zeros(12, 12);
    m.set(3, 3, 1);
    m.set(3, 4, 1);
    raster::write_mask(&m, dir.join("images/a")).unwrap();
    raster::write_mask(&m, dir.join("masks/a_masks")).unwrap();
}

#[test]
fn quantize_methods_and_bin_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let emb = embeddings(dir.path(), 60);
    let dq_out = dir.path().join("dq.json");
    assert!(run(&["quantize", "--embeddings", s(&emb), "--rate", "0.1", "--seed", "4", "--out", s(&dq_out)]).status.success());
    let dq = CoresetFile::read(&dq_out).unwrap();
    // 60 patches in bins of 12: round(1.2) = 1 per bin
    assert_eq!((dq.n_bins, dq.selection.len()), (5, 5));

    let reuse = dir.path().join("reuse.json");
    assert!(run(&["quantize", "--embeddings", s(&emb), "--rate", "0.5", "--seed", "4", "--bins-from", s(&dq_out), "--out", s(&reuse)]).status.success());
    assert_eq!(CoresetFile::read(&reuse).unwrap().bins, dq.bins);

    let rnd = dir.path().join("rnd.json");
    assert!(run(&["quantize", "--embeddings", s(&emb), "--method", "random", "--rate", "0.1", "--out", s(&rnd)]).status.success());
    let rnd = CoresetFile::read(&rnd).unwrap();
    assert_eq!((rnd.n_bins, rnd.selection.len()), (1, 6));

    let bad = run(&["quantize", "--embeddings", s(&emb), "--rate", "1.5", "--out", s(&dir.path().join("never.json"))]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("outside"));
}

#[test]
fn unknown_domain_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "plan-transfer", "--stage", "Retina=x.json", "--test-set", "Cyto=t",
        "--trainer-cmd", "t", "--out", s(&dir.path().join("m.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Retina"));
}

#[test]
fn failing_stage_is_recorded_and_workdir_env_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let subset = root.join("subset.json");
    fs::write(&subset, r#"{"patches": ["a:0:0"]}"#).unwrap();
    for d in ["Cyto", "Histo", "MultiInst"] {
        test_set(&root.join(d));
    }
    let mock = format!("{BIN} mock-trainer");
    let train = format!("{mock} --subset {{subset}} --init-model {{init_model}} --out-model {{out_model}} --stage {{stage}} --fail-at-stage 2");
    let predict = format!("{mock} --predict --model {{model}} --images {{images}} --out {{pred_dir}}");
    let manifest = root.join("m.json");
    let mut args = vec!["plan-transfer".to_string(), "--preset".into(), "A".into()];
    for d in ["Cyto", "Histo", "MultiInst"] {
        args.extend(["--subset".into(), format!("{d}={}", s(&subset))]);
        args.extend(["--test-set".into(), format!("{d}={}", s(&root.join(d)))]);
    }
    args.extend(["--train-template".into(), train, "--predict-template".into(), predict, "--out".into(), s(&manifest).into()]);
    let out = Command::new(BIN).args(&args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let workdir = root.join("from-env");
    let out = Command::new(BIN)
        .args(["run", "--manifest", s(&manifest)])
        .env("CORESETKIT_WORKDIR", &workdir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let record: RunRecord = listing::read_json(workdir.join("path-a/run_record.json")).unwrap();
    assert_eq!(record.failed_stage, Some(2));
    assert_eq!(record.stages.len(), 2);
    assert!(record.stages[0].model.is_some());
    assert!(!workdir.join("path-a/stage-3-MultiInst").exists());
}

#[test]
fn evaluate_writes_csv_table() {
    let dir = tempfile::tempdir().unwrap();
    test_set(dir.path());
    let csv = dir.path().join("r.csv");
    let out = run(&["evaluate", "--gt", s(&dir.path().join("masks")), "--pred", s(&dir.path().join("images")), "--out", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "image,iou,dice,precision,recall,accuracy,pq");
    assert!(lines[1].starts_with("a,1,"));
    assert!(lines[2].starts_with("MEAN,"));
    assert!(lines[3].starts_with("STD,"));
}

#[test]
fn replay_without_source_is_target_only() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("t.json");
    fs::write(&target, r#"{"patches": ["h:0:0", "h:0:112"]}"#).unwrap();
    let mix = dir.path().join("mix.json");
    assert!(run(&["compose-replay", "--target", s(&target), "--out", s(&mix)]).status.success());
    assert_eq!(listing::read_subset_patches(&mix).unwrap(), vec!["h:0:0", "h:0:112"]);
}
