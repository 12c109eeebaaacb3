use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn styleguide(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleguide"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

/// Every CSV and PPM in `dir`, by name.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "ppm")))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

const SMALL: &[&str] = &[
    "--steps", "20", "--size", "8", "--batch", "3", "--seed", "4,9",
];

#[test]
fn sample_replays_byte_identically_from_its_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut args = vec!["sample", "--mode", "synonymous", "--s0", "50"];
    args.extend_from_slice(SMALL);
    assert!(styleguide(&args, &a).status.success());
    let manifest = a.join("manifest.json");
    let replay = styleguide(&["sample", "--config", manifest.to_str().unwrap()], &b);
    assert!(
        replay.status.success(),
        "{}",
        String::from_utf8_lossy(&replay.stderr)
    );
    let (fa, fb) = (artifacts(&a), artifacts(&b));
    assert_eq!(fa.len(), 2 * 3 + 2, "6 images, metrics.csv, telemetry.csv");
    assert_eq!(fa, fb);
}

#[test]
fn contrastive_with_one_chain_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = styleguide(
        &["sample", "--mode", "contrastive", "--batch", "1"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch size >= 2"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = styleguide(&["sample", "--temperature", "3"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sample", "--distance", "mse", "--s0", "1e9"];
    args.extend_from_slice(SMALL);
    let out = styleguide(&args, tmp.path());
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn sweep_writes_one_row_per_scale_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--s0", "0,10,100"];
    args.extend_from_slice(SMALL);
    assert!(styleguide(&args, tmp.path()).status.success());
    let mut rdr = csv::Reader::from_path(tmp.path().join("tradeoff.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        &headers,
        vec!["s0", "seed", "style_loss", "content_score", "diverged"]
    );
    assert_eq!(rdr.records().count(), 3 * 2);
}

#[test]
fn relative_output_dirs_resolve_under_the_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_styleguide"))
        .args(["sample", "--mode", "none", "--out", "rel"])
        .args(SMALL)
        .env("STYLEGUIDE_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(tmp.path().join("rel").join("metrics.csv").exists());
    assert!(tmp.path().join("rel").join("manifest.json").exists());
}
