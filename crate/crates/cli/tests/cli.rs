use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_colnerf");

const DESK: &str = "channels = 8
mlp_width = 32
n_coarse = 16
n_fine = 16
rays_per_iter = 64
random_rays = 56
reference_rays = 8
neighbor_rays = 8
batch_scenes = 1
learning_rate = 5e-4
eval_every = 100
";

fn colnerf(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).env_remove("COLF_THREADS").args(args).output().expect("spawn colnerf")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = colnerf(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn log_psnr(path: &Path) -> Vec<f64> {
    fs::read_to_string(path).unwrap().lines().skip(1).filter_map(|l| l.split(',').nth(5)?.parse().ok()).collect()
}

#[test]
fn make_scene_writes_manifest_and_images_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(d, &["make-scene", "--preset", "tri-sphere", "--views", "6", "--size", "16", "--seed", "1", "--out", out]);
    }
    let a = files(&d.join("a"));
    assert_eq!(a.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count(), 6);
    assert!(a.iter().any(|(p, _)| p.extension().is_some_and(|e| e == "json")));
    assert_eq!(a, files(&d.join("b")));
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(colnerf(d, &["make-scene", "--views", "1", "--out", "x"]).status.code(), Some(1));
    assert_eq!(colnerf(d, &["train", "--out", "x"]).status.code(), Some(1));
    assert_eq!(colnerf(d, &["train", "--ablation", "bogus", "--scenes", "s", "--out", "x"]).status.code(), Some(1));
    assert_eq!(colnerf(d, &["train", "--scenes", "missing", "--out", "x"]).status.code(), Some(2));
    ok(d, &["make-scene", "--views", "6", "--size", "8", "--out", "s"]);
    assert_eq!(colnerf(d, &["render", "--checkpoint", "nope.bin", "--scene", "s", "--out", "r"]).status.code(), Some(2));
    assert_eq!(colnerf(d, &["eval", "--scene", "s", "--rendered", "nowhere"]).status.code(), Some(2));
    assert_eq!(colnerf(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn threads_flag_and_env_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--threads", "1", "make-scene", "--views", "3", "--size", "8", "--out", "a"]);
    let out = Command::new(BIN).current_dir(d).env("COLF_THREADS", "1").args(["make-scene", "--views", "3", "--size", "8", "--out", "b"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(colnerf(d, &["--threads", "0", "make-scene", "--views", "3", "--size", "8", "--out", "c"]).status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["make-scene", "--views", "6", "--size", "8", "--seed", "2", "--out", "s"]);
    fs::write(d.join("desk.toml"), DESK).unwrap();
    ok(d, &["train", "--scenes", "s", "--config", "desk.toml", "--iters", "2", "--seed", "9", "--ablation", "vi-geo", "--out", "run"]);
    let cfg = fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert!(cfg.contains("iterations = 2"), "{cfg}");
    assert!(cfg.contains("seed = 9"));
    assert!(cfg.contains("channels = 8"));
    assert!(cfg.contains("ablation = \"vi-geo\""));
    fs::write(d.join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(colnerf(d, &["train", "--scenes", "s", "--config", "bad.toml", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["make-scene", "--views", "6", "--size", "16", "--seed", "3", "--out", "s"]);
    fs::write(d.join("desk.toml"), DESK).unwrap();
    let common = ["--scenes", "s", "--config", "desk.toml", "--eval-every", "0", "--seed", "4"];
    ok(d, &[&["train", "--iters", "12", "--out", "straight"][..], &common].concat());
    ok(d, &[&["train", "--iters", "5", "--out", "split"][..], &common].concat());
    ok(d, &[&["train", "--iters", "12", "--resume", "split/checkpoint.bin", "--out", "split"][..], &common].concat());
    let a = fs::read(d.join("straight/checkpoint.bin")).unwrap();
    let b = fs::read(d.join("split/checkpoint.bin")).unwrap();
    assert!(a == b, "resumed checkpoint differs from the uninterrupted one");
    assert_eq!(fs::read_to_string(d.join("split/train_log.csv")).unwrap().lines().count(), 13);
}

#[test]
fn ablate_reports_all_five_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["make-scene", "--views", "6", "--size", "8", "--seed", "5", "--out", "s"]);
    fs::write(d.join("desk.toml"), DESK).unwrap();
    let stdout = ok(d, &["ablate", "--scenes", "s", "--config", "desk.toml", "--iters", "2", "--eval-every", "0", "--out", "abl"]);
    assert!(stdout.contains("Average(2-term)"));
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["baseline", "vi", "vi-geo", "vi-app", "full"]);
    for name in rows {
        assert!(d.join("abl").join(name).join("checkpoint.bin").is_file());
    }
}

#[test]
fn pipeline_end_to_end_at_32px() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["make-scene", "--views", "8", "--size", "32", "--seed", "1", "--out", "s1"]);
    fs::write(d.join("desk.toml"), DESK).unwrap();
    ok(d, &["train", "--scenes", "s1", "--config", "desk.toml", "--iters", "300", "--ablation", "full", "--seed", "7", "--out", "run"]);
    let psnr = log_psnr(&d.join("run/train_log.csv"));
    assert_eq!(psnr.len(), 3);
    assert!(psnr[2] > psnr[0], "held-out PSNR did not improve: {psnr:?}");

    ok(d, &["render", "--checkpoint", "run/checkpoint.bin", "--scene", "s1", "--views", "target", "--depth", "--out", "r1"]);
    ok(d, &["render", "--checkpoint", "run/checkpoint.bin", "--scene", "s1", "--views", "target", "--depth", "--out", "r2"]);
    let r1 = files(&d.join("r1"));
    assert_eq!(r1.len(), 3 * 3, "three target views, each with color, depth PNG and depth sidecar");
    assert_eq!(r1, files(&d.join("r2")));

    let table = ok(d, &["eval", "--checkpoint", "run/checkpoint.bin", "--scene", "s1", "--csv", "m.csv"]);
    assert!(table.contains("Average(2-term)"));
    let csv = fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(csv.starts_with("view,psnr,ssim,average_2term\n"));
    let mean: f64 = csv.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((mean - psnr[2]).abs() < 1e-3, "eval {mean} vs log {}", psnr[2]);

    ok(d, &["render", "--checkpoint", "run/checkpoint.bin", "--scene", "s1", "--out", "held"]);
    let from_png = ok(d, &["eval", "--rendered", "held", "--scene", "s1"]);
    let last = from_png.lines().last().unwrap().split_whitespace().nth(1).unwrap().parse::<f64>().unwrap();
    assert!((last - mean).abs() < 0.1, "8-bit renders score {last}, float renders {mean}");
    assert!(start.elapsed().as_secs() < 300);
}
