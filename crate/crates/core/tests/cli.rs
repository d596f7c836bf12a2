use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn rada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rada")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rada(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A two-pair homography corpus and a briefly trained checkpoint, shared by
/// every test in this file.
fn workspace() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let data = dir.join("data");
        ok(&["synth-data", "-o", s(&data), "--pairs", "2", "--size", "64", "--warp", "homography", "--seed", "3"]);
        let run = dir.join("run");
        let out = ok(&["train", "--smoke", "--out-dir", s(&run), "--max-steps", "3", "--size", "64", "--dim", "32", "--pairs", "2"]);
        assert!(out.contains("step=3 name=total value="), "{out}");
        assert!(run.join("final.ckpt").exists() && run.join("metrics.txt").exists() && run.join("config.toml").exists());
        for (img, feat) in [("pair_0000_a.png", "a.rada"), ("pair_0000_b.png", "b.rada")] {
            ok(&[
                "extract",
                "--image",
                s(&data.join(img)),
                "--checkpoint",
                s(&run.join("final.ckpt")),
                "-o",
                s(&dir.join(feat)),
                "--top-k",
                "100",
                "--score-threshold",
                "0",
            ]);
        }
        dir
    })
}

fn machine_value(out: &str, key: &str) -> f64 {
    out.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap_or_else(|| panic!("no {key} in {out}")).parse().unwrap()
}

#[test]
fn extract_writes_feature_files_deterministically() {
    let dir = workspace();
    let bytes = std::fs::read(dir.join("a.rada")).unwrap();
    assert_eq!(&bytes[..4], b"RADA");
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    assert!(n > 0 && n <= 100, "{n} keypoints");
    let again = dir.join("a_again.rada");
    ok(&[
        "extract",
        "--image",
        s(&dir.join("data/pair_0000_a.png")),
        "--checkpoint",
        s(&dir.join("run/final.ckpt")),
        "-o",
        s(&again),
        "--top-k",
        "100",
        "--score-threshold",
        "0",
    ]);
    assert_eq!(std::fs::read(again).unwrap(), bytes);
}

#[test]
fn self_match_is_the_identity() {
    let dir = workspace();
    let a = s(&dir.join("a.rada")).to_string();
    let pairs = dir.join("self.txt");
    let out = ok(&["match", "--features-a", &a, "--features-b", &a, "-o", s(&pairs)]);
    let n = machine_value(&out, "num_features_a");
    assert_eq!(machine_value(&out, "num_matches"), n);
    for line in std::fs::read_to_string(pairs).unwrap().lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f[0], f[1]);
    }
}

#[test]
fn mma_reports_a_monotone_curve() {
    let dir = workspace();
    let out = ok(&[
        "mma",
        "--features-a",
        s(&dir.join("a.rada")),
        "--features-b",
        s(&dir.join("b.rada")),
        "--homography",
        s(&dir.join("data/pair_0000_H.txt")),
        "--size-a",
        "64,64",
        "--size-b",
        "64,64",
    ]);
    let curve: Vec<f64> = (1..=10).map(|t| machine_value(&out, &format!("mma@{t}"))).collect();
    assert!(curve.windows(2).all(|w| w[0] <= w[1]), "{curve:?}");
    assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn visualize_counts_every_match() {
    let dir = workspace();
    let (png, fa, fb) = (dir.join("vis.png"), dir.join("a.rada"), dir.join("b.rada"));
    let args = ["--features-a", s(&fa), "--features-b", s(&fb)];
    let matched = ok(&["match", args[0], args[1], args[2], args[3]]);
    let out = ok(&[
        "visualize",
        "--image-a",
        s(&dir.join("data/pair_0000_a.png")),
        "--image-b",
        s(&dir.join("data/pair_0000_b.png")),
        args[0],
        args[1],
        args[2],
        args[3],
        "--homography",
        s(&dir.join("data/pair_0000_H.txt")),
        "-o",
        s(&png),
    ]);
    let drawn = machine_value(&out, "green") + machine_value(&out, "red") + machine_value(&out, "blue");
    assert_eq!(drawn, machine_value(&matched, "num_matches"));
    assert_eq!(machine_value(&out, "blue"), 0.0);
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (128, 64));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = workspace();
    let out = rada(&["extract", "--image", "/nonexistent.png", "--checkpoint", s(&dir.join("run/final.ckpt")), "-o", "/tmp/x.rada"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("nonexistent.png"), "{err}");

    let bad = dir.join("bad.rada");
    std::fs::write(&bad, b"nope").unwrap();
    let out = rada(&["match", "--features-a", s(&bad), "--features-b", s(&bad)]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn resume_refuses_a_changed_config() {
    let dir = workspace();
    let (ckpt, out_dir) = (dir.join("run/final.ckpt"), dir.join("resumed"));
    let base = ["train", "--smoke", "--size", "64", "--dim", "32", "--pairs", "2", "--max-steps", "4"];
    let mut args = base.to_vec();
    args.extend(["--out-dir", s(&out_dir), "--resume", s(&ckpt), "--seed", "9"]);
    let out = rada(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
    args.push("--override-fingerprint");
    let out = ok(&args);
    assert!(out.contains("step=4 name=total"), "{out}");
    let metrics = std::fs::read_to_string(dir.join("resumed/metrics.txt")).unwrap();
    assert!(metrics.lines().all(|l| l.starts_with("step=4 ")), "resumed run repeats finished updates: {metrics}");
}

#[test]
fn synth_data_writes_pose_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["synth-data", "-o", s(dir.path()), "--pairs", "2", "--size", "64", "--warp", "pose-depth"]);
    assert!(out.contains("2 pose+depth"), "{out}");
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 2);
    assert!(dir.path().join("pair_0001_b.pfm").exists());
}
