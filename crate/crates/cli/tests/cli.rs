use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nledn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nledn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nledn(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Scenes plus a synthesized dataset under `root`.
fn dataset(root: &Path, count: &str, extra: &[&str]) {
    let scenes = root.join("scenes");
    ok(&[
        "scenes",
        "--out-dir",
        s(&scenes),
        "--count",
        "2",
        "--height",
        "24",
        "--width",
        "20",
    ]);
    let mut args = vec!["synth", "--clean-dir", s(&scenes), "--out-dir"];
    let data = root.join("data");
    args.push(s(&data));
    args.extend(["--count", count, "--streaks", "20"]);
    args.extend(extra);
    ok(&args);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dataset(a.path(), "3", &[]);
    dataset(b.path(), "3", &[]);
    for sub in ["data/rainy", "data/clean", "data"] {
        assert_eq!(
            files(&a.path().join(sub)),
            files(&b.path().join(sub)),
            "{sub}"
        );
    }
    assert_eq!(files(&a.path().join("data/rainy")).len(), 3);
}

#[test]
fn zero_intensity_rain_is_a_copy() {
    let d = tempfile::tempdir().unwrap();
    dataset(
        d.path(),
        "2",
        &["--intensity-min", "0", "--intensity-max", "0"],
    );
    let data = d.path().join("data");
    assert_eq!(files(&data.join("rainy")), files(&data.join("clean")));
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = nledn(&["synth", "--out-dir", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(nledn(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_infer_eval_describe() {
    let d = tempfile::tempdir().unwrap();
    dataset(d.path(), "2", &[]);
    let (data, run) = (d.path().join("data"), d.path().join("run"));

    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--micro",
        "--max-steps",
        "0",
    ]);
    let ckpts: Vec<_> = files(&run)
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    assert_eq!(ckpts, ["latest.ckpt", "step_00000000.ckpt"]);

    // an untrained model reproduces its input exactly, including the non-multiple-of-8 size
    let latest = run.join("latest.ckpt");
    let restored = d.path().join("restored");
    ok(&[
        "infer",
        "--ckpt",
        s(&latest),
        "--in",
        s(&data.join("rainy")),
        "--out",
        s(&restored),
        "--dump-rainmap",
    ]);
    assert_eq!(files(&restored), files(&data.join("rainy")));
    assert_eq!(files(&restored.join("rainmap")).len(), 2);

    let tsv = ok(&[
        "eval",
        "--gt-dir",
        s(&data.join("clean")),
        "--pred-dir",
        s(&data.join("clean")),
    ]);
    let lines: Vec<_> = tsv.lines().collect();
    assert_eq!(lines[0], "id\tpsnr_db\tssim");
    assert!(lines[1].ends_with("\tinf\t1.000000"), "{}", lines[1]);
    assert!(lines.last().unwrap().starts_with("MEAN\t"));

    let by_ckpt = ok(&[
        "eval",
        "--gt-dir",
        s(&data.join("clean")),
        "--ckpt",
        s(&latest),
        "--rainy-dir",
        s(&data.join("rainy")),
    ]);
    assert_eq!(by_ckpt.lines().count(), 4);

    let desc = ok(&["describe"]);
    assert!(desc.lines().any(|l| l == "parameters\t975939"), "{desc}");
    let desc = ok(&["describe", "--ckpt", s(&latest)]);
    assert!(desc.lines().any(|l| l == "base_channels\t4"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    dataset(d.path(), "2", &[]);
    let data = d.path().join("data");
    let (full, part) = (d.path().join("full"), d.path().join("part"));
    let base = [
        "--micro",
        "--variant",
        "Ra",
        "--seed",
        "3",
        "--checkpoint-every",
        "3",
    ];
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&full),
        "--max-steps",
        "6",
    ];
    args.extend(base);
    ok(&args);
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--max-steps",
        "3",
    ];
    args.extend(base);
    ok(&args);
    let latest = part.join("latest.ckpt");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&part),
        "--resume",
        s(&latest),
        "--max-steps",
        "6",
    ]);
    assert_eq!(
        fs::read(full.join("latest.ckpt")).unwrap(),
        fs::read(part.join("latest.ckpt")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_is_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    dataset(d.path(), "1", &[]);
    let (data, run) = (d.path().join("data"), d.path().join("run"));
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--micro",
        "--max-steps",
        "0",
    ]);
    let ckpt = run.join("latest.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x5a;
    fs::write(&ckpt, bytes).unwrap();
    let out = nledn(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&data.join("rainy")),
        "--out",
        s(&d.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr)
        .to_lowercase()
        .contains("crc"));
}

#[test]
fn gradcheck_passes_and_catches_perturbation() {
    let report = ok(&["gradcheck"]);
    assert!(
        report.lines().filter(|l| l.ends_with("\tok")).count() >= 15,
        "{report}"
    );
    let out = nledn(&["gradcheck", "--perturb", "conv2d_3x3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conv2d_3x3"));
}

#[test]
fn bad_thread_count_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nledn"))
        .args(["scenes", "--out-dir", s(d.path()), "--count", "1"])
        .env("NLEDN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
