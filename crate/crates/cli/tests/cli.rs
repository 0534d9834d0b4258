use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ssm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SPEC: &str = r#"{"num_points": 32, "mesh_vertices": 162, "splits": {"train": 3, "val": 1, "test": 1}}"#;
const TRAIN: &str = r#"{"epochs": 2, "model": {"num_points": 32, "mlp_hidden": [32, 32]}}"#;

fn first_sample(data: &Path) -> PathBuf {
    let mut ids: Vec<PathBuf> = fs::read_dir(data.join("samples"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    ids.sort();
    ids.remove(0)
}

#[test]
fn synth_template_train_detect_align_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    fs::write(d.join("train.json"), TRAIN).unwrap();

    let out = ok(&ssm(&["synth", "--config", "spec.json", "--out", "data"], d));
    assert!(out.contains("wrote 5 samples"));

    let out = ok(&ssm(&["template", "--data", "data", "--out", "tpl"], d));
    assert_eq!(out.lines().filter(|l| l.starts_with("anatomy ")).count(), 3);
    for k in 0..3 {
        let a = fs::read(d.join(format!("tpl/anatomy_{k}/world.particles"))).unwrap();
        assert!(!a.is_empty());
    }

    let out = ok(&ssm(
        &["train", "--data", "data", "--templates", "tpl", "--config", "train.json", "--out", "run", "--quiet"],
        d,
    ));
    assert!(out.contains("trained 2 epochs"));
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(d.join("run/last.ckpt").exists());

    let sample = first_sample(&d.join("data"));
    let vol = sample.join("image.vol");
    let out = ok(&ssm(
        &["detect", "--checkpoint", "run/last.ckpt", "--volume", vol.to_str().unwrap(), "--threshold", "0.0"],
        d,
    ));
    for line in out.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 8, "{line}");
        assert!(f[0].parse::<usize>().unwrap() < 3);
        for v in &f[1..] {
            v.parse::<f64>().unwrap();
        }
    }

    let local = sample.join("anatomy_1.local.particles");
    let out = ok(&ssm(
        &["align", "--templates", "data/templates", "--anatomy", "1", "--particles", local.to_str().unwrap()],
        d,
    ));
    // Ground-truth locals align onto their own world targets.
    let world = fs::read_to_string(sample.join("anatomy_1.world.particles")).unwrap();
    let parse = |t: &str| -> Vec<f64> { t.split_whitespace().map(|v| v.parse().unwrap()).collect() };
    let (got, want) = (parse(&out), parse(&world));
    assert_eq!(got.len(), 96);
    assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-6));

    fs::write(d.join("eval.json"), r#"{"surface_samples": 200}"#).unwrap();
    let out = ok(&ssm(
        &["eval", "--checkpoint", "run/last.ckpt", "--data", "data", "--config", "eval.json", "--out", "report", "--split", "all"],
        d,
    ));
    assert!(out.starts_with("n="));
    let csv = fs::read_to_string(d.join("report/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 3);
    assert!(d.join("report/eval.json").exists());

    // A one-class dataset cannot be scored by a three-class checkpoint.
    let one = r#"{"num_points": 32, "mesh_vertices": 162, "splits": {"train": 2, "val": 0, "test": 1},
        "classes": [{"base_radii": [6, 6, 6], "center": [32, 32, 32]}]}"#;
    fs::write(d.join("one.json"), one).unwrap();
    ok(&ssm(&["synth", "--config", "one.json", "--out", "one"], d));
    let bad = ssm(&["eval", "--checkpoint", "run/last.ckpt", "--data", "one", "--out", "r2"], d);
    assert_eq!(bad.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("anatomy classes"), "{err}");

    // Training on it with the three-class config is rejected the same way.
    let bad = ssm(&["train", "--data", "one", "--config", "train.json", "--out", "r3"], d);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(ssm(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(ssm(&["synth"], d).status.code(), Some(1));
    assert_eq!(ssm(&["train", "--data", "x"], d).status.code(), Some(1));
    assert_eq!(ssm(&[], d).status.code(), Some(1));
    assert_eq!(ssm(&["--help"], d).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ssm(&["template", "--data", "missing", "--out", "t"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    fs::write(d.join("bad.json"), r#"{"no_such_key": 1}"#).unwrap();
    assert_eq!(ssm(&["synth", "--config", "bad.json", "--out", "x"], d).status.code(), Some(2));
}
