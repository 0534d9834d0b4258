use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ssm_core::dataset::{read_dataset, write_dataset};
use ssm_core::synth::{generate_dataset, SplitSizes, SyntheticSpec};

use crate::Outcome;

const SPEC: &str = r#"{"splits": {"train": 6, "val": 2, "test": 0}, "num_points": 64, "mesh_vertices": 162}"#;
const TRAIN: &str = r#"{"epochs": 3, "seed": 11, "model": {"num_points": 64, "mlp_hidden": [64, 64]}}"#;

fn ssm(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ssm"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`ssm {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) -> bool {
    let fa = files(a);
    fa == files(b) && fa.iter().all(|f| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap())
}

fn training_logs_match() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    fs::write(d.join("train.json"), TRAIN).unwrap();
    ssm(d, &["synth", "--config", "spec.json", "--out", "data"])?;
    ssm(d, &["synth", "--config", "spec.json", "--out", "data2"])?;
    if !same_tree(&d.join("data"), &d.join("data2")) {
        return Err("two synth runs wrote different files".into());
    }
    for run in ["a", "b"] {
        ssm(d, &["train", "--data", "data", "--config", "train.json", "--out", run, "--quiet"])?;
    }
    let la = fs::read(d.join("a/train_log.csv")).unwrap();
    let lb = fs::read(d.join("b/train_log.csv")).unwrap();
    if la != lb {
        return Err("training logs differ".into());
    }
    let ca = fs::read(d.join("a/last.ckpt")).unwrap();
    let cb = fs::read(d.join("b/last.ckpt")).unwrap();
    if ca != cb {
        return Err("final checkpoints differ".into());
    }
    let lines = String::from_utf8(la).unwrap().lines().count() - 1;
    Ok(format!("two train runs wrote identical {lines}-epoch logs and checkpoints"))
}

fn dataset_round_trip() -> Result<String, String> {
    let ds = generate_dataset(&SyntheticSpec {
        splits: SplitSizes {
            train: 8,
            val: 2,
            test: 2,
        },
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&ds, a.path()).map_err(|e| e.to_string())?;
    let back = read_dataset(a.path()).map_err(|e| e.to_string())?;
    if back != ds {
        return Err("read-back dataset differs from the written one".into());
    }
    let bits_equal = ds.samples.iter().zip(&back.samples).all(|(x, y)| {
        x.volume.data.iter().map(|v| v.to_bits()).eq(y.volume.data.iter().map(|v| v.to_bits()))
            && x.anatomies.iter().zip(&y.anatomies).all(|(p, q)| {
                let flat = |s: &ssm_core::geometry::CorrespondenceSet| {
                    s.to_flat().into_iter().map(f64::to_bits).collect::<Vec<_>>()
                };
                flat(&p.local) == flat(&q.local) && flat(&p.world) == flat(&q.world)
            })
    });
    if !bits_equal {
        return Err("a read-back value differs in its bit pattern".into());
    }
    write_dataset(&back, b.path()).map_err(|e| e.to_string())?;
    if !same_tree(a.path(), b.path()) {
        return Err("rewriting the read-back dataset changed some file".into());
    }
    Ok(format!("{}-sample dataset round-trips bitwise", ds.samples.len()))
}

pub fn determinism() -> Outcome {
    match (training_logs_match(), dataset_round_trip()) {
        (Ok(a), Ok(b)) => Outcome::new(true, format!("{a}; {b}")),
        (a, b) => Outcome::new(
            false,
            [a, b]
                .into_iter()
                .map(|r| r.unwrap_or_else(|e| e))
                .collect::<Vec<_>>()
                .join("; "),
        ),
    }
}
