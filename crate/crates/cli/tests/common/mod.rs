#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ibfp::model::ModelConfig;
use ibfp::training::{LrSchedule, TrainingConfig};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ibfp"));
    c.env_remove("IBFP_OUT").env("RUST_LOG", "warn");
    c
}

/// Runs `ibfp --out <out> [--config cfg] --single-thread <args>`.
pub fn run(out: &Path, config: Option<&Path>, args: &[&str]) -> Output {
    let mut c = bin();
    c.arg("--out").arg(out).arg("--single-thread");
    if let Some(cfg) = config {
        c.arg("--config").arg(cfg);
    }
    c.args(args).output().expect("spawn ibfp")
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small dataset and tiny model on a three-epoch schedule.
pub fn tiny_config(dir: &Path) -> PathBuf {
    let training = TrainingConfig {
        schedule: LrSchedule {
            base_lr: 1e-3,
            final_linear_lr: 5e-4,
            constant_epochs: 1,
            linear_epochs: 1,
            exponential_epochs: 1,
            exp_decay: 0.9,
        },
        patches_per_epoch: 64,
        batch_size: 32,
        val_patches: 48,
        ..TrainingConfig::default()
    };
    let mut table = toml::Table::new();
    table.insert("model".into(), toml::Value::try_from(ModelConfig::tiny()).unwrap());
    table.insert("training".into(), toml::Value::try_from(training).unwrap());
    let extra: toml::Table = toml::from_str(
        "[dataset]\nnum_models = 3\nimages_per_model = 6\nimage_size = 24\n\
         [splices]\ncases = 3\nimage_size = 40\n\
         [sweep]\nbetas = [0.0, 0.001, 0.01]\n",
    )
    .unwrap();
    table.extend(extra);
    let path = dir.join("tiny.toml");
    std::fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path
}

/// Every file under `root` with its bytes, sorted by relative path,
/// excluding run manifests.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
