#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A small but complete run configuration written into `dir`.
pub fn tiny_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "synth": { "entities": 6, "days": 30, "seed": 3 },
        "forecast_days": 3,
        "out_dir": dir.join("run"),
        "experiment": {
            "test_days": 8,
            "embedding": { "size": 3 },
            "network": { "hidden": [8], "latent_dim": 2, "dict_size": 4 },
            "training": { "max_epochs": 3, "batch_size": 16 },
            "samples": 20,
            "is_samples": 4
        }
    });
    merge(&mut cfg, extra);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn merge(base: &mut serde_json::Value, extra: serde_json::Value) {
    match (base, extra) {
        (serde_json::Value::Object(b), serde_json::Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loadcast")).args(args).output().unwrap()
}

/// Run and insist on exit status 0.
pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}
