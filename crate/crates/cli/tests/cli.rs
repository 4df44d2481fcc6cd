mod common;

use common::{code, ok, tiny_config};
use serde_json::{json, Value};

fn read_json(p: &std::path::Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn guide_vae_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let c = cfg.to_str().unwrap();
    let run = tmp.path().join("run");
    ok(&["synth", "--config", c]);
    assert!(run.join("panel.csv").is_file() && run.join("synth_truth.json").is_file());
    ok(&["embed", "--config", c]);
    ok(&["train", "--config", c]);
    for f in ["guide_vae.json", "normalization.json", "embeddings.csv", "embeddings_meta.json", "training_log.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    ok(&["forecast", "--config", c]);
    let fdir = run.join("forecast");
    for f in ["fans.csv", "fans_physical.csv", "truths.csv", "mixtures.jsonl", "ensembles.csv", "bands.csv", "best_traces.csv", "sigma_fans.csv"] {
        assert!(fdir.join(f).is_file(), "{f}");
    }
    // 6 entities x 3 days x 11 levels
    let fans = loadcast::forecast::read_fan_csv(&fdir.join("fans.csv")).unwrap();
    assert_eq!(fans.len(), 18);
    assert!(fans.values().all(|f| f.is_monotone() && f.levels.len() == 11));
    let mixtures = std::fs::read_to_string(fdir.join("mixtures.jsonl")).unwrap();
    assert_eq!(mixtures.lines().count(), 18);
    let rec: loadcast::forecast::MixtureRecord = serde_json::from_str(mixtures.lines().next().unwrap()).unwrap();
    assert_eq!(rec.means.len(), 20);
    // 13 band rows per day
    let bands = std::fs::read_to_string(fdir.join("bands.csv")).unwrap();
    assert_eq!(bands.lines().count(), 1 + 18 * 13);

    ok(&["evaluate", "--config", c]);
    let live = read_json(&run.join("report_guide_vae.json"));
    assert!(live["all"].is_f64());
    ok(&["evaluate", "--config", c, "--fans", fdir.join("fans.csv").to_str().unwrap()]);
    let mut stored = read_json(&run.join("report_guide_vae.json"));
    // the fan file does not record how many samples produced it
    assert!(stored["samples"].is_null());
    stored["samples"] = live["samples"].clone();
    assert_eq!(live, stored);

    let out = ok(&["plot", "--config", c]);
    let listed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(listed.lines().count(), 6);
    let svg = std::fs::read_to_string(run.join("plots").join("u000.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let tags: Vec<&str> = doc.descendants().filter(|n| n.is_element()).map(|n| n.tag_name().name()).collect();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    for t in ["polygon", "polyline", "rect"] {
        assert!(tags.contains(&t), "{t}");
    }
}

#[test]
fn qrnn_report_leaves_all_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({ "model": "qrnn" }));
    let c = cfg.to_str().unwrap();
    ok(&["train", "--config", c]);
    ok(&["forecast", "--config", c]);
    ok(&["evaluate", "--config", c]);
    let run = tmp.path().join("run");
    let report = read_json(&run.join("report_qrnn.json"));
    assert!(report["all"].is_null());
    assert_eq!(report["model"], "QRNN");
    let md = std::fs::read_to_string(run.join("report_qrnn.md")).unwrap();
    let row = md.lines().nth(2).unwrap();
    assert!(row.trim_end().ends_with("| − |"), "{row}");
    assert!(!run.join("forecast").join("mixtures.jsonl").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), json!({}));
    let c = cfg.to_str().unwrap();

    // nothing trained yet
    assert_eq!(code(&["forecast", "--config", c]), 4);
    assert_eq!(code(&["evaluate", "--config", c, "--model", "qrnn"]), 4);
    ok(&["train", "--config", c]);
    assert_eq!(code(&["forecast", "--config", c, "--entities", "nobody"]), 4);
    assert_eq!(code(&["evaluate", "--config", c, "--model", "qrnn"]), 4);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{ "no_such_key": 1 }"#).unwrap();
    assert_eq!(code(&["train", "--config", bad.to_str().unwrap()]), 2);
    let missing = tiny_config(tmp.path(), json!({ "dataset": tmp.path().join("absent.csv") }));
    assert_eq!(code(&["train", "--config", missing.to_str().unwrap(), "--out-dir", tmp.path().join("x").to_str().unwrap()]), 2);
    assert!(!tmp.path().join("x").exists());
    assert_eq!(code(&["train", "--config", c, "--samples", "0"]), 2);
}

#[test]
fn ablation_with_failing_rows_reports_partial_success() {
    let tmp = tempfile::tempdir().unwrap();
    // K = 10 exceeds the 6 entities, so every embedded row fails
    let cfg = tiny_config(
        tmp.path(),
        json!({ "experiment": { "embedding": { "size": 10 }, "training": { "max_epochs": 1 } } }),
    );
    assert_eq!(code(&["ablate", "--config", cfg.to_str().unwrap()]), 5);
    let out = read_json(&tmp.path().join("run").join("ablation.json"));
    let rows = out["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r["error"].is_string()).count(), 3);
    let md = std::fs::read_to_string(tmp.path().join("run").join("ablation.md")).unwrap();
    assert!(md.contains("FAILED"));
}
