use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mergerec::config::ExperimentConfig;
use mergerec::data::synthetic::SyntheticConfig;
use mergerec::merge::merge_uniform;
use mergerec::model::ParamVector;

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::desk();
    cfg.data.synthetic = Some(SyntheticConfig {
        num_users: 30,
        num_items: 25,
        num_chains: 3,
        min_len: 4,
        max_len: 9,
        ..SyntheticConfig::default()
    });
    cfg.model.d_model = 8;
    cfg.model.max_len = 8;
    cfg.epochs.baseline = 1;
    cfg.epochs.finetune = 1;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn merge_rec(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_merge-rec"))
        .arg("--config")
        .arg(config)
        .args(["--threads", "2"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_ckpt(p: &Path) -> ParamVector {
    ParamVector::read_checkpoint(&mut std::fs::read(p).unwrap().as_slice()).unwrap()
}

#[test]
fn stagewise_commands_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let data = d.join("data.mrgd");
    let info = ok(merge_rec(&cfg, &["ingest", "--synthetic", "-o", s(&data)]));
    assert_eq!(info["items"], 25);

    let base = d.join("baseline.ckpt");
    ok(merge_rec(&cfg, &["train", "--dataset", s(&data), "--framework", "baseline", "-o", s(&base)]));
    let mut members = vec![base.clone()];
    for fw in ["cl4srec", "duorec_sup"] {
        let out = d.join(format!("{fw}.ckpt"));
        ok(merge_rec(&cfg, &["train", "--dataset", s(&data), "--framework", fw, "--init", s(&base), "-o", s(&out)]));
        members.push(out);
    }

    let mut fishers = Vec::new();
    for m in &members {
        let out = m.with_extension("mrgf");
        let info = ok(merge_rec(&cfg, &["fisher", "--dataset", s(&data), "--checkpoint", s(m), "--method", "random", "--sample-size", "3", "-o", s(&out)]));
        assert_eq!(info["backward_passes"], info["expected_backward_passes"]);
        fishers.push(out);
    }

    let entries = |with_fisher: bool| -> Vec<serde_json::Value> {
        members
            .iter()
            .zip(&fishers)
            .map(|(m, f)| {
                let name = m.file_name().unwrap().to_str().unwrap();
                if with_fisher {
                    serde_json::json!({"checkpoint": name, "fisher": f.file_name().unwrap().to_str().unwrap()})
                } else {
                    serde_json::json!({"checkpoint": name})
                }
            })
            .collect()
    };
    std::fs::write(d.join("uniform.json"), serde_json::json!({"mode": "uniform", "entries": entries(false)}).to_string()).unwrap();
    std::fs::write(d.join("fisher.json"), serde_json::json!({"mode": "fisher", "entries": entries(true)}).to_string()).unwrap();
    let uniform = d.join("merged_uniform.ckpt");
    let fisher = d.join("merged_fisher.ckpt");
    ok(merge_rec(&cfg, &["merge", "--recipe", s(&d.join("uniform.json")), "-o", s(&uniform)]));
    let info = ok(merge_rec(&cfg, &["merge", "--recipe", s(&d.join("fisher.json")), "-o", s(&fisher)]));
    assert_eq!(info["provenance"]["entries"].as_array().map(Vec::len), Some(3));
    assert!(d.join("merged_fisher.ckpt.json").is_file());

    let loaded: Vec<ParamVector> = members.iter().map(|m| read_ckpt(m)).collect();
    let expected = merge_uniform(&loaded.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(std::fs::read(&uniform).unwrap(), expected.checkpoint_bytes());

    let mut reports = Vec::new();
    for (name, ckpt) in [("a", &uniform), ("b", &fisher)] {
        let out = d.join(format!("eval_{name}.json"));
        let res = merge_rec(&cfg, &["eval", "--dataset", s(&data), "--checkpoint", s(ckpt), "--k", "10,20", "-o", s(&out)]);
        assert!(res.status.success());
        let table = String::from_utf8(res.stdout).unwrap();
        assert!(table.contains("ndcg@10") && table.contains("popular"), "{table}");
        reports.push(out);
    }
    let inc = ok(merge_rec(&cfg, &["inconsistency", s(&reports[0]), s(&reports[1]), "--pool", "random"]));
    assert!(inc["inconsistency"].as_f64().unwrap() >= 0.0);
    let same = ok(merge_rec(&cfg, &["inconsistency", s(&reports[0]), s(&reports[0])]));
    assert_eq!(same["inconsistency"], 0.0);

    let plane_csv = d.join("plane.csv");
    let res = merge_rec(
        &cfg,
        &[
            "viz-plane",
            "--plane",
            s(&members[0]),
            s(&members[1]),
            s(&members[2]),
            "--point",
            &format!("fisher={}", s(&fisher)),
            "-o",
            s(&plane_csv),
        ],
    );
    assert!(res.status.success());
    let csv = std::fs::read_to_string(&plane_csv).unwrap();
    assert!(csv.starts_with("label,x,y\nbaseline,0e0,0e0\n"), "{csv}");
    assert_eq!(csv.lines().count(), 5);

    let mass = ok(merge_rec(&cfg, &["topk-mass", "--dataset", s(&data), "--checkpoint", s(&base)]));
    let values: Vec<f64> = mass["mass"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] >= w[0]));
    assert!((values.last().unwrap() - 1.0).abs() <= 1e-6);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "no_such_field": true}"#).unwrap();
    let out = merge_rec(&bad, &["pipeline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    let cfg = small_config(dir.path());
    let out = merge_rec(&cfg, &["eval", "--dataset", "x", "--checkpoint", "y", "--pool", "nearest"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let junk = dir.path().join("junk.mrgd");
    std::fs::write(&junk, b"definitely not a dataset").unwrap();
    let out = merge_rec(&cfg, &["train", "--dataset", s(&junk)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("merge-rec: train failed"));
}

#[test]
fn numeric_blowups_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path());
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.train.adam.lr = 1e300;
    std::fs::write(&path, cfg.to_json()).unwrap();
    let data = dir.path().join("data.mrgd");
    ok(merge_rec(&path, &["ingest", "--synthetic", "-o", s(&data)]));
    let out = merge_rec(&path, &["train", "--dataset", s(&data), "--epochs", "3"]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
