use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn snr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_snr"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = snr(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn end_to_end_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let domain = |id: usize, role: &str, ids: Option<[usize; 2]>| {
        json!({"domain_id": id, "role": role, "gain": [0.7 + 0.3 * id as f64, 0.9 + 0.3 * id as f64],
               "seed": id, "identities": ids})
    };
    let spec = json!({
        "num_identities": 4, "instances_per_domain": 3, "height": 8, "width": 4, "seed": 2,
        "domains": [domain(0, "source", None), domain(1, "source", None), domain(2, "target", Some([4, 3]))]
    });
    fs::write(p("spec.json"), spec.to_string()).unwrap();
    ok(&["gen-data", "--spec", &p("spec.json"), "--out", &p("data")]);
    assert!(dir.path().join("data/manifest.jsonl").exists());

    let cfg = json!({
        "scheme": "baseline_snr", "epochs": 2, "p": 2, "k": 2, "eval_every": 0,
        "dataset": p("data"), "target_domain": 2,
        "model": {"input": [3, 8, 4], "channels": [4, 8], "embedding_dim": 8, "reduction": 2, "lambda": [0.1, 0.5]},
        "optim": {"warmup_epochs": 1, "decay_every": 1}
    });
    fs::write(p("train.json"), cfg.to_string()).unwrap();
    ok(&["train", "--config", &p("train.json"), "--out", &p("run")]);
    let run = read(&dir.path().join("run/run.json"));

    ok(&[
        "eval",
        "--checkpoint",
        &p("run/checkpoint"),
        "--manifest",
        &p("data/manifest.jsonl"),
        "--target-domain",
        "2",
        "--report",
        &p("eval.json"),
        "--csv",
        &p("eval.csv"),
        "--divergence-domains",
        "0,1",
    ]);
    let report = read(&dir.path().join("eval.json"));
    assert_eq!(report["mAP"], run["final_eval"]["mAP"]);
    assert_eq!(report["cmc"], run["final_eval"]["cmc"]);
    assert_eq!(report["divergence_per_stage"].as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(p("eval.csv"))
        .unwrap()
        .starts_with("metric,value\nmAP,"));

    ok(&[
        "divergence",
        "--checkpoint",
        &p("run/checkpoint"),
        "--domains",
        "0,1",
        "--report",
        &p("div.json"),
    ]);
    let div = read(&dir.path().join("div.json"));
    assert_eq!(div["stages"].as_array().unwrap().len(), 2);
    assert_eq!(div["domains"], json!([0, 1]));

    let matrix = json!({"schemes": ["baseline", "snr_wo_lsnr"], "seeds": [0], "base": cfg, "target_domains": [2]});
    fs::write(p("matrix.json"), matrix.to_string()).unwrap();
    let table = ok(&[
        "ablate",
        "--matrix",
        &p("matrix.json"),
        "--out",
        &p("ablation"),
    ]);
    assert!(table.contains("Baseline,2,") && table.contains("SNR w/o L_SNR,2,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"scheme": "baseline", "epochs": 5}"#).unwrap();
    let out = dir.path().join("out");
    let code = snr(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .code();
    assert_eq!(code, Some(2));
    fs::write(&bad, "{not json").unwrap();
    let code = snr(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status
    .code();
    assert_eq!(code, Some(2));
    assert_eq!(snr(&["eval"]).status.code(), Some(2));
}
