use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn srformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// A model small enough that a few epochs take well under a second.
fn tiny_spec(dir: &Path, extra: Value) -> String {
    let mut spec = json!({
        "experiment": {
            "n_train": 6,
            "n_eval": 3,
            "model": {
                "vocab_size": 12, "d_model": 8, "heads": 2, "layers_enc": 1, "layers_dec": 1,
                "ffn_dim": 16, "src_len": 16, "tgt_len": 4, "segment_size": 4
            },
            "train": { "lr": 0.01, "epochs": 2, "batch_size": 2, "eval_every": 1 }
        }
    });
    for (k, v) in extra.as_object().unwrap() {
        spec[k] = v.clone();
    }
    let path = dir.join("spec.json");
    fs::write(&path, spec.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn verify_all_suites_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = srformer(&["verify", "--out", out.to_str().unwrap(), "--emit", "json"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let rows: Value =
        serde_json::from_str(&fs::read_to_string(out.join("verify.json")).unwrap()).unwrap();
    let suites: std::collections::BTreeSet<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["suite"].as_str().unwrap())
        .collect();
    assert_eq!(suites.len(), 6);
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn injected_fault_fails_verify() {
    let o = srformer(&["verify", "--suite", "rouge", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL rouge/"));
}

#[test]
fn suite_filter_runs_only_cost() {
    let o = srformer(&["verify", "--suite", "cost"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text
        .lines()
        .filter(|l| l.starts_with("PASS"))
        .all(|l| l.starts_with("PASS cost/")));
    assert!(text.contains("8388608"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seedz": [1]}"#).unwrap();
    assert_eq!(
        code(&srformer(&["bench", "--config", bad.to_str().unwrap()])),
        2
    );
    assert_eq!(code(&srformer(&["bench", "--emit", "xml"])), 2);
    assert_eq!(
        code(&srformer(&["train", "--ablation", "V", "--out", "x"])),
        2
    );
    assert_eq!(code(&srformer(&["train"])), 2);
    let verify_spec = dir.path().join("verify.json");
    fs::write(&verify_spec, r#"{"command": "verify"}"#).unwrap();
    assert_eq!(
        code(&srformer(&[
            "bench",
            "--config",
            verify_spec.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn bench_csv_schema_and_reference_row() {
    let o = srformer(&["bench"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "q,k,d,s,variant,theoretical_macs,measured_macs,mem_elems,wall_time_s"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let reference: Vec<_> = rows
        .iter()
        .filter(|r| r[..4] == ["128", "1024", "64", "64"])
        .collect();
    let macs: Vec<&str> = reference.iter().map(|r| r[5]).collect();
    assert_eq!(macs, ["8388608", "524288", "4718592"]);
    assert!(reference.iter().all(|r| r[5] == r[6]));

    let seg = |s: &str| -> u64 {
        rows.iter()
            .find(|r| r[3] == s && r[4] == "segmented" && r[0] == "128")
            .unwrap()[5]
            .parse()
            .unwrap()
    };
    assert_eq!(seg("16"), 2 * seg("8"));
    assert_eq!(seg("64"), 8 * seg("8"));
}

#[test]
fn bench_json_mirrors_csv() {
    let o = srformer(&["bench", "--emit", "json", "--variant", "full"]);
    let rows: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let first = &rows[0];
    assert_eq!(first["variant"], "full");
    assert_eq!(first["theoretical_macs"], 8_388_608);
    assert_eq!(first.as_object().unwrap().len(), 9);
}

#[test]
fn train_is_deterministic_and_manifest_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path(), json!({}));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = srformer(&[
            "train",
            "--config",
            &spec,
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert!(metrics.starts_with("seed,epoch,train_loss,rouge1,rouge2,rougeL\n"));
    assert_eq!(metrics.lines().count(), 3);
    assert!(a.join("checkpoint_seed3.json").is_file());

    let c = dir.path().join("c");
    let manifest = a.join("manifest.json");
    let o = srformer(&[
        "run",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(metrics, fs::read_to_string(c.join("metrics.csv")).unwrap());
    let m: Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["seeds"], json!([3]));
    assert!(m["versions"]["core"].is_string());
}

#[test]
fn decode_untrained_and_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path(), json!({}));
    let out = dir.path().join("t");
    let o = srformer(&["train", "--config", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);

    let untrained = dir.path().join("u");
    let zero = tiny_spec(dir.path(), json!({}));
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&zero).unwrap()).unwrap();
    v["experiment"]["train"]["epochs"] = json!(0);
    fs::write(&zero, v.to_string()).unwrap();
    let o = srformer(&[
        "train",
        "--config",
        &zero,
        "--out",
        untrained.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let ckpt = untrained.join("checkpoint_seed0.json");
    let dec = dir.path().join("d");
    let o = srformer(&[
        "decode",
        "--config",
        &zero,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--samples",
        "4",
        "--out",
        dec.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dec.join("decoded.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "index,prediction,reference,rouge1");
    assert_eq!(lines.count(), 4);

    let o = srformer(&[
        "decode",
        "--checkpoint",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn ablate_emits_five_modes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path(), json!({ "seeds": [0, 1] }));
    let out = dir.path().join("ab");
    let o = srformer(&["ablate", "--config", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let modes: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(modes, ["full-sr", "I", "II", "III", "IV"]);
    let runs = fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 5 * 2);
    assert!(stdout(&o).contains("full-sr best:"));
}
