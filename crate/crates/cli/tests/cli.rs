use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "backbone": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "patch_len": 8, "stride": 8, "max_t": 64},
  "pretrain": {"corpus": {"n_series": 2, "channels": 2, "length": 128}, "epochs": 1},
  "data": {"source": {"kind": "channel-mix", "n_samples": 100, "length": 32}, "seed": 3},
  "task": {"kind": "classify", "labels": 1, "channels": 2},
  "strategy": {"kind": "gen-p", "k": 2},
  "train": {"epochs": 2}
}"#;

fn tsft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsft")).args(args).env_remove("TSFT_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tsft(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, CONFIG).unwrap();
    let cfg = p(&cfg).to_string();
    (dir, cfg)
}

fn single_error_line(out: &Output) -> String {
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

#[test]
fn finetune_without_backbone_is_a_usage_error() {
    let (dir, cfg) = setup();
    let out = tsft(&["finetune", "--config", &cfg, "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn eval_reproduces_training_metrics_bit_for_bit() {
    let (dir, cfg) = setup();
    let (bb, run) = (dir.path().join("bb"), dir.path().join("run"));
    ok(&["pretrain", "--config", &cfg, "--out", p(&bb)]);
    ok(&["finetune", "--backbone", p(&bb), "--config", &cfg, "--strategy", "lora", "--seed", "4", "--out", p(&run)]);
    let recorded = json(&run.join("metrics.json"));
    let hash = recorded["config_hash"].as_str().unwrap().to_string();
    for split in ["test", "val", "train"] {
        let got: Value = serde_json::from_str(&ok(&["eval", "--run", p(&run), "--split", split])).unwrap();
        assert_eq!(got["metrics"], recorded["splits"][split], "{split}");
        assert_eq!(got["config_hash"], hash.as_str());
    }
    assert_eq!(json(&run.join("train_log.json"))["config_hash"], hash.as_str());
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["meta"]["config_hash"], hash.as_str());
    assert_eq!(manifest["meta"]["strategy"]["kind"], "lora");
    assert!(manifest["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .all(|t| !t["name"].as_str().unwrap().starts_with("backbone.")));
    assert!(json(&bb.join("manifest.json"))["meta"]["config_hash"].is_string());

    // A rerun into a fresh directory gives the same artifacts.
    let again = dir.path().join("again");
    ok(&["finetune", "--backbone", p(&bb), "--config", &cfg, "--strategy", "lora", "--seed", "4", "--out", p(&again)]);
    for f in ["manifest.json", "weights.bin", "metrics.json", "train_log.json", "config.json"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_refuses_a_different_backbone() {
    let (dir, cfg) = setup();
    let (bb, run) = (dir.path().join("bb"), dir.path().join("run"));
    ok(&["pretrain", "--config", &cfg, "--out", p(&bb)]);
    ok(&["finetune", "--backbone", p(&bb), "--config", &cfg, "--strategy", "linear", "--out", p(&run)]);
    let other_cfg = dir.path().join("other.json");
    fs::write(&other_cfg, CONFIG.replace("\"epochs\": 1", "\"epochs\": 1, \"seed\": 9")).unwrap();
    let other = dir.path().join("other");
    ok(&["pretrain", "--config", p(&other_cfg), "--out", p(&other)]);
    let out = tsft(&["eval", "--run", p(&run), "--backbone", p(&other)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(single_error_line(&out).contains("sha256"));
}

#[test]
fn bench_emits_one_row_per_cell() {
    let (dir, cfg) = setup();
    let out = dir.path().join("bench");
    ok(&["bench", "--config", &cfg, "--strategies", "linear,ptuning,lora", "--seeds", "3", "--out", p(&out)]);
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "strategy,seed,trainable_params,runtime_seconds,accuracy,auprc,auroc,f1_macro,val_loss"
    );
    assert_eq!(lines.count(), 9);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["strategies"].as_object().unwrap().len(), 3);
    assert_eq!(summary["strategies"]["linear"]["auroc"]["n"], 3);
    assert_eq!(summary["config_hash"], json(&out.join("bench.json"))["config_hash"]);
    assert!(out.join("backbone/manifest.json").exists());
}

#[test]
fn failed_commands_leave_no_partial_output() {
    let (dir, _) = setup();
    // The backbone is pretrained into the output before data generation fails.
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        CONFIG
            .replace("\"length\": 32}", "\"length\": 32, \"channels\": 1}")
            .replace("\"channels\": 2}", "\"channels\": 1}"),
    )
    .unwrap();
    let out_dir = dir.path().join("bench");
    let out = tsft(&["bench", "--config", p(&bad), "--strategies", "linear", "--seeds", "1", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    single_error_line(&out);
    assert!(!out_dir.exists());

    let typo = dir.path().join("typo.json");
    fs::write(&typo, CONFIG.replace("\"epochs\": 2", "\"epoch\": 2")).unwrap();
    let out = tsft(&["pretrain", "--config", p(&typo), "--out", p(&dir.path().join("bb"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(single_error_line(&out).contains("epoch"));
    assert!(!dir.path().join("bb").exists());
}

#[test]
fn outputs_are_never_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    ok(&["synth", "--kind", "channel-mix", "--samples", "4", "--length", "8", "--out", p(&csv)]);
    let before = fs::read(&csv).unwrap();
    let out = tsft(&["synth", "--kind", "channel-mix", "--samples", "5", "--out", p(&csv)]);
    assert_eq!(out.status.code(), Some(1));
    single_error_line(&out);
    assert_eq!(fs::read(&csv).unwrap(), before);
}

#[test]
fn synthesized_csv_feeds_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("mix.csv");
    let schema =
        ok(&["synth", "--kind", "channel-mix", "--samples", "30", "--length", "16", "--seed", "2", "--out", p(&csv)]);
    let cfg = dir.path().join("c.json");
    let text = CONFIG.replace(
        r#"{"kind": "channel-mix", "n_samples": 100, "length": 32}"#,
        &format!(r#"{{"kind": "csv", "path": "mix.csv", "schema": {}}}"#, schema.trim()),
    );
    fs::write(&cfg, text).unwrap();
    let (bb, run) = (dir.path().join("bb"), dir.path().join("run"));
    ok(&["pretrain", "--config", p(&cfg), "--out", p(&bb)]);
    ok(&["finetune", "--backbone", p(&bb), "--config", p(&cfg), "--strategy", "linear", "--out", p(&run)]);
    let stored = json(&run.join("config.json"));
    assert!(Path::new(stored["data"]["source"]["path"].as_str().unwrap()).is_absolute());
}

#[test]
fn seed_override_changes_the_config_hash() {
    let (dir, cfg) = setup();
    let run = |seed: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tsft"));
        cmd.args(["pretrain", "--config", &cfg, "--out", p(&out)]).env_remove("TSFT_SEED");
        if let Some(s) = seed {
            cmd.env("TSFT_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        json(&out.join("manifest.json"))["meta"]["config_hash"].clone()
    };
    assert_ne!(run(None, "a"), run(Some("11"), "b"));
    assert_eq!(run(None, "a2"), run(None, "c"));
}

#[test]
fn gradcheck_passes_on_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"data": {"source": {"kind": "channel-mix"}}, "task": {"kind": "classify", "labels": 1, "channels": 2}}"#,
    )
    .unwrap();
    let report = ok(&["gradcheck", "--config", p(&cfg), "--draws", "2"]);
    assert_eq!(report.lines().filter(|l| l.starts_with("PASS")).count(), 8, "{report}");
    assert!(!report.contains("FAIL"));
}
