mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn diffattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffattn"))
        .args(args)
        .env("DIFFATTN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(samples: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = common::write_vqa_dataset(dir.path(), samples);
        let config = common::write_train_config(dir.path(), &data, "");
        Workspace { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec!["train", self.config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        diffattn(&args)
    }
}

fn manifest_config(dir: &Path) -> serde_json::Value {
    let bytes = std::fs::read(dir.join("manifest.json")).unwrap();
    serde_json::from_slice::<serde_json::Value>(&bytes).unwrap()["config"].clone()
}

#[test]
fn missing_dataset_is_a_config_error() {
    let ws = Workspace::new(1);
    let o = ws.train(&ws.out("run"), &["--set", "data.train=nowhere/data.jsonl"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere/data.jsonl"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_named() {
    let ws = Workspace::new(1);
    let o = ws.train(&ws.out("run"), &["--set", "foo=1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`foo`"), "{}", stderr(&o));
}

#[test]
fn toy_run_writes_checkpoint_and_manifest() {
    let ws = Workspace::new(1);
    let out = ws.out("run");
    let o = ws.train(&out, &["--set", "max_steps=50", "--set", "batch_size=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("trained 50 steps"), "{}", stdout(&o));
    assert!(out.join("model.ckpt").is_file());
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 50);
    let cfg = manifest_config(&out);
    assert_eq!(cfg["train.max_steps"], "50");
    assert_eq!(cfg["train.batch_size"], "1");
}

#[test]
fn zero_learning_rate_is_recorded() {
    let ws = Workspace::new(2);
    let out = ws.out("run");
    let o = ws.train(&out, &["--set", "lr=0", "--set", "max_steps=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(manifest_config(&out)["train.lr"], "0");
}

#[test]
fn divergence_exits_with_numeric_code() {
    let ws = Workspace::new(2);
    let o = ws.train(&ws.out("run"), &["--set", "lr=1e30", "--set", "clip_norm=0"]);
    assert_eq!(code(&o), 3, "{}\n{}", stdout(&o), stderr(&o));
}

#[test]
fn inspect_reports_lambda_and_census() {
    let ws = Workspace::new(1);
    let out = ws.out("run");
    assert_eq!(code(&ws.train(&out, &["--set", "max_steps=1", "--set", "lr=0"])), 0);
    let o = diffattn(&["inspect", out.join("model.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let mut layers = 0;
    for line in text.lines().filter(|l| l.contains(" lambda_init=")) {
        let field = |name: &str| -> f64 {
            let tail = line.split(&format!(" {name}=")).nth(1).unwrap();
            tail.split_whitespace().next().unwrap().parse().unwrap()
        };
        assert!((field("lambda") - field("lambda_init")).abs() <= 0.1, "{line}");
        layers += 1;
    }
    assert_eq!(layers, 3);
    let value = |prefix: &str, key: &str| -> usize {
        let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
        line.split_whitespace()
            .find_map(|w| w.strip_prefix(&format!("{key}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(value("census", "lora"), value("lora closed-form", "closed-form"));
    assert_eq!(value("census", "lora"), 4 * 4 * (32 + 32) * 2);
    assert!(text.contains("rank=4"));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ws = Workspace::new(1);
    let out = ws.out("run");
    assert_eq!(code(&ws.train(&out, &["--set", "max_steps=1"])), 0);
    let ckpt = out.join("model.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 3]).unwrap();
    assert_eq!(code(&diffattn(&["inspect", ckpt.to_str().unwrap()])), 4);
    let missing = ws.out("absent.ckpt");
    assert_eq!(code(&diffattn(&["inspect", missing.to_str().unwrap()])), 2);
}

fn small_gradcheck_config(dir: &Path) -> PathBuf {
    let path = dir.join("gc.cfg");
    std::fs::write(
        &path,
        "model.d_model = 16\nmodel.d_head = 8\nmodel.n_layers_enc = 1\nmodel.n_layers_dec = 1\n\
         model.vocab_size = 12\nmodel.image_size = 8\nmodel.patch_size = 4\nmodel.max_seq_len = 12\n",
    )
    .unwrap();
    path
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_gradcheck_config(dir.path());
    let o = diffattn(&["gradcheck", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("lambda_q1") && text.contains("lambda_k2"), "{text}");
    assert!(text.contains("all gradient checks passed"));

    let o = diffattn(&["gradcheck", cfg.to_str().unwrap(), "--inject-fault", "swish"]);
    assert_ne!(code(&o), 0);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn eval_vqa_prints_two_decimals() {
    let ws = Workspace::new(3);
    let out = ws.out("run");
    assert_eq!(code(&ws.train(&out, &["--set", "max_steps=1"])), 0);
    let results = ws.out("vqa.jsonl");
    let o = diffattn(&[
        "eval-vqa",
        "--model",
        out.join("model.ckpt").to_str().unwrap(),
        "--data",
        ws.out("data.jsonl").to_str().unwrap(),
        "--out",
        results.to_str().unwrap(),
        "--max-new",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    let line = line.trim();
    let (int, frac) = line.split_once('.').unwrap();
    assert!(int.parse::<u32>().unwrap() <= 100 && frac.len() == 2, "{line}");
    assert_eq!(std::fs::read_to_string(&results).unwrap().lines().count(), 3);
    assert!(ws.out("vqa.jsonl.manifest.json").is_file());
}

#[test]
fn eval_needle_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_needle_pool(dir.path(), 6, 12);
    let out = dir.path().join("needle");
    let o = diffattn(&[
        "eval-needle",
        "--manifest",
        manifest.to_str().unwrap(),
        "--responder",
        "oracle",
        "--samples",
        "40",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("index accuracy 100.00%"));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["index_accuracy"], 1.0);
    assert!(out.join("cells.csv").is_file());
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn eval_needle_with_a_trained_model() {
    let ws = Workspace::new(1);
    let run = ws.out("run");
    assert_eq!(code(&ws.train(&run, &["--set", "max_steps=1"])), 0);
    let manifest = common::write_needle_pool(ws.dir.path(), 4, 10);
    let out = ws.out("needle");
    let o = diffattn(&[
        "eval-needle",
        "--model",
        run.join("model.ckpt").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--samples",
        "3",
        "--max-new",
        "2",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("samples.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn bad_responder_and_missing_model_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_needle_pool(dir.path(), 4, 8);
    let out = dir.path().join("n");
    let base = ["eval-needle", "--manifest", manifest.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    let mut bad = base.to_vec();
    bad.extend(["--responder", "psychic"]);
    assert_eq!(code(&diffattn(&bad)), 2);
    assert_eq!(code(&diffattn(&base)), 2);
}
