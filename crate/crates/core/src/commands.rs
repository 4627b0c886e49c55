//! Subcommand implementations behind the `diffattn` binary.
//!
//! Each command returns a value the binary prints; errors carry their exit
//! code through [`Error::exit_code`]. Commands that write artifacts also
//! write one [`RunManifest`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::eval::needle::{self, ModelResponder, NeedleConfig, NeedleReport, Responder, ScriptedResponder};
use crate::eval::vqa::{self, consensus_answer, ModelAnswerer, VqaReport};
use crate::gradcheck::{GradCheckOptions, TOLERANCE};
use crate::imaging::RgbImage;
use crate::io::{atomic_write, read_input, to_jsonl};
use crate::lora::adapter_param_count;
use crate::par::Exec;
use crate::rng::derive_seed;
use crate::suite::{default_options, gradient_suite, toy_suite_config, SuiteCase};
use crate::tape::OpKind;
use crate::train::{train, StepRecord, TrainReport, TrainSample};
use crate::vlm::{ToyTokenizer, ToyVlm};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Default generation budget for evaluation answers.
pub const DEFAULT_MAX_NEW: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    /// `sha256("blob <len>\0" ++ bytes)`, hex.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    /// Digest over the sorted `(digest, path)` list.
    pub input_hash: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
}

/// Content hash of one file, in git's blob framing.
pub fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn begin(command: &str, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            input_hash: String::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
        }
    }

    /// Records the digest of an input file. Repeated paths are recorded once.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if self.inputs.iter().any(|i| i.path == path) {
            return Ok(());
        }
        let bytes = fs::read(path)?;
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            digest: blob_digest(&bytes),
        });
        Ok(())
    }

    /// Stamps the finish time and input hash, then writes atomically.
    pub fn finish(mut self, path: &Path) -> Result<Self> {
        let mut listed: Vec<String> = self
            .inputs
            .iter()
            .map(|i| format!("{} {}\n", i.digest, i.path.display()))
            .collect();
        listed.sort();
        self.input_hash = hex(&Sha256::digest(listed.concat().as_bytes()));
        self.finished_unix_ms = now_ms();
        let mut bytes = serde_json::to_vec_pretty(&self)?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)?;
        Ok(self)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    /// `key=value` overrides applied after the file.
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<FlatConfig> {
        let mut cfg = match &self.config {
            Some(p) => FlatConfig::load(p)?,
            None => FlatConfig::default(),
        };
        for o in &self.overrides {
            cfg.set_pair(o)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(d) = &self.out_dir {
            let d = d.to_str().ok_or_else(|| Error::config("output directory is not UTF-8"))?;
            cfg.set("out.dir", d)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub manifest: RunManifest,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.report.records.last().map(|r| r.loss)
    }
}

/// Words from a vocabulary source: free text, or JSON-lines whose
/// `question`, `answers` and `caption` fields are used.
fn vocab_source_texts(path: &Path) -> Result<Vec<String>> {
    let text = read_input(path)?;
    if path.extension().is_none_or(|e| e != "jsonl") {
        return Ok(vec![text]);
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Corrupt(format!("{}:{}: {e}", path.display(), i + 1)))?;
        for key in ["question", "caption"] {
            if let Some(s) = v.get(key).and_then(|x| x.as_str()) {
                out.push(s.to_string());
            }
        }
        if let Some(arr) = v.get("answers").and_then(|x| x.as_array()) {
            out.extend(arr.iter().filter_map(|x| x.as_str()).map(str::to_string));
        }
    }
    Ok(out)
}

/// Fine-tunes a fresh toy model on a VQA-format dataset, using each
/// record's consensus answer as the target. Writes `model.ckpt` after every
/// epoch, `metrics.jsonl` and `manifest.json` into the output directory.
pub fn cmd_train(args: &TrainArgs, exec: Exec) -> Result<TrainOutcome> {
    let cfg = args.resolve()?;
    let snapshot = cfg.resolved()?;
    let mut manifest = RunManifest::begin("train", snapshot.clone());
    if let Some(p) = &args.config {
        manifest.add_input(p)?;
    }
    let data_path = cfg
        .train_data()?
        .ok_or_else(|| Error::config("data.train is not set"))?;
    if !data_path.exists() {
        return Err(Error::config(format!("dataset `{}` does not exist", data_path.display())));
    }
    let seed = cfg.seed()?;
    let mut model_cfg = cfg.model_config()?;
    let lora_cfg = cfg.lora_config()?;
    let train_cfg = cfg.train_config()?;
    let vocab_sources = cfg.vocab_sources()?;
    let out_dir = cfg.out_dir()?;

    let records = vqa::load_dataset(&data_path)?;
    manifest.add_input(&data_path)?;
    let mut texts: Vec<String> = Vec::new();
    for r in &records {
        texts.push(r.question.clone());
        texts.extend(r.answers.iter().cloned());
    }
    for src in &vocab_sources {
        texts.extend(vocab_source_texts(src)?);
        manifest.add_input(src)?;
    }
    let tokenizer = ToyTokenizer::build(texts.iter().map(String::as_str), model_cfg.vocab_size);
    model_cfg.vocab_size = tokenizer.len();

    let mut model = ToyVlm::<f32>::init(model_cfg, seed)?;
    model.attach_lora(&lora_cfg, seed)?;
    model.freeze_for_finetune(train_cfg.norm_gains);

    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let image = RgbImage::load(&r.image)?;
        manifest.add_input(&r.image)?;
        let target = consensus_answer(&r.answers).unwrap_or_default();
        samples.push(TrainSample::new(
            &model,
            format!("{i}:{}", r.image.display()),
            &image,
            tokenizer.encode_prompt(&r.question),
            tokenizer.encode_answer(&target),
        )?);
    }

    fs::create_dir_all(&out_dir)?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let report = train(&mut model, &samples, &train_cfg, exec, |m, end| {
        log::info!("epoch {} done at step {}", end.epoch, end.step);
        let meta = CheckpointMeta::new(snapshot.clone(), m, &tokenizer, end.step, end.rng.clone());
        checkpoint::save(&checkpoint_path, m, &meta)
    })?;
    for s in &report.skipped {
        log::warn!("skipped `{}`: {}", s.id, s.reason);
    }
    atomic_write(&metrics_path, &to_jsonl::<StepRecord>(&report.records)?)?;
    manifest.outputs = vec![checkpoint_path.clone(), metrics_path.clone()];
    let manifest = manifest.finish(&out_dir.join(MANIFEST_FILE))?;
    Ok(TrainOutcome {
        out_dir,
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        manifest,
        report,
    })
}

/// Human-readable checkpoint summary.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let (model, meta) = checkpoint::load(path)?;
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "checkpoint {}", path.display());
    let _ = writeln!(w, "step {}", meta.step);
    let c = &model.config;
    let _ = writeln!(
        w,
        "model d_model={} d_head={} enc_layers={} dec_layers={} vocab={} image={} patch={} max_seq_len={} variant={} ffn={}",
        c.d_model,
        c.d_head,
        c.n_layers_enc,
        c.n_layers_dec,
        c.vocab_size,
        c.image_size,
        c.patch_size,
        c.max_seq_len,
        c.attention_variant,
        c.ffn_kind
    );
    let _ = writeln!(w, "tensors:");
    for id in model.store.ids() {
        let t = model.store.get(id);
        let flag = if t.requires_grad { " trainable" } else { "" };
        let _ = writeln!(w, "  {} {:?}{flag}", model.store.name(id), t.shape());
    }
    let _ = writeln!(w, "lambda:");
    for l in model.lambda_values() {
        let _ = writeln!(w, "  {} lambda={:.6} lambda_init={:.6}", l.layer, l.lambda, l.lambda_init);
    }
    let _ = writeln!(w, "adapters:");
    for layer in model.layers() {
        for a in layer.attn.lora.iter().flatten() {
            let _ = writeln!(w, "  {} rank={} alpha={}", a.target, a.rank, a.alpha);
        }
    }
    let census = model.census();
    let closed = adapter_param_count(&model.enc_layers) + adapter_param_count(&model.dec_layers);
    let _ = writeln!(
        w,
        "census total={} trainable={} lora={} lambda={} head_norm={} layer_norm={}",
        census.total, census.trainable, census.lora, census.lambda, census.head_norm, census.layer_norm
    );
    let _ = writeln!(w, "lora closed-form={closed}");
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckArgs {
    /// Model sizes come from this file when given; otherwise the toy suite
    /// configuration is used.
    pub config: Option<PathBuf>,
    pub seed: u64,
    /// Check every coordinate instead of a sampled subset per tensor.
    pub full: bool,
    pub inject_fault: Option<OpKind>,
}

#[derive(Clone, Debug)]
pub struct GradCheckSummary {
    pub cases: Vec<SuiteCase>,
    pub passed: bool,
    pub text: String,
}

pub fn cmd_gradcheck(args: &GradCheckArgs, exec: Exec) -> Result<GradCheckSummary> {
    let base = match &args.config {
        Some(p) => FlatConfig::load(p)?.model_config()?,
        None => toy_suite_config(),
    };
    let mut opts = if args.full { GradCheckOptions::default() } else { default_options() };
    opts.exec = exec;
    opts.fault = args.inject_fault;
    let cases = gradient_suite(&base, args.seed, &opts)?;
    let mut text = String::new();
    let mut passed = true;
    for case in &cases {
        let coords: usize = case.report.entries.iter().map(|e| e.coords).sum();
        let _ = writeln!(text, "case {} ({coords} coordinates)", case.name);
        for (group, err) in case.groups() {
            let ok = err < TOLERANCE;
            passed &= ok;
            let _ = writeln!(text, "  {} {group} max_rel_err={err:.3e}", if ok { "ok  " } else { "FAIL" });
        }
    }
    let _ = writeln!(text, "{}", if passed { "all gradient checks passed" } else { "gradient check FAILED" });
    Ok(GradCheckSummary { cases, passed, text })
}

#[derive(Clone, Debug)]
pub struct EvalVqaArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub limit: Option<usize>,
    pub out: PathBuf,
    pub max_new: usize,
}

pub fn cmd_eval_vqa(args: &EvalVqaArgs, exec: Exec) -> Result<VqaReport> {
    let (model, meta) = checkpoint::load(&args.model)?;
    let tokenizer = meta.tokenizer()?;
    let records = vqa::load_dataset(&args.data)?;
    let mut manifest = RunManifest::begin("eval-vqa", meta.config.clone());
    manifest.add_input(&args.model)?;
    manifest.add_input(&args.data)?;
    let answerer = ModelAnswerer {
        model: &model,
        tokenizer: &tokenizer,
        max_new: args.max_new,
    };
    let report = vqa::run_vqa_eval(&answerer, &records, args.limit, exec)?;
    for r in &report.records {
        if r.image.exists() {
            manifest.add_input(&r.image)?;
        }
    }
    atomic_write(&args.out, &to_jsonl(&report.records)?)?;
    manifest.outputs = vec![args.out.clone()];
    manifest.finish(&manifest_beside(&args.out))?;
    Ok(report)
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResponderKind {
    Model,
    Oracle,
    Inverted,
    Random,
}

impl std::str::FromStr for ResponderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(ResponderKind::Model),
            "oracle" => Ok(ResponderKind::Oracle),
            "inverted" => Ok(ResponderKind::Inverted),
            "random" => Ok(ResponderKind::Random),
            other => Err(Error::config(format!(
                "unknown responder `{other}` (expected model, oracle, inverted or random)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalNeedleArgs {
    /// Required for the model responder.
    pub model: Option<PathBuf>,
    pub manifest: PathBuf,
    pub grid: usize,
    pub samples: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub responder: ResponderKind,
    pub max_new: usize,
}

pub fn cmd_eval_needle(args: &EvalNeedleArgs, exec: Exec) -> Result<NeedleReport> {
    let pool = needle::load_manifest(&args.manifest)?;
    let loaded = match (&args.model, args.responder) {
        (Some(p), _) => Some(checkpoint::load(p)?),
        (None, ResponderKind::Model) => return Err(Error::config("--model is required for the model responder")),
        (None, _) => None,
    };
    let mut cfg = NeedleConfig {
        grid_n: args.grid,
        sample_limit: args.samples,
        seed: args.seed,
        ..NeedleConfig::default()
    };
    if let Some((m, _)) = &loaded {
        cfg.image_size = m.config.image_size;
    }
    let mut snapshot: BTreeMap<String, String> = loaded.as_ref().map(|(_, meta)| meta.config.clone()).unwrap_or_default();
    snapshot.insert("needle.grid".into(), args.grid.to_string());
    snapshot.insert("needle.samples".into(), args.samples.to_string());
    snapshot.insert("needle.seed".into(), args.seed.to_string());
    snapshot.insert("needle.responder".into(), format!("{:?}", args.responder).to_lowercase());
    let mut manifest = RunManifest::begin("eval-needle", snapshot);
    manifest.add_input(&args.manifest)?;
    if let Some(p) = &args.model {
        manifest.add_input(p)?;
    }

    let tokenizer = loaded.as_ref().map(|(_, meta)| meta.tokenizer()).transpose()?;
    let scripted;
    let model_responder;
    let responder: &dyn Responder = match (args.responder, &loaded, &tokenizer) {
        (ResponderKind::Model, Some((m, _)), Some(t)) => {
            model_responder = ModelResponder {
                model: m,
                tokenizer: t,
                max_new: args.max_new,
            };
            &model_responder
        }
        (ResponderKind::Model, ..) => unreachable!("model presence checked above"),
        (kind, ..) => {
            scripted = match kind {
                ResponderKind::Oracle => ScriptedResponder::Oracle,
                ResponderKind::Inverted => ScriptedResponder::Inverted,
                _ => ScriptedResponder::Random {
                    seed: derive_seed(args.seed, 4),
                },
            };
            &scripted
        }
    };
    let report = needle::run_needle_eval(responder, &pool, &cfg, exec)?;
    report.write(&args.out_dir)?;
    manifest.outputs = ["cells.csv", "summary.json", "samples.jsonl"]
        .iter()
        .map(|f| args.out_dir.join(f))
        .collect();
    manifest.finish(&args.out_dir.join(MANIFEST_FILE))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_digest_matches_git_framing() {
        // `git hash-object` uses the same framing with SHA-1; the empty blob
        // under SHA-256 is a fixed value.
        assert_eq!(
            blob_digest(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn responder_names_parse() {
        assert_eq!("random".parse::<ResponderKind>().unwrap(), ResponderKind::Random);
        assert!(matches!("coin".parse::<ResponderKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_path_sits_beside_output() {
        assert_eq!(manifest_beside(Path::new("/x/out.jsonl")), PathBuf::from("/x/out.jsonl.manifest.json"));
    }
}
