//! Flat `key = value` run configuration.
//!
//! Keys are dotted (`train.lr`, `model.d_model`, `attn.variant`). A bare
//! key resolves to the unique known key ending in `.<key>`, so `lr` means
//! `train.lr`. Later assignments win; `#` starts a comment. A preset
//! (`train.preset = row1` ... `row5`) supplies the variant, feed-forward,
//! learning rate, LoRA rank/alpha and weight decay of one reference
//! configuration, each overridable by an explicit key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attention::AttentionVariant;
use crate::blocks::FfnKind;
use crate::error::{Error, Result};
use crate::lora::{parse_roles, LoraConfig};
use crate::train::{LrRule, TrainConfig};
use crate::vlm::ModelConfig;

/// Every accepted key with its default; an empty default means unset.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("model.d_model", "64"),
    ("model.d_head", "16"),
    ("model.n_layers_enc", "2"),
    ("model.n_layers_dec", "2"),
    ("model.vocab_size", "512"),
    ("model.image_size", "32"),
    ("model.patch_size", "8"),
    ("model.max_seq_len", "64"),
    ("model.ffn", "swiglu"),
    ("attn.variant", "diff_finetune"),
    ("attn.diff_in_encoder", "true"),
    ("attn.diff_in_decoder", "true"),
    ("train.preset", "none"),
    ("train.batch_size", "4"),
    ("train.lr", "4e-4"),
    ("train.lr_rule", "explicit"),
    ("train.epochs", "1"),
    ("train.max_steps", "0"),
    ("train.weight_decay", "1e-9"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-8"),
    ("train.clip_norm", "1.0"),
    ("train.norm_gains", "false"),
    ("lora.rank", "32"),
    ("lora.alpha", ""),
    ("lora.targets", "q,k,v,o"),
    ("lora.include_encoder", "false"),
    ("data.train", ""),
    ("data.vocab_sources", ""),
    ("out.dir", "run"),
];

/// `(variant, ffn, lr, rank, alpha, weight_decay)` of each preset row.
const PRESETS: [(&str, &str, &str, &str, &str, &str); 5] = [
    ("vanilla", "mlp", "4e-4", "32", "64", "1e-9"),
    ("diff_finetune", "swiglu", "4e-4", "32", "64", "1e-9"),
    ("vanilla", "mlp", "2e-5", "16", "32", "1e-8"),
    ("diff_finetune", "mlp", "2e-5", "32", "64", "1e-8"),
    ("diff_original", "swiglu", "2e-5", "32", "64", "1e-8"),
];

/// Explicitly assigned keys, canonicalised.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
    /// Directory that relative paths in values resolve against.
    base_dir: Option<PathBuf>,
}

fn canonical_key(key: &str) -> Result<&'static str> {
    let key = key.trim();
    if let Some((k, _)) = KEYS.iter().find(|(k, _)| *k == key) {
        return Ok(k);
    }
    let suffix = format!(".{key}");
    let hits: Vec<&'static str> = KEYS.iter().map(|(k, _)| *k).filter(|k| k.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(Error::config(format!("unknown config key `{key}`"))),
        many => Err(Error::config(format!("ambiguous config key `{key}` (matches {})", many.join(", ")))),
    }
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FlatConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&crate::io::read_input(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = canonical_key(key)?;
        self.entries.insert(k.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{pair}` is not `key=value`")))?;
        self.set(k, v)
    }

    fn preset_value(&self, key: &str) -> Result<Option<&'static str>> {
        let name = self.entries.get("train.preset").map_or("none", String::as_str);
        if name == "none" {
            return Ok(None);
        }
        let row = name
            .strip_prefix("row")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| (1..=PRESETS.len()).contains(n))
            .ok_or_else(|| Error::config(format!("train.preset: unknown preset `{name}` (expected none or row1..row5)")))?;
        let p = PRESETS[row - 1];
        Ok(match key {
            "attn.variant" => Some(p.0),
            "model.ffn" => Some(p.1),
            "train.lr" => Some(p.2),
            "lora.rank" => Some(p.3),
            "lora.alpha" => Some(p.4),
            "train.weight_decay" => Some(p.5),
            _ => None,
        })
    }

    /// Value after explicit assignment, then preset, then default.
    pub fn get(&self, key: &str) -> Result<String> {
        let k = canonical_key(key)?;
        if let Some(v) = self.entries.get(k) {
            return Ok(v.clone());
        }
        if let Some(v) = self.preset_value(k)? {
            return Ok(v.to_string());
        }
        Ok(KEYS.iter().find(|(d, _)| *d == k).map(|(_, v)| v.to_string()).unwrap_or_default())
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn snapshot(&self) -> Result<String> {
        let mut out = String::new();
        for (k, _) in KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k)?));
        }
        Ok(out)
    }

    pub fn resolved(&self) -> Result<BTreeMap<String, String>> {
        KEYS.iter().map(|(k, _)| Ok((k.to_string(), self.get(k)?))).collect()
    }

    fn parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|e| Error::config(format!("{key}: cannot parse `{raw}`: {e}")))
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let raw = self.get(key)?;
        if raw.is_empty() {
            return Ok(None);
        }
        let p = PathBuf::from(raw);
        Ok(Some(match &self.base_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p,
        }))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.parsed("model.d_model")?,
            d_head: self.parsed("model.d_head")?,
            n_layers_enc: self.parsed("model.n_layers_enc")?,
            n_layers_dec: self.parsed("model.n_layers_dec")?,
            vocab_size: self.parsed("model.vocab_size")?,
            image_size: self.parsed("model.image_size")?,
            patch_size: self.parsed("model.patch_size")?,
            max_seq_len: self.parsed("model.max_seq_len")?,
            attention_variant: self.parsed::<AttentionVariant>("attn.variant")?,
            ffn_kind: self.parsed::<FfnKind>("model.ffn")?,
            diff_in_encoder: self.parsed("attn.diff_in_encoder")?,
            diff_in_decoder: self.parsed("attn.diff_in_decoder")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lora_config(&self) -> Result<LoraConfig> {
        let rank: usize = self.parsed("lora.rank")?;
        let alpha_raw = self.get("lora.alpha")?;
        let alpha = if alpha_raw.is_empty() {
            2.0 * rank as f64
        } else {
            self.parsed("lora.alpha")?
        };
        let targets = parse_roles(&self.get("lora.targets")?)
            .map_err(|e| Error::config(format!("lora.targets: {e}")))?;
        Ok(LoraConfig {
            rank,
            alpha,
            targets,
            include_encoder: self.parsed("lora.include_encoder")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let max_steps: usize = self.parsed("train.max_steps")?;
        let clip: f64 = self.parsed("train.clip_norm")?;
        let cfg = TrainConfig {
            batch_size: self.parsed("train.batch_size")?,
            lr: self.parsed("train.lr")?,
            lr_rule: self.parsed::<LrRule>("train.lr_rule")?,
            epochs: self.parsed("train.epochs")?,
            max_steps: (max_steps > 0).then_some(max_steps),
            seed: self.seed()?,
            weight_decay: self.parsed("train.weight_decay")?,
            betas: (self.parsed("train.beta1")?, self.parsed("train.beta2")?),
            eps: self.parsed("train.eps")?,
            clip_norm: (clip > 0.0).then_some(clip),
            norm_gains: self.parsed("train.norm_gains")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_data(&self) -> Result<Option<PathBuf>> {
        self.path("data.train")
    }

    pub fn vocab_sources(&self) -> Result<Vec<PathBuf>> {
        let raw = self.get("data.vocab_sources")?;
        Ok(raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match &self.base_dir {
                Some(d) if Path::new(s).is_relative() => d.join(s),
                _ => PathBuf::from(s),
            })
            .collect())
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Ok(self.path("out.dir")?.unwrap_or_else(|| PathBuf::from("run")))
    }
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_aliases_and_comments() {
        let cfg = FlatConfig::parse("# header\ntrain.lr = 1e-3  # trailing\n\nrank=8\n").unwrap();
        assert_eq!(cfg.get("lr").unwrap(), "1e-3");
        assert_eq!(cfg.get("lora.rank").unwrap(), "8");
        assert_eq!(cfg.lora_config().unwrap().alpha, 16.0);
        assert_eq!(cfg.get("model.d_model").unwrap(), "64");
    }

    #[test]
    fn unknown_and_malformed_keys_name_the_key() {
        let err = FlatConfig::parse("train.lrr = 1").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("train.lrr")));
        let cfg = FlatConfig::parse("lr = fast").unwrap();
        let err = cfg.train_config().unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("train.lr")));
        assert!(FlatConfig::parse("just words").is_err());
    }

    #[test]
    fn ambiguous_suffix_rejected() {
        // `d_model` is unique, `beta` is not a suffix of anything.
        assert!(FlatConfig::parse("d_model = 32").is_ok());
        assert!(FlatConfig::parse("beta = 1").is_err());
    }

    #[test]
    fn presets_fill_unset_keys_only() {
        let cfg = FlatConfig::parse("preset = row5\nlr = 1e-3").unwrap();
        assert_eq!(cfg.model_config().unwrap().attention_variant, AttentionVariant::DiffOriginal);
        assert_eq!(cfg.train_config().unwrap().lr, 1e-3);
        assert_eq!(cfg.get("weight_decay").unwrap(), "1e-8");
        let row3 = FlatConfig::parse("preset = row3").unwrap();
        let lora = row3.lora_config().unwrap();
        assert_eq!((lora.rank, lora.alpha), (16, 32.0));
        assert!(FlatConfig::parse("preset = row9").unwrap().get("lr").is_err());
    }

    #[test]
    fn snapshot_is_stable_and_complete() {
        let mut a = FlatConfig::parse("lr = 0.001\nseed = 3").unwrap();
        let mut b = FlatConfig::parse("seed = 3\nlr = 0.001").unwrap();
        a.set_pair("lr=0").unwrap();
        b.set_pair("train.lr=0").unwrap();
        assert_eq!(a.snapshot().unwrap(), b.snapshot().unwrap());
        assert!(a.snapshot().unwrap().contains("train.lr = 0\n"));
        assert_eq!(a.snapshot().unwrap().lines().count(), KEYS.len());
    }

    #[test]
    fn defaults_match_documented_values() {
        let cfg = FlatConfig::default();
        let t = cfg.train_config().unwrap();
        assert_eq!((t.batch_size, t.lr, t.weight_decay), (4, 4e-4, 1e-9));
        assert_eq!(t.betas, (0.9, 0.999));
        let l = cfg.lora_config().unwrap();
        assert_eq!((l.rank, l.alpha, l.targets.len()), (32, 64.0, 4));
    }
}
