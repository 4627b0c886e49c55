//! Finite-difference gradient suite over a complete toy model.
//!
//! Every tensor of the model, adapters included, is made trainable and the
//! next-token cross-entropy of one fixed example is checked at f64. Adapter
//! `B` matrices are randomised first; at their zero initialisation the
//! gradient reaching `A` would vanish identically.

use std::collections::BTreeMap;

use rand::Rng;

use crate::attention::AttentionVariant;
use crate::blocks::FfnKind;
use crate::error::Result;
use crate::gradcheck::{grad_check_store, GradCheckOptions, GradCheckReport};
use crate::imaging::RgbImage;
use crate::lora::LoraConfig;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;
use crate::vlm::{ModelConfig, ToyVlm, BOS, EOS, SEP};

/// Coordinates sampled per tensor by default.
pub const DEFAULT_COORDS_PER_TENSOR: usize = 128;

/// Default suite options: a sampled coordinate subset per tensor.
pub fn default_options() -> GradCheckOptions {
    GradCheckOptions {
        max_coords: Some(DEFAULT_COORDS_PER_TENSOR),
        ..GradCheckOptions::default()
    }
}

/// `d_model` 32, two encoder and two decoder layers, four image tokens.
pub fn toy_suite_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        d_head: 16,
        n_layers_enc: 2,
        n_layers_dec: 2,
        vocab_size: 24,
        image_size: 16,
        patch_size: 8,
        max_seq_len: 16,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteCase {
    /// Largest relative error per parameter group, where a group is a
    /// tensor name with layer indices replaced by `*`.
    pub fn groups(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for e in &self.report.entries {
            let group = e
                .name
                .split('.')
                .map(|p| if p.chars().all(|c| c.is_ascii_digit()) { "*" } else { p })
                .collect::<Vec<_>>()
                .join(".");
            let slot = out.entry(group).or_insert(0.0);
            *slot = slot.max(e.max_rel_err);
        }
        out
    }
}

/// Builds the f64 model checked by the suite: adapters on every projection
/// of both stacks, random `B`, everything trainable.
pub fn suite_model(config: &ModelConfig, seed: u64) -> Result<ToyVlm<f64>> {
    let mut model = ToyVlm::<f32>::init(config.clone(), seed)?;
    let rank = (config.d_model / 8).max(1);
    let lora = LoraConfig {
        include_encoder: true,
        ..LoraConfig::with_rank(rank)
    };
    model.attach_lora(&lora, seed)?;
    let mut rng = seeded(derive_seed(seed, 7));
    let b_ids: Vec<_> = model
        .layers()
        .flat_map(|l| l.attn.lora.iter().flatten().map(|a| a.b))
        .collect();
    for id in b_ids {
        let shape = model.store.get(id).shape().to_vec();
        *model.store.get_mut(id) = Tensor::randn(&shape, 0.1, &mut rng);
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model.store.set_trainable(id, true);
    }
    Ok(model.cast())
}

/// Checks one model configuration.
pub fn check_model(name: &str, config: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<SuiteCase> {
    let model = suite_model(config, seed)?;
    let mut rng = seeded(derive_seed(seed, 8));
    let s = config.image_size;
    let pixels: Vec<f32> = (0..s * s * 3).map(|_| rng.random::<f32>()).collect();
    let patches = model.patchify(&RgbImage::new(s, s, pixels)?)?;
    let word = |rng: &mut rand_xoshiro::SplitMix64| rng.random_range(5..config.vocab_size);
    let prompt = vec![BOS, word(&mut rng), word(&mut rng), SEP];
    let answer = vec![word(&mut rng), word(&mut rng), EOS];
    let report = grad_check_store(
        &model.store,
        |tape, vars| model.loss_tape(tape, vars, &patches, &prompt, &answer),
        opts,
    )?;
    Ok(SuiteCase {
        name: name.to_string(),
        report,
    })
}

/// The standard suite: the configured variant with SwiGLU, and the
/// original differential variant with the plain MLP, so every parameter
/// group (`W_G` and both λ widths included) is covered.
pub fn gradient_suite(base: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    let primary = ModelConfig {
        ffn_kind: FfnKind::SwiGlu,
        ..base.clone()
    };
    cases.push(check_model(
        &format!("{}+{}", primary.attention_variant, primary.ffn_kind),
        &primary,
        seed,
        opts,
    )?);
    let secondary = ModelConfig {
        attention_variant: if base.attention_variant == AttentionVariant::DiffOriginal {
            AttentionVariant::DiffFinetune
        } else {
            AttentionVariant::DiffOriginal
        },
        ffn_kind: FfnKind::PlainMlp,
        ..base.clone()
    };
    cases.push(check_model(
        &format!("{}+{}", secondary.attention_variant, secondary.ffn_kind),
        &secondary,
        seed,
        opts,
    )?);
    Ok(cases)
}
