//! Toy vision-language model: a patch encoder whose projected outputs
//! prefix the text tokens of a decoder-only language model.
//!
//! Image positions attend to each other bidirectionally and text positions
//! are causal (prefix-LM). Encoder and decoder carry separate learned
//! absolute position tables.

mod tokenizer;

pub use tokenizer::{
    normalize, split_words, TokenKind, TokenSequence, ToyTokenizer, BOS, EOS, PAD, PROMPT_WORDS, SEP, SPECIALS, UNK,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, AttentionVariant, AttnOptions, NORM_EPS};
use crate::blocks::{stack_forward, FfnKind, LayerParams};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::lora::{self, LoraConfig};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::rng::{derive_seed, seeded};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_head: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub vocab_size: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_seq_len: usize,
    pub attention_variant: AttentionVariant,
    pub ffn_kind: FfnKind,
    /// Use `attention_variant` in the encoder; otherwise vanilla.
    pub diff_in_encoder: bool,
    /// Use `attention_variant` in the decoder; otherwise vanilla.
    pub diff_in_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_head: 16,
            n_layers_enc: 2,
            n_layers_dec: 2,
            vocab_size: 512,
            image_size: 32,
            patch_size: 8,
            max_seq_len: 64,
            attention_variant: AttentionVariant::DiffFinetune,
            ffn_kind: FfnKind::SwiGlu,
            diff_in_encoder: true,
            diff_in_decoder: true,
        }
    }
}

impl ModelConfig {
    pub fn n_image_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Longest text sequence that fits after the image tokens.
    pub fn max_text_len(&self) -> usize {
        self.max_seq_len - self.n_image_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.d_head == 0 || self.d_model % self.d_head != 0 {
            return fail(format!("d_model {} is not a multiple of d_head {}", self.d_model, self.d_head));
        }
        if self.attention_variant == AttentionVariant::DiffOriginal && self.d_head % 2 != 0 {
            return fail(format!("diff_original needs an even d_head, got {}", self.d_head));
        }
        if self.n_image_tokens() >= self.max_seq_len {
            return fail(format!(
                "{} image tokens leave no room in max_seq_len {}",
                self.n_image_tokens(),
                self.max_seq_len
            ));
        }
        if self.vocab_size <= SPECIALS.len() {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.n_layers_dec == 0 {
            return fail("the decoder needs at least one layer".into());
        }
        Ok(())
    }

    fn variant_for(&self, encoder: bool) -> AttentionVariant {
        let enabled = if encoder { self.diff_in_encoder } else { self.diff_in_decoder };
        if enabled {
            self.attention_variant
        } else {
            AttentionVariant::Vanilla
        }
    }
}

/// Parameter counts by group, in scalars.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub total: usize,
    pub trainable: usize,
    pub lora: usize,
    pub lambda: usize,
    pub head_norm: usize,
    pub layer_norm: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLambda {
    pub layer: String,
    pub lambda: f64,
    pub lambda_init: f64,
}

#[derive(Clone, Debug)]
pub struct ToyVlm<T = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub lora: Option<LoraConfig>,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub enc_pos: ParamId,
    pub enc_layers: Vec<LayerParams>,
    pub enc_norm: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub tok_embed: ParamId,
    pub dec_pos: ParamId,
    pub dec_layers: Vec<LayerParams>,
    pub dec_norm: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl<T: Float> ToyVlm<T> {
    /// Deterministic initialisation from `seed`. Every parameter starts
    /// frozen.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut seeded(derive_seed(seed, 0));
        let mut s = ParamStore::new();
        let (d, n_img) = (config.d_model, config.n_image_tokens());
        let pd = config.patch_dim();

        let patch_w = s.insert("enc.patch.w", Tensor::randn(&[pd, d], 1.0 / (pd as f64).sqrt(), rng))?;
        let patch_b = s.insert("enc.patch.b", Tensor::zeros(&[d]))?;
        let enc_pos = s.insert("enc.pos", Tensor::randn(&[n_img, d], 0.1, rng))?;
        let enc_layers = build_stack(&mut s, "enc", &config, config.n_layers_enc, true, rng)?;
        let enc_norm = s.insert("enc.norm", Tensor::ones(&[d]))?;
        let proj_w = s.insert("proj.w", Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng))?;
        let proj_b = s.insert("proj.b", Tensor::zeros(&[d]))?;
        let tok_embed = s.insert("dec.tok_embed", Tensor::randn(&[config.vocab_size, d], 1.0, rng))?;
        let dec_pos = s.insert("dec.pos", Tensor::randn(&[config.max_text_len(), d], 0.1, rng))?;
        let dec_layers = build_stack(&mut s, "dec", &config, config.n_layers_dec, false, rng)?;
        let dec_norm = s.insert("dec.norm", Tensor::ones(&[d]))?;
        let head_w = s.insert(
            "lm_head.w",
            Tensor::randn(&[d, config.vocab_size], 1.0 / (d as f64).sqrt(), rng),
        )?;
        let head_b = s.insert("lm_head.b", Tensor::zeros(&[config.vocab_size]))?;
        s.freeze_all();
        Ok(ToyVlm {
            config,
            store: s,
            lora: None,
            patch_w,
            patch_b,
            enc_pos,
            enc_layers,
            enc_norm,
            proj_w,
            proj_b,
            tok_embed,
            dec_pos,
            dec_layers,
            dec_norm,
            head_w,
            head_b,
        })
    }

    /// Same structure with parameters converted to another float type.
    pub fn cast<U: Float>(&self) -> ToyVlm<U> {
        ToyVlm {
            config: self.config.clone(),
            store: self.store.cast(),
            lora: self.lora.clone(),
            patch_w: self.patch_w,
            patch_b: self.patch_b,
            enc_pos: self.enc_pos,
            enc_layers: self.enc_layers.clone(),
            enc_norm: self.enc_norm,
            proj_w: self.proj_w,
            proj_b: self.proj_b,
            tok_embed: self.tok_embed,
            dec_pos: self.dec_pos,
            dec_layers: self.dec_layers.clone(),
            dec_norm: self.dec_norm,
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.enc_layers.iter().chain(&self.dec_layers)
    }

    /// Attaches adapters per `cfg`; returns the number created.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<usize> {
        if self.lora.is_some() {
            return Err(Error::contract("model already has adapters"));
        }
        let rng = &mut seeded(derive_seed(seed, 1));
        let mut n = lora::attach_policy(&mut self.store, &mut self.dec_layers, cfg, rng)?;
        if cfg.include_encoder {
            n += lora::attach_policy(&mut self.store, &mut self.enc_layers, cfg, rng)?;
        }
        self.lora = Some(cfg.clone());
        Ok(n)
    }

    /// Freezes everything, then unfreezes adapters, λ vectors and per-head
    /// norm gains, plus the pre-norm gains when `norm_gains` is set.
    pub fn freeze_for_finetune(&mut self, norm_gains: bool) {
        self.store.freeze_all();
        let mut ids = Vec::new();
        for layer in self.enc_layers.iter().chain(&self.dec_layers) {
            ids.extend(layer.attn.lora.iter().flatten().flat_map(|a| [a.a, a.b]));
            ids.extend(layer.attn.lambda.iter().flat_map(|l| l.ids()));
            ids.push(layer.attn.head_norm);
            if norm_gains {
                ids.extend([layer.norm1, layer.norm2]);
            }
        }
        if norm_gains {
            ids.extend([self.enc_norm, self.dec_norm]);
        }
        for id in ids {
            self.store.set_trainable(id, true);
        }
    }

    pub fn census(&self) -> Census {
        let count = |id: ParamId| self.store.get(id).numel();
        let mut c = Census {
            total: self.store.total_count(),
            trainable: self.store.trainable_count(),
            layer_norm: count(self.enc_norm) + count(self.dec_norm),
            ..Census::default()
        };
        for layer in self.layers() {
            c.lora += layer.attn.lora.iter().flatten().map(|a| count(a.a) + count(a.b)).sum::<usize>();
            c.lambda += layer.attn.lambda.iter().flat_map(|l| l.ids()).map(count).sum::<usize>();
            c.head_norm += count(layer.attn.head_norm);
            c.layer_norm += count(layer.norm1) + count(layer.norm2);
        }
        c
    }

    /// Current λ of every differential layer.
    pub fn lambda_values(&self) -> Vec<LayerLambda> {
        let stacks = [("enc", &self.enc_layers), ("dec", &self.dec_layers)];
        stacks
            .into_iter()
            .flat_map(|(name, layers)| {
                layers.iter().enumerate().filter_map(move |(i, l)| {
                    l.attn.lambda.as_ref().map(|lam| LayerLambda {
                        layer: format!("{name}.{i}"),
                        lambda: lam.value(&self.store),
                        lambda_init: lam.lambda_init,
                    })
                })
            })
            .collect()
    }

    pub fn lambda_mean(&self) -> Option<f64> {
        let v = self.lambda_values();
        (!v.is_empty()).then(|| v.iter().map(|l| l.lambda).sum::<f64>() / v.len() as f64)
    }

    /// Rows are non-overlapping patches in row-major order; each row holds a
    /// patch's pixels row-major with interleaved channels.
    pub fn patchify(&self, image: &RgbImage) -> Result<Tensor<T>> {
        let (s, p) = (self.config.image_size, self.config.patch_size);
        if image.width() != s || image.height() != s {
            return Err(Error::contract(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.width(),
                image.height()
            )));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        let side = s / p;
        let mut data = Vec::with_capacity(side * side * p * p * 3);
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    for x in 0..p {
                        data.extend(image.pixel(px * p + x, py * p + y).map(|v| T::lit(v as f64)));
                    }
                }
            }
        }
        Tensor::new(&[side * side, p * p * 3], data)
    }

    /// Linear patch embeddings before positional encoding.
    pub fn patch_embeddings(&self, tape: &mut Tape<T>, vars: &ParamVars, patches: &Tensor<T>) -> Result<Var> {
        let x = tape.constant(patches.clone());
        let e = tape.matmul(x, vars[self.patch_w])?;
        tape.add_row(e, vars[self.patch_b])
    }

    /// `n_image_tokens × d_model` image tokens in the decoder's space.
    pub fn encode_patches(&self, tape: &mut Tape<T>, vars: &ParamVars, patches: &Tensor<T>) -> Result<Var> {
        let e = self.patch_embeddings(tape, vars, patches)?;
        let x = tape.add(e, vars[self.enc_pos])?;
        let x = stack_forward(tape, vars, &self.enc_layers, x, None, &AttnOptions::default())?;
        let x = tape.rms_norm(x, vars[self.enc_norm], NORM_EPS)?;
        let x = tape.matmul(x, vars[self.proj_w])?;
        tape.add_row(x, vars[self.proj_b])
    }

    pub fn encode_image(&self, image: &RgbImage) -> Result<Tensor<T>> {
        let patches = self.patchify(image)?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let out = self.encode_patches(&mut tape, &vars, &patches)?;
        Ok(tape.value(out).clone())
    }

    /// Logits for every position of `[image tokens ∥ text]`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        patches: &Tensor<T>,
        text: &[usize],
    ) -> Result<Var> {
        let n_img = self.config.n_image_tokens();
        let total = n_img + text.len();
        if total > self.config.max_seq_len {
            return Err(Error::ContextLength {
                needed: total,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = text.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let img = self.encode_patches(tape, vars, patches)?;
        let x = if text.is_empty() {
            img
        } else {
            let tok = tape.gather_rows(vars[self.tok_embed], text)?;
            let positions: Vec<usize> = (0..text.len()).collect();
            let pos = tape.gather_rows(vars[self.dec_pos], &positions)?;
            let tok = tape.add(tok, pos)?;
            tape.concat_rows(&[img, tok])?
        };
        let mask = AttentionMask::prefix_lm(n_img, total);
        let x = stack_forward(tape, vars, &self.dec_layers, x, Some(&mask), &AttnOptions::default())?;
        let x = tape.rms_norm(x, vars[self.dec_norm], NORM_EPS)?;
        let logits = tape.matmul(x, vars[self.head_w])?;
        tape.add_row(logits, vars[self.head_b])
    }

    /// Logits `T × vocab_size`. `seq` may begin with image placeholders,
    /// whose count must match the model's image token count.
    pub fn forward(&self, image: &RgbImage, seq: &TokenSequence) -> Result<Tensor<T>> {
        let n_img = seq.image_len();
        if n_img != 0 && n_img != self.config.n_image_tokens() {
            return Err(Error::contract(format!(
                "sequence has {n_img} image positions, model produces {}",
                self.config.n_image_tokens()
            )));
        }
        let text = seq
            .text_ids()
            .ok_or_else(|| Error::contract("image positions must form a prefix"))?;
        let patches = self.patchify(image)?;
        self.forward_patches(&patches, text)
    }

    pub fn forward_patches(&self, patches: &Tensor<T>, text: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let logits = self.forward_tape(&mut tape, &vars, patches, text)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean cross-entropy of `answer` (which should end in `EOS`) given the
    /// image and `prompt`; prompt and image positions carry no loss.
    pub fn loss_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        patches: &Tensor<T>,
        prompt: &[usize],
        answer: &[usize],
    ) -> Result<Var> {
        if prompt.is_empty() || answer.is_empty() {
            return Err(Error::contract("loss needs a non-empty prompt and answer"));
        }
        let text: Vec<usize> = prompt.iter().chain(answer).copied().collect();
        // The final answer token is only a target.
        let input = &text[..text.len() - 1];
        let logits = self.forward_tape(tape, vars, patches, input)?;
        let n_img = self.config.n_image_tokens();
        let mut targets = vec![None; n_img + input.len()];
        for (k, &t) in answer.iter().enumerate() {
            targets[n_img + prompt.len() - 1 + k] = Some(t);
        }
        tape.cross_entropy(logits, &targets)
    }

    /// Greedy decoding. Ties go to the lowest token id. Stops after `EOS`
    /// (which is not returned) or `max_new` tokens.
    pub fn generate_greedy(&self, image: &RgbImage, prompt: &[usize], max_new: usize) -> Result<TokenSequence> {
        let patches = self.patchify(image)?;
        self.generate_patches(&patches, prompt, max_new)
    }

    pub fn generate_patches(&self, patches: &Tensor<T>, prompt: &[usize], max_new: usize) -> Result<TokenSequence> {
        if max_new == 0 {
            return Err(Error::contract("max_new must be at least 1"));
        }
        let mut text = prompt.to_vec();
        let mut out = TokenSequence::default();
        let n_img = self.config.n_image_tokens();
        for _ in 0..max_new {
            if !out.is_empty() && n_img + text.len() > self.config.max_seq_len {
                return Err(Error::Truncated {
                    generated: out.len(),
                    max: self.config.max_seq_len,
                });
            }
            let logits = self.forward_patches(patches, &text)?;
            let next = argmax(logits.row(logits.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            text.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the first index wins ties.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn build_stack<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    config: &ModelConfig,
    n: usize,
    encoder: bool,
    rng: &mut R,
) -> Result<Vec<LayerParams>> {
    (0..n)
        .map(|i| {
            LayerParams::init(
                store,
                &format!("{name}.{i}"),
                config.d_model,
                config.d_head,
                config.variant_for(encoder),
                config.ffn_kind,
                i + 1,
                rng,
            )
        })
        .collect()
}
