//! Adam fine-tuning of the trainable subset of a [`ToyVlm`].
//!
//! Each optimizer step averages per-sample gradients over a mini-batch.
//! Per-sample gradients may be computed in parallel; they are summed in
//! sample order, so a run is bit-reproducible for a fixed seed.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::par::Exec;
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vlm::ToyVlm;

/// `lr = LR_CONSTANT × batch_size` under [`LrRule::ConstantTimesBatch`].
pub const LR_CONSTANT: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRule {
    Explicit,
    ConstantTimesBatch,
}

impl fmt::Display for LrRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrRule::Explicit => "explicit",
            LrRule::ConstantTimesBatch => "constant_times_batch",
        })
    }
}

impl FromStr for LrRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "explicit" => Ok(LrRule::Explicit),
            "constant_times_batch" | "scaled" => Ok(LrRule::ConstantTimesBatch),
            other => Err(Error::config(format!("unknown lr rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_rule: LrRule,
    pub epochs: usize,
    /// When set, epochs repeat until this many steps have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Also train the pre-norm and final norm gains.
    pub norm_gains: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 4e-4,
            lr_rule: LrRule::Explicit,
            epochs: 1,
            max_steps: None,
            seed: 0,
            weight_decay: 1e-9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            clip_norm: Some(1.0),
            norm_gains: false,
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        match self.lr_rule {
            LrRule::Explicit => self.lr,
            LrRule::ConstantTimesBatch => LR_CONSTANT * self.batch_size as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("train.epochs must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("train.lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("train.eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// One Adam update at step `t ≥ 1`. Decay is a multiplicative shrink
/// `p ← p·(1 − lr·wd)` applied before the bias-corrected Adam step.
pub fn adam_step(param: &mut [f32], grad: &[f32], m: &mut [f64], v: &mut [f64], t: u64, hp: &AdamParams) {
    debug_assert!(t >= 1);
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let shrink = 1.0 - hp.lr * hp.weight_decay;
    for i in 0..param.len() {
        let g = grad[i] as f64;
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let update = hp.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
        param[i] = (param[i] as f64 * shrink - update) as f32;
    }
}

/// Adam state for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub params: AdamParams,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, ids: Vec<ParamId>, params: AdamParams) -> Self {
        let zeros: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            ids,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            params,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter id.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), self.ids.len())));
        }
        for (&id, g) in self.ids.iter().zip(grads) {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` is {} at element {pos}",
                    store.name(id),
                    g[pos]
                )));
            }
        }
        self.t += 1;
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            adam_step(p, &grads[k], &mut self.m[k], &mut self.v[k], self.t, &self.params);
        }
        Ok(())
    }
}

/// A prepared training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub patches: Tensor<f32>,
    /// `BOS question SEP`.
    pub prompt: Vec<usize>,
    /// `answer EOS`.
    pub answer: Vec<usize>,
}

impl TrainSample {
    /// Resizes `image` to the model resolution and patchifies it.
    pub fn new(model: &ToyVlm<f32>, id: impl Into<String>, image: &RgbImage, prompt: Vec<usize>, answer: Vec<usize>) -> Result<Self> {
        let s = model.config.image_size;
        let resized = image.resize_bilinear(s, s)?.clamp_unit();
        Ok(TrainSample {
            id: id.into(),
            patches: model.patchify(&resized)?,
            prompt,
            answer,
        })
    }

    /// Sequence length seen by the decoder, image tokens included.
    pub fn context_len(&self, model: &ToyVlm<f32>) -> usize {
        model.config.n_image_tokens() + self.prompt.len() + self.answer.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub lambda_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct EpochEnd {
    pub epoch: usize,
    pub step: u64,
    pub rng: SplitMix64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub skipped: Vec<SkippedSample>,
    pub steps: u64,
    pub rng: SplitMix64,
}

/// Loss and trainable-parameter gradients for one sample.
pub fn sample_gradients(model: &ToyVlm<f32>, sample: &TrainSample, ids: &[ParamId]) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape);
    let loss = model.loss_tape(&mut tape, &vars, &sample.patches, &sample.prompt, &sample.answer)?;
    let value = tape.scalar(loss) as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value} on sample `{}`", sample.id)));
    }
    tape.backward(loss)?;
    let grads = ids
        .iter()
        .map(|&id| {
            tape.grad(vars[id])
                .map_or_else(|| vec![0.0; model.store.get(id).numel()], <[f32]>::to_vec)
        })
        .collect();
    Ok((value, grads))
}

/// Runs the optimizer over `data`. Samples that overflow the context are
/// skipped and reported. `on_epoch` runs after every completed epoch.
pub fn train(
    model: &mut ToyVlm<f32>,
    data: &[TrainSample],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&ToyVlm<f32>, &EpochEnd) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let ids = model.store.trainable_ids();
    if ids.is_empty() {
        return Err(Error::contract("model has no trainable parameters"));
    }
    let mut skipped = Vec::new();
    let mut usable: Vec<usize> = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let needed = s.context_len(model);
        if needed > model.config.max_seq_len {
            let reason = Error::ContextLength {
                needed,
                max: model.config.max_seq_len,
            }
            .to_string();
            log::warn!("skipping sample `{}`: {reason}", s.id);
            skipped.push(SkippedSample { id: s.id.clone(), reason });
        } else {
            usable.push(i);
        }
    }
    if usable.is_empty() {
        return Err(Error::contract("no usable training samples"));
    }

    let lr = cfg.effective_lr();
    let mut adam = Adam::new(
        &model.store,
        ids.clone(),
        AdamParams {
            lr,
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
    );
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let mut records = Vec::new();
    let limit = cfg.max_steps.map(|m| m as u64);
    let mut epoch = 0;
    loop {
        let done = match limit {
            Some(m) => adam.steps() >= m,
            None => epoch >= cfg.epochs,
        };
        if done {
            break;
        }
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if limit.is_some_and(|m| adam.steps() >= m) {
                break;
            }
            let results = exec.map(batch, |&i| sample_gradients(model, &data[i], &ids));
            let mut loss_sum = 0.0;
            let mut sum: Vec<Vec<f32>> = ids.iter().map(|&id| vec![0.0; model.store.get(id).numel()]).collect();
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                for (acc, g) in sum.iter_mut().zip(&grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in sum.iter_mut().flatten() {
                *g *= inv;
            }
            if let Some(clip) = cfg.clip_norm {
                clip_global_norm(&mut sum, clip);
            }
            adam.step(&mut model.store, &sum)?;
            records.push(StepRecord {
                step: adam.steps(),
                loss: loss_sum / batch.len() as f64,
                lr,
                lambda_mean: model.lambda_mean(),
            });
        }
        epoch += 1;
        on_epoch(
            model,
            &EpochEnd {
                epoch,
                step: adam.steps(),
                rng: rng.clone(),
            },
        )?;
    }
    Ok(TrainReport {
        records,
        skipped,
        steps: adam.steps(),
        rng,
    })
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}
