//! Scaled dot-product attention and its differential variants.
//!
//! Three kernels share the projection and head plumbing:
//!
//! * `Vanilla`: `softmax(QKᵀ/√d_head)·V`.
//! * `DiffOriginal`: each head's query and key are split into two halves of
//!   width `d = d_head/2` and the output is
//!   `(softmax(Q₁K₁ᵀ/√d) − λ·softmax(Q₂K₂ᵀ/√d))·V`.
//! * `DiffFinetune`: a single query/key set is reused for both maps,
//!   `(softmax(QKᵀ/√d_head) − λ·softmax(QKᵀ/√d_head))·V`, which is exactly
//!   `(1 − λ)` times vanilla attention.
//!
//! λ is one scalar per layer, `exp(λq₁·λk₁) − exp(λq₂·λk₂) + λ_init`, shared
//! by all heads. Every head output is RMS-normalised and scaled by
//! `1 − λ_init` before the heads are concatenated and projected by `W_O`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, LoraAdapter, WeightRole};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

/// Epsilon for every RMSNorm in the model.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Vanilla,
    DiffOriginal,
    DiffFinetune,
}

impl AttentionVariant {
    pub fn is_differential(self) -> bool {
        !matches!(self, AttentionVariant::Vanilla)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Vanilla => "vanilla",
            AttentionVariant::DiffOriginal => "diff_original",
            AttentionVariant::DiffFinetune => "diff_finetune",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" => Ok(AttentionVariant::Vanilla),
            "diff_original" | "original" => Ok(AttentionVariant::DiffOriginal),
            "diff_finetune" | "finetune" | "diff" => Ok(AttentionVariant::DiffFinetune),
            other => Err(Error::config(format!("unknown attention variant `{other}`"))),
        }
    }
}

/// Boolean attention mask; `true` means the query row may attend the key column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        AttentionMask { rows, cols, allowed }
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, n, |_, _| true)
    }

    /// Lower-triangular, diagonal included.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// The first `prefix` positions see each other bidirectionally; later
    /// positions see the whole prefix and are causal among themselves.
    pub fn prefix_lm(prefix: usize, n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j < prefix || j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// `0.8 − 0.6·exp(−0.3·(l − 1))` for layer index `l ≥ 1`.
pub fn lambda_init_schedule(layer: usize) -> Result<f64> {
    if layer < 1 {
        return Err(Error::contract("layer index must be >= 1"));
    }
    Ok(0.8 - 0.6 * (-0.3 * (layer as f64 - 1.0)).exp())
}

/// Standard deviation for λ vector initialisation. Chosen so the dot
/// products `λq·λk` have standard deviation 0.01 for any width.
pub fn lambda_vector_std(dim: usize) -> f64 {
    0.1 * (dim as f64).powf(-0.25)
}

/// The four learnable λ vectors of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaParams {
    pub q1: ParamId,
    pub k1: ParamId,
    pub q2: ParamId,
    pub k2: ParamId,
    pub lambda_init: f64,
    pub layer_index: usize,
    pub dim: usize,
}

impl LambdaParams {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        layer_index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let lambda_init = lambda_init_schedule(layer_index)?;
        let std = lambda_vector_std(dim);
        let mut vec = |name: &str, rng: &mut R| {
            store.insert(format!("{prefix}.{name}"), Tensor::randn(&[dim], std, rng))
        };
        Ok(LambdaParams {
            q1: vec("lambda_q1", rng)?,
            k1: vec("lambda_k1", rng)?,
            q2: vec("lambda_q2", rng)?,
            k2: vec("lambda_k2", rng)?,
            lambda_init,
            layer_index,
            dim,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.q1, self.k1, self.q2, self.k2]
    }

    /// λ evaluated directly from stored values, in f64.
    pub fn value<T: Float>(&self, store: &ParamStore<T>) -> f64 {
        let dot = |a: ParamId, b: ParamId| -> f64 {
            store
                .get(a)
                .data()
                .iter()
                .zip(store.get(b).data())
                .map(|(x, y)| x.as_f64() * y.as_f64())
                .sum()
        };
        dot(self.q1, self.k1).exp() - dot(self.q2, self.k2).exp() + self.lambda_init
    }
}

/// Records `exp(λq₁·λk₁) − exp(λq₂·λk₂) + λ_init` on the tape.
pub fn compute_lambda<T: Float>(tape: &mut Tape<T>, vars: &ParamVars, lam: &LambdaParams) -> Result<Var> {
    let [q1, k1, q2, k2] = lam.ids().map(|id| vars[id]);
    let dims: Vec<usize> = [q1, k1, q2, k2].iter().map(|&v| tape.value(v).numel()).collect();
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(Error::contract(format!("lambda vectors have mismatched widths {dims:?}")));
    }
    let d1 = tape.dot(q1, k1)?;
    let d2 = tape.dot(q2, k2)?;
    let e1 = tape.exp(d1);
    let e2 = tape.exp(d2);
    let diff = tape.sub(e1, e2)?;
    Ok(tape.add_const(diff, lam.lambda_init))
}

/// `softmax(q·kᵀ·scale)` with optional masking.
pub fn attention_weights<T: Float>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    scale: f64,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, scale);
    tape.softmax_rows(scaled, mask)
}

fn check_mask<T: Float>(tape: &Tape<T>, q: Var, mask: Option<&AttentionMask>) -> Result<()> {
    let n = tape.value(q).rows();
    match mask {
        Some(m) if m.rows() != n || m.cols() != n => Err(Error::contract(format!(
            "mask is {}x{} for a sequence of {n}",
            m.rows(),
            m.cols()
        ))),
        _ => Ok(()),
    }
}

pub fn vanilla_attention<T: Float>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    check_mask(tape, q, mask)?;
    let width = tape.value(q).cols();
    let w = attention_weights(tape, q, k, 1.0 / (width as f64).sqrt(), mask)?;
    tape.matmul(w, v)
}

/// Original differential attention. `q` and `k` have width `2d`; the first
/// `d` columns form the first query/key set and the last `d` the second.
pub fn diff_attention_original<T: Float>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    lambda: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    check_mask(tape, q, mask)?;
    let width = tape.value(q).cols();
    if width % 2 != 0 {
        return Err(Error::contract(format!("differential attention needs an even head width, got {width}")));
    }
    let d = width / 2;
    let scale = 1.0 / (d as f64).sqrt();
    let q1 = tape.slice_cols(q, 0, d)?;
    let q2 = tape.slice_cols(q, d, d)?;
    let k1 = tape.slice_cols(k, 0, d)?;
    let k2 = tape.slice_cols(k, d, d)?;
    let a1 = attention_weights(tape, q1, k1, scale, mask)?;
    let a2 = attention_weights(tape, q2, k2, scale, mask)?;
    let a2 = tape.scale_by(a2, lambda)?;
    let diff = tape.sub(a1, a2)?;
    tape.matmul(diff, v)
}

/// Fine-tuning differential attention: the same map is used for both terms.
pub fn diff_attention_finetune<T: Float>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    lambda: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    check_mask(tape, q, mask)?;
    let width = tape.value(q).cols();
    let a = attention_weights(tape, q, k, 1.0 / (width as f64).sqrt(), mask)?;
    let scaled = tape.scale_by(a, lambda)?;
    let diff = tape.sub(a, scaled)?;
    tape.matmul(diff, v)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttnOptions {
    /// Replaces the parameterised λ by a constant. Test hook.
    pub lambda_override: Option<f64>,
}

/// Projection weights, λ parameters and per-head norm gain of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub head_norm: ParamId,
    pub lambda: Option<LambdaParams>,
    pub lambda_init: f64,
    pub layer_index: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub n_heads: usize,
    pub variant: AttentionVariant,
    pub lora: [Option<LoraAdapter>; 4],
}

impl AttentionParams {
    /// Registers the layer's parameters under `prefix` (`<prefix>.w_q`, ...).
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_head: usize,
        variant: AttentionVariant,
        layer_index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_head == 0 || d_model % d_head != 0 {
            return Err(Error::contract(format!("d_model {d_model} is not a multiple of d_head {d_head}")));
        }
        if variant == AttentionVariant::DiffOriginal && d_head % 2 != 0 {
            return Err(Error::contract(format!("diff_original needs an even d_head, got {d_head}")));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let mut mat = |name: &str, rng: &mut R| {
            store.insert(format!("{prefix}.{name}"), Tensor::randn(&[d_model, d_model], std, rng))
        };
        let w_q = mat("w_q", rng)?;
        let w_k = mat("w_k", rng)?;
        let w_v = mat("w_v", rng)?;
        let w_o = mat("w_o", rng)?;
        let head_norm = store.insert(format!("{prefix}.head_norm"), Tensor::ones(&[d_head]))?;
        let lambda = match variant {
            AttentionVariant::Vanilla => None,
            AttentionVariant::DiffOriginal => Some(LambdaParams::init(store, prefix, d_head / 2, layer_index, rng)?),
            AttentionVariant::DiffFinetune => Some(LambdaParams::init(store, prefix, d_head, layer_index, rng)?),
        };
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            w_o,
            head_norm,
            lambda,
            lambda_init: lambda_init_schedule(layer_index)?,
            layer_index,
            d_model,
            d_head,
            n_heads: d_model / d_head,
            variant,
            lora: Default::default(),
        })
    }

    pub fn weight(&self, role: WeightRole) -> ParamId {
        match role {
            WeightRole::Query => self.w_q,
            WeightRole::Key => self.w_k,
            WeightRole::Value => self.w_v,
            WeightRole::Output => self.w_o,
        }
    }

    pub fn adapter(&self, role: WeightRole) -> Option<&LoraAdapter> {
        self.lora[role as usize].as_ref()
    }

    /// `x·W + LoRA(x)` for one of the four projections.
    pub fn project<T: Float>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var, role: WeightRole) -> Result<Var> {
        lora::apply(tape, vars, x, self.weight(role), self.adapter(role))
    }

    fn layer_lambda<T: Float>(&self, tape: &mut Tape<T>, vars: &ParamVars, opts: &AttnOptions) -> Result<Option<Var>> {
        if !self.variant.is_differential() {
            return Ok(None);
        }
        if let Some(v) = opts.lambda_override {
            return Ok(Some(tape.constant(Tensor::scalar(T::lit(v)))));
        }
        let lam = self
            .lambda
            .as_ref()
            .ok_or_else(|| Error::contract("differential layer without lambda parameters"))?;
        compute_lambda(tape, vars, lam).map(Some)
    }

    /// Raw (un-normalised) output of head `head` for projected `q`, `k`, `v`.
    fn head<T: Float>(
        &self,
        tape: &mut Tape<T>,
        qkv: (Var, Var, Var),
        head: usize,
        lambda: Option<Var>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (q, k, v) = qkv;
        let start = head * self.d_head;
        let qh = tape.slice_cols(q, start, self.d_head)?;
        let kh = tape.slice_cols(k, start, self.d_head)?;
        let vh = tape.slice_cols(v, start, self.d_head)?;
        match (self.variant, lambda) {
            (AttentionVariant::Vanilla, _) => vanilla_attention(tape, qh, kh, vh, mask),
            (AttentionVariant::DiffOriginal, Some(l)) => diff_attention_original(tape, qh, kh, vh, l, mask),
            (AttentionVariant::DiffFinetune, Some(l)) => diff_attention_finetune(tape, qh, kh, vh, l, mask),
            _ => Err(Error::contract("missing lambda for differential head")),
        }
    }

    /// Un-normalised output of a single head, `x: N×d_model → N×d_head`.
    pub fn head_output<T: Float>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
        head: usize,
        mask: Option<&AttentionMask>,
        opts: &AttnOptions,
    ) -> Result<Var> {
        if head >= self.n_heads {
            return Err(Error::contract(format!("head {head} out of range for {} heads", self.n_heads)));
        }
        let qkv = self.qkv(tape, vars, x)?;
        let lambda = self.layer_lambda(tape, vars, opts)?;
        self.head(tape, qkv, head, lambda, mask)
    }

    fn qkv<T: Float>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<(Var, Var, Var)> {
        let width = tape.value(x).cols();
        if width != self.d_model {
            return Err(Error::contract(format!("input width {width} != d_model {}", self.d_model)));
        }
        Ok((
            self.project(tape, vars, x, WeightRole::Query)?,
            self.project(tape, vars, x, WeightRole::Key)?,
            self.project(tape, vars, x, WeightRole::Value)?,
        ))
    }

    /// Per-head blocks `(1 − λ_init)·RMSNorm(head_i)`, in head order.
    pub fn normalized_heads<T: Float>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
        mask: Option<&AttentionMask>,
        opts: &AttnOptions,
    ) -> Result<Vec<Var>> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::contract(format!(
                "{} heads of width {} do not cover d_model {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        let qkv = self.qkv(tape, vars, x)?;
        let lambda = self.layer_lambda(tape, vars, opts)?;
        (0..self.n_heads)
            .map(|h| {
                let out = self.head(tape, qkv, h, lambda, mask)?;
                let normed = tape.rms_norm(out, vars[self.head_norm], NORM_EPS)?;
                Ok(tape.scale(normed, 1.0 - self.lambda_init))
            })
            .collect()
    }

    /// Multi-head attention, `N×d_model → N×d_model`.
    pub fn multi_head<T: Float>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
        mask: Option<&AttentionMask>,
        opts: &AttnOptions,
    ) -> Result<Var> {
        let heads = self.normalized_heads(tape, vars, x, mask, opts)?;
        let concat = tape.concat_cols(&heads)?;
        self.project(tape, vars, concat, WeightRole::Output)
    }
}
