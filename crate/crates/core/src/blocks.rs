//! Pre-norm transformer layers: attention and feed-forward branches, each
//! wrapped as `x + branch(RMSNorm(x))`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, AttentionParams, AttentionVariant, AttnOptions, NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    SwiGlu,
    /// Up-projection, GELU, down-projection.
    PlainMlp,
}

impl FfnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FfnKind::SwiGlu => "swiglu",
            FfnKind::PlainMlp => "mlp",
        }
    }

    /// Hidden width for a given model width.
    pub fn hidden_width(self, d_model: usize) -> usize {
        match self {
            FfnKind::SwiGlu => swiglu_width(d_model),
            FfnKind::PlainMlp => 4 * d_model,
        }
    }
}

impl fmt::Display for FfnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FfnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "swiglu" => Ok(FfnKind::SwiGlu),
            "mlp" | "plainmlp" => Ok(FfnKind::PlainMlp),
            other => Err(Error::config(format!("unknown feed-forward kind `{other}`"))),
        }
    }
}

/// `round(8/3 · d_model)` rounded up to a multiple of 8.
pub fn swiglu_width(d_model: usize) -> usize {
    let raw = (8.0 * d_model as f64 / 3.0).round() as usize;
    raw.div_ceil(8) * 8
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub kind: FfnKind,
    /// Gate projection; SwiGLU only.
    pub w_g: Option<ParamId>,
    pub w_1: ParamId,
    pub w_2: ParamId,
    pub d_ff: usize,
}

impl FeedForwardParams {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        kind: FfnKind,
        rng: &mut R,
    ) -> Result<Self> {
        let d_ff = kind.hidden_width(d_model);
        let up = 1.0 / (d_model as f64).sqrt();
        let down = 1.0 / (d_ff as f64).sqrt();
        let w_g = match kind {
            FfnKind::SwiGlu => Some(store.insert(format!("{prefix}.ffn.w_g"), Tensor::randn(&[d_model, d_ff], up, rng))?),
            FfnKind::PlainMlp => None,
        };
        let w_1 = store.insert(format!("{prefix}.ffn.w_1"), Tensor::randn(&[d_model, d_ff], up, rng))?;
        let w_2 = store.insert(format!("{prefix}.ffn.w_2"), Tensor::randn(&[d_ff, d_model], down, rng))?;
        Ok(FeedForwardParams { kind, w_g, w_1, w_2, d_ff })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        match self.kind {
            FfnKind::SwiGlu => swiglu(tape, vars, x, self),
            FfnKind::PlainMlp => plain_mlp(tape, vars, x, self),
        }
    }
}

/// `(swish(x·W_G) ⊙ x·W_1)·W_2`.
pub fn swiglu<T: Float>(tape: &mut Tape<T>, vars: &ParamVars, x: Var, p: &FeedForwardParams) -> Result<Var> {
    let w_g = match (p.kind, p.w_g) {
        (FfnKind::SwiGlu, Some(g)) => g,
        _ => return Err(Error::contract("swiglu called on a non-SwiGLU block")),
    };
    let gate = tape.matmul(x, vars[w_g])?;
    let gate = tape.swish(gate);
    let up = tape.matmul(x, vars[p.w_1])?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, vars[p.w_2])
}

pub fn plain_mlp<T: Float>(tape: &mut Tape<T>, vars: &ParamVars, x: Var, p: &FeedForwardParams) -> Result<Var> {
    if p.kind != FfnKind::PlainMlp {
        return Err(Error::contract("plain_mlp called on a SwiGLU block"));
    }
    let up = tape.matmul(x, vars[p.w_1])?;
    let h = tape.gelu(up);
    tape.matmul(h, vars[p.w_2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ffn: FeedForwardParams,
    pub norm1: ParamId,
    pub norm2: ParamId,
    pub layer_index: usize,
}

impl LayerParams {
    /// Registers a layer under `prefix`; `layer_index` starts at 1.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_head: usize,
        variant: AttentionVariant,
        ffn: FfnKind,
        layer_index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let norm1 = store.insert(format!("{prefix}.norm1"), Tensor::ones(&[d_model]))?;
        let attn = AttentionParams::init(store, prefix, d_model, d_head, variant, layer_index, rng)?;
        let norm2 = store.insert(format!("{prefix}.norm2"), Tensor::ones(&[d_model]))?;
        let ffn = FeedForwardParams::init(store, prefix, d_model, ffn, rng)?;
        Ok(LayerParams {
            attn,
            ffn,
            norm1,
            norm2,
            layer_index,
        })
    }

    /// `y = x + MultiHead(RMSNorm(x))`, `out = y + FFN(RMSNorm(y))`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
        mask: Option<&AttentionMask>,
        opts: &AttnOptions,
    ) -> Result<Var> {
        let y = self.attention_branch(tape, vars, x, mask, opts)?;
        let y = tape.add(x, y)?;
        let f = self.ffn_branch(tape, vars, y)?;
        tape.add(y, f)
    }

    pub fn attention_branch<T: Float>(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
        mask: Option<&AttentionMask>,
        opts: &AttnOptions,
    ) -> Result<Var> {
        let h = tape.rms_norm(x, vars[self.norm1], NORM_EPS)?;
        self.attn.multi_head(tape, vars, h, mask, opts)
    }

    pub fn ffn_branch<T: Float>(&self, tape: &mut Tape<T>, vars: &ParamVars, y: Var) -> Result<Var> {
        let h = tape.rms_norm(y, vars[self.norm2], NORM_EPS)?;
        self.ffn.forward(tape, vars, h)
    }
}

/// Applies `layers` in order.
pub fn stack_forward<T: Float>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    layers: &[LayerParams],
    mut x: Var,
    mask: Option<&AttentionMask>,
    opts: &AttnOptions,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, vars, x, mask, opts)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swiglu_widths() {
        assert_eq!(swiglu_width(64), 176);
        assert_eq!(swiglu_width(32), 88);
        assert_eq!(swiglu_width(16), 48);
        assert_eq!(swiglu_width(3), 8);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("SwiGLU".parse::<FfnKind>().unwrap(), FfnKind::SwiGlu);
        assert_eq!("mlp".parse::<FfnKind>().unwrap(), FfnKind::PlainMlp);
        assert!("moe".parse::<FfnKind>().is_err());
    }

    use crate::gradcheck::{grad_check_store, GradCheckOptions, TOLERANCE};
    use crate::rng::seeded;

    fn layer<T: Float>(variant: AttentionVariant, ffn: FfnKind) -> (ParamStore<T>, LayerParams) {
        let mut store = ParamStore::new();
        let layer = LayerParams::init(&mut store, "l0", 8, 4, variant, ffn, 2, &mut seeded(11)).unwrap();
        (store, layer)
    }

    #[test]
    fn zero_gains_give_identity() {
        let (mut store, layer) = layer::<f32>(AttentionVariant::DiffFinetune, FfnKind::SwiGlu);
        *store.get_mut(layer.norm1) = Tensor::zeros(&[8]);
        *store.get_mut(layer.norm2) = Tensor::zeros(&[8]);
        let x = Tensor::<f32>::randn(&[5, 8], 1.0, &mut seeded(3));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, &vars, xv, None, &AttnOptions::default()).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn swiglu_matches_scalar_loops() {
        let mut store = ParamStore::<f64>::new();
        let p = FeedForwardParams::init(&mut store, "f", 4, FfnKind::SwiGlu, &mut seeded(5)).unwrap();
        assert_eq!(p.d_ff, 16);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut seeded(6));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = swiglu(&mut tape, &vars, xv, &p).unwrap();
        let (wg, w1, w2) = (store.get(p.w_g.unwrap()), store.get(p.w_1), store.get(p.w_2));
        for r in 0..3 {
            let mut h = [0.0f64; 16];
            for (j, hj) in h.iter_mut().enumerate() {
                let (mut g, mut u) = (0.0, 0.0);
                for i in 0..4 {
                    g += x.get(r, i) * wg.get(i, j);
                    u += x.get(r, i) * w1.get(i, j);
                }
                *hj = g / (1.0 + (-g).exp()) * u;
            }
            for c in 0..4 {
                let expect: f64 = (0..16).map(|j| h[j] * w2.get(j, c)).sum();
                assert!((tape.value(y).get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn plain_mlp_width_and_kind_checks() {
        let mut store = ParamStore::<f32>::new();
        let p = FeedForwardParams::init(&mut store, "f", 6, FfnKind::PlainMlp, &mut seeded(5)).unwrap();
        assert_eq!(p.d_ff, 24);
        assert!(p.w_g.is_none());
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 6]));
        assert!(swiglu(&mut tape, &vars, x, &p).is_err());
    }

    fn check_layer(variant: AttentionVariant, ffn: FfnKind) {
        let (mut store, layer) = layer::<f64>(variant, ffn);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.set_trainable(id, true);
        }
        let x = Tensor::<f64>::randn(&[3, 8], 1.0, &mut seeded(8));
        let probe = Tensor::<f64>::randn(&[3, 8], 1.0, &mut seeded(9));
        let mask = AttentionMask::prefix_lm(1, 3);
        let report = grad_check_store(
            &store,
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let y = layer.forward(tape, vars, xv, Some(&mask), &AttnOptions::default())?;
                let pv = tape.constant(probe.clone());
                let prod = tape.mul(y, pv)?;
                Ok(tape.sum(prod))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(TOLERANCE), "{report:#?}");
    }

    #[test]
    fn layer_gradients_diff_finetune_swiglu() {
        check_layer(AttentionVariant::DiffFinetune, FfnKind::SwiGlu);
    }

    #[test]
    fn layer_gradients_diff_original_mlp() {
        check_layer(AttentionVariant::DiffOriginal, FfnKind::PlainMlp);
    }

    #[test]
    fn layer_gradients_vanilla() {
        check_layer(AttentionVariant::Vanilla, FfnKind::SwiGlu);
    }
}
