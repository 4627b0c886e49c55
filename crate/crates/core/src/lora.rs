//! Low-rank adapters on frozen projection weights.
//!
//! An adapter adds `(alpha / r)·A·B` to a frozen base weight `W`, with
//! `A: d_in×r` and `B: r×d_out`. `B` starts at zero, so an adapted model is
//! exactly the base model until the first optimizer step.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::LayerParams;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeightRole {
    Query = 0,
    Key = 1,
    Value = 2,
    Output = 3,
}

impl WeightRole {
    pub const ALL: [WeightRole; 4] = [WeightRole::Query, WeightRole::Key, WeightRole::Value, WeightRole::Output];

    /// Parameter-name suffix of the base weight.
    pub fn key(self) -> &'static str {
        match self {
            WeightRole::Query => "w_q",
            WeightRole::Key => "w_k",
            WeightRole::Value => "w_v",
            WeightRole::Output => "w_o",
        }
    }
}

impl fmt::Display for WeightRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for WeightRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['^', '_'], "");
        match norm.as_str() {
            "q" | "wq" | "query" => Ok(WeightRole::Query),
            "k" | "wk" | "key" => Ok(WeightRole::Key),
            "v" | "wv" | "value" => Ok(WeightRole::Value),
            "o" | "wo" | "output" => Ok(WeightRole::Output),
            _ => Err(Error::contract(format!("unknown weight role `{s}`"))),
        }
    }
}

/// Parses a comma-separated role list such as `q,k,v,o`.
pub fn parse_roles(s: &str) -> Result<BTreeSet<WeightRole>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(WeightRole::from_str)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    /// Name of the frozen base weight.
    pub target: String,
}

impl LoraAdapter {
    /// Registers `<target>.lora.a` (normal, variance 1/r) and `<target>.lora.b` (zeros).
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        target: &str,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let base = store
            .by_name(target)
            .ok_or_else(|| Error::contract(format!("no base weight `{target}`")))?;
        let (d_in, d_out) = base.matrix_dims("lora")?;
        if rank == 0 || rank > d_in.min(d_out) / 2 {
            return Err(Error::contract(format!(
                "LoRA rank {rank} must be in 1..={} for a {d_in}x{d_out} weight",
                d_in.min(d_out) / 2
            )));
        }
        let a = Tensor::randn(&[d_in, rank], (1.0 / rank as f64).sqrt(), rng).with_grad(true);
        let b = Tensor::zeros(&[rank, d_out]).with_grad(true);
        Ok(LoraAdapter {
            a: store.insert(format!("{target}.lora.a"), a)?,
            b: store.insert(format!("{target}.lora.b"), b)?,
            rank,
            alpha,
            target: target.to_string(),
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self, d_in: usize, d_out: usize) -> usize {
        self.rank * (d_in + d_out)
    }
}

/// `x·base + (alpha/r)·(x·A)·B`. The base receives a gradient only if its
/// leaf was recorded as trainable, which adapted models never do.
pub fn apply<T: Float>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    x: Var,
    base: ParamId,
    adapter: Option<&LoraAdapter>,
) -> Result<Var> {
    let y = tape.matmul(x, vars[base])?;
    let Some(ad) = adapter else { return Ok(y) };
    let xa = tape.matmul(x, vars[ad.a])?;
    let delta = tape.matmul(xa, vars[ad.b])?;
    let delta = tape.scale(delta, ad.scaling());
    tape.add(y, delta)
}

/// `base + (alpha/r)·A·B`. Merging twice adds the update twice.
pub fn merge<T: Float>(base: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, alpha: f64, rank: usize) -> Result<Tensor<T>> {
    let delta = a.matmul(b)?.scale(T::lit(alpha / rank as f64));
    base.add(&delta)
}

pub fn merge_adapter<T: Float>(store: &ParamStore<T>, adapter: &LoraAdapter) -> Result<Tensor<T>> {
    let base = store
        .by_name(&adapter.target)
        .ok_or_else(|| Error::contract(format!("no base weight `{}`", adapter.target)))?;
    merge(base, store.get(adapter.a), store.get(adapter.b), adapter.alpha, adapter.rank)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<WeightRole>,
    /// Also adapt encoder layers.
    pub include_encoder: bool,
}

impl LoraConfig {
    /// `alpha = 2·rank`, all four attention projections, decoder only.
    pub fn with_rank(rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: 2.0 * rank as f64,
            targets: WeightRole::ALL.into_iter().collect(),
            include_encoder: false,
        }
    }
}

/// Attaches an adapter to every targeted projection of every layer.
/// Returns the number of adapters created.
pub fn attach_policy<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    layers: &mut [LayerParams],
    cfg: &LoraConfig,
    rng: &mut R,
) -> Result<usize> {
    let mut created = 0;
    for layer in layers {
        for &role in &cfg.targets {
            if layer.attn.adapter(role).is_some() {
                return Err(Error::contract(format!(
                    "`{}` already has an adapter",
                    store.name(layer.attn.weight(role))
                )));
            }
            let target = store.name(layer.attn.weight(role)).to_string();
            let adapter = LoraAdapter::init(store, &target, cfg.rank, cfg.alpha, rng)?;
            layer.attn.lora[role as usize] = Some(adapter);
            created += 1;
        }
    }
    Ok(created)
}

/// Closed-form trainable count for adapters on `layers`.
pub fn adapter_param_count(layers: &[LayerParams]) -> usize {
    layers
        .iter()
        .flat_map(|l| l.attn.lora.iter().flatten().map(move |a| a.param_count(l.attn.d_model, l.attn.d_model)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn store_with_base(d_in: usize, d_out: usize) -> (ParamStore<f32>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert("w", Tensor::randn(&[d_in, d_out], 0.3, &mut seeded(2)))
            .unwrap();
        (s, id)
    }

    #[test]
    fn roles_parse() {
        let roles = parse_roles("q, W^V,o").unwrap();
        assert_eq!(roles.len(), 3);
        assert!(roles.contains(&WeightRole::Value));
        assert!(parse_roles("q,mlp").is_err());
    }

    #[test]
    fn rank_bound_enforced() {
        let (mut s, _) = store_with_base(8, 6);
        assert!(LoraAdapter::init(&mut s, "w", 4, 8.0, &mut seeded(0)).is_err());
        assert!(LoraAdapter::init(&mut s, "w", 3, 6.0, &mut seeded(0)).is_ok());
    }

    #[test]
    fn zero_b_is_exact_identity() {
        let (mut s, w) = store_with_base(8, 8);
        let ad = LoraAdapter::init(&mut s, "w", 2, 4.0, &mut seeded(0)).unwrap();
        let x = Tensor::<f32>::randn(&[3, 8], 1.0, &mut seeded(9));
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = apply(&mut tape, &vars, xv, w, Some(&ad)).unwrap();
        let direct = x.matmul(s.get(w)).unwrap();
        assert_eq!(tape.value(y).data(), direct.data());
        assert_eq!(merge_adapter(&s, &ad).unwrap().data(), s.get(w).data());
    }

    #[test]
    fn pure_adapter_path() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::zeros(&[6, 6])).unwrap();
        let ad = LoraAdapter::init(&mut s, "w", 3, 3.0, &mut seeded(0)).unwrap();
        *s.get_mut(ad.b) = Tensor::randn(&[3, 6], 1.0, &mut seeded(4));
        let x = Tensor::<f64>::randn(&[2, 6], 1.0, &mut seeded(5));
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = apply(&mut tape, &vars, xv, w, Some(&ad)).unwrap();
        let expect = x.matmul(s.get(ad.a)).unwrap().matmul(s.get(ad.b)).unwrap();
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn merging_twice_adds_twice() {
        let (mut s, w) = store_with_base(8, 8);
        let ad = LoraAdapter::init(&mut s, "w", 2, 4.0, &mut seeded(0)).unwrap();
        *s.get_mut(ad.b) = Tensor::randn(&[2, 8], 1.0, &mut seeded(3));
        let once = merge_adapter(&s, &ad).unwrap();
        let twice = merge(&once, s.get(ad.a), s.get(ad.b), ad.alpha, ad.rank).unwrap();
        let delta = once.sub(s.get(w)).unwrap();
        let expect = s.get(w).add(&delta.scale(2.0)).unwrap();
        assert!(twice.max_abs_diff(&expect) < 1e-5);
    }
}
