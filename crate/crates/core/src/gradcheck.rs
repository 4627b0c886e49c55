//! Finite-difference gradient checking.
//!
//! The analytic gradient comes from [`Tape::backward`]; the reference is the
//! central difference `(f(x+h) - f(x-h)) / 2h` per coordinate, refined to
//! the five-point stencil where the two disagree. The relative
//! error of a coordinate is `|a - c| / max(|a|, |c|, 1e-8)`.

use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::par::Exec;
use crate::rng::{derive_seed, seeded};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step for f64 checks. Large enough that
/// round-off stays below 1e-4 relative for gradients of order 1e-7, which is
/// the scale of λ gradients behind the per-head RMSNorm.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Coordinates whose central difference disagrees by more than this are
/// re-estimated with the fourth-order five-point stencil.
const REFINE_THRESHOLD: f64 = 1e-4;
const COORD_SEED: u64 = 0x6772_6164;
/// Relative error bound used by the gradient suite.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    pub step: Option<f64>,
    pub exec: Exec,
    /// Check a fixed pseudo-random subset of at most `n` coordinates per tensor.
    pub max_coords: Option<usize>,
    pub fault: Option<OpKind>,
}

/// Checks the gradient of the scalar `f` with respect to every parameter
/// whose `requires_grad` is set. Parameters are passed to `f` as tape leaves
/// in the given order.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let names: Vec<String> = (0..params.len()).map(|i| format!("param{i}")).collect();
    grad_check_named(
        f,
        params,
        &names,
        &GradCheckOptions {
            step: Some(h),
            ..Default::default()
        },
    )
}

pub fn grad_check_named<F>(
    f: F,
    params: &[Tensor<f64>],
    names: &[String],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let h = opts.step.unwrap_or(DEFAULT_STEP);
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::contract(format!("finite-difference step {h} outside [1e-5, 1e-2]")));
    }

    let eval = |perturb: Option<(usize, usize, f64)>, backward: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        if let Some(kind) = opts.fault {
            tape.inject_fault(kind);
        }
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut leaf = p.clone();
                leaf.grad = None;
                if let Some((pi, ci, d)) = perturb {
                    if pi == i {
                        leaf.data_mut()[ci] += d;
                    }
                }
                tape.leaf(leaf)
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.value(loss).shape()
            )));
        }
        let value = tape.scalar(loss);
        let grads = if backward {
            tape.backward(loss)?;
            vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(None, true)?;
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.requires_grad)
        .flat_map(|(i, p)| {
            let numel = p.numel();
            let picked: Vec<usize> = match opts.max_coords {
                Some(m) if m < numel => {
                    let mut rng = seeded(derive_seed(COORD_SEED, i as u64));
                    let mut idx = rand::seq::index::sample(&mut rng, numel, m.max(1)).into_vec();
                    idx.sort_unstable();
                    idx
                }
                _ => (0..numel).collect(),
            };
            picked.into_iter().map(move |c| (i, c))
        })
        .collect();

    let numeric = opts.exec.map(&coords, |&(i, c)| -> Result<f64> {
        let (plus, _) = eval(Some((i, c, h)), false)?;
        let (minus, _) = eval(Some((i, c, -h)), false)?;
        let central = (plus - minus) / (2.0 * h);
        let a = analytic[i].as_ref().map_or(0.0, |g| g[c]);
        if rel_err(a, central) < REFINE_THRESHOLD {
            return Ok(central);
        }
        let (plus2, _) = eval(Some((i, c, 2.0 * h)), false)?;
        let (minus2, _) = eval(Some((i, c, -2.0 * h)), false)?;
        Ok((8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * h))
    });

    let mut entries: Vec<GradCheckEntry> = Vec::new();
    for (&(i, c), num) in coords.iter().zip(numeric) {
        let num = num?;
        let a = analytic[i].as_ref().map_or(0.0, |g| g[c]);
        let err = rel_err(a, num);
        match entries.last_mut() {
            Some(e) if e.name == names[i] => {
                e.coords += 1;
                e.max_rel_err = e.max_rel_err.max(err);
            }
            _ => entries.push(GradCheckEntry {
                name: names[i].clone(),
                coords: 1,
                max_rel_err: err,
                analytic_norm: analytic[i]
                    .as_ref()
                    .map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt()),
            }),
        }
    }
    Ok(GradCheckReport { entries })
}

/// Gradient check of `f` over the trainable tensors of a parameter store.
pub fn grad_check_store<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamVars) -> Result<Var> + Sync,
{
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    grad_check_named(
        |tape, vars| f(tape, &ParamVars::from_vars(vars.to_vec())),
        store.tensors(),
        &names,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad(true);
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
        assert_eq!(report.entries[0].coords, 2);
    }

    #[test]
    fn softmax_cross_entropy_row() {
        let x = Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap().with_grad(true);
        let report = grad_check(|tape, v| tape.cross_entropy(v[0], &[Some(1)]), &[x], 1e-4).unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_step() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad(true);
        let err = grad_check(|_, v| Ok(v[0]), std::slice::from_ref(&x), 1e-4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = grad_check(|tape, v| Ok(tape.sum(v[0])), &[x], 0.5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn detects_corrupted_backward() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap().with_grad(true);
        let opts = GradCheckOptions {
            fault: Some(OpKind::Swish),
            ..Default::default()
        };
        let report = grad_check_named(
            |tape, v| {
                let s = tape.swish(v[0]);
                Ok(tape.sum(s))
            },
            &[x],
            &["x".into()],
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err() > 0.1);
    }
}
