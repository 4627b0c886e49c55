use proptest::prelude::*;
use rand::Rng;

use diffattn::attention::AttentionMask;
use diffattn::gradcheck::{grad_check, grad_check_named, GradCheckOptions, TOLERANCE};
use diffattn::rng::seeded;
use diffattn::tape::OpKind;
use diffattn::{Result, Tape, Tensor, Var};

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync>;

/// Scalar `Σ w ⊙ y` so every output coordinate carries a distinct weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut seeded(seed ^ 0xabc)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// A loss exercising `op` and the random parameters it is checked at.
fn case(op: OpKind, seed: u64) -> Option<(Loss, Vec<Tensor<f64>>)> {
    let mut rng = seeded(seed);
    let m = rng.random_range(1..=4);
    let n = rng.random_range(2..=5);
    let mut randn = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng).with_grad(true);
    let a = randn(&[m, n]);
    let b = randn(&[m, n]);
    let c = randn(&[n, 3]);
    let row = randn(&[n]);
    let s = randn(&[1]);
    let f: Loss = match op {
        OpKind::Leaf => return None,
        OpKind::MatMul => Box::new(move |t, v| {
            let y = t.matmul(v[0], v[2])?;
            project(t, y, seed)
        }),
        OpKind::Transpose => Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, seed)
        }),
        OpKind::Add => Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        }),
        OpKind::Sub => Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, seed)
        }),
        OpKind::Mul => Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        }),
        OpKind::AddRow => Box::new(move |t, v| {
            let y = t.add_row(v[0], v[3])?;
            project(t, y, seed)
        }),
        OpKind::Scale => Box::new(move |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, seed)
        }),
        OpKind::AddConst => Box::new(move |t, v| {
            let y = t.add_const(v[0], 0.3);
            let y = t.mul(y, y)?;
            project(t, y, seed)
        }),
        OpKind::ScaleBy => Box::new(move |t, v| {
            let y = t.scale_by(v[0], v[4])?;
            project(t, y, seed)
        }),
        OpKind::Exp => Box::new(move |t, v| {
            let y = t.exp(v[0]);
            project(t, y, seed)
        }),
        OpKind::Dot => Box::new(move |t, v| {
            let d = t.dot(v[0], v[1])?;
            let d2 = t.mul(d, d)?;
            Ok(t.sum(d2))
        }),
        OpKind::Sum => Box::new(move |t, v| {
            let e = t.exp(v[0]);
            Ok(t.sum(e))
        }),
        OpKind::Softmax => Box::new(move |t, v| {
            let mask = AttentionMask::from_fn(m, n, |i, j| j <= i + 1);
            let y = t.softmax_rows(v[0], Some(&mask))?;
            project(t, y, seed)
        }),
        OpKind::RmsNorm => Box::new(move |t, v| {
            let y = t.rms_norm(v[0], v[3], 1e-6)?;
            project(t, y, seed)
        }),
        OpKind::Swish => Box::new(move |t, v| {
            let y = t.swish(v[0]);
            project(t, y, seed)
        }),
        OpKind::Gelu => Box::new(move |t, v| {
            let y = t.gelu(v[0]);
            project(t, y, seed)
        }),
        OpKind::SliceCols => Box::new(move |t, v| {
            let y = t.slice_cols(v[0], 1, n - 1)?;
            project(t, y, seed)
        }),
        OpKind::ConcatCols => Box::new(move |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            project(t, y, seed)
        }),
        OpKind::ConcatRows => Box::new(move |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            project(t, y, seed)
        }),
        OpKind::GatherRows => Box::new(move |t, v| {
            let ids: Vec<usize> = (0..5).map(|i| (i * 7 + seed as usize) % m).collect();
            let y = t.gather_rows(v[0], &ids)?;
            project(t, y, seed)
        }),
        OpKind::CrossEntropy => Box::new(move |t, v| {
            let targets: Vec<Option<usize>> = (0..m).map(|i| (i % 3 != 2).then_some((i + seed as usize) % n)).collect();
            t.cross_entropy(v[0], &targets)
        }),
    };
    Some((f, vec![a, b, c, row, s]))
}

#[test]
fn every_op_passes_gradcheck_on_ten_seeds() {
    for op in OpKind::ALL {
        for seed in 0..10 {
            let Some((f, params)) = case(op, seed) else { continue };
            let report = grad_check(&f, &params, 1e-3).unwrap();
            assert!(
                report.max_rel_err() < TOLERANCE,
                "{} seed {seed}: rel err {}",
                op.name(),
                report.max_rel_err()
            );
        }
    }
}

#[test]
fn corrupted_backward_rules_are_detected() {
    for op in OpKind::ALL.into_iter().filter(|&k| k != OpKind::Leaf) {
        let (f, params) = case(op, 3).unwrap();
        let names: Vec<String> = (0..params.len()).map(|i| format!("p{i}")).collect();
        let opts = GradCheckOptions {
            fault: Some(op),
            ..GradCheckOptions::default()
        };
        let report = grad_check_named(&f, &params, &names, &opts).unwrap();
        assert!(report.max_rel_err() > TOLERANCE, "fault in {} went unnoticed", op.name());
    }
}

#[test]
fn sum_of_squares_is_exact() {
    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad(true);
    let r = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        },
        &[x],
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-6);
}

#[test]
fn softmax_extremes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(&[1, 3], vec![1000.0, 1000.0, 1000.0]).unwrap());
    let y = tape.softmax_rows(x, None).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = tape.constant(Tensor::new(&[1, 2], vec![0.0, 3.0f32.ln()]).unwrap());
    let y = tape.softmax_rows(x, None).unwrap();
    assert!((tape.value(y).get(0, 0) - 0.25).abs() < 1e-6);
    assert!((tape.value(y).get(0, 1) - 0.75).abs() < 1e-6);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-2.0f32..2.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop((a, b) in (1usize..=32, 1usize..=32, 1usize..=32)
        .prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n))))
    {
        let c = a.matmul(&b).unwrap();
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut scale = 0.0f64;
        let mut err = 0.0f64;
        for i in 0..m {
            for j in 0..n {
                let o: f64 = (0..k).map(|p| a.get(i, p) as f64 * b.get(p, j) as f64).sum();
                scale = scale.max(o.abs());
                err = err.max((c.get(i, j) as f64 - o).abs());
            }
        }
        prop_assert!(err <= 1e-5 * scale.max(1.0));
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(4, 7), shift in -50.0f32..50.0) {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let y = tape.softmax_rows(xv, None).unwrap();
        let shifted = tape.constant(x.map(|v| v + shift));
        let ys = tape.softmax_rows(shifted, None).unwrap();
        for r in 0..4 {
            let total: f32 = tape.value(y).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
        prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) < 1e-6);
    }

    #[test]
    fn rms_norm_is_scale_invariant_without_eps(x in matrix(3, 6), c in 0.01f64..100.0) {
        let x = x.cast::<f64>();
        prop_assume!(x.data().iter().any(|v| v.abs() > 1e-3));
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::from_fn(&[6], |i| 0.5 + i as f64));
        let a = tape.constant(x.clone());
        let b = tape.constant(x.scale(c));
        let ya = tape.rms_norm(a, g, 0.0).unwrap();
        let yb = tape.rms_norm(b, g, 0.0).unwrap();
        prop_assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-12);
    }

    #[test]
    fn forward_ops_are_deterministic(x in matrix(5, 4), w in matrix(4, 5)) {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.gelu(h);
            let g = tape.constant(Tensor::ones(&[5]));
            let h = tape.rms_norm(h, g, 1e-6).unwrap();
            let y = tape.softmax_rows(h, Some(&AttentionMask::causal(5))).unwrap();
            tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
