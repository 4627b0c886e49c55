use proptest::prelude::*;

use diffattn::attention::{
    diff_attention_finetune, diff_attention_original, lambda_init_schedule, vanilla_attention, AttentionMask,
    AttentionParams, AttentionVariant, AttnOptions,
};
use diffattn::rng::seeded;
use diffattn::{ParamStore, Tape, Tensor};

fn layer(variant: AttentionVariant, d_model: usize, d_head: usize, seed: u64) -> (ParamStore<f64>, AttentionParams) {
    let mut store = ParamStore::new();
    let attn = AttentionParams::init(&mut store, "l", d_model, d_head, variant, 2, &mut seeded(seed)).unwrap();
    (store, attn)
}

fn run_multi_head(store: &ParamStore<f64>, attn: &AttentionParams, x: &Tensor<f64>, mask: &AttentionMask, lambda: Option<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let opts = AttnOptions { lambda_override: lambda };
    let y = attn.multi_head(&mut tape, &vars, xv, Some(mask), &opts).unwrap();
    tape.value(y).clone()
}

#[test]
fn schedule_rises_towards_point_eight() {
    let mut prev = 0.0;
    for l in 1..=40 {
        let v = lambda_init_schedule(l).unwrap();
        assert!(v > prev && v < 0.8);
        prev = v;
    }
}

#[test]
fn original_with_zero_lambda_is_vanilla_on_first_half() {
    let mut rng = seeded(4);
    let (n, d) = (5, 6);
    let q = Tensor::<f64>::randn(&[n, 2 * d], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[n, 2 * d], 1.0, &mut rng);
    let v = Tensor::<f64>::randn(&[n, 2 * d], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
    let zero = tape.constant(Tensor::scalar(0.0));
    let diff = diff_attention_original(&mut tape, qv, kv, vv, zero, None).unwrap();
    let q1 = tape.slice_cols(qv, 0, d).unwrap();
    let k1 = tape.slice_cols(kv, 0, d).unwrap();
    let van = vanilla_attention(&mut tape, q1, k1, vv, None).unwrap();
    assert!(tape.value(diff).max_abs_diff(tape.value(van)) < 1e-14);
}

#[test]
fn finetune_head_outputs_are_linear_in_one_minus_lambda() {
    // With RMSNorm's eps at 0 this linearity makes multi_head independent of λ;
    // the remaining λ dependence comes from eps alone.
    let (store, attn) = layer(AttentionVariant::DiffFinetune, 16, 8, 1);
    let x = Tensor::<f64>::randn(&[4, 16], 1.0, &mut seeded(2));
    let mask = AttentionMask::causal(4);
    for head in 0..2 {
        let out = |lambda: f64| {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let opts = AttnOptions { lambda_override: Some(lambda) };
            let y = attn.head_output(&mut tape, &vars, xv, head, Some(&mask), &opts).unwrap();
            tape.value(y).clone()
        };
        let a = out(0.3);
        let b = out(0.7);
        assert!(a.max_abs_diff(&b.scale(0.7 / 0.3)) < 1e-12);
    }
}

#[test]
fn norm_eps_dependence_shrinks_with_signal_scale() {
    let (store, attn) = layer(AttentionVariant::DiffFinetune, 16, 8, 3);
    let x = Tensor::<f64>::randn(&[5, 16], 1.0, &mut seeded(5));
    let mask = AttentionMask::full(5);
    let gap = |x: &Tensor<f64>| {
        run_multi_head(&store, &attn, x, &mask, Some(0.3)).max_abs_diff(&run_multi_head(&store, &attn, x, &mask, Some(0.7)))
    };
    let small = gap(&x);
    let large = gap(&x.scale(100.0));
    assert!(small > 0.0);
    assert!(large < small * 1e-3, "{large} vs {small}");
}

#[test]
fn prefix_mask_blocks_future_text() {
    for variant in [AttentionVariant::Vanilla, AttentionVariant::DiffOriginal, AttentionVariant::DiffFinetune] {
        let (store, attn) = layer(variant, 16, 8, 9);
        let n = 6;
        let prefix = 2;
        let mask = AttentionMask::prefix_lm(prefix, n);
        let x = Tensor::<f64>::randn(&[n, 16], 1.0, &mut seeded(10));
        let mut changed = x.clone();
        for c in 0..16 {
            changed.data_mut()[4 * 16 + c] += 1.0;
        }
        let a = run_multi_head(&store, &attn, &x, &mask, None);
        let b = run_multi_head(&store, &attn, &changed, &mask, None);
        for i in 0..n {
            let d: f64 = (0..16).map(|c| (a.get(i, c) - b.get(i, c)).abs()).fold(0.0, f64::max);
            if i < 4 {
                assert_eq!(d, 0.0, "{variant}: row {i} saw a later token");
            } else {
                assert!(d > 0.0);
            }
        }
        // Prefix tokens see each other in both directions.
        let mut first = x.clone();
        first.data_mut()[16] += 1.0;
        let c = run_multi_head(&store, &attn, &first, &mask, None);
        assert!((0..16).any(|col| c.get(0, col) != a.get(0, col)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn finetune_is_scaled_vanilla(n in 1usize..=8, half in 1usize..=16, lambda in -0.5f64..1.5, seed in any::<u64>()) {
        let d = 2 * half;
        let mut rng = seeded(seed);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[n, d], 1.0, &mut rng));
        let l = tape.constant(Tensor::scalar(lambda));
        let mask = AttentionMask::causal(n);
        let diff = diff_attention_finetune(&mut tape, q, k, v, l, Some(&mask)).unwrap();
        let van = vanilla_attention(&mut tape, q, k, v, Some(&mask)).unwrap();
        let scaled = tape.scale(van, 1.0 - lambda);
        prop_assert!(tape.value(diff).max_abs_diff(tape.value(scaled)) < 1e-12);
    }

    #[test]
    fn attention_rows_are_convex_combinations(n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::randn(&[n, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[n, 4], 1.0, &mut rng));
        let ones = tape.constant(Tensor::ones(&[n, 1]));
        let y = vanilla_attention(&mut tape, q, k, ones, Some(&AttentionMask::causal(n))).unwrap();
        for &v in tape.value(y).data() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
