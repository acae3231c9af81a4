//! Property tests for the crate's cross-cutting invariants.

use fp8quant::calib::CalibStats;
use fp8quant::codec::{decode, encode, round_trip, Fp8Format, OverflowPolicy, RoundingMode};
use fp8quant::qlinear::QuantizedLinear;
use fp8quant::scaling::{compute_scale_set, ActScaleMode, ScaleRounding, ScalingConfig, WeightScaleMode};
use fp8quant::tensor::{
    encode_tensor, matmul_mixed, scale_cols, scale_rows, ScaleAxis, ScaleVector, Tensor,
};

use proptest::prelude::*;

const NE: RoundingMode = RoundingMode::NearestEven;
const SAT: OverflowPolicy = OverflowPolicy::Saturate;

fn any_format() -> impl Strategy<Value = Fp8Format> {
    prop_oneof![
        Just(Fp8Format::E4M3),
        Just(Fp8Format::E4M3Gaudi2),
        Just(Fp8Format::E5M2),
    ]
}

proptest! {
    // Nearest-even round-trip is idempotent and never beaten by any code.
    #[test]
    fn nearest_round_trip_is_idempotent_and_nearest(
        v in -60000.0f64..60000.0,
        fmt in any_format(),
    ) {
        let once = round_trip(v, fmt, NE, SAT, 0);
        let twice = round_trip(once, fmt, NE, SAT, 0);
        prop_assert_eq!(once.to_bits(), twice.to_bits());

        if v.abs() <= fmt.max_finite() {
            let err = (once - v).abs();
            for c in 0u16..256 {
                let d = decode(c as u8, fmt);
                if d.is_finite() {
                    prop_assert!(err <= (d - v).abs() + 0.0,
                        "code {:#04x} ({}) is closer to {} than {}", c, d, v, once);
                }
            }
        }
    }

    // Stochastic rounding picks one of the two codes bracketing the value
    // and is a pure function of (value, seed, index).
    #[test]
    fn stochastic_rounding_brackets_and_repeats(
        v in -400.0f64..400.0,
        seed in any::<u64>(),
        index in any::<u64>(),
    ) {
        let fmt = Fp8Format::E4M3;
        let rnd = RoundingMode::Stochastic { seed };
        let a = encode(v, fmt, rnd, SAT, index);
        let b = encode(v, fmt, rnd, SAT, index);
        prop_assert_eq!(a, b);
        let got = decode(a, fmt);

        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for c in 0u16..256 {
            let d = decode(c as u8, fmt);
            if !d.is_finite() {
                continue;
            }
            if d <= v && d > lo {
                lo = d;
            }
            if d >= v && d < hi {
                hi = d;
            }
        }
        prop_assert!(
            got == lo || got == hi,
            "v={} rounded to {} outside bracket [{}, {}]", v, got, lo, hi
        );
    }

    // Row/column scaling followed by the inverse recovers the tensor to
    // within 1 ulp per element.
    #[test]
    fn scaling_round_trips(
        vals in proptest::collection::vec(-1e6f64..1e6, 12),
        scales in proptest::collection::vec(1e-3f64..1e3, 4),
        by_row in any::<bool>(),
    ) {
        let t = Tensor::from_f64(4, 3, vals).unwrap();
        if by_row {
            let s = ScaleVector::new(scales, ScaleAxis::PerSample).unwrap();
            let back = scale_rows(&scale_rows(&t, &s, true).unwrap(), &s, false).unwrap();
            for (a, b) in t.to_f64_vec().iter().zip(back.to_f64_vec()) {
                prop_assert!((a - b).abs() <= a.abs() * f64::EPSILON);
            }
        } else {
            let s = ScaleVector::new(scales[..3].to_vec(), ScaleAxis::PerInChannel).unwrap();
            let back = scale_cols(&scale_cols(&t, &s, true).unwrap(), &s, false).unwrap();
            for (a, b) in t.to_f64_vec().iter().zip(back.to_f64_vec()) {
                prop_assert!((a - b).abs() <= a.abs() * f64::EPSILON);
            }
        }
    }

    // Calibration statistics ignore batch order and batch boundaries.
    #[test]
    fn calibration_is_order_invariant(
        vals in proptest::collection::vec(-100.0f64..100.0, 24),
        split in 1usize..5,
    ) {
        let batches: Vec<Tensor> = vals
            .chunks(4)
            .map(|c| Tensor::from_f64(1, 4, c.to_vec()).unwrap())
            .collect();

        let mut forward = CalibStats::new();
        for b in &batches {
            forward.observe_activation(b).unwrap();
        }
        let mut reverse = CalibStats::new();
        for b in batches.iter().rev() {
            reverse.observe_activation(b).unwrap();
        }
        prop_assert_eq!(forward.r_x, reverse.r_x);
        prop_assert_eq!(&forward.r_x_per_channel, &reverse.r_x_per_channel);

        // Merge of any split equals the whole, and merge is idempotent.
        let k = split.min(batches.len() - 1);
        let mut left = CalibStats::new();
        let mut right = CalibStats::new();
        for b in &batches[..k] {
            left.observe_activation(b).unwrap();
        }
        for b in &batches[k..] {
            right.observe_activation(b).unwrap();
        }
        let merged = left.merge(&right).unwrap();
        prop_assert_eq!(merged.r_x, forward.r_x);
        prop_assert_eq!(&merged.r_x_per_channel, &forward.r_x_per_channel);
        let twice = merged.merge(&merged).unwrap();
        prop_assert_eq!(&twice.r_x_per_channel, &merged.r_x_per_channel);

        // Associativity and commutativity of merge on the max fields.
        let ab_c = left.merge(&right).unwrap().merge(&forward).unwrap();
        let a_bc = left.merge(&right.merge(&forward).unwrap()).unwrap();
        prop_assert_eq!(&ab_c, &a_bc);
        prop_assert_eq!(
            left.merge(&right).unwrap().r_x_per_channel,
            right.merge(&left).unwrap().r_x_per_channel
        );
    }

    // With backoff 1 and no scale rounding, maxabs scaling never clips:
    // every scaled weight magnitude stays within the representable range.
    #[test]
    fn maxabs_scaling_never_clips(
        vals in proptest::collection::vec(-1e4f64..1e4, 24),
        per_channel in any::<bool>(),
        fmt in any_format(),
    ) {
        let w = Tensor::from_f64(4, 6, vals).unwrap();
        let mode = if per_channel {
            WeightScaleMode::MaxabsPerOutChannel
        } else {
            WeightScaleMode::MaxabsPerTensor
        };
        let cfg = ScalingConfig::new(ActScaleMode::PerTensorStatic, mode);
        let scales = compute_scale_set(&cfg, 1.0, &[], &w, fmt).unwrap().scales;
        for r in 0..4 {
            for c in 0..6 {
                let scaled = w.get(r, c) * scales.s_c.at(c) / scales.s_w.at(r);
                prop_assert!(scaled.abs() <= fmt.max_finite() * (1.0 + 1e-12));
            }
        }
    }

    // Forward never produces NaN for finite inputs under saturation.
    #[test]
    fn forward_never_nans_under_saturation(
        wv in proptest::collection::vec(-1e5f64..1e5, 12),
        xv in proptest::collection::vec(-1e5f64..1e5, 8),
        fmt in any_format(),
    ) {
        let w = Tensor::from_f64(3, 4, wv).unwrap();
        let x = Tensor::from_f64(2, 4, xv).unwrap();
        let layer = QuantizedLinear::new(
            &w,
            fp8quant::scaling::ScaleSet::unit(4, fmt),
            ActScaleMode::PerTensorStatic,
            1.0,
            ScaleRounding::None,
            NE,
            SAT,
        )
        .unwrap();
        let y = layer.forward(&x).unwrap();
        for v in y.to_f64_vec() {
            prop_assert!(v.is_finite());
        }
    }
}

// The mixed product's fixed reduction order makes the result independent of
// the thread count doing the work.
#[test]
fn matmul_mixed_is_thread_count_invariant() {
    let fmt = Fp8Format::E5M2;
    let (m, k, n) = (7, 513, 5);
    let a_vals: Vec<f64> = (0..m * k).map(|i| ((i * 29 + 7) % 1023) as f64 * 0.37 - 190.0).collect();
    let b_vals: Vec<f64> = (0..k * n).map(|i| ((i * 53 + 3) % 1023) as f64 * 0.21 - 110.0).collect();
    let a = encode_tensor(&Tensor::from_f64(m, k, a_vals).unwrap(), fmt, NE, SAT).unwrap();
    let b = encode_tensor(&Tensor::from_f64(k, n, b_vals).unwrap(), fmt, NE, SAT).unwrap();

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
    let y1 = single.install(|| matmul_mixed(&a, &b).unwrap());
    let y8 = many.install(|| matmul_mixed(&a, &b).unwrap());
    let v1 = y1.as_f32_slice().unwrap();
    let v8 = y8.as_f32_slice().unwrap();
    assert_eq!(v1.len(), v8.len());
    for (a, b) in v1.iter().zip(v8) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

// Under channel-magnitude disparities of at least 16x, mean output error
// improves monotonically from unit to per-tensor to per-out-channel
// weight scaling.
#[test]
fn error_ordering_under_channel_disparity() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let fmt = Fp8Format::E4M3;
    let (rows, dim) = (8, 24);

    let mut err_sums = [0.0f64; 3];
    for _ in 0..20 {
        let mut wv = Vec::with_capacity(dim * dim);
        for r in 0..dim {
            // row disparities 1x..64x, plus a few rows beyond the format max
            let disp = (2.0f64).powi((r % 7) as i32) * if r % 9 == 0 { 4.0 } else { 1.0 };
            for _ in 0..dim {
                let g: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                wv.push(g * disp * 8.0);
            }
        }
        let w = Tensor::from_f64(dim, dim, wv).unwrap();
        let xv: Vec<f64> = (0..rows * dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let x = Tensor::from_f64(rows, dim, xv).unwrap();

        for (slot, mode) in [
            WeightScaleMode::Unit,
            WeightScaleMode::MaxabsPerTensor,
            WeightScaleMode::MaxabsPerOutChannel,
        ]
        .into_iter()
        .enumerate()
        {
            let cfg = ScalingConfig::new(ActScaleMode::PerTensorStatic, mode);
            let scales = compute_scale_set(&cfg, x.max_abs(), &[], &w, fmt).unwrap().scales;
            let layer = QuantizedLinear::new(
                &w,
                scales,
                ActScaleMode::PerTensorStatic,
                1.0,
                ScaleRounding::None,
                NE,
                SAT,
            )
            .unwrap();
            let report = layer.layer_report(&w, &x).unwrap();
            err_sums[slot] += report.output_err_rel;
        }
    }
    assert!(
        err_sums[0] > err_sums[1] && err_sums[1] > err_sums[2],
        "expected unit > per-tensor > per-out-channel, got {err_sums:?}"
    );
}

// The recipe is a pure function of (model, config, stats, dataset, seed).
#[test]
fn recipe_is_deterministic() {
    use fp8quant::model::{Dataset, Model};
    use fp8quant::recipe::{run_calibration, run_recipe, EvalMetric, RecipeConfig, RoundingSpec};

    let dir = tempfile::tempdir().unwrap();
    let w: Vec<f64> = (0..64).map(|i| ((i * 31 + 5) % 97) as f64 * 0.6 - 29.0).collect();
    Model::save(dir.path(), &[("fc0".into(), Tensor::from_f64(8, 8, w).unwrap())]).unwrap();
    let model = Model::load(dir.path()).unwrap();
    let batch: Vec<f64> = (0..32).map(|i| ((i * 13 + 1) % 41) as f64 - 20.0).collect();
    let eval = Dataset { batches: vec![Tensor::from_f64(4, 8, batch).unwrap()] };
    let stats = run_calibration(&model, &eval).unwrap();
    let recipe = RecipeConfig {
        candidates: vec![
            ScalingConfig::new(ActScaleMode::PerTensorStatic, WeightScaleMode::Unit),
            ScalingConfig::new(ActScaleMode::PerTensorStatic, WeightScaleMode::MaxabsPerOutChannel),
        ],
        degradation_threshold: -1.0,
        skip_first_last: false,
        metric: EvalMetric::RelOutputError,
        rounding: RoundingSpec::Stochastic,
        overflow: SAT,
    };
    let a = run_recipe(&model, &recipe, &stats, &eval, Fp8Format::E4M3, 7).unwrap();
    let b = run_recipe(&model, &recipe, &stats, &eval, Fp8Format::E4M3, 7).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
