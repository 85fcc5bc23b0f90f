use auxft::tensor_store::{decode_tensor, encode_tensor, FeatureMap, FeaturePyramid, Grid, Tensor};
use auxft::translator::{
    accumulate_residuals, ChainPlan, ChannelDifferentialConfig, ResampleOp, ResamplerKind,
    TranslatorParams, Variant,
};
use auxft::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = Grid> {
    prop::collection::vec(-5.0f64..5.0, h * w * c).prop_map(move |v| Grid::new(h, w, c, v).unwrap())
}

fn sized_grid(max: usize) -> impl Strategy<Value = Grid> {
    (1..=max, 1..=max, 1..=3usize).prop_flat_map(|(h, w, c)| grid_strategy(h, w, c))
}

fn dot(a: &Grid, b: &Grid) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn tensor_roundtrip_is_bit_exact(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let values: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_add(i as u32).wrapping_mul(2654435761) & 0x3fff_ffff)).collect();
        let t = Tensor::new(dims, values).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        prop_assert_eq!(back.dims, t.dims.clone());
        prop_assert!(back.values.iter().zip(&t.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_tensors_are_rejected(cut in 0usize..40) {
        let t = Tensor::new(vec![2, 3], vec![1.5; 6]).unwrap();
        let bytes = encode_tensor(&t);
        prop_assume!(cut < bytes.len());
        prop_assert!(decode_tensor(&bytes[..cut]).is_err());
    }

    #[test]
    fn bilinear_unit_ratio_is_bit_exact(g in sized_grid(7)) {
        let op = ResampleOp::with_kind((g.height(), g.width()), (g.height(), g.width()), ResamplerKind::Bilinear).unwrap();
        let out = op.apply(&g).unwrap();
        prop_assert!(out.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn area_integer_downscale_is_block_mean(h in 1usize..4, w in 1usize..4, k in 2usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let g = Grid::from_fn(h * k, w * k, 2, |_, _, _| rng.random_range(-3.0..3.0)).unwrap();
        let out = ResampleOp::with_kind((h * k, w * k), (h, w), ResamplerKind::Area).unwrap().apply(&g).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..2 {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += g.get(y * k + dy, x * k + dx, c);
                        }
                    }
                    prop_assert!((out.get(y, x, c) - s / (k * k) as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn bicubic_preserves_constants(h in 1usize..6, w in 1usize..6, th in 1usize..13, tw in 1usize..13, v in -10.0f64..10.0) {
        let g = Grid::filled(h, w, 2, v).unwrap();
        let out = ResampleOp::with_kind((h, w), (th, tw), ResamplerKind::Bicubic).unwrap().apply(&g).unwrap();
        prop_assert!(out.values().iter().all(|o| (o - v).abs() < 1e-6));
    }

    #[test]
    fn adjoint_is_the_transpose(h in 1usize..7, w in 1usize..7, th in 1usize..9, tw in 1usize..9, kind in 0usize..3, seed in any::<u64>()) {
        let kind = [ResamplerKind::Area, ResamplerKind::Bilinear, ResamplerKind::Bicubic][kind];
        let op = ResampleOp::with_kind((h, w), (th, tw), kind).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = Grid::from_fn(h, w, 2, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let y = Grid::from_fn(th, tw, 2, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let lhs = dot(&op.apply(&x).unwrap(), &y);
        let rhs = dot(&x, &op.adjoint(&y));
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn residuals_telescope(seed in any::<u64>(), variant in 0usize..4) {
        let variant = Variant::ALL[variant];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let sizes = [(8, 8), (4, 4), (2, 2)];
        let pyramid = FeaturePyramid::new(
            sizes.iter().map(|&(h, w)| Grid::from_fn(h, w, 2, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()).collect(),
        ).unwrap();
        let cfg = ChannelDifferentialConfig { variant, input_channels: vec![2; 3], output_channels: 3 };
        let params = TranslatorParams::init(&cfg, &mut rng).unwrap();
        let plan = ChainPlan::for_pyramid(&pyramid, (4, 4, 3), 0.1).unwrap();
        let terms = plan.level_terms(&pyramid, &params).unwrap();
        let r = plan.residuals(&pyramid, &params).unwrap();
        prop_assert_eq!(&r[2], &terms[2]);
        for i in 0..2 {
            for ((a, b), t) in r[i].values().iter().zip(r[i + 1].values()).zip(terms[i].values()) {
                prop_assert!((a - b - t).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_variants_are_linear_without_bias(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>(), k in 0usize..3) {
        let variant = [Variant::Linear1x1, Variant::Linear3x3, Variant::Linear5x5][k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let mut mk = || FeaturePyramid::new(vec![
            Grid::from_fn(6, 6, 2, |_, _, _| rng.random_range(-1.0..1.0)).unwrap(),
            Grid::from_fn(3, 3, 2, |_, _, _| rng.random_range(-1.0..1.0)).unwrap(),
        ]).unwrap();
        let (f, g) = (mk(), mk());
        let combo = FeaturePyramid::new(
            f.levels().iter().zip(g.levels()).map(|(x, y)| {
                Grid::new(x.height(), x.width(), 2, x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect()).unwrap()
            }).collect(),
        ).unwrap();
        let cfg = ChannelDifferentialConfig { variant, input_channels: vec![2, 2], output_channels: 2 };
        let params = TranslatorParams::init(&cfg, &mut rng).unwrap();
        let plan = ChainPlan::for_pyramid(&f, (6, 6, 2), 0.1).unwrap();
        let rf = plan.residuals(&f, &params).unwrap();
        let rg = plan.residuals(&g, &params).unwrap();
        let rc = plan.residuals(&combo, &params).unwrap();
        for i in 0..2 {
            for ((c, x), y) in rc[i].values().iter().zip(rf[i].values()).zip(rg[i].values()) {
                prop_assert!((c - (a * x + b * y)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_level_chain_is_its_term() {
    let t = Grid::filled(2, 2, 1, 3.0).unwrap();
    assert_eq!(accumulate_residuals(vec![t.clone()]), vec![t]);
}

#[test]
fn channel_mismatch_names_the_level() {
    let pyramid = FeaturePyramid::new(vec![
        FeatureMap::<f32>::zeros(4, 4, 3),
        FeatureMap::<f32>::zeros(2, 2, 5),
    ])
    .unwrap();
    let cfg = ChannelDifferentialConfig {
        variant: Variant::Linear1x1,
        input_channels: vec![3, 4],
        output_channels: 2,
    };
    let params = TranslatorParams::zeros(&cfg).unwrap();
    let plan = ChainPlan::for_pyramid(&pyramid, (4, 4, 2), 0.1).unwrap();
    match plan.residuals(&pyramid, &params) {
        Err(Error::Shape(m)) => assert!(m.contains("level 2"), "{m}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn mismatched_aspect_ratio_is_a_shape_error() {
    assert!(matches!(
        ChainPlan::new(&[(4, 8)], (4, 4, 1), 0.1),
        Err(Error::Shape(_))
    ));
}

#[test]
fn params_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ChannelDifferentialConfig {
        variant: Variant::NonLinear3x3,
        input_channels: vec![3, 2],
        output_channels: 4,
    };
    let params = TranslatorParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    params.save(dir.path(), "p").unwrap();
    let back = TranslatorParams::load(dir.path(), "p").unwrap();
    // Stored as f32, so compare at f32 precision.
    for (a, b) in params.flatten().iter().zip(back.flatten()) {
        assert_eq!(*a as f32, b as f32);
    }
    assert_eq!(back.variant, Variant::NonLinear3x3);
}
