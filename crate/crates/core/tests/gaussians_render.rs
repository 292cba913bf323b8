use gsavatar_core::gaussians::{
    combine, regress_head, shoulder_mask, GaussianSet, HeadRegressor, HeadRegressorConfig, Region, SCALE_MAX, SCALE_MIN,
};
use gsavatar_core::geometry::Camera;
use gsavatar_core::mesh::{icosphere, unique_edges};
use gsavatar_core::neural::rng;
use gsavatar_core::render::{floor_covariance, rasterize, rasterize_reference, SplatPrimitive, COVARIANCE_FLOOR};
use gsavatar_core::verify::{max_abs_diff, random_mesh, random_scene, with_threads};
use gsavatar_core::visibility::rasterize_depth;
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::Rng;

fn check_set(g: &GaussianSet) {
    for i in 0..g.len() {
        let q = g.rotations[i];
        let n = q.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-6, "quaternion norm {n}");
        assert!(g.scales[i].iter().all(|&s| (SCALE_MIN..=SCALE_MAX).contains(&s)));
        assert!(g.opacities[i] > 0.0 && g.opacities[i] < 1.0);
    }
    assert!(g.features.iter().all(|v| v.is_finite()));
    assert!(g.validate().is_ok());
}

#[test]
fn regression_fuzz_respects_attribute_ranges() {
    let (v, f) = icosphere(5);
    assert!(v.len() >= 10_000);
    let edges = unique_edges(&f).unwrap();
    let reg = HeadRegressor::new(&HeadRegressorConfig {
        input_dim: 24,
        hidden: 32,
        feature_dim: 8,
        output_gain: 1.0,
        opacity_bias: 1.0,
        seed: 11,
    })
    .unwrap();
    for (seed, scale) in [(1u64, 1.0f32), (2, 100.0), (3, 1e4)] {
        let mut r = rng(seed);
        let fused = Array2::from_shape_simple_fn((v.len(), 24), || r.gen_range(-scale..scale));
        check_set(&regress_head(fused.view(), &reg, &v, &edges).unwrap());
    }
}

#[test]
fn non_finite_features_are_refused() {
    let (v, f) = icosphere(1);
    let edges = unique_edges(&f).unwrap();
    let reg = HeadRegressor::zeroed(4, 4, 3).unwrap();
    let mut fused = Array2::zeros((v.len(), 4));
    fused[[3, 1]] = f32::NAN;
    assert!(regress_head(fused.view(), &reg, &v, &edges).is_err());
}

#[test]
fn single_splat_centre_equals_opacity() {
    for &o in &[0.1f32, 0.5, 0.9, 0.99] {
        let sp = SplatPrimitive::new([8.5, 8.5], [4.0, 0.0, 4.0], 3.0, o, vec![1.0, 0.5], 0);
        let t = rasterize(&[sp], 17, 17, 2, 0.0).unwrap();
        assert!((t.pixel(8, 8)[0] - o).abs() < 1e-4);
        assert!((t.pixel(8, 8)[1] - 0.5 * o).abs() < 1e-4);
    }
}

fn split(g: &GaussianSet, at: usize) -> (GaussianSet, GaussianSet) {
    let part = |r: std::ops::Range<usize>| GaussianSet {
        positions: g.positions[r.clone()].to_vec(),
        rotations: g.rotations[r.clone()].to_vec(),
        scales: g.scales[r.clone()].to_vec(),
        opacities: g.opacities[r.clone()].to_vec(),
        features: g.features.slice(s![r.clone(), ..]).to_owned(),
        regions: g.regions[r].to_vec(),
    };
    (part(0..at), part(at..g.len()))
}

fn random_set(n: usize, region: Region, seed: u64) -> GaussianSet {
    let mut r = rng(seed);
    GaussianSet {
        positions: (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect(),
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
        scales: vec![[0.01; 3]; n],
        opacities: (0..n).map(|_| r.gen_range(0.1..0.9)).collect(),
        features: Array2::from_shape_simple_fn((n, 4), || r.gen()),
        regions: vec![region; n],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn combine_is_order_stable_and_partitions(seed in any::<u64>(), nh in 0usize..40, ns in 0usize..40, cut in 0usize..40) {
        let head = random_set(nh, Region::Head, seed);
        let shoulder = random_set(ns, Region::Shoulder, seed ^ 1);
        let all = combine(&head, &shoulder).unwrap();
        prop_assert_eq!(all.len(), nh + ns);
        prop_assert_eq!(all.count(Region::Head), nh);
        prop_assert_eq!(all.count(Region::Shoulder), ns);
        prop_assert_eq!(&all.positions[..nh], &head.positions[..]);
        prop_assert_eq!(&all.positions[nh..], &shoulder.positions[..]);
        let cut = cut.min(nh);
        let (h1, h2) = split(&head, cut);
        let nested = combine(&h1, &combine(&h2, &shoulder).unwrap()).unwrap();
        prop_assert_eq!(nested, all);
    }

    #[test]
    fn shoulder_mask_is_inside_portrait_and_outside_head(seed in any::<u64>(), eta in 0.0f64..1.0) {
        let mut r = rng(seed);
        let (v, f) = random_mesh(&mut r);
        let cam = Camera::facing_origin(48, 40, 8.0);
        let depth = rasterize_depth(&v, &f, &cam);
        let portrait: Vec<bool> = (0..48 * 40).map(|_| r.gen_bool(0.6)).collect();
        let mask = shoulder_mask(&portrait, &depth, eta).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                prop_assert!(portrait[i]);
                prop_assert!(!depth.data[i].is_finite());
                prop_assert!((i / 48) as f64 >= eta * 40.0);
            }
        }
    }

    #[test]
    fn tiled_matches_reference(seed in any::<u64>(), n in 0usize..300, bg in 0.0f32..1.0) {
        let splats = random_scene(&mut rng(seed), n, 70, 50, 3);
        let a = rasterize(&splats, 70, 50, 3, bg).unwrap();
        let b = rasterize_reference(&splats, 70, 50, 3, bg).unwrap();
        prop_assert!(max_abs_diff(&a.color, &b.color) <= 1e-5);
        prop_assert!(max_abs_diff(&a.alpha, &b.alpha) <= 1e-5);
    }

    #[test]
    fn output_is_bounded_and_thread_invariant(seed in any::<u64>(), n in 0usize..400) {
        let splats = random_scene(&mut rng(seed), n, 64, 64, 2);
        let one = with_threads(1, || rasterize(&splats, 64, 64, 2, 0.0)).unwrap();
        let many = with_threads(5, || rasterize(&splats, 64, 64, 2, 0.0)).unwrap();
        prop_assert!(one.color.iter().zip(&many.color).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(one.alpha.iter().zip(&many.alpha).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(one.color.iter().chain(&one.alpha).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn nearer_splat_dominates(o in 0.5f32..0.99, dz in 0.1f32..5.0) {
        let make = |depth: f32, value: f32, index: u32| SplatPrimitive::new([8.5, 8.5], [6.0, 0.0, 6.0], depth, o, vec![value], index);
        let white_front = rasterize(&[make(1.0, 1.0, 0), make(1.0 + dz, 0.0, 1)], 17, 17, 1, 0.0).unwrap();
        let black_front = rasterize(&[make(1.0 + dz, 1.0, 0), make(1.0, 0.0, 1)], 17, 17, 1, 0.0).unwrap();
        prop_assert!(white_front.pixel(8, 8)[0] > black_front.pixel(8, 8)[0]);
        prop_assert!((white_front.pixel(8, 8)[0] - o).abs() < 1e-4);
        prop_assert!((black_front.pixel(8, 8)[0] - (1.0 - o) * o).abs() < 1e-4);
    }

    #[test]
    fn covariance_floor_keeps_matrices_positive(a in 0.0f64..50.0, c in 0.0f64..50.0, rho in -1.0f64..1.0) {
        let b = rho * (a * c).sqrt();
        let [fa, fb, fc] = floor_covariance([a, b, c]);
        let tr = fa + fc;
        let det = fa * fc - fb * fb;
        let lo = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
        prop_assert!(lo >= COVARIANCE_FLOOR - 1e-9);
    }
}
