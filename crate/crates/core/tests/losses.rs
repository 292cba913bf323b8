use gsavatar_core::image::Image;
use gsavatar_core::losses::{
    attention_cost, cost_ratio, curriculum_sample, mse, psnr, ssim, total_loss, AttentionCostConfig, LossWeights,
    CURRICULUM_LATE,
};
use gsavatar_core::neural::rng;
use proptest::prelude::*;
use rand::Rng;

fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::from_data(w, h, c, (0..w * h * c).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap()
}

#[test]
fn late_curriculum_passes_chi_square() {
    let mut r = rng(21);
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[curriculum_sample(0.9, &mut r)] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(CURRICULUM_LATE)
        .map(|(&c, p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // Two degrees of freedom: P(X > x) = exp(-x / 2).
    let critical = -2.0 * 0.001f64.ln();
    assert!(chi2 < critical, "chi2 {chi2} counts {counts:?}");
}

#[test]
fn early_curriculum_uses_coarse_levels() {
    let mut r = rng(0);
    assert!((0..100).all(|_| curriculum_sample(0.05, &mut r) == 0));
    assert!((0..100).all(|_| curriculum_sample(0.2, &mut r) == 1));
}

#[test]
fn reference_configs_differ_by_640() {
    assert_eq!(
        attention_cost(&AttentionCostConfig::lam()),
        640 * attention_cost(&AttentionCostConfig::ours())
    );
    assert_eq!(
        cost_ratio(&AttentionCostConfig::lam(), &AttentionCostConfig::ours()),
        640.0
    );
}

#[test]
fn mismatched_images_are_errors() {
    let a = Image::filled(4, 4, 3, 0.5);
    let b = Image::filled(4, 5, 3, 0.5);
    assert!(mse(&a, &b).is_err());
    assert!(ssim(&a, &b).is_err());
    let bad = LossWeights {
        l2: -1.0,
        ..LossWeights::default()
    };
    assert!(total_loss(&a, &a, &a, &[], &bad, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn total_loss_is_non_negative(seed in any::<u64>(), off in prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), 0..20)) {
        let t = random_image(16, 16, 3, seed);
        let c = random_image(16, 16, 3, seed ^ 1);
        let f = random_image(16, 16, 3, seed ^ 2);
        let l = total_loss(&t, &c, &f, &off, &LossWeights::default(), None).unwrap();
        prop_assert!(l.total >= 0.0 && l.l2 >= 0.0 && l.ssim >= 0.0 && l.perceptual >= 0.0 && l.offset >= 0.0);
        let same = total_loss(&t, &t, &t, &vec![[0.0; 3]; off.len()], &LossWeights::default(), None).unwrap();
        prop_assert_eq!(same.total, 0.0);
        if off.iter().flatten().any(|&v| v != 0.0) {
            let moved = total_loss(&t, &t, &t, &off, &LossWeights::default(), None).unwrap();
            prop_assert!(moved.total > 0.0);
        }
    }

    #[test]
    fn ssim_is_bounded_and_one_on_identity(seed in any::<u64>(), gain in -1.0f32..1.0) {
        let a = random_image(20, 18, 2, seed);
        let b = random_image(20, 18, 2, seed ^ 7);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(s < 1.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inverted = Image::from_data(20, 18, 2, a.data.iter().map(|v| 0.5 + gain * (v - 0.5)).collect()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ssim(&a, &inverted).unwrap()));
        prop_assert!(psnr(&a, &b).unwrap().is_finite());
    }

    #[test]
    fn attention_cost_is_separable(factor in 1u64..50, which in 0usize..6) {
        let base = AttentionCostConfig::ours();
        let mut c = base;
        let scale = match which {
            0 => { c.layers *= factor; factor as u128 }
            1 => { c.heads *= factor; factor as u128 }
            2 => { c.base_vertices *= factor; factor as u128 }
            3 => { c.tokens *= factor; factor as u128 }
            4 => { c.dim *= factor; factor as u128 }
            _ => { c.level += (factor % 4) as u32; 4u128.pow((factor % 4) as u32) }
        };
        prop_assert_eq!(attention_cost(&c), scale * attention_cost(&base));
    }
}
