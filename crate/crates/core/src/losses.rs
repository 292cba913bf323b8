//! Training-side math: the weighted loss stack, SSIM/PSNR, finite-difference
//! gradient checking, the subdivision curriculum and the attention cost model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::neural::{FeatureExtractor, SyntheticBackbone};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l2: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2: 10.0,
            ssim: 1.0,
            perceptual: 0.1,
            offset: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.l2, self.ssim, self.perceptual, self.offset]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub offset: f64,
    pub total: f64,
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Invalid(format!(
            "image dims differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// PSNR in dB with peak 1; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    w
}

/// Normalized window weights around `(x, y)` clipped to the image, as
/// `(index, weight)` pairs.
fn window_at(x: usize, y: usize, w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<(usize, f64)> {
    let r = SSIM_WINDOW / 2;
    let mut out = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut total = 0.0;
    for dy in 0..SSIM_WINDOW {
        let yy = y as isize + dy as isize - r as isize;
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for dx in 0..SSIM_WINDOW {
            let xx = x as isize + dx as isize - r as isize;
            if xx < 0 || xx >= w as isize {
                continue;
            }
            let wt = g[dy] * g[dx];
            total += wt;
            out.push((yy as usize * w + xx as usize, wt));
        }
    }
    for o in &mut out {
        o.1 /= total;
    }
    out
}

struct SsimTerms {
    value: f64,
    /// Per-window `(A, B, C, mu_x, mu_y)` for the gradient.
    partials: Vec<[f64; 5]>,
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, with_partials: bool) -> SsimTerms {
    let g = gaussian_window();
    let mut sum = 0.0;
    let mut partials = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let win = window_at(x, y, w, h, &g);
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(i, wt) in &win {
                mx += wt * a[i];
                my += wt * b[i];
                sxx += wt * a[i] * a[i];
                syy += wt * b[i] * b[i];
                sxy += wt * a[i] * b[i];
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let n1 = 2.0 * mx * my + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = mx * mx + my * my + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let f = n1 * n2 / (d1 * d2);
            sum += f;
            if with_partials {
                let da = 2.0 * my * n2 / (d1 * d2) - f * 2.0 * mx / d1;
                let db = -f / d2;
                let dc = 2.0 * n1 / (d1 * d2);
                partials.push([da, db, dc, mx, my]);
            }
        }
    }
    SsimTerms {
        value: sum / (w * h) as f64,
        partials,
    }
}

fn planes(img: &Image) -> Vec<Vec<f64>> {
    (0..img.channels)
        .map(|c| {
            img.data
                .iter()
                .skip(c)
                .step_by(img.channels)
                .map(|&v| v as f64)
                .collect()
        })
        .collect()
}

/// Mean windowed SSIM over pixels and channels (11x11 Gaussian window,
/// sigma 1.5, renormalized at the borders).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    if a.data.is_empty() {
        return Err(Error::Invalid("SSIM of an empty image".into()));
    }
    let (pa, pb) = (planes(a), planes(b));
    let total: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| ssim_channel(x, y, a.width, a.height, false).value)
        .sum();
    Ok(total / a.channels as f64)
}

/// Analytic gradient of [`ssim`] with respect to the pixels of `a`, in the
/// same `H x W x C` layout.
pub fn ssim_grad(a: &Image, b: &Image) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let g = gaussian_window();
    let (pa, pb) = (planes(a), planes(b));
    let scale = 1.0 / ((w * h) as f64 * ch as f64);
    let mut grad = vec![0.0; a.data.len()];
    for c in 0..ch {
        let t = ssim_channel(&pa[c], &pb[c], w, h, true);
        for p in 0..w * h {
            let [da, db, dc, mx, my] = t.partials[p];
            for (q, wt) in window_at(p % w, p / w, w, h, &g) {
                let d = da - 2.0 * db * mx - dc * my + 2.0 * db * pa[c][q] + dc * pb[c][q];
                grad[q * ch + c] += scale * wt * d;
            }
        }
    }
    Ok(grad)
}

/// Feature-space squared distance under `extractor`'s local features.
pub fn perceptual_distance(extractor: &dyn FeatureExtractor, a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (fa, fb) = (extractor.extract(a)?, extractor.extract(b)?);
    let n = fa.local.len().max(1) as f64;
    Ok(fa
        .local
        .iter()
        .zip(fb.local.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Weighted loss over the driving frame `target`, the coarse render and the
/// refined render. `extractor = None` uses the synthetic backbone.
pub fn total_loss(
    target: &Image,
    coarse: &Image,
    refined: &Image,
    offsets: &[[f32; 3]],
    weights: &LossWeights,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    check_pair(target, coarse)?;
    check_pair(target, refined)?;
    let l2 = mse(target, coarse)? + mse(target, refined)?;
    let ssim_term = (1.0 - ssim(target, coarse)?) + (1.0 - ssim(target, refined)?);
    let perceptual = if weights.perceptual == 0.0 || target.channels != 3 || target.width < 1 {
        0.0
    } else {
        let fallback;
        let ex: &dyn FeatureExtractor = match extractor {
            Some(e) => e,
            None => {
                fallback = SyntheticBackbone::new(perceptual_backbone_config(target))?;
                &fallback
            }
        };
        perceptual_distance(ex, target, coarse)? + perceptual_distance(ex, target, refined)?
    };
    let offset = offsets
        .iter()
        .flatten()
        .map(|v| (*v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let total = weights.l2 * l2 + weights.ssim * ssim_term + weights.perceptual * perceptual + weights.offset * offset;
    Ok(LossBreakdown {
        l2,
        ssim: ssim_term,
        perceptual,
        offset,
        total,
    })
}

fn perceptual_backbone_config(img: &Image) -> crate::neural::BackboneConfig {
    let patch = img.width.min(img.height).clamp(1, 14);
    crate::neural::BackboneConfig {
        patch,
        local_size: ((img.height / patch).max(1), (img.width / patch).max(1)),
        ..Default::default()
    }
}

/// Largest relative error between `grad(x)` and central differences of `f`.
///
/// The relative error of coordinate `i` is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, grad: &[f64], params: &[f64], eps: f64, floor: f64) -> Result<f64> {
    if grad.len() != params.len() {
        return Err(Error::dims("gradient length", params.len(), grad.len()));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss near coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let denom = grad[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Subdivision level drawn for a training step at `progress` in `[0, 1]`.
pub fn curriculum_sample(progress: f64, rng: &mut impl Rng) -> usize {
    if progress <= 0.1 {
        0
    } else if progress <= 0.3 {
        1
    } else {
        let u: f64 = rng.gen();
        if u < 0.7 {
            2
        } else if u < 0.9 {
            1
        } else {
            0
        }
    }
}

/// Late-phase level probabilities for levels 0, 1, 2.
pub const CURRICULUM_LATE: [f64; 3] = [0.1, 0.2, 0.7];

/// Factors of the cross-attention cost `l * h * 4^k * V0 * N_tokens * d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCostConfig {
    pub layers: u64,
    pub heads: u64,
    pub level: u32,
    pub base_vertices: u64,
    pub tokens: u64,
    pub dim: u64,
}

impl AttentionCostConfig {
    /// Reference configuration of the large prior model this engine is
    /// compared against.
    pub fn lam() -> Self {
        Self {
            layers: 10,
            heads: 16,
            level: 2,
            base_vertices: 5023,
            tokens: 1369,
            dim: 1024,
        }
    }

    pub fn ours() -> Self {
        Self {
            layers: 2,
            heads: 8,
            level: 0,
            base_vertices: 5023,
            tokens: 1369,
            dim: 256,
        }
    }
}

pub fn attention_cost(cfg: &AttentionCostConfig) -> u128 {
    cfg.layers as u128
        * cfg.heads as u128
        * 4u128.pow(cfg.level)
        * cfg.base_vertices as u128
        * cfg.tokens as u128
        * cfg.dim as u128
}

/// `cost(a) / cost(b)`.
pub fn cost_ratio(a: &AttentionCostConfig, b: &AttentionCostConfig) -> f64 {
    attention_cost(a) as f64 / attention_cost(b) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::rng;

    fn img(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| f(x, y))
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = img(16, 12, |x, y| ((x * 3 + y * 5) % 7) as f32 / 7.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images() {
        let zero = img(8, 8, |_, _| 0.0);
        let one = img(8, 8, |_, _| 1.0);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-9);
        assert_eq!(ssim(&zero, &one).unwrap(), ssim(&one, &zero).unwrap());
    }

    #[test]
    fn psnr_cases() {
        let a = img(4, 4, |_, _| 0.3);
        let b = img(4, 4, |_, _| 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn dims_checked() {
        let a = img(4, 4, |_, _| 0.3);
        let b = img(4, 5, |_, _| 0.3);
        assert!(ssim(&a, &b).is_err());
        assert!(mse(&a, &b).is_err());
    }

    #[test]
    fn total_loss_zero_and_offset_only() {
        let a = Image::from_fn(16, 16, 3, |x, y, c| ((x + y + c) % 5) as f32 / 5.0);
        let w = LossWeights::default();
        let z = total_loss(&a, &a, &a, &[[0.0; 3]; 4], &w, None).unwrap();
        assert_eq!(z.total, 0.0);
        let o = total_loss(&a, &a, &a, &[[2.0, 0.0, 0.0]], &w, None).unwrap();
        assert!((o.total - 0.2).abs() < 1e-12);
    }

    #[test]
    fn quadratic_grad_check() {
        let x = vec![0.3, -1.2, 2.5, 0.01];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(|p| p.iter().map(|v| v * v).sum(), &g, &x, 1e-4, 1e-12).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        assert!(grad_check(|_| f64::NAN, &[0.0], &[1.0], 1e-4, 1e-12).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let noise = |seed| {
            let mut r = rng(seed);
            let v: Vec<f32> = (0..256).map(|_| r.gen_range(0.1..0.9)).collect();
            Image::from_data(16, 16, 1, v).unwrap()
        };
        let (a, b) = (noise(4), noise(5));
        let grad = ssim_grad(&a, &b).unwrap();
        let params: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
        let f = |p: &[f64]| {
            let pa = p.to_vec();
            let pb: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
            ssim_channel(&pa, &pb, 16, 16, false).value
        };
        let err = grad_check(f, &grad, &params, 1e-4, 1e-8).unwrap();
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn curriculum_phases() {
        let mut r = rng(1);
        assert!((0..1000).all(|_| curriculum_sample(0.05, &mut r) == 0));
        assert!((0..1000).all(|_| curriculum_sample(0.2, &mut r) == 1));
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[curriculum_sample(0.9, &mut r)] += 1;
        }
        for k in 0..3 {
            assert!((counts[k] as f64 / 1e5 - CURRICULUM_LATE[k]).abs() < 0.01);
        }
    }

    #[test]
    fn cost_ratio_is_640() {
        assert_eq!(
            attention_cost(&AttentionCostConfig::lam()),
            640 * attention_cost(&AttentionCostConfig::ours())
        );
        assert_eq!(
            cost_ratio(&AttentionCostConfig::lam(), &AttentionCostConfig::ours()),
            640.0
        );
        let o = AttentionCostConfig::ours();
        assert_eq!(cost_ratio(&o, &o), 1.0);
        let doubled = AttentionCostConfig { layers: 4, ..o };
        assert_eq!(attention_cost(&doubled), 2 * attention_cost(&o));
    }
}
