//! Tile-based software splatting of multi-channel Gaussians, a brute-force
//! reference rasterizer and the residual image refiner.

use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;

use crate::archive::TensorMap;
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::geometry::{Camera, Mat3, Quat, Vec3};
use crate::image::Image;
use crate::neural::{mix_seed, Conv3x3};

pub const TILE: usize = 16;
pub const ALPHA_MAX: f32 = 0.99;
pub const ALPHA_MIN: f32 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f32 = 1e-4;
/// Lower bound on the eigenvalues of a projected covariance, in px^2.
pub const COVARIANCE_FLOOR: f64 = 0.3;
/// Squared Mahalanobis radius beyond which a splat contributes nothing.
pub const CUTOFF: f32 = 9.0;

/// Screen-space Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatPrimitive {
    pub mean: [f32; 2],
    /// `(xx, xy, yy)` in px^2.
    pub cov: [f32; 3],
    /// Inverse covariance `(xx, xy, yy)`.
    pub conic: [f32; 3],
    pub depth: f32,
    pub opacity: f32,
    pub feature: Vec<f32>,
    /// Index of the source Gaussian, used to break depth ties.
    pub index: u32,
}

impl SplatPrimitive {
    /// Builds a splat from a 2D covariance, applying the eigenvalue floor.
    pub fn new(mean: [f32; 2], cov: [f64; 3], depth: f32, opacity: f32, feature: Vec<f32>, index: u32) -> Self {
        let [a, b, c] = floor_covariance(cov);
        let det = a * c - b * b;
        Self {
            mean,
            cov: [a as f32, b as f32, c as f32],
            conic: [(c / det) as f32, (-b / det) as f32, (a / det) as f32],
            depth,
            opacity,
            feature,
            index,
        }
    }

    /// Half-widths of the axis-aligned box containing the cutoff ellipse.
    fn extent(&self) -> [f32; 2] {
        let r = CUTOFF.sqrt();
        [r * self.cov[0].sqrt(), r * self.cov[2].sqrt()]
    }
}

/// Clamps the eigenvalues of a symmetric 2x2 matrix to [`COVARIANCE_FLOOR`].
pub fn floor_covariance([a, b, c]: [f64; 3]) -> [f64; 3] {
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mid + rad, mid - rad);
    if l2 >= COVARIANCE_FLOOR {
        return [a, b, c];
    }
    let (f1, f2) = (l1.max(COVARIANCE_FLOOR), l2.max(COVARIANCE_FLOOR));
    // Eigenvector of l1.
    let (vx, vy) = if b.abs() > 1e-300 {
        let v = (l1 - c, b);
        let n = v.0.hypot(v.1);
        (v.0 / n, v.1 / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    [
        f1 * vx * vx + f2 * vy * vy,
        (f1 - f2) * vx * vy,
        f1 * vy * vy + f2 * vx * vx,
    ]
}

/// 3D covariance `R diag(s)^2 R^T`.
pub fn covariance_3d(rotation: [f32; 4], scale: [f32; 3]) -> Mat3 {
    let r = Quat::new(
        rotation[0] as f64,
        rotation[1] as f64,
        rotation[2] as f64,
        rotation[3] as f64,
    )
    .to_matrix();
    let s = Mat3::from_diagonal(&Vec3::new(
        (scale[0] as f64).powi(2),
        (scale[1] as f64).powi(2),
        (scale[2] as f64).powi(2),
    ));
    r * s * r.transpose()
}

/// Projects one Gaussian; `None` when culled.
pub fn project_one(
    camera: &Camera,
    position: [f32; 3],
    rotation: [f32; 4],
    scale: [f32; 3],
) -> Option<([f32; 2], [f64; 3], f32)> {
    let w = camera.rotation();
    let t = camera.to_camera(Vec3::new(position[0] as f64, position[1] as f64, position[2] as f64));
    if !(t.z >= camera.near && t.z <= camera.far) {
        return None;
    }
    let (fx, fy) = camera.pixel_focal();
    let j = nalgebra::Matrix2x3::new(
        fx / t.z,
        0.0,
        -fx * t.x / (t.z * t.z),
        0.0,
        fy / t.z,
        -fy * t.y / (t.z * t.z),
    );
    let m = j * w;
    let cov = m * covariance_3d(rotation, scale) * m.transpose();
    let pixel = camera.camera_to_pixel(t);
    if !pixel.iter().all(|c| c.is_finite()) {
        return None;
    }
    Some((
        [pixel[0] as f32, pixel[1] as f32],
        [cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]],
        t.z as f32,
    ))
}

/// Screen-space splats of every Gaussian that survives frustum culling.
pub fn project_gaussians(set: &GaussianSet, camera: &Camera) -> Vec<SplatPrimitive> {
    (0..set.len())
        .into_par_iter()
        .filter_map(|i| {
            let (mean, cov, depth) = project_one(camera, set.positions[i], set.rotations[i], set.scales[i])?;
            let splat = SplatPrimitive::new(
                mean,
                cov,
                depth,
                set.opacities[i],
                set.features.row(i).to_vec(),
                i as u32,
            );
            let [ex, ey] = splat.extent();
            let off = mean[0] + ex < 0.0
                || mean[1] + ey < 0.0
                || mean[0] - ex > camera.width as f32
                || mean[1] - ey > camera.height as f32;
            (!off).then_some(splat)
        })
        .collect()
}

/// Multi-channel render with its alpha plane.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major `H x W x C`.
    pub color: Vec<f32>,
    pub alpha: Vec<f32>,
    pub background: f32,
}

impl RenderTarget {
    pub fn new(width: usize, height: usize, channels: usize, background: f32) -> Self {
        Self {
            width,
            height,
            channels,
            color: vec![background; width * height * channels],
            alpha: vec![0.0; width * height],
            background,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.color[i..i + self.channels]
    }

    pub fn image(&self) -> Image {
        Image::from_data(self.width, self.height, self.channels, self.color.clone()).expect("consistent dims")
    }

    /// First three channels as an image.
    pub fn rgb(&self) -> Result<Image> {
        self.image().leading_channels(3)
    }

    pub fn alpha_max(&self) -> f32 {
        self.alpha.iter().copied().fold(0.0, f32::max)
    }

    /// `C x H x W` copy of the channels.
    pub fn planes(&self) -> Array3<f32> {
        Array3::from_shape_fn((self.channels, self.height, self.width), |(c, y, x)| {
            self.color[(y * self.width + x) * self.channels + c]
        })
    }
}

fn check_splats(splats: &[SplatPrimitive], channels: usize) -> Result<()> {
    for s in splats {
        if s.feature.len() != channels {
            return Err(Error::dims("splat feature width", channels, s.feature.len()));
        }
    }
    Ok(())
}

/// Splat indices in front-to-back order, ties broken by source index.
fn depth_order(splats: &[SplatPrimitive]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
    });
    order
}

/// Splats copied into contiguous arrays in compositing order.
struct Packed {
    /// `(mean x, mean y, conic a, conic b, conic c, opacity)` per splat.
    geometry: Vec<[f32; 6]>,
    features: Vec<f32>,
}

impl Packed {
    fn new(splats: &[SplatPrimitive], order: impl Iterator<Item = u32>, channels: usize) -> Self {
        let (lo, _) = order.size_hint();
        let mut geometry = Vec::with_capacity(lo);
        let mut features = Vec::with_capacity(lo * channels);
        for k in order {
            let s = &splats[k as usize];
            geometry.push([s.mean[0], s.mean[1], s.conic[0], s.conic[1], s.conic[2], s.opacity]);
            features.extend_from_slice(&s.feature);
        }
        Self { geometry, features }
    }
}

/// Front-to-back compositing of packed splats at pixel `(x, y)`. Returns the
/// final transmittance.
#[inline]
fn composite_pixel(splats: &Packed, x: usize, y: usize, out: &mut [f32]) -> f32 {
    let channels = out.len();
    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
    let mut t = 1.0f32;
    out.fill(0.0);
    for (i, &[mx, my, a, b, c, opacity]) in splats.geometry.iter().enumerate() {
        let (dx, dy) = (px - mx, py - my);
        let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if !(m <= CUTOFF) {
            continue;
        }
        let alpha = (opacity * (-0.5 * m).exp()).min(ALPHA_MAX);
        if alpha < ALPHA_MIN {
            continue;
        }
        let w = t * alpha;
        let feature = &splats.features[i * channels..(i + 1) * channels];
        for (o, f) in out.iter_mut().zip(feature) {
            *o += w * f;
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    t
}

fn finish_pixel(out: &mut [f32], t: f32, background: f32) -> f32 {
    if background != 0.0 {
        out.iter_mut().for_each(|o| *o += t * background);
    }
    1.0 - t
}

/// Tiled rasterizer; the output does not depend on the number of threads.
pub fn rasterize(
    splats: &[SplatPrimitive],
    width: usize,
    height: usize,
    channels: usize,
    background: f32,
) -> Result<RenderTarget> {
    check_splats(splats, channels)?;
    let mut target = RenderTarget::new(width, height, channels, background);
    if width == 0 || height == 0 {
        return Ok(target);
    }
    let order = depth_order(splats);
    let (tx, ty) = (width.div_ceil(TILE), height.div_ceil(TILE));
    // Bins hold ranks in the global order so each bin is already sorted.
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    for (rank, &k) in order.iter().enumerate() {
        let s = &splats[k as usize];
        let [ex, ey] = s.extent();
        let x0 = ((s.mean[0] - ex - 1.0).floor().max(0.0) as usize) / TILE;
        let y0 = ((s.mean[1] - ey - 1.0).floor().max(0.0) as usize) / TILE;
        let x1 = (s.mean[0] + ex + 1.0).ceil();
        let y1 = (s.mean[1] + ey + 1.0).ceil();
        if !(x1 >= 0.0 && y1 >= 0.0) {
            continue;
        }
        let x1 = ((x1 as usize) / TILE).min(tx - 1);
        let y1 = ((y1 as usize) / TILE).min(ty - 1);
        for by in y0..=y1 {
            for bx in x0..=x1 {
                bins[by * tx + bx].push(rank as u32);
            }
        }
    }

    let tiles: Vec<(usize, Vec<f32>, Vec<f32>)> = (0..tx * ty)
        .into_par_iter()
        .map(|tile| {
            let (bx, by) = (tile % tx, tile / tx);
            let (x0, y0) = (bx * TILE, by * TILE);
            let (w, h) = (TILE.min(width - x0), TILE.min(height - y0));
            let mut color = vec![0.0f32; w * h * channels];
            let mut alpha = vec![0.0f32; w * h];
            let packed = Packed::new(splats, bins[tile].iter().map(|&r| order[r as usize]), channels);
            for ly in 0..h {
                for lx in 0..w {
                    let p = ly * w + lx;
                    let out = &mut color[p * channels..(p + 1) * channels];
                    let t = composite_pixel(&packed, x0 + lx, y0 + ly, out);
                    alpha[p] = finish_pixel(out, t, background);
                }
            }
            (tile, color, alpha)
        })
        .collect();

    for (tile, color, alpha) in tiles {
        let (x0, y0) = ((tile % tx) * TILE, (tile / tx) * TILE);
        let w = TILE.min(width - x0);
        for (ly, (crow, arow)) in color.chunks(w * channels).zip(alpha.chunks(w)).enumerate() {
            let y = y0 + ly;
            let start = (y * width + x0) * channels;
            target.color[start..start + w * channels].copy_from_slice(crow);
            target.alpha[y * width + x0..y * width + x0 + w].copy_from_slice(arow);
        }
    }
    Ok(target)
}

/// Brute-force oracle: every pixel walks the full depth-sorted splat list.
pub fn rasterize_reference(
    splats: &[SplatPrimitive],
    width: usize,
    height: usize,
    channels: usize,
    background: f32,
) -> Result<RenderTarget> {
    check_splats(splats, channels)?;
    let mut target = RenderTarget::new(width, height, channels, background);
    let packed = Packed::new(splats, depth_order(splats).into_iter(), channels);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let out = &mut target.color[i * channels..(i + 1) * channels];
            let t = composite_pixel(&packed, x, y, out);
            target.alpha[i] = finish_pixel(out, t, background);
        }
    }
    Ok(target)
}

/// Projects and rasterizes a Gaussian set with the camera's dimensions.
pub fn render(set: &GaussianSet, camera: &Camera, background: f32, reference: bool) -> Result<RenderTarget> {
    let splats = project_gaussians(set, camera);
    let f = if reference { rasterize_reference } else { rasterize };
    f(&splats, camera.width, camera.height, set.feature_dim(), background)
}

/// Two-level encoder-decoder with a skip connection and a residual RGB output.
#[derive(Debug, Clone, PartialEq)]
pub struct Refiner {
    pub enc1: Conv3x3,
    pub enc2: Conv3x3,
    pub dec: Conv3x3,
    pub out: Conv3x3,
}

impl Refiner {
    /// Seeded refiner with a zero final layer, so its output equals the
    /// coarse RGB channels until trained.
    pub fn new(channels: usize, width: usize, seed: u64) -> Self {
        Self {
            enc1: Conv3x3::new(channels, width, mix_seed(seed, 1)),
            enc2: Conv3x3::new(width, 2 * width, mix_seed(seed, 2)),
            dec: Conv3x3::new(3 * width, width, mix_seed(seed, 3)),
            out: Conv3x3::zeros(width, 3),
        }
    }

    /// Same as [`Refiner::new`] but with a seeded non-zero final layer.
    pub fn seeded(channels: usize, width: usize, seed: u64) -> Self {
        Self {
            out: Conv3x3::new(width, 3, mix_seed(seed, 4)),
            ..Self::new(channels, width, seed)
        }
    }

    pub fn channels(&self) -> usize {
        self.enc1.in_channels
    }

    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        self.enc1.store(&format!("{prefix}.enc1"), out);
        self.enc2.store(&format!("{prefix}.enc2"), out);
        self.dec.store(&format!("{prefix}.dec"), out);
        self.out.store(&format!("{prefix}.out"), out);
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        Ok(Self {
            enc1: Conv3x3::load(&format!("{prefix}.enc1"), map)?,
            enc2: Conv3x3::load(&format!("{prefix}.enc2"), map)?,
            dec: Conv3x3::load(&format!("{prefix}.dec"), map)?,
            out: Conv3x3::load(&format!("{prefix}.out"), map)?,
        })
    }

    /// Residual correction `g(features)`, `3 x H x W`.
    pub fn residual(&self, x: ArrayView3<f32>) -> Result<Array3<f32>> {
        let relu = |mut a: Array3<f32>| {
            a.mapv_inplace(|v| v.max(0.0));
            a
        };
        let (_, h, w) = x.dim();
        let e1 = relu(self.enc1.forward(x)?);
        let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
        let c1 = e1.dim().0;
        let pooled = Array3::from_shape_fn((c1, h2, w2), |(c, y, xx)| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                    if sy < h && sx < w {
                        acc += e1[[c, sy, sx]];
                        n += 1.0;
                    }
                }
            }
            acc / n
        });
        let e2 = relu(self.enc2.forward(pooled.view())?);
        let c2 = e2.dim().0;
        let joined = Array3::from_shape_fn((c1 + c2, h, w), |(c, y, xx)| {
            if c < c1 {
                e1[[c, y, xx]]
            } else {
                e2[[c - c1, y / 2, xx / 2]]
            }
        });
        let d = relu(self.dec.forward(joined.view())?);
        self.out.forward(d.view())
    }
}

/// Final RGB image `clamp(I_c + g(features), 0, 1)`.
pub fn refine(coarse: &RenderTarget, refiner: &Refiner) -> Result<Image> {
    if coarse.channels < 3 {
        return Err(Error::dims("coarse render channels (at least)", 3, coarse.channels));
    }
    if refiner.channels() != coarse.channels {
        return Err(Error::dims(
            "refiner input channels",
            refiner.channels(),
            coarse.channels,
        ));
    }
    let g = refiner.residual(coarse.planes().view())?;
    Ok(Image::from_fn(coarse.width, coarse.height, 3, |x, y, c| {
        (coarse.pixel(x, y)[c] + g[[c, y, x]]).clamp(0.0, 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Region;
    use ndarray::Array2;

    fn splat(x: f32, y: f32, var: f64, depth: f32, o: f32, f: Vec<f32>, i: u32) -> SplatPrimitive {
        SplatPrimitive::new([x, y], [var, 0.0, var], depth, o, f, i)
    }

    #[test]
    fn empty_scene_is_background() {
        let t = rasterize(&[], 20, 10, 2, 0.25).unwrap();
        assert!(t.color.iter().all(|&v| v == 0.25));
        assert!(t.alpha.iter().all(|&a| a == 0.0));
        assert_eq!(t, rasterize_reference(&[], 20, 10, 2, 0.25).unwrap());
    }

    #[test]
    fn single_splat_centre_equals_opacity() {
        let s = splat(8.5, 8.5, 4.0, 3.0, 0.7, vec![1.0], 0);
        let t = rasterize(&[s.clone()], 16, 16, 1, 0.0).unwrap();
        assert!((t.pixel(8, 8)[0] - 0.7).abs() < 1e-4);
        assert_eq!(t, rasterize_reference(&[s], 16, 16, 1, 0.0).unwrap());
    }

    #[test]
    fn two_splats_composite_front_to_back() {
        let front = splat(5.5, 5.5, 4.0, 1.0, 0.5, vec![1.0], 1);
        let back = splat(5.5, 5.5, 4.0, 2.0, 0.5, vec![0.0], 0);
        let t = rasterize(&[back, front], 12, 12, 1, 0.0).unwrap();
        assert!((t.pixel(5, 5)[0] - 0.5).abs() < 1e-6);
        assert!((t.alpha[5 * 12 + 5] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn nearer_splat_dominates() {
        let a = |d| splat(5.5, 5.5, 4.0, d, 0.9, vec![1.0], 0);
        let b = |d| splat(5.5, 5.5, 4.0, d, 0.9, vec![0.0], 1);
        let t1 = rasterize(&[a(1.0), b(2.0)], 12, 12, 1, 0.0).unwrap();
        let t2 = rasterize(&[a(2.0), b(1.0)], 12, 12, 1, 0.0).unwrap();
        assert!(t1.pixel(5, 5)[0] > 0.85);
        assert!(t2.pixel(5, 5)[0] < 0.1);
    }

    #[test]
    fn covariance_floor_raises_small_eigenvalues() {
        let c = floor_covariance([0.01, 0.0, 5.0]);
        assert!((c[0] - 0.3).abs() < 1e-12 && c[1].abs() < 1e-12 && (c[2] - 5.0).abs() < 1e-12);
        let c = floor_covariance([2.0, 1.999, 2.0]);
        let mid = 0.5 * (c[0] + c[2]);
        let rad = (0.25 * (c[0] - c[2]).powi(2) + c[1] * c[1]).sqrt();
        assert!((mid - rad - 0.3).abs() < 1e-9);
        assert!((mid + rad - 3.999).abs() < 1e-9);
        assert_eq!(floor_covariance([1.0, 0.2, 2.0]), [1.0, 0.2, 2.0]);
    }

    #[test]
    fn isotropic_on_axis_projection() {
        let cam = Camera::facing_origin(128, 128, 20.0);
        let sigma = 0.05f32;
        let (mean, cov, depth) = project_one(&cam, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [sigma; 3]).unwrap();
        let expected = (12.0 * sigma as f64 * 64.0 / 20.0).powi(2);
        assert!((mean[0] - 64.0).abs() < 1e-6 && (mean[1] - 64.0).abs() < 1e-6);
        assert!((cov[0] - expected).abs() < 1e-5 * expected.max(1.0));
        assert!((cov[2] - expected).abs() < 1e-5 * expected.max(1.0));
        assert!(cov[1].abs() < 1e-9);
        assert_eq!(depth, 20.0);
        let q = Quat::from_axis_angle(Vec3::new(0.3, -1.0, 0.5), 1.1);
        let (_, rotated, _) = project_one(
            &cam,
            [0.0, 0.0, 0.0],
            [q.w as f32, q.x as f32, q.y as f32, q.z as f32],
            [sigma; 3],
        )
        .unwrap();
        for k in 0..3 {
            assert!((rotated[k] - cov[k]).abs() < 1e-5 * expected);
        }
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = Camera::facing_origin(64, 64, 20.0);
        assert!(project_one(&cam, [0.0, 0.0, -25.0], [1.0, 0.0, 0.0, 0.0], [0.1; 3]).is_none());
        let set = GaussianSet {
            positions: vec![[0.0, 0.0, -25.0], [0.0, 0.0, 0.0]],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]; 2],
            scales: vec![[0.05; 3]; 2],
            opacities: vec![0.5; 2],
            features: Array2::zeros((2, 3)),
            regions: vec![Region::Head; 2],
        };
        let splats = project_gaussians(&set, &cam);
        assert_eq!(splats.len(), 1);
        assert_eq!(splats[0].index, 1);
    }

    #[test]
    fn feature_width_checked() {
        let s = splat(1.0, 1.0, 1.0, 1.0, 0.5, vec![1.0, 2.0], 0);
        assert!(rasterize(&[s], 4, 4, 3, 0.0).is_err());
    }

    #[test]
    fn zero_refiner_returns_coarse_rgb() {
        let mut t = RenderTarget::new(9, 7, 5, 0.0);
        for (i, v) in t.color.iter_mut().enumerate() {
            *v = ((i * 37) % 100) as f32 / 100.0;
        }
        let out = refine(&t, &Refiner::new(5, 4, 1)).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                assert_eq!(out.pixel(x, y), &t.pixel(x, y)[..3]);
            }
        }
    }

    #[test]
    fn seeded_refiner_is_deterministic_and_clamped() {
        let mut t = RenderTarget::new(8, 8, 4, 0.0);
        for (i, v) in t.color.iter_mut().enumerate() {
            *v = ((i * 13) % 50) as f32 / 50.0;
        }
        let a = refine(&t, &Refiner::seeded(4, 4, 2)).unwrap();
        let b = refine(&t, &Refiner::seeded(4, 4, 2)).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, t.rgb().unwrap());
        assert!(refine(&t, &Refiner::new(3, 4, 2)).is_err());
    }
}
