//! Gaussian parameter sets for the head and shoulder regions.

use ndarray::{s, Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::mesh::{mean_incident_edge_length, Edge};
use crate::neural::{mix_seed, Activation, Conv3x3, Mlp, MlpSpec};
use crate::visibility::DepthBuffer;

pub const SCALE_MIN: f32 = 1e-4;
pub const SCALE_MAX: f32 = 0.1;

/// Opacities are kept strictly inside `(0, 1)`.
const OPACITY_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Region {
    Head = 0,
    Shoulder = 1,
}

/// Struct-of-arrays Gaussian set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f32; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f32; 4]>,
    pub scales: Vec<[f32; 3]>,
    pub opacities: Vec<f32>,
    /// `N x C_feat`; channels 0..3 are RGB.
    pub features: Array2<f32>,
    pub regions: Vec<Region>,
}

impl GaussianSet {
    pub fn empty(feature_dim: usize) -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            opacities: Vec::new(),
            features: Array2::zeros((0, feature_dim)),
            regions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn count(&self, region: Region) -> usize {
        self.regions.iter().filter(|&&r| r == region).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        for (what, len) in [
            ("gaussian rotations", self.rotations.len()),
            ("gaussian scales", self.scales.len()),
            ("gaussian opacities", self.opacities.len()),
            ("gaussian feature rows", self.features.nrows()),
            ("gaussian region tags", self.regions.len()),
        ] {
            if len != n {
                return Err(Error::dims(what, n, len));
            }
        }
        for i in 0..n {
            let q = self.rotations[i];
            let norm = q.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("rotation {i} has norm {norm}")));
            }
            if self.scales[i].iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Invalid(format!(
                    "scale {i} is not positive: {:?}",
                    self.scales[i]
                )));
            }
            let o = self.opacities[i];
            if !(o > 0.0 && o < 1.0) {
                return Err(Error::Invalid(format!("opacity {i} = {o} is outside (0, 1)")));
            }
            if self.positions[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("position {i}")));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian features".into()));
        }
        Ok(())
    }

    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        let n = self.len();
        out.insert(format!("{prefix}.positions"), Tensor::from_vec3s(&self.positions));
        out.insert(
            format!("{prefix}.rotations"),
            Tensor::from_f32(vec![n, 4], self.rotations.iter().flatten().copied().collect()),
        );
        out.insert(format!("{prefix}.scales"), Tensor::from_vec3s(&self.scales));
        out.insert(
            format!("{prefix}.opacities"),
            Tensor::from_f32(vec![n], self.opacities.clone()),
        );
        out.insert(format!("{prefix}.features"), Tensor::from_array2(&self.features));
        out.insert(
            format!("{prefix}.regions"),
            Tensor::from_u32(vec![n], self.regions.iter().map(|&r| r as u32).collect()),
        );
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        let rotations = map
            .f32s(&format!("{prefix}.rotations"))?
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let regions = map
            .u32s(&format!("{prefix}.regions"))?
            .iter()
            .map(|&r| match r {
                0 => Ok(Region::Head),
                1 => Ok(Region::Shoulder),
                other => Err(Error::Invalid(format!("unknown region tag {other}"))),
            })
            .collect::<Result<_>>()?;
        let set = Self {
            positions: map.vec3s(&format!("{prefix}.positions"))?,
            rotations,
            scales: map.vec3s(&format!("{prefix}.scales"))?,
            opacities: map.f32s(&format!("{prefix}.opacities"))?.to_vec(),
            features: map.array2(&format!("{prefix}.features"))?,
            regions,
        };
        set.validate()?;
        Ok(set)
    }

    /// Little-endian bytes of every non-position attribute.
    pub fn attribute_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for q in &self.rotations {
            q.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for s in &self.scales {
            s.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        self.opacities
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.features
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend(self.regions.iter().map(|&r| r as u8));
        out
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn opacity(raw: f32) -> f32 {
    sigmoid(raw).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS)
}

fn scale(base: f32, raw: f32) -> f32 {
    let s = base * raw.exp();
    if s.is_nan() {
        SCALE_MIN
    } else {
        s.clamp(SCALE_MIN, SCALE_MAX)
    }
}

fn unit_quaternion(raw: [f32; 4]) -> [f32; 4] {
    let n = raw.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    raw.map(|v| (v as f64 / n) as f32)
}

/// Activations shared by both branches. Columns of `raw` are
/// `[features.., opacity, scale x3, rotation x4]`.
fn activate(
    raw: ArrayView2<f32>,
    feature_dim: usize,
    base_scales: &[f32],
) -> (Vec<[f32; 4]>, Vec<[f32; 3]>, Vec<f32>, Array2<f32>) {
    let n = raw.nrows();
    let mut features = raw.slice(s![.., ..feature_dim]).to_owned();
    features.slice_mut(s![.., ..feature_dim.min(3)]).mapv_inplace(sigmoid);
    let mut rotations = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut opacities = Vec::with_capacity(n);
    for (i, row) in raw.axis_iter(Axis(0)).enumerate() {
        let o = feature_dim;
        opacities.push(opacity(row[o]));
        let b = base_scales[i];
        scales.push([scale(b, row[o + 1]), scale(b, row[o + 2]), scale(b, row[o + 3])]);
        rotations.push(unit_quaternion([row[o + 4], row[o + 5], row[o + 6], row[o + 7]]));
    }
    (rotations, scales, opacities, features)
}

/// Raw attribute width for a given feature width.
pub fn attribute_width(feature_dim: usize) -> usize {
    feature_dim + 1 + 3 + 4
}

/// Per-vertex attribute MLPs for the head region.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRegressor {
    pub color: Mlp,
    pub opacity: Mlp,
    pub scale: Mlp,
    pub rotation: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRegressorConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Init range multiplier of every output layer.
    pub output_gain: f32,
    /// Initial bias of the opacity logit.
    pub opacity_bias: f32,
    pub seed: u64,
}

impl HeadRegressor {
    pub fn new(cfg: &HeadRegressorConfig) -> Result<Self> {
        let mlp = |out: usize, tag: u64| {
            Mlp::with_output_gain(
                &MlpSpec::new(
                    vec![cfg.input_dim, cfg.hidden, out],
                    Activation::Relu,
                    mix_seed(cfg.seed, tag),
                ),
                cfg.output_gain,
            )
        };
        let mut opacity = mlp(1, 1)?;
        let mut scale = mlp(3, 2)?;
        let mut rotation = mlp(4, 3)?;
        opacity.layers.last_mut().expect("layer").bias.fill(cfg.opacity_bias);
        scale.layers.last_mut().expect("layer").bias.fill(0.0);
        let rb = &mut rotation.layers.last_mut().expect("layer").bias;
        rb.fill(0.0);
        rb[0] = 1.0;
        Ok(Self {
            color: mlp(cfg.feature_dim, 0)?,
            opacity,
            scale,
            rotation,
        })
    }

    /// Regressor whose every output layer is zero except the identity
    /// rotation bias.
    pub fn zeroed(input_dim: usize, hidden: usize, feature_dim: usize) -> Result<Self> {
        let mut r = Self::new(&HeadRegressorConfig {
            input_dim,
            hidden,
            feature_dim,
            output_gain: 0.0,
            opacity_bias: 0.0,
            seed: 0,
        })?;
        r.color.layers.last_mut().expect("layer").bias.fill(0.0);
        Ok(r)
    }

    pub fn input_dim(&self) -> usize {
        self.color.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.color.output_dim()
    }

    /// Raw `[features, opacity, scale, rotation]` rows.
    pub fn raw(&self, fused: ArrayView2<f32>) -> Result<Array2<f32>> {
        let parts = [
            self.color.forward(fused)?,
            self.opacity.forward(fused)?,
            self.scale.forward(fused)?,
            self.rotation.forward(fused)?,
        ];
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("equal row counts"))
    }

    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        self.color.store(&format!("{prefix}.color"), out);
        self.opacity.store(&format!("{prefix}.opacity"), out);
        self.scale.store(&format!("{prefix}.scale"), out);
        self.rotation.store(&format!("{prefix}.rotation"), out);
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        Ok(Self {
            color: Mlp::load(&format!("{prefix}.color"), map)?,
            opacity: Mlp::load(&format!("{prefix}.opacity"), map)?,
            scale: Mlp::load(&format!("{prefix}.scale"), map)?,
            rotation: Mlp::load(&format!("{prefix}.rotation"), map)?,
        })
    }
}

/// Head Gaussians at the level-K vertices. `edges` are the level-K mesh
/// edges, used for the per-vertex base scale.
pub fn regress_head(
    fused: ArrayView2<f32>,
    regressor: &HeadRegressor,
    vertices: &[[f32; 3]],
    edges: &[Edge],
) -> Result<GaussianSet> {
    if fused.nrows() != vertices.len() {
        return Err(Error::dims("fused feature rows", vertices.len(), fused.nrows()));
    }
    if fused.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fused head features".into()));
    }
    let raw = regressor.raw(fused)?;
    let base = mean_incident_edge_length(vertices, edges);
    let (rotations, scales, opacities, features) = activate(raw.view(), regressor.feature_dim(), &base);
    Ok(GaussianSet {
        positions: vertices.to_vec(),
        rotations,
        scales,
        opacities,
        features,
        regions: vec![Region::Head; vertices.len()],
    })
}

/// Portrait pixels in the lower image part that the head depth buffer
/// leaves uncovered.
pub fn shoulder_mask(portrait: &[bool], depth: &DepthBuffer, eta: f64) -> Result<Vec<bool>> {
    let (w, h) = (depth.width, depth.height);
    if portrait.len() != w * h {
        return Err(Error::dims("portrait mask pixels", w * h, portrait.len()));
    }
    let first_row = (eta * h as f64).ceil().max(0.0) as usize;
    Ok((0..w * h)
        .map(|i| portrait[i] && !depth.data[i].is_finite() && i / w >= first_row)
        .collect())
}

/// Nearest-neighbour resample of an image-resolution mask to `mh x mw` cells.
pub fn downsample_mask(mask: &[bool], width: usize, height: usize, mh: usize, mw: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(mh * mw);
    for i in 0..mh {
        let y = (((i as f64 + 0.5) * height as f64 / mh as f64) as usize).min(height - 1);
        for j in 0..mw {
            let x = (((j as f64 + 0.5) * width as f64 / mw as f64) as usize).min(width - 1);
            out.push(mask[y * width + x]);
        }
    }
    out
}

/// Convolutional attribute head for the shoulder plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ShoulderRegressor {
    pub conv: Conv3x3,
    pub feature_dim: usize,
}

impl ShoulderRegressor {
    /// Seeded conv with small weights, identity rotation bias and the given
    /// opacity bias.
    pub fn new(local_channels: usize, feature_dim: usize, seed: u64, gain: f32, opacity_bias: f32) -> Self {
        let out = attribute_width(feature_dim) + 1;
        let mut conv = Conv3x3::new(local_channels, out, seed);
        conv.weight.iter_mut().for_each(|w| *w *= gain);
        conv.bias.iter_mut().for_each(|b| *b *= gain);
        conv.bias[feature_dim] = opacity_bias;
        conv.bias[feature_dim + 1..feature_dim + 4].fill(0.0);
        conv.bias[feature_dim + 4..feature_dim + 8].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        Self { conv, feature_dim }
    }

    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        self.conv.store(&format!("{prefix}.conv"), out);
        out.insert(
            format!("{prefix}.feature_dim"),
            Tensor::from_u32(vec![1], vec![self.feature_dim as u32]),
        );
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        let feature_dim = map.u32s(&format!("{prefix}.feature_dim"))?[0] as usize;
        let conv = Conv3x3::load(&format!("{prefix}.conv"), map)?;
        if conv.out_channels != attribute_width(feature_dim) + 1 {
            return Err(Error::dims(
                "shoulder conv outputs",
                attribute_width(feature_dim) + 1,
                conv.out_channels,
            ));
        }
        Ok(Self { conv, feature_dim })
    }
}

/// Anchor grid of the shoulder plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ShoulderPlane {
    pub rows: usize,
    pub cols: usize,
    /// Surviving cells in row-major order.
    pub cells: Vec<(usize, usize)>,
    pub anchors: Vec<[f32; 3]>,
    pub directions: Vec<[f32; 3]>,
}

impl ShoulderPlane {
    pub fn new(camera: &Camera, rows: usize, cols: usize, cell_mask: &[bool], plane_depth: f64) -> Self {
        let mut plane = Self {
            rows,
            cols,
            cells: Vec::new(),
            anchors: Vec::new(),
            directions: Vec::new(),
        };
        for i in 0..rows {
            for j in 0..cols {
                if !cell_mask[i * cols + j] {
                    continue;
                }
                let px = cell_center(camera, rows, cols, i, j);
                let a = camera.unproject(px, plane_depth);
                let d = camera.ray_direction(px);
                plane.cells.push((i, j));
                plane.anchors.push([a.x as f32, a.y as f32, a.z as f32]);
                plane.directions.push([d.x as f32, d.y as f32, d.z as f32]);
            }
        }
        plane
    }
}

/// Image-space centre of feature cell `(i, j)`.
pub fn cell_center(camera: &Camera, rows: usize, cols: usize, i: usize, j: usize) -> [f64; 2] {
    [
        (j as f64 + 0.5) * camera.width as f64 / cols as f64,
        (i as f64 + 0.5) * camera.height as f64 / rows as f64,
    ]
}

/// Shoulder Gaussians on an image-aligned plane at camera depth `plane_depth`.
///
/// `mask` is at image resolution and is resampled to the feature plane.
pub fn regress_shoulder(
    local_map: ArrayView3<f32>,
    mask: &[bool],
    camera: &Camera,
    regressor: &ShoulderRegressor,
    plane_depth: f64,
) -> Result<(GaussianSet, ShoulderPlane)> {
    let (_, mh, mw) = local_map.dim();
    if mask.len() != camera.width * camera.height {
        return Err(Error::dims(
            "shoulder mask pixels",
            camera.width * camera.height,
            mask.len(),
        ));
    }
    if !(plane_depth > 0.0) || !plane_depth.is_finite() {
        return Err(Error::Invalid(format!(
            "shoulder plane depth {plane_depth} must be positive"
        )));
    }
    let cells = downsample_mask(mask, camera.width, camera.height, mh, mw);
    let plane = ShoulderPlane::new(camera, mh, mw, &cells, plane_depth);
    let fd = regressor.feature_dim;
    if plane.cells.is_empty() {
        return Ok((GaussianSet::empty(fd), plane));
    }
    let attrs = regressor.conv.forward(local_map)?;
    let width = attribute_width(fd);
    let raw = Array2::from_shape_fn((plane.cells.len(), width + 1), |(n, c)| {
        let (i, j) = plane.cells[n];
        attrs[[c, i, j]]
    });
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("shoulder attributes".into()));
    }
    let (fx, fy) = camera.pixel_focal();
    let cell_px = (camera.width as f64 / mw as f64).max(camera.height as f64 / mh as f64);
    let footprint = (cell_px * plane_depth / fx.min(fy)) as f32;
    let base = vec![footprint; plane.cells.len()];
    let (rotations, scales, opacities, features) = activate(raw.slice(s![.., ..width]), fd, &base);
    let positions = plane
        .anchors
        .iter()
        .zip(&plane.directions)
        .enumerate()
        .map(|(n, (a, d))| {
            let o = raw[[n, width]];
            [a[0] + o * d[0], a[1] + o * d[1], a[2] + o * d[2]]
        })
        .collect();
    let n = plane.cells.len();
    Ok((
        GaussianSet {
            positions,
            rotations,
            scales,
            opacities,
            features,
            regions: vec![Region::Shoulder; n],
        },
        plane,
    ))
}

/// Head points followed by shoulder points.
pub fn combine(head: &GaussianSet, shoulder: &GaussianSet) -> Result<GaussianSet> {
    if head.feature_dim() != shoulder.feature_dim() {
        return Err(Error::dims(
            "shoulder feature width",
            head.feature_dim(),
            shoulder.feature_dim(),
        ));
    }
    let cat =
        |a: &Array2<f32>, b: &Array2<f32>| ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("equal widths");
    Ok(GaussianSet {
        positions: [head.positions.as_slice(), &shoulder.positions].concat(),
        rotations: [head.rotations.as_slice(), &shoulder.rotations].concat(),
        scales: [head.scales.as_slice(), &shoulder.scales].concat(),
        opacities: [head.opacities.as_slice(), &shoulder.opacities].concat(),
        features: cat(&head.features, &shoulder.features),
        regions: [head.regions.as_slice(), &shoulder.regions].concat(),
    })
}
