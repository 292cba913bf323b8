//! Desk-scale neural primitives with seeded deterministic weights.
//!
//! Weights are drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` using a
//! ChaCha8 stream seeded per layer, so every block is reproducible from its
//! seed alone.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::image::Image;

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply(self, x: &mut Array2<f32>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| v.max(0.0));
        }
    }
}

/// Affine layer `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        Self::with_gain(input, output, seed, 1.0)
    }

    /// Uniform init scaled by `gain`.
    pub fn with_gain(input: usize, output: usize, seed: u64, gain: f32) -> Self {
        let bound = gain / (input.max(1) as f32).sqrt();
        let mut r = rng(seed);
        let weight = Array2::from_shape_simple_fn((input, output), || {
            if bound == 0.0 {
                0.0
            } else {
                r.gen_range(-bound..bound)
            }
        });
        let bias = Array1::from_shape_simple_fn(output, || if bound == 0.0 { 0.0 } else { r.gen_range(-bound..bound) });
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dims("linear layer input width", self.input_dim(), x.ncols()));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        out.insert(format!("{prefix}.weight"), Tensor::from_array2(&self.weight));
        out.insert(format!("{prefix}.bias"), Tensor::from_array1(&self.bias));
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        Ok(Self {
            weight: map.array2(&format!("{prefix}.weight"))?,
            bias: map.array1(&format!("{prefix}.bias"))?,
        })
    }
}

/// Layer widths, activation and seed of an MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[d_in, hidden..., d_out]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self {
            widths,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Invalid("an MLP needs at least one layer".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Invalid(format!("MLP widths must be >= 1: {:?}", self.widths)));
        }
        Ok(())
    }
}

/// Stack of affine layers with the activation applied between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        Self::with_output_gain(spec, 1.0)
    }

    /// Like [`Mlp::new`] but scales the last layer's init range by `gain`.
    pub fn with_output_gain(spec: &MlpSpec, gain: f32) -> Result<Self> {
        spec.validate()?;
        let n = spec.widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let g = if i + 1 == n { gain } else { 1.0 };
                Linear::with_gain(spec.widths[i], spec.widths[i + 1], mix_seed(spec.seed, i as u64), g)
            })
            .collect();
        Ok(Self {
            layers,
            activation: spec.activation,
        })
    }

    /// Builds an MLP from explicit `(W, b)` pairs.
    pub fn from_layers(layers: Vec<(Array2<f32>, Array1<f32>)>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("an MLP needs at least one layer".into()));
        }
        for (i, (w, b)) in layers.iter().enumerate() {
            if w.ncols() != b.len() {
                return Err(Error::dims(format!("bias of layer {i}"), w.ncols(), b.len()));
            }
            if i > 0 && layers[i - 1].0.ncols() != w.nrows() {
                return Err(Error::dims(
                    format!("input of layer {i}"),
                    layers[i - 1].0.ncols(),
                    w.nrows(),
                ));
            }
        }
        Ok(Self {
            layers: layers
                .into_iter()
                .map(|(weight, bias)| Linear { weight, bias })
                .collect(),
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            self.activation.apply(&mut h);
            h = layer.forward(h.view())?;
        }
        Ok(h)
    }

    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        out.insert(
            format!("{prefix}.activation"),
            Tensor::from_u32(vec![1], vec![matches!(self.activation, Activation::Relu) as u32]),
        );
        for (i, l) in self.layers.iter().enumerate() {
            l.store(&format!("{prefix}.{i}"), out);
        }
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        let act = map.u32s(&format!("{prefix}.activation"))?;
        let activation = if act.first() == Some(&1) {
            Activation::Relu
        } else {
            Activation::None
        };
        let mut layers = Vec::new();
        while map.contains(&format!("{prefix}.{}.weight", layers.len())) {
            layers.push(Linear::load(&format!("{prefix}.{}", layers.len()), map)?);
        }
        Mlp::from_layers(layers.into_iter().map(|l| (l.weight, l.bias)).collect(), activation)
    }
}

pub fn mlp_forward(spec: &MlpSpec, x: ArrayView2<f32>) -> Result<Array2<f32>> {
    Mlp::new(spec)?.forward(x)
}

/// Row-wise softmax, numerically stabilized by the row maximum.
pub fn softmax_rows(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm(x: ArrayView2<f32>) -> Array2<f32> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.len() as f32;
        let mean = row.sum() / n;
        let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Scaled dot-product attention for one head.
///
/// Returns `(softmax(q k^T / sqrt(d)) v, probabilities)`.
pub fn scaled_dot_attention(
    q: ArrayView2<f32>,
    k: ArrayView2<f32>,
    v: ArrayView2<f32>,
) -> Result<(Array2<f32>, Array2<f32>)> {
    if q.ncols() != k.ncols() {
        return Err(Error::dims("attention key width", q.ncols(), k.ncols()));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::dims("attention value rows", k.nrows(), v.nrows()));
    }
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let mut probs = q.dot(&k.t()) * scale;
    softmax_rows(&mut probs);
    Ok((probs.dot(&v), probs))
}

/// One decoder layer: cross-attention sublayer and feed-forward sublayer,
/// each pre-normalized and residual.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl DecoderLayer {
    fn new(dim: usize, kv_dim: usize, seed: u64) -> Self {
        Self {
            query: Linear::new(dim, dim, mix_seed(seed, 1)),
            key: Linear::new(kv_dim, dim, mix_seed(seed, 2)),
            value: Linear::new(kv_dim, dim, mix_seed(seed, 3)),
            output: Linear::new(dim, dim, mix_seed(seed, 4)),
            ff_in: Linear::new(dim, 4 * dim, mix_seed(seed, 5)),
            ff_out: Linear::new(4 * dim, dim, mix_seed(seed, 6)),
        }
    }

    /// Multi-head attention output (before the output projection) and the
    /// per-head probability matrices.
    pub fn attend(
        &self,
        x: ArrayView2<f32>,
        kv: ArrayView2<f32>,
        heads: usize,
    ) -> Result<(Array2<f32>, Vec<Array2<f32>>)> {
        let q = self.query.forward(layer_norm(x).view())?;
        let k = self.key.forward(kv)?;
        let v = self.value.forward(kv)?;
        let dh = q.ncols() / heads;
        let mut mixed = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let (o, p) = scaled_dot_attention(q.slice(cols), k.slice(cols), v.slice(cols))?;
            mixed.slice_mut(cols).assign(&o);
            probs.push(p);
        }
        Ok((mixed, probs))
    }

    pub fn forward(&self, x: ArrayView2<f32>, kv: ArrayView2<f32>, heads: usize) -> Result<Array2<f32>> {
        let (mixed, _) = self.attend(x, kv, heads)?;
        let x = &x + &self.output.forward(mixed.view())?;
        let mut hidden = self.ff_in.forward(layer_norm(x.view()).view())?;
        Activation::Relu.apply(&mut hidden);
        Ok(&x + &self.ff_out.forward(hidden.view())?)
    }
}

/// Stack of cross-attention decoder layers mapping queries to global features.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub layers: Vec<DecoderLayer>,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(dim: usize, kv_dim: usize, layers: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::HeadsIndivisible { dim, heads });
        }
        if layers == 0 || kv_dim == 0 {
            return Err(Error::Invalid(
                "cross-attention needs at least one layer and kv width".into(),
            ));
        }
        Ok(Self {
            layers: (0..layers)
                .map(|l| DecoderLayer::new(dim, kv_dim, mix_seed(seed, 100 + l as u64)))
                .collect(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].query.output_dim()
    }

    pub fn kv_dim(&self) -> usize {
        self.layers[0].key.input_dim()
    }

    pub fn forward(&self, queries: ArrayView2<f32>, keys_values: ArrayView2<f32>) -> Result<Array2<f32>> {
        if queries.ncols() != self.dim() {
            return Err(Error::dims("attention query width", self.dim(), queries.ncols()));
        }
        if keys_values.ncols() != self.kv_dim() {
            return Err(Error::dims(
                "attention key/value width",
                self.kv_dim(),
                keys_values.ncols(),
            ));
        }
        let mut x = queries.to_owned();
        for layer in &self.layers {
            x = layer.forward(x.view(), keys_values, self.heads)?;
        }
        Ok(x)
    }

    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        out.insert(
            format!("{prefix}.heads"),
            Tensor::from_u32(vec![1], vec![self.heads as u32]),
        );
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.{i}");
            l.query.store(&format!("{p}.query"), out);
            l.key.store(&format!("{p}.key"), out);
            l.value.store(&format!("{p}.value"), out);
            l.output.store(&format!("{p}.output"), out);
            l.ff_in.store(&format!("{p}.ff_in"), out);
            l.ff_out.store(&format!("{p}.ff_out"), out);
        }
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        let heads = *map
            .u32s(&format!("{prefix}.heads"))?
            .first()
            .ok_or_else(|| Error::MissingSection(format!("{prefix}.heads")))? as usize;
        let mut layers = Vec::new();
        while map.contains(&format!("{prefix}.{}.query.weight", layers.len())) {
            let p = format!("{prefix}.{}", layers.len());
            layers.push(DecoderLayer {
                query: Linear::load(&format!("{p}.query"), map)?,
                key: Linear::load(&format!("{p}.key"), map)?,
                value: Linear::load(&format!("{p}.value"), map)?,
                output: Linear::load(&format!("{p}.output"), map)?,
                ff_in: Linear::load(&format!("{p}.ff_in"), map)?,
                ff_out: Linear::load(&format!("{p}.ff_out"), map)?,
            });
        }
        if layers.is_empty() {
            return Err(Error::MissingSection(format!("{prefix}.0")));
        }
        Ok(Self { layers, heads })
    }
}

pub fn cross_attention(
    queries: ArrayView2<f32>,
    keys_values: ArrayView2<f32>,
    layers: usize,
    heads: usize,
    seed: u64,
) -> Result<Array2<f32>> {
    CrossAttention::new(queries.ncols(), keys_values.ncols(), layers, heads, seed)?.forward(queries, keys_values)
}

/// Learnable per-vertex query table initialized in `[-0.02, 0.02]`.
pub fn positional_encoding_table(vertex_count: usize, dim: usize, seed: u64) -> Array2<f32> {
    let mut r = rng(mix_seed(seed, 0x5045));
    Array2::from_shape_simple_fn((vertex_count, dim), || r.gen_range(-0.02f32..=0.02))
}

/// 3x3 same-padded convolution over `C x H x W` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    /// `out x in x 3 x 3` flattened row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3x3 {
    pub fn new(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let bound = 1.0 / ((in_channels * 9) as f32).sqrt();
        let mut r = rng(seed);
        let weight = (0..out_channels * in_channels * 9)
            .map(|_| r.gen_range(-bound..bound))
            .collect();
        let bias = (0..out_channels).map(|_| r.gen_range(-bound..bound)).collect();
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Result<Array3<f32>> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::dims("convolution input channels", self.in_channels, c));
        }
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let plane = h * w;
        let mut out = vec![0.0f32; self.out_channels * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(oc, dst)| {
            dst.fill(self.bias[oc]);
            for ic in 0..c {
                let input = &src[ic * plane..(ic + 1) * plane];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = self.weight[((oc * c + ic) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                        let y0 = (-dy).max(0) as usize;
                        let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let srow = &input[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        });
        Ok(Array3::from_shape_vec((self.out_channels, h, w), out).expect("shape"))
    }

    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        out.insert(
            format!("{prefix}.weight"),
            Tensor::from_f32(vec![self.out_channels, self.in_channels, 3, 3], self.weight.clone()),
        );
        out.insert(
            format!("{prefix}.bias"),
            Tensor::from_f32(vec![self.out_channels], self.bias.clone()),
        );
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        let w = map.get(&format!("{prefix}.weight"))?;
        if w.shape.len() != 4 || w.shape[2] != 3 || w.shape[3] != 3 {
            return Err(Error::Invalid(format!("{prefix}.weight is not a 3x3 kernel")));
        }
        let bias = map.f32s(&format!("{prefix}.bias"))?.to_vec();
        if bias.len() != w.shape[0] {
            return Err(Error::dims(format!("{prefix}.bias"), w.shape[0], bias.len()));
        }
        Ok(Self {
            weight: w.f32s()?.to_vec(),
            bias,
            in_channels: w.shape[1],
            out_channels: w.shape[0],
        })
    }
}

/// Shape and seed of the synthetic image backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Square patch edge in image pixels.
    pub patch: usize,
    pub local_channels: usize,
    /// `(height, width)` of the local feature map.
    pub local_size: (usize, usize),
    pub identity_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch: 14,
            local_channels: 32,
            local_size: (37, 37),
            identity_dim: 64,
            seed: 0,
        }
    }
}

/// Local feature map, identity tokens and per-vertex global features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `C x H x W`.
    pub local: Array3<f32>,
    /// `T x D`.
    pub identity: Array2<f32>,
    /// One `N_k x d` table per LOD level (filled by the avatar pipeline).
    pub global_per_vertex: Vec<Array2<f32>>,
}

impl FeatureBundle {
    pub fn shape_header(&self) -> serde_json::Value {
        serde_json::json!({
            "local": self.local.shape(),
            "identity": self.identity.shape(),
            "global_per_vertex": self.global_per_vertex.iter().map(|g| g.shape().to_vec()).collect::<Vec<_>>(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.local.iter().all(|v| v.is_finite())
            && self.identity.iter().all(|v| v.is_finite())
            && self.global_per_vertex.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Number of per-patch statistics: RGB mean, RGB variance, mean |dx|, mean |dy|.
pub const PATCH_STATS: usize = 8;

/// Deterministic stand-in for a pretrained image feature extractor.
pub trait FeatureExtractor {
    fn extract(&self, image: &Image) -> Result<FeatureBundle>;
}

/// Patch-statistics backbone with seeded projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBackbone {
    pub config: BackboneConfig,
    local_proj: Linear,
    identity_proj: Linear,
}

impl SyntheticBackbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        if config.patch == 0 || config.local_channels == 0 || config.identity_dim == 0 {
            return Err(Error::Invalid("backbone dimensions must be positive".into()));
        }
        if config.local_size.0 == 0 || config.local_size.1 == 0 {
            return Err(Error::Invalid("local feature map must be non-empty".into()));
        }
        let local_proj = Linear::new(PATCH_STATS, config.local_channels, mix_seed(config.seed, 0xB0));
        let identity_proj = Linear::new(PATCH_STATS, config.identity_dim, mix_seed(config.seed, 0xB1));
        Ok(Self {
            config,
            local_proj,
            identity_proj,
        })
    }

    /// Per-patch statistics, `gh x gw x PATCH_STATS`.
    pub fn patch_statistics(&self, image: &Image) -> Result<Array3<f32>> {
        let p = self.config.patch;
        if image.channels != 3 {
            return Err(Error::dims("backbone image channels", 3, image.channels));
        }
        if image.width < p || image.height < p {
            return Err(Error::Invalid(format!(
                "image {}x{} is smaller than one {p}x{p} patch",
                image.width, image.height
            )));
        }
        if image.data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Invalid("backbone image values must lie in [0, 1]".into()));
        }
        let (gh, gw) = (image.height / p, image.width / p);
        let mut stats = Array3::zeros((gh, gw, PATCH_STATS));
        let gray = |x: usize, y: usize| {
            let px = image.pixel(x, y);
            (px[0] + px[1] + px[2]) / 3.0
        };
        for py in 0..gh {
            for px in 0..gw {
                let (x0, y0) = (px * p, py * p);
                let n = (p * p) as f64;
                let mut mean = [0.0f64; 3];
                let mut sq = [0.0f64; 3];
                for y in y0..y0 + p {
                    for x in x0..x0 + p {
                        let v = image.pixel(x, y);
                        for c in 0..3 {
                            mean[c] += v[c] as f64;
                            sq[c] += (v[c] as f64) * (v[c] as f64);
                        }
                    }
                }
                let mut gx = 0.0f64;
                let mut gy = 0.0f64;
                for y in y0..y0 + p {
                    for x in x0..x0 + p {
                        if x + 1 < x0 + p {
                            gx += (gray(x + 1, y) - gray(x, y)).abs() as f64;
                        }
                        if y + 1 < y0 + p {
                            gy += (gray(x, y + 1) - gray(x, y)).abs() as f64;
                        }
                    }
                }
                let mut cell = stats.slice_mut(s![py, px, ..]);
                for c in 0..3 {
                    let m = mean[c] / n;
                    cell[c] = m as f32;
                    cell[3 + c] = (sq[c] / n - m * m).max(0.0) as f32;
                }
                let pairs = (p * (p - 1)).max(1) as f64;
                cell[6] = (gx / pairs) as f32;
                cell[7] = (gy / pairs) as f32;
            }
        }
        Ok(stats)
    }
}

/// Bilinear resize of `C x h x w` to `C x H x W` with half-pixel centres and
/// edge clamping.
pub fn resize_bilinear(src: ArrayView3<f32>, height: usize, width: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    let axis = |i: usize, n_out: usize, n_in: usize| {
        let t = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = t.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (t - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..height).map(|y| axis(y, height, h)).collect();
    let xs: Vec<_> = (0..width).map(|x| axis(x, width, w)).collect();
    Array3::from_shape_fn((c, height, width), |(ch, y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
        let bot = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Sinusoidal embedding of a patch's grid coordinates.
fn patch_embedding(row: usize, col: usize, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|i| {
            let pos = if i % 2 == 0 { row } else { col } as f64;
            let freq = 1.0 / 100f64.powf((i / 2) as f64 / (dim as f64 / 2.0).max(1.0));
            (0.1 * if (i / 2) % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }) as f32
        })
        .collect()
}

impl FeatureExtractor for SyntheticBackbone {
    fn extract(&self, image: &Image) -> Result<FeatureBundle> {
        let stats = self.patch_statistics(image)?;
        let (gh, gw, _) = stats.dim();
        let flat = stats
            .view()
            .into_shape_with_order((gh * gw, PATCH_STATS))
            .expect("contiguous stats")
            .to_owned();
        let projected = self.local_proj.forward(flat.view())?;
        let grid = Array3::from_shape_vec(
            (self.config.local_channels, gh, gw),
            projected.t().iter().copied().collect(),
        )
        .expect("channel-major grid");
        let (lh, lw) = self.config.local_size;
        let local = resize_bilinear(grid.view(), lh, lw);

        let mut identity = self.identity_proj.forward(flat.view())?;
        for (t, mut row) in identity.axis_iter_mut(Axis(0)).enumerate() {
            let emb = patch_embedding(t / gw, t % gw, self.config.identity_dim);
            for (v, e) in row.iter_mut().zip(emb) {
                *v += e;
            }
        }
        Ok(FeatureBundle {
            local,
            identity,
            global_per_vertex: Vec::new(),
        })
    }
}

pub fn synthetic_backbone(image: &Image, config: &BackboneConfig) -> Result<FeatureBundle> {
    SyntheticBackbone::new(config.clone())?.extract(image)
}
