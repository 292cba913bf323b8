//! Avatar lifecycle: one-shot build, snapshots, reenactment and LOD selection.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::archive::{self, TensorMap};
use crate::config::AvatarConfig;
use crate::error::{Error, Result, StageExt};
use crate::gaussians::{
    combine, regress_head, regress_shoulder, shoulder_mask, GaussianSet, HeadRegressor, HeadRegressorConfig,
    ShoulderRegressor,
};
use crate::geometry::{Camera, Vec3};
use crate::image::{portrait_mask, Image};
use crate::mesh::{unique_edges, Face};
use crate::model::{morph, skin, ParametricHeadModel, PoseParams};
use crate::neural::{
    mix_seed, positional_encoding_table, Activation, CrossAttention, FeatureBundle, FeatureExtractor, Linear, Mlp,
    MlpSpec, SyntheticBackbone,
};
use crate::render::Refiner;
use crate::subdivision::SubdivisionPlan;
use crate::visibility::{
    default_epsilon, fuse, rasterize_depth, sample_local, visibility_mask, DepthBuffer, VisibilityMask,
};

pub const SNAPSHOT_FORMAT: &str = "gsavatar-avatar";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Per-frame driving signal. Shape coefficients always come from the avatar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    /// Per-joint axis-angle rotation; entry 0 is the global rotation.
    pub pose: Vec<[f32; 3]>,
    #[serde(default)]
    pub translation: [f32; 3],
    pub expression: Vec<f32>,
    #[serde(default)]
    pub camera: Option<Camera>,
}

impl DriveParams {
    pub fn neutral(model: &ParametricHeadModel) -> Self {
        Self {
            pose: vec![[0.0; 3]; model.joint_count()],
            translation: [0.0; 3],
            expression: vec![0.0; model.expr_dim()],
            camera: None,
        }
    }

    pub fn from_params(params: &PoseParams) -> Self {
        Self {
            pose: params.pose.clone(),
            translation: params.translation,
            expression: params.expression.clone(),
            camera: None,
        }
    }
}

/// One line of a drive stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveRecord {
    pub frame: u64,
    /// Flattened per-joint axis-angle rotations.
    pub theta: Vec<f32>,
    pub psi: Vec<f32>,
    #[serde(default)]
    pub translation: Option<[f32; 3]>,
    #[serde(default)]
    pub camera: Option<Camera>,
}

impl DriveRecord {
    pub fn from_drive(frame: u64, drive: &DriveParams) -> Self {
        Self {
            frame,
            theta: drive.pose.iter().flatten().copied().collect(),
            psi: drive.expression.clone(),
            translation: Some(drive.translation),
            camera: drive.camera,
        }
    }

    pub fn to_drive(&self, model: &ParametricHeadModel) -> Result<DriveParams> {
        if self.theta.len() != 3 * model.joint_count() {
            return Err(Error::dims("theta values", 3 * model.joint_count(), self.theta.len()));
        }
        if self.psi.len() != model.expr_dim() {
            return Err(Error::dims("psi values", model.expr_dim(), self.psi.len()));
        }
        if let Some(c) = &self.camera {
            c.validate()?;
        }
        Ok(DriveParams {
            pose: self.theta.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            translation: self.translation.unwrap_or([0.0; 3]),
            expression: self.psi.clone(),
            camera: self.camera,
        })
    }
}

/// Parses newline-delimited drive records; blank lines are skipped.
pub fn parse_drive_stream(text: &str, model: &ParametricHeadModel) -> Result<Vec<(u64, DriveParams)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let rec: DriveRecord =
                serde_json::from_str(line).map_err(|e| Error::Invalid(format!("drive stream line {}: {e}", n + 1)))?;
            let drive = rec
                .to_drive(model)
                .map_err(|e| Error::Invalid(format!("drive stream line {}: {e}", n + 1)))?;
            Ok((rec.frame, drive))
        })
        .collect()
}

pub fn write_drive_stream(records: &[DriveRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub vertices: usize,
    pub edges: usize,
    pub faces: usize,
    pub visible: usize,
    pub head_points: usize,
    pub total_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub levels: Vec<LevelStats>,
    pub shoulder_points: usize,
    pub plane_depth: f64,
}

/// Intermediate products of a build, for reports and debug dumps.
#[derive(Debug, Clone)]
pub struct BuildTrace {
    pub timings_ms: Vec<(&'static str, f64)>,
    pub depth: Vec<DepthBuffer>,
    pub masks: Vec<VisibilityMask>,
    pub shoulder_mask: Vec<bool>,
    pub features: FeatureBundle,
}

/// Seeded network weights of an avatar.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub pe_table: Array2<f32>,
    pub attention: CrossAttention,
    pub offset_mlp: Mlp,
    /// `Phi_k` for `k = 0..K-1`.
    pub level_mlps: Vec<Mlp>,
    /// Projects local channels to the global width before fusion.
    pub local_proj: Linear,
    pub head: HeadRegressor,
    pub shoulder: ShoulderRegressor,
    pub refiner: Refiner,
}

impl Networks {
    pub fn new(config: &AvatarConfig, vertex_count: usize) -> Result<Self> {
        let d = config.pe_dim;
        let seed = config.seed;
        let local_c = config.backbone.local_channels;
        let level_mlps = (0..config.max_level)
            .map(|k| {
                Mlp::new(&MlpSpec::new(
                    vec![d, d, d],
                    Activation::Relu,
                    mix_seed(seed, 0x100 + k as u64),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            pe_table: positional_encoding_table(vertex_count, d, mix_seed(seed, 1)),
            attention: CrossAttention::new(
                d,
                config.backbone.identity_dim,
                config.attention_layers,
                config.attention_heads,
                mix_seed(seed, 2),
            )?,
            offset_mlp: Mlp::with_output_gain(
                &MlpSpec::new(vec![d, d, 3], Activation::Relu, mix_seed(seed, 3)),
                config.offset_gain,
            )?,
            level_mlps,
            local_proj: Linear::new(local_c, d, mix_seed(seed, 4)),
            head: HeadRegressor::new(&HeadRegressorConfig {
                input_dim: d,
                hidden: config.head_hidden,
                feature_dim: config.feature_dim,
                output_gain: config.output_gain,
                opacity_bias: config.opacity_bias,
                seed: mix_seed(seed, 5),
            })?,
            shoulder: ShoulderRegressor::new(
                local_c,
                config.feature_dim,
                mix_seed(seed, 6),
                config.shoulder_gain,
                config.opacity_bias,
            ),
            refiner: Refiner::new(config.feature_dim, config.refiner_width, mix_seed(seed, 7)),
        })
    }

    fn store(&self, out: &mut TensorMap) {
        out.insert("net.pe_table", crate::archive::Tensor::from_array2(&self.pe_table));
        self.attention.store("net.attention", out);
        self.offset_mlp.store("net.offset", out);
        for (k, m) in self.level_mlps.iter().enumerate() {
            m.store(&format!("net.level{k}"), out);
        }
        self.local_proj.store("net.local_proj", out);
        self.head.store("net.head", out);
        self.shoulder.store("net.shoulder", out);
        self.refiner.store("net.refiner", out);
    }

    fn load(map: &TensorMap, levels: usize) -> Result<Self> {
        Ok(Self {
            pe_table: map.array2("net.pe_table")?,
            attention: CrossAttention::load("net.attention", map)?,
            offset_mlp: Mlp::load("net.offset", map)?,
            level_mlps: (0..levels)
                .map(|k| Mlp::load(&format!("net.level{k}"), map))
                .collect::<Result<_>>()?,
            local_proj: Linear::load("net.local_proj", map)?,
            head: HeadRegressor::load("net.head", map)?,
            shoulder: ShoulderRegressor::load("net.shoulder", map)?,
            refiner: Refiner::load("net.refiner", map)?,
        })
    }
}

/// Built avatar. Every attribute except head positions is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Avatar {
    pub config: AvatarConfig,
    pub model: ParametricHeadModel,
    pub camera: Camera,
    /// Parameters of the source image; `shape` is the cached identity.
    pub identity: PoseParams,
    /// Cached vertex offsets of the identity.
    pub offset: Vec<[f32; 3]>,
    pub networks: Networks,
    /// Subdivision step `k -> k + 1`.
    pub plans: Vec<SubdivisionPlan>,
    /// Head Gaussians per level.
    pub heads: Vec<GaussianSet>,
    pub shoulder: GaussianSet,
    pub report: BuildReport,
}

fn timed<T>(timings: &mut Vec<(&'static str, f64)>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().stage(stage)?;
    timings.push((stage, start.elapsed().as_secs_f64() * 1e3));
    Ok(out)
}

fn subdivision_plans(model: &ParametricHeadModel, levels: usize) -> Result<Vec<SubdivisionPlan>> {
    let mut plans: Vec<SubdivisionPlan> = Vec::with_capacity(levels);
    for k in 0..levels {
        let plan = match plans.last() {
            None => SubdivisionPlan::new(model.vertex_count(), &model.faces)?,
            Some(prev) => SubdivisionPlan::new(prev.new_vertex_count(), &prev.faces)?,
        };
        debug_assert_eq!(plans.len(), k);
        plans.push(plan);
    }
    Ok(plans)
}

/// Level-0 posed vertices followed by each subdivision up to `lod`.
fn posed_levels(
    model: &ParametricHeadModel,
    params: &PoseParams,
    offset: &[[f32; 3]],
    plans: &[SubdivisionPlan],
    lod: usize,
) -> Result<Vec<Vec<[f32; 3]>>> {
    let morphed = morph(model, params, offset)?;
    let mut levels = vec![skin(model, &morphed, params)?];
    for plan in &plans[..lod] {
        let next = plan.apply_positions(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(levels)
}

/// Builds an avatar from a single background-removed portrait.
pub fn build_avatar(
    image: &Image,
    model: &ParametricHeadModel,
    camera: &Camera,
    params: &PoseParams,
    config: &AvatarConfig,
) -> Result<Avatar> {
    build_avatar_traced(image, model, camera, params, config).map(|(a, _)| a)
}

pub fn build_avatar_traced(
    image: &Image,
    model: &ParametricHeadModel,
    camera: &Camera,
    params: &PoseParams,
    config: &AvatarConfig,
) -> Result<(Avatar, BuildTrace)> {
    let mut timings = Vec::new();
    timed(&mut timings, "validate", || {
        config.validate()?;
        model.validate()?;
        camera.validate()?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::Invalid(format!(
                "image is {}x{} but the camera is {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        if image.channels != 3 {
            return Err(Error::dims("image channels", 3, image.channels));
        }
        Ok(())
    })?;
    let k_max = config.max_level;
    let networks = timed(&mut timings, "networks", || Networks::new(config, model.vertex_count()))?;
    let mut features = timed(&mut timings, "backbone", || {
        SyntheticBackbone::new(config.backbone.clone())?.extract(image)
    })?;
    let global0 = timed(&mut timings, "cross_attention", || {
        networks
            .attention
            .forward(networks.pe_table.view(), features.identity.view())
    })?;
    let offset: Vec<[f32; 3]> = timed(&mut timings, "offset", || {
        let o = networks.offset_mlp.forward(global0.view())?;
        Ok(o.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    })?;
    let plans = timed(&mut timings, "subdivision_plans", || subdivision_plans(model, k_max))?;
    let positions = timed(&mut timings, "morph_skin", || {
        posed_levels(model, params, &offset, &plans, k_max)
    })?;

    let eps = config.visibility_epsilon.unwrap_or_else(|| default_epsilon(camera));
    let mut globals = vec![global0];
    let mut heads = Vec::with_capacity(k_max + 1);
    let mut depth = Vec::with_capacity(k_max + 1);
    let mut masks = Vec::with_capacity(k_max + 1);
    let mut levels = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let faces: &[Face] = if k == 0 { &model.faces } else { &plans[k - 1].faces };
        let verts = &positions[k];
        let (d, m) = timed(&mut timings, "visibility", || {
            let d = rasterize_depth(verts, faces, camera);
            let m = visibility_mask(verts, faces, camera, &d, eps)?;
            Ok((d, m))
        })?;
        let fused = timed(&mut timings, "fusion", || {
            let (local, _) = sample_local(verts, camera, features.local.view())?;
            let local = networks.local_proj.forward(local.view())?;
            fuse(globals[k].view(), local.view(), &m)
        })?;
        let edges = if k < k_max {
            plans[k].edges.clone()
        } else {
            unique_edges(faces)?
        };
        let head = timed(&mut timings, "head_regression", || {
            regress_head(fused.view(), &networks.head, verts, &edges)
        })?;
        if k < k_max {
            let next = timed(&mut timings, "feature_subdivision", || {
                let mapped = networks.level_mlps[k].forward(globals[k].view())?;
                plans[k].apply_attrs(mapped.view())
            })?;
            globals.push(next);
        }
        levels.push(LevelStats {
            level: k,
            vertices: verts.len(),
            edges: edges.len(),
            faces: faces.len(),
            visible: m.visible_count(),
            head_points: head.len(),
            total_points: 0,
        });
        heads.push(head);
        depth.push(d);
        masks.push(m);
    }

    let (shoulder, s_mask, plane_depth) = timed(&mut timings, "shoulder", || {
        let finest = &positions[k_max];
        let m = &masks[k_max];
        let depths: Vec<f64> = finest
            .iter()
            .zip(&m.0)
            .filter(|(_, &vis)| vis == 1)
            .map(|(p, _)| camera.project(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).depth)
            .collect();
        let plane_depth = if depths.is_empty() {
            camera.to_camera(Vec3::zeros()).z
        } else {
            depths.iter().sum::<f64>() / depths.len() as f64
        };
        let s_mask = shoulder_mask(&portrait_mask(image), &depth[k_max], config.shoulder_eta)?;
        let (set, _) = regress_shoulder(features.local.view(), &s_mask, camera, &networks.shoulder, plane_depth)?;
        Ok((set, s_mask, plane_depth))
    })?;
    timed(&mut timings, "combine", || {
        for (k, h) in heads.iter().enumerate() {
            levels[k].total_points = combine(h, &shoulder)?.len();
        }
        Ok(())
    })?;

    features.global_per_vertex = globals;
    let avatar = Avatar {
        config: config.clone(),
        model: model.clone(),
        camera: *camera,
        identity: params.clone(),
        offset,
        networks,
        plans,
        heads,
        report: BuildReport {
            levels,
            shoulder_points: shoulder.len(),
            plane_depth,
        },
        shoulder,
    };
    let trace = BuildTrace {
        timings_ms: timings,
        depth,
        masks,
        shoulder_mask: s_mask,
        features,
    };
    Ok((avatar, trace))
}

impl Avatar {
    pub fn max_level(&self) -> usize {
        self.heads.len() - 1
    }

    /// Total Gaussian count per level (head plus shoulder).
    pub fn point_counts(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.len() + self.shoulder.len()).collect()
    }

    fn check_lod(&self, lod: usize) -> Result<()> {
        if lod > self.max_level() {
            return Err(Error::LevelOutOfRange {
                level: lod,
                max: self.max_level(),
            });
        }
        Ok(())
    }

    fn drive_params(&self, drive: &DriveParams) -> PoseParams {
        PoseParams {
            shape: self.identity.shape.clone(),
            pose: drive.pose.clone(),
            translation: drive.translation,
            expression: drive.expression.clone(),
        }
    }

    /// Head positions at `lod` for `drive`.
    pub fn head_positions(&self, drive: &DriveParams, lod: usize) -> Result<Vec<[f32; 3]>> {
        self.check_lod(lod)?;
        let params = self.drive_params(drive);
        let mut levels = posed_levels(&self.model, &params, &self.offset, &self.plans, lod)?;
        Ok(levels.pop().expect("non-empty"))
    }

    /// Gaussian set at `lod` driven by `drive`: new head positions spliced
    /// into the cached attributes, shoulder points unchanged.
    pub fn reenact(&self, drive: &DriveParams, lod: usize) -> Result<GaussianSet> {
        let positions = self.head_positions(drive, lod)?;
        let cached = &self.heads[lod];
        let head = GaussianSet {
            positions,
            ..cached.clone()
        };
        combine(&head, &self.shoulder)
    }

    /// Camera of `drive`, or the build camera.
    pub fn camera_for(&self, drive: &DriveParams) -> Camera {
        drive.camera.unwrap_or(self.camera)
    }

    fn metadata(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "config": serde_json::to_value(&self.config)?,
            "camera": serde_json::to_value(self.camera)?,
            "identity": serde_json::to_value(&self.identity)?,
            "report": serde_json::to_value(&self.report)?,
        }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut t = TensorMap::new();
        self.model.store("model", &mut t);
        t.insert("offset", crate::archive::Tensor::from_vec3s(&self.offset));
        self.networks.store(&mut t);
        for (k, h) in self.heads.iter().enumerate() {
            h.store(&format!("head{k}"), &mut t);
        }
        self.shoulder.store("shoulder", &mut t);
        archive::encode(&self.metadata()?, &t)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (meta, t) = archive::decode(bytes, origin)?;
        if meta.get("format").and_then(|f| f.as_str()) != Some(SNAPSHOT_FORMAT) {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                expected: SNAPSHOT_FORMAT.into(),
            });
        }
        let version = meta.get("version").and_then(|v| v.as_u64());
        if version != Some(SNAPSHOT_VERSION as u64) {
            return Err(Error::Version {
                found: format!("{version:?}"),
                expected: SNAPSHOT_VERSION.to_string(),
            });
        }
        let field = |name: &str| {
            meta.get(name)
                .cloned()
                .ok_or_else(|| Error::MissingSection(format!("metadata.{name}")))
        };
        let config: AvatarConfig = serde_json::from_value(field("config")?)?;
        let camera: Camera = serde_json::from_value(field("camera")?)?;
        let identity: PoseParams = serde_json::from_value(field("identity")?)?;
        let report: BuildReport = serde_json::from_value(field("report")?)?;
        let model = ParametricHeadModel::load("model", &t)?;
        let plans = subdivision_plans(&model, config.max_level)?;
        let heads = (0..=config.max_level)
            .map(|k| GaussianSet::load(&format!("head{k}"), &t))
            .collect::<Result<Vec<_>>>()?;
        for (k, h) in heads.iter().enumerate() {
            let expected = if k == 0 {
                model.vertex_count()
            } else {
                plans[k - 1].new_vertex_count()
            };
            if h.len() != expected {
                return Err(Error::dims(format!("level-{k} head points"), expected, h.len()));
            }
        }
        let offset = t.vec3s("offset")?;
        if offset.len() != model.vertex_count() {
            return Err(Error::dims("offset rows", model.vertex_count(), offset.len()));
        }
        Ok(Self {
            networks: Networks::load(&t, config.max_level)?,
            shoulder: GaussianSet::load("shoulder", &t)?,
            config,
            model,
            camera,
            identity,
            offset,
            plans,
            heads,
            report,
        })
    }
}

pub fn save_avatar(avatar: &Avatar, path: &Path) -> Result<()> {
    std::fs::write(path, avatar.to_bytes()?)?;
    Ok(())
}

pub fn load_avatar(path: &Path) -> Result<Avatar> {
    let bytes = std::fs::read(path)?;
    Avatar::from_bytes(&bytes, path)
}

/// Moving average of frame times per level.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTimer {
    window: usize,
    samples: Vec<VecDeque<f64>>,
}

impl FrameTimer {
    pub fn new(levels: usize, window: usize) -> Self {
        Self {
            window: window.max(1),
            samples: vec![VecDeque::new(); levels],
        }
    }

    pub fn record(&mut self, level: usize, millis: f64) {
        if level >= self.samples.len() {
            self.samples.resize(level + 1, VecDeque::new());
        }
        let q = &mut self.samples[level];
        if q.len() == self.window {
            q.pop_front();
        }
        q.push_back(millis);
    }

    pub fn average(&self, level: usize) -> Option<f64> {
        let q = self.samples.get(level)?;
        (!q.is_empty()).then(|| q.iter().sum::<f64>() / q.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LodBudget {
    /// Maximum Gaussian count.
    Points(usize),
    /// Target frame time in milliseconds.
    Millis(f64),
}

/// Largest level within `budget`; falls back to level 0 with a warning.
///
/// Time budgets consult `timer`; levels without measurements never qualify.
pub fn select_lod(counts: &[usize], budget: LodBudget, timer: Option<&FrameTimer>) -> usize {
    let fits = |k: usize| match budget {
        LodBudget::Points(n) => counts[k] <= n,
        LodBudget::Millis(ms) => timer.and_then(|t| t.average(k)).is_some_and(|avg| avg <= ms),
    };
    match (0..counts.len()).rev().find(|&k| fits(k)) {
        Some(k) => k,
        None => {
            log::warn!("no level fits budget {budget:?}; using level 0");
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::synthetic_portrait;
    use crate::model::{make_synthetic_model, SyntheticModelConfig};

    fn small() -> (Image, ParametricHeadModel, Camera, AvatarConfig) {
        let config = AvatarConfig {
            image_size: (70, 70),
            backbone: crate::neural::BackboneConfig {
                local_size: (20, 20),
                local_channels: 8,
                identity_dim: 16,
                ..Default::default()
            },
            pe_dim: 16,
            attention_heads: 4,
            head_hidden: 16,
            feature_dim: 6,
            model: SyntheticModelConfig {
                vertex_count: 162,
                ..Default::default()
            },
            ..AvatarConfig::desk()
        };
        let model = make_synthetic_model(&config.model).unwrap();
        let camera = Camera::facing_origin(70, 70, config.camera_distance);
        (synthetic_portrait(70, 70, 1), model, camera, config)
    }

    #[test]
    fn build_counts_follow_edge_rule() {
        let (img, model, cam, cfg) = small();
        let a = build_avatar(&img, &model, &cam, &PoseParams::neutral(&model), &cfg).unwrap();
        let l = &a.report.levels;
        assert_eq!(l.len(), 3);
        for k in 0..2 {
            assert_eq!(l[k + 1].vertices, l[k].vertices + l[k].edges);
        }
        assert_eq!(l[0].vertices, 162);
        assert!(a.shoulder.len() > 0);
        for h in &a.heads {
            h.validate().unwrap();
        }
        assert!(l.iter().all(|s| s.visible > 0 && s.visible < s.vertices));
    }

    #[test]
    fn neutral_reenactment_reproduces_build_positions() {
        let (img, model, cam, cfg) = small();
        let params = PoseParams::neutral(&model);
        let a = build_avatar(&img, &model, &cam, &params, &cfg).unwrap();
        for k in 0..=2 {
            let g = a.reenact(&DriveParams::from_params(&params), k).unwrap();
            assert_eq!(&g.positions[..a.heads[k].len()], a.heads[k].positions.as_slice());
        }
        assert!(a.reenact(&DriveParams::neutral(&model), 3).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let (img, model, cam, cfg) = small();
        let a = build_avatar(&img, &model, &cam, &PoseParams::neutral(&model), &cfg).unwrap();
        let bytes = a.to_bytes().unwrap();
        let b = Avatar::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes().unwrap());
    }

    #[test]
    fn lod_selection_by_points() {
        let counts = [100, 400, 1600];
        assert_eq!(select_lod(&counts, LodBudget::Points(5000), None), 2);
        assert_eq!(select_lod(&counts, LodBudget::Points(1600), None), 2);
        assert_eq!(select_lod(&counts, LodBudget::Points(1599), None), 1);
        assert_eq!(select_lod(&counts, LodBudget::Points(399), None), 0);
        assert_eq!(select_lod(&counts, LodBudget::Points(10), None), 0);
    }

    #[test]
    fn lod_selection_by_time() {
        let mut t = FrameTimer::new(3, 4);
        for (k, ms) in [(0, 2.0), (1, 5.0), (2, 12.0)] {
            t.record(k, ms);
        }
        assert_eq!(select_lod(&[1, 2, 3], LodBudget::Millis(6.0), Some(&t)), 1);
        assert_eq!(select_lod(&[1, 2, 3], LodBudget::Millis(1.0), Some(&t)), 0);
        for _ in 0..4 {
            t.record(2, 3.0);
        }
        assert_eq!(t.average(2), Some(3.0));
        assert_eq!(select_lod(&[1, 2, 3], LodBudget::Millis(6.0), Some(&t)), 2);
    }

    #[test]
    fn drive_stream_parsing() {
        let (_, model, _, _) = small();
        let d = DriveParams::neutral(&model);
        let text = write_drive_stream(&[DriveRecord::from_drive(0, &d), DriveRecord::from_drive(1, &d)]).unwrap();
        let parsed = parse_drive_stream(&format!("{text}\n"), &model).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1], (1, d));
        let err = parse_drive_stream("{\"frame\":0,\"theta\":[0],\"psi\":[]}", &model).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
