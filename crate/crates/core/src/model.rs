//! Parametric head model: template mesh, shape/pose/expression blendshapes,
//! a linear joint regressor and linear blend skinning.
//!
//! Blendshape bases are stored as `3V x n` matrices whose row `3v + a`
//! holds axis `a` of vertex `v`.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorMap};
use crate::error::{Error, Result};
use crate::geometry::{rotation_vector_to_matrix, Mat3, Vec3};
use crate::mesh::{self, Face};
use crate::neural::{mix_seed, rng};

/// Maximum depth of the kinematic chain (root counts as depth 1).
pub const MAX_CHAIN_DEPTH: usize = 3;

const WEIGHT_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricHeadModel {
    pub template: Vec<[f32; 3]>,
    pub shape_basis: Array2<f32>,
    pub pose_basis: Array2<f32>,
    pub expr_basis: Array2<f32>,
    /// Rest joint positions.
    pub joint_rest: Vec<[f32; 3]>,
    /// `3J x n_shape` linear correction of joint positions.
    pub joint_shape: Array2<f32>,
    /// Parent joint index, `-1` for the root (joint 0).
    pub parents: Vec<i32>,
    /// `V x J` convex weights.
    pub skin_weights: Array2<f32>,
    pub faces: Vec<Face>,
}

/// Shape, pose and expression parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub shape: Vec<f32>,
    /// Per-joint axis-angle rotation; entry 0 is the global rotation.
    pub pose: Vec<[f32; 3]>,
    /// Global translation applied after skinning.
    pub translation: [f32; 3],
    pub expression: Vec<f32>,
}

impl PoseParams {
    pub fn neutral(model: &ParametricHeadModel) -> Self {
        Self {
            shape: vec![0.0; model.shape_dim()],
            pose: vec![[0.0; 3]; model.joint_count()],
            translation: [0.0; 3],
            expression: vec![0.0; model.expr_dim()],
        }
    }
}

/// Rigid transform `x -> rotation * x + translation` of one joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl JointTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }
}

fn to_vec3(p: [f32; 3]) -> Vec3 {
    Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

impl ParametricHeadModel {
    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_basis.ncols()
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_basis.ncols()
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rest.len()
    }

    /// Length of the pose feature: flattened `R(theta_j) - I` of every non-root joint.
    pub fn pose_feature_dim(&self) -> usize {
        9 * self.joint_count().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        let j = self.joint_count();
        if v == 0 || j == 0 {
            return Err(Error::Invalid("model needs vertices and joints".into()));
        }
        for (name, basis) in [
            ("shape_basis", &self.shape_basis),
            ("pose_basis", &self.pose_basis),
            ("expr_basis", &self.expr_basis),
        ] {
            if basis.nrows() != 3 * v {
                return Err(Error::dims(format!("{name} rows"), 3 * v, basis.nrows()));
            }
        }
        if self.pose_dim() != self.pose_feature_dim() {
            return Err(Error::dims(
                "pose_basis columns",
                self.pose_feature_dim(),
                self.pose_dim(),
            ));
        }
        if self.joint_shape.dim() != (3 * j, self.shape_dim()) {
            return Err(Error::dims("joint_shape rows", 3 * j, self.joint_shape.nrows()));
        }
        if self.parents.len() != j {
            return Err(Error::dims("parents", j, self.parents.len()));
        }
        for (i, &p) in self.parents.iter().enumerate() {
            let ok = if i == 0 { p == -1 } else { p >= 0 && (p as usize) < i };
            if !ok {
                return Err(Error::Invalid(format!("joint {i} has invalid parent {p}")));
            }
        }
        if self.skin_weights.dim() != (v, j) {
            return Err(Error::dims("skin_weights rows", v, self.skin_weights.nrows()));
        }
        self.check_weights()?;
        mesh::validate_faces(&self.faces, v)?;
        mesh::unique_edges(&self.faces)?;
        Ok(())
    }

    /// Writes every array under `prefix` (parents as two's-complement u32).
    pub fn store(&self, prefix: &str, out: &mut TensorMap) {
        out.insert(format!("{prefix}.template"), Tensor::from_vec3s(&self.template));
        out.insert(format!("{prefix}.shape_basis"), Tensor::from_array2(&self.shape_basis));
        out.insert(format!("{prefix}.pose_basis"), Tensor::from_array2(&self.pose_basis));
        out.insert(format!("{prefix}.expr_basis"), Tensor::from_array2(&self.expr_basis));
        out.insert(format!("{prefix}.joint_rest"), Tensor::from_vec3s(&self.joint_rest));
        out.insert(format!("{prefix}.joint_shape"), Tensor::from_array2(&self.joint_shape));
        out.insert(
            format!("{prefix}.parents"),
            Tensor::from_u32(
                vec![self.parents.len()],
                self.parents.iter().map(|&p| p as u32).collect(),
            ),
        );
        out.insert(
            format!("{prefix}.skin_weights"),
            Tensor::from_array2(&self.skin_weights),
        );
        out.insert(format!("{prefix}.faces"), Tensor::from_faces(&self.faces));
    }

    pub fn load(prefix: &str, map: &TensorMap) -> Result<Self> {
        let model = Self {
            template: map.vec3s(&format!("{prefix}.template"))?,
            shape_basis: map.array2(&format!("{prefix}.shape_basis"))?,
            pose_basis: map.array2(&format!("{prefix}.pose_basis"))?,
            expr_basis: map.array2(&format!("{prefix}.expr_basis"))?,
            joint_rest: map.vec3s(&format!("{prefix}.joint_rest"))?,
            joint_shape: map.array2(&format!("{prefix}.joint_shape"))?,
            parents: map
                .u32s(&format!("{prefix}.parents"))?
                .iter()
                .map(|&p| p as i32)
                .collect(),
            skin_weights: map.array2(&format!("{prefix}.skin_weights"))?,
            faces: map.faces(&format!("{prefix}.faces"))?,
        };
        model.validate()?;
        Ok(model)
    }

    fn check_weights(&self) -> Result<()> {
        for (vi, row) in self.skin_weights.rows().into_iter().enumerate() {
            let sum: f32 = row.sum();
            let min = row.fold(f32::INFINITY, |a, &b| a.min(b));
            if (sum - 1.0).abs() > WEIGHT_TOLERANCE || min < 0.0 || !sum.is_finite() {
                return Err(Error::NonConvexWeights { vertex: vi, sum, min });
            }
        }
        Ok(())
    }

    fn check_params(&self, params: &PoseParams) -> Result<()> {
        if params.shape.len() != self.shape_dim() {
            return Err(Error::dims(
                "shape_basis coefficients",
                self.shape_dim(),
                params.shape.len(),
            ));
        }
        if params.expression.len() != self.expr_dim() {
            return Err(Error::dims(
                "expr_basis coefficients",
                self.expr_dim(),
                params.expression.len(),
            ));
        }
        if params.pose.len() != self.joint_count() {
            return Err(Error::dims("pose joints", self.joint_count(), params.pose.len()));
        }
        Ok(())
    }

    /// Flattened `R(theta_j) - I` for joints `1..J`.
    pub fn pose_feature(&self, params: &PoseParams) -> Array1<f32> {
        let mut out = Vec::with_capacity(self.pose_feature_dim());
        for r in params.pose.iter().skip(1) {
            let m = rotation_vector_to_matrix(to_vec3(*r)) - Mat3::identity();
            for row in 0..3 {
                for col in 0..3 {
                    out.push(m[(row, col)] as f32);
                }
            }
        }
        Array1::from(out)
    }

    /// Joint positions `J(beta)`.
    pub fn joints(&self, shape: &[f32]) -> Result<Vec<Vec3>> {
        if shape.len() != self.shape_dim() {
            return Err(Error::dims(
                "joint regressor shape coefficients",
                self.shape_dim(),
                shape.len(),
            ));
        }
        let delta = self.joint_shape.dot(&Array1::from(shape.to_vec()));
        Ok(self
            .joint_rest
            .iter()
            .enumerate()
            .map(|(j, p)| {
                to_vec3(*p) + Vec3::new(delta[3 * j] as f64, delta[3 * j + 1] as f64, delta[3 * j + 2] as f64)
            })
            .collect())
    }

    /// World transforms of every joint for `params`.
    pub fn joint_transforms(&self, params: &PoseParams) -> Result<Vec<JointTransform>> {
        self.check_params(params)?;
        let joints = self.joints(&params.shape)?;
        let global_t = to_vec3(params.translation);
        let mut rot: Vec<Mat3> = Vec::with_capacity(joints.len());
        let mut origin: Vec<Vec3> = Vec::with_capacity(joints.len());
        for j in 0..joints.len() {
            let local = rotation_vector_to_matrix(to_vec3(params.pose[j]));
            if j == 0 {
                rot.push(local);
                origin.push(joints[0]);
            } else {
                let p = self.parents[j] as usize;
                rot.push(rot[p] * local);
                origin.push(rot[p] * (joints[j] - joints[p]) + origin[p]);
            }
        }
        Ok((0..joints.len())
            .map(|j| JointTransform {
                rotation: rot[j],
                translation: origin[j] - rot[j] * joints[j] + global_t,
            })
            .collect())
    }
}

/// `T_p = T + B_S beta + B_P pose_feature(theta) + B_E psi + offset`.
pub fn morph(model: &ParametricHeadModel, params: &PoseParams, offset: &[[f32; 3]]) -> Result<Vec<[f32; 3]>> {
    model.check_params(params)?;
    if offset.len() != model.vertex_count() {
        return Err(Error::dims("offset rows", model.vertex_count(), offset.len()));
    }
    if model.pose_dim() != model.pose_feature_dim() {
        return Err(Error::dims(
            "pose_basis columns",
            model.pose_feature_dim(),
            model.pose_dim(),
        ));
    }
    let shape = model.shape_basis.dot(&Array1::from(params.shape.clone()));
    let pose = model.pose_basis.dot(&model.pose_feature(params));
    let expr = model.expr_basis.dot(&Array1::from(params.expression.clone()));
    Ok(model
        .template
        .iter()
        .zip(offset)
        .enumerate()
        .map(|(v, (t, o))| {
            let mut p = [0.0f32; 3];
            for a in 0..3 {
                let r = 3 * v + a;
                p[a] = t[a] + shape[r] + pose[r] + expr[r] + o[a];
            }
            p
        })
        .collect())
}

/// Linear blend skinning with explicit per-joint transforms.
///
/// Evaluated as `x + sum_j w_j ((R_j - I) x + t_j)`, which equals
/// `sum_j w_j (R_j x + t_j)` for convex weights and is exactly the identity
/// when every transform is the identity.
pub fn blend_transforms(
    positions: &[[f32; 3]],
    weights: &Array2<f32>,
    transforms: &[JointTransform],
) -> Result<Vec<[f32; 3]>> {
    if weights.dim() != (positions.len(), transforms.len()) {
        return Err(Error::dims("skin weight rows", positions.len(), weights.nrows()));
    }
    let deltas: Vec<(Mat3, Vec3)> = transforms
        .iter()
        .map(|t| (t.rotation - Mat3::identity(), t.translation))
        .collect();
    let mut out = Vec::with_capacity(positions.len());
    for (vi, p) in positions.iter().enumerate() {
        let x = to_vec3(*p);
        let mut d = Vec3::zeros();
        for (j, (dr, dt)) in deltas.iter().enumerate() {
            let w = weights[[vi, j]] as f64;
            if w != 0.0 {
                d += w * (dr * x + dt);
            }
        }
        out.push([(x.x + d.x) as f32, (x.y + d.y) as f32, (x.z + d.z) as f32]);
    }
    Ok(out)
}

/// Poses morphed vertices with the model's kinematic chain.
pub fn skin(model: &ParametricHeadModel, morphed: &[[f32; 3]], params: &PoseParams) -> Result<Vec<[f32; 3]>> {
    if morphed.len() != model.vertex_count() {
        return Err(Error::dims("morphed vertex rows", model.vertex_count(), morphed.len()));
    }
    model.check_weights()?;
    let transforms = model.joint_transforms(params)?;
    blend_transforms(morphed, &model.skin_weights, &transforms)
}

/// Dimensions of a synthetic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelConfig {
    pub seed: u64,
    pub vertex_count: usize,
    pub shape_dim: usize,
    pub expr_dim: usize,
    pub joint_count: usize,
}

impl Default for SyntheticModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vertex_count: 642,
            shape_dim: 10,
            expr_dim: 10,
            joint_count: 5,
        }
    }
}

fn template_mesh(vertex_count: usize) -> (Vec<[f32; 3]>, Vec<Face>) {
    if let Some(level) = (0..8).find(|&l| mesh::icosphere_vertex_count(l) == vertex_count) {
        return mesh::icosphere(level);
    }
    // Open dome: one pole plus rings x segments, factor closest to a 2:3 grid.
    let n = vertex_count - 1;
    let target = (1.5 * n as f64).sqrt();
    let segments = (3..=n)
        .filter(|s| n % s == 0)
        .min_by(|a, b| {
            let da = (*a as f64 - target).abs();
            let db = (*b as f64 - target).abs();
            da.partial_cmp(&db).expect("finite")
        })
        .expect("n >= 3 divides itself");
    mesh::dome(n / segments, segments, 0.83 * std::f64::consts::PI)
}

/// Seeded smooth displacement field: one column per basis vector.
fn smooth_basis(template: &[[f32; 3]], columns: usize, amplitude: f32, seed: u64) -> Array2<f32> {
    let mut basis = Array2::zeros((3 * template.len(), columns));
    for c in 0..columns {
        let mut r = rng(mix_seed(seed, c as u64));
        let dir = [
            r.gen_range(-1.0f32..1.0),
            r.gen_range(-1.0f32..1.0),
            r.gen_range(-1.0f32..1.0),
        ];
        let freq = [
            r.gen_range(0.5f32..2.5),
            r.gen_range(0.5f32..2.5),
            r.gen_range(0.5f32..2.5),
        ];
        let phase = r.gen_range(0.0f32..std::f32::consts::TAU);
        for (v, p) in template.iter().enumerate() {
            let s = (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).sin();
            for a in 0..3 {
                basis[[3 * v + a, c]] = amplitude * dir[a] * s;
            }
        }
    }
    basis
}

/// Deterministic desk-scale head model.
///
/// Counts of the form `10 * 4^n + 2` produce a closed icosphere; any other
/// count (>= 4) produces an open dome with a neck opening, like a real head
/// mesh with boundary loops.
pub fn make_synthetic_model(config: &SyntheticModelConfig) -> Result<ParametricHeadModel> {
    if config.vertex_count < 4 {
        return Err(Error::Invalid(format!(
            "vertex_count {} must be >= 4",
            config.vertex_count
        )));
    }
    if config.joint_count == 0 {
        return Err(Error::Invalid("a model needs at least one joint".into()));
    }
    let (unit, faces) = template_mesh(config.vertex_count);
    let template: Vec<[f32; 3]> = unit.iter().map(|p| [0.85 * p[0], p[1], 0.9 * p[2]]).collect();
    let v = template.len();
    let j = config.joint_count;
    let seed = config.seed;

    let mut joint_rest = vec![[0.0f32; 3]];
    let mut parents = vec![-1i32];
    if j > 1 {
        joint_rest.push([0.0, 0.6, 0.0]);
        parents.push(0);
    }
    let mut r = rng(mix_seed(seed, 0x4A));
    for _ in 2..j {
        joint_rest.push([r.gen_range(-0.4..0.4), r.gen_range(-0.3..0.5), r.gen_range(-0.8..-0.4)]);
        parents.push(1);
    }

    let mut joint_shape = smooth_basis(&joint_rest, config.shape_dim, 0.01, mix_seed(seed, 0x4B));
    // Root stays at the origin so global rotations pivot about it.
    for a in 0..3 {
        joint_shape.row_mut(a).fill(0.0);
    }

    let sigma2 = 2.0 * 0.45f64 * 0.45;
    let mut skin_weights = Array2::zeros((v, j));
    for (vi, p) in template.iter().enumerate() {
        let raw: Vec<f64> = joint_rest
            .iter()
            .enumerate()
            .map(|(ji, q)| {
                let d2: f64 = (0..3).map(|a| ((p[a] - q[a]) as f64).powi(2)).sum();
                let base = if ji == 0 { 0.05 } else { 0.0 };
                base + (-d2 / sigma2).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let mut acc = 0.0f32;
        for ji in 0..j {
            let w = if ji + 1 == j {
                (1.0 - acc).max(0.0)
            } else {
                (raw[ji] / total) as f32
            };
            acc += w;
            skin_weights[[vi, ji]] = w;
        }
    }

    let model = ParametricHeadModel {
        shape_basis: smooth_basis(&template, config.shape_dim, 0.02, mix_seed(seed, 1)),
        pose_basis: smooth_basis(&template, 9 * (j - 1), 0.01, mix_seed(seed, 2)),
        expr_basis: smooth_basis(&template, config.expr_dim, 0.02, mix_seed(seed, 3)),
        template,
        joint_rest,
        joint_shape,
        parents,
        skin_weights,
        faces,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayDescriptor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    file: String,
    byte_offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ModelDims {
    vertices: usize,
    faces: usize,
    shape: usize,
    pose: usize,
    expression: usize,
    joints: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    version: u32,
    dims: ModelDims,
    parents: Vec<i32>,
    arrays: Vec<ArrayDescriptor>,
}

const MODEL_FORMAT: &str = "parametric-head-model";
const MODEL_VERSION: u32 = 1;

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `model.json`-style manifest at `path` and a sibling `.bin` blob.
pub fn save_model(model: &ParametricHeadModel, path: &Path) -> Result<()> {
    model.validate()?;
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad model path {}", path.display())))?
        .to_string();
    let v = model.vertex_count();
    let j = model.joint_count();
    let arrays = [
        ("template", Tensor::from_vec3s(&model.template)),
        (
            "shape_basis",
            Tensor::from_f32(
                vec![v, 3, model.shape_dim()],
                model.shape_basis.iter().copied().collect(),
            ),
        ),
        (
            "pose_basis",
            Tensor::from_f32(vec![v, 3, model.pose_dim()], model.pose_basis.iter().copied().collect()),
        ),
        (
            "expr_basis",
            Tensor::from_f32(vec![v, 3, model.expr_dim()], model.expr_basis.iter().copied().collect()),
        ),
        ("joint_rest", Tensor::from_vec3s(&model.joint_rest)),
        (
            "joint_shape",
            Tensor::from_f32(
                vec![j, 3, model.shape_dim()],
                model.joint_shape.iter().copied().collect(),
            ),
        ),
        ("skin_weights", Tensor::from_array2(&model.skin_weights)),
        ("faces", Tensor::from_faces(&model.faces)),
    ];
    let mut blob = Vec::new();
    let mut descriptors = Vec::new();
    for (name, t) in arrays {
        descriptors.push(ArrayDescriptor {
            name: name.to_string(),
            dtype: t.dtype().to_string(),
            shape: t.shape.clone(),
            file: blob_name.clone(),
            byte_offset: blob.len(),
        });
        blob.extend_from_slice(&t.to_bytes());
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        dims: ModelDims {
            vertices: v,
            faces: model.faces.len(),
            shape: model.shape_dim(),
            pose: model.pose_dim(),
            expression: model.expr_dim(),
            joints: j,
        },
        parents: model.parents.clone(),
        arrays: descriptors,
    };
    std::fs::write(&blob_file, blob)?;
    std::fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a model written by [`save_model`].
pub fn load_model(path: &Path) -> Result<ParametricHeadModel> {
    let text = std::fs::read(path)?;
    let manifest: ModelManifest = serde_json::from_slice(&text).map_err(|_| Error::BadMagic {
        path: path.to_path_buf(),
        expected: MODEL_FORMAT.into(),
    })?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: MODEL_FORMAT.into(),
        });
    }
    if manifest.version != MODEL_VERSION {
        return Err(Error::Version {
            found: manifest.version.to_string(),
            expected: MODEL_VERSION.to_string(),
        });
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut blobs: std::collections::HashMap<String, Vec<u8>> = Default::default();
    let d = &manifest.dims;
    let mut read = |name: &str, expected: &[usize]| -> Result<Tensor> {
        let desc = manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::MissingSection(name.to_string()))?;
        if desc.shape.len() != expected.len() {
            return Err(Error::dims(format!("rank of {name}"), expected.len(), desc.shape.len()));
        }
        for (&e, &a) in expected.iter().zip(&desc.shape) {
            if e != a {
                return Err(Error::dims(name, e, a));
            }
        }
        if !blobs.contains_key(&desc.file) {
            let bytes = std::fs::read(dir.join(&desc.file))?;
            blobs.insert(desc.file.clone(), bytes);
        }
        let blob = &blobs[&desc.file];
        let len = 4 * desc.shape.iter().product::<usize>();
        let end = desc.byte_offset.saturating_add(len);
        if end > blob.len() {
            return Err(Error::Truncated {
                name: name.to_string(),
                needed: len,
                available: blob.len().saturating_sub(desc.byte_offset),
            });
        }
        Tensor::from_bytes(name, &desc.dtype, desc.shape.clone(), &blob[desc.byte_offset..end])
    };
    let to_vec3s =
        |t: Tensor| -> Result<Vec<[f32; 3]>> { Ok(t.f32s()?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()) };
    let to_matrix = |t: Tensor, rows: usize, cols: usize| -> Result<Array2<f32>> {
        Array2::from_shape_vec((rows, cols), t.f32s()?.to_vec()).map_err(|e| Error::Invalid(e.to_string()))
    };
    let template = to_vec3s(read("template", &[d.vertices, 3])?)?;
    let shape_basis = to_matrix(read("shape_basis", &[d.vertices, 3, d.shape])?, 3 * d.vertices, d.shape)?;
    let pose_basis = to_matrix(read("pose_basis", &[d.vertices, 3, d.pose])?, 3 * d.vertices, d.pose)?;
    let expr_basis = to_matrix(
        read("expr_basis", &[d.vertices, 3, d.expression])?,
        3 * d.vertices,
        d.expression,
    )?;
    let joint_rest = to_vec3s(read("joint_rest", &[d.joints, 3])?)?;
    let joint_shape = to_matrix(read("joint_shape", &[d.joints, 3, d.shape])?, 3 * d.joints, d.shape)?;
    let skin_weights = to_matrix(read("skin_weights", &[d.vertices, d.joints])?, d.vertices, d.joints)?;
    let faces = read("faces", &[d.faces, 3])?
        .u32s()?
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let model = ParametricHeadModel {
        template,
        shape_basis,
        pose_basis,
        expr_basis,
        joint_rest,
        joint_shape,
        parents: manifest.parents,
        skin_weights,
        faces,
    };
    model.validate()?;
    Ok(model)
}
