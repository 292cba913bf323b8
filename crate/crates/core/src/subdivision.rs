//! Midpoint (1-to-4) subdivision with synchronized per-vertex attributes.
//!
//! New vertices are appended after the old ones in ascending `(min, max)`
//! order of their parent edge, so vertex indexing is independent of face
//! order and thread count. Old vertices keep their index and position.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::mesh::{edge_key, unique_edges, validate_faces, Edge, Face};
use crate::neural::Mlp;

/// Maximum subdivision level used by the engine.
pub const DEFAULT_MAX_LEVEL: usize = 2;

/// Triangle mesh at subdivision level `level` with per-vertex attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct LodMesh {
    pub level: usize,
    pub max_level: usize,
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<Face>,
    /// `N_k x C` attribute rows, aligned with `vertices`.
    pub attrs: Array2<f32>,
    /// Parent edge of every vertex created at this level; vertex
    /// `base_vertex_count() + i` is the midpoint of `parent_edges[i]`.
    pub parent_edges: Vec<Edge>,
    /// Face count of the level-0 ancestor.
    pub base_face_count: usize,
}

impl LodMesh {
    /// Level-0 mesh without attributes.
    pub fn new(vertices: Vec<[f32; 3]>, faces: Vec<Face>) -> Result<Self> {
        let n = vertices.len();
        Self::with_attrs(vertices, faces, Array2::zeros((n, 0)))
    }

    pub fn with_attrs(vertices: Vec<[f32; 3]>, faces: Vec<Face>, attrs: Array2<f32>) -> Result<Self> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(Error::Invalid("mesh must have vertices and faces".into()));
        }
        validate_faces(&faces, vertices.len())?;
        if attrs.nrows() != vertices.len() {
            return Err(Error::dims("mesh attribute rows", vertices.len(), attrs.nrows()));
        }
        let base_face_count = faces.len();
        Ok(Self {
            level: 0,
            max_level: DEFAULT_MAX_LEVEL,
            vertices,
            faces,
            attrs,
            parent_edges: Vec::new(),
            base_face_count,
        })
    }

    pub fn with_max_level(mut self, max_level: usize) -> Self {
        self.max_level = max_level;
        self
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Number of vertices inherited from the previous level.
    pub fn base_vertex_count(&self) -> usize {
        self.vertices.len() - self.parent_edges.len()
    }

    pub fn edges(&self) -> Result<Vec<Edge>> {
        unique_edges(&self.faces)
    }

    /// Checks the level invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let expected = self.base_face_count * 4usize.pow(self.level as u32);
        if self.faces.len() != expected {
            return Err(Error::dims("faces at this level", expected, self.faces.len()));
        }
        if self.attrs.nrows() != self.vertices.len() {
            return Err(Error::dims(
                "mesh attribute rows",
                self.vertices.len(),
                self.attrs.nrows(),
            ));
        }
        let base = self.base_vertex_count() as u32;
        if let Some(e) = self.parent_edges.iter().find(|e| e[1] >= base || e[0] >= e[1]) {
            return Err(Error::Invalid(format!(
                "parent edge {e:?} is not a level-{} edge",
                self.level.saturating_sub(1)
            )));
        }
        validate_faces(&self.faces, self.vertices.len())
    }

    /// Topology of one subdivision step starting from this mesh.
    pub fn plan(&self) -> Result<SubdivisionPlan> {
        SubdivisionPlan::new(self.vertices.len(), &self.faces)
    }
}

/// Precomputed topology of one midpoint-subdivision step.
///
/// Reused by the animation runtime to subdivide freshly posed positions
/// without re-enumerating edges each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdivisionPlan {
    pub old_vertex_count: usize,
    pub edges: Vec<Edge>,
    pub faces: Vec<Face>,
}

impl SubdivisionPlan {
    pub fn new(vertex_count: usize, faces: &[Face]) -> Result<Self> {
        validate_faces(faces, vertex_count)?;
        let edges = unique_edges(faces)?;
        let base = vertex_count as u32;
        let mid = |a: u32, b: u32| -> u32 {
            base + edges.binary_search(&edge_key(a, b)).expect("face edge is enumerated") as u32
        };
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in faces {
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            new_faces.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
        }
        Ok(Self {
            old_vertex_count: vertex_count,
            edges,
            faces: new_faces,
        })
    }

    pub fn new_vertex_count(&self) -> usize {
        self.old_vertex_count + self.edges.len()
    }

    /// Old positions followed by edge midpoints.
    pub fn apply_positions(&self, positions: &[[f32; 3]]) -> Result<Vec<[f32; 3]>> {
        if positions.len() != self.old_vertex_count {
            return Err(Error::dims(
                "positions to subdivide",
                self.old_vertex_count,
                positions.len(),
            ));
        }
        let mut out = Vec::with_capacity(self.new_vertex_count());
        out.extend_from_slice(positions);
        out.extend(self.edges.iter().map(|&[a, b]| {
            let (pa, pb) = (positions[a as usize], positions[b as usize]);
            [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]), 0.5 * (pa[2] + pb[2])]
        }));
        Ok(out)
    }

    /// Old rows followed by the mean of each parent edge's two rows.
    pub fn apply_attrs(&self, attrs: ArrayView2<f32>) -> Result<Array2<f32>> {
        if attrs.nrows() != self.old_vertex_count {
            return Err(Error::dims(
                "attribute rows to subdivide",
                self.old_vertex_count,
                attrs.nrows(),
            ));
        }
        let c = attrs.ncols();
        let mut out = Array2::zeros((self.new_vertex_count(), c));
        out.slice_mut(ndarray::s![..self.old_vertex_count, ..]).assign(&attrs);
        for (i, &[a, b]) in self.edges.iter().enumerate() {
            let (ra, rb) = (attrs.row(a as usize), attrs.row(b as usize));
            let mut row = out.row_mut(self.old_vertex_count + i);
            for j in 0..c {
                row[j] = 0.5 * (ra[j] + rb[j]);
            }
        }
        Ok(out)
    }
}

/// Splits every face into four, propagating the mesh's own attributes.
pub fn subdivide(mesh: &LodMesh) -> Result<LodMesh> {
    if mesh.level >= mesh.max_level {
        return Err(Error::LevelOutOfRange {
            level: mesh.level + 1,
            max: mesh.max_level,
        });
    }
    let plan = mesh.plan()?;
    let vertices = plan.apply_positions(&mesh.vertices)?;
    let attrs = plan.apply_attrs(mesh.attrs.view())?;
    Ok(LodMesh {
        level: mesh.level + 1,
        max_level: mesh.max_level,
        vertices,
        faces: plan.faces,
        attrs,
        parent_edges: plan.edges,
        base_face_count: mesh.base_face_count,
    })
}

/// Propagates an arbitrary attribute table aligned with `mesh`'s vertices to
/// the next level.
pub fn subdivide_attrs(mesh: &LodMesh, attrs: ArrayView2<f32>) -> Result<Array2<f32>> {
    if attrs.nrows() != mesh.vertex_count() {
        return Err(Error::dims("attribute rows", mesh.vertex_count(), attrs.nrows()));
    }
    mesh.plan()?.apply_attrs(attrs)
}

/// Transforms the attributes with `mlp`, then subdivides mesh and attributes.
pub fn subdivide_with_mlp(mesh: &LodMesh, mlp: &Mlp) -> Result<LodMesh> {
    let mapped = mlp.forward(mesh.attrs.view())?;
    let staged = LodMesh {
        attrs: mapped,
        ..mesh.clone()
    };
    subdivide(&staged)
}

/// Level sequence `0..=levels` starting from `base`.
pub fn subdivide_chain(base: &LodMesh, levels: usize) -> Result<Vec<LodMesh>> {
    let mut out = vec![base.clone()];
    for _ in 0..levels {
        let next = subdivide(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Checks that every vertex of `coarse` keeps its index and position in `fine`.
pub fn is_nested(coarse: &LodMesh, fine: &LodMesh) -> bool {
    fine.base_vertex_count() == coarse.vertex_count() && coarse.vertices.iter().zip(&fine.vertices).all(|(a, b)| a == b)
}
