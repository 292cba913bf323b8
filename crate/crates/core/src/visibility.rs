//! Projection sampling of the local feature map, z-buffer rasterization of
//! the head mesh, depth-test visibility and occlusion-aware fusion.

use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3};
use crate::mesh::Face;

/// Rows per band when rasterizing in parallel.
const BAND_ROWS: usize = 16;

/// Half-width of the pixel window whose winning faces are re-evaluated at a
/// vertex's exact projection.
pub const LOOKUP_RADIUS: usize = 2;

/// Face id of uncovered pixels.
pub const NO_FACE: u32 = u32::MAX;

/// Nearest camera-space depth per pixel; `+inf` where nothing is drawn.
/// `face` holds the index of the winning triangle per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub face: Vec<u32>,
}

impl DepthBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![f32::INFINITY; width * height],
            face: vec![NO_FACE; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixels holding a finite depth.
    pub fn coverage(&self) -> Vec<bool> {
        self.data.iter().map(|d| d.is_finite()).collect()
    }

    /// Raw little-endian f32 plane plus a `<path>.json` shape header.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
        let header = serde_json::json!({"dtype": "f32", "shape": [self.height, self.width], "background": "inf"});
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }
}

/// Binary per-vertex visibility.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask(pub Vec<u8>);

impl VisibilityMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.0.iter().filter(|&&m| m == 1).count()
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.0)?;
        let header = serde_json::json!({"dtype": "u8", "shape": [self.0.len()]});
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }
}

/// Default depth tolerance: `1e-3 * (far - near)`.
pub fn default_epsilon(camera: &Camera) -> f64 {
    1e-3 * (camera.far - camera.near)
}

struct TriangleSetup {
    face: u32,
    p: [[f64; 2]; 3],
    inv_z: [f64; 3],
    inv_area: f64,
    bias: [bool; 3],
    min_x: usize,
    max_x: usize,
    min_y: usize,
    max_y: usize,
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn setup_triangles(positions: &[[f32; 3]], faces: &[Face], camera: &Camera) -> Vec<TriangleSetup> {
    let cam: Vec<Vec3> = positions
        .iter()
        .map(|p| camera.to_camera(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)))
        .collect();
    let (w, h) = (camera.width as f64, camera.height as f64);
    faces
        .iter()
        .enumerate()
        .filter_map(|(fi, f)| {
            let q = [cam[f[0] as usize], cam[f[1] as usize], cam[f[2] as usize]];
            // No near-plane clipping: triangles crossing the near plane are dropped.
            if q.iter().any(|v| v.z < camera.near) {
                return None;
            }
            let mut p = [
                camera.camera_to_pixel(q[0]),
                camera.camera_to_pixel(q[1]),
                camera.camera_to_pixel(q[2]),
            ];
            let mut inv_z = [1.0 / q[0].z, 1.0 / q[1].z, 1.0 / q[2].z];
            let mut area = edge(p[0], p[1], p[2]);
            if area == 0.0 || !area.is_finite() {
                return None;
            }
            if area < 0.0 {
                p.swap(1, 2);
                inv_z.swap(1, 2);
                area = -area;
            }
            let min_xf = p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
            let max_xf = p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
            let min_yf = p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
            let max_yf = p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
            if max_xf < 0.0 || max_yf < 0.0 || min_xf >= w || min_yf >= h {
                return None;
            }
            // Top-left rule: an edge owns its boundary pixels when it points
            // down, or is horizontal and points left.
            let bias = [0, 1, 2].map(|i| {
                let (a, b) = (p[(i + 1) % 3], p[(i + 2) % 3]);
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                dy > 0.0 || (dy == 0.0 && dx < 0.0)
            });
            let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
            Some(TriangleSetup {
                face: fi as u32,
                p,
                inv_z,
                inv_area: 1.0 / area,
                bias,
                min_x: clamp((min_xf - 0.5).floor(), camera.width),
                max_x: clamp((max_xf - 0.5).ceil(), camera.width),
                min_y: clamp((min_yf - 0.5).floor(), camera.height),
                max_y: clamp((max_yf - 0.5).ceil(), camera.height),
            })
        })
        .collect()
}

/// Z-buffer of a triangle mesh with perspective-correct depth interpolation.
///
/// Pixel centres sit at half-integer coordinates; back faces are drawn too.
pub fn rasterize_depth(positions: &[[f32; 3]], faces: &[Face], camera: &Camera) -> DepthBuffer {
    let tris = setup_triangles(positions, faces, camera);
    let (width, height) = (camera.width, camera.height);
    let mut buf = DepthBuffer::empty(width, height);
    let (near, far) = (camera.near, camera.far);
    buf.data
        .par_chunks_mut(BAND_ROWS * width)
        .zip(buf.face.par_chunks_mut(BAND_ROWS * width))
        .enumerate()
        .for_each(|(band, (rows, ids))| {
            let y_start = band * BAND_ROWS;
            let y_end = y_start + rows.len() / width;
            for t in tris.iter().filter(|t| t.max_y >= y_start && t.min_y < y_end) {
                for y in t.min_y.max(y_start)..=t.max_y.min(y_end - 1) {
                    for x in t.min_x..=t.max_x {
                        let Some(z) = t.depth_at([x as f64 + 0.5, y as f64 + 0.5], true) else {
                            continue;
                        };
                        if !(z >= near && z <= far) {
                            continue;
                        }
                        let i = (y - y_start) * width + x;
                        let zf = z as f32;
                        if zf < rows[i] {
                            rows[i] = zf;
                            ids[i] = t.face;
                        }
                    }
                }
            }
        });
    buf
}

impl TriangleSetup {
    /// Perspective-correct depth at pixel point `c`; with `fill_rule` the
    /// point must be owned by the triangle under the top-left convention,
    /// otherwise any point inside or on the boundary is accepted.
    #[inline]
    fn depth_at(&self, c: [f64; 2], fill_rule: bool) -> Option<f64> {
        let mut lambda = [0.0f64; 3];
        for i in 0..3 {
            let e = edge(self.p[(i + 1) % 3], self.p[(i + 2) % 3], c);
            if e < 0.0 || (fill_rule && e == 0.0 && !self.bias[i]) {
                return None;
            }
            lambda[i] = e * self.inv_area;
        }
        let inv = lambda[0] * self.inv_z[0] + lambda[1] * self.inv_z[1] + lambda[2] * self.inv_z[2];
        Some(1.0 / inv)
    }
}

/// Pixel containing a projected point, if inside the image.
fn containing_pixel(pixel: [f64; 2], width: usize, height: usize) -> Option<(usize, usize)> {
    if !(pixel[0] >= 0.0 && pixel[1] >= 0.0 && pixel[0] <= width as f64 && pixel[1] <= height as f64) {
        return None;
    }
    Some((
        (pixel[0].floor() as usize).min(width - 1),
        (pixel[1].floor() as usize).min(height - 1),
    ))
}

/// `1` where the vertex is in the frustum and `z <= depth + epsilon`.
///
/// The depth is taken at the vertex's exact projection: every face that wins
/// a pixel within [`LOOKUP_RADIUS`] of it is evaluated there and the nearest
/// covering one counts. When none covers it (sub-pixel triangles) the
/// containing pixel's depth is used.
pub fn visibility_mask(
    positions: &[[f32; 3]],
    faces: &[Face],
    camera: &Camera,
    depth: &DepthBuffer,
    epsilon: f64,
) -> Result<VisibilityMask> {
    if depth.width != camera.width || depth.height != camera.height {
        return Err(Error::dims("depth buffer width", camera.width, depth.width));
    }
    let tris = setup_triangles(positions, faces, camera);
    let mut slot = vec![usize::MAX; faces.len()];
    for (k, t) in tris.iter().enumerate() {
        slot[t.face as usize] = k;
    }
    let r = LOOKUP_RADIUS as i64;
    Ok(VisibilityMask(
        positions
            .par_iter()
            .map(|p| {
                let pr = camera.project(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
                if !pr.in_frustum {
                    return 0;
                }
                let Some((px, py)) = containing_pixel(pr.pixel, depth.width, depth.height) else {
                    return 0;
                };
                let mut seen = [NO_FACE; (2 * LOOKUP_RADIUS + 1) * (2 * LOOKUP_RADIUS + 1)];
                let mut n = 0;
                let mut zhat = f64::INFINITY;
                for y in (py as i64 - r).max(0)..=(py as i64 + r).min(depth.height as i64 - 1) {
                    for x in (px as i64 - r).max(0)..=(px as i64 + r).min(depth.width as i64 - 1) {
                        let f = depth.face[y as usize * depth.width + x as usize];
                        if f == NO_FACE || seen[..n].contains(&f) {
                            continue;
                        }
                        if n < seen.len() {
                            seen[n] = f;
                            n += 1;
                        }
                        let k = slot.get(f as usize).copied().unwrap_or(usize::MAX);
                        if let Some(z) = tris.get(k).and_then(|t| t.depth_at(pr.pixel, false)) {
                            zhat = zhat.min(z);
                        }
                    }
                }
                if zhat == f64::INFINITY {
                    zhat = depth.at(px, py) as f64;
                }
                (pr.depth <= zhat + epsilon) as u8
            })
            .collect(),
    ))
}

/// Bilinear sample of a `C x H x W` map at each projected vertex.
///
/// Pixel coordinates are rescaled from the camera image to the map, whose
/// texel centres sit at half-integer coordinates. Returns the `N x C`
/// samples and an out-of-frame flag per vertex (those rows are zero).
pub fn sample_local(
    positions: &[[f32; 3]],
    camera: &Camera,
    local_map: ArrayView3<f32>,
) -> Result<(Array2<f32>, Vec<bool>)> {
    let (c, mh, mw) = local_map.dim();
    if mh == 0 || mw == 0 {
        return Err(Error::Invalid("local feature map is empty".into()));
    }
    let sx = mw as f64 / camera.width as f64;
    let sy = mh as f64 / camera.height as f64;
    let mut out = Array2::zeros((positions.len(), c));
    let mut outside = vec![false; positions.len()];
    for (i, p) in positions.iter().enumerate() {
        let pr = camera.project(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
        if !pr.in_frustum {
            outside[i] = true;
            continue;
        }
        let tx = (pr.pixel[0] * sx - 0.5).clamp(0.0, (mw - 1) as f64);
        let ty = (pr.pixel[1] * sy - 0.5).clamp(0.0, (mh - 1) as f64);
        let (x0, y0) = (tx.floor() as usize, ty.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(mw - 1), (y0 + 1).min(mh - 1));
        let (fx, fy) = (tx - x0 as f64, ty - y0 as f64);
        let weights = [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x1, fx * (1.0 - fy)),
            (y1, x0, (1.0 - fx) * fy),
            (y1, x1, fx * fy),
        ];
        let mut row = out.row_mut(i);
        for ch in 0..c {
            let mut acc = 0.0f64;
            for &(yy, xx, w) in &weights {
                if w != 0.0 {
                    acc += w * local_map[[ch, yy, xx]] as f64;
                }
            }
            row[ch] = acc as f32;
        }
    }
    Ok((out, outside))
}

/// `global + local * mask`, row-wise.
pub fn fuse(global: ArrayView2<f32>, local: ArrayView2<f32>, mask: &VisibilityMask) -> Result<Array2<f32>> {
    if global.dim() != local.dim() {
        return Err(Error::dims("fusion local rows", global.nrows(), local.nrows()));
    }
    if mask.len() != global.nrows() {
        return Err(Error::dims("fusion mask length", global.nrows(), mask.len()));
    }
    let mut out = global.to_owned();
    for (i, &m) in mask.0.iter().enumerate() {
        if m == 1 {
            let mut row = out.row_mut(i);
            row += &local.row(i);
        }
    }
    Ok(out)
}
