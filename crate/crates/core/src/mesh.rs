//! Triangle-mesh helpers: edge enumeration, Euler characteristic and
//! primitive generators used by the synthetic head model and tests.

use crate::error::{Error, Result};

pub type Face = [u32; 3];

/// Undirected edge key with `e[0] < e[1]`.
pub type Edge = [u32; 2];

#[inline]
pub fn edge_key(a: u32, b: u32) -> Edge {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

/// Checks that every face references `vertex_count` vertices and is not degenerate.
pub fn validate_faces(faces: &[Face], vertex_count: usize) -> Result<()> {
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v as usize >= vertex_count {
                return Err(Error::FaceIndexOutOfRange {
                    face: fi,
                    vertex: v,
                    count: vertex_count,
                });
            }
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(Error::Invalid(format!("face {fi} is degenerate: {f:?}")));
        }
    }
    Ok(())
}

/// Unique undirected edges in ascending `(min, max)` order.
///
/// Fails on edges incident to more than two faces.
pub fn unique_edges(faces: &[Face]) -> Result<Vec<Edge>> {
    let mut all: Vec<Edge> = faces
        .iter()
        .flat_map(|f| [edge_key(f[0], f[1]), edge_key(f[1], f[2]), edge_key(f[2], f[0])])
        .collect();
    all.sort_unstable();
    let mut edges = Vec::with_capacity(all.len() / 2 + 1);
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j] == all[i] {
            j += 1;
        }
        if j - i > 2 {
            return Err(Error::NonManifoldEdge(all[i][0], all[i][1]));
        }
        edges.push(all[i]);
        i = j;
    }
    Ok(edges)
}

/// `V - E + F`.
pub fn euler_characteristic(vertex_count: usize, faces: &[Face]) -> Result<i64> {
    let e = unique_edges(faces)?.len();
    Ok(vertex_count as i64 - e as i64 + faces.len() as i64)
}

/// Mean length of the edges incident to each vertex (0 for isolated vertices).
pub fn mean_incident_edge_length(positions: &[[f32; 3]], edges: &[Edge]) -> Vec<f32> {
    let mut sum = vec![0.0f64; positions.len()];
    let mut count = vec![0u32; positions.len()];
    for &[a, b] in edges {
        let (pa, pb) = (positions[a as usize], positions[b as usize]);
        let d = ((pa[0] - pb[0]) as f64).hypot((pa[1] - pb[1]) as f64);
        let len = d.hypot((pa[2] - pb[2]) as f64);
        for v in [a, b] {
            sum[v as usize] += len;
            count[v as usize] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
        .collect()
}

pub fn tetrahedron() -> (Vec<[f32; 3]>, Vec<Face>) {
    let v = vec![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let f = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    (v, f)
}

/// Unit-circumradius icosahedron with outward winding.
pub fn icosahedron() -> (Vec<[f32; 3]>, Vec<Face>) {
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let n = (1.0 + t * t).sqrt();
    let v = raw
        .iter()
        .map(|p| [(p[0] / n) as f32, (p[1] / n) as f32, (p[2] / n) as f32])
        .collect();
    let f = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (v, f)
}

/// Vertex count of an icosphere after `level` midpoint refinements.
pub fn icosphere_vertex_count(level: u32) -> usize {
    10 * 4usize.pow(level) + 2
}

/// Unit icosphere: icosahedron refined `level` times with vertices pushed to the sphere.
pub fn icosphere(level: u32) -> (Vec<[f32; 3]>, Vec<Face>) {
    let (mut v, mut f) = icosahedron();
    for _ in 0..level {
        let edges = unique_edges(&f).expect("icosphere is manifold");
        let base = v.len() as u32;
        for &[a, b] in &edges {
            let (pa, pb) = (v[a as usize], v[b as usize]);
            let m = [
                (pa[0] as f64 + pb[0] as f64) * 0.5,
                (pa[1] as f64 + pb[1] as f64) * 0.5,
                (pa[2] as f64 + pb[2] as f64) * 0.5,
            ];
            let n = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
            v.push([(m[0] / n) as f32, (m[1] / n) as f32, (m[2] / n) as f32]);
        }
        let mid = |a: u32, b: u32| base + edges.binary_search(&edge_key(a, b)).expect("edge exists") as u32;
        f = f
            .iter()
            .flat_map(|&[a, b, c]| {
                let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
                [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
            })
            .collect();
    }
    (v, f)
}

/// Open dome: a pole vertex plus `rings` latitude rings of `segments` vertices,
/// leaving the last ring as a boundary loop (a disc topologically).
///
/// The pole sits at `-y`; the open rim is around polar angle `max_polar`.
pub fn dome(rings: usize, segments: usize, max_polar: f64) -> (Vec<[f32; 3]>, Vec<Face>) {
    assert!(rings >= 1 && segments >= 3);
    let mut v = Vec::with_capacity(1 + rings * segments);
    v.push([0.0, -1.0, 0.0]);
    for r in 0..rings {
        let polar = max_polar * (r + 1) as f64 / rings as f64;
        for s in 0..segments {
            let az = std::f64::consts::TAU * s as f64 / segments as f64;
            v.push([
                (polar.sin() * az.cos()) as f32,
                (-polar.cos()) as f32,
                (polar.sin() * az.sin()) as f32,
            ]);
        }
    }
    let idx = |r: usize, s: usize| (1 + r * segments + s % segments) as u32;
    let mut f = Vec::with_capacity(segments * (2 * rings - 1));
    for s in 0..segments {
        f.push([0, idx(0, s + 1), idx(0, s)]);
    }
    for r in 0..rings - 1 {
        for s in 0..segments {
            let (a, b) = (idx(r, s), idx(r, s + 1));
            let (c, d) = (idx(r + 1, s), idx(r + 1, s + 1));
            f.push([a, b, d]);
            f.push([a, d, c]);
        }
    }
    (v, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_counts_and_euler() {
        let (v, f) = tetrahedron();
        assert_eq!((v.len(), unique_edges(&f).unwrap().len(), f.len()), (4, 6, 4));
        assert_eq!(euler_characteristic(v.len(), &f).unwrap(), 2);
        let (v, f) = icosahedron();
        assert_eq!((v.len(), unique_edges(&f).unwrap().len(), f.len()), (12, 30, 20));
        assert_eq!(euler_characteristic(v.len(), &f).unwrap(), 2);
    }

    #[test]
    fn icosphere_level_three() {
        let (v, f) = icosphere(3);
        assert_eq!(v.len(), 642);
        assert_eq!(f.len(), 1280);
        assert_eq!(icosphere_vertex_count(3), 642);
        assert_eq!(euler_characteristic(v.len(), &f).unwrap(), 2);
        for p in &v {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dome_is_a_disc() {
        let (v, f) = dome(81, 62, 2.4);
        assert_eq!(v.len(), 5023);
        assert_eq!(euler_characteristic(v.len(), &f).unwrap(), 1);
        validate_faces(&f, v.len()).unwrap();
    }

    #[test]
    fn non_manifold_edge_detected() {
        let f = vec![[0, 1, 2], [0, 1, 3], [1, 0, 4]];
        assert!(matches!(unique_edges(&f), Err(Error::NonManifoldEdge(0, 1))));
    }

    #[test]
    fn out_of_range_face_detected() {
        assert!(matches!(
            validate_faces(&[[0, 1, 5]], 3),
            Err(Error::FaceIndexOutOfRange { vertex: 5, .. })
        ));
    }
}
