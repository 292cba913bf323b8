use gsavatar_core::geometry::{Camera, Quat, RigidTransform, Vec3};
use gsavatar_core::mesh::icosphere;
use gsavatar_core::neural::{layer_norm, rng, Activation, CrossAttention, Mlp, MlpSpec};
use gsavatar_core::verify::{compare_masks, exact_depth_mask, raycast_visibility};
use gsavatar_core::visibility::{fuse, rasterize_depth, sample_local, VisibilityMask};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, scale: f32, seed: u64) -> Array2<f32> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-scale..scale))
}

fn rotate(points: &[[f32; 3]], q: Quat) -> Vec<[f32; 3]> {
    points
        .iter()
        .map(|p| {
            let v = q.rotate(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
            [v.x as f32, v.y as f32, v.z as f32]
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..24) {
        let att = CrossAttention::new(16, 12, 2, 4, seed).unwrap();
        let q = random_matrix(n, 16, 2.0, seed ^ 1);
        let kv = random_matrix(9, 12, 2.0, seed ^ 2);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed ^ 3));
        let qp = Array2::from_shape_fn((n, 16), |(i, j)| q[[perm[i], j]]);
        let out = att.forward(q.view(), kv.view()).unwrap();
        let outp = att.forward(qp.view(), kv.view()).unwrap();
        for i in 0..n {
            for j in 0..16 {
                prop_assert!((outp[[i, j]] - out[[perm[i], j]]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn blocks_keep_finite_inputs_finite(seed in any::<u64>(), scale in 1e-3f32..1e4) {
        let x = random_matrix(17, 16, scale, seed);
        let kv = random_matrix(5, 8, scale, seed ^ 9);
        let mlp = Mlp::new(&MlpSpec::new(vec![16, 32, 7], Activation::Relu, seed)).unwrap();
        prop_assert!(mlp.forward(x.view()).unwrap().iter().all(|v| v.is_finite()));
        let att = CrossAttention::new(16, 8, 1, 2, seed).unwrap();
        prop_assert!(att.forward(x.view(), kv.view()).unwrap().iter().all(|v| v.is_finite()));
        prop_assert!(layer_norm(x.view()).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adding_geometry_never_raises_depth(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cam = Camera::facing_origin(64, 64, 20.0);
        let (v, f) = icosphere(2);
        let q = Quat::from_rotation_vector(Vec3::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)));
        let a = rotate(&v, q);
        let mut b = a.clone();
        b.extend(a.iter().map(|p| [p[0] * 0.5 + r.gen_range(-0.6..0.6), p[1] * 0.5 + r.gen_range(-0.6..0.6), p[2] * 0.5 - 1.5]));
        let mut fb = f.clone();
        let off = a.len() as u32;
        fb.extend(f.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        let da = rasterize_depth(&a, &f, &cam);
        let db = rasterize_depth(&b, &fb, &cam);
        for (x, y) in da.data.iter().zip(&db.data) {
            prop_assert!(y <= x);
        }
        for z in db.data.iter().filter(|z| z.is_finite()) {
            prop_assert!((cam.near as f32..=cam.far as f32).contains(z));
        }
    }

    #[test]
    fn exact_depth_mask_is_sound_at_zero_epsilon(rv in prop::array::uniform3(-3.0f64..3.0)) {
        let (v, f) = icosphere(3);
        let pts = rotate(&v, Quat::from_rotation_vector(Vec3::new(rv[0], rv[1], rv[2])));
        let mut cam = Camera::facing_origin(256, 256, 20.0);
        cam.pose = RigidTransform::new(Quat::IDENTITY, Vec3::new(0.1, -0.2, 20.0));
        let cmp = compare_masks(&exact_depth_mask(&pts, &f, &cam, 0.0), &raycast_visibility(&pts, &f, &cam));
        prop_assert_eq!(cmp.false_visible, 0);
    }

    #[test]
    fn fusion_respects_mask(seed in any::<u64>(), n in 1usize..200, d in 1usize..16) {
        let g = random_matrix(n, d, 100.0, seed);
        let l = random_matrix(n, d, 100.0, seed ^ 5);
        let mut r = rng(seed ^ 6);
        let mask = VisibilityMask((0..n).map(|_| r.gen_range(0..2u8)).collect());
        let out = fuse(g.view(), l.view(), &mask).unwrap();
        for i in 0..n {
            for j in 0..d {
                let expected = if mask.0[i] == 1 { g[[i, j]] + l[[i, j]] } else { g[[i, j]] };
                prop_assert_eq!(out[[i, j]].to_bits(), expected.to_bits());
            }
        }
    }

    #[test]
    fn local_sampling_is_exact_on_bilinear_fields(
        coef in prop::array::uniform4(-1.0f64..1.0),
        pts in prop::collection::vec((-0.9f64..0.9, -0.9f64..0.9, 2.0f64..30.0), 1..40),
    ) {
        let cam = Camera::facing_origin(80, 60, 10.0);
        let (mh, mw) = (15usize, 20usize);
        let field = |x: f64, y: f64| coef[0] + coef[1] * x + coef[2] * y + coef[3] * x * y;
        let map = Array3::from_shape_fn((1, mh, mw), |(_, i, j)| field(j as f64 + 0.5, i as f64 + 0.5) as f32);
        let positions: Vec<[f32; 3]> = pts
            .iter()
            .map(|&(sx, sy, z)| {
                let p = cam.unproject([(sx + 1.0) * 40.0, (sy + 1.0) * 30.0], z);
                [p.x as f32, p.y as f32, p.z as f32]
            })
            .collect();
        let (out, outside) = sample_local(&positions, &cam, map.view()).unwrap();
        // Map entries and outputs are f32; interpolation itself is exact.
        let tol = 2.0 * f32::EPSILON as f64 * map.iter().fold(1.0f32, |m, v| m.max(v.abs())) as f64;
        for (i, p) in positions.iter().enumerate() {
            let pr = cam.project(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
            let (mx, my) = (pr.pixel[0] * mw as f64 / 80.0, pr.pixel[1] * mh as f64 / 60.0);
            prop_assume!(pr.in_frustum && mx >= 0.5 && mx <= mw as f64 - 0.5 && my >= 0.5 && my <= mh as f64 - 0.5);
            prop_assert!(!outside[i]);
            prop_assert!((out[[i, 0]] as f64 - field(mx, my)).abs() <= tol);
        }
    }
}
