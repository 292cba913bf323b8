use gsavatar_core::geometry::{quat_to_matrix, rotation_vector_to_matrix, Camera, Mat3, Quat, RigidTransform, Vec3};
use gsavatar_core::model::blend_transforms;
use gsavatar_core::model::{make_synthetic_model, morph, skin, JointTransform, PoseParams, SyntheticModelConfig};
use gsavatar_core::neural::rng;
use proptest::prelude::*;
use rand::Rng;

fn unit_quat() -> impl Strategy<Value = Quat> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|[w, x, y, z]| Quat::new(w, x, y, z).normalized())
}

#[test]
fn thousand_random_rotations_are_orthonormal() {
    let mut r = rng(3);
    for _ in 0..1000 {
        let q = loop {
            let q = [
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            ];
            if q.iter().map(|v: &f64| v * v).sum::<f64>() > 1e-3 {
                break Quat::new(q[0], q[1], q[2], q[3]).normalized();
            }
        };
        let m = quat_to_matrix(q);
        assert!((m * m.transpose() - Mat3::identity()).abs().max() < 1e-6);
        assert!((m.determinant() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn invalid_cameras_are_rejected() {
    let good = Camera::facing_origin(64, 48, 10.0);
    assert!(good.validate().is_ok());
    assert!(Camera { focal: 0.0, ..good }.validate().is_err());
    assert!(Camera { width: 0, ..good }.validate().is_err());
    assert!(Camera { near: 0.0, ..good }.validate().is_err());
    assert!(Camera { far: good.near, ..good }.validate().is_err());
}

proptest! {
    #[test]
    fn quaternion_sign_does_not_change_rotation(q in unit_quat()) {
        let neg = Quat::new(-q.w, -q.x, -q.y, -q.z);
        prop_assert!((quat_to_matrix(q) - quat_to_matrix(neg)).abs().max() < 1e-12);
    }

    #[test]
    fn unproject_recovers_points(
        sx in -1.0f64..1.0, sy in -1.0f64..1.0, z in 1.0f64..50.0,
        q in unit_quat(), t in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let mut cam = Camera::facing_origin(96, 80, 12.0);
        cam.pose = RigidTransform::new(q, Vec3::new(t[0], t[1], t[2]));
        let local = Vec3::new(sx * z / cam.focal, sy * z / cam.focal, z);
        let p = cam.pose.inverse().apply(local);
        let pr = cam.project(p);
        prop_assert!(pr.in_frustum);
        let back = cam.unproject(pr.pixel, pr.depth);
        prop_assert!((back - p).norm() <= 1e-5 * p.norm().max(1.0));
    }

    #[test]
    fn rigid_root_pose_equals_rigid_motion_of_skinned_mesh(
        rv in prop::array::uniform3(-1.0f32..1.0),
        t in prop::array::uniform3(-0.5f32..0.5),
        seed in 0u64..8,
    ) {
        let model = make_synthetic_model(&SyntheticModelConfig { seed, vertex_count: 162, ..Default::default() }).unwrap();
        let mut r = rng(seed);
        let mut base = PoseParams::neutral(&model);
        for s in base.shape.iter_mut() { *s = r.gen_range(-1.0..1.0); }
        for e in base.expression.iter_mut() { *e = r.gen_range(-1.0..1.0); }
        for p in base.pose.iter_mut().skip(1) { *p = [r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3), 0.0]; }
        let offset = vec![[0.0; 3]; model.vertex_count()];
        let morphed = morph(&model, &base, &offset).unwrap();
        let rest = skin(&model, &morphed, &base).unwrap();

        let mut moved = base.clone();
        moved.pose[0] = rv;
        moved.translation = t;
        let posed = skin(&model, &morph(&model, &moved, &offset).unwrap(), &moved).unwrap();

        let rot = rotation_vector_to_matrix(Vec3::new(rv[0] as f64, rv[1] as f64, rv[2] as f64));
        let j0 = model.joints(&base.shape).unwrap()[0];
        let tv = Vec3::new(t[0] as f64, t[1] as f64, t[2] as f64);
        for (a, b) in rest.iter().zip(&posed) {
            let x = Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64);
            let expected = rot * (x - j0) + j0 + tv;
            let got = Vec3::new(b[0] as f64, b[1] as f64, b[2] as f64);
            prop_assert!((expected - got).norm() < 1e-5, "{} vs {}", expected, got);
        }
    }

    #[test]
    fn identity_transforms_leave_vertices_untouched(seed in 0u64..16) {
        let model = make_synthetic_model(&SyntheticModelConfig { seed, ..Default::default() }).unwrap();
        let mut r = rng(seed);
        let pts: Vec<[f32; 3]> = (0..model.vertex_count())
            .map(|_| [r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0)])
            .collect();
        let id = vec![JointTransform::identity(); model.joint_count()];
        prop_assert_eq!(blend_transforms(&pts, &model.skin_weights, &id).unwrap(), pts);
    }

    #[test]
    fn skin_weights_are_convex(seed in 0u64..16) {
        let model = make_synthetic_model(&SyntheticModelConfig { seed, ..Default::default() }).unwrap();
        for row in model.skin_weights.rows() {
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
