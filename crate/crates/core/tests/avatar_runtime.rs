use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use gsavatar_core::avatar::{
    build_avatar, load_avatar, parse_drive_stream, save_avatar, select_lod, write_drive_stream, Avatar, DriveParams,
    DriveRecord, FrameTimer, LodBudget,
};
use gsavatar_core::config::AvatarConfig;
use gsavatar_core::error::Error;
use gsavatar_core::geometry::{rotation_vector_to_matrix, Camera, Vec3};
use gsavatar_core::image::synthetic_portrait;
use gsavatar_core::model::{make_synthetic_model, PoseParams};
use gsavatar_core::neural::rng;
use gsavatar_core::verify::random_drive;
use proptest::prelude::*;

fn build(seed: u64) -> Avatar {
    let config = AvatarConfig {
        seed,
        ..AvatarConfig::desk()
    };
    let model = make_synthetic_model(&config.model).unwrap();
    let (w, h) = config.image_size;
    let camera = Camera::facing_origin(w, h, config.camera_distance);
    let params = PoseParams::neutral(&model);
    build_avatar(&synthetic_portrait(w, h, seed), &model, &camera, &params, &config).unwrap()
}

fn avatar() -> &'static Avatar {
    static A: OnceLock<Avatar> = OnceLock::new();
    A.get_or_init(|| build(5))
}

#[test]
fn builds_are_bit_identical() {
    let a = build(9).to_bytes().unwrap();
    let b = build(9).to_bytes().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build(10).to_bytes().unwrap());
}

#[test]
fn level_counts_follow_edge_rule() {
    let a = avatar();
    let counts: Vec<usize> = a.heads.iter().map(|h| h.len()).collect();
    assert_eq!(counts, [642, 2562, 10242]);
    for (k, plan) in a.plans.iter().enumerate() {
        assert_eq!(counts[k + 1], counts[k] + plan.edges.len());
    }
    assert_eq!(
        a.point_counts(),
        counts.iter().map(|c| c + a.shoulder.len()).collect::<Vec<_>>()
    );
}

#[test]
fn snapshot_round_trip_reenacts_identically() {
    let a = avatar();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.omga");
    save_avatar(a, &path).unwrap();
    let b = load_avatar(&path).unwrap();
    let d = random_drive(&mut rng(1), a.model.joint_count(), a.model.expr_dim());
    for k in 0..=a.max_level() {
        assert_eq!(a.reenact(&d, k).unwrap(), b.reenact(&d, k).unwrap());
    }
}

#[test]
fn tampered_snapshots_are_refused() {
    let bytes = avatar().to_bytes().unwrap();
    let origin = Path::new("mem");
    for at in [bytes.len() / 2, bytes.len() - 3] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        assert!(matches!(Avatar::from_bytes(&bad, origin), Err(Error::Checksum(_))));
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Avatar::from_bytes(&bad, origin).is_err());
    assert!(Avatar::from_bytes(&bytes[..bytes.len() / 3], origin).is_err());
}

#[test]
fn out_of_range_level_is_an_error() {
    let a = avatar();
    let d = DriveParams::neutral(&a.model);
    assert!(a.reenact(&d, a.max_level() + 1).is_err());
}

#[test]
fn drive_stream_round_trip() {
    let a = avatar();
    let mut r = rng(4);
    let drives: Vec<DriveParams> = (0..5)
        .map(|_| random_drive(&mut r, a.model.joint_count(), a.model.expr_dim()))
        .collect();
    let records: Vec<DriveRecord> = drives
        .iter()
        .enumerate()
        .map(|(i, d)| DriveRecord::from_drive(i as u64, d))
        .collect();
    let parsed = parse_drive_stream(&write_drive_stream(&records).unwrap(), &a.model).unwrap();
    assert_eq!(parsed.len(), 5);
    for (i, (frame, d)) in parsed.iter().enumerate() {
        assert_eq!(*frame, i as u64);
        assert_eq!(d, &drives[i]);
    }
    assert!(parse_drive_stream("{\"frame\":0,\"theta\":[1],\"psi\":[]}", &a.model).is_err());
}

#[test]
fn reenact_latency_grows_with_level() {
    let a = avatar();
    let d = random_drive(&mut rng(2), a.model.joint_count(), a.model.expr_dim());
    let best = |k: usize| {
        (0..15)
            .map(|_| {
                let t = Instant::now();
                a.reenact(&d, k).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    assert!(best(0) < best(2));
}

#[test]
fn lod_selection_picks_largest_level_in_budget() {
    let counts = [100, 400, 1600];
    for n in 0..2000 {
        let k = select_lod(&counts, LodBudget::Points(n), None);
        let expected = (0..3).rev().find(|&k| counts[k] <= n).unwrap_or(0);
        assert_eq!(k, expected, "budget {n}");
    }
    let mut timer = FrameTimer::new(3, 4);
    assert_eq!(select_lod(&counts, LodBudget::Millis(5.0), Some(&timer)), 0);
    timer.record(0, 1.0);
    timer.record(1, 4.0);
    timer.record(2, 9.0);
    assert_eq!(select_lod(&counts, LodBudget::Millis(5.0), Some(&timer)), 1);
    assert_eq!(select_lod(&counts, LodBudget::Millis(10.0), Some(&timer)), 2);
    assert_eq!(select_lod(&counts, LodBudget::Millis(0.5), Some(&timer)), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn drives_only_move_head_positions(seed in any::<u64>()) {
        let a = avatar();
        let d = random_drive(&mut rng(seed), a.model.joint_count(), a.model.expr_dim());
        for k in 0..=a.max_level() {
            let g = a.reenact(&d, k).unwrap();
            let n = a.heads[k].len();
            prop_assert_eq!(g.len(), n + a.shoulder.len());
            prop_assert_eq!(&g.rotations[..n], &a.heads[k].rotations[..]);
            prop_assert_eq!(&g.scales[..n], &a.heads[k].scales[..]);
            prop_assert_eq!(&g.opacities[..n], &a.heads[k].opacities[..]);
            prop_assert_eq!(&g.features.rows().into_iter().take(n).flatten().copied().collect::<Vec<_>>(),
                &a.heads[k].features.iter().copied().collect::<Vec<_>>());
            prop_assert_eq!(&g.positions[n..], &a.shoulder.positions[..]);
        }
    }

    #[test]
    fn coarse_positions_are_a_prefix_of_finer_levels(seed in any::<u64>()) {
        let a = avatar();
        let d = random_drive(&mut rng(seed), a.model.joint_count(), a.model.expr_dim());
        let levels: Vec<_> = (0..=a.max_level()).map(|k| a.head_positions(&d, k).unwrap()).collect();
        for k in 1..levels.len() {
            prop_assert_eq!(&levels[k][..levels[k - 1].len()], &levels[k - 1][..]);
            prop_assert_eq!(levels[k].len(), a.heads[k].len());
        }
    }

    #[test]
    fn global_rotation_commutes_with_subdivision(rv in prop::array::uniform3(-0.8f32..0.8)) {
        let a = avatar();
        let neutral = DriveParams::from_params(&a.identity);
        let mut turned = neutral.clone();
        turned.pose[0] = rv;
        let rot = rotation_vector_to_matrix(Vec3::new(rv[0] as f64, rv[1] as f64, rv[2] as f64));
        let j0 = a.model.joints(&a.identity.shape).unwrap()[0];
        let k = a.max_level();
        let rest = a.head_positions(&neutral, k).unwrap();
        let posed = a.head_positions(&turned, k).unwrap();
        for (p, q) in rest.iter().zip(&posed) {
            let x = Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            let expected = rot * (x - j0) + j0;
            let got = Vec3::new(q[0] as f64, q[1] as f64, q[2] as f64);
            prop_assert!((expected - got).norm() < 1e-5);
        }
    }
}
