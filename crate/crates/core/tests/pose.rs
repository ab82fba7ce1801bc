// the yaw normalization scale is the literal 3.14, not π
#![allow(clippy::approx_constant)]

mod common;

use common::{monte_carlo_iou, random_box};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sde_core::pose::*;
use std::f64::consts::PI;

fn camera() -> Camera {
    Camera::centered(128.0, 128).unwrap()
}

fn pose(delta: [f64; 2], d: f64, s: Vec3, theta: f64) -> ObjectPose {
    ObjectPose { delta, d, s, theta }
}

#[test]
fn normalization_constants() {
    let n = PoseNormalizer::new(&camera());
    let v = n.normalize(&pose([0.0, 0.0], 2.7, [3.5; 3], -3.14));
    assert_eq!(v[2], 0.0);
    assert_eq!(v[6], -1.0);
    let p = n.denormalize(&[0.0; 7]).unwrap();
    assert_eq!(p, pose([0.0, 0.0], 2.7, [3.5; 3], 0.0));
    let mut v = [0.0; 7];
    v[2] = 1.0;
    assert!((n.denormalize(&v).unwrap().d - 5.2).abs() < 1e-12);
    v[2] = -1.2;
    assert_eq!(n.denormalize(&v).unwrap().d, 1e-3);
    assert!(n.denormalize(&[0.0; 6]).is_err());
    // δ uses width for u and height for v
    let wide = Camera::new(100.0, 100.0, 80.0, 40.0, 160, 80).unwrap();
    let v = PoseNormalizer::new(&wide).normalize(&pose([16.0, 16.0], 2.7, [3.5; 3], 0.0));
    assert_eq!((v[0], v[1]), (0.1, 0.2));
}

#[test]
fn wrap_angle_range() {
    assert_eq!(wrap_angle(PI), -PI);
    assert_eq!(wrap_angle(-PI), -PI);
    assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    for k in -50..50 {
        let w = wrap_angle(k as f64 * 0.37);
        assert!((-PI..PI).contains(&w));
    }
}

proptest! {
    #[test]
    fn normalize_round_trip(
        du in -30.0f64..30.0, dv in -30.0f64..30.0, d in 0.5f64..6.0,
        sx in 0.2f64..3.0, sy in 0.2f64..3.0, sz in 0.2f64..3.0, th in -3.14f64..3.14,
    ) {
        let n = PoseNormalizer::new(&camera());
        let p = pose([du, dv], d, [sx, sy, sz], th);
        let back = n.denormalize(&n.normalize(&p)).unwrap();
        prop_assert!((back.delta[0] - du).abs() < 1e-6 && (back.delta[1] - dv).abs() < 1e-6);
        prop_assert!((back.d - d).abs() < 1e-6);
        for k in 0..3 { prop_assert!((back.s[k] - p.s[k]).abs() < 1e-6); }
        prop_assert!((back.theta - th).abs() < 1e-6);
    }

    #[test]
    fn iou_symmetric_and_rigidly_invariant(seed in 0u64..10_000, yaw in -PI..PI, tx in -2.0f64..2.0, tz in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_box(&mut rng);
        let b = random_box(&mut rng);
        let ab = iou3d(&a, &b).unwrap();
        prop_assert_eq!(ab, iou3d(&b, &a).unwrap());
        let r = yaw_matrix(yaw);
        let move_box = |x: &Box3| Box3 {
            center: {
                let c = mat_vec(&r, x.center);
                [c[0] + tx, c[1], c[2] + tz]
            },
            size: x.size,
            yaw: x.yaw + yaw,
        };
        let moved = iou3d(&move_box(&a), &move_box(&b)).unwrap();
        prop_assert!((moved - ab).abs() < 1e-9, "{} vs {}", moved, ab);
    }
}

#[test]
fn principal_ray_center() {
    let cam = camera();
    let p = pose([0.0, 0.0], 2.0, [1.0; 3], 0.0);
    let m = pose_to_rigid_transform(&p, [cam.cx, cam.cy], &cam).unwrap();
    assert_eq!([m[0][3], m[1][3], m[2][3]], [0.0, 0.0, 2.0]);
    for (i, row) in m.iter().take(3).enumerate() {
        for (j, &v) in row.iter().take(3).enumerate() {
            assert_eq!(v, if i == j { 1.0 } else { 0.0 });
        }
    }
    assert_eq!(m[3], [0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn center_reprojects_to_offset_box_center() {
    let cam = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    use rand::Rng;
    for _ in 0..200 {
        let center = [rng.random_range(10.0..118.0), rng.random_range(10.0..118.0)];
        let p = pose([rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)], rng.random_range(0.7..5.0), [1.0; 3], rng.random_range(-PI..PI));
        let c = object_center(&p, center, &cam).unwrap();
        assert!((norm3(c) - p.d).abs() < 1e-12);
        let uv = cam.project(c);
        assert!((uv[0] - center[0] - p.delta[0]).abs() < 1e-4);
        assert!((uv[1] - center[1] - p.delta[1]).abs() < 1e-4);
    }
}

#[test]
fn degenerate_camera_is_rejected() {
    assert!(Camera::new(0.0, 100.0, 64.0, 64.0, 128, 128).is_err());
    assert!(Camera::new(100.0, 100.0, 200.0, 64.0, 128, 128).is_err());
    let mut cam = camera();
    cam.fy = f64::NAN;
    assert!(object_center(&pose([0.0; 2], 2.0, [1.0; 3], 0.0), [64.0, 64.0], &cam).is_err());
}

fn cube(center: Vec3, yaw: f64) -> Box3 {
    Box3 { center, size: [1.0; 3], yaw }
}

#[test]
fn iou_examples() {
    let a = cube([0.0, 0.0, 3.0], 0.3);
    assert_eq!(iou3d(&a, &a).unwrap(), 1.0);
    assert_eq!(iou3d(&a, &cube([5.0, 0.0, 3.0], 0.0)).unwrap(), 0.0);
    assert_eq!(iou3d(&a, &cube([0.0, 2.0, 3.0], 0.3)).unwrap(), 0.0);
    let shifted = iou3d(&cube([0.0, 0.0, 3.0], 0.0), &cube([0.5, 0.0, 3.0], 0.0)).unwrap();
    assert!((shifted - 1.0 / 3.0).abs() < 1e-12);
    // a quarter turn maps a cube onto itself
    let turned = iou3d(&cube([0.0, 0.0, 3.0], 0.0), &cube([0.0, 0.0, 3.0], PI / 2.0)).unwrap();
    assert!((turned - 1.0).abs() < 1e-12);
    let flat = Box3 { center: [0.0; 3], size: [1.0, 0.0, 1.0], yaw: 0.0 };
    assert!(iou3d(&a, &flat).is_err());
}

#[test]
fn iou_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    while checked < 10 {
        let a = random_box(&mut rng);
        let mut b = random_box(&mut rng);
        b.center = [a.center[0] + 0.3, a.center[1] + 0.1, a.center[2] - 0.2];
        let exact = iou3d(&a, &b).unwrap();
        let mc = monte_carlo_iou(&a, &b, 60, checked);
        assert!((exact - mc).abs() < 3e-3, "{exact} vs {mc}");
        checked += 1;
    }
}

fn gt(scene: usize, class: usize, x: f64) -> GroundTruthBox {
    GroundTruthBox { scene, class, bbox: cube([x, 0.0, 3.0], 0.0) }
}

fn det(scene: usize, class: usize, x: f64, confidence: f64) -> Detection {
    Detection { scene, class, bbox: cube([x, 0.0, 3.0], 0.0), confidence }
}

#[test]
fn ap_examples() {
    let gts = [gt(0, 0, 0.0), gt(0, 0, 3.0), gt(1, 1, 0.0)];
    let perfect: Vec<Detection> = gts.iter().map(|g| Detection { scene: g.scene, class: g.class, bbox: g.bbox, confidence: 1.0 }).collect();
    let r = average_precision(&perfect, &gts, 0.15).unwrap();
    assert_eq!(r.mean, 1.0);
    let miss: Vec<Detection> = gts.iter().map(|g| det(g.scene, g.class, 20.0, 1.0)).collect();
    assert_eq!(average_precision(&miss, &gts, 0.15).unwrap().mean, 0.0);
    // same box in the wrong scene never matches
    let wrong_scene = [det(1, 0, 0.0, 1.0)];
    let r = average_precision(&wrong_scene, &gts[..1], 0.15).unwrap();
    assert_eq!(r.mean, 0.0);
}

#[test]
fn ap_hand_computed_curve() {
    let gts: Vec<GroundTruthBox> = (0..4).map(|i| gt(0, 2, 3.0 * i as f64)).collect();
    // ranked outcome T F T T F with four ground truths
    let preds = [
        det(0, 2, 0.0, 0.9),
        det(0, 2, 50.0, 0.8),
        det(0, 2, 3.0, 0.7),
        det(0, 2, 6.0, 0.6),
        det(0, 2, 60.0, 0.5),
    ];
    // precision 1, 1/2, 2/3, 3/4, 3/5 ; recall 1/4, 1/4, 1/2, 3/4, 3/4
    // envelope at recall steps: 1, 3/4, 3/4 → AP = (1 + 0.75 + 0.75)/4
    let r = average_precision(&preds, &gts, 0.15).unwrap();
    assert!((r.mean - 0.625).abs() < 1e-12, "{}", r.mean);
    // a duplicate of a matched box counts as a false positive
    let dup = [det(0, 2, 0.0, 0.9), det(0, 2, 0.0, 0.8)];
    let r = average_precision(&dup, &gts[..1], 0.15).unwrap();
    assert_eq!(r.mean, 1.0);
    assert_eq!(interpolated_ap(&[false, true], 1), 0.5);
}

#[test]
fn classes_without_ground_truth_are_excluded() {
    let gts = [gt(0, 0, 0.0)];
    let preds = [det(0, 0, 0.0, 1.0), det(0, 5, 9.0, 1.0)];
    let r = average_precision(&preds, &gts, 0.15).unwrap();
    assert_eq!(r.per_class.len(), 1);
    assert_eq!(r.mean, 1.0);
}
