// oracles index the way the formulas do
#![allow(clippy::needless_range_loop)]

mod common;

use sde_core::pose::{iou3d, norm3, object_center, Box3, Camera};
use sde_core::scenes::{
    generate_scene, normalize_to_unit_cube, observation_patch, pose_from_box, render_depth, scene_rng, template_scaffold,
    ObjectSpec, SceneConfig, SceneSpec, BACKGROUND_DEPTH, NUM_CLASSES, PATCH_CHANNELS, PATCH_SIZE, SHAPE_ISO,
};
use sde_core::shape::{Gaussian, Scaffold};

fn camera() -> Camera {
    Camera::centered(128.0, 128).unwrap()
}

#[test]
fn templates_fill_the_unit_cube_with_sixteen_gaussians() {
    for class in 0..NUM_CLASSES {
        for variant in 0..8 {
            let sc = template_scaffold(class, variant, 16);
            assert_eq!(sc.len(), 16);
            let (lo, hi) = sc.bounds(SHAPE_ISO);
            for k in 0..3 {
                assert!((lo[k] + 0.5).abs() < 1e-9 && (hi[k] - 0.5).abs() < 1e-9, "class {class} variant {variant}");
            }
            assert!(sc.gaussians.iter().all(|g| g.lambda.iter().all(|&l| l > 0.0 && l.is_finite())));
        }
        assert_ne!(template_scaffold(class, 0, 16), template_scaffold(class, 6, 16));
    }
}

#[test]
fn same_seed_gives_identical_scene() {
    let cfg = SceneConfig::default();
    for i in 0..5 {
        let a = generate_scene(&mut scene_rng(11, i), &cfg).unwrap();
        let b = generate_scene(&mut scene_rng(11, i), &cfg).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }
    let a = generate_scene(&mut scene_rng(11, 0), &cfg).unwrap();
    let b = generate_scene(&mut scene_rng(11, 1), &cfg).unwrap();
    assert_ne!(a, b);
}

#[test]
fn thousand_scenes_respect_overlap_counts_and_ranges() {
    let cfg = SceneConfig::default();
    let cam = camera();
    for i in 0..1000 {
        let scene = generate_scene(&mut scene_rng(3, i), &cfg).unwrap();
        let n = scene.objects.len();
        assert!((1..=8).contains(&n));
        let boxes: Vec<Box3> = scene.objects.iter().map(|o| o.box3(&cam).unwrap()).collect();
        for a in 0..n {
            let p = &scene.objects[a].pose;
            assert!((0.7..=5.0).contains(&p.d));
            assert!(p.s.iter().all(|&s| (0.3..=3.0).contains(&s)));
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&p.theta));
            let b = scene.objects[a].box2d;
            assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 128.0 && b[3] <= 128.0 && b[2] > b[0] && b[3] > b[1]);
            for c in a + 1..n {
                assert!(iou3d(&boxes[a], &boxes[c]).unwrap() <= 0.05 + 1e-12, "scene {i}");
            }
        }
    }
}

#[test]
fn rejection_budget_is_reported() {
    let cfg = SceneConfig {
        min_objects: 8,
        depth_range: [1.8, 1.81],
        ..SceneConfig::default()
    };
    let err = generate_scene(&mut scene_rng(0, 0), &cfg).unwrap_err();
    assert!(err.to_string().contains("10000"), "{err}");
}

fn sphere_scene() -> SceneSpec {
    let cam = camera();
    let scaffold = normalize_to_unit_cube(Scaffold::new(vec![Gaussian::isotropic([0.0; 3], 1.0)]));
    let b = Box3 {
        center: [0.0, 0.0, 2.0],
        size: [1.0; 3],
        yaw: 0.0,
    };
    let (pose, box2d) = pose_from_box(&b, &cam).unwrap();
    SceneSpec {
        camera: cam,
        objects: vec![ObjectSpec {
            class: 0,
            variant: 0,
            pose,
            box2d,
            scaffold,
        }],
    }
}

#[test]
fn empty_scene_is_all_background() {
    let obs = render_depth(&SceneSpec {
        camera: camera(),
        objects: vec![],
    })
    .unwrap();
    assert!(obs.depth.iter().all(|&d| d == BACKGROUND_DEPTH));
    assert!(obs.instance.iter().all(|&i| i == 0));
}

#[test]
fn unit_sphere_center_pixel_depth() {
    let scene = sphere_scene();
    let p = &scene.objects[0].pose;
    assert!(p.delta[0].abs() < 1e-12 && p.delta[1].abs() < 1e-12);
    let obs = render_depth(&scene).unwrap();
    let center = 64 * 128 + 64;
    assert!((obs.depth[center] - 1.5).abs() < 1e-6, "{}", obs.depth[center]);
    assert_eq!(obs.instance[center], 1);
    // silhouette radius: tan(asin(0.5/2))·f
    let r = (0.25f64).asin().tan() * 128.0;
    assert_eq!(obs.instance[64 * 128 + 64 + (r - 1.0) as usize], 1);
    assert_eq!(obs.instance[64 * 128 + 64 + (r + 1.0) as usize], 0);
}

#[test]
fn instance_ids_match_brute_force_nearest_hit() {
    let cfg = SceneConfig::default();
    for i in 0..10 {
        let scene = generate_scene(&mut scene_rng(21, i), &cfg).unwrap();
        let obs = render_depth(&scene).unwrap();
        for v in 0..128 {
            for u in 0..128 {
                let idx = v * 128 + u;
                let oracle = common::brute_ray_hit(&scene, scene.camera.ray(u as f64, v as f64));
                match oracle {
                    None => assert_eq!(obs.instance[idx], 0, "scene {i} pixel ({u},{v})"),
                    Some((t, oi)) => {
                        assert_eq!(obs.instance[idx] as usize, oi + 1, "scene {i} pixel ({u},{v})");
                        assert!((obs.depth[idx] as f64 - t).abs() < 1e-4 * t);
                    }
                }
            }
        }
    }
}

#[test]
fn rendered_depth_is_physically_possible() {
    let cfg = SceneConfig::default();
    for i in 0..20 {
        let scene = generate_scene(&mut scene_rng(5, i), &cfg).unwrap();
        let obs = render_depth(&scene).unwrap();
        for (idx, (&z, &id)) in obs.depth.iter().zip(&obs.instance).enumerate() {
            if id == 0 {
                continue;
            }
            let o = &scene.objects[id as usize - 1];
            let ray = scene.camera.ray((idx % 128) as f64, (idx / 128) as f64);
            let dist = z as f64 * norm3(ray);
            assert!(z > 0.0);
            assert!(dist >= o.pose.d - 0.5 * norm3(o.pose.s) - 1e-5);
        }
    }
}

#[test]
fn box_projection_round_trips_center_and_symmetry() {
    let cam = camera();
    let cfg = SceneConfig::default();
    for i in 0..50 {
        let scene = generate_scene(&mut scene_rng(8, i), &cfg).unwrap();
        for o in &scene.objects {
            let c = object_center(&o.pose, o.box_center(), &cam).unwrap();
            let b = o.box3(&cam).unwrap();
            let (pose, box2d) = pose_from_box(&b, &cam).unwrap();
            for k in 0..4 {
                assert!((box2d[k] - o.box2d[k]).abs() < 1e-9);
            }
            for k in 0..3 {
                assert!((c[k] - b.center[k]).abs() < 1e-4);
            }
            assert!((pose.d - o.pose.d).abs() < 1e-9);
        }
    }
    let b = Box3 {
        center: [0.0, 0.0, 3.0],
        size: [1.0, 0.8, 1.2],
        yaw: 0.0,
    };
    let (pose, _) = pose_from_box(&b, &cam).unwrap();
    assert!(pose.delta[0].abs() < 1e-9 && pose.delta[1].abs() < 1e-9);
    let behind = Box3 {
        center: [0.0, 0.0, -3.0],
        ..b
    };
    assert!(pose_from_box(&behind, &cam).is_none());
    let offscreen = Box3 {
        center: [40.0, 0.0, 3.0],
        ..b
    };
    assert!(pose_from_box(&offscreen, &cam).is_none());
}

#[test]
fn patches_encode_depth_and_mask_fraction() {
    let scene = sphere_scene();
    let obs = render_depth(&scene).unwrap();
    let patch = &obs.patches[0];
    assert_eq!(patch.len(), PATCH_SIZE * PATCH_SIZE * PATCH_CHANNELS);
    // the central cells are fully covered and closest to the camera
    let center = (3 * PATCH_SIZE + 3) * PATCH_CHANNELS;
    let corner = 0;
    assert!((patch[center + 1] - 1.0).abs() < 1e-6);
    assert!(patch[corner + 1] < 0.5);
    assert!(patch[center] < ((2.0 - 2.7) / 2.5) as f32 + 1e-3);
    // a box over background yields an all-zero patch
    let empty = observation_patch(&obs.depth, &obs.instance, 128, 128, [0.0, 0.0, 8.0, 8.0], 0);
    assert!(empty.iter().all(|&x| x == 0.0));
}
