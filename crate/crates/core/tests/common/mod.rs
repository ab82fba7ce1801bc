//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sde_core::pose::{yaw_matrix, Box3, Vec3};

/// Exact `ᾱ_t` for the T=1000, β ∈ [1e-4, 0.02] schedule using integers:
/// `β_t = (999 + 199(t−1)) / 9_990_000`.
pub fn exact_alpha_bars() -> Vec<f64> {
    let step_den = BigInt::from(9_990_000u64);
    let scale = BigInt::from(10u32).pow(80);
    let mut num = BigInt::from(1u32);
    let mut den = BigInt::from(1u32);
    let mut out = Vec::new();
    for t in 1..=1000u64 {
        num *= BigInt::from(9_990_000u64 - (999 + 199 * (t - 1)));
        den *= &step_den;
        let q: BigInt = &num * &scale / &den;
        let digits = q.to_string().len() as i32;
        let shift = (digits - 30).max(0) as u32;
        let lead = (&q / BigInt::from(10u32).pow(shift)).to_f64().unwrap();
        out.push(lead * 10f64.powi(shift as i32) / 1e80);
    }
    out
}

/// IoU of two yaw-only boxes from stratified jittered samples inside `a`.
pub fn monte_carlo_iou(a: &Box3, b: &Box3, samples_per_axis: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, c) = a.yaw.sin_cos();
    let n = samples_per_axis;
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let u = [
                    (i as f64 + rng.random::<f64>()) / n as f64 - 0.5,
                    (j as f64 + rng.random::<f64>()) / n as f64 - 0.5,
                    (k as f64 + rng.random::<f64>()) / n as f64 - 0.5,
                ];
                let l = [u[0] * a.size[0], u[1] * a.size[1], u[2] * a.size[2]];
                // independent rotation: x' = c·x + s·z, z' = −s·x + c·z
                let p = [
                    c * l[0] + s * l[2] + a.center[0],
                    l[1] + a.center[1],
                    -s * l[0] + c * l[2] + a.center[2],
                ];
                if inside(b, p) {
                    hits += 1;
                }
            }
        }
    }
    let va = a.size.iter().product::<f64>();
    let vb = b.size.iter().product::<f64>();
    let inter = va * hits as f64 / (n * n * n) as f64;
    inter / (va + vb - inter)
}

fn inside(b: &Box3, p: Vec3) -> bool {
    let r = yaw_matrix(b.yaw);
    let d = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
    (0..3).all(|k| {
        let local = r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2];
        local.abs() <= 0.5 * b.size[k]
    })
}

pub fn random_box<R: Rng>(rng: &mut R) -> Box3 {
    Box3 {
        center: [rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3), rng.random_range(2.0..3.0)],
        size: [rng.random_range(0.3..1.5), rng.random_range(0.3..1.5), rng.random_range(0.3..1.5)],
        yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    }
}

/// Linear-scan nearest neighbor: `(index, dx·dx + dy·dy + dz·dz)`, lowest index on ties.
pub fn brute_nearest(q: &Vec3, points: &[Vec3]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let dx = q[0] - p[0];
        let dy = q[1] - p[1];
        let dz = q[2] - p[2];
        let d = dx * dx + dy * dy + dz * dz;
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Brute-force one-sided Chamfer: value and gradient with respect to each source point.
pub fn brute_one_sided(targets: &[Vec3], sources: &[Vec3]) -> (f64, Vec<Vec3>, Vec<usize>) {
    let k = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![[0.0; 3]; sources.len()];
    let mut argmin = Vec::with_capacity(targets.len());
    for q in targets {
        let (i, d) = brute_nearest(q, sources);
        total += d;
        argmin.push(i);
        for a in 0..3 {
            grad[i][a] += 2.0 * (sources[i][a] - q[a]) / k;
        }
    }
    (total / k, grad, argmin)
}

/// Random points with deliberate duplicates and lattice ties.
pub fn tie_prone_cloud<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec3> {
    let mut pts: Vec<Vec3> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                [rng.random_range(0..4) as f64 * 0.25, rng.random_range(0..4) as f64 * 0.25, rng.random_range(0..4) as f64 * 0.25]
            } else {
                [rng.random(), rng.random(), rng.random()]
            }
        })
        .collect();
    for i in 0..n / 20 {
        let j = rng.random_range(0..n);
        pts[j] = pts[i];
    }
    pts
}

/// Nearest ray hit against a scene, computed in camera space from each
/// Gaussian's world covariance `(RS)Σ(RS)ᵀ` rather than in the canonical frame.
/// Returns `(depth, object index)` of the closest hit.
pub fn brute_ray_hit(scene: &sde_core::scenes::SceneSpec, dir: Vec3) -> Option<(f64, usize)> {
    use nalgebra::{Matrix3, Vector3};
    let rho_sq = sde_core::shape::ellipsoid_rho_sq(sde_core::scenes::SHAPE_ISO);
    let d = Vector3::from(dir);
    let mut best: Option<(f64, usize)> = None;
    for (oi, obj) in scene.objects.iter().enumerate() {
        let center = sde_core::pose::object_center(&obj.pose, obj.box_center(), &scene.camera).unwrap();
        let r = Matrix3::from_fn(|i, j| yaw_matrix(obj.pose.theta)[i][j]);
        let rs = r * Matrix3::from_diagonal(&Vector3::from(obj.pose.s));
        for g in &obj.scaffold.gaussians {
            let cov = Matrix3::from_fn(|i, j| g.covariance()[i][j]);
            let world = rs * cov * rs.transpose();
            let inv = world.try_inverse().unwrap();
            let cw = Vector3::from(center) + rs * Vector3::from(g.mu);
            let qa = d.dot(&(inv * d));
            let qb = -d.dot(&(inv * cw));
            let qc = cw.dot(&(inv * cw)) - rho_sq;
            let disc = qb * qb - qa * qc;
            if disc < 0.0 {
                continue;
            }
            let t0 = (-qb - disc.sqrt()) / qa;
            let t = if t0 > 0.0 { t0 } else { (-qb + disc.sqrt()) / qa };
            if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, oi));
            }
        }
    }
    best
}
