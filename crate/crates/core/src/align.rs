//! Surface alignment: back-projected depth targets against pose-transformed
//! scaffold samples, scored by a one-sided Chamfer distance with analytic
//! gradients back to the normalized pose and shape code.

use rand::Rng;

use crate::diffusion::standard_normal;
use crate::error::{invalid, CoreError, Result};
use crate::knn::{dist_sq, KdTree};
use crate::pose::{mat_t_vec, mat_vec, norm3, object_center, yaw_matrix, Camera, Mat3, ObjectPose, PoseNormalizer, Vec3, POSE_DIM, POSITIVE_FLOOR};
use crate::scenes::{Observation, BACKGROUND_DEPTH};
use crate::shape::{polar_vjp, sample_points, sigmoid, unpack_shape_code, ShapeNormalizer, GAUSSIAN_PARAMS};

/// Weight of the alignment term in the joint objective.
pub const ALIGN_WEIGHT: f64 = 0.01;
/// Samples per Gaussian at full scale.
pub const ALIGN_SAMPLES: usize = 1000;

/// Depth map with a parallel instance-id grid (0 = background, `i + 1` = object `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthObservation {
    pub camera: Camera,
    pub depth: Vec<f32>,
    pub instance: Vec<u16>,
}

impl DepthObservation {
    pub fn new(camera: Camera, depth: Vec<f32>, instance: Vec<u16>) -> Result<Self> {
        let n = camera.width * camera.height;
        if depth.len() != n || instance.len() != n {
            return invalid(
                "depth observation",
                format!("{}x{} image needs {n} pixels, got depth {} / ids {}", camera.width, camera.height, depth.len(), instance.len()),
            );
        }
        Ok(Self { camera, depth, instance })
    }

    pub fn from_render(camera: Camera, obs: &Observation) -> Result<Self> {
        Self::new(camera, obs.depth.clone(), obs.instance.clone())
    }
}

/// Camera-frame surface points `z·K⁻¹[u, v, 1]` of object `object`'s valid pixels.
pub fn backproject_depth(obs: &DepthObservation, object: usize) -> Result<Vec<Vec3>> {
    let w = obs.camera.width;
    let id = object + 1;
    let mut out = Vec::new();
    for (idx, (&z, &inst)) in obs.depth.iter().zip(&obs.instance).enumerate() {
        if inst as usize != id || z == BACKGROUND_DEPTH || !(z > 0.0) {
            continue;
        }
        let r = obs.camera.ray((idx % w) as f64, (idx / w) as f64);
        let z = z as f64;
        out.push([z * r[0], z * r[1], z * r[2]]);
    }
    if out.is_empty() {
        return Err(CoreError::MissingMask(object));
    }
    Ok(out)
}

/// Targets for every object; objects without valid pixels get an empty set.
pub fn alignment_targets(obs: &DepthObservation, objects: usize) -> Vec<Vec<Vec3>> {
    (0..objects).map(|i| backproject_depth(obs, i).unwrap_or_default()).collect()
}

/// Canonical point `x` placed by the pose: `c + R(θ)(s ⊙ x)`.
pub fn place_point(center: Vec3, rot: &Mat3, size: Vec3, x: Vec3) -> Vec3 {
    let r = mat_vec(rot, [size[0] * x[0], size[1] * x[1], size[2] * x[2]]);
    [center[0] + r[0], center[1] + r[1], center[2] + r[2]]
}

pub fn transform_shape_samples<R: Rng + ?Sized>(
    scaffold: &crate::shape::Scaffold,
    pose: &ObjectPose,
    box_center: [f64; 2],
    camera: &Camera,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Vec3>> {
    let pts = sample_points(scaffold, m, rng)?;
    let center = object_center(pose, box_center, camera)?;
    let rot = yaw_matrix(pose.theta);
    Ok(pts.into_iter().map(|x| place_point(center, &rot, pose.s, x)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chamfer {
    pub value: f64,
    /// Gradient with respect to every source point.
    pub grad: Vec<Vec3>,
    /// Nearest source index for every target.
    pub argmin: Vec<usize>,
}

/// `(1/K)·Σ_k min_p ‖q_k − p‖²`; each target's gradient flows to its nearest
/// source (lowest index on ties). Targets are reduced in order.
pub fn one_sided_chamfer(targets: &[Vec3], sources: &[Vec3]) -> Result<Chamfer> {
    if targets.is_empty() || sources.is_empty() {
        return invalid("chamfer", format!("{} targets and {} sources; both must be non-empty", targets.len(), sources.len()));
    }
    let tree = KdTree::new(sources);
    let k = targets.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; sources.len()];
    let mut argmin = Vec::with_capacity(targets.len());
    for q in targets {
        let (i, d) = tree.nearest(q).expect("non-empty tree");
        debug_assert_eq!(d, dist_sq(q, &sources[i]));
        value += d;
        argmin.push(i);
        for a in 0..3 {
            grad[i][a] += 2.0 * (sources[i][a] - q[a]) / k;
        }
    }
    Ok(Chamfer {
        value: value / k,
        grad,
        argmin,
    })
}

/// One object's prediction in diffusion space.
#[derive(Debug, Clone, Copy)]
pub struct AlignObject<'a> {
    pub pose: &'a [f64],
    pub shape: &'a [f64],
    pub box_center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutput {
    /// `weight · mean_i term_i` over objects with targets.
    pub value: f64,
    /// Unweighted per-object terms; `None` for masked objects.
    pub terms: Vec<Option<f64>>,
    /// Gradients of `value` with respect to the normalized inputs.
    pub grad_pose: Vec<[f64; POSE_DIM]>,
    pub grad_shape: Vec<Vec<f64>>,
}

/// Frozen reparameterization noise: `g·m·3` standard normals per object.
pub fn alignment_noise<R: Rng + ?Sized>(objects: usize, components: usize, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..objects).map(|_| standard_normal(components * m * 3, rng)).collect()
}

pub struct AlignContext<'a> {
    pub camera: &'a Camera,
    pub pose_norm: &'a PoseNormalizer,
    pub shape_norm: &'a ShapeNormalizer,
    pub components: usize,
    /// Samples per Gaussian.
    pub m: usize,
}

/// Alignment loss and its gradients for a scene. Objects with no target
/// points are excluded from the mean and receive zero gradient.
pub fn surface_alignment_loss(
    ctx: &AlignContext,
    objects: &[AlignObject],
    targets: &[Vec<Vec3>],
    noise: &[Vec<f64>],
    weight: f64,
) -> Result<AlignOutput> {
    if objects.len() != targets.len() || objects.len() != noise.len() {
        return invalid(
            "alignment",
            format!("{} objects, {} target sets, {} noise sets", objects.len(), targets.len(), noise.len()),
        );
    }
    let visible = targets.iter().filter(|t| !t.is_empty()).count();
    let mut out = AlignOutput {
        value: 0.0,
        terms: vec![None; objects.len()],
        grad_pose: vec![[0.0; POSE_DIM]; objects.len()],
        grad_shape: objects.iter().map(|o| vec![0.0; o.shape.len()]).collect(),
    };
    if visible == 0 {
        return Ok(out);
    }
    let scale = weight / visible as f64;
    for (i, obj) in objects.iter().enumerate() {
        if targets[i].is_empty() {
            continue;
        }
        let (term, gp, gs) = object_term(ctx, obj, &targets[i], &noise[i])?;
        out.value += scale * term;
        out.terms[i] = Some(term);
        out.grad_pose[i] = gp.map(|g| g * scale);
        out.grad_shape[i] = gs.into_iter().map(|g| g * scale).collect();
    }
    Ok(out)
}

/// Unweighted term and gradients with respect to the normalized pose and code.
fn object_term(ctx: &AlignContext, obj: &AlignObject, targets: &[Vec3], z: &[f64]) -> Result<(f64, [f64; POSE_DIM], Vec<f64>)> {
    let g = ctx.components;
    let m = ctx.m;
    if obj.shape.len() != g * GAUSSIAN_PARAMS {
        return invalid("alignment", format!("shape code has {} values, expected {}", obj.shape.len(), g * GAUSSIAN_PARAMS));
    }
    if z.len() != g * m * 3 {
        return invalid("alignment", format!("noise has {} values, expected {}", z.len(), g * m * 3));
    }
    let coeffs = ctx.pose_norm.coefficients();
    let raw_pose: [f64; POSE_DIM] = std::array::from_fn(|k| coeffs[k].0 + obj.pose.get(k).copied().unwrap_or(0.0) * coeffs[k].1);
    let pose = ctx.pose_norm.denormalize(obj.pose)?;
    let code = ctx.shape_norm.denormalize(obj.shape);
    let scaffold = unpack_shape_code(&code, g)?;

    // forward: canonical samples, then placement
    let cam = ctx.camera;
    let ray = cam.ray(obj.box_center[0] + pose.delta[0], obj.box_center[1] + pose.delta[1]);
    let rn = norm3(ray);
    let dir = ray.map(|x| x / rn);
    let center = dir.map(|x| pose.d * x);
    let rot = yaw_matrix(pose.theta);
    let mut canon = Vec::with_capacity(g * m);
    for (j, gs) in scaffold.gaussians.iter().enumerate() {
        let sd = gs.lambda.map(f64::sqrt);
        for l in 0..m {
            let zz = &z[3 * (j * m + l)..3 * (j * m + l) + 3];
            let e = [sd[0] * zz[0], sd[1] * zz[1], sd[2] * zz[2]];
            canon.push(std::array::from_fn::<f64, 3, _>(|a| gs.mu[a] + gs.u[a][0] * e[0] + gs.u[a][1] * e[1] + gs.u[a][2] * e[2]));
        }
    }
    let placed: Vec<Vec3> = canon.iter().map(|&x| place_point(center, &rot, pose.s, x)).collect();
    let ch = one_sided_chamfer(targets, &placed)?;

    // backward through placement
    let (st, ct) = pose.theta.sin_cos();
    let drot: Mat3 = [[-st, 0.0, ct], [0.0, 0.0, 0.0], [-ct, 0.0, -st]];
    let mut g_center = [0.0; 3];
    let mut g_theta = 0.0;
    let mut g_size = [0.0; 3];
    let mut g_canon = vec![[0.0; 3]; canon.len()];
    for (p, gp) in ch.grad.iter().enumerate() {
        if gp == &[0.0; 3] {
            continue;
        }
        let x = canon[p];
        let sx = [pose.s[0] * x[0], pose.s[1] * x[1], pose.s[2] * x[2]];
        for a in 0..3 {
            g_center[a] += gp[a];
        }
        let dr = mat_vec(&drot, sx);
        g_theta += gp[0] * dr[0] + gp[1] * dr[1] + gp[2] * dr[2];
        let local = mat_t_vec(&rot, *gp);
        for a in 0..3 {
            g_size[a] += local[a] * x[a];
            g_canon[p][a] = local[a] * pose.s[a];
        }
    }

    // center = d · ray/‖ray‖
    let mut g_raw = [0.0; POSE_DIM];
    let gc_dot_dir = g_center[0] * dir[0] + g_center[1] * dir[1] + g_center[2] * dir[2];
    let g_ray: Vec3 = std::array::from_fn(|a| pose.d * (g_center[a] - gc_dot_dir * dir[a]) / rn);
    g_raw[0] = g_ray[0] / cam.fx;
    g_raw[1] = g_ray[1] / cam.fy;
    g_raw[2] = if raw_pose[2] > POSITIVE_FLOOR { gc_dot_dir } else { 0.0 };
    for a in 0..3 {
        g_raw[3 + a] = if raw_pose[3 + a] > POSITIVE_FLOOR { g_size[a] } else { 0.0 };
    }
    g_raw[6] = g_theta;
    let g_pose: [f64; POSE_DIM] = std::array::from_fn(|k| g_raw[k] * coeffs[k].1);

    // backward through the reparameterized samples and the code unpacking
    let mut g_code = vec![0.0; g * GAUSSIAN_PARAMS];
    for (j, gs) in scaffold.gaussians.iter().enumerate() {
        let sd = gs.lambda.map(f64::sqrt);
        let mut g_mu = [0.0; 3];
        let mut g_u = [[0.0; 3]; 3];
        let mut g_lambda = [0.0; 3];
        for l in 0..m {
            let h = g_canon[j * m + l];
            if h == [0.0; 3] {
                continue;
            }
            let zz = &z[3 * (j * m + l)..3 * (j * m + l) + 3];
            let uth = mat_t_vec(&gs.u, h);
            for a in 0..3 {
                g_mu[a] += h[a];
                for k in 0..3 {
                    g_u[a][k] += h[a] * sd[k] * zz[k];
                }
                g_lambda[a] += uth[a] * zz[a] / (2.0 * sd[a]);
            }
        }
        let c = &code[j * GAUSSIAN_PARAMS..(j + 1) * GAUSSIAN_PARAMS];
        let mraw: Mat3 = std::array::from_fn(|a| std::array::from_fn(|b| c[3 + 3 * a + b]));
        let g_m = polar_vjp(&mraw, &g_u);
        let out = &mut g_code[j * GAUSSIAN_PARAMS..(j + 1) * GAUSSIAN_PARAMS];
        out[..3].copy_from_slice(&g_mu);
        for a in 0..3 {
            for b in 0..3 {
                out[3 + 3 * a + b] = g_m[a][b];
            }
            out[12 + a] = g_lambda[a] * sigmoid(c[12 + a]);
        }
    }
    for (i, v) in g_code.iter_mut().enumerate() {
        *v *= ctx.shape_norm.slot_scale(i);
    }
    Ok((ch.value, g_pose, g_code))
}
