//! Procedural desk-scale scenes: ellipsoid-union furniture placed on a floor,
//! analytic depth rendering, instance masks, amodal 2D boxes and per-object
//! observation patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pose::{iou3d, mat_t_vec, norm3, wrap_angle, yaw_matrix, Box3, Camera, ObjectPose, Vec3};
use crate::shape::{ellipsoid_rho_sq, Gaussian, Scaffold, IDENTITY};

pub const NUM_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["cabinet", "chair", "table", "sofa", "bed", "lamp", "shelf", "desk"];
/// Iso-level of the scaffold ellipsoids in normalized density.
pub const SHAPE_ISO: f64 = 0.3;
pub const PATCH_SIZE: usize = 8;
pub const PATCH_CHANNELS: usize = 2;
pub const BACKGROUND_DEPTH: f32 = -1.0;
pub const REJECTION_TRIES: usize = 10_000;
/// Depth normalization for observation patches, matching the pose distance prior.
const DEPTH_MU: f64 = 2.7;
const DEPTH_MAX: f64 = 2.5;

/// One template part: center and semi-axes (x, y-up, z) in a class-specific
/// frame, tiled into `count` Gaussians along its longest axis.
struct Part {
    center: [f64; 3],
    radii: [f64; 3],
    count: usize,
}

const fn part(center: [f64; 3], radii: [f64; 3], count: usize) -> Part {
    Part { center, radii, count }
}

fn class_parts(class: usize) -> Vec<Part> {
    match class {
        0 => vec![
            part([0.0, 0.5, 0.0], [0.5, 0.45, 0.3], 6),
            part([0.0, 0.98, 0.0], [0.52, 0.05, 0.32], 3),
            part([0.0, 0.05, 0.0], [0.48, 0.05, 0.28], 3),
            part([-0.15, 0.6, 0.3], [0.03, 0.12, 0.03], 2),
            part([0.15, 0.6, 0.3], [0.03, 0.12, 0.03], 2),
        ],
        1 => vec![
            part([0.0, 0.45, 0.0], [0.25, 0.05, 0.25], 4),
            part([0.0, 0.78, -0.22], [0.25, 0.3, 0.04], 4),
            part([-0.2, 0.22, -0.2], [0.03, 0.22, 0.03], 2),
            part([0.2, 0.22, -0.2], [0.03, 0.22, 0.03], 2),
            part([-0.2, 0.22, 0.2], [0.03, 0.22, 0.03], 2),
            part([0.2, 0.22, 0.2], [0.03, 0.22, 0.03], 2),
        ],
        2 => vec![
            part([0.0, 0.72, 0.0], [0.6, 0.04, 0.4], 8),
            part([-0.52, 0.35, -0.32], [0.04, 0.35, 0.04], 2),
            part([0.52, 0.35, -0.32], [0.04, 0.35, 0.04], 2),
            part([-0.52, 0.35, 0.32], [0.04, 0.35, 0.04], 2),
            part([0.52, 0.35, 0.32], [0.04, 0.35, 0.04], 2),
        ],
        3 => vec![
            part([0.0, 0.25, 0.05], [0.9, 0.2, 0.4], 5),
            part([0.0, 0.55, -0.38], [0.9, 0.3, 0.12], 5),
            part([-0.85, 0.4, 0.0], [0.1, 0.2, 0.45], 3),
            part([0.85, 0.4, 0.0], [0.1, 0.2, 0.45], 3),
        ],
        4 => vec![
            part([0.0, 0.35, 0.0], [0.8, 0.15, 1.0], 8),
            part([0.0, 0.6, -0.98], [0.8, 0.4, 0.05], 4),
            part([-0.4, 0.52, -0.75], [0.3, 0.07, 0.15], 2),
            part([0.4, 0.52, -0.75], [0.3, 0.07, 0.15], 2),
        ],
        5 => vec![
            part([0.0, 0.03, 0.0], [0.18, 0.03, 0.18], 2),
            part([0.0, 0.7, 0.0], [0.025, 0.65, 0.025], 6),
            part([0.0, 1.35, 0.0], [0.25, 0.18, 0.25], 6),
            part([0.0, 1.55, 0.0], [0.05, 0.04, 0.05], 2),
        ],
        6 => vec![
            part([-0.45, 0.9, 0.0], [0.03, 0.9, 0.17], 3),
            part([0.45, 0.9, 0.0], [0.03, 0.9, 0.17], 3),
            part([0.0, 0.05, 0.0], [0.45, 0.03, 0.17], 3),
            part([0.0, 0.6, 0.0], [0.45, 0.03, 0.17], 2),
            part([0.0, 1.2, 0.0], [0.45, 0.03, 0.17], 3),
            part([0.0, 1.75, 0.0], [0.45, 0.03, 0.17], 2),
        ],
        _ => vec![
            part([0.0, 0.73, 0.0], [0.7, 0.03, 0.35], 6),
            part([0.45, 0.4, 0.0], [0.22, 0.32, 0.33], 4),
            part([-0.65, 0.36, -0.3], [0.03, 0.36, 0.03], 2),
            part([-0.65, 0.36, 0.3], [0.03, 0.36, 0.03], 2),
            part([-0.1, 0.5, -0.3], [0.5, 0.2, 0.02], 2),
        ],
    }
}

/// Canonical scaffold for `(class, variant)`: exactly `components` Gaussians
/// whose union of ellipsoids has the unit cube `[−0.5, 0.5]³` as bounding box.
/// Variant 0 is the undistorted template.
pub fn template_scaffold(class: usize, variant: usize, components: usize) -> Scaffold {
    let mut rng = ChaCha8Rng::seed_from_u64(0x007e_3a11 ^ ((class as u64) << 16) ^ variant as u64);
    let rho = ellipsoid_rho_sq(SHAPE_ISO).sqrt();
    let parts = class_parts(class % NUM_CLASSES);
    let mut counts: Vec<usize> = parts.iter().map(|p| p.count).collect();
    // Rebalance counts to the requested component total (16 for the templates).
    let mut total: usize = counts.iter().sum();
    let mut k = 0;
    while total != components {
        let i = k % counts.len();
        if total < components {
            counts[i] += 1;
            total += 1;
        } else if counts[i] > 1 {
            counts[i] -= 1;
            total -= 1;
        }
        k += 1;
    }
    let mut gaussians = Vec::with_capacity(components);
    for (p, &count) in parts.iter().zip(&counts) {
        let jitter = |rng: &mut ChaCha8Rng, amount: f64| if variant == 0 { 1.0 } else { 1.0 + rng.random_range(-amount..amount) };
        let radii: [f64; 3] = std::array::from_fn(|_| 0.0);
        let radii = radii.iter().enumerate().map(|(a, _)| p.radii[a] * jitter(&mut rng, 0.2)).collect::<Vec<_>>();
        let center: Vec<f64> = (0..3).map(|a| p.center[a] + if variant == 0 { 0.0 } else { rng.random_range(-0.05..0.05) }).collect();
        let axis = (0..3).max_by(|&a, &b| radii[a].total_cmp(&radii[b])).unwrap_or(0);
        let step = radii[axis] / count as f64;
        for i in 0..count {
            let mut mu = [center[0], -center[1], center[2]];
            let offset = -radii[axis] + step * (2 * i + 1) as f64;
            mu[axis] += if axis == 1 { -offset } else { offset };
            let mut r = [radii[0], radii[1], radii[2]];
            r[axis] = if count == 1 { radii[axis] } else { 1.3 * step };
            gaussians.push(Gaussian {
                mu,
                u: IDENTITY,
                lambda: r.map(|x| (x / rho).powi(2)),
                pi: 0.0,
            });
        }
    }
    normalize_to_unit_cube(Scaffold::new(gaussians))
}

/// Per-axis affine rescale so that the ellipsoid union spans `[−0.5, 0.5]³`.
pub fn normalize_to_unit_cube(scaffold: Scaffold) -> Scaffold {
    let (lo, hi) = scaffold.bounds(SHAPE_ISO);
    let scale: Vec3 = std::array::from_fn(|k| 1.0 / (hi[k] - lo[k]));
    let mid: Vec3 = std::array::from_fn(|k| 0.5 * (hi[k] + lo[k]));
    let gaussians = scaffold
        .gaussians
        .iter()
        .map(|g| {
            let cov = g.covariance();
            let scaled: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| scale[i] * cov[i][j] * scale[j]));
            let mu = std::array::from_fn(|k| (g.mu[k] - mid[k]) * scale[k]);
            if g.u == IDENTITY {
                Gaussian {
                    mu,
                    u: IDENTITY,
                    lambda: std::array::from_fn(|k| scaled[k][k]),
                    pi: g.pi,
                }
            } else {
                Gaussian::from_covariance(mu, &scaled, g.pi)
            }
        })
        .collect();
    Scaffold::new(gaussians)
}

/// Typical `(width, height, depth)` in meters per class.
pub const CLASS_SIZES: [[f64; 3]; NUM_CLASSES] = [
    [0.8, 1.0, 0.5],
    [0.5, 0.9, 0.55],
    [1.2, 0.75, 0.8],
    [1.8, 0.85, 0.9],
    [1.6, 0.7, 2.0],
    [0.45, 1.5, 0.45],
    [0.9, 1.8, 0.35],
    [1.4, 0.76, 0.7],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub focal: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub components: usize,
    /// Template variants drawn by this split (half-open).
    pub variants: [usize; 2],
    pub camera_height: [f64; 2],
    pub depth_range: [f64; 2],
    pub max_overlap_iou: f64,
    /// Uniform twist (radians) of each object's yaw away from the room axes.
    pub yaw_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            focal: 128.0,
            min_objects: 1,
            max_objects: 8,
            components: 16,
            variants: [0, 6],
            camera_height: [0.8, 1.3],
            depth_range: [1.8, 4.5],
            max_overlap_iou: 0.05,
            yaw_jitter: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn camera(&self) -> Result<Camera> {
        Camera::centered(self.focal, self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| {
            Err(CoreError::Config {
                field: format!("scene.{field}"),
                msg: msg.to_string(),
            })
        };
        if self.image_size < 8 {
            return bad("image_size", "must be at least 8");
        }
        if !(self.focal > 0.0) {
            return bad("focal", "must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("min_objects", "need 1 ≤ min_objects ≤ max_objects");
        }
        if self.variants[0] >= self.variants[1] {
            return bad("variants", "empty variant range");
        }
        if self.components == 0 {
            return bad("components", "must be positive");
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[0] < self.depth_range[1]) {
            return bad("depth_range", "need 0 < near < far");
        }
        if !(self.camera_height[0] <= self.camera_height[1]) {
            return bad("camera_height", "need low ≤ high");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: usize,
    pub variant: usize,
    pub pose: ObjectPose,
    /// Amodal 2D box `(left, top, right, bottom)` in pixels, clipped to the image.
    pub box2d: [f64; 4],
    pub scaffold: Scaffold,
}

impl ObjectSpec {
    pub fn box_center(&self) -> [f64; 2] {
        [0.5 * (self.box2d[0] + self.box2d[2]), 0.5 * (self.box2d[1] + self.box2d[3])]
    }

    pub fn box3(&self, camera: &Camera) -> Result<Box3> {
        Box3::from_pose(&self.pose, self.box_center(), camera)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub camera: Camera,
    pub objects: Vec<ObjectSpec>,
}

/// Image-plane rectangle of a box's projected corners, clipped to the image.
/// `None` when the box is behind the camera or entirely off-screen.
pub fn project_box(b: &Box3, camera: &Camera) -> Option<[f64; 4]> {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in b.corners() {
        if c[2] <= 0.05 {
            return None;
        }
        let uv = camera.project(c);
        r[0] = r[0].min(uv[0]);
        r[1] = r[1].min(uv[1]);
        r[2] = r[2].max(uv[0]);
        r[3] = r[3].max(uv[1]);
    }
    let (w, h) = (camera.width as f64, camera.height as f64);
    let clipped = [r[0].max(0.0), r[1].max(0.0), r[2].min(w), r[3].min(h)];
    if clipped[2] - clipped[0] < 1.0 || clipped[3] - clipped[1] < 1.0 {
        return None;
    }
    Some(clipped)
}

/// Pose `(δ, d, s, θ)` and 2D box of a box placed in camera space.
pub fn pose_from_box(b: &Box3, camera: &Camera) -> Option<(ObjectPose, [f64; 4])> {
    let box2d = project_box(b, camera)?;
    let uv = camera.project(b.center);
    let center = [0.5 * (box2d[0] + box2d[2]), 0.5 * (box2d[1] + box2d[3])];
    Some((
        ObjectPose {
            delta: [uv[0] - center[0], uv[1] - center[1]],
            d: norm3(b.center),
            s: b.size,
            theta: b.yaw,
        },
        box2d,
    ))
}

pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let camera = config.camera()?;
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let floor = rng.random_range(config.camera_height[0]..=config.camera_height[1]);
    // furniture aligns with the room axes up to a small twist
    let room_yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut boxes: Vec<Box3> = Vec::with_capacity(count);
    let mut objects = Vec::with_capacity(count);
    let mut tries = 0;
    while objects.len() < count {
        tries += 1;
        if tries > REJECTION_TRIES {
            return Err(CoreError::RejectionBudget(REJECTION_TRIES));
        }
        let class = rng.random_range(0..NUM_CLASSES);
        let variant = rng.random_range(config.variants[0]..config.variants[1]);
        let size: Vec3 = std::array::from_fn(|k| (CLASS_SIZES[class][k] * rng.random_range(0.85..1.15)).clamp(0.3, 3.0));
        let z = rng.random_range(config.depth_range[0]..config.depth_range[1]);
        let x = z * rng.random_range(-0.45..0.45);
        let quarter = rng.random_range(0..4) as f64 * std::f64::consts::FRAC_PI_2;
        let yaw = wrap_angle(room_yaw + quarter + rng.random_range(-config.yaw_jitter..=config.yaw_jitter));
        let b = Box3 {
            center: [x, floor - 0.5 * size[1], z],
            size,
            yaw,
        };
        let d = norm3(b.center);
        if !(0.7..=5.0).contains(&d) || !camera.contains(camera.project(b.center)) {
            continue;
        }
        let mut clear = true;
        for other in &boxes {
            if iou3d(&b, other)? > config.max_overlap_iou {
                clear = false;
                break;
            }
        }
        if !clear {
            continue;
        }
        let Some((pose, box2d)) = pose_from_box(&b, &camera) else {
            continue;
        };
        boxes.push(b);
        objects.push(ObjectSpec {
            class,
            variant,
            pose,
            box2d,
            scaffold: template_scaffold(class, variant, config.components),
        });
    }
    Ok(SceneSpec { camera, objects })
}

/// Depth (z) map, instance ids (0 background, `i + 1` for object `i`) and
/// per-object observation patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub instance: Vec<u16>,
    /// Per object: `PATCH_SIZE²` cells × `PATCH_CHANNELS`, cell-major.
    pub patches: Vec<Vec<f32>>,
}

impl Observation {
    pub fn visible_pixels(&self, object: usize) -> usize {
        self.instance.iter().filter(|&&id| id as usize == object + 1).count()
    }
}

/// Object placement in camera space for ray casting.
struct Placed<'a> {
    rot: [[f64; 3]; 3],
    size: Vec3,
    center: Vec3,
    radius: f64,
    scaffold: &'a Scaffold,
}

impl Placed<'_> {
    fn new<'a>(obj: &'a ObjectSpec, camera: &Camera) -> Result<Placed<'a>> {
        let center = crate::pose::object_center(&obj.pose, obj.box_center(), camera)?;
        Ok(Placed {
            rot: yaw_matrix(obj.pose.theta),
            size: obj.pose.s,
            center,
            radius: 0.5 * norm3(obj.pose.s) + 1e-9,
            scaffold: &obj.scaffold,
        })
    }

    /// Ray parameter (equal to z-depth for `dir.z = 1`) of the first hit.
    fn hit(&self, dir: Vec3, rho_sq: f64) -> Option<f64> {
        // reject by bounding sphere
        let dd = dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2];
        let dc = dir[0] * self.center[0] + dir[1] * self.center[1] + dir[2] * self.center[2];
        let cc = self.center[0] * self.center[0] + self.center[1] * self.center[1] + self.center[2] * self.center[2];
        if dc * dc - dd * (cc - self.radius * self.radius) < 0.0 {
            return None;
        }
        // canonical ray p(t) = t·a + b
        let ra = mat_t_vec(&self.rot, dir);
        let rb = mat_t_vec(&self.rot, [-self.center[0], -self.center[1], -self.center[2]]);
        let a: Vec3 = std::array::from_fn(|k| ra[k] / self.size[k]);
        let b: Vec3 = std::array::from_fn(|k| rb[k] / self.size[k]);
        let mut best: Option<f64> = None;
        for g in &self.scaffold.gaussians {
            let bm = [b[0] - g.mu[0], b[1] - g.mu[1], b[2] - g.mu[2]];
            let (mut qa, mut qb, mut qc) = (0.0, 0.0, 0.0);
            for k in 0..3 {
                let pa = g.u[0][k] * a[0] + g.u[1][k] * a[1] + g.u[2][k] * a[2];
                let pb = g.u[0][k] * bm[0] + g.u[1][k] * bm[1] + g.u[2][k] * bm[2];
                qa += pa * pa / g.lambda[k];
                qb += pa * pb / g.lambda[k];
                qc += pb * pb / g.lambda[k];
            }
            qc -= rho_sq;
            let disc = qb * qb - qa * qc;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let t0 = (-qb - sq) / qa;
            let t = if t0 > 0.0 { t0 } else { (-qb + sq) / qa };
            if t > 0.0 && best.is_none_or(|bt| t < bt) {
                best = Some(t);
            }
        }
        best
    }
}

/// Analytic ray casting against every object's ellipsoid union; the nearest
/// hit wins. Pixel `(row i, col j)` looks along `K⁻¹[j, i, 1]`.
pub fn render_depth(scene: &SceneSpec) -> Result<Observation> {
    let cam = &scene.camera;
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    let rho_sq = ellipsoid_rho_sq(SHAPE_ISO);
    let placed: Vec<Placed> = scene.objects.iter().map(|o| Placed::new(o, cam)).collect::<Result<_>>()?;
    let mut depth = vec![BACKGROUND_DEPTH; w * h];
    let mut instance = vec![0u16; w * h];
    for i in 0..h {
        for j in 0..w {
            let dir = cam.ray(j as f64, i as f64);
            let mut best: Option<(f64, usize)> = None;
            for (oi, p) in placed.iter().enumerate() {
                if let Some(t) = p.hit(dir, rho_sq) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, oi));
                    }
                }
            }
            if let Some((t, oi)) = best {
                depth[i * w + j] = t as f32;
                instance[i * w + j] = (oi + 1) as u16;
            }
        }
    }
    let patches = scene
        .objects
        .iter()
        .enumerate()
        .map(|(oi, o)| observation_patch(&depth, &instance, w, h, o.box2d, oi))
        .collect();
    Ok(Observation {
        width: w,
        height: h,
        depth,
        instance,
        patches,
    })
}

/// Adaptive average pooling of the box crop into `PATCH_SIZE²` cells:
/// channel 0 is the mean normalized depth of the object's pixels, channel 1
/// the fraction of cell pixels belonging to the object.
pub fn observation_patch(depth: &[f32], instance: &[u16], w: usize, h: usize, box2d: [f64; 4], object: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; PATCH_SIZE * PATCH_SIZE * PATCH_CHANNELS];
    let (l, t, r, b) = (box2d[0], box2d[1], box2d[2], box2d[3]);
    let (cw, ch) = ((r - l) / PATCH_SIZE as f64, (b - t) / PATCH_SIZE as f64);
    let mut sums = vec![(0.0f64, 0usize, 0usize); PATCH_SIZE * PATCH_SIZE];
    let i0 = t.floor().max(0.0) as usize;
    let i1 = (b.ceil() as usize).min(h);
    let j0 = l.floor().max(0.0) as usize;
    let j1 = (r.ceil() as usize).min(w);
    for i in i0..i1 {
        let cy = ((i as f64 + 0.5 - t) / ch).floor();
        if cy < 0.0 || cy >= PATCH_SIZE as f64 {
            continue;
        }
        for j in j0..j1 {
            let cx = ((j as f64 + 0.5 - l) / cw).floor();
            if cx < 0.0 || cx >= PATCH_SIZE as f64 {
                continue;
            }
            let cell = &mut sums[cy as usize * PATCH_SIZE + cx as usize];
            cell.2 += 1;
            if instance[i * w + j] as usize == object + 1 {
                cell.0 += (depth[i * w + j] as f64 - DEPTH_MU) / DEPTH_MAX;
                cell.1 += 1;
            }
        }
    }
    for (c, &(sum, hits, total)) in sums.iter().enumerate() {
        if hits > 0 {
            out[c * PATCH_CHANNELS] = (sum / hits as f64) as f32;
        }
        if total > 0 {
            out[c * PATCH_CHANNELS + 1] = (hits as f64 / total as f64) as f32;
        }
    }
    out
}

/// Deterministic per-index RNG for scene `index` of a dataset seeded by `seed`.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}
