//! The 7-DoF object pose `(δ, d, s, θ)`, its normalization, camera geometry,
//! and the box metrics IoU₃D and AP.
//!
//! Camera frame: x right, y down (gravity), z forward. Yaw rotates about y.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square image with the principal point at its center.
    pub fn centered(focal: f64, size: usize) -> Result<Self> {
        Self::new(focal, focal, size as f64 / 2.0, size as f64 / 2.0, size, size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return invalid("camera", format!("degenerate focal lengths ({}, {})", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && self.cy >= 0.0 && self.cx <= self.width as f64 && self.cy <= self.height as f64) {
            return invalid("camera", "principal point outside the image".to_string());
        }
        Ok(())
    }

    /// `K⁻¹·[u, v, 1]` (z component equal to 1).
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    pub fn project(&self, p: Vec3) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    pub fn contains(&self, uv: [f64; 2]) -> bool {
        uv[0] >= 0.0 && uv[1] >= 0.0 && uv[0] <= self.width as f64 && uv[1] <= self.height as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    /// Projected 3D center minus 2D box center, pixels.
    pub delta: [f64; 2],
    /// Distance from the camera to the 3D center, meters.
    pub d: f64,
    pub s: Vec3,
    pub theta: f64,
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    let w = x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor();
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub const POSE_DIM: usize = 7;
pub const POSITIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNormalizer {
    pub image: [f64; 2],
    pub d: (f64, f64),
    pub s: (f64, f64),
    pub theta: (f64, f64),
}

impl PoseNormalizer {
    // the yaw scale is fixed at the literal 3.14, not π
    #[allow(clippy::approx_constant)]
    pub fn new(camera: &Camera) -> Self {
        Self {
            image: [camera.width as f64, camera.height as f64],
            d: (2.7, 2.5),
            s: (3.5, 7.0),
            theta: (0.0, 3.14),
        }
    }

    /// `(μ, max)` for each of the 7 coordinates.
    pub fn coefficients(&self) -> [(f64, f64); POSE_DIM] {
        [
            (0.0, self.image[0]),
            (0.0, self.image[1]),
            self.d,
            self.s,
            self.s,
            self.s,
            self.theta,
        ]
    }

    pub fn normalize(&self, pose: &ObjectPose) -> [f64; POSE_DIM] {
        let raw = [
            pose.delta[0],
            pose.delta[1],
            pose.d,
            pose.s[0],
            pose.s[1],
            pose.s[2],
            pose.theta,
        ];
        let c = self.coefficients();
        std::array::from_fn(|i| (raw[i] - c[i].0) / c[i].1)
    }

    pub fn denormalize(&self, v: &[f64]) -> Result<ObjectPose> {
        if v.len() != POSE_DIM {
            return invalid("pose", format!("expected {POSE_DIM} values, got {}", v.len()));
        }
        let c = self.coefficients();
        let raw: [f64; POSE_DIM] = std::array::from_fn(|i| c[i].0 + v[i] * c[i].1);
        Ok(ObjectPose {
            delta: [raw[0], raw[1]],
            d: raw[2].max(POSITIVE_FLOOR),
            s: [
                raw[3].max(POSITIVE_FLOOR),
                raw[4].max(POSITIVE_FLOOR),
                raw[5].max(POSITIVE_FLOOR),
            ],
            theta: wrap_angle(raw[6]),
        })
    }
}

/// Rotation by `θ` about the camera y axis.
pub fn yaw_matrix(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    std::array::from_fn(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
}

pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// 3D object center `d·normalize(K⁻¹[u+δ_u, v+δ_v, 1])`.
pub fn object_center(pose: &ObjectPose, box_center: [f64; 2], camera: &Camera) -> Result<Vec3> {
    camera.validate()?;
    let r = camera.ray(box_center[0] + pose.delta[0], box_center[1] + pose.delta[1]);
    let n = norm3(r);
    Ok([pose.d * r[0] / n, pose.d * r[1] / n, pose.d * r[2] / n])
}

/// Object-to-camera rigid transform (rotation and translation; size is separate).
pub fn pose_to_rigid_transform(pose: &ObjectPose, box_center: [f64; 2], camera: &Camera) -> Result<[[f64; 4]; 4]> {
    let c = object_center(pose, box_center, camera)?;
    let r = yaw_matrix(pose.theta);
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&r[i]);
        m[i][3] = c[i];
    }
    m[3][3] = 1.0;
    Ok(m)
}

/// Yaw-only oriented box in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
}

impl Box3 {
    pub fn from_pose(pose: &ObjectPose, box_center: [f64; 2], camera: &Camera) -> Result<Self> {
        Ok(Self {
            center: object_center(pose, box_center, camera)?,
            size: pose.s,
            yaw: pose.theta,
        })
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// The eight corners, x-fastest over `(±, ±, ±)` half extents.
    pub fn corners(&self) -> [Vec3; 8] {
        let r = yaw_matrix(self.yaw);
        std::array::from_fn(|i| {
            let local = [
                if i & 1 == 0 { -0.5 } else { 0.5 } * self.size[0],
                if i & 2 == 0 { -0.5 } else { 0.5 } * self.size[1],
                if i & 4 == 0 { -0.5 } else { 0.5 } * self.size[2],
            ];
            let w = mat_vec(&r, local);
            [w[0] + self.center[0], w[1] + self.center[1], w[2] + self.center[2]]
        })
    }

    /// Footprint on the ground (x, z) plane, counter-clockwise.
    fn footprint(&self) -> Vec<[f64; 2]> {
        let (s, c) = self.yaw.sin_cos();
        let hx = 0.5 * self.size[0];
        let hz = 0.5 * self.size[2];
        let mut poly: Vec<[f64; 2]> = [(-hx, -hz), (hx, -hz), (hx, hz), (-hx, hz)]
            .iter()
            .map(|&(x, z)| [c * x + s * z + self.center[0], -s * x + c * z + self.center[2]])
            .collect();
        if polygon_area_signed(&poly) < 0.0 {
            poly.reverse();
        }
        poly
    }

    fn key(&self) -> [u64; 7] {
        [
            self.center[0].to_bits(),
            self.center[1].to_bits(),
            self.center[2].to_bits(),
            self.size[0].to_bits(),
            self.size[1].to_bits(),
            self.size[2].to_bits(),
            self.yaw.to_bits(),
        ]
    }

    /// Whether `p` lies inside the box.
    pub fn contains(&self, p: Vec3) -> bool {
        let r = yaw_matrix(self.yaw);
        let local = mat_t_vec(&r, [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]]);
        (0..3).all(|k| local[k].abs() <= 0.5 * self.size[k])
    }
}

fn polygon_area_signed(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let dp = cross2(a, b, p);
            let dq = cross2(a, b, q);
            let p_in = dp >= 0.0;
            let q_in = dq >= 0.0;
            if p_in {
                out.push(p);
            }
            if p_in != q_in {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection-over-union of two yaw-only boxes: exact ground-plane polygon
/// overlap times vertical overlap.
pub fn iou3d(a: &Box3, b: &Box3) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.volume() > 0.0) || bx.size.iter().any(|&s| s <= 0.0) {
            return invalid("iou3d", format!("zero-volume box with size {:?}", bx.size));
        }
    }
    // Canonical argument order makes the result exactly symmetric.
    let (a, b) = if a.key() <= b.key() { (a, b) } else { (b, a) };
    if a.key() == b.key() {
        return Ok(1.0);
    }
    let y_lo = (a.center[1] - 0.5 * a.size[1]).max(b.center[1] - 0.5 * b.size[1]);
    let y_hi = (a.center[1] + 0.5 * a.size[1]).min(b.center[1] + 0.5 * b.size[1]);
    let h = y_hi - y_lo;
    if h <= 0.0 {
        return Ok(0.0);
    }
    let inter_poly = clip_convex(&a.footprint(), &b.footprint());
    if inter_poly.len() < 3 {
        return Ok(0.0);
    }
    let inter = polygon_area_signed(&inter_poly).abs() * h;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: usize,
    pub class: usize,
    pub bbox: Box3,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub scene: usize,
    pub class: usize,
    pub bbox: Box3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with at least one ground-truth box.
    pub mean: f64,
}

/// Area under the monotone precision envelope, summed over recall steps.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &hit) in tp.iter().enumerate() {
        hits += hit as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..tp.len() {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    ap
}

/// Ranked greedy one-to-one matching per class within each scene.
pub fn average_precision(predictions: &[Detection], ground_truth: &[GroundTruthBox], iou_threshold: f64) -> Result<ApReport> {
    let mut classes: Vec<usize> = ground_truth.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in &classes {
        let gts: Vec<&GroundTruthBox> = ground_truth.iter().filter(|g| g.class == class).collect();
        let mut preds: Vec<&Detection> = predictions.iter().filter(|p| p.class == class).collect();
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; gts.len()];
        let mut tp = Vec::with_capacity(preds.len());
        for p in preds {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.scene != p.scene {
                    continue;
                }
                let iou = iou3d(&p.bbox, &g.bbox)?;
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }
        per_class.push(ClassAp {
            class,
            ap: interpolated_ap(&tp, gts.len()),
            support: gts.len(),
        });
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(ApReport { per_class, mean })
}
