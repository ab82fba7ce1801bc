//! Gaussian scaffolds: `g` oriented anisotropic Gaussians per shape, packed
//! into a flat code of 16 values per component.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::standard_normal;
use crate::error::{invalid, Result};
use crate::pose::{Mat3, Vec3};

/// Values per packed component: μ(3), U row-major(9), softplus⁻¹(λ)(3), π(1).
pub const GAUSSIAN_PARAMS: usize = 16;
pub const DEFAULT_COMPONENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: Vec3,
    /// Columns are the principal axes.
    pub u: Mat3,
    /// Variances along the principal axes.
    pub lambda: Vec3,
    pub pi: f64,
}

impl Gaussian {
    pub fn isotropic(mu: Vec3, variance: f64) -> Self {
        Self {
            mu,
            u: IDENTITY,
            lambda: [variance; 3],
            pi: 0.0,
        }
    }

    /// `Σ = U diag(λ) Uᵀ`.
    pub fn covariance(&self) -> Mat3 {
        let mut c = [[0.0; 3]; 3];
        #[allow(clippy::needless_range_loop)]
        for i in 0..3 {
            for j in i..3 {
                c[i][j] = (0..3).map(|k| self.u[i][k] * self.lambda[k] * self.u[j][k]).sum();
                c[j][i] = c[i][j];
            }
        }
        c
    }

    /// Squared Mahalanobis distance of `x` from the center.
    pub fn mahalanobis_sq(&self, x: Vec3) -> f64 {
        let d = [x[0] - self.mu[0], x[1] - self.mu[1], x[2] - self.mu[2]];
        let mut acc = 0.0;
        for k in 0..3 {
            let proj = self.u[0][k] * d[0] + self.u[1][k] * d[1] + self.u[2][k] * d[2];
            acc += proj * proj / self.lambda[k];
        }
        acc
    }

    /// Density divided by its peak: `exp(−½·Mahalanobis²)`.
    pub fn normalized_density(&self, x: Vec3) -> f64 {
        (-0.5 * self.mahalanobis_sq(x)).exp()
    }

    /// Symmetric covariance decomposed into `(U, λ)` with ascending eigenvalues.
    pub fn from_covariance(mu: Vec3, cov: &Mat3, pi: f64) -> Self {
        let m = Matrix3::from_fn(|i, j| cov[i][j]);
        let eig = SymmetricEigen::new(m);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let u = std::array::from_fn(|i| std::array::from_fn(|k| eig.eigenvectors[(i, order[k])]));
        let lambda = std::array::from_fn(|k| eig.eigenvalues[order[k]].max(1e-12));
        Self { mu, u, lambda, pi }
    }
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaffold {
    pub gaussians: Vec<Gaussian>,
}

impl Scaffold {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Half-width of the level set `exp(−½m²) = b` along each world axis,
    /// per component, and the union's bounding box.
    pub fn bounds(&self, iso_b: f64) -> (Vec3, Vec3) {
        let rho2 = ellipsoid_rho_sq(iso_b);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for gs in &self.gaussians {
            let cov = gs.covariance();
            for k in 0..3 {
                let r = (rho2 * cov[k][k]).sqrt();
                lo[k] = lo[k].min(gs.mu[k] - r);
                hi[k] = hi[k].max(gs.mu[k] + r);
            }
        }
        (lo, hi)
    }

    /// Whether `x` lies inside any component's ellipsoid `exp(−½m²) ≥ b`.
    pub fn union_contains(&self, x: Vec3, iso_b: f64) -> bool {
        let rho2 = ellipsoid_rho_sq(iso_b);
        self.gaussians.iter().any(|g| g.mahalanobis_sq(x) <= rho2)
    }
}

/// Squared Mahalanobis radius of the level set `exp(−½m²) = b`.
pub fn ellipsoid_rho_sq(iso_b: f64) -> f64 {
    2.0 * (1.0 / iso_b).ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn pack_shape_code(scaffold: &Scaffold) -> Vec<f64> {
    let mut out = Vec::with_capacity(scaffold.len() * GAUSSIAN_PARAMS);
    for g in &scaffold.gaussians {
        out.extend_from_slice(&g.mu);
        for row in &g.u {
            out.extend_from_slice(row);
        }
        out.extend(g.lambda.iter().map(|&l| softplus_inv(l)));
        out.push(g.pi);
    }
    out
}

pub fn unpack_shape_code(code: &[f64], components: usize) -> Result<Scaffold> {
    if components == 0 || code.len() != components * GAUSSIAN_PARAMS {
        return invalid(
            "shape code",
            format!("expected {} values for {components} components, got {}", components * GAUSSIAN_PARAMS, code.len()),
        );
    }
    let gaussians = code
        .chunks_exact(GAUSSIAN_PARAMS)
        .map(|c| {
            let m: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| c[3 + 3 * i + j]));
            Gaussian {
                mu: [c[0], c[1], c[2]],
                u: polar(&m).0,
                lambda: [softplus(c[12]), softplus(c[13]), softplus(c[14])],
                pi: c[15],
            }
        })
        .collect();
    Ok(Scaffold { gaussians })
}

/// SVD `M = W S Vᵀ` of a 3×3 matrix.
pub struct Svd3 {
    pub w: Matrix3<f64>,
    pub s: [f64; 3],
    pub v: Matrix3<f64>,
}

pub fn svd3(m: &Mat3) -> Svd3 {
    let mat = Matrix3::from_fn(|i, j| m[i][j]);
    let svd = mat.svd(true, true);
    let w = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    Svd3 {
        w,
        s: [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]],
        v: v_t.transpose(),
    }
}

/// Nearest orthonormal matrix `W Vᵀ`. Matrices already orthonormal to
/// rounding are returned unchanged. The flag reports whether that shortcut applied.
pub fn polar(m: &Mat3) -> (Mat3, bool) {
    let mut off = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            off = off.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    if off < 1e-14 {
        return (*m, true);
    }
    let svd = svd3(m);
    let u = svd.w * svd.v.transpose();
    (std::array::from_fn(|i| std::array::from_fn(|j| u[(i, j)])), false)
}

/// Pullback of `∂L/∂U` through the polar factor: `W[(B − Bᵀ)/(s_i + s_j)]Vᵀ`
/// with `B = WᵀGV`.
pub fn polar_vjp(m: &Mat3, grad_u: &Mat3) -> Mat3 {
    let svd = svd3(m);
    let g = Matrix3::from_fn(|i, j| grad_u[i][j]);
    let b = svd.w.transpose() * g * svd.v;
    let inner = Matrix3::from_fn(|i, j| {
        let denom = (svd.s[i] + svd.s[j]).max(1e-12);
        (b[(i, j)] - b[(j, i)]) / denom
    });
    let out = svd.w * inner * svd.v.transpose();
    std::array::from_fn(|i| std::array::from_fn(|j| out[(i, j)]))
}

/// Points `μ_j + U_j diag(√λ_j) z` for standard normal `z`, `m` per component,
/// component-major.
pub fn sample_points_with_noise(scaffold: &Scaffold, m: usize, z: &[f64]) -> Result<Vec<Vec3>> {
    if z.len() != scaffold.len() * m * 3 {
        return invalid("sample_points", format!("need {} noise values, got {}", scaffold.len() * m * 3, z.len()));
    }
    let mut out = Vec::with_capacity(scaffold.len() * m);
    for (j, g) in scaffold.gaussians.iter().enumerate() {
        if g.lambda.iter().any(|&l| !(l > 0.0)) {
            return invalid("sample_points", format!("non-positive scale {:?} in component {j}", g.lambda));
        }
        let sd = g.lambda.map(f64::sqrt);
        for l in 0..m {
            let zz = &z[3 * (j * m + l)..3 * (j * m + l) + 3];
            let e = [sd[0] * zz[0], sd[1] * zz[1], sd[2] * zz[2]];
            out.push(std::array::from_fn(|i| g.mu[i] + g.u[i][0] * e[0] + g.u[i][1] * e[1] + g.u[i][2] * e[2]));
        }
    }
    Ok(out)
}

pub fn sample_points<R: Rng + ?Sized>(scaffold: &Scaffold, m: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    if m == 0 {
        return invalid("sample_points", "m must be at least 1");
    }
    let z = standard_normal(scaffold.len() * m * 3, rng);
    sample_points_with_noise(scaffold, m, &z)
}

/// Per-slot affine map between packed shape codes and the diffusion space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeNormalizer {
    pub center: [f64; GAUSSIAN_PARAMS],
    pub scale: [f64; GAUSSIAN_PARAMS],
}

impl Default for ShapeNormalizer {
    fn default() -> Self {
        let mut center = [0.0; GAUSSIAN_PARAMS];
        let mut scale = [1.0; GAUSSIAN_PARAMS];
        for k in 0..3 {
            scale[k] = 0.5;
            center[12 + k] = -5.0;
            scale[12 + k] = 2.0;
        }
        Self { center, scale }
    }
}

impl ShapeNormalizer {
    pub fn normalize(&self, packed: &[f64]) -> Vec<f64> {
        packed
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - self.center[i % GAUSSIAN_PARAMS]) / self.scale[i % GAUSSIAN_PARAMS])
            .collect()
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .enumerate()
            .map(|(i, &x)| self.center[i % GAUSSIAN_PARAMS] + x * self.scale[i % GAUSSIAN_PARAMS])
            .collect()
    }

    pub fn slot_scale(&self, i: usize) -> f64 {
        self.scale[i % GAUSSIAN_PARAMS]
    }
}
