//! Occupancy decoding of a scaffold: an analytic mixture term that reproduces
//! the union of iso-ellipsoids, plus a latent-conditioned residual that is
//! gated to the band around the surface.

use rand::Rng;
use sde_tensor::nn::{Init, Linear, PROJ_STD};
use sde_tensor::{ParamStore, Real, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::marching_cubes::{marching_cubes, Grid};
use crate::mesh::Mesh;
use crate::pose::Vec3;
use crate::shape::{sigmoid, Scaffold};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyConfig {
    /// Sharpness of the analytic term.
    pub a: f64,
    /// Iso-level of the mixture density.
    pub b: f64,
    /// Bound on the residual logit.
    pub residual_max: f64,
    /// Residual vanishes where `|analytic logit| ≥ gate_span`.
    pub gate_span: f64,
    pub hidden: usize,
    pub latent_dim: usize,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            a: 20.0,
            b: 0.3,
            residual_max: 4.0,
            gate_span: 5.0,
            hidden: 64,
            latent_dim: 64,
        }
    }
}

/// Union density `D(x) = max_j w_j exp(−½m_j²)` with `w_j = exp(π_j − max π)`,
/// plus soft per-component responsibilities `w_j n_j / Σ w n` (all zero where
/// every term underflows). With equal weights `D ≥ b` is exactly the union of
/// the iso-`b` ellipsoids; a sum would swell wherever components overlap.
pub fn mixture_density(scaffold: &Scaffold, x: Vec3) -> (f64, Vec<f64>) {
    let pmax = scaffold.gaussians.iter().map(|g| g.pi).fold(f64::NEG_INFINITY, f64::max);
    let terms: Vec<f64> = scaffold
        .gaussians
        .iter()
        .map(|g| (g.pi - pmax).exp() * g.normalized_density(x))
        .collect();
    let total: f64 = terms.iter().sum();
    let d = terms.iter().copied().fold(0.0, f64::max);
    let resp = if total > 0.0 { terms.iter().map(|t| t / total).collect() } else { vec![0.0; terms.len()] };
    (d, resp)
}

/// `max(0, 1 − (ℓ/span)²)²`: one at the iso-surface, zero outside the band.
pub fn residual_gate(logit: f64, span: f64) -> f64 {
    let r = logit / span;
    let v = (1.0 - r * r).max(0.0);
    v * v
}

/// Points inside the residual band with their analytic inputs.
struct Band {
    index: Vec<usize>,
    features: Vec<f64>,
    resp: Vec<f64>,
    gate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OccupancyDecoder {
    pub cfg: OccupancyConfig,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl OccupancyDecoder {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, cfg: &OccupancyConfig, rng: &mut R) -> Result<Self> {
        if !(cfg.a > 0.0 && cfg.b > 0.0 && cfg.b < 1.0 && cfg.gate_span > 0.0) {
            return invalid("occupancy", format!("need a > 0, 0 < b < 1, gate_span > 0; got {cfg:?}"));
        }
        let init = Init::Normal(PROJ_STD);
        let inputs = 4 + cfg.latent_dim;
        Ok(Self {
            cfg: *cfg,
            l1: Linear::new(store, &format!("{name}.l1"), inputs, cfg.hidden, Init::Normal((1.0 / inputs as f64).sqrt()), rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), cfg.hidden, cfg.hidden, Init::Normal((1.0 / cfg.hidden as f64).sqrt()), rng)?,
            l3: Linear::new(store, &format!("{name}.l3"), cfg.hidden, 1, init, rng)?,
        })
    }

    pub fn analytic_logit(&self, density: f64) -> f64 {
        self.cfg.a * (density - self.cfg.b)
    }

    fn band(&self, scaffold: &Scaffold, points: &[Vec3], analytic: &mut [f64]) -> Band {
        let mut band = Band {
            index: Vec::new(),
            features: Vec::new(),
            resp: Vec::new(),
            gate: Vec::new(),
        };
        for (i, x) in points.iter().enumerate() {
            let (d, resp) = mixture_density(scaffold, *x);
            analytic[i] = self.analytic_logit(d);
            let gate = residual_gate(analytic[i], self.cfg.gate_span);
            if gate > 0.0 {
                band.index.push(i);
                band.features.extend_from_slice(x);
                band.features.push(d);
                band.resp.extend(resp);
                band.gate.push(gate);
            }
        }
        band
    }

    /// Residual logits `(q, 1)` for band points given latents `(g, h)`.
    fn residual<F: Real>(&self, s: &Session<F>, band: &Band, g: usize, latents: Var) -> Result<Var> {
        let q = band.index.len();
        let resp = s.constant(Tensor::from_f64([q, g], &band.resp)?)?;
        let zbar = s.matmul(resp, latents)?;
        let feats = s.constant(Tensor::from_f64([q, 4], &band.features)?)?;
        let x = s.concat(&[feats, zbar], 1)?;
        let h = s.silu(self.l1.forward(s, x)?)?;
        let h = s.silu(self.l2.forward(s, h)?)?;
        let m = self.l3.forward(s, h)?;
        // r_max · tanh(m/2) = r_max · (2σ(m) − 1)
        let r = self.cfg.residual_max;
        let t = s.affine(s.sigmoid(m)?, F::from_f64_lossy(2.0 * r), F::from_f64_lossy(-r))?;
        Ok(s.mul(t, s.constant(Tensor::from_f64([q, 1], &band.gate)?)?)?)
    }

    fn check_latents(&self, scaffold: &Scaffold, shape: &[usize]) -> Result<()> {
        if shape != [scaffold.len(), self.cfg.latent_dim] {
            return invalid(
                "occupancy",
                format!("latents {shape:?} do not match {} components of width {}", scaffold.len(), self.cfg.latent_dim),
            );
        }
        Ok(())
    }

    /// Mean squared error between predicted occupancy and `targets`.
    pub fn loss<F: Real>(&self, s: &Session<F>, scaffold: &Scaffold, latents: Var, points: &[Vec3], targets: &[f64]) -> Result<Var> {
        self.check_latents(scaffold, &s.shape(latents))?;
        if points.is_empty() || points.len() != targets.len() {
            return invalid("occupancy", format!("{} points for {} targets", points.len(), targets.len()));
        }
        let mut analytic = vec![0.0; points.len()];
        let band = self.band(scaffold, points, &mut analytic);
        let n = points.len() as f64;
        let mut outside = 0.0;
        let mut in_band = vec![false; points.len()];
        for &i in &band.index {
            in_band[i] = true;
        }
        for i in 0..points.len() {
            if !in_band[i] {
                outside += (sigmoid(analytic[i]) - targets[i]).powi(2);
            }
        }
        let constant = s.constant(Tensor::from_f64([1], &[outside / n])?)?;
        if band.index.is_empty() {
            return Ok(constant);
        }
        let q = band.index.len();
        let res = self.residual(s, &band, scaffold.len(), latents)?;
        let base: Vec<f64> = band.index.iter().map(|&i| analytic[i]).collect();
        let logit = s.add(res, s.constant(Tensor::from_f64([q, 1], &base)?)?)?;
        let tgt: Vec<f64> = band.index.iter().map(|&i| targets[i]).collect();
        let diff = s.sub(s.sigmoid(logit)?, s.constant(Tensor::from_f64([q, 1], &tgt)?)?)?;
        let sq = s.affine(s.sum(s.mul(diff, diff)?)?, F::from_f64_lossy(1.0 / n), F::zero())?;
        Ok(s.add(sq, constant)?)
    }

    /// Occupancy in `[0, 1]`; `latents` is `g × h` row-major, or `None` for the
    /// analytic term alone.
    pub fn occupancy<F: Real>(&self, store: &ParamStore<F>, scaffold: &Scaffold, latents: Option<&[f64]>, points: &[Vec3]) -> Result<Vec<f64>> {
        let mut analytic = vec![0.0; points.len()];
        let Some(latents) = latents else {
            for (i, x) in points.iter().enumerate() {
                analytic[i] = self.analytic_logit(mixture_density(scaffold, *x).0);
            }
            return Ok(analytic.into_iter().map(sigmoid).collect());
        };
        if latents.len() != scaffold.len() * self.cfg.latent_dim {
            return invalid("occupancy", format!("{} latent values for {} components", latents.len(), scaffold.len()));
        }
        const CHUNK: usize = 16_384;
        let mut logits = vec![0.0; points.len()];
        for (c, chunk) in points.chunks(CHUNK).enumerate() {
            let mut a = vec![0.0; chunk.len()];
            let band = self.band(scaffold, chunk, &mut a);
            if !band.index.is_empty() {
                let s = Session::inference(store);
                let z = s.constant(Tensor::from_f64([scaffold.len(), self.cfg.latent_dim], latents)?)?;
                let res = s.value(self.residual(&s, &band, scaffold.len(), z)?);
                for (k, &i) in band.index.iter().enumerate() {
                    a[i] += res.data()[k].to_f64_lossy();
                }
            }
            logits[c * CHUNK..c * CHUNK + chunk.len()].copy_from_slice(&a);
        }
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    /// Mesh of the 0.5 level set on a `res³` grid over `[−extent/2, extent/2]³`.
    pub fn extract_mesh<F: Real>(&self, store: &ParamStore<F>, scaffold: &Scaffold, latents: Option<&[f64]>, res: usize, extent: f64) -> Result<Mesh> {
        if res < 2 {
            return invalid("marching cubes", format!("resolution {res} below 2"));
        }
        let mut grid = Grid::sample(res, [0.0; 3], extent, |_| 0.0);
        grid.values = self.occupancy(store, scaffold, latents, &grid.points())?;
        Ok(marching_cubes(&grid, 0.5))
    }
}

/// Query points for decoder fitting: half uniform in `[−0.6, 0.6]³`, half
/// jittered around the scaffold's components.
pub fn occupancy_queries<R: Rng + ?Sized>(scaffold: &Scaffold, n: usize, rng: &mut R) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        if i % 2 == 0 || scaffold.is_empty() {
            pts.push(std::array::from_fn(|_| rng.random_range(-0.6..0.6)));
        } else {
            let g = &scaffold.gaussians[rng.random_range(0..scaffold.len())];
            let sd = g.lambda.map(f64::sqrt);
            let z: [f64; 3] = std::array::from_fn(|k| rng.random_range(-2.0..2.0) * sd[k]);
            pts.push(std::array::from_fn(|a| g.mu[a] + g.u[a][0] * z[0] + g.u[a][1] * z[1] + g.u[a][2] * z[2] + rng.random_range(-0.02..0.02)));
        }
    }
    pts
}
