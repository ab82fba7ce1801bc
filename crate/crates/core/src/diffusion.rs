//! Linear noise schedules, forward noising, DDPM/DDIM reverse steps and
//! classifier-free guidance.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1` by convention.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sde_tensor::{Real, Result as TResult, Tape, Var};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t = β_1 + (t−1)/(T−1)·(β_T − β_1)`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps < 2 {
            return invalid("schedule", format!("need at least 2 steps, got {steps}"));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return invalid("schedule", format!("need 0 < β_1 ≤ β_T < 1, got {beta_1}, {beta_t}"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_1 + i as f64 / (steps - 1) as f64 * (beta_t - beta_1))
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return invalid("timestep", format!("t={t} outside [1, {}]", self.steps()));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `√ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len("q_sample", x0, eps)?;
        let (a, b) = self.noise_coeffs(t);
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn noise_coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// `x̂_0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
    pub fn predict_x0(&self, xt: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len("predict_x0", xt, eps)?;
        let (a, b) = self.noise_coeffs(t);
        Ok(xt.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect())
    }

    /// Posterior standard deviation `σ_t`, zero at `t = 1`.
    pub fn ddpm_sigma(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        (self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
    }

    pub fn ddpm_step(&self, xt: &[f64], eps: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        same_len("ddpm_step", xt, eps)?;
        same_len("ddpm_step", xt, noise)?;
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let coef = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let sigma = self.ddpm_sigma(t);
        Ok(xt
            .iter()
            .zip(eps)
            .zip(noise)
            .map(|((x, e), z)| inv_sqrt_alpha * (x - coef * e) + sigma * z)
            .collect())
    }

    /// One generalized DDIM update from `t` to `t_prev < t`.
    pub fn ddim_step(&self, xt: &[f64], eps: &[f64], t: usize, t_prev: usize, eta: f64, noise: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if t_prev >= t {
            return invalid("ddim_step", format!("t_prev={t_prev} must precede t={t}"));
        }
        same_len("ddim_step", xt, noise)?;
        let x0 = self.predict_x0(xt, t, eps)?;
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let a_prev = ab_prev.sqrt();
        Ok(x0
            .iter()
            .zip(eps)
            .zip(noise)
            .map(|((x, e), z)| a_prev * x + dir * e + sigma * z)
            .collect())
    }

    /// Uniformly strided descending timesteps from `T` down to `1`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.steps();
        if steps == 0 || steps > t_max {
            return invalid("ddim", format!("steps={steps} outside [1, {t_max}]"));
        }
        if steps == 1 {
            return Ok(vec![t_max]);
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| {
                let f = t_max as f64 - i as f64 * (t_max - 1) as f64 / (steps - 1) as f64;
                f.round() as usize
            })
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return invalid(op, format!("length {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

/// Mean squared error between predicted and true noise.
pub fn epsilon_loss<F: Real>(tape: &Tape<F>, pred: Var, target: Var) -> TResult<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// `ε_u + w·(ε_c − ε_u)`.
pub fn cfg_epsilon(cond: &[f64], uncond: &[f64], w: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| u + w * (c - u)).collect()
}

/// Returns `true` when the condition should be replaced by the null token.
pub fn maybe_drop_condition<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    // Always consume one draw so that RNG streams do not depend on p.
    let u: f64 = rng.random();
    u < p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub drop_probability: f64,
    pub weight: f64,
}

impl GuidanceConfig {
    pub fn new(drop_probability: f64, weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&drop_probability) {
            return invalid("guidance", format!("drop probability {drop_probability} outside [0, 1]"));
        }
        if !(weight >= 0.0) {
            return invalid("guidance", format!("weight {weight} must be ≥ 0"));
        }
        Ok(Self {
            drop_probability,
            weight,
        })
    }
}

/// Noise predictor driven by the samplers.
pub trait EpsModel {
    /// Predicted noise for state `x` at timestep `t`. `conditional = false`
    /// requests the null-condition prediction.
    fn eps(&mut self, x: &[f64], t: usize, conditional: bool) -> Result<Vec<f64>>;
}

impl<M: FnMut(&[f64], usize, bool) -> Result<Vec<f64>>> EpsModel for M {
    fn eps(&mut self, x: &[f64], t: usize, conditional: bool) -> Result<Vec<f64>> {
        self(x, t, conditional)
    }
}

/// Classifier-free guided prediction; evaluates only the passes `w` needs.
pub fn guided_eps<M: EpsModel + ?Sized>(model: &mut M, x: &[f64], t: usize, w: f64) -> Result<Vec<f64>> {
    if w == 1.0 {
        return model.eps(x, t, true);
    }
    let uncond = model.eps(x, t, false)?;
    if w == 0.0 {
        return Ok(uncond);
    }
    let cond = model.eps(x, t, true)?;
    Ok(cfg_epsilon(&cond, &uncond, w))
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// DDIM sampling from `x_T`. A noise vector is drawn at every step even when
/// `η = 0`, so the RNG stream is identical to [`ddpm_sample`].
pub fn ddim_sample<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    x_t: &[f64],
    schedule: &NoiseSchedule,
    steps: usize,
    eta: f64,
    guidance_weight: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eta) {
        return invalid("ddim", format!("η={eta} outside [0, 1]"));
    }
    let ts = schedule.ddim_timesteps(steps)?;
    let mut x = x_t.to_vec();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = guided_eps(model, &x, t, guidance_weight)?;
        let z = standard_normal(x.len(), rng);
        x = schedule.ddim_step(&x, &eps, t, t_prev, eta, &z)?;
    }
    Ok(x)
}

/// Full ancestral DDPM chain from `x_T`.
pub fn ddpm_sample<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &mut M,
    x_t: &[f64],
    schedule: &NoiseSchedule,
    guidance_weight: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x = x_t.to_vec();
    for t in (1..=schedule.steps()).rev() {
        let eps = guided_eps(model, &x, t, guidance_weight)?;
        let z = standard_normal(x.len(), rng);
        x = schedule.ddpm_step(&x, &eps, t, &z)?;
    }
    Ok(x)
}
