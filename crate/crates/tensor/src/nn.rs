//! Small building blocks on top of [`Session`].

use rand::Rng;

use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::real::{lit, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Weight initialization for a projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
}

pub const PROJ_STD: f64 = 0.02;

impl Init {
    pub fn tensor<F: Real, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<F> {
        match self {
            Init::Normal(std) => Tensor::randn(shape.to_vec(), std, rng),
            Init::Zeros => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init.tensor(&[in_dim, out_dim], rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([out_dim]))?;
        Ok(Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    pub fn no_bias<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init.tensor(&[in_dim, out_dim], rng))?;
        Ok(Self {
            w,
            b: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var) -> Result<Var> {
        let y = s.matmul(x, s.param(self.w)?)?;
        match self.b {
            Some(b) => s.add(y, s.param(b)?),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], F::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var) -> Result<Var> {
        let y = s.layer_norm(x)?;
        let y = s.mul(y, s.param(self.gamma)?)?;
        s.add(y, s.param(self.beta)?)
    }
}

/// Group normalization of `(batch, positions, channels)` with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return invalid("group_norm", format!("{channels} channels not divisible into {groups} groups"));
        }
        Ok(Self {
            groups,
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], F::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]))?,
        })
    }

    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var) -> Result<Var> {
        let y = s.group_norm(x, self.groups)?;
        let y = s.mul(y, s.param(self.gamma)?)?;
        s.add(y, s.param(self.beta)?)
    }
}

/// Multi-head scaled dot-product attention.
///
/// Queries have shape `(..., Lq, D)` and keys/values `(..., Lk, Dkv)`, with the
/// same leading axes. An optional additive mask of shape `(Lq, Lk)` (or the
/// full score shape) is applied before the softmax.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return invalid("attention", format!("width {dim} not divisible by {heads} heads"));
        }
        let init = Init::Normal(PROJ_STD);
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, init, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, init, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, init, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, init, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var, kv: Var, mask: Option<Var>) -> Result<Var> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, kv)?;
        let v = self.v.forward(s, kv)?;
        let axis = s.shape(q).len() - 1;
        let dh = self.dim / self.heads;
        let scale: F = lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (s.slice(q, axis, lo, hi)?, s.slice(k, axis, lo, hi)?, s.slice(v, axis, lo, hi)?)
            };
            let scores = s.matmul(qh, s.transpose(kh)?)?;
            let mut scores = s.affine(scores, scale, F::zero())?;
            if let Some(m) = mask {
                scores = s.add(scores, m)?;
            }
            let attn = s.softmax(scores)?;
            outs.push(s.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { s.concat(&outs, axis)? };
        self.o.forward(s, merged)
    }
}

/// 3x3 convolution with zero padding on `(batch, height*width, channels)`
/// inputs, expressed as an embedding lookup (im2col) followed by a matmul.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub proj: Linear,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (9 * in_ch) as f64).sqrt();
        Ok(Self {
            proj: Linear::new(store, name, 9 * in_ch, out_ch, Init::Normal(std), rng)?,
            in_ch,
            out_ch,
            stride: stride.max(1),
        })
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Row indices into `[x rows..., zero row]` for every output tap.
    fn im2col_indices(&self, batch: usize, h: usize, w: usize) -> Vec<usize> {
        let (ho, wo) = self.output_extent(h, w);
        let zero_row = batch * h * w;
        let mut idx = Vec::with_capacity(batch * ho * wo * 9);
        for b in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * self.stride + ky) as isize - 1;
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                idx.push(zero_row);
                            } else {
                                idx.push(b * h * w + iy as usize * w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = s.shape(x);
        if shape.len() != 3 || shape[1] != h * w || shape[2] != self.in_ch {
            return invalid(
                "conv3x3",
                format!("expected (batch, {}, {}), got {shape:?}", h * w, self.in_ch),
            );
        }
        let batch = shape[0];
        let flat = s.reshape(x, &[batch * h * w, self.in_ch])?;
        let zero = s.constant(Tensor::zeros([1, self.in_ch]))?;
        let table = s.concat(&[flat, zero], 0)?;
        let cols = s.gather(table, &self.im2col_indices(batch, h, w))?;
        let (ho, wo) = self.output_extent(h, w);
        let cols = s.reshape(cols, &[batch * ho * wo, 9 * self.in_ch])?;
        let y = self.proj.forward(s, cols)?;
        s.reshape(y, &[batch, ho * wo, self.out_ch])
    }
}
