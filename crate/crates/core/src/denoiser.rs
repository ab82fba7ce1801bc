//! The three ε-prediction networks: a set UNet over pose tokens with
//! intra-scene attention, a scaffold transformer and a latent transformer.

use rand::Rng;
use sde_tensor::nn::{Init, LayerNorm, Linear, MultiHeadAttention, PROJ_STD};
use sde_tensor::{ParamStore, Real, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pose::POSE_DIM;
use crate::shape::GAUSSIAN_PARAMS;

/// Additive attention bias between objects of different scenes.
pub const SCENE_MASK: f64 = -1e9;
const TIME_PERIOD: f64 = 10_000.0;

/// `[sin(t·ω_k), cos(t·ω_k)]` with `ω_k = period^(−k/(dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let w = TIME_PERIOD.powf(-(k as f64) / half as f64);
        out[k] = (t as f64 * w).sin();
        out[half + k] = (t as f64 * w).cos();
    }
    out
}

/// `(Σn, Σn)` additive mask: 0 within a scene, [`SCENE_MASK`] across scenes.
pub fn scene_mask(counts: &[usize]) -> Tensor<f64> {
    let n: usize = counts.iter().sum();
    let mut scene = Vec::with_capacity(n);
    for (i, &c) in counts.iter().enumerate() {
        scene.extend(std::iter::repeat_n(i, c));
    }
    let data = (0..n * n).map(|k| if scene[k / n] == scene[k % n] { 0.0 } else { SCENE_MASK }).collect();
    Tensor::new([n, n], data).expect("non-empty mask")
}

/// Sinusoidal features followed by `Linear → SiLU → Linear`.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, dim: usize, width: usize, rng: &mut R) -> Result<Self> {
        let init = Init::Normal(PROJ_STD);
        Ok(Self {
            dim,
            l1: Linear::new(store, &format!("{name}.l1"), dim, width, init, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), width, width, init, rng)?,
        })
    }

    /// One row per entry of `ts`.
    pub fn forward<F: Real>(&self, s: &Session<F>, ts: &[usize]) -> Result<Var> {
        let data: Vec<f64> = ts.iter().flat_map(|&t| timestep_embedding(t, self.dim)).collect();
        let x = s.constant(Tensor::from_f64([ts.len(), self.dim], &data)?)?;
        let h = s.silu(self.l1.forward(s, x)?)?;
        Ok(self.l2.forward(s, h)?)
    }
}

/// `x + Attn(LN(x), kv)`; self-attention when `kv` is `None`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl AttentionBlock {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), width)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, kv_width, heads, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var, kv: Option<Var>, mask: Option<Var>) -> Result<Var> {
        let h = self.ln.forward(s, x)?;
        let a = self.attn.forward(s, h, kv.unwrap_or(h), mask)?;
        Ok(s.add(x, a)?)
    }
}

/// `x + W₂ SiLU(W₁ LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    ln: LayerNorm,
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let init = Init::Normal(PROJ_STD);
        Ok(Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), width)?,
            l1: Linear::new(store, &format!("{name}.l1"), width, 2 * width, init, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), 2 * width, width, init, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var) -> Result<Var> {
        let h = self.ln.forward(s, x)?;
        let h = s.silu(self.l1.forward(s, h)?)?;
        Ok(s.add(x, self.l2.forward(s, h)?)?)
    }
}

/// Time-conditioned residual layer `skip(x) + W₂ SiLU(LN(W₁ SiLU(LN x) + T t))`.
#[derive(Debug, Clone)]
struct ResBlock {
    ln1: LayerNorm,
    l1: Linear,
    time: Linear,
    ln2: LayerNorm,
    l2: Linear,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_w: usize,
        out_w: usize,
        time_w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::Normal(PROJ_STD);
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), in_w)?,
            l1: Linear::new(store, &format!("{name}.l1"), in_w, out_w, init, rng)?,
            time: Linear::new(store, &format!("{name}.time"), time_w, out_w, init, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), out_w)?,
            l2: Linear::new(store, &format!("{name}.l2"), out_w, out_w, init, rng)?,
            skip: if in_w == out_w {
                None
            } else {
                Some(Linear::new(store, &format!("{name}.skip"), in_w, out_w, init, rng)?)
            },
        })
    }

    fn forward<F: Real>(&self, s: &Session<F>, x: Var, temb: Var) -> Result<Var> {
        let h = s.silu(self.ln1.forward(s, x)?)?;
        let h = self.l1.forward(s, h)?;
        let h = s.add(h, self.time.forward(s, s.silu(temb)?)?)?;
        let h = s.silu(self.ln2.forward(s, h)?)?;
        let h = self.l2.forward(s, h)?;
        let skip = match &self.skip {
            Some(l) => l.forward(s, x)?,
            None => x,
        };
        Ok(s.add(skip, h)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNetConfig {
    /// Width after the 7 → width lift.
    pub width: usize,
    /// Encoder blocks; the decoder mirrors them.
    pub blocks: usize,
    pub heads: usize,
    /// Floor for the halving block widths.
    pub min_width: usize,
    /// Condition memory tokens per object for cross-attention.
    pub memory_tokens: usize,
    pub time_dim: usize,
    pub isa: bool,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            width: 128,
            blocks: 2,
            heads: 4,
            min_width: 32,
            memory_tokens: 4,
            time_dim: 128,
            isa: true,
        }
    }
}

impl PoseNetConfig {
    pub fn block_widths(&self) -> Vec<usize> {
        let mut w = vec![self.width];
        for b in 0..self.blocks {
            w.push((w[b] / 2).max(self.min_width));
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.memory_tokens == 0 || self.time_dim < 2 {
            return invalid("pose network", "width, heads, memory tokens and time dim must be positive");
        }
        if let Some(w) = self.block_widths().into_iter().find(|w| w % self.heads != 0) {
            return invalid("pose network", format!("block width {w} not divisible by {} heads", self.heads));
        }
        Ok(())
    }
}

/// Encoder or decoder block of the pose UNet.
#[derive(Debug, Clone)]
struct PoseBlock {
    res: ResBlock,
    memory: Linear,
    cross: AttentionBlock,
    isa: Option<AttentionBlock>,
    width: usize,
}

impl PoseBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_w: usize,
        out_w: usize,
        cfg: &PoseNetConfig,
        cond_w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(store, &format!("{name}.res"), in_w, out_w, cfg.width, rng)?,
            memory: Linear::new(store, &format!("{name}.mem"), cond_w, cfg.memory_tokens * out_w, Init::Normal(PROJ_STD), rng)?,
            cross: AttentionBlock::new(store, &format!("{name}.cross"), out_w, out_w, cfg.heads, rng)?,
            isa: if cfg.isa {
                Some(AttentionBlock::new(store, &format!("{name}.isa"), out_w, out_w, cfg.heads, rng)?)
            } else {
                None
            },
            width: out_w,
        })
    }

    fn forward<F: Real>(&self, s: &Session<F>, x: Var, temb: Var, cond: Var, mask: Option<Var>) -> Result<Var> {
        let n = s.shape(x)[0];
        let h = self.res.forward(s, x, temb)?;
        let mem = self.memory.forward(s, cond)?;
        let mem = s.reshape(mem, &[n, s.shape(mem)[1] / self.width, self.width])?;
        let q = s.reshape(h, &[n, 1, self.width])?;
        let h = s.reshape(self.cross.forward(s, q, Some(mem), None)?, &[n, self.width])?;
        match &self.isa {
            Some(isa) => isa.forward(s, h, None, mask),
            None => Ok(h),
        }
    }
}

/// Set UNet over `(n, 7)` pose tokens. Width halves per encoder block (with a
/// floor); decoder blocks consume the concatenated encoder skip.
#[derive(Debug, Clone)]
pub struct PoseDenoiser {
    pub cfg: PoseNetConfig,
    lift: Linear,
    time: TimeEmbedding,
    encoder: Vec<PoseBlock>,
    decoder: Vec<PoseBlock>,
    out_ln: LayerNorm,
    out: Linear,
}

impl PoseDenoiser {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, cfg: &PoseNetConfig, cond_w: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.block_widths();
        let init = Init::Normal(PROJ_STD);
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for b in 0..cfg.blocks {
            encoder.push(PoseBlock::new(store, &format!("{name}.enc{b}"), widths[b], widths[b + 1], cfg, cond_w, rng)?);
        }
        for b in (0..cfg.blocks).rev() {
            decoder.push(PoseBlock::new(store, &format!("{name}.dec{b}"), 2 * widths[b + 1], widths[b], cfg, cond_w, rng)?);
        }
        Ok(Self {
            cfg: *cfg,
            lift: Linear::new(store, &format!("{name}.lift"), POSE_DIM, cfg.width, init, rng)?,
            time: TimeEmbedding::new(store, &format!("{name}.time"), cfg.time_dim, cfg.width, rng)?,
            encoder,
            decoder,
            out_ln: LayerNorm::new(store, &format!("{name}.out_ln"), cfg.width)?,
            out: Linear::new(store, &format!("{name}.out"), cfg.width, POSE_DIM, Init::Zeros, rng)?,
        })
    }

    /// `x: (n, 7)` noisy poses of consecutive scenes with `counts` objects,
    /// `ts` one timestep per scene, `cond: (n, cond_w)`.
    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var, ts: &[usize], cond: Var, counts: &[usize]) -> Result<Var> {
        let n: usize = counts.iter().sum();
        if s.shape(x) != [n, POSE_DIM] || s.shape(cond)[0] != n || ts.len() != counts.len() {
            return invalid(
                "pose denoiser",
                format!(
                    "poses {:?}, condition {:?}, {} timesteps for scene counts {counts:?}",
                    s.shape(x),
                    s.shape(cond),
                    ts.len()
                ),
            );
        }
        let token_t: Vec<usize> = counts.iter().zip(ts).flat_map(|(&c, &t)| std::iter::repeat_n(t, c)).collect();
        let temb = self.time.forward(s, &token_t)?;
        let mask = if self.cfg.isa && counts.len() > 1 {
            Some(s.constant(scene_mask(counts).cast())?)
        } else {
            None
        };
        let mut h = self.lift.forward(s, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            h = block.forward(s, h, temb, cond, mask)?;
            skips.push(h);
        }
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per block");
            let cat = s.concat(&[h, skip], 1)?;
            h = block.forward(s, cat, temb, cond, mask)?;
        }
        let h = self.out_ln.forward(s, h)?;
        Ok(self.out.forward(s, h)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Condition memory tokens (shape transformer only).
    pub memory_tokens: usize,
    pub time_dim: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return invalid("transformer", format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.memory_tokens == 0 || self.time_dim < 2 {
            return invalid("transformer", "memory tokens and time dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: AttentionBlock,
    ff: FeedForward,
}

impl EncoderLayer {
    fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, w: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: AttentionBlock::new(store, &format!("{name}.attn"), w, w, heads, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), w, rng)?,
        })
    }

    fn forward<F: Real>(&self, s: &Session<F>, x: Var) -> Result<Var> {
        let h = self.attn.forward(s, x, None, None)?;
        self.ff.forward(s, h)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    attn: AttentionBlock,
    cross: AttentionBlock,
    ff: FeedForward,
}

impl DecoderLayer {
    fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, w: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: AttentionBlock::new(store, &format!("{name}.attn"), w, w, heads, rng)?,
            cross: AttentionBlock::new(store, &format!("{name}.cross"), w, w, heads, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), w, rng)?,
        })
    }

    fn forward<F: Real>(&self, s: &Session<F>, x: Var, memory: Var) -> Result<Var> {
        let h = self.attn.forward(s, x, None, None)?;
        let h = self.cross.forward(s, h, Some(memory), None)?;
        self.ff.forward(s, h)
    }
}

/// Rows of `(b, w)` repeated `per` times each, shaped `(b, per, w)`.
fn broadcast_rows<F: Real>(s: &Session<F>, rows: Var, per: usize) -> Result<Var> {
    let shape = s.shape(rows);
    let idx: Vec<usize> = (0..shape[0]).flat_map(|i| std::iter::repeat_n(i, per)).collect();
    let g = s.gather(rows, &idx)?;
    Ok(s.reshape(g, &[shape[0], per, shape[1]])?)
}

/// Encoder over condition memory tokens, decoder over the `g` scaffold tokens.
/// No positional encoding, so the output is equivariant to token order.
#[derive(Debug, Clone)]
pub struct ShapeDenoiser {
    pub cfg: TransformerConfig,
    lift: Linear,
    memory: Linear,
    time: TimeEmbedding,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_ln: LayerNorm,
    out: Linear,
}

impl ShapeDenoiser {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &TransformerConfig,
        cond_w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let init = Init::Normal(PROJ_STD);
        Ok(Self {
            cfg: *cfg,
            lift: Linear::new(store, &format!("{name}.lift"), GAUSSIAN_PARAMS, w, init, rng)?,
            memory: Linear::new(store, &format!("{name}.mem"), cond_w, cfg.memory_tokens * w, init, rng)?,
            time: TimeEmbedding::new(store, &format!("{name}.time"), cfg.time_dim, w, rng)?,
            encoder: (0..cfg.encoder_layers)
                .map(|l| EncoderLayer::new(store, &format!("{name}.enc{l}"), w, cfg.heads, rng))
                .collect::<Result<_>>()?,
            decoder: (0..cfg.decoder_layers)
                .map(|l| DecoderLayer::new(store, &format!("{name}.dec{l}"), w, cfg.heads, rng))
                .collect::<Result<_>>()?,
            out_ln: LayerNorm::new(store, &format!("{name}.out_ln"), w)?,
            out: Linear::new(store, &format!("{name}.out"), w, GAUSSIAN_PARAMS, Init::Zeros, rng)?,
        })
    }

    /// `x: (b, g, 16)`, one timestep per object, `cond: (b, cond_w)`.
    pub fn forward<F: Real>(&self, s: &Session<F>, x: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let shape = s.shape(x);
        if shape.len() != 3 || shape[2] != GAUSSIAN_PARAMS || shape[0] != ts.len() || s.shape(cond)[0] != ts.len() {
            return invalid(
                "shape denoiser",
                format!("tokens {shape:?}, condition {:?}, {} timesteps", s.shape(cond), ts.len()),
            );
        }
        let (b, g, w) = (shape[0], shape[1], self.cfg.width);
        let temb = self.time.forward(s, ts)?;
        let mem = self.memory.forward(s, cond)?;
        let mem = s.reshape(mem, &[b, self.cfg.memory_tokens, w])?;
        let mut mem = s.add(mem, broadcast_rows(s, temb, self.cfg.memory_tokens)?)?;
        for layer in &self.encoder {
            mem = layer.forward(s, mem)?;
        }
        let mut h = s.add(self.lift.forward(s, x)?, broadcast_rows(s, temb, g)?)?;
        for layer in &self.decoder {
            h = layer.forward(s, h, mem)?;
        }
        let h = self.out_ln.forward(s, h)?;
        Ok(self.out.forward(s, h)?)
    }
}

/// Encoder over scaffold tokens; decoder over latent tokens, each summed with
/// its own scaffold token, cross-attending to the encoded scaffold.
#[derive(Debug, Clone)]
pub struct LatentDenoiser {
    pub cfg: TransformerConfig,
    pub latent_dim: usize,
    lift: Linear,
    scaffold_enc: Linear,
    scaffold_dec: Linear,
    time: TimeEmbedding,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_ln: LayerNorm,
    out: Linear,
}

impl LatentDenoiser {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &TransformerConfig,
        latent_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let init = Init::Normal(PROJ_STD);
        Ok(Self {
            cfg: *cfg,
            latent_dim,
            lift: Linear::new(store, &format!("{name}.lift"), latent_dim, w, init, rng)?,
            scaffold_enc: Linear::new(store, &format!("{name}.scaffold_enc"), GAUSSIAN_PARAMS, w, init, rng)?,
            scaffold_dec: Linear::new(store, &format!("{name}.scaffold_dec"), GAUSSIAN_PARAMS, w, init, rng)?,
            time: TimeEmbedding::new(store, &format!("{name}.time"), cfg.time_dim, w, rng)?,
            encoder: (0..cfg.encoder_layers)
                .map(|l| EncoderLayer::new(store, &format!("{name}.enc{l}"), w, cfg.heads, rng))
                .collect::<Result<_>>()?,
            decoder: (0..cfg.decoder_layers)
                .map(|l| DecoderLayer::new(store, &format!("{name}.dec{l}"), w, cfg.heads, rng))
                .collect::<Result<_>>()?,
            out_ln: LayerNorm::new(store, &format!("{name}.out_ln"), w)?,
            out: Linear::new(store, &format!("{name}.out"), w, latent_dim, Init::Zeros, rng)?,
        })
    }

    /// `z: (b, g, h)` noisy latents, `scaffold: (b, g, 16)` normalized codes.
    pub fn forward<F: Real>(&self, s: &Session<F>, z: Var, ts: &[usize], scaffold: Var) -> Result<Var> {
        let zs = s.shape(z);
        let ss = s.shape(scaffold);
        if zs.len() != 3 || zs[2] != self.latent_dim || ss.len() != 3 || ss[..2] != zs[..2] || ss[2] != GAUSSIAN_PARAMS || zs[0] != ts.len() {
            return invalid(
                "latent denoiser",
                format!("latents {zs:?}, scaffold {ss:?}, {} timesteps", ts.len()),
            );
        }
        let g = zs[1];
        let temb = broadcast_rows(s, self.time.forward(s, ts)?, g)?;
        let mut mem = s.add(self.scaffold_enc.forward(s, scaffold)?, temb)?;
        for layer in &self.encoder {
            mem = layer.forward(s, mem)?;
        }
        let h = s.add(self.lift.forward(s, z)?, self.scaffold_dec.forward(s, scaffold)?)?;
        let mut h = s.add(h, temb)?;
        for layer in &self.decoder {
            h = layer.forward(s, h, mem)?;
        }
        let h = self.out_ln.forward(s, h)?;
        Ok(self.out.forward(s, h)?)
    }
}
