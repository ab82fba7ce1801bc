//! Per-object condition vectors `y_i = [box embedding, CNN features, one-hot class]`
//! and the learned null condition used for classifier-free guidance.

use rand::Rng;
use sde_tensor::nn::{Conv3x3, GroupNorm, Init, PROJ_STD};
use sde_tensor::{ParamId, ParamStore, Real, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const BOX_FREQUENCIES: usize = 10;
/// Raw coordinate plus a sine and cosine per frequency, for 4 coordinates.
pub const BOX_EMBED_DIM: usize = 4 * (1 + 2 * BOX_FREQUENCIES);
const CNN_GROUPS: usize = 4;
const CNN_CHANNELS: [usize; 2] = [16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation {
    /// `(left, top, right, bottom)` in pixels.
    pub box2d: [f64; 4],
    /// `patch_size²` cells × `patch_channels`, cell-major.
    pub patch: Vec<f32>,
    pub class: usize,
}

/// Each coordinate `c ∈ [0, 1]` (normalized by the image extent) becomes
/// `[c, sin(2⁰πc) … sin(2⁹πc), cos(2⁰πc) … cos(2⁹πc)]`.
pub fn embed_box(box2d: [f64; 4], width: f64, height: f64) -> Vec<f64> {
    let norm = [box2d[0] / width, box2d[1] / height, box2d[2] / width, box2d[3] / height];
    let mut out = Vec::with_capacity(BOX_EMBED_DIM);
    for c in norm {
        out.push(c);
        let phases: Vec<f64> = (0..BOX_FREQUENCIES).map(|k| (1u32 << k) as f64 * std::f64::consts::PI * c).collect();
        out.extend(phases.iter().map(|p| p.sin()));
        out.extend(phases.iter().map(|p| p.cos()));
    }
    out
}

pub fn embed_class(class: usize, count: usize) -> Result<Vec<f64>> {
    if class >= count {
        return invalid("class", format!("id {class} out of range for {count} classes"));
    }
    let mut v = vec![0.0; count];
    v[class] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub feat_width: usize,
    pub classes: usize,
    pub patch_size: usize,
    pub patch_channels: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            feat_width: 64,
            classes: 8,
            patch_size: 8,
            patch_channels: 2,
            image_width: 128,
            image_height: 128,
        }
    }
}

impl ConditionConfig {
    pub fn width(&self) -> usize {
        BOX_EMBED_DIM + self.feat_width + self.classes
    }

    /// Spatial extent after the two stride-2 blocks.
    fn final_extent(&self) -> usize {
        self.patch_size.div_ceil(2).div_ceil(2)
    }

    fn final_channels(&self) -> Result<usize> {
        let cells = self.final_extent().pow(2);
        if !self.feat_width.is_multiple_of(cells) || !(self.feat_width / cells).is_multiple_of(CNN_GROUPS) {
            return invalid(
                "condition",
                format!("feature width {} must split into {cells} cells of a multiple of {CNN_GROUPS} channels", self.feat_width),
            );
        }
        Ok(self.feat_width / cells)
    }
}

/// Three blocks of 3×3 convolution, group normalization and leaky ReLU over the
/// observation patch; the last two blocks stride by 2. Flattened output has
/// `feat_width` values.
#[derive(Debug, Clone)]
pub struct FeatureCnn {
    convs: Vec<Conv3x3>,
    norms: Vec<GroupNorm>,
    patch_size: usize,
    patch_channels: usize,
    feat_width: usize,
}

impl FeatureCnn {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, cfg: &ConditionConfig, rng: &mut R) -> Result<Self> {
        let channels = [cfg.patch_channels, CNN_CHANNELS[0], CNN_CHANNELS[1], cfg.final_channels()?];
        let strides = [1, 2, 2];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for b in 0..3 {
            convs.push(Conv3x3::new(store, &format!("{name}.conv{b}"), channels[b], channels[b + 1], strides[b], rng)?);
            norms.push(GroupNorm::new(store, &format!("{name}.gn{b}"), CNN_GROUPS, channels[b + 1])?);
        }
        Ok(Self {
            convs,
            norms,
            patch_size: cfg.patch_size,
            patch_channels: cfg.patch_channels,
            feat_width: cfg.feat_width,
        })
    }

    /// `patches: (n, patch_size², channels)` → `(n, feat_width)`.
    pub fn forward<F: Real>(&self, s: &Session<F>, patches: Var) -> Result<Var> {
        let shape = s.shape(patches);
        let cells = self.patch_size * self.patch_size;
        if shape.len() != 3 || shape[1] != cells || shape[2] != self.patch_channels {
            return invalid(
                "feature patch",
                format!("expected (n, {cells}, {}), got {shape:?}", self.patch_channels),
            );
        }
        let n = shape[0];
        let (mut h, mut w) = (self.patch_size, self.patch_size);
        let mut x = patches;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(s, x, h, w)?;
            (h, w) = conv.output_extent(h, w);
            x = norm.forward(s, x)?;
            x = s.leaky_relu(x)?;
        }
        Ok(s.reshape(x, &[n, self.feat_width])?)
    }
}

/// Builds `(n, width)` condition rows; dropped scenes get the learned null row.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub cfg: ConditionConfig,
    pub cnn: FeatureCnn,
    pub null: ParamId,
}

impl ConditionEncoder {
    pub fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, cfg: &ConditionConfig, rng: &mut R) -> Result<Self> {
        let cnn = FeatureCnn::new(store, &format!("{name}.cnn"), cfg, rng)?;
        let null = store.add(format!("{name}.null"), Init::Normal(PROJ_STD).tensor(&[1, cfg.width()], rng))?;
        Ok(Self { cfg: *cfg, cnn, null })
    }

    pub fn width(&self) -> usize {
        self.cfg.width()
    }

    /// Rows in observation order; no mixing across objects.
    pub fn encode<F: Real>(&self, s: &Session<F>, observations: &[&ObjectObservation]) -> Result<Var> {
        let n = observations.len();
        if n == 0 {
            return invalid("condition", "at least one observation is required");
        }
        let cells = self.cfg.patch_size * self.cfg.patch_size * self.cfg.patch_channels;
        let mut boxes = Vec::with_capacity(n * BOX_EMBED_DIM);
        let mut classes = Vec::with_capacity(n * self.cfg.classes);
        let mut patches = Vec::with_capacity(n * cells);
        for o in observations {
            if !(o.box2d[2] > o.box2d[0] && o.box2d[3] > o.box2d[1]) {
                return invalid("condition", format!("degenerate box {:?}", o.box2d));
            }
            if o.patch.len() != cells {
                return invalid("feature patch", format!("expected {cells} values, got {}", o.patch.len()));
            }
            boxes.extend(embed_box(o.box2d, self.cfg.image_width as f64, self.cfg.image_height as f64));
            classes.extend(embed_class(o.class, self.cfg.classes)?);
            patches.extend(o.patch.iter().map(|&v| v as f64));
        }
        let boxes = s.constant(Tensor::from_f64([n, BOX_EMBED_DIM], &boxes)?)?;
        let classes = s.constant(Tensor::from_f64([n, self.cfg.classes], &classes)?)?;
        let patches = s.constant(Tensor::from_f64(
            [n, self.cfg.patch_size * self.cfg.patch_size, self.cfg.patch_channels],
            &patches,
        )?)?;
        let feats = self.cnn.forward(s, patches)?;
        Ok(s.concat(&[boxes, feats, classes], 1)?)
    }

    /// `n` copies of the null row.
    pub fn null_rows<F: Real>(&self, s: &Session<F>, n: usize) -> Result<Var> {
        Ok(s.gather(s.param(self.null)?, &vec![0; n])?)
    }

    /// Condition rows for consecutive scenes of `counts[i]` objects; every
    /// object of a scene with `dropped[i]` set is replaced by the null row.
    pub fn assemble<F: Real>(&self, s: &Session<F>, observations: &[&ObjectObservation], counts: &[usize], dropped: &[bool]) -> Result<Var> {
        let total: usize = counts.iter().sum();
        if total != observations.len() || counts.len() != dropped.len() {
            return invalid(
                "condition",
                format!("{} observations for scene counts {counts:?} and {} drop flags", observations.len(), dropped.len()),
            );
        }
        if dropped.iter().all(|&d| d) {
            return self.null_rows(s, total);
        }
        let rows = self.encode(s, observations)?;
        if !dropped.iter().any(|&d| d) {
            return Ok(rows);
        }
        let table = s.concat(&[rows, s.param(self.null)?], 0)?;
        let mut idx = Vec::with_capacity(total);
        let mut offset = 0;
        for (&c, &d) in counts.iter().zip(dropped) {
            idx.extend((offset..offset + c).map(|i| if d { total } else { i }));
            offset += c;
        }
        Ok(s.gather(table, &idx)?)
    }
}
