//! Run configuration: every hyperparameter of dataset generation, the
//! networks, training and evaluation. JSON with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condition::ConditionConfig;
use crate::denoiser::{PoseNetConfig, TransformerConfig};
use crate::error::{CoreError, Result};
use crate::occupancy::OccupancyConfig;
use crate::scenes::SceneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probability of replacing a scene's condition by ∅ during training.
    pub drop_probability: f64,
    pub guidance_weight: f64,
    pub sample_steps: usize,
    pub eta: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            drop_probability: 0.8,
            guidance_weight: 1.0,
            sample_steps: 100,
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Template variants of held-out scenes; disjoint from `scene.variants`.
    pub val_variants: [usize; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_scenes: 64,
            val_scenes: 0,
            val_variants: [6, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseObjective {
    /// ε-prediction diffusion.
    Diffusion,
    /// Direct x₀ regression from a zero input at t = T.
    Regression1Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub components: usize,
    pub latent_dim: usize,
    pub condition: ConditionConfig,
    pub pose_net: PoseNetConfig,
    pub shape_net: TransformerConfig,
    pub latent_net: TransformerConfig,
    pub occupancy: OccupancyConfig,
    pub pose_objective: PoseObjective,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            components: 16,
            latent_dim: 64,
            condition: ConditionConfig::default(),
            pose_net: PoseNetConfig::default(),
            shape_net: TransformerConfig {
                width: 64,
                heads: 4,
                encoder_layers: 2,
                decoder_layers: 6,
                memory_tokens: 4,
                time_dim: 128,
            },
            latent_net: TransformerConfig {
                width: 64,
                heads: 4,
                encoder_layers: 2,
                decoder_layers: 2,
                memory_tokens: 1,
                time_dim: 128,
            },
            occupancy: OccupancyConfig::default(),
            pose_objective: PoseObjective::Diffusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    /// λ in the joint objective.
    pub weight: f64,
    /// Samples per Gaussian during training.
    pub train_samples: usize,
    /// Samples per Gaussian when scoring.
    pub eval_samples: usize,
    /// Target points kept per object during training.
    pub max_targets: usize,
    /// The term applies only at timesteps `t ≤ t_max`, where x̂₀ is informative.
    pub t_max: usize,
    /// The joint stage draws timesteps from `1..=t_max` only, so every
    /// batch carries the alignment term.
    pub joint_low_noise: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            weight: 0.01,
            train_samples: 32,
            eval_samples: 250,
            max_targets: 256,
            t_max: 200,
            joint_low_noise: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossMask {
    pub pose: bool,
    pub shape: bool,
    pub align: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self {
            pose: true,
            shape: true,
            align: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate; each stage decays it on a cosine to `lr · lr_floor`.
    pub lr: f64,
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Scenes per pose/joint batch.
    pub batch_scenes: usize,
    /// Objects per shape batch.
    pub batch_objects: usize,
    pub pose_epochs: usize,
    pub shape_epochs: usize,
    pub joint_epochs: usize,
    /// Scales the joint stage's schedule: fine-tuning starts below the peak rate.
    pub joint_lr_scale: f64,
    pub occupancy_steps: usize,
    pub latent_steps: usize,
    /// Query points per template per decoder step.
    pub occupancy_queries: usize,
    pub grad_clip: f64,
    pub log_every: usize,
    pub losses: LossMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_floor: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            batch_scenes: 8,
            batch_objects: 32,
            pose_epochs: 200,
            shape_epochs: 100,
            joint_epochs: 50,
            joint_lr_scale: 1.0,
            occupancy_steps: 1500,
            latent_steps: 1500,
            occupancy_queries: 512,
            grad_clip: 1.0,
            log_every: 50,
            losses: LossMask::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub fscore_tau: f64,
    pub mesh_resolution: usize,
    pub surface_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.15,
            fscore_tau: 0.05,
            mesh_resolution: 128,
            surface_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub align: AlignConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn field_err(field: &str, msg: impl Into<String>) -> CoreError {
    CoreError::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Desk-scale defaults: small widths, 64 training scenes. Small networks
    /// on a short budget need a larger decaying step size and a lower
    /// condition-drop rate than the `full` schedule to learn the
    /// conditional path at all. The joint stage fine-tunes at a tenth of the
    /// peak rate on low-noise timesteps, where the alignment term applies.
    pub fn desk() -> Self {
        let mut c = Self {
            seed: 0,
            threads: None,
            scene: SceneConfig::default(),
            dataset: DatasetConfig::default(),
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::default(),
            align: AlignConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        c.diffusion.drop_probability = 0.1;
        c.train.lr = 1e-3;
        c.train.lr_floor = 0.05;
        c.train.pose_epochs = 1500;
        c.train.shape_epochs = 600;
        c.train.joint_lr_scale = 0.1;
        c.align.joint_low_noise = true;
        c
    }

    /// Full-scale network sizes and schedule; far beyond a desk budget.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.model.latent_dim = 512;
        c.model.condition.feat_width = 4096;
        c.model.pose_net = PoseNetConfig {
            width: 512,
            blocks: 8,
            heads: 8,
            min_width: 64,
            memory_tokens: 4,
            time_dim: 128,
            isa: true,
        };
        c.model.shape_net = TransformerConfig {
            width: 512,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 6,
            memory_tokens: 4,
            time_dim: 128,
        };
        c.model.latent_net = TransformerConfig {
            width: 512,
            heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            memory_tokens: 1,
            time_dim: 128,
        };
        c.model.occupancy.latent_dim = 512;
        c.model.occupancy.hidden = 512;
        c.align.train_samples = 1000;
        c.align.eval_samples = 1000;
        c.diffusion.drop_probability = 0.8;
        c.train.lr = 1e-4;
        c.train.lr_floor = 1.0;
        c.train.joint_lr_scale = 1.0;
        c.align.joint_low_noise = false;
        c.train.pose_epochs = 500;
        c.train.shape_epochs = 500;
        c.train.joint_epochs = 50;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let d = &self.diffusion;
        if d.steps < 2 {
            return Err(field_err("diffusion.steps", "must be at least 2"));
        }
        if !(d.beta_start > 0.0 && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return Err(field_err("diffusion.beta_start", "need 0 < beta_start ≤ beta_end < 1"));
        }
        if !(0.0..=1.0).contains(&d.drop_probability) {
            return Err(field_err("diffusion.drop_probability", "must lie in [0, 1]"));
        }
        if !(d.guidance_weight >= 0.0) {
            return Err(field_err("diffusion.guidance_weight", "must be ≥ 0"));
        }
        if d.sample_steps == 0 || d.sample_steps > d.steps {
            return Err(field_err("diffusion.sample_steps", format!("must lie in [1, {}]", d.steps)));
        }
        if !(0.0..=1.0).contains(&d.eta) {
            return Err(field_err("diffusion.eta", "must lie in [0, 1]"));
        }
        let m = &self.model;
        if m.components == 0 || m.components != self.scene.components {
            return Err(field_err("model.components", "must be positive and equal scene.components"));
        }
        if m.latent_dim == 0 || m.latent_dim != m.occupancy.latent_dim {
            return Err(field_err("model.latent_dim", "must be positive and equal model.occupancy.latent_dim"));
        }
        if m.condition.image_width != self.scene.image_size || m.condition.image_height != self.scene.image_size {
            return Err(field_err("model.condition.image_width", "must match scene.image_size"));
        }
        if m.condition.classes != crate::scenes::NUM_CLASSES {
            return Err(field_err("model.condition.classes", format!("synthetic scenes have {} classes", crate::scenes::NUM_CLASSES)));
        }
        if m.condition.patch_size != crate::scenes::PATCH_SIZE || m.condition.patch_channels != crate::scenes::PATCH_CHANNELS {
            return Err(field_err("model.condition.patch_size", "must match the renderer's 8x8x2 patches"));
        }
        m.pose_net.validate().map_err(|e| field_err("model.pose_net", e.to_string()))?;
        m.shape_net.validate().map_err(|e| field_err("model.shape_net", e.to_string()))?;
        m.latent_net.validate().map_err(|e| field_err("model.latent_net", e.to_string()))?;
        let a = &self.align;
        if !(a.weight >= 0.0) {
            return Err(field_err("align.weight", "must be ≥ 0"));
        }
        if a.train_samples == 0 || a.eval_samples == 0 || a.max_targets == 0 {
            return Err(field_err("align.train_samples", "sample counts must be positive"));
        }
        if a.t_max == 0 || a.t_max > self.diffusion.steps {
            return Err(field_err("align.t_max", "must lie in [1, diffusion.steps]"));
        }
        let t = &self.train;
        if !(t.lr > 0.0) {
            return Err(field_err("train.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&t.lr_floor) {
            return Err(field_err("train.lr_floor", "must lie in [0, 1]"));
        }
        if !(t.joint_lr_scale > 0.0 && t.joint_lr_scale <= 1.0) {
            return Err(field_err("train.joint_lr_scale", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(field_err("train.beta1", "betas must lie in [0, 1)"));
        }
        if t.batch_scenes == 0 || t.batch_objects == 0 || t.occupancy_queries == 0 {
            return Err(field_err("train.batch_scenes", "batch sizes must be positive"));
        }
        if self.dataset.train_scenes == 0 {
            return Err(field_err("dataset.train_scenes", "must be positive"));
        }
        let (tv, vv) = (self.scene.variants, self.dataset.val_variants);
        if vv[0] >= vv[1] || (vv[0] < tv[1] && tv[0] < vv[1]) {
            return Err(field_err("dataset.val_variants", "must be a non-empty range disjoint from scene.variants"));
        }
        let e = &self.eval;
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return Err(field_err("eval.iou_threshold", "must lie in (0, 1]"));
        }
        if !(e.fscore_tau > 0.0) {
            return Err(field_err("eval.fscore_tau", "must be positive"));
        }
        if e.mesh_resolution < 2 {
            return Err(field_err("eval.mesh_resolution", "must be at least 2"));
        }
        if self.threads == Some(0) {
            return Err(field_err("threads", "must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| field_err("<json>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(crate::error::io_err(path))
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
