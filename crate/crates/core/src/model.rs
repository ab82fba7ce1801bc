//! The trainable scene model (pose, shape, latent and occupancy networks),
//! its checkpoint format and conditional sampling.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sde_tensor::nn::Init;
use sde_tensor::{checkpoint, ParamId, ParamStore, Session, Tensor};
use serde::{Deserialize, Serialize};

use crate::condition::{ConditionEncoder, ObjectObservation};
use crate::config::{ModelConfig, PoseObjective};
use crate::denoiser::{LatentDenoiser, PoseDenoiser, ShapeDenoiser};
use crate::diffusion::{ddim_sample, standard_normal, NoiseSchedule};
use crate::error::{invalid, io_err, CoreError, Result};
use crate::mesh::Mesh;
use crate::occupancy::OccupancyDecoder;
use crate::pose::{Camera, ObjectPose, PoseNormalizer, POSE_DIM};
use crate::shape::{pack_shape_code, unpack_shape_code, Scaffold, ShapeNormalizer, GAUSSIAN_PARAMS};

/// Template latents start near zero so the decoder begins at the analytic term.
const TEMPLATE_LATENT_STD: f64 = 0.01;
/// Meshes are extracted over this cube around the canonical object.
pub const MESH_EXTENT: f64 = 1.3;
const MODEL_FILE: &str = "model.json";

pub struct PoseModel {
    pub store: ParamStore<f32>,
    pub cond: ConditionEncoder,
    pub net: PoseDenoiser,
    pub objective: PoseObjective,
}

pub struct ShapeModel {
    pub store: ParamStore<f32>,
    pub cond: ConditionEncoder,
    pub net: ShapeDenoiser,
}

pub struct LatentModel {
    pub store: ParamStore<f32>,
    pub net: LatentDenoiser,
    /// Template latents are divided by this before diffusion.
    pub scale: f64,
}

pub struct OccupancyModel {
    pub store: ParamStore<f32>,
    pub decoder: OccupancyDecoder,
    /// `(class, variant)` of each auto-decoded template, with its `(g, h)` latents.
    pub templates: Vec<((usize, usize), ParamId)>,
}

impl OccupancyModel {
    pub fn template_latents(&self, class: usize, variant: usize) -> Option<&Tensor<f32>> {
        self.templates
            .iter()
            .find(|(key, _)| *key == (class, variant))
            .map(|(_, id)| self.store.get(*id))
    }
}

/// Everything needed to rebuild a model from its checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub camera: Camera,
    pub pose_norm: PoseNormalizer,
    pub shape_norm: ShapeNormalizer,
    pub latent_scale: f64,
    pub templates: Vec<(usize, usize)>,
}

pub struct SceneModel {
    pub config: ModelConfig,
    pub camera: Camera,
    pub pose_norm: PoseNormalizer,
    pub shape_norm: ShapeNormalizer,
    pub pose: PoseModel,
    pub shape: ShapeModel,
    pub latent: LatentModel,
    pub occupancy: OccupancyModel,
}

/// Sampling controls shared by every network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub eta: f64,
    pub guidance_weight: f64,
    /// Replace every condition by ∅.
    pub unconditional: bool,
    pub seed: u64,
}

/// Scenes sampled together per ISA batch.
const SAMPLE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrediction {
    pub class: usize,
    pub box2d: [f64; 4],
    pub pose: ObjectPose,
    /// Packed (unnormalized) scaffold code.
    pub shape_code: Vec<f64>,
    /// `g × h` decoder latents, or `None` for the analytic occupancy alone.
    pub latents: Option<Vec<f64>>,
}

impl ObjectPrediction {
    pub fn box_center(&self) -> [f64; 2] {
        [0.5 * (self.box2d[0] + self.box2d[2]), 0.5 * (self.box2d[1] + self.box2d[3])]
    }

    pub fn scaffold(&self, components: usize) -> Result<Scaffold> {
        unpack_shape_code(&self.shape_code, components)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene: usize,
    pub objects: Vec<ObjectPrediction>,
}

/// Builds a `(b, g, c)` or `(n, c)` f32 constant from f64 rows.
pub(crate) fn tensor_f32(shape: &[usize], data: &[f64]) -> Result<Tensor<f32>> {
    Ok(Tensor::from_f64(shape.to_vec(), data)?)
}

impl SceneModel {
    /// Fresh model; `templates` lists the `(class, variant)` shapes the
    /// occupancy auto-decoder learns latents for.
    pub fn new(config: &ModelConfig, camera: Camera, templates: &[(usize, usize)], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond_w = config.condition.width();

        let mut store = ParamStore::new();
        let cond = ConditionEncoder::new(&mut store, "pose.cond", &config.condition, &mut rng)?;
        let net = PoseDenoiser::new(&mut store, "pose.net", &config.pose_net, cond_w, &mut rng)?;
        let pose = PoseModel {
            store,
            cond,
            net,
            objective: config.pose_objective,
        };

        let mut store = ParamStore::new();
        let cond = ConditionEncoder::new(&mut store, "shape.cond", &config.condition, &mut rng)?;
        let net = ShapeDenoiser::new(&mut store, "shape.net", &config.shape_net, cond_w, &mut rng)?;
        let shape = ShapeModel { store, cond, net };

        let mut store = ParamStore::new();
        let net = LatentDenoiser::new(&mut store, "latent.net", &config.latent_net, config.latent_dim, &mut rng)?;
        let latent = LatentModel { store, net, scale: 1.0 };

        let mut store = ParamStore::new();
        let decoder = OccupancyDecoder::new(&mut store, "occ", &config.occupancy, &mut rng)?;
        let mut ids = Vec::with_capacity(templates.len());
        for &(c, v) in templates {
            let t = Init::Normal(TEMPLATE_LATENT_STD).tensor(&[config.components, config.latent_dim], &mut rng);
            ids.push(((c, v), store.add(format!("template.{c}.{v}"), t)?));
        }
        let occupancy = OccupancyModel {
            store,
            decoder,
            templates: ids,
        };

        Ok(Self {
            config: *config,
            camera,
            pose_norm: PoseNormalizer::new(&camera),
            shape_norm: ShapeNormalizer::default(),
            pose,
            shape,
            latent,
            occupancy,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config,
            camera: self.camera,
            pose_norm: self.pose_norm,
            shape_norm: self.shape_norm.clone(),
            latent_scale: self.latent.scale,
            templates: self.occupancy.templates.iter().map(|(k, _)| *k).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = dir.join(MODEL_FILE);
        fs::write(&meta, serde_json::to_string_pretty(&self.meta())? + "\n").map_err(io_err(&meta))?;
        checkpoint::save(&self.pose.store, &dir.join("pose.sde"))?;
        checkpoint::save(&self.shape.store, &dir.join("shape.sde"))?;
        checkpoint::save(&self.latent.store, &dir.join("latent.sde"))?;
        checkpoint::save(&self.occupancy.store, &dir.join("occupancy.sde"))?;
        Ok(())
    }

    /// Loads a checkpoint directory. With `expected`, the stored network
    /// configuration must match it.
    pub fn load(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        if let Some(cfg) = expected {
            if *cfg != meta.config {
                return Err(CoreError::Config {
                    field: "model".into(),
                    msg: format!(
                        "checkpoint was trained with {} but the run config asks for {}",
                        serde_json::to_string(&meta.config)?,
                        serde_json::to_string(cfg)?
                    ),
                });
            }
        }
        let mut model = Self::new(&meta.config, meta.camera, &meta.templates, 0)?;
        model.pose_norm = meta.pose_norm;
        model.shape_norm = meta.shape_norm;
        model.latent.scale = meta.latent_scale;
        checkpoint::load(&mut model.pose.store, &dir.join("pose.sde"))?;
        checkpoint::load(&mut model.shape.store, &dir.join("shape.sde"))?;
        checkpoint::load(&mut model.latent.store, &dir.join("latent.sde"))?;
        checkpoint::load(&mut model.occupancy.store, &dir.join("occupancy.sde"))?;
        Ok(model)
    }

    pub fn components(&self) -> usize {
        self.config.components
    }

    /// Normalized packed code of a scaffold.
    pub fn encode_shape(&self, scaffold: &Scaffold) -> Vec<f64> {
        self.shape_norm.normalize(&pack_shape_code(scaffold))
    }

    /// Poses (normalized) for consecutive scenes; `scenes[i]` lists the
    /// observations of scene `i`.
    pub fn sample_poses(&self, schedule: &NoiseSchedule, scenes: &[Vec<ObjectObservation>], opts: &SampleOptions) -> Result<Vec<Vec<[f64; POSE_DIM]>>> {
        let mut out = Vec::with_capacity(scenes.len());
        for (c, chunk) in scenes.chunks(SAMPLE_CHUNK).enumerate() {
            let mut rng = chunk_rng(opts.seed, 0, c);
            let counts: Vec<usize> = chunk.iter().map(Vec::len).collect();
            let obs: Vec<&ObjectObservation> = chunk.iter().flatten().collect();
            let n = obs.len();
            let flat = if n == 0 {
                Vec::new()
            } else {
                self.sample_pose_chunk(schedule, &obs, &counts, opts, &mut rng)?
            };
            let mut offset = 0;
            for &k in &counts {
                out.push(
                    (0..k)
                        .map(|i| std::array::from_fn(|j| flat[(offset + i) * POSE_DIM + j]))
                        .collect(),
                );
                offset += k;
            }
        }
        Ok(out)
    }

    fn sample_pose_chunk(&self, schedule: &NoiseSchedule, obs: &[&ObjectObservation], counts: &[usize], opts: &SampleOptions, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let n = obs.len();
        let p = &self.pose;
        let forward = |x: &[f64], t: usize, conditional: bool| -> Result<Vec<f64>> {
            let s = Session::inference(&p.store);
            let dropped = vec![opts.unconditional || !conditional; counts.len()];
            let cond = p.cond.assemble(&s, obs, counts, &dropped)?;
            let xv = s.constant(tensor_f32(&[n, POSE_DIM], x)?)?;
            let y = p.net.forward(&s, xv, &vec![t; counts.len()], cond, counts)?;
            Ok(s.value(y).to_f64_vec())
        };
        match p.objective {
            PoseObjective::Regression1Step => forward(&vec![0.0; n * POSE_DIM], schedule.steps(), true),
            PoseObjective::Diffusion => {
                let x_t = standard_normal(n * POSE_DIM, rng);
                let mut model = forward;
                ddim_sample(&mut model, &x_t, schedule, opts.steps, opts.eta, opts.guidance_weight, rng)
            }
        }
    }

    /// Normalized scaffold codes, one per observation (or `count` unconditional
    /// draws when `observations` is `None`).
    pub fn sample_shapes(&self, schedule: &NoiseSchedule, observations: Option<&[ObjectObservation]>, count: usize, opts: &SampleOptions) -> Result<Vec<Vec<f64>>> {
        let g = self.components();
        let width = g * GAUSSIAN_PARAMS;
        let total = observations.map_or(count, <[_]>::len);
        let mut out = Vec::with_capacity(total);
        let chunk = SAMPLE_CHUNK * 4;
        for (c, start) in (0..total).step_by(chunk).enumerate() {
            let end = (start + chunk).min(total);
            let b = end - start;
            let mut rng = chunk_rng(opts.seed, 1, c);
            let obs: Option<Vec<&ObjectObservation>> = observations.map(|o| o[start..end].iter().collect());
            let sm = &self.shape;
            let unconditional = opts.unconditional || obs.is_none();
            let mut model = |x: &[f64], t: usize, conditional: bool| -> Result<Vec<f64>> {
                let s = Session::inference(&sm.store);
                let cond = match &obs {
                    Some(o) if conditional && !unconditional => sm.cond.encode(&s, o)?,
                    _ => sm.cond.null_rows(&s, b)?,
                };
                let xv = s.constant(tensor_f32(&[b, g, GAUSSIAN_PARAMS], x)?)?;
                let y = sm.net.forward(&s, xv, &vec![t; b], cond)?;
                Ok(s.value(y).to_f64_vec())
            };
            let x_t = standard_normal(b * width, &mut rng);
            let w = if unconditional { 1.0 } else { opts.guidance_weight };
            let x0 = ddim_sample(&mut model, &x_t, schedule, opts.steps, opts.eta, w, &mut rng)?;
            out.extend(x0.chunks_exact(width).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Decoder latents (unnormalized, `g × h` each) conditioned on normalized
    /// scaffold codes.
    pub fn sample_latents(&self, schedule: &NoiseSchedule, codes: &[Vec<f64>], opts: &SampleOptions) -> Result<Vec<Vec<f64>>> {
        let g = self.components();
        let h = self.config.latent_dim;
        let mut out = Vec::with_capacity(codes.len());
        let chunk = SAMPLE_CHUNK * 4;
        for (c, part) in codes.chunks(chunk).enumerate() {
            let b = part.len();
            let mut rng = chunk_rng(opts.seed, 2, c);
            let scaffold: Vec<f64> = part.iter().flatten().copied().collect();
            if scaffold.len() != b * g * GAUSSIAN_PARAMS {
                return invalid("latent sampling", format!("codes must have {} values each", g * GAUSSIAN_PARAMS));
            }
            let lm = &self.latent;
            let mut model = |x: &[f64], t: usize, _conditional: bool| -> Result<Vec<f64>> {
                let s = Session::inference(&lm.store);
                let sc = s.constant(tensor_f32(&[b, g, GAUSSIAN_PARAMS], &scaffold)?)?;
                let zv = s.constant(tensor_f32(&[b, g, h], x)?)?;
                let y = lm.net.forward(&s, zv, &vec![t; b], sc)?;
                Ok(s.value(y).to_f64_vec())
            };
            let x_t = standard_normal(b * g * h, &mut rng);
            let z0 = ddim_sample(&mut model, &x_t, schedule, opts.steps, opts.eta, 1.0, &mut rng)?;
            out.extend(z0.chunks_exact(g * h).map(|z| z.iter().map(|v| v * lm.scale).collect()));
        }
        Ok(out)
    }

    /// Poses, scaffolds and latents for every object of every scene.
    pub fn predict(&self, schedule: &NoiseSchedule, scenes: &[(usize, Vec<ObjectObservation>)], opts: &SampleOptions) -> Result<Vec<ScenePrediction>> {
        let obs: Vec<Vec<ObjectObservation>> = scenes.iter().map(|(_, o)| o.clone()).collect();
        let poses = self.sample_poses(schedule, &obs, opts)?;
        let flat: Vec<ObjectObservation> = obs.iter().flatten().cloned().collect();
        let codes = if flat.is_empty() {
            Vec::new()
        } else {
            self.sample_shapes(schedule, Some(&flat), flat.len(), opts)?
        };
        let latents = self.sample_latents(schedule, &codes, opts)?;
        let mut k = 0;
        let mut out = Vec::with_capacity(scenes.len());
        for ((scene, o), p) in scenes.iter().zip(&poses) {
            let mut objects = Vec::with_capacity(o.len());
            for (ob, pv) in o.iter().zip(p) {
                objects.push(ObjectPrediction {
                    class: ob.class,
                    box2d: ob.box2d,
                    pose: self.pose_norm.denormalize(pv)?,
                    shape_code: self.shape_norm.denormalize(&codes[k]),
                    latents: Some(latents[k].clone()),
                });
                k += 1;
            }
            out.push(ScenePrediction { scene: *scene, objects });
        }
        Ok(out)
    }

    /// Canonical-frame mesh of a scaffold and optional latents.
    pub fn decode_mesh(&self, scaffold: &Scaffold, latents: Option<&[f64]>, resolution: usize) -> Result<Mesh> {
        self.occupancy
            .decoder
            .extract_mesh(&self.occupancy.store, scaffold, latents, resolution, MESH_EXTENT)
    }
}

/// Independent RNG per (purpose, chunk) so results do not depend on chunking
/// of other networks.
fn chunk_rng(seed: u64, purpose: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(chunk as u64);
    rng
}

/// Observations of a rendered scene in condition form.
pub fn scene_observations(spec: &crate::scenes::SceneSpec, obs: &crate::scenes::Observation) -> Vec<ObjectObservation> {
    spec.objects
        .iter()
        .zip(&obs.patches)
        .map(|(o, p)| ObjectObservation {
            box2d: o.box2d,
            patch: p.clone(),
            class: o.class,
        })
        .collect()
}


/// Every `(class, variant)` template of a variant range.
pub fn templates_for(variants: [usize; 2]) -> Vec<(usize, usize)> {
    (0..crate::scenes::NUM_CLASSES)
        .flat_map(|c| (variants[0]..variants[1]).map(move |v| (c, v)))
        .collect()
}
