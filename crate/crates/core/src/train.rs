//! Training stages: occupancy auto-decoder, latent, pose and shape denoisers,
//! and joint fine-tuning with the surface alignment loss.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sde_tensor::optim::AdamW;
use sde_tensor::{ParamGrads, ParamStore, Session, Tape, TensorError, Var};
use serde::Serialize;

use crate::align::{alignment_noise, alignment_targets, surface_alignment_loss, AlignContext, AlignObject, DepthObservation};
use crate::condition::ObjectObservation;
use crate::config::{LossMask, PoseObjective, RunConfig};
use crate::dataset::SceneRecord;
use crate::diffusion::{epsilon_loss, maybe_drop_condition, standard_normal, NoiseSchedule};
use crate::error::{io_err, CoreError, Result};
use crate::model::{scene_observations, tensor_f32, SceneModel};
use crate::occupancy::occupancy_queries;
use crate::pose::{Vec3, POSE_DIM};
use crate::scenes::{template_scaffold, SHAPE_ISO};
use crate::shape::GAUSSIAN_PARAMS;

/// One scene in training form.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub objects: Vec<ObjectObservation>,
    /// Normalized poses.
    pub poses: Vec<[f64; POSE_DIM]>,
    /// Normalized scaffold codes.
    pub shapes: Vec<Vec<f64>>,
    pub box_centers: Vec<[f64; 2]>,
    /// Back-projected depth points per object, subsampled; empty when masked.
    pub targets: Vec<Vec<Vec3>>,
}

/// Converts rendered scenes, keeping at most `max_targets` depth points per object.
pub fn prepare_scenes(model: &SceneModel, records: &[SceneRecord], max_targets: usize, seed: u64) -> Result<Vec<TrainScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            let depth = DepthObservation::from_render(r.spec.camera, &r.observation)?;
            let targets = alignment_targets(&depth, r.spec.objects.len())
                .into_iter()
                .map(|mut t| {
                    if t.len() > max_targets {
                        t.shuffle(&mut rng);
                        t.truncate(max_targets);
                    }
                    t
                })
                .collect();
            Ok(TrainScene {
                objects: scene_observations(&r.spec, &r.observation),
                poses: r.spec.objects.iter().map(|o| model.pose_norm.normalize(&o.pose)).collect(),
                shapes: r.spec.objects.iter().map(|o| model.encode_shape(&o.scaffold)).collect(),
                box_centers: r.spec.objects.iter().map(|o| o.box_center()).collect(),
                targets,
            })
        })
        .collect()
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub stage: &'static str,
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub pose: f64,
    pub shape: f64,
    pub align: f64,
}

pub const LOG_HEADER: &str = "stage,step,epoch,loss,pose,shape,align";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.stage, self.step, self.epoch, self.loss, self.pose, self.shape, self.align
        )
    }
}

/// Append-only CSV metric log.
pub struct MetricLog {
    path: PathBuf,
}

impl MetricLog {
    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            std::fs::write(path, format!("{LOG_HEADER}\n")).map_err(io_err(path))?;
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn append(&self, rows: &[LogRow]) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path).map_err(io_err(&self.path))?;
        for r in rows {
            writeln!(f, "{}", r.csv()).map_err(io_err(&self.path))?;
        }
        Ok(())
    }
}

/// Exponential moving average of a loss curve.
pub fn smoothed(losses: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut ema = None;
    for &l in losses {
        let v = match ema {
            None => l,
            Some(e) => decay * e + (1.0 - decay) * l,
        };
        ema = Some(v);
        out.push(v);
    }
    out
}

/// Which objectives a scene-batch step optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFlags {
    pub pose: bool,
    pub shape: bool,
    /// λ for the alignment term; zero disables it.
    pub align_weight: f64,
    /// Multiplies the stage's learning-rate schedule.
    pub lr_scale: f64,
    /// Scene timesteps are drawn from `1..=t_draw`.
    pub t_draw: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct StepLoss {
    pose: f64,
    shape: f64,
    align: f64,
}

pub struct Trainer<'c> {
    pub cfg: &'c RunConfig,
    pub schedule: NoiseSchedule,
    pub rng: ChaCha8Rng,
    /// Alignment sample noise only, so that enabling the loss leaves every
    /// other draw (batches, timesteps, drops, diffusion noise) unchanged.
    align_rng: ChaCha8Rng,
    /// Every optimizer step, in order.
    pub history: Vec<LogRow>,
    log: Option<MetricLog>,
    pending: Vec<LogRow>,
}

fn check_finite(stage: &'static str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFiniteLoss {
            stage: stage.to_string(),
            step,
        })
    }
}

/// A non-finite value caught anywhere in a step's forward pass is reported
/// as a non-finite loss at that step.
fn at_step<T>(stage: &'static str, step: usize, r: Result<T>) -> Result<T> {
    match r {
        Err(CoreError::Tensor(TensorError::NonFinite { .. })) => Err(CoreError::NonFiniteLoss {
            stage: stage.to_string(),
            step,
        }),
        other => other,
    }
}

/// Cosine decay from `lr` at step 0 to `lr · floor` at the last step.
pub fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    let f = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * f).cos()))
}

fn apply(opt: &mut AdamW, store: &mut ParamStore<f32>, mut grads: ParamGrads<f32>, clip: f64) {
    if clip > 0.0 {
        grads.clip_global_norm(clip);
    }
    opt.step(store, &grads);
}

fn mse(t: &Tape<f32>, pred: Var, target: Var) -> sde_tensor::Result<Var> {
    epsilon_loss(t, pred, target)
}

impl<'c> Trainer<'c> {
    pub fn new(cfg: &'c RunConfig, seed: u64) -> Result<Self> {
        let d = &cfg.diffusion;
        Ok(Self {
            cfg,
            schedule: NoiseSchedule::linear(d.steps, d.beta_start, d.beta_end)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            align_rng: {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(1);
                r
            },
            history: Vec::new(),
            log: None,
            pending: Vec::new(),
        })
    }

    pub fn with_log(mut self, log: MetricLog) -> Self {
        self.log = Some(log);
        self
    }

    fn optimizer(&self) -> AdamW {
        let t = &self.cfg.train;
        AdamW::new(t.lr, t.beta1, t.beta2, t.weight_decay)
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        cosine_lr(self.cfg.train.lr, self.cfg.train.lr_floor, step, total)
    }

    fn record(&mut self, row: LogRow) -> Result<()> {
        check_finite(row.stage, row.step, row.loss)?;
        self.history.push(row.clone());
        if self.log.is_some() {
            self.pending.push(row);
            if self.pending.len() >= self.cfg.train.log_every.max(1) {
                self.flush()?;
            }
        }
        Ok(())
    }

    /// Writes buffered rows to the metric log.
    pub fn flush(&mut self) -> Result<()> {
        if let Some(log) = &self.log {
            log.append(&self.pending)?;
        }
        self.pending.clear();
        Ok(())
    }

    /// Every stage with a non-zero budget, in dependency order.
    pub fn train_all(&mut self, model: &mut SceneModel, scenes: &[TrainScene]) -> Result<()> {
        let t = self.cfg.train;
        self.train_occupancy(model, t.occupancy_steps)?;
        self.train_latents(model, t.latent_steps)?;
        if t.losses.pose {
            self.train_pose(model, scenes, t.pose_epochs)?;
        }
        if t.losses.shape {
            self.train_shape(model, scenes, t.shape_epochs)?;
        }
        let weight = if t.losses.align { self.cfg.align.weight } else { 0.0 };
        self.train_joint(model, scenes, t.joint_epochs, t.losses, weight)?;
        self.flush()
    }

    /// Fits the occupancy decoder and the per-template latents to the
    /// analytic union-of-ellipsoids occupancy.
    pub fn train_occupancy(&mut self, model: &mut SceneModel, steps: usize) -> Result<()> {
        let templates = model.occupancy.templates.clone();
        if templates.is_empty() || steps == 0 {
            return Ok(());
        }
        let g = model.components();
        let scaffolds: Vec<_> = templates.iter().map(|((c, v), _)| template_scaffold(*c, *v, g)).collect();
        let per_step = 4.min(templates.len());
        let mut opt = self.optimizer();
        let queries = self.cfg.train.occupancy_queries;
        for step in 0..steps {
            let picks: Vec<usize> = (0..per_step).map(|_| self.rng.random_range(0..templates.len())).collect();
            let occ = &model.occupancy;
            let s = Session::new(&occ.store);
            let rng = &mut self.rng;
            let mut forward = || -> Result<Var> {
                let mut total: Option<Var> = None;
                for &k in &picks {
                    let pts = occupancy_queries(&scaffolds[k], queries, rng);
                    let tgt: Vec<f64> = pts.iter().map(|p| f64::from(u8::from(scaffolds[k].union_contains(*p, SHAPE_ISO)))).collect();
                    let l = occ.decoder.loss(&s, &scaffolds[k], s.param(templates[k].1)?, &pts, &tgt)?;
                    total = Some(match total {
                        None => l,
                        Some(t) => s.add(t, l)?,
                    });
                }
                Ok(s.affine(total.expect("at least one template"), 1.0 / per_step as f32, 0.0)?)
            };
            let loss = at_step("occupancy", step, forward())?;
            let value = f64::from(s.value(loss).item());
            check_finite("occupancy", step, value)?;
            let grads = s.backward(loss)?;
            drop(s);
            opt.lr = self.lr_at(step, steps);
            apply(&mut opt, &mut model.occupancy.store, grads, self.cfg.train.grad_clip);
            self.record(LogRow {
                stage: "occupancy",
                step,
                epoch: 0,
                loss: value,
                pose: 0.0,
                shape: value,
                align: 0.0,
            })?;
        }
        Ok(())
    }

    /// Teaches the latent denoiser the template latents given their scaffolds.
    pub fn train_latents(&mut self, model: &mut SceneModel, steps: usize) -> Result<()> {
        let templates = model.occupancy.templates.clone();
        if templates.is_empty() {
            return Ok(());
        }
        let g = model.components();
        let h = model.config.latent_dim;
        let all: Vec<f64> = templates
            .iter()
            .flat_map(|(_, id)| model.occupancy.store.get(*id).to_f64_vec())
            .collect();
        let rms = (all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64).sqrt();
        model.latent.scale = rms.max(1e-6);
        let codes: Vec<Vec<f64>> = templates
            .iter()
            .map(|((c, v), _)| model.encode_shape(&template_scaffold(*c, *v, g)))
            .collect();
        let latents: Vec<Vec<f64>> = templates
            .iter()
            .map(|(_, id)| model.occupancy.store.get(*id).to_f64_vec().iter().map(|v| v / model.latent.scale).collect())
            .collect();
        let b = self.cfg.train.batch_objects.min(templates.len());
        let mut opt = self.optimizer();
        for step in 0..steps {
            let picks: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..templates.len())).collect();
            let ts: Vec<usize> = picks.iter().map(|_| self.rng.random_range(1..=self.schedule.steps())).collect();
            let eps = standard_normal(b * g * h, &mut self.rng);
            let mut xt = Vec::with_capacity(b * g * h);
            let mut sc = Vec::with_capacity(b * g * GAUSSIAN_PARAMS);
            for (i, &k) in picks.iter().enumerate() {
                let (a, c) = self.schedule.noise_coeffs(ts[i]);
                xt.extend(latents[k].iter().zip(&eps[i * g * h..(i + 1) * g * h]).map(|(x, e)| a * x + c * e));
                sc.extend_from_slice(&codes[k]);
            }
            let lm = &model.latent;
            let s = Session::new(&lm.store);
            let forward = || -> Result<Var> {
                let x = s.constant(tensor_f32(&[b, g, h], &xt)?)?;
                let scaffold = s.constant(tensor_f32(&[b, g, GAUSSIAN_PARAMS], &sc)?)?;
                let pred = lm.net.forward(&s, x, &ts, scaffold)?;
                let target = s.constant(tensor_f32(&[b, g, h], &eps)?)?;
                Ok(mse(&s, pred, target)?)
            };
            let loss = at_step("latent", step, forward())?;
            let value = f64::from(s.value(loss).item());
            check_finite("latent", step, value)?;
            let grads = s.backward(loss)?;
            drop(s);
            opt.lr = self.lr_at(step, steps);
            apply(&mut opt, &mut model.latent.store, grads, self.cfg.train.grad_clip);
            self.record(LogRow {
                stage: "latent",
                step,
                epoch: 0,
                loss: value,
                pose: 0.0,
                shape: value,
                align: 0.0,
            })?;
        }
        Ok(())
    }

    /// Pose denoiser alone on scene batches.
    pub fn train_pose(&mut self, model: &mut SceneModel, scenes: &[TrainScene], epochs: usize) -> Result<()> {
        let flags = StepFlags {
            pose: true,
            shape: false,
            align_weight: 0.0,
            lr_scale: 1.0,
            t_draw: self.schedule.steps(),
        };
        self.scene_epochs("pose", model, scenes, epochs, flags)
    }

    /// Joint fine-tuning of both denoisers with `λ = align_weight`.
    pub fn train_joint(&mut self, model: &mut SceneModel, scenes: &[TrainScene], epochs: usize, losses: LossMask, align_weight: f64) -> Result<()> {
        let flags = StepFlags {
            pose: losses.pose,
            shape: losses.shape,
            align_weight,
            lr_scale: self.cfg.train.joint_lr_scale,
            t_draw: if self.cfg.align.joint_low_noise { self.cfg.align.t_max } else { self.schedule.steps() },
        };
        self.scene_epochs("joint", model, scenes, epochs, flags)
    }

    fn scene_epochs(&mut self, stage: &'static str, model: &mut SceneModel, scenes: &[TrainScene], epochs: usize, flags: StepFlags) -> Result<()> {
        let mut order: Vec<usize> = (0..scenes.len()).filter(|&i| !scenes[i].objects.is_empty()).collect();
        if order.is_empty() || epochs == 0 || !(flags.pose || flags.shape || flags.align_weight > 0.0) {
            return Ok(());
        }
        let mut opt_pose = self.optimizer();
        let mut opt_shape = self.optimizer();
        let total = epochs * order.len().div_ceil(self.cfg.train.batch_scenes);
        let mut step = 0;
        for epoch in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.train.batch_scenes) {
                opt_pose.lr = flags.lr_scale * self.lr_at(step, total);
                opt_shape.lr = opt_pose.lr;
                let batch: Vec<&TrainScene> = chunk.iter().map(|&i| &scenes[i]).collect();
                let l = at_step(stage, step, self.scene_step(model, &batch, flags, &mut opt_pose, &mut opt_shape, stage, step))?;
                self.record(LogRow {
                    stage,
                    step,
                    epoch,
                    loss: l.pose + l.shape + l.align,
                    pose: l.pose,
                    shape: l.shape,
                    align: l.align,
                })?;
                step += 1;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn scene_step(
        &mut self,
        model: &mut SceneModel,
        batch: &[&TrainScene],
        flags: StepFlags,
        opt_pose: &mut AdamW,
        opt_shape: &mut AdamW,
        stage: &'static str,
        step: usize,
    ) -> Result<StepLoss> {
        let cfg = self.cfg;
        let big_t = self.schedule.steps();
        let counts: Vec<usize> = batch.iter().map(|s| s.objects.len()).collect();
        let n: usize = counts.iter().sum();
        let obs: Vec<&ObjectObservation> = batch.iter().flat_map(|s| s.objects.iter()).collect();
        let ts: Vec<usize> = batch.iter().map(|_| self.rng.random_range(1..=flags.t_draw)).collect();
        let dropped: Vec<bool> = batch
            .iter()
            .map(|_| maybe_drop_condition(cfg.diffusion.drop_probability, &mut self.rng))
            .collect();
        let obj_t: Vec<usize> = counts.iter().zip(&ts).flat_map(|(&c, &t)| std::iter::repeat_n(t, c)).collect();
        let regression = model.pose.objective == PoseObjective::Regression1Step;
        let align_on = flags.align_weight > 0.0;
        let eligible: Vec<bool> = (0..batch.len())
            .map(|i| align_on && !dropped[i] && ts[i] <= cfg.align.t_max)
            .collect();
        let any_align = eligible.iter().any(|&e| e);
        let mut out = StepLoss::default();

        // pose forward
        let pose_active = flags.pose || any_align;
        let x0_pose: Vec<f64> = batch.iter().flat_map(|s| s.poses.iter().flatten().copied()).collect();
        let eps_pose = standard_normal(n * POSE_DIM, &mut self.rng);
        let pose_session = Session::new(&model.pose.store);
        let mut pose_pred = None;
        let mut x0hat_pose = Vec::new();
        let mut pose_loss = None;
        if pose_active {
            let s = &pose_session;
            let cond = model.pose.cond.assemble(s, &obs, &counts, &dropped)?;
            if regression {
                let x = s.constant(tensor_f32(&[n, POSE_DIM], &vec![0.0; n * POSE_DIM])?)?;
                let pred = model.pose.net.forward(s, x, &vec![big_t; batch.len()], cond, &counts)?;
                let target = s.constant(tensor_f32(&[n, POSE_DIM], &x0_pose)?)?;
                pose_loss = Some(mse(s, pred, target)?);
                x0hat_pose = s.value(pred).to_f64_vec();
                pose_pred = Some(pred);
            } else {
                let xt = noisy(&self.schedule, &x0_pose, &eps_pose, &obj_t, POSE_DIM);
                let x = s.constant(tensor_f32(&[n, POSE_DIM], &xt)?)?;
                let pred = model.pose.net.forward(s, x, &ts, cond, &counts)?;
                let target = s.constant(tensor_f32(&[n, POSE_DIM], &eps_pose)?)?;
                pose_loss = Some(mse(s, pred, target)?);
                x0hat_pose = denoised(&self.schedule, &xt, &s.value(pred).to_f64_vec(), &obj_t, POSE_DIM);
                pose_pred = Some(pred);
            }
        }

        // shape forward
        let g = model.components();
        let width = g * GAUSSIAN_PARAMS;
        let shape_active = flags.shape || any_align;
        let shape_session = Session::new(&model.shape.store);
        let mut shape_pred = None;
        let mut x0hat_shape = Vec::new();
        let mut shape_loss = None;
        if shape_active {
            let s = &shape_session;
            let x0: Vec<f64> = batch.iter().flat_map(|sc| sc.shapes.iter().flatten().copied()).collect();
            let eps = standard_normal(n * width, &mut self.rng);
            let xt = noisy(&self.schedule, &x0, &eps, &obj_t, width);
            let cond = model.shape.cond.assemble(s, &obs, &counts, &dropped)?;
            let x = s.constant(tensor_f32(&[n, g, GAUSSIAN_PARAMS], &xt)?)?;
            let pred = model.shape.net.forward(s, x, &obj_t, cond)?;
            let target = s.constant(tensor_f32(&[n, g, GAUSSIAN_PARAMS], &eps)?)?;
            shape_loss = Some(mse(s, pred, target)?);
            x0hat_shape = denoised(&self.schedule, &xt, &s.value(pred).to_f64_vec(), &obj_t, width);
            shape_pred = Some(pred);
        }

        // alignment on x̂₀, injected as external gradients on the predictions
        let mut grad_pose = vec![0.0; n * POSE_DIM];
        let mut grad_shape = vec![0.0; n * width];
        if any_align {
            let ctx = AlignContext {
                camera: &model.camera,
                pose_norm: &model.pose_norm,
                shape_norm: &model.shape_norm,
                components: g,
                m: cfg.align.train_samples,
            };
            let mut offset = 0;
            for (i, scene) in batch.iter().enumerate() {
                let k = counts[i];
                if eligible[i] {
                    let objects: Vec<AlignObject> = (0..k)
                        .map(|j| AlignObject {
                            pose: &x0hat_pose[(offset + j) * POSE_DIM..(offset + j + 1) * POSE_DIM],
                            shape: &x0hat_shape[(offset + j) * width..(offset + j + 1) * width],
                            box_center: scene.box_centers[j],
                        })
                        .collect();
                    let noise = alignment_noise(k, g, cfg.align.train_samples, &mut self.align_rng);
                    let r = surface_alignment_loss(&ctx, &objects, &scene.targets, &noise, flags.align_weight)?;
                    let scale = 1.0 / batch.len() as f64;
                    out.align += scale * r.value;
                    // d x̂₀ / d ε̂ = −√(1−ᾱ)/√ᾱ under the diffusion objective
                    let (a, c) = self.schedule.noise_coeffs(ts[i]);
                    let chain = -c / a;
                    let pose_chain = if regression { 1.0 } else { chain };
                    for j in 0..k {
                        for d in 0..POSE_DIM {
                            grad_pose[(offset + j) * POSE_DIM + d] = scale * pose_chain * r.grad_pose[j][d];
                        }
                        for d in 0..width {
                            grad_shape[(offset + j) * width + d] = scale * chain * r.grad_shape[j][d];
                        }
                    }
                }
                offset += k;
            }
        }

        if pose_active {
            let s = &pose_session;
            let pred = pose_pred.expect("pose forward ran");
            let mut total = None;
            if flags.pose {
                let l = pose_loss.expect("pose loss");
                out.pose = f64::from(s.value(l).item());
                total = Some(l);
            }
            if any_align {
                let ext = s.external_scalar(out.align as f32, &[pred], vec![tensor_f32(&[n, POSE_DIM], &grad_pose)?])?;
                total = Some(match total {
                    None => ext,
                    Some(t) => s.add(t, ext)?,
                });
            }
            check_finite(stage, step, out.pose)?;
            if let Some(total) = total {
                let grads = s.backward(total)?;
                drop(pose_session);
                apply(opt_pose, &mut model.pose.store, grads, cfg.train.grad_clip);
            }
        }
        if shape_active {
            let s = &shape_session;
            let pred = shape_pred.expect("shape forward ran");
            let mut total = None;
            if flags.shape {
                let l = shape_loss.expect("shape loss");
                out.shape = f64::from(s.value(l).item());
                total = Some(l);
            }
            if any_align {
                let ext = s.external_scalar(out.align as f32, &[pred], vec![tensor_f32(&[n, g, GAUSSIAN_PARAMS], &grad_shape)?])?;
                total = Some(match total {
                    None => ext,
                    Some(t) => s.add(t, ext)?,
                });
            }
            check_finite(stage, step, out.shape)?;
            if let Some(total) = total {
                let grads = s.backward(total)?;
                drop(shape_session);
                apply(opt_shape, &mut model.shape.store, grads, cfg.train.grad_clip);
            }
        }
        check_finite(stage, step, out.align)?;
        Ok(out)
    }

    /// Shape denoiser alone on object batches.
    pub fn train_shape(&mut self, model: &mut SceneModel, scenes: &[TrainScene], epochs: usize) -> Result<()> {
        let mut items: Vec<(usize, usize)> = scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.objects.len()).map(move |j| (i, j)))
            .collect();
        if items.is_empty() || epochs == 0 {
            return Ok(());
        }
        let g = model.components();
        let width = g * GAUSSIAN_PARAMS;
        let mut opt = self.optimizer();
        let total = epochs * items.len().div_ceil(self.cfg.train.batch_objects);
        let mut step = 0;
        for epoch in 0..epochs {
            items.shuffle(&mut self.rng);
            for chunk in items.chunks(self.cfg.train.batch_objects) {
                let b = chunk.len();
                let obs: Vec<&ObjectObservation> = chunk.iter().map(|&(i, j)| &scenes[i].objects[j]).collect();
                let x0: Vec<f64> = chunk.iter().flat_map(|&(i, j)| scenes[i].shapes[j].iter().copied()).collect();
                let ts: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=self.schedule.steps())).collect();
                let dropped: Vec<bool> = (0..b)
                    .map(|_| maybe_drop_condition(self.cfg.diffusion.drop_probability, &mut self.rng))
                    .collect();
                let eps = standard_normal(b * width, &mut self.rng);
                let xt = noisy(&self.schedule, &x0, &eps, &ts, width);
                let sm = &model.shape;
                let s = Session::new(&sm.store);
                let forward = || -> Result<Var> {
                    let cond = sm.cond.assemble(&s, &obs, &vec![1; b], &dropped)?;
                    let x = s.constant(tensor_f32(&[b, g, GAUSSIAN_PARAMS], &xt)?)?;
                    let pred = sm.net.forward(&s, x, &ts, cond)?;
                    let target = s.constant(tensor_f32(&[b, g, GAUSSIAN_PARAMS], &eps)?)?;
                    Ok(mse(&s, pred, target)?)
                };
                let loss = at_step("shape", step, forward())?;
                let value = f64::from(s.value(loss).item());
                check_finite("shape", step, value)?;
                let grads = s.backward(loss)?;
                drop(s);
                opt.lr = self.lr_at(step, total);
                apply(&mut opt, &mut model.shape.store, grads, self.cfg.train.grad_clip);
                self.record(LogRow {
                    stage: "shape",
                    step,
                    epoch,
                    loss: value,
                    pose: 0.0,
                    shape: value,
                    align: 0.0,
                })?;
                step += 1;
            }
        }
        Ok(())
    }
}

/// `x_t` rows of width `dim`, each at its own timestep.
fn noisy(schedule: &NoiseSchedule, x0: &[f64], eps: &[f64], ts: &[usize], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x0.len());
    for (r, &t) in ts.iter().enumerate() {
        let (a, c) = schedule.noise_coeffs(t);
        for k in r * dim..(r + 1) * dim {
            out.push(a * x0[k] + c * eps[k]);
        }
    }
    out
}

/// `x̂₀ = (x_t − √(1−ᾱ)ε̂)/√ᾱ` per row.
fn denoised(schedule: &NoiseSchedule, xt: &[f64], eps: &[f64], ts: &[usize], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xt.len());
    for (r, &t) in ts.iter().enumerate() {
        let (a, c) = schedule.noise_coeffs(t);
        for k in r * dim..(r + 1) * dim {
            out.push((xt[k] - c * eps[k]) / a);
        }
    }
    out
}
