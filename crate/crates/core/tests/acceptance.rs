//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line (written
//! straight to stderr so it survives output capture) and then asserts.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sde_core::align::{alignment_noise, alignment_targets, one_sided_chamfer, surface_alignment_loss, AlignContext, AlignObject, DepthObservation};
use sde_core::condition::{ConditionConfig, ConditionEncoder, ObjectObservation};
use sde_core::config::{PoseObjective, RunConfig};
use sde_core::dataset::{generate_split, SceneRecord, Split};
use sde_core::denoiser::{scene_mask, LatentDenoiser, PoseDenoiser, PoseNetConfig, ShapeDenoiser, TransformerConfig};
use sde_core::diffusion::{ddim_sample, ddpm_sample, standard_normal, NoiseSchedule};
use sde_core::eval::{evaluate, EvalOptions, EvalReport};
use sde_core::marching_cubes::{marching_cubes, Grid};
use sde_core::mesh::{chamfer_distance, f_score, surface_sample};
use sde_core::model::{scene_observations, templates_for, ObjectPrediction, SampleOptions, SceneModel, ScenePrediction};
use sde_core::pose::{iou3d, PoseNormalizer};
use sde_core::scenes::{generate_scene, render_depth, scene_rng, SceneConfig};
use sde_core::shape::{pack_shape_code, unpack_shape_code, ShapeNormalizer};
use sde_core::train::{prepare_scenes, Trainer};
use sde_tensor::nn::MultiHeadAttention;
use sde_tensor::{grad_check, grad_check_many, grad_check_params, ParamStore, Result as TResult, Tape, Tensor, Var};

fn verdict(name: &str, pass: bool, detail: &str, started: Instant) {
    let line = format!(
        "\n{} {name}: {detail} [{:.1}s]\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------- schedule

#[test]
fn schedule_exactness() {
    let start = Instant::now();
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let exact = common::exact_alpha_bars();
    let worst = (1..=1000)
        .map(|t| (s.alpha_bar(t) - exact[t - 1]).abs() / exact[t - 1])
        .fold(0.0, f64::max);
    let endpoints = s.beta(1) == 1e-4 && (s.beta(1000) - 0.02).abs() < 1e-15;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "schedule exactness",
        worst < 1e-10 && endpoints && secs < 1.0,
        &format!("max relative error {worst:.2e} (< 1e-10), β endpoints exact: {endpoints}"),
        start,
    );
}

// ---------------------------------------------------------------- gradients

const EPS: f64 = 1e-5;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn project(t: &Tape<f64>, y: Var, seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    let w = t.constant(randn(&t.shape(y), &mut rng))?;
    t.sum(t.mul(y, w)?)
}

type Unary = fn(&Tape<f64>, Var) -> TResult<Var>;
type Binary = fn(&Tape<f64>, Var, Var) -> TResult<Var>;

fn op_catalogue_error() -> f64 {
    let unary: Vec<(&[usize], Unary)> = vec![
        (&[2, 3, 4], |t, x| t.transpose(x)),
        (&[2, 6], |t, x| t.reshape(x, &[3, 4])),
        (&[3, 5], |t, x| t.slice(x, 1, 1, 4)),
        (&[4, 3], |t, x| t.gather(x, &[3, 0, 3, 1])),
        (&[3, 5], |t, x| t.softmax(x)),
        (&[3, 5], |t, x| t.sigmoid(x)),
        (&[3, 5], |t, x| t.silu(x)),
        (&[3, 5], |t, x| t.leaky_relu(x)),
        (&[3, 5], |t, x| t.affine(x, 2.5, -1.0)),
        (&[3, 6], |t, x| t.layer_norm(x)),
        (&[2, 4, 6], |t, x| t.group_norm(x, 3)),
        (&[3, 4], |t, x| t.sum(x)),
        (&[3, 4], |t, x| t.mean(x)),
        (&[3, 4, 2], |t, x| t.sum_axis(x, 1)),
        (&[3, 4, 2], |t, x| t.mean_axis(x, 0)),
    ];
    let binary: Vec<(&[usize], &[usize], Binary)> = vec![
        (&[2, 3, 4], &[3, 4], |t, a, b| t.add(a, b)),
        (&[3, 4], &[4], |t, a, b| t.mul(a, b)),
        (&[3, 4], &[3, 4], |t, a, b| t.sub(a, b)),
        (&[2, 3, 4], &[4, 5], |t, a, b| t.matmul(a, b)),
        (&[2, 3, 4], &[2, 4, 2], |t, a, b| t.matmul(a, b)),
        (&[2, 3], &[2, 2], |t, a, b| t.concat(&[a, b, a], 1)),
    ];
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (shape, op) in &unary {
            let x = randn(shape, &mut rng);
            worst = worst.max(grad_check(|t, v| project(t, op(t, v)?, seed), &x, EPS).unwrap());
        }
        for (sa, sb, op) in &binary {
            let inputs = [randn(sa, &mut rng), randn(sb, &mut rng)];
            worst = worst.max(grad_check_many(|t, v| project(t, op(t, v[0], v[1])?, seed), &inputs, EPS).unwrap());
        }
    }
    worst
}

fn wrap(e: sde_core::CoreError) -> sde_tensor::TensorError {
    sde_tensor::TensorError::Invalid { op: "acceptance", msg: e.to_string() }
}

fn perturb(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += std * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
}

fn random_observation(rng: &mut ChaCha8Rng) -> ObjectObservation {
    let l = rng.random_range(0.0..100.0);
    let t = rng.random_range(0.0..100.0);
    ObjectObservation {
        box2d: [l, t, l + rng.random_range(2.0..28.0), t + rng.random_range(2.0..28.0)],
        patch: (0..128).map(|_| rng.random_range(-1.0..1.0)).collect(),
        class: rng.random_range(0..8),
    }
}

fn small_transformer() -> TransformerConfig {
    TransformerConfig {
        width: 16,
        heads: 4,
        encoder_layers: 1,
        decoder_layers: 2,
        memory_tokens: 2,
        time_dim: 16,
    }
}

fn isa_block_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "isa", 8, 8, 2, &mut rng).unwrap();
    perturb(&mut store, 0.3, 41);
    let x = randn(&[5, 8], &mut rng);
    let mask = scene_mask(&[2, 3]);
    grad_check_params(
        &store,
        |s| {
            let xv = s.constant(x.clone())?;
            let m = s.constant(mask.clone())?;
            project(s, mha.forward(s, xv, xv, Some(m))?, 42)
        },
        EPS,
        None,
        43,
    )
    .unwrap()
}

fn denoiser_errors() -> [f64; 4] {
    let mut out = [0.0; 4];
    for (k, isa) in [true, false].into_iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(50 + k as u64);
        let enc = ConditionEncoder::new(&mut store, "cond", &ConditionConfig::default(), &mut rng).unwrap();
        let cfg = PoseNetConfig {
            width: 16,
            blocks: 2,
            heads: 2,
            min_width: 8,
            memory_tokens: 2,
            time_dim: 16,
            isa,
        };
        let net = PoseDenoiser::new(&mut store, "pose", &cfg, enc.width(), &mut rng).unwrap();
        perturb(&mut store, 0.1, 60 + k as u64);
        let obs: Vec<ObjectObservation> = (0..2).map(|_| random_observation(&mut rng)).collect();
        let refs: Vec<&ObjectObservation> = obs.iter().collect();
        let x = randn(&[2, 7], &mut rng);
        let eps = randn(&[2, 7], &mut rng);
        out[k] = grad_check_params(
            &store,
            |s| {
                let y = enc.assemble(s, &refs, &[2], &[false]).map_err(wrap)?;
                let pred = net.forward(s, s.constant(x.clone())?, &[321], y, &[2]).map_err(wrap)?;
                let d = s.sub(pred, s.constant(eps.clone())?)?;
                s.mean(s.mul(d, d)?)
            },
            EPS,
            None,
            70 + k as u64,
        )
        .unwrap();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut store = ParamStore::<f64>::new();
    let enc = ConditionEncoder::new(&mut store, "cond", &ConditionConfig::default(), &mut rng).unwrap();
    let net = ShapeDenoiser::new(&mut store, "shape", &small_transformer(), enc.width(), &mut rng).unwrap();
    perturb(&mut store, 0.1, 81);
    let obs: Vec<ObjectObservation> = (0..2).map(|_| random_observation(&mut rng)).collect();
    let refs: Vec<&ObjectObservation> = obs.iter().collect();
    let x = randn(&[2, 16, 16], &mut rng);
    let target = randn(&[2, 16, 16], &mut rng);
    out[2] = grad_check_params(
        &store,
        |s| {
            let y = enc.assemble(s, &refs, &[1, 1], &[false, false]).map_err(wrap)?;
            let pred = net.forward(s, s.constant(x.clone())?, &[40, 700], y).map_err(wrap)?;
            let d = s.sub(pred, s.constant(target.clone())?)?;
            s.mean(s.mul(d, d)?)
        },
        EPS,
        Some(400),
        82,
    )
    .unwrap();

    let mut lstore = ParamStore::<f64>::new();
    let lat = LatentDenoiser::new(&mut lstore, "latent", &small_transformer(), 8, &mut rng).unwrap();
    perturb(&mut lstore, 0.1, 83);
    let z = randn(&[2, 16, 8], &mut rng);
    let zt = randn(&[2, 16, 8], &mut rng);
    out[3] = grad_check_params(
        &lstore,
        |s| {
            let pred = lat.forward(s, s.constant(z.clone())?, &[5, 999], s.constant(x.clone())?).map_err(wrap)?;
            let d = s.sub(pred, s.constant(zt.clone())?)?;
            s.mean(s.mul(d, d)?)
        },
        EPS,
        Some(400),
        84,
    )
    .unwrap();
    out
}

/// Worst relative error of the analytic alignment gradient against central
/// differences, over every pose coordinate and a random subset of shape
/// coordinates of each visible object.
fn align_gradient_error() -> f64 {
    let cam = sde_core::pose::Camera::centered(128.0, 128).unwrap();
    let scene = generate_scene(&mut scene_rng(2, 0), &SceneConfig::default()).unwrap();
    let obs = DepthObservation::from_render(cam, &render_depth(&scene).unwrap()).unwrap();
    let targets = alignment_targets(&obs, scene.objects.len());
    let pose_norm = PoseNormalizer::new(&cam);
    let shape_norm = ShapeNormalizer::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let poses: Vec<Vec<f64>> = scene
        .objects
        .iter()
        .map(|o| pose_norm.normalize(&o.pose).iter().map(|x| x + rng.random_range(-0.02..0.02)).collect())
        .collect();
    let shapes: Vec<Vec<f64>> = scene
        .objects
        .iter()
        .map(|o| shape_norm.normalize(&pack_shape_code(&o.scaffold)).iter().map(|x| x + rng.random_range(-0.02..0.02)).collect())
        .collect();
    let noise = alignment_noise(poses.len(), 16, 50, &mut ChaCha8Rng::seed_from_u64(5));
    let ctx = AlignContext {
        camera: &cam,
        pose_norm: &pose_norm,
        shape_norm: &shape_norm,
        components: 16,
        m: 50,
    };
    let loss = |p: &[Vec<f64>], s: &[Vec<f64>]| {
        let objs: Vec<AlignObject> = (0..p.len())
            .map(|i| AlignObject {
                pose: &p[i],
                shape: &s[i],
                box_center: scene.objects[i].box_center(),
            })
            .collect();
        surface_alignment_loss(&ctx, &objs, &targets, &noise, 0.01).unwrap()
    };
    let base = loss(&poses, &shapes);
    let h = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut worst: f64 = 0.0;
    for (i, t) in targets.iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        for k in 0..7 {
            let (mut plus, mut minus) = (poses.clone(), poses.clone());
            plus[i][k] += h;
            minus[i][k] -= h;
            let num = (loss(&plus, &shapes).value - loss(&minus, &shapes).value) / (2.0 * h);
            worst = worst.max(rel(base.grad_pose[i][k], num));
        }
        for _ in 0..16 {
            let k = rng.random_range(0..256);
            let (mut plus, mut minus) = (shapes.clone(), shapes.clone());
            plus[i][k] += h;
            minus[i][k] -= h;
            let num = (loss(&poses, &plus).value - loss(&poses, &minus).value) / (2.0 * h);
            // coordinates that barely move the loss are dominated by rounding
            if base.grad_shape[i][k].abs().max(num.abs()) > 1e-9 {
                worst = worst.max(rel(base.grad_shape[i][k], num));
            }
        }
    }
    worst
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let ops = op_catalogue_error();
    let isa = isa_block_error();
    let nets = denoiser_errors();
    let align = align_gradient_error();
    let secs = start.elapsed().as_secs_f64();
    let pass = ops < 1e-4 && isa < 1e-4 && nets.iter().all(|&e| e < 1e-4) && align < 1e-3 && secs < 300.0;
    verdict(
        "gradient suite",
        pass,
        &format!(
            "ops {ops:.1e}, ISA {isa:.1e}, pose(ISA) {:.1e}, pose(no ISA) {:.1e}, shape {:.1e}, latent {:.1e} (< 1e-4); L_align {align:.1e} (< 1e-3)",
            nets[0], nets[1], nets[2], nets[3]
        ),
        start,
    );
}

// ---------------------------------------------------------------- oracles

#[test]
fn oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut chamfer_ok = 0;
    for _ in 0..100 {
        let (ns, nt) = (rng.random_range(1..400), rng.random_range(1..200));
        let sources = common::tie_prone_cloud(&mut rng, ns);
        let targets = common::tie_prone_cloud(&mut rng, nt);
        let fast = one_sided_chamfer(&targets, &sources).unwrap();
        let (value, _, argmin) = common::brute_one_sided(&targets, &sources);
        if fast.value.to_bits() == value.to_bits() && fast.argmin == argmin {
            chamfer_ok += 1;
        }
    }
    let mut worst_iou: f64 = 0.0;
    let mut overlapping = 0;
    let mut seed = 0;
    while overlapping < 50 {
        let a = common::random_box(&mut rng);
        let mut b = common::random_box(&mut rng);
        b.center = [
            a.center[0] + rng.random_range(-0.4..0.4),
            a.center[1] + rng.random_range(-0.2..0.2),
            a.center[2] + rng.random_range(-0.4..0.4),
        ];
        let exact = iou3d(&a, &b).unwrap();
        if exact == 0.0 {
            continue;
        }
        let mc = common::monte_carlo_iou(&a, &b, 100, seed);
        worst_iou = worst_iou.max((exact - mc).abs());
        overlapping += 1;
        seed += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "oracle equivalence",
        chamfer_ok == 100 && worst_iou < 1e-3 && secs < 120.0,
        &format!("Chamfer bit-exact {chamfer_ok}/100; IoU3D max |exact − MC(10⁶)| {worst_iou:.1e} (< 1e-3) on 50 pairs"),
        start,
    );
}

// ---------------------------------------------------------------- geometry

#[test]
fn geometry() {
    let start = Instant::now();
    let g = Grid::sample(64, [0.0; 3], 1.5, |p| 0.5 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    let mesh = marching_cubes(&g, 0.0);
    let watertight = !mesh.is_empty() && mesh.is_watertight();
    let worst = mesh
        .vertices
        .iter()
        .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 0.5).abs() / g.spacing)
        .fold(0.0, f64::max);
    let pts = surface_sample(&mesh, 10_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cd = chamfer_distance(&pts, &pts).unwrap();
    let f = f_score(&pts, &pts, 0.05).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "geometry",
        watertight && worst <= 2.0 && cd == 0.0 && f == 100.0 && secs < 30.0,
        &format!("sphere res 64 watertight {watertight}, max radial error {worst:.2} cells (≤ 2); self CD {cd}, F {f}"),
        start,
    );
}

// ---------------------------------------------------------------- samplers

fn toy_eps(x: &[f64], t: usize, cond: bool) -> sde_core::error::Result<Vec<f64>> {
    let shift = if cond { 0.3 } else { -0.2 };
    Ok(x.iter().enumerate().map(|(i, v)| 0.5 * v + shift * ((i + 1) as f64 * t as f64 / 200.0).sin()).collect())
}

#[test]
fn sampler_consistency() {
    let start = Instant::now();
    let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let mut worst: f64 = 0.0;
    let mut deterministic = true;
    for seed in 0..10 {
        let x_t = standard_normal(7, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = ddim_sample(&mut toy_eps, &x_t, &s, 200, 1.0, 1.5, &mut ChaCha8Rng::seed_from_u64(100 + seed)).unwrap();
        let b = ddpm_sample(&mut toy_eps, &x_t, &s, 1.5, &mut ChaCha8Rng::seed_from_u64(100 + seed)).unwrap();
        worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
        let c = ddim_sample(&mut toy_eps, &x_t, &s, 50, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = ddim_sample(&mut toy_eps, &x_t, &s, 50, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        deterministic &= c.iter().zip(&d).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "sampler consistency",
        worst < 1e-5 && deterministic && secs < 60.0,
        &format!("DDIM(T, η=1) vs DDPM max diff {worst:.1e} (< 1e-5); DDIM(η=0) bit-deterministic: {deterministic}"),
        start,
    );
}

// ---------------------------------------------------------------- trained models

const TOY_BUDGET_SECS: f64 = 30.0 * 60.0;

struct Toy {
    cfg: RunConfig,
    records: Vec<SceneRecord>,
    model: SceneModel,
    train_secs: f64,
}

/// The 64-scene overfit model, trained once with the desk configuration.
fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let cfg = RunConfig::desk();
        let records = generate_split(&cfg, Split::Train).unwrap();
        let start = Instant::now();
        let mut model = SceneModel::new(&cfg.model, cfg.scene.camera().unwrap(), &templates_for(cfg.scene.variants), cfg.seed).unwrap();
        let scenes = prepare_scenes(&model, &records, cfg.align.max_targets, cfg.seed).unwrap();
        Trainer::new(&cfg, cfg.seed).unwrap().train_all(&mut model, &scenes).unwrap();
        Toy {
            train_secs: start.elapsed().as_secs_f64(),
            cfg,
            records,
            model,
        }
    })
}

fn sample_options(cfg: &RunConfig, seed: u64) -> SampleOptions {
    SampleOptions {
        steps: cfg.diffusion.sample_steps,
        eta: cfg.diffusion.eta,
        guidance_weight: cfg.diffusion.guidance_weight,
        unconditional: false,
        seed,
    }
}

/// Poses and scaffolds for every scene (no decoder latents: the box and
/// alignment metrics do not use them).
fn predict_boxes(model: &SceneModel, cfg: &RunConfig, records: &[SceneRecord], seed: u64) -> Vec<ScenePrediction> {
    let sched = NoiseSchedule::linear(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end).unwrap();
    let opts = sample_options(cfg, seed);
    let obs: Vec<Vec<ObjectObservation>> = records.iter().map(|r| scene_observations(&r.spec, &r.observation)).collect();
    let poses = model.sample_poses(&sched, &obs, &opts).unwrap();
    let flat: Vec<ObjectObservation> = obs.iter().flatten().cloned().collect();
    let codes = model.sample_shapes(&sched, Some(&flat), flat.len(), &opts).unwrap();
    let mut k = 0;
    obs.iter()
        .zip(&poses)
        .enumerate()
        .map(|(scene, (o, p))| ScenePrediction {
            scene,
            objects: o
                .iter()
                .zip(p)
                .map(|(ob, pv)| {
                    k += 1;
                    ObjectPrediction {
                        class: ob.class,
                        box2d: ob.box2d,
                        pose: model.pose_norm.denormalize(pv).unwrap(),
                        shape_code: model.shape_norm.denormalize(&codes[k - 1]),
                        latents: None,
                    }
                })
                .collect(),
        })
        .collect()
}

fn box_metrics(model: &SceneModel, cfg: &RunConfig, records: &[SceneRecord], preds: &[ScenePrediction]) -> EvalReport {
    let pairs: Vec<(usize, &SceneRecord)> = records.iter().enumerate().collect();
    let mut opts = EvalOptions::from_config(cfg);
    opts.skip_shapes = true;
    evaluate(model, preds, &pairs, &opts).unwrap()
}

#[test]
fn toy_overfit() {
    let start = Instant::now();
    let toy = toy();
    let preds = predict_boxes(&toy.model, &toy.cfg, &toy.records, 1);
    let r = box_metrics(&toy.model, &toy.cfg, &toy.records, &preds).overall;
    let pass = r.iou > 0.5 && r.ap > 0.9 && r.align < 0.05 && toy.train_secs <= TOY_BUDGET_SECS;
    verdict(
        "toy overfit",
        pass,
        &format!(
            "64 scenes, {} objects: IoU3D {:.3} (> 0.5), AP@15 {:.3} (> 0.9), L_align {:.4} m² (< 0.05); training {:.0}s (≤ 1800)",
            r.objects, r.iou, r.ap, r.align, toy.train_secs
        ),
        start,
    );
}

#[test]
fn unconditional_synthesis() {
    let start = Instant::now();
    let toy = toy();
    let cfg = &toy.cfg;
    let sched = NoiseSchedule::linear(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end).unwrap();
    let mut opts = sample_options(cfg, 7);
    opts.unconditional = true;
    let codes = toy.model.sample_shapes(&sched, None, 100, &opts).unwrap();
    let latents = toy.model.sample_latents(&sched, &codes, &opts).unwrap();
    let g = toy.model.components();
    let non_empty = codes
        .iter()
        .zip(&latents)
        .filter(|(c, z)| {
            let scaffold = unpack_shape_code(&toy.model.shape_norm.denormalize(c), g).unwrap();
            let mesh = toy.model.decode_mesh(&scaffold, Some(z), UNCONDITIONAL_RESOLUTION).unwrap();
            !mesh.is_empty() && mesh.area() > 0.0
        })
        .count();
    verdict(
        "unconditional synthesis",
        non_empty >= 90,
        &format!("{non_empty}/100 unconditional draws decode to non-empty meshes (≥ 90) at res {UNCONDITIONAL_RESOLUTION}"),
        start,
    );
}

/// Emptiness does not depend on resolution once cells are finer than the
/// thinnest parts; 64³ keeps 100 extractions within a few minutes.
const UNCONDITIONAL_RESOLUTION: usize = 64;

// ---------------------------------------------------------------- ablations

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

/// Ablation budget on 256 scenes: roughly the toy run's optimizer steps.
fn ablation_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.dataset.train_scenes = 256;
    cfg.dataset.val_scenes = 64;
    cfg.train.occupancy_steps = 0;
    cfg.train.latent_steps = 0;
    cfg.train.pose_epochs = 250;
    cfg.train.shape_epochs = 100;
    cfg.train.joint_epochs = 20;
    cfg
}

#[derive(Default, Debug)]
struct AblationScores {
    full_ap: f64,
    no_isa_ap: f64,
    regression_ap: f64,
    full_align: f64,
    no_joint_align: f64,
}

fn run_ablation_seed(seed: u64, train: &[SceneRecord], val: &[SceneRecord]) -> AblationScores {
    let base = ablation_config(seed);
    let cam = base.scene.camera().unwrap();
    let templates = templates_for(base.scene.variants);
    let pretrained = tempfile::tempdir().unwrap();

    // full model pre-training; shapes are shared by every variant
    let mut model = SceneModel::new(&base.model, cam, &templates, seed).unwrap();
    let scenes = prepare_scenes(&model, train, base.align.max_targets, seed).unwrap();
    let mut trainer = Trainer::new(&base, seed).unwrap();
    trainer.train_pose(&mut model, &scenes, base.train.pose_epochs).unwrap();
    trainer.train_shape(&mut model, &scenes, base.train.shape_epochs).unwrap();
    model.save(pretrained.path()).unwrap();

    // the same joint-stage stream for every variant: only λ or the pose network differs
    let joint = |model: &mut SceneModel, cfg: &RunConfig, weight: f64| {
        Trainer::new(cfg, seed + 1000)
            .unwrap()
            .train_joint(model, &scenes, cfg.train.joint_epochs, cfg.train.losses, weight)
            .unwrap();
    };
    let score = |model: &SceneModel, cfg: &RunConfig| box_metrics(model, cfg, val, &predict_boxes(model, cfg, val, 99)).overall;

    let mut out = AblationScores::default();
    joint(&mut model, &base, base.align.weight);
    let full = score(&model, &base);
    out.full_ap = full.ap;
    out.full_align = full.align;

    let mut no_joint = SceneModel::load(pretrained.path(), Some(&base.model)).unwrap();
    joint(&mut no_joint, &base, 0.0);
    out.no_joint_align = score(&no_joint, &base).align;

    for variant in ["no-isa", "regression"] {
        let mut cfg = base.clone();
        match variant {
            "no-isa" => cfg.model.pose_net.isa = false,
            _ => cfg.model.pose_objective = PoseObjective::Regression1Step,
        }
        let mut m = SceneModel::new(&cfg.model, cam, &templates, seed).unwrap();
        m.shape = SceneModel::load(pretrained.path(), Some(&base.model)).unwrap().shape;
        Trainer::new(&cfg, seed).unwrap().train_pose(&mut m, &scenes, cfg.train.pose_epochs).unwrap();
        joint(&mut m, &cfg, cfg.align.weight);
        let ap = score(&m, &cfg).ap;
        match variant {
            "no-isa" => out.no_isa_ap = ap,
            _ => out.regression_ap = ap,
        }
    }
    let _ = std::io::stderr().write_all(format!("  ablation seed {seed}: {out:?}\n").as_bytes());
    out
}

#[test]
fn directional_ablations() {
    let start = Instant::now();
    let data_cfg = ablation_config(0);
    let train = generate_split(&data_cfg, Split::Train).unwrap();
    let val = generate_split(&data_cfg, Split::Val).unwrap();
    let runs: Vec<AblationScores> = ABLATION_SEEDS.iter().map(|&s| run_ablation_seed(s, &train, &val)).collect();
    let mean = |f: fn(&AblationScores) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let full_ap = mean(|r| r.full_ap);
    let no_isa_ap = mean(|r| r.no_isa_ap);
    let regression_ap = mean(|r| r.regression_ap);
    let full_align = mean(|r| r.full_align);
    let no_joint_align = mean(|r| r.no_joint_align);
    let pass = full_ap > no_isa_ap && full_ap > regression_ap && full_align < no_joint_align;
    verdict(
        "directional ablations",
        pass,
        &format!(
            "256/64 split, 3 seeds: AP@15 full {full_ap:.3} vs no-ISA {no_isa_ap:.3} vs 1-step regression {regression_ap:.3}; L_align joint {full_align:.5} vs no-joint {no_joint_align:.5}"
        ),
        start,
    );
}
