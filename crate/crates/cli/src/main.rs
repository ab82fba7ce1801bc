//! `sde`: build datasets, train, sample, evaluate and export.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sde_core::align::place_point;
use sde_core::config::{PoseObjective, RunConfig};
use sde_core::dataset::{build_dataset, load_split, read_manifest, SceneRecord, Split};
use sde_core::diffusion::NoiseSchedule;
use sde_core::eval::{evaluate, predictions_from_ground_truth, EvalOptions};
use sde_core::mesh::Mesh;
use sde_core::model::{scene_observations, templates_for, ObjectPrediction, SampleOptions, SceneModel, ScenePrediction};
use sde_core::pose::{object_center, yaw_matrix, Camera};
use sde_core::shape::unpack_shape_code;
use sde_core::train::{prepare_scenes, MetricLog, Trainer};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "sde", version, about = "Conditional scene diffusion over object poses and Gaussian-scaffold shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults to the desk preset, or to the
    /// configuration stored with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MeshFormat {
    Obj,
    Ply,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and render a synthetic dataset.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every stage on a dataset's training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory: config, metric log, checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Drop the inter-object attention blocks.
        #[arg(long)]
        no_isa: bool,
        /// Predict poses in one feed-forward step instead of by diffusion.
        #[arg(long = "regression-1step")]
        regression_1step: bool,
        /// Joint fine-tuning without the alignment loss.
        #[arg(long)]
        no_joint: bool,
    },
    /// Sample poses and shapes for dataset scenes, or unconditional shapes.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required_unless_present = "unconditional")]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// DDIM steps (default from the config: 100).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance_weight: Option<f64>,
        /// Condition on ∅: draw `--count` shapes without observations.
        #[arg(long)]
        unconditional: bool,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Skip mesh export.
        #[arg(long)]
        no_meshes: bool,
        #[arg(long, value_enum, default_value = "obj")]
        format: MeshFormat,
    },
    /// Score predictions against a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// `predictions.json` from `sample`; ground truth when omitted.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iou_thresh: Option<f64>,
        #[arg(long)]
        fscore_tau: Option<f64>,
    },
    /// Write scene depth/instance maps and camera-frame meshes.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Only this scene index.
        #[arg(long)]
        scene: Option<usize>,
        /// Also export predicted meshes (requires `--checkpoint`).
        #[arg(long, requires = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ply")]
        format: MeshFormat,
    },
}

const RUN_CONFIG: &str = "config.json";
const MODEL_DIR: &str = "model";

fn load_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        (None, Some(p)) if p.exists() => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        _ => RunConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn init_threads(cfg: &RunConfig) -> Result<()> {
    let env = std::env::var("SDE_THREADS").ok();
    let n = match env {
        Some(v) => Some(v.parse::<usize>().with_context(|| format!("SDE_THREADS={v} is not a positive integer"))?),
        None => cfg.threads,
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be positive");
        }
        // a second initialization (tests, embedding) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Refuses to overwrite `files` under `dir` unless forced.
fn claim_outputs(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    let clash: Vec<&str> = files.iter().copied().filter(|f| dir.join(f).exists()).collect();
    if !clash.is_empty() && !force {
        bail!("{} already contains {}; pass --force to overwrite", dir.display(), clash.join(", "));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    let d = &cfg.diffusion;
    Ok(NoiseSchedule::linear(d.steps, d.beta_start, d.beta_end)?)
}

/// Adopts the dataset's scene settings so that the camera and templates match.
fn adopt_dataset(cfg: &mut RunConfig, dataset: &Path) -> Result<String> {
    let manifest = read_manifest(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    if manifest.scene != cfg.scene || manifest.dataset != cfg.dataset {
        eprintln!("note: using the scene and dataset settings stored with {}", dataset.display());
        cfg.scene = manifest.scene.clone();
        cfg.dataset = manifest.dataset;
    }
    cfg.validate()?;
    Ok(manifest.config_hash)
}

fn indexed(records: &[SceneRecord]) -> Vec<(usize, &SceneRecord)> {
    records.iter().enumerate().collect()
}

fn write_mesh(mesh: &Mesh, path: &Path, format: MeshFormat) -> Result<()> {
    let f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    match format {
        MeshFormat::Obj => mesh.write_obj(f)?,
        MeshFormat::Ply => mesh.write_ply(f)?,
    }
    Ok(())
}

fn extension(format: MeshFormat) -> &'static str {
    match format {
        MeshFormat::Obj => "obj",
        MeshFormat::Ply => "ply",
    }
}

/// Canonical mesh of a prediction placed in the camera frame.
fn placed_mesh(model: &SceneModel, camera: &Camera, obj: &ObjectPrediction, res: usize) -> Result<Mesh> {
    let scaffold = unpack_shape_code(&obj.shape_code, model.components())?;
    let mesh = model.decode_mesh(&scaffold, obj.latents.as_deref(), res)?;
    let center = object_center(&obj.pose, obj.box_center(), camera)?;
    let rot = yaw_matrix(obj.pose.theta);
    Ok(mesh.transformed(|x| place_point(center, &rot, obj.pose.s, x)))
}

fn merge(meshes: &[Mesh]) -> Mesh {
    let mut out = Mesh::default();
    for m in meshes {
        let base = out.vertices.len() as u32;
        out.vertices.extend_from_slice(&m.vertices);
        out.triangles.extend(m.triangles.iter().map(|t| t.map(|i| i + base)));
    }
    out
}

#[derive(Serialize)]
struct RunManifest {
    source_revision: String,
    config_hash: String,
    dataset_hash: String,
    metrics: String,
    checkpoints: Vec<String>,
    train_scenes: usize,
    seconds: f64,
}

fn cmd_dataset(common: &Common, out: &Path) -> Result<()> {
    let mut cfg = load_config(common, None)?;
    if let Some(s) = common.seed {
        cfg.dataset.seed = s;
    }
    cfg.validate()?;
    init_threads(&cfg)?;
    let t = Instant::now();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = build_dataset(&cfg, out, common.force)?;
    cfg.save(&out.join(RUN_CONFIG))?;
    println!(
        "wrote {} train and {} held-out scenes ({} objects) to {} in {:.1}s",
        manifest.train_scenes,
        manifest.val_scenes,
        manifest.total_objects,
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_train(common: &Common, dataset: &Path, out: &Path, no_isa: bool, regression: bool, no_joint: bool) -> Result<()> {
    let mut cfg = load_config(common, None)?;
    if no_isa {
        cfg.model.pose_net.isa = false;
    }
    if regression {
        cfg.model.pose_objective = PoseObjective::Regression1Step;
    }
    if no_joint {
        cfg.train.losses.align = false;
    }
    let dataset_hash = adopt_dataset(&mut cfg, dataset)?;
    init_threads(&cfg)?;
    claim_outputs(out, &[RUN_CONFIG, "metrics.csv", MODEL_DIR, "run.json"], common.force)?;
    if common.force {
        let _ = fs::remove_file(out.join("metrics.csv"));
    }
    cfg.save(&out.join(RUN_CONFIG))?;
    let t = Instant::now();
    let records = load_split(dataset, Split::Train)?;
    let camera = cfg.scene.camera()?;
    let mut model = SceneModel::new(&cfg.model, camera, &templates_for(cfg.scene.variants), cfg.seed)?;
    let scenes = prepare_scenes(&model, &records, cfg.align.max_targets, cfg.seed)?;
    let mut trainer = Trainer::new(&cfg, cfg.seed)?.with_log(MetricLog::open(&out.join("metrics.csv"))?);
    let result = trainer.train_all(&mut model, &scenes);
    trainer.flush()?;
    result?;
    model.save(&out.join(MODEL_DIR))?;
    write_json(
        &out.join("run.json"),
        &RunManifest {
            source_revision: format!("sde {}", env!("CARGO_PKG_VERSION")),
            config_hash: cfg.hash(),
            dataset_hash,
            metrics: "metrics.csv".into(),
            checkpoints: ["pose.sde", "shape.sde", "latent.sde", "occupancy.sde"]
                .iter()
                .map(|f| format!("{MODEL_DIR}/{f}"))
                .collect(),
            train_scenes: records.len(),
            seconds: t.elapsed().as_secs_f64(),
        },
    )?;
    println!("trained on {} scenes in {:.1}s; run written to {}", records.len(), t.elapsed().as_secs_f64(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleReport {
    mode: &'static str,
    steps: usize,
    guidance_weight: f64,
    seed: u64,
    scenes: usize,
    objects: usize,
    meshes: usize,
    empty_meshes: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    common: &Common,
    checkpoint: &Path,
    dataset: Option<&Path>,
    split: Split,
    out: &Path,
    steps: Option<usize>,
    guidance_weight: Option<f64>,
    unconditional: bool,
    count: usize,
    no_meshes: bool,
    format: MeshFormat,
) -> Result<()> {
    let mut cfg = load_config(common, Some(&checkpoint.join(RUN_CONFIG)))?;
    if let Some(s) = steps {
        cfg.diffusion.sample_steps = s;
    }
    if let Some(w) = guidance_weight {
        cfg.diffusion.guidance_weight = w;
    }
    cfg.validate()?;
    init_threads(&cfg)?;
    let model = SceneModel::load(&checkpoint.join(MODEL_DIR), Some(&cfg.model))?;
    claim_outputs(out, &["predictions.json", "report.json", "meshes"], common.force)?;
    cfg.save(&out.join(RUN_CONFIG))?;
    let sched = schedule(&cfg)?;
    let opts = SampleOptions {
        steps: cfg.diffusion.sample_steps,
        eta: cfg.diffusion.eta,
        guidance_weight: cfg.diffusion.guidance_weight,
        unconditional,
        seed: cfg.seed,
    };
    let res = cfg.eval.mesh_resolution;
    let mesh_dir = out.join("meshes");
    if !no_meshes {
        fs::create_dir_all(&mesh_dir)?;
    }
    let ext = extension(format);
    let mut report = SampleReport {
        mode: if unconditional { "unconditional" } else { "conditional" },
        steps: opts.steps,
        guidance_weight: opts.guidance_weight,
        seed: opts.seed,
        scenes: 0,
        objects: 0,
        meshes: 0,
        empty_meshes: 0,
    };
    if unconditional {
        let codes = model.sample_shapes(&sched, None, count, &opts)?;
        let latents = model.sample_latents(&sched, &codes, &opts)?;
        let mut shapes = Vec::with_capacity(count);
        for (k, (code, z)) in codes.iter().zip(&latents).enumerate() {
            let raw = model.shape_norm.denormalize(code);
            if !no_meshes {
                let mesh = model.decode_mesh(&unpack_shape_code(&raw, model.components())?, Some(z), res)?;
                report.meshes += 1;
                if mesh.is_empty() {
                    report.empty_meshes += 1;
                } else {
                    write_mesh(&mesh, &mesh_dir.join(format!("shape_{k:03}.{ext}")), format)?;
                }
            }
            shapes.push(serde_json::json!({ "shape_code": raw, "latents": z }));
        }
        report.objects = count;
        write_json(&out.join("predictions.json"), &shapes)?;
    } else {
        let dataset = dataset.context("--dataset is required for conditional sampling")?;
        let records = load_split(dataset, split)?;
        if records.is_empty() {
            bail!("the {} split of {} is empty", split.name(), dataset.display());
        }
        let input: Vec<_> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (i, scene_observations(&r.spec, &r.observation)))
            .collect();
        let preds = model.predict(&sched, &input, &opts)?;
        report.scenes = preds.len();
        report.objects = preds.iter().map(|p| p.objects.len()).sum();
        if !no_meshes {
            for p in &preds {
                for (j, o) in p.objects.iter().enumerate() {
                    let mesh = placed_mesh(&model, &model.camera, o, res)?;
                    report.meshes += 1;
                    if mesh.is_empty() {
                        report.empty_meshes += 1;
                    } else {
                        write_mesh(&mesh, &mesh_dir.join(format!("scene_{:05}_obj_{j:02}.{ext}", p.scene)), format)?;
                    }
                }
            }
        }
        write_json(&out.join("predictions.json"), &preds)?;
    }
    write_json(&out.join("report.json"), &report)?;
    println!(
        "sampled {} objects ({} meshes, {} empty) into {}",
        report.objects,
        report.meshes,
        report.empty_meshes,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    dataset: &Path,
    split: Split,
    predictions: Option<&Path>,
    out: &Path,
    iou: Option<f64>,
    tau: Option<f64>,
) -> Result<()> {
    let mut cfg = load_config(common, Some(&checkpoint.join(RUN_CONFIG)))?;
    if let Some(v) = iou {
        cfg.eval.iou_threshold = v;
    }
    if let Some(v) = tau {
        cfg.eval.fscore_tau = v;
    }
    cfg.validate()?;
    init_threads(&cfg)?;
    let model = SceneModel::load(&checkpoint.join(MODEL_DIR), Some(&cfg.model))?;
    let records = load_split(dataset, split)?;
    let pairs = indexed(&records);
    let preds: Vec<ScenePrediction> = match predictions {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => predictions_from_ground_truth(&pairs),
    };
    let unknown: Vec<usize> = preds.iter().map(|p| p.scene).filter(|&s| s >= records.len()).collect();
    if !unknown.is_empty() {
        eprintln!("warning: ignoring predictions for scenes absent from the split: {unknown:?}");
    }
    claim_outputs(out, &["metrics.csv", "report.json"], common.force)?;
    cfg.save(&out.join(RUN_CONFIG))?;
    let report = evaluate(&model, &preds, &pairs, &EvalOptions::from_config(&cfg))?;
    if !report.missing.is_empty() {
        eprintln!(
            "warning: {} scenes have no prediction and are excluded: {:?}",
            report.missing.len(),
            report.missing
        );
    }
    fs::write(out.join("metrics.csv"), report.to_csv())?;
    write_json(&out.join("report.json"), &report)?;
    print!("{}", report.to_csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_export(
    common: &Common,
    dataset: &Path,
    split: Split,
    scene: Option<usize>,
    predictions: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
    format: MeshFormat,
) -> Result<()> {
    let fallback = checkpoint.map(|c| c.join(RUN_CONFIG));
    let cfg = load_config(common, fallback.as_deref())?;
    init_threads(&cfg)?;
    let manifest = read_manifest(dataset)?;
    let records = load_split(dataset, split)?;
    let selected: Vec<usize> = match scene {
        Some(s) if s < records.len() => vec![s],
        Some(s) => bail!("scene {s} is outside the {} split ({} scenes)", split.name(), records.len()),
        None => (0..records.len()).collect(),
    };
    let model = match checkpoint {
        Some(c) => SceneModel::load(&c.join(MODEL_DIR), None)?,
        None => SceneModel::new(&cfg.model, manifest.scene.camera()?, &[], 0)?,
    };
    let preds: Option<Vec<ScenePrediction>> = match predictions {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => None,
    };
    fs::create_dir_all(out)?;
    let ext = extension(format);
    let res = cfg.eval.mesh_resolution;
    let gt = predictions_from_ground_truth(&indexed(&records));
    for &i in &selected {
        let stem = format!("{}_{i:05}", split.name());
        for f in [format!("{stem}.dpt"), format!("{stem}.ins"), format!("{stem}_gt.{ext}")] {
            if out.join(&f).exists() && !common.force {
                bail!("{} already exists; pass --force to overwrite", out.join(f).display());
            }
        }
        let entry = manifest
            .scenes
            .iter()
            .find(|e| e.split == split && e.index == i)
            .context("scene missing from the manifest")?;
        fs::copy(dataset.join(&entry.depth.path), out.join(format!("{stem}.dpt")))?;
        fs::copy(dataset.join(&entry.instance.path), out.join(format!("{stem}.ins")))?;
        let cam = records[i].spec.camera;
        let meshes = gt[i]
            .objects
            .iter()
            .map(|o| placed_mesh(&model, &cam, o, res))
            .collect::<Result<Vec<_>>>()?;
        write_mesh(&merge(&meshes), &out.join(format!("{stem}_gt.{ext}")), format)?;
        if let Some(p) = preds.as_ref().and_then(|ps| ps.iter().find(|p| p.scene == i)) {
            let meshes = p
                .objects
                .iter()
                .map(|o| placed_mesh(&model, &cam, o, res))
                .collect::<Result<Vec<_>>>()?;
            write_mesh(&merge(&meshes), &out.join(format!("{stem}_pred.{ext}")), format)?;
        }
    }
    println!("exported {} scenes to {}", selected.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Dataset { common, out } => cmd_dataset(common, out),
        Command::Train {
            common,
            dataset,
            out,
            no_isa,
            regression_1step,
            no_joint,
        } => cmd_train(common, dataset, out, *no_isa, *regression_1step, *no_joint),
        Command::Sample {
            common,
            checkpoint,
            dataset,
            split,
            out,
            steps,
            guidance_weight,
            unconditional,
            count,
            no_meshes,
            format,
        } => cmd_sample(
            common,
            checkpoint,
            dataset.as_deref(),
            (*split).into(),
            out,
            *steps,
            *guidance_weight,
            *unconditional,
            *count,
            *no_meshes,
            *format,
        ),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            split,
            predictions,
            out,
            iou_thresh,
            fscore_tau,
        } => cmd_eval(common, checkpoint, dataset, (*split).into(), predictions.as_deref(), out, *iou_thresh, *fscore_tau),
        Command::Export {
            common,
            dataset,
            split,
            scene,
            predictions,
            checkpoint,
            out,
            format,
        } => cmd_export(common, dataset, (*split).into(), *scene, predictions.as_deref(), checkpoint.as_deref(), out, *format),
    }
}
