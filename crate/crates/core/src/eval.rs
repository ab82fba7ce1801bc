//! Scene-level evaluation: per-object 3D IoU, AP at an IoU threshold,
//! canonical-frame Chamfer distance and F-score, and the alignment metric.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::align::{alignment_noise, alignment_targets, surface_alignment_loss, AlignContext, AlignObject, DepthObservation};
use crate::config::RunConfig;
use crate::dataset::SceneRecord;
use crate::error::{invalid, Result};
use crate::mesh::{chamfer_distance, f_score, surface_sample, Mesh};
use crate::model::{ObjectPrediction, SceneModel, ScenePrediction};
use crate::pose::{average_precision, iou3d, Box3, Detection, GroundTruthBox};
use crate::scenes::{CLASS_NAMES, NUM_CLASSES};
use crate::shape::pack_shape_code;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub fscore_tau: f64,
    pub mesh_resolution: usize,
    pub surface_samples: usize,
    /// Samples per Gaussian for the alignment metric.
    pub align_samples: usize,
    /// Depth points per object kept for the alignment metric.
    pub align_targets: usize,
    /// Skip mesh decoding (CD and F-score are reported as NaN).
    pub skip_shapes: bool,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            iou_threshold: cfg.eval.iou_threshold,
            fscore_tau: cfg.eval.fscore_tau,
            mesh_resolution: cfg.eval.mesh_resolution,
            surface_samples: cfg.eval.surface_samples,
            align_samples: cfg.align.eval_samples,
            align_targets: 4096,
            skip_shapes: false,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectMetrics {
    pub scene: usize,
    pub object: usize,
    pub class: usize,
    pub iou: f64,
    /// `None` when shapes were skipped, the predicted mesh is empty, or the
    /// reference mesh is empty at the evaluation resolution.
    pub chamfer: Option<f64>,
    pub fscore: Option<f64>,
    pub empty_mesh: bool,
    /// Unweighted alignment term; `None` for objects without depth pixels.
    pub align: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub objects: usize,
    pub iou: f64,
    /// AP as a fraction.
    pub ap: f64,
    pub chamfer: f64,
    pub fscore: f64,
    pub align: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassMetrics>,
    /// IoU, CD and F averaged over objects; AP over classes; alignment over scenes.
    pub overall: ClassMetrics,
    pub empty_meshes: usize,
    /// Ground-truth scenes without a prediction, excluded from every metric.
    pub missing: Vec<usize>,
    pub objects: Vec<ObjectMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    pub fn csv_header(&self) -> String {
        format!("class,objects,iou3d,ap_at_{},cd_x1e3,fscore,l_align", (self.iou_threshold * 100.0).round())
    }

    /// Per-class rows then an `all` row; AP in percent, CD × 10³.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header() + "\n";
        for r in self.per_class.iter().chain(std::iter::once(&self.overall)) {
            out += &format!(
                "{},{},{:.4},{:.2},{:.4},{:.2},{:.6}\n",
                r.class,
                r.objects,
                r.iou,
                100.0 * r.ap,
                1e3 * r.chamfer,
                r.fscore,
                r.align
            );
        }
        out
    }
}

fn template_rng(seed: u64, key: (usize, usize)) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((key.0 * 1000 + key.1) as u64);
    rng
}

/// Ground truth in prediction form (analytic shapes, no latents).
pub fn predictions_from_ground_truth(records: &[(usize, &SceneRecord)]) -> Vec<ScenePrediction> {
    records
        .iter()
        .map(|(i, r)| ScenePrediction {
            scene: *i,
            objects: r
                .spec
                .objects
                .iter()
                .map(|o| ObjectPrediction {
                    class: o.class,
                    box2d: o.box2d,
                    pose: o.pose,
                    shape_code: pack_shape_code(&o.scaffold),
                    latents: None,
                })
                .collect(),
        })
        .collect()
}

/// Scores predictions against ground-truth scenes keyed by scene index.
pub fn evaluate(model: &SceneModel, predictions: &[ScenePrediction], records: &[(usize, &SceneRecord)], opts: &EvalOptions) -> Result<EvalReport> {
    let by_scene: HashMap<usize, &ScenePrediction> = predictions.iter().map(|p| (p.scene, p)).collect();
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for (i, r) in records {
        match by_scene.get(i) {
            Some(p) => {
                if p.objects.len() != r.spec.objects.len() {
                    return invalid(
                        "evaluation",
                        format!("scene {i}: {} predicted objects for {} ground-truth objects", p.objects.len(), r.spec.objects.len()),
                    );
                }
                pairs.push((*i, *r, *p));
            }
            None => missing.push(*i),
        }
    }
    let g = model.components();
    let cam = &model.camera;

    // boxes and AP
    let mut objects = Vec::new();
    let mut detections = Vec::new();
    let mut gts = Vec::new();
    for &(scene, rec, pred) in &pairs {
        for (j, (gt, p)) in rec.spec.objects.iter().zip(&pred.objects).enumerate() {
            let gt_box = gt.box3(cam)?;
            let p_box = Box3::from_pose(&p.pose, gt.box_center(), cam)?;
            objects.push(ObjectMetrics {
                scene,
                object: j,
                class: gt.class,
                iou: iou3d(&gt_box, &p_box)?,
                chamfer: None,
                fscore: None,
                empty_mesh: false,
                align: None,
            });
            // Samples carry no score; detections tie and rank in scene order.
            detections.push(Detection {
                scene,
                class: p.class,
                bbox: p_box,
                confidence: 1.0,
            });
            gts.push(GroundTruthBox {
                scene,
                class: gt.class,
                bbox: gt_box,
            });
        }
    }
    let ap = average_precision(&detections, &gts, opts.iou_threshold)?;

    // shapes, in the canonical frame
    if !opts.skip_shapes {
        let keys: Vec<(usize, usize)> = {
            let mut k: Vec<_> = pairs
                .iter()
                .flat_map(|(_, r, _)| r.spec.objects.iter().map(|o| (o.class, o.variant)))
                .collect();
            k.sort_unstable();
            k.dedup();
            k
        };
        // a template too thin for the grid has no reference surface; its objects go unscored
        let gt_points: HashMap<(usize, usize), Option<Vec<[f64; 3]>>> = keys
            .par_iter()
            .map(|&key| -> Result<_> {
                let scaffold = pairs
                    .iter()
                    .flat_map(|(_, r, _)| r.spec.objects.iter())
                    .find(|o| (o.class, o.variant) == key)
                    .map(|o| &o.scaffold)
                    .expect("key comes from these objects");
                let mesh = model.decode_mesh(scaffold, None, opts.mesh_resolution)?;
                if mesh.is_empty() || mesh.area() <= 0.0 {
                    return Ok((key, None));
                }
                Ok((key, Some(surface_sample(&mesh, opts.surface_samples, &mut template_rng(opts.seed, key))?)))
            })
            .collect::<Result<_>>()?;
        let flat: Vec<(&ObjectPrediction, (usize, usize))> = pairs
            .iter()
            .flat_map(|(_, r, p)| p.objects.iter().zip(r.spec.objects.iter().map(|o| (o.class, o.variant))))
            .collect();
        let shape_scores: Vec<Option<Option<(f64, f64)>>> = flat
            .par_iter()
            .map(|(p, key)| -> Result<_> {
                let Some(gt) = &gt_points[key] else {
                    return Ok(None);
                };
                let scaffold = p.scaffold(g)?;
                let mesh: Mesh = model.decode_mesh(&scaffold, p.latents.as_deref(), opts.mesh_resolution)?;
                if mesh.is_empty() || mesh.area() <= 0.0 {
                    return Ok(Some(None));
                }
                // same stream as the ground truth: identical meshes score exactly 0 / 100
                let pts = surface_sample(&mesh, opts.surface_samples, &mut template_rng(opts.seed, *key))?;
                Ok(Some(Some((chamfer_distance(&pts, gt)?, f_score(&pts, gt, opts.fscore_tau)?))))
            })
            .collect::<Result<_>>()?;
        for (m, s) in objects.iter_mut().zip(shape_scores) {
            match s {
                None => {}
                Some(Some((cd, f))) => {
                    m.chamfer = Some(cd);
                    m.fscore = Some(f);
                }
                Some(None) => {
                    m.empty_mesh = true;
                    m.fscore = Some(0.0);
                }
            }
        }
    }

    // alignment metric against the observed depth
    let ctx = AlignContext {
        camera: cam,
        pose_norm: &model.pose_norm,
        shape_norm: &model.shape_norm,
        components: g,
        m: opts.align_samples,
    };
    let scene_terms: Vec<Vec<Option<f64>>> = pairs
        .par_iter()
        .map(|&(scene, rec, pred)| -> Result<_> {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(scene as u64);
            let depth = DepthObservation::from_render(rec.spec.camera, &rec.observation)?;
            let targets: Vec<_> = alignment_targets(&depth, rec.spec.objects.len())
                .into_iter()
                .map(|mut t| {
                    if t.len() > opts.align_targets {
                        t.shuffle(&mut rng);
                        t.truncate(opts.align_targets);
                    }
                    t
                })
                .collect();
            let poses: Vec<[f64; 7]> = pred.objects.iter().map(|p| model.pose_norm.normalize(&p.pose)).collect();
            let shapes: Vec<Vec<f64>> = pred.objects.iter().map(|p| model.shape_norm.normalize(&p.shape_code)).collect();
            let objs: Vec<AlignObject> = pred
                .objects
                .iter()
                .enumerate()
                .map(|(j, p)| AlignObject {
                    pose: &poses[j],
                    shape: &shapes[j],
                    box_center: p.box_center(),
                })
                .collect();
            let noise = alignment_noise(objs.len(), g, opts.align_samples, &mut rng);
            Ok(surface_alignment_loss(&ctx, &objs, &targets, &noise, 1.0)?.terms)
        })
        .collect::<Result<_>>()?;
    let mut k = 0;
    for terms in &scene_terms {
        for t in terms {
            objects[k].align = *t;
            k += 1;
        }
    }
    let scene_align = mean(scene_terms.iter().filter_map(|terms| {
        let vis: Vec<f64> = terms.iter().flatten().copied().collect();
        (!vis.is_empty()).then(|| vis.iter().sum::<f64>() / vis.len() as f64)
    }));

    let summarize = |name: String, sel: &dyn Fn(&ObjectMetrics) -> bool, ap: f64| -> ClassMetrics {
        let objs: Vec<&ObjectMetrics> = objects.iter().filter(|o| sel(o)).collect();
        ClassMetrics {
            class: name,
            objects: objs.len(),
            iou: mean(objs.iter().map(|o| o.iou)),
            ap,
            chamfer: mean(objs.iter().filter_map(|o| o.chamfer)),
            fscore: mean(objs.iter().filter_map(|o| o.fscore)),
            align: mean(objs.iter().filter_map(|o| o.align)),
        }
    };
    let mut per_class = Vec::new();
    for (c, name) in CLASS_NAMES.iter().enumerate().take(NUM_CLASSES) {
        if let Some(a) = ap.per_class.iter().find(|a| a.class == c) {
            per_class.push(summarize(name.to_string(), &|o| o.class == c, a.ap));
        }
    }
    let mut overall = summarize("all".to_string(), &|_| true, ap.mean);
    overall.align = scene_align;
    Ok(EvalReport {
        iou_threshold: opts.iou_threshold,
        per_class,
        overall,
        empty_meshes: objects.iter().filter(|o| o.empty_mesh).count(),
        missing,
        objects,
    })
}
