//! On-disk synthetic datasets: a JSON manifest plus, per scene, a DPT1 depth
//! map, an INS1 instance map and a JSON sidecar with the scene description.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, DatasetConfig, RunConfig};
use crate::error::{io_err, CoreError, Result};
use crate::scenes::{generate_scene, observation_patch, render_depth, scene_rng, Observation, SceneConfig, SceneSpec};

pub const DEPTH_MAGIC: &[u8; 4] = b"DPT1";
pub const INSTANCE_MAGIC: &[u8; 4] = b"INS1";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "sde-dataset-1";
/// Held-out scenes draw from RNG streams starting here, disjoint from training.
const VAL_STREAM_BASE: usize = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub observation: Observation,
}

/// Scene config of one split: held-out scenes use the held-out variants.
pub fn split_scene_config(cfg: &RunConfig, split: Split) -> SceneConfig {
    let mut sc = cfg.scene.clone();
    if split == Split::Val {
        sc.variants = cfg.dataset.val_variants;
    }
    sc
}

pub fn split_len(cfg: &DatasetConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.train_scenes,
        Split::Val => cfg.val_scenes,
    }
}

/// Generates and renders scene `index` of a split; pure in (seed, config, index).
pub fn generate_record(cfg: &RunConfig, split: Split, index: usize) -> Result<SceneRecord> {
    let sc = split_scene_config(cfg, split);
    let stream = match split {
        Split::Train => index,
        Split::Val => VAL_STREAM_BASE + index,
    };
    let mut rng = scene_rng(cfg.dataset.seed, stream);
    let spec = generate_scene(&mut rng, &sc)?;
    let observation = render_depth(&spec)?;
    Ok(SceneRecord { spec, observation })
}

/// All scenes of a split, generated in parallel per index.
pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<SceneRecord>> {
    (0..split_len(&cfg.dataset, split))
        .into_par_iter()
        .map(|i| generate_record(cfg, split, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub split: Split,
    pub index: usize,
    pub objects: usize,
    pub depth: FileEntry,
    pub instance: FileEntry,
    pub sidecar: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    /// SHA-256 of the canonical JSON of `(scene, dataset)`.
    pub config_hash: String,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub total_objects: usize,
    pub scenes: Vec<SceneEntry>,
}

pub fn dataset_config_hash(scene: &SceneConfig, dataset: &DatasetConfig) -> String {
    let canonical = serde_json::to_string(&(scene, dataset)).expect("config serializes");
    sha256_hex(canonical.as_bytes())
}

pub fn encode_depth(width: usize, height: usize, depth: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * depth.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in depth {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_instances(width: usize, height: usize, ids: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 2 * ids.len());
    out.extend_from_slice(INSTANCE_MAGIC);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in ids {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_header(bytes: &[u8], magic: &[u8; 4], elem: usize, format: &'static str) -> Result<(usize, usize)> {
    let bad = |msg: String| CoreError::Format { format, msg };
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(bad("missing magic header".into()));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(elem))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| bad(format!("{w}x{h} overflows")))?;
    if bytes.len() != expected {
        return Err(bad(format!("{w}x{h} needs {expected} bytes, found {}", bytes.len())));
    }
    Ok((w, h))
}

pub fn decode_depth(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let (w, h) = decode_header(bytes, DEPTH_MAGIC, 4, "DPT1")?;
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((w, h, data))
}

pub fn decode_instances(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let (w, h) = decode_header(bytes, INSTANCE_MAGIC, 2, "INS1")?;
    let data = bytes[12..].chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes"))).collect();
    Ok((w, h, data))
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path = root.join(rel);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(bytes).map_err(io_err(&path))?;
    Ok(FileEntry {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    })
}

fn read_file(root: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    let path = root.join(&entry.path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() as u64 != entry.bytes || sha256_hex(&bytes) != entry.sha256 {
        return Err(CoreError::Format {
            format: "dataset",
            msg: format!("{} does not match its manifest checksum", entry.path),
        });
    }
    Ok(bytes)
}

/// Files this module owns inside a dataset directory.
fn owned_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join(MANIFEST_FILE), dir.join(Split::Train.name()), dir.join(Split::Val.name())]
}

/// Builds both splits of `cfg` into `dir`. An existing dataset there is
/// replaced only with `force`.
pub fn build_dataset(cfg: &RunConfig, dir: &Path, force: bool) -> Result<DatasetManifest> {
    cfg.validate()?;
    let owned = owned_paths(dir);
    if owned.iter().any(|p| p.exists()) {
        if !force {
            return Err(CoreError::Invalid {
                what: "dataset",
                msg: format!("{} already holds a dataset; pass --force to overwrite", dir.display()),
            });
        }
        for p in &owned {
            if p.is_dir() {
                fs::remove_dir_all(p).map_err(io_err(p))?;
            } else if p.exists() {
                fs::remove_file(p).map_err(io_err(p))?;
            }
        }
    }
    let mut scenes = Vec::new();
    let mut total_objects = 0;
    for split in [Split::Train, Split::Val] {
        let records = generate_split(cfg, split)?;
        if records.is_empty() {
            continue;
        }
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for (index, rec) in records.iter().enumerate() {
            let stem = format!("{}/scene_{index:05}", split.name());
            let o = &rec.observation;
            let sidecar = serde_json::to_vec_pretty(&rec.spec)?;
            total_objects += rec.spec.objects.len();
            scenes.push(SceneEntry {
                split,
                index,
                objects: rec.spec.objects.len(),
                depth: write_file(dir, &format!("{stem}.dpt"), &encode_depth(o.width, o.height, &o.depth))?,
                instance: write_file(dir, &format!("{stem}.ins"), &encode_instances(o.width, o.height, &o.instance))?,
                sidecar: write_file(dir, &format!("{stem}.json"), &sidecar)?,
            });
        }
    }
    let manifest = DatasetManifest {
        format: FORMAT_TAG.to_string(),
        seed: cfg.dataset.seed,
        scene: cfg.scene.clone(),
        dataset: cfg.dataset,
        config_hash: dataset_config_hash(&cfg.scene, &cfg.dataset),
        train_scenes: cfg.dataset.train_scenes,
        val_scenes: cfg.dataset.val_scenes,
        total_objects,
        scenes,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.format != FORMAT_TAG {
        return Err(CoreError::Format {
            format: "dataset",
            msg: format!("unknown manifest format {:?}", m.format),
        });
    }
    Ok(m)
}

/// Reads one scene back, recomputing observation patches from the maps.
pub fn load_scene(dir: &Path, entry: &SceneEntry) -> Result<SceneRecord> {
    let spec: SceneSpec = serde_json::from_slice(&read_file(dir, &entry.sidecar)?)?;
    let (w, h, depth) = decode_depth(&read_file(dir, &entry.depth)?)?;
    let (wi, hi, instance) = decode_instances(&read_file(dir, &entry.instance)?)?;
    if (w, h) != (wi, hi) || (w, h) != (spec.camera.width, spec.camera.height) {
        return Err(CoreError::Format {
            format: "dataset",
            msg: format!("scene {} maps are {w}x{h} and {wi}x{hi}, camera is {}x{}", entry.index, spec.camera.width, spec.camera.height),
        });
    }
    let patches = spec
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| observation_patch(&depth, &instance, w, h, o.box2d, i))
        .collect();
    Ok(SceneRecord {
        spec,
        observation: Observation {
            width: w,
            height: h,
            depth,
            instance,
            patches,
        },
    })
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<SceneRecord>> {
    let manifest = read_manifest(dir)?;
    manifest
        .scenes
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_scene(dir, e))
        .collect()
}
