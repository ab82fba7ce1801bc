use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sde_core::config::RunConfig;
use sde_core::dataset::{
    build_dataset, decode_depth, decode_instances, encode_depth, encode_instances, generate_split, load_split, read_manifest, Split,
};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.dataset.train_scenes = 4;
    cfg.dataset.val_scenes = 2;
    cfg
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

proptest! {
    #[test]
    fn depth_codec_round_trips(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let data: Vec<f32> = (0..w * h).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32) / 97.0 - 1.0).collect();
        let (w2, h2, back) = decode_depth(&encode_depth(w, h, &data)).unwrap();
        prop_assert_eq!((w2, h2), (w, h));
        prop_assert_eq!(back, data);
    }

    #[test]
    fn instance_codec_round_trips(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let data: Vec<u16> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) % 9) as u16).collect();
        let (w2, h2, back) = decode_instances(&encode_instances(w, h, &data)).unwrap();
        prop_assert_eq!((w2, h2), (w, h));
        prop_assert_eq!(back, data);
    }
}

#[test]
fn truncated_maps_are_rejected() {
    let bytes = encode_depth(3, 2, &[0.0; 6]);
    assert!(decode_depth(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_instances(&bytes).is_err(), "depth magic must not decode as instances");
}

#[test]
fn splits_are_deterministic_and_disjoint() {
    let cfg = tiny();
    let a = generate_split(&cfg, Split::Train).unwrap();
    let b = generate_split(&cfg, Split::Train).unwrap();
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.spec, y.spec);
        assert_eq!(x.observation.depth, y.observation.depth);
    }
    let val = generate_split(&cfg, Split::Val).unwrap();
    assert_eq!(val.len(), 2);
    for r in &val {
        for o in &r.spec.objects {
            assert!((cfg.dataset.val_variants[0]..cfg.dataset.val_variants[1]).contains(&o.variant));
        }
    }
}

#[test]
fn build_is_byte_identical_and_loads_back() {
    let cfg = tiny();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m = build_dataset(&cfg, d1.path(), false).unwrap();
    build_dataset(&cfg, d2.path(), false).unwrap();
    assert_eq!(tree_bytes(d1.path()), tree_bytes(d2.path()));
    assert_eq!(m.scenes.len(), 6);
    assert_eq!(read_manifest(d1.path()).unwrap().config_hash, m.config_hash);

    let fresh = generate_split(&cfg, Split::Train).unwrap();
    let loaded = load_split(d1.path(), Split::Train).unwrap();
    assert_eq!(loaded.len(), fresh.len());
    for (x, y) in loaded.iter().zip(&fresh) {
        assert_eq!(x.spec, y.spec);
        assert_eq!(x.observation.instance, y.observation.instance);
        assert_eq!(x.observation.patches, y.observation.patches);
    }
}

#[test]
fn existing_dataset_needs_force() {
    let cfg = tiny();
    let d = tempfile::tempdir().unwrap();
    build_dataset(&cfg, d.path(), false).unwrap();
    let keep = d.path().join("notes.txt");
    fs::write(&keep, "mine").unwrap();
    let err = build_dataset(&cfg, d.path(), false).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    build_dataset(&cfg, d.path(), true).unwrap();
    assert_eq!(fs::read_to_string(&keep).unwrap(), "mine", "force only replaces dataset files");
}

#[test]
fn corrupted_file_fails_checksum() {
    let cfg = tiny();
    let d = tempfile::tempdir().unwrap();
    let m = build_dataset(&cfg, d.path(), false).unwrap();
    let path = d.path().join(&m.scenes[0].depth.path);
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    fs::write(&path, bytes).unwrap();
    assert!(load_split(d.path(), Split::Train).is_err());
}
