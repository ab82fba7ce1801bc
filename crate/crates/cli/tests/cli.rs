use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sde_core::config::RunConfig;

fn sde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sde"))
        .args(args)
        .env("SDE_THREADS", "1")
        .output()
        .expect("sde binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sde(args);
    assert!(out.status.success(), "sde {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = sde(args);
    assert!(!out.status.success(), "sde {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::desk();
    cfg.dataset.train_scenes = 2;
    cfg.dataset.val_scenes = 2;
    cfg.train.pose_epochs = 1;
    cfg.train.shape_epochs = 1;
    cfg.train.joint_epochs = 1;
    cfg.train.occupancy_steps = 2;
    cfg.train.latent_steps = 2;
    cfg.eval.mesh_resolution = 16;
    cfg.eval.surface_samples = 500;
    cfg.align.eval_samples = 20;
    let path = dir.join("tiny.json");
    cfg.save(&path).unwrap();
    path.display().to_string()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
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

#[test]
fn dataset_rebuild_is_byte_identical_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["dataset", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["dataset", "--config", &cfg, "--out", b.to_str().unwrap()]);
    assert_eq!(files(&a), files(&b));
    assert!(a.join("config.json").exists());

    let err = fail(&["dataset", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(err.contains("--force"), "{err}");
    ok(&["dataset", "--config", &cfg, "--out", a.to_str().unwrap(), "--force"]);
    assert_eq!(files(&a), files(&b));

    ok(&["dataset", "--config", &cfg, "--out", b.to_str().unwrap(), "--force", "--seed", "5"]);
    assert_ne!(files(&a), files(&b));
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    let mut cfg = RunConfig::desk();
    cfg.diffusion.drop_probability = 1.5;
    fs::write(&path, cfg.to_json()).unwrap();
    let err = fail(&["dataset", "--config", path.to_str().unwrap(), "--out", tmp.path().join("d").to_str().unwrap()]);
    assert!(err.contains("diffusion.drop_probability"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
    v["train"]["epochs"] = serde_json::json!(3);
    fs::write(&path, v.to_string()).unwrap();
    let err = fail(&["dataset", "--config", path.to_str().unwrap(), "--out", tmp.path().join("d").to_str().unwrap()]);
    assert!(err.contains("epochs"), "{err}");
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_sde"))
        .args(["dataset", "--out", "/nonexistent/never"])
        .env("SDE_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SDE_THREADS"));
}

#[test]
fn train_sample_eval_export_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let p = |name: &str| tmp.path().join(name).display().to_string();
    ok(&["dataset", "--config", &cfg, "--out", &p("data")]);

    ok(&["train", "--config", &cfg, "--dataset", &p("data"), "--out", &p("run")]);
    let run = tmp.path().join("run");
    for f in ["config.json", "metrics.csv", "run.json", "model/model.json", "model/pose.sde"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(log.starts_with("stage,step,epoch,loss,pose,shape,align"));
    assert!(log.lines().any(|l| l.starts_with("joint,")));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let err = fail(&["train", "--config", &cfg, "--dataset", &p("data"), "--out", &p("run")]);
    assert!(err.contains("--force"), "{err}");

    ok(&["train", "--config", &cfg, "--dataset", &p("data"), "--out", &p("ablate"), "--no-isa", "--regression-1step", "--no-joint"]);
    let ablated = RunConfig::load(&tmp.path().join("ablate/config.json")).unwrap();
    assert!(!ablated.model.pose_net.isa);
    assert!(!ablated.train.losses.align);

    ok(&["sample", "--checkpoint", &p("run"), "--dataset", &p("data"), "--out", &p("samples"), "--steps", "3"]);
    let preds = tmp.path().join("samples/predictions.json");
    assert!(preds.exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("samples/report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 3);

    ok(&["sample", "--checkpoint", &p("run"), "--unconditional", "--count", "3", "--out", &p("uncond"), "--steps", "2"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("uncond/report.json")).unwrap()).unwrap();
    assert_eq!(report["meshes"], 3);

    let csv = ok(&["eval", "--checkpoint", &p("run"), "--dataset", &p("data"), "--predictions", preds.to_str().unwrap(), "--out", &p("eval")]);
    assert!(csv.starts_with("class,objects,iou3d,ap_at_15,cd_x1e3,fscore,l_align"));
    assert!(tmp.path().join("eval/metrics.csv").exists());
    assert!(tmp.path().join("eval/report.json").exists());

    // one scene short: reported on stderr and excluded
    let mut v: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&preds).unwrap()).unwrap();
    v.truncate(1);
    let short = tmp.path().join("short.json");
    fs::write(&short, serde_json::to_string(&v).unwrap()).unwrap();
    let out = sde(&["eval", "--checkpoint", &p("run"), "--dataset", &p("data"), "--predictions", short.to_str().unwrap(), "--out", &p("eval2")]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no prediction"));

    ok(&["export", "--dataset", &p("data"), "--scene", "0", "--checkpoint", &p("run"), "--predictions", preds.to_str().unwrap(), "--out", &p("export")]);
    for f in ["val_00000.dpt", "val_00000.ins", "val_00000_gt.ply", "val_00000_pred.ply"] {
        assert!(tmp.path().join("export").join(f).exists(), "missing {f}");
    }
}
