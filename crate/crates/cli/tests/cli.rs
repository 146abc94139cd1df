use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vaeinfo_core::grd;
use vaeinfo_core::raster::{RasterImage, Space};

const TINY: &str = r#"
seed = 3

[dataset]
n_tiles = 12
size = 8

[network]
width_scale = 0.125
d_a = 6
d_c = 6
m = 3
ae_depth = 3
disc_depth = 2

[train]
epochs = 1
batch_size = 2
decay_segments_per_epoch = 1

[eval]
figures = 2

[edit]
conditions = 2
count = 100
"#;

fn vaeinfo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaeinfo")).current_dir(dir).args(args).env_remove("VAEINFO_DEVICE").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vaeinfo(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(vaeinfo(dir.path(), &["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(vaeinfo(dir.path(), &["train", "--model", "gan"]).status.code(), Some(2));
    assert_eq!(vaeinfo(dir.path(), &["edit", "--ckpt", "c", "--alphas", "1:2"]).status.code(), Some(2));

    let crm = RasterImage::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0], Space::Count).unwrap();
    grd::write(&crm, dir.path().join("crm.grd")).unwrap();
    let out = vaeinfo(dir.path(), &["rasterize", "--mode", "hcrm", "--input", "crm.grd", "--out", "h.grd"]);
    assert_eq!(out.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "usage");
}

#[test]
fn failures_print_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = vaeinfo(dir.path(), &["generate", "--ckpt", "missing.ckpt", "--roads", "r.grd", "--out", "o.grd"]);
    assert_eq!(out.status.code(), Some(1));
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "io");
    fs::write(dir.path().join("bad.toml"), "nonsense = 1\n").unwrap();
    let out = vaeinfo(dir.path(), &["--config", "bad.toml", "simulate", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unsupported_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vaeinfo"))
        .current_dir(dir.path())
        .args(["simulate", "--out", "d", "--tiles", "10", "--size", "8"])
        .env("VAEINFO_DEVICE", "cuda")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn rasterize_collapses_hcrm() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = RasterImage::zeros(2, 2, 12, Space::Count);
    h.set(0, 1, 3, 2.0);
    h.set(0, 1, 7, 1.0);
    grd::write(&h, dir.path().join("h.grd")).unwrap();
    ok(&vaeinfo(dir.path(), &["rasterize", "--mode", "crm", "--input", "h.grd", "--out", "c.grd"]));
    let c = grd::read(dir.path().join("c.grd")).unwrap();
    assert_eq!(c.values, vec![0.0, 3.0, 0.0, 0.0]);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("run.toml"), TINY).unwrap();
    let c = ["--config", "run.toml"];
    fn with<'a>(c: &[&'a str], rest: &[&'a str]) -> Vec<&'a str> {
        c.iter().chain(rest).copied().collect()
    }
    let args = |rest: &[&'static str]| with(&c, rest);

    ok(&vaeinfo(p, &args(&["simulate", "--out", "data", "--probes"])));
    assert!(p.join("data/manifest.json").exists());
    ok(&vaeinfo(p, &args(&["train", "--data", "data", "--model", "vae-info-cgan", "--out", "runs/vae-info-cgan"])));
    ok(&vaeinfo(p, &args(&["train", "--data", "data", "--model", "cgan_plc", "--out", "runs/cgan-plc"])));
    assert!(p.join("runs/vae-info-cgan/checkpoints/epoch-0001.ckpt").exists());
    assert!(p.join("runs/vae-info-cgan/train_log.jsonl").exists());

    let road = fs::read_dir(p.join("data/roads")).unwrap().next().unwrap().unwrap().path();
    let road = road.to_str().unwrap();
    let ckpt = "runs/vae-info-cgan/final.ckpt";
    for o in ["g1.grd", "g2.grd"] {
        ok(&vaeinfo(p, &with(&c, &["generate", "--ckpt", ckpt, "--roads", road, "--seed", "7", "--out", o])));
    }
    assert_eq!(fs::read(p.join("g1.grd")).unwrap(), fs::read(p.join("g2.grd")).unwrap());
    let g = grd::read(p.join("g1.grd")).unwrap();
    assert_eq!((g.h, g.w, g.c, g.space), (8, 8, 1, Space::Lognorm));

    let out = vaeinfo(p, &args(&["evaluate", "--data", "data", "--ckpt-dir", "runs", "--out", "report"]));
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("report/report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().filter(|r| !r["apnd"].is_null()).count(), 2);
    assert!(p.join("report/figures/vae-info-cgan/000.png").exists());
    assert!(p.join("report/figures/vae-info-cgan/000.grd").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("VAE-Info-cGAN"));

    ok(&vaeinfo(p, &args(&["edit", "--ckpt", ckpt, "--data", "data", "--alphas", "-2:2:5", "--out", "edit"])));
    let study: serde_json::Value = serde_json::from_slice(&fs::read(p.join("edit/edit.json")).unwrap()).unwrap();
    let conds = study["conditions"].as_array().unwrap();
    assert_eq!(conds.len(), 2);
    assert_eq!(conds[0]["sweep"].as_array().unwrap().len(), 5);

    ok(&vaeinfo(p, &args(&["change-dataset", "--ckpt", ckpt, "--data", "data", "--k", "2", "--out", "change"])));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(p.join("change/manifest.json")).unwrap()).unwrap();
    let emitted = m["triples"].as_array().unwrap().len() as u64;
    assert_eq!(emitted + m["skipped"].as_u64().unwrap(), 2 * m["examples"].as_u64().unwrap());
}
