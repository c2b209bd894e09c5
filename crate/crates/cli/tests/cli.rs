use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use outpaint_core::Config;

fn outpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_outpaint"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn outpaint")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config() -> Config {
    let mut cfg = Config::toy();
    cfg.geometry.center_h = 16;
    cfg.geometry.center_w = 16;
    cfg.geometry.margin = 4;
    cfg.model.embed_dim = 8;
    cfg.discriminator.base_channels = 4;
    cfg.discriminator.layers = 3;
    cfg.train.batch = 2;
    cfg.train.steps = 3;
    cfg.train.checkpoint_every = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &Config) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

fn synth(dir: &Path, count: usize, size: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = outpaint(&["gen-synthetic", "--out", s(&data), "--count", &count.to_string(), "--size", &size.to_string(), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn gen_synthetic_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = outpaint(&["gen-synthetic", "--out", s(d), "--count", "3", "--size", "20", "--seed", "9"]);
        assert!(out.status.success());
    }
    for i in 0..3 {
        let name = format!("synth_{i:05}.png");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn train_outpaint_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 24);
    let cfg = write_config(dir.path(), &small_config());
    let run = dir.path().join("run");
    let out = outpaint(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--deterministic"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists() && run.join("step_000002.ckpt").exists());
    let trace = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    // a 16x16 centre image
    let center_dir = dir.path().join("center");
    let out = outpaint(&["gen-synthetic", "--out", s(&center_dir), "--count", "1", "--size", "16", "--seed", "1"]);
    assert!(out.status.success());
    let input = center_dir.join("synth_00000.png");
    for (steps, side) in [(1, 24), (2, 32)] {
        let png = dir.path().join(format!("out{steps}.png"));
        let out = outpaint(&["outpaint", "--ckpt", s(&ckpt), "--input", s(&input), "--steps", &steps.to_string(), "--out", s(&png), "--keep-center"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let img = image::open(&png).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (side, side));
        let src = image::open(&input).unwrap().to_rgb8();
        let m = 4 * steps as u32;
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(img.get_pixel(x + m, y + m), src.get_pixel(x, y));
            }
        }
    }

    let report = dir.path().join("report.csv");
    let out = outpaint(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("filename,psnr_full,psnr_ring,ssim_full,ssim_ring"));
    assert_eq!(lines.count(), 4);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FID") && stdout.contains("N/A"));
}

#[test]
fn deterministic_runs_and_resume_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 4, 24);
    let mut cfg = small_config();
    cfg.train.steps = 4;
    let cfg_path = write_config(dir.path(), &cfg);
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = outpaint(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run), "--deterministic", "--seed", "5"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        traces.push(fs::read_to_string(run.join("losses.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);

    // resume the first run from its step-2 checkpoint in a fresh directory
    let run = dir.path().join("c");
    let resume = dir.path().join("a").join("step_000002.ckpt");
    let out = outpaint(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run), "--resume", s(&resume), "--deterministic", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resumed = fs::read_to_string(run.join("losses.csv")).unwrap();
    let tail: Vec<&str> = traces[0].lines().skip(3).collect();
    let got: Vec<&str> = resumed.lines().skip(1).collect();
    assert_eq!(got, tail);
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), fs::read(dir.path().join("a/final.ckpt")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "geometry = 3").unwrap();
    let out = outpaint(&["train", "--config", s(&bad), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let out = outpaint(&["eval", "--ckpt", s(&dir.path().join("missing.ckpt")), "--data", s(dir.path()), "--report", "r.csv"]);
    assert_eq!(out.status.code(), Some(2));

    let out = outpaint(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));

    // wrong input size for the checkpoint
    let data = synth(dir.path(), 2, 24);
    let mut cfg = small_config();
    cfg.train.steps = 1;
    cfg.train.checkpoint_every = 0;
    let cfg_path = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    let out = outpaint(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run), "--deterministic"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = outpaint(&[
        "outpaint", "--ckpt", s(&run.join("final.ckpt")), "--input", s(&data.join("synth_00000.png")), "--steps", "1", "--out", s(&dir.path().join("x.png")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects a 16x16"));

    // nothing can be written for an empty dataset
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = outpaint(&["train", "--config", s(&cfg_path), "--data", s(&empty), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_margin_keeps_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 16);
    let mut cfg = small_config();
    cfg.geometry.margin = 0;
    cfg.train.steps = 1;
    cfg.train.checkpoint_every = 0;
    let cfg_path = write_config(dir.path(), &cfg);
    let run = dir.path().join("run");
    let out = outpaint(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run), "--deterministic"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let png = dir.path().join("o.png");
    let out = outpaint(&["outpaint", "--ckpt", s(&run.join("final.ckpt")), "--input", s(&data.join("synth_00000.png")), "--steps", "1", "--out", s(&png)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(image::open(&png).unwrap().to_rgb8().dimensions(), (16, 16));
}

#[test]
fn selftest_passes_offline() {
    let out = outpaint(&["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let table = String::from_utf8_lossy(&out.stdout);
    for group in ["[oracles]", "[metrics]", "[shapes]", "[persistence]", "[gradients]"] {
        assert!(table.contains(group), "{table}");
    }
    assert!(table.contains(", 0 failed"));
}
