//! Overfits the toy configuration on a handful of synthetic images and
//! reports reconstruction and ring PSNR.
//!
//! `cargo run --release -p outpaint-core --example overfit -- [steps] [lr] [lambda_adv]`

use std::time::Instant;

use outpaint_core::data::{gen_synthetic, Dataset};
use outpaint_core::training::{evaluate, train, RunPaths};
use outpaint_core::Config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = Config::toy();
    cfg.train.steps = args.first().map_or(Ok(2000), |s| s.parse())?;
    if let Some(lr) = args.get(1) {
        cfg.train.lr_g = lr.parse()?;
        cfg.train.lr_d = cfg.train.lr_g;
    }
    if let Some(adv) = args.get(2) {
        cfg.loss.lambda_adv = adv.parse()?;
    }
    cfg.train.checkpoint_every = 0;
    let dir = tempfile::tempdir()?;
    let data = dir.path().join("data");
    gen_synthetic(8, 48, 0, &data)?;
    let paths = RunPaths { data: data.clone(), out: dir.path().join("run"), resume: None };
    let start = Instant::now();
    let state = train(cfg.clone(), &paths, |log| {
        if log.step % 100 == 0 || log.step == 1 {
            println!(
                "step {:5} rec {:.4} feat {:.4} mrf {:.4} adv {:.4} d {:.4} ({:.1}s)",
                log.step,
                log.parts.rec,
                log.parts.feat_rec,
                log.parts.mrf,
                log.parts.adv,
                log.loss_d,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let ds = Dataset::load(&data, &cfg.geometry()?)?;
    let rows = evaluate(&state.generator, &cfg, &ds)?;
    let ring: f64 = rows.iter().map(|r| r.psnr_ring).sum::<f64>() / rows.len() as f64;
    println!("mean ring PSNR {ring:.2} dB after {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
