use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use outpaint_core::checkpoint;
use outpaint_core::data::{gen_synthetic, image_to_tensor, read_image, tensor_to_image, write_image, Dataset};
use outpaint_core::metrics::report_psnr;
use outpaint_core::model::outpaint;
use outpaint_core::selftest;
use outpaint_core::training::{evaluate, final_checkpoint_path, train, RunPaths};
use outpaint_core::{Config, Error};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "outpaint", version, about = "Transformer image outpainting: train, extrapolate, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair on a folder of images.
    Train(TrainArgs),
    /// Extend an image beyond its borders with a trained checkpoint.
    Outpaint(OutpaintArgs),
    /// Score single-step outpainting on a folder of images.
    Eval(EvalArgs),
    /// Write procedurally generated training images.
    GenSynthetic(SynthArgs),
    /// Run the built-in invariant and gradient suite.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Directory of training images.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and `losses.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Derive all randomness from the seed.
    #[arg(long)]
    deterministic: bool,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OutpaintArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image whose size equals the configured centre size.
    #[arg(long)]
    input: PathBuf,
    /// Number of margins to extrapolate per side.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Paste the input pixels over the generated centre.
    #[arg(long)]
    keep_center: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-image CSV report.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Outpaint(a) => cmd_outpaint(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = Config::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if a.deterministic {
        config.train.deterministic = true;
    }
    let paths = RunPaths { data: a.data, out: a.out.clone(), resume: a.resume };
    let total = config.train.steps;
    let state = train(config, &paths, |log| {
        if log.step == 1 || log.step % 50 == 0 || log.step == total {
            info!(
                "step {}/{} rec {:.4} feat {:.4} mrf {:.4} adv {:.4} | G {:.4} D {:.4}",
                log.step, total, log.parts.rec, log.parts.feat_rec, log.parts.mrf, log.parts.adv, log.total_g, log.loss_d
            );
        }
    })?;
    info!("finished at step {}; wrote {}", state.step, final_checkpoint_path(&a.out).display());
    Ok(())
}

fn cmd_outpaint(a: OutpaintArgs) -> Result<(), Failure> {
    if a.steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    let ck = checkpoint::load(&a.ckpt)?;
    let geom = ck.config.geometry()?;
    let img = read_image(&a.input)?;
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != (geom.h, geom.w) {
        return Err(Failure::Usage(format!(
            "input is {w}x{h}, checkpoint expects a {}x{} centre",
            geom.w, geom.h
        )));
    }
    let center = image_to_tensor(&img);
    let out = outpaint(
        &ck.generator,
        &ck.config.model,
        &geom,
        &center,
        a.steps,
        ck.config.train.fill,
        a.keep_center,
    )?;
    if !out.all_finite() {
        return Err(Failure::Numerical("generated image contains non-finite values".into()));
    }
    write_image(&tensor_to_image(&out, 0)?, &a.out)?;
    let side = geom.w + 2 * a.steps * geom.m;
    info!("wrote {} ({side}x{})", a.out.display(), geom.h + 2 * a.steps * geom.m);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = checkpoint::load(&a.ckpt)?;
    let geom = ck.config.geometry()?;
    let dataset = Dataset::load(&a.data, &geom)?;
    let rows = evaluate(&ck.generator, &ck.config, &dataset)?;
    write_report(&a.report, &rows)?;
    let mean = |f: fn(&outpaint_core::training::EvalRow) -> f64| {
        let v: Vec<f64> = rows.iter().map(f).filter(|x| !x.is_nan()).map(report_psnr).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    println!("images      {}", rows.len());
    println!("PSNR full   {:.3} dB", mean(|r| r.psnr_full));
    println!("PSNR ring   {:.3} dB", mean(|r| r.psnr_ring));
    println!("SSIM full   {:.4}", mean(|r| r.ssim_full));
    println!("SSIM ring   {:.4}", mean(|r| r.ssim_ring));
    println!("FID         N/A (needs a pretrained Inception network)");
    println!("IS          N/A (needs a pretrained Inception network)");
    Ok(())
}

fn write_report(path: &Path, rows: &[outpaint_core::training::EvalRow]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "filename,psnr_full,psnr_ring,ssim_full,ssim_ring")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.name,
            report_psnr(r.psnr_full),
            report_psnr(r.psnr_ring),
            r.ssim_full,
            r.ssim_ring
        )?;
    }
    f.flush()
}

fn cmd_gen_synthetic(a: SynthArgs) -> Result<(), Failure> {
    let paths = gen_synthetic(a.count, a.size, a.seed, &a.out)?;
    info!("wrote {} images to {}", paths.len(), a.out.display());
    Ok(())
}

fn cmd_selftest() -> Result<(), Failure> {
    let checks = selftest::run_all();
    print!("{}", selftest::format_table(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Numerical(format!("{failed} self-test checks failed")));
    }
    Ok(())
}
