//! Adversarial training and dataset evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autograd::Tape;
use crate::checkpoint::{self, Checkpoint};
use crate::config::Config;
use crate::conv::{discriminator_forward, init_discriminator, FeatureExtractor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{MaskedSample, OutpaintGeometry};
use crate::losses::{
    feat_rec_loss, idmrf_loss, pixel_rec_loss, ralsgan_losses, total_generator_loss, LossParts, LossVars,
};
use crate::metrics::{psnr, psnr_masked, ssim, ssim_masked, to_unit};
use crate::model::{generator_forward, init_generator};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const LOSS_CSV_HEADER: &str = "step,rec,feat_rec,mrf,adv,total_g,loss_d";

/// Offset between the generator and discriminator initialisation seeds.
const DISC_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Scalars logged after one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// Steps completed, counting this one.
    pub step: u64,
    pub parts: LossParts,
    pub total_g: f64,
    pub loss_d: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, p.rec, p.feat_rec, p.mrf, p.adv, self.total_g, self.loss_d
        )
    }
}

/// Model, optimiser state and the fixed pieces needed to take steps.
pub struct Trainer {
    pub state: Checkpoint,
    pub geom: OutpaintGeometry,
    pub extractor: FeatureExtractor,
}

impl Trainer {
    /// Fresh weights from `config.train.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let generator = init_generator(&config.model, seed)?;
        let discriminator = init_discriminator(
            &config.discriminator,
            config.model.init_std,
            seed.wrapping_add(DISC_SEED_OFFSET),
        );
        let t = &config.train;
        let opt_g = Adam::new(&generator, t.lr_g, t.beta1, t.beta2, t.adam_eps);
        let opt_d = Adam::new(&discriminator, t.lr_d, t.beta1, t.beta2, t.adam_eps);
        let state = Checkpoint {
            step: 0,
            seed,
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
        };
        Self::from_checkpoint(state)
    }

    /// Continues from saved state, checking tensor shapes against its config.
    pub fn from_checkpoint(state: Checkpoint) -> Result<Self> {
        let config = &state.config;
        config.validate()?;
        let g = init_generator(&config.model, 0)?;
        let d = init_discriminator(&config.discriminator, config.model.init_std, 0);
        checkpoint::check_against(&state, &g, &d)?;
        let geom = config.geometry()?;
        let extractor = FeatureExtractor::seeded(&config.extractor)?;
        Ok(Self { state, geom, extractor })
    }

    pub fn config(&self) -> &Config {
        &self.state.config
    }

    /// One discriminator update on detached generated images followed by one
    /// generator update against the updated discriminator.
    pub fn train_step(&mut self, batch: &[MaskedSample]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let step = self.state.step + 1;
        let cfg = self.state.config.clone();
        let geom = self.geom;
        let gt = Tensor::stack_batch(&batch.iter().map(|s| s.ground_truth.clone()).collect::<Vec<_>>())?;
        let masked = Tensor::stack_batch(&batch.iter().map(|s| s.masked_image.clone()).collect::<Vec<_>>())?;
        let center = Tensor::stack_batch(&batch.iter().map(|s| s.center(&geom)).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let gp = tape.bind(self.state.generator.iter(), true);
        let m = tape.constant(masked);
        let c = tape.constant(center);
        let out = generator_forward(&mut tape, &gp, &cfg.model, &geom, m, c, 1)?;
        let fake_value = tape.value(out.image).clone();

        let loss_d = self.discriminator_step(&gt, fake_value, step)?;

        let dp = tape.bind(self.state.discriminator.iter(), false);
        let real = tape.constant(gt);
        let s_real = discriminator_forward(&mut tape, &dp, &cfg.discriminator, real)?;
        let s_fake = discriminator_forward(&mut tape, &dp, &cfg.discriminator, out.image)?;
        let (_, adv) = ralsgan_losses(&mut tape, s_real, s_fake)?;
        let rec = pixel_rec_loss(&mut tape, real, out.image)?;
        let target = tape.detach(out.enc_center);
        let feat_rec = feat_rec_loss(&mut tape, out.f_cen, target)?;
        let fake_feats = self.extractor.forward(&mut tape, out.image)?;
        let real_feats = self.extractor.forward(&mut tape, real)?;
        let mrf = idmrf_loss(&mut tape, &fake_feats, &real_feats, cfg.loss.mrf_bandwidth, cfg.loss.mrf_eps)?;
        let vars = LossVars { rec, feat_rec, mrf, adv };
        let weights = cfg.loss.weights();
        let total = total_generator_loss(&mut tape, &vars, &weights);
        let parts = vars.values(&tape);
        parts.check_finite(step)?;
        let total_g = tape.value(total).item();
        if !total_g.is_finite() {
            return Err(Error::NonFinite { term: "total", step });
        }
        let grads = gp.gradients(&tape.backward(total), &tape);
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { term: "generator gradient", step });
        }
        self.state.opt_g.step(&mut self.state.generator, &grads)?;
        self.state.step = step;
        Ok(StepLog { step, parts, total_g, loss_d })
    }

    /// Returns the discriminator loss before its update (or without one when
    /// the discriminator is frozen).
    fn discriminator_step(&mut self, real: &Tensor, fake: Tensor, step: u64) -> Result<f64> {
        let cfg = &self.state.config;
        let train = cfg.train.train_discriminator;
        let mut tape = if train { Tape::new() } else { Tape::inference() };
        let dp = tape.bind(self.state.discriminator.iter(), train);
        let r = tape.constant(real.clone());
        let f = tape.constant(fake);
        let s_real = discriminator_forward(&mut tape, &dp, &cfg.discriminator, r)?;
        let s_fake = discriminator_forward(&mut tape, &dp, &cfg.discriminator, f)?;
        let (loss_d, _) = ralsgan_losses(&mut tape, s_real, s_fake)?;
        let value = tape.value(loss_d).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { term: "discriminator", step });
        }
        if train {
            let grads = dp.gradients(&tape.backward(loss_d), &tape);
            self.state.opt_d.step(&mut self.state.discriminator, &grads)?;
        }
        Ok(value)
    }
}

/// Where and how a training run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

pub fn loss_csv_path(out: &Path) -> PathBuf {
    out.join("losses.csv")
}

pub fn final_checkpoint_path(out: &Path) -> PathBuf {
    out.join("final.ckpt")
}

pub fn periodic_checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step_{step:06}.ckpt"))
}

/// Rewrites an existing trace so it ends at `step`, or starts a new one.
fn prepare_trace(path: &Path, step: u64) -> Result<fs::File> {
    let mut kept = vec![LOSS_CSV_HEADER.to_string()];
    if step > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s <= step)
                    })
                    .map(str::to_string),
            );
        }
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(fs::OpenOptions::new().append(true).open(path)?)
}

/// Trains until `config.train.steps`, appending to `losses.csv` and writing
/// checkpoints into `paths.out`. `on_step` sees every logged step.
pub fn train(config: Config, paths: &RunPaths, mut on_step: impl FnMut(&StepLog)) -> Result<Checkpoint> {
    config.validate()?;
    let mut trainer = match &paths.resume {
        Some(ckpt) => {
            let mut state = checkpoint::load(ckpt)?;
            let g = init_generator(&config.model, 0)?;
            let d = init_discriminator(&config.discriminator, config.model.init_std, 0);
            checkpoint::check_against(&state, &g, &d)?;
            state.config = config.clone();
            Trainer::from_checkpoint(state)?
        }
        None => {
            let mut trainer = Trainer::new(config.clone())?;
            if !config.train.deterministic {
                trainer.state.seed = entropy_seed();
            }
            trainer
        }
    };
    let dataset = Dataset::load(&paths.data, &trainer.geom)?;
    let batch = config.train.batch;
    if dataset.batches_per_epoch(batch) == 0 {
        return Err(Error::Dataset(format!(
            "{} images cannot fill a batch of {batch}",
            dataset.len()
        )));
    }
    fs::create_dir_all(&paths.out)?;
    let mut trace = prepare_trace(&loss_csv_path(&paths.out), trainer.state.step)?;
    let fill = config.train.fill;
    while trainer.state.step < config.train.steps {
        let indices = dataset.batch_indices(trainer.state.step, batch, trainer.state.seed)?;
        let samples = dataset.masked_batch(&indices, &trainer.geom, fill)?;
        let log = trainer.train_step(&samples)?;
        writeln!(trace, "{}", log.csv_row())?;
        on_step(&log);
        let every = config.train.checkpoint_every;
        if every > 0 && log.step % every == 0 && log.step < config.train.steps {
            checkpoint::save(&trainer.state, &periodic_checkpoint_path(&paths.out, log.step))?;
        }
    }
    trace.flush()?;
    checkpoint::save(&trainer.state, &final_checkpoint_path(&paths.out))?;
    Ok(trainer.state)
}

fn entropy_seed() -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    nanos ^ u64::from(std::process::id()).rotate_left(32)
}

/// Per-image quality of single-step outpainting.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr_full: f64,
    pub psnr_ring: f64,
    pub ssim_full: f64,
    pub ssim_ring: f64,
}

/// Generated full frames for `samples`, in `[-1, 1]`.
pub fn generate(generator: &ParamSet, config: &Config, samples: &[MaskedSample]) -> Result<Tensor> {
    let geom = config.geometry()?;
    let masked = Tensor::stack_batch(&samples.iter().map(|s| s.masked_image.clone()).collect::<Vec<_>>())?;
    let center = Tensor::stack_batch(&samples.iter().map(|s| s.center(&geom)).collect::<Vec<_>>())?;
    let mut tape = Tape::inference();
    let p = tape.bind(generator.iter(), false);
    let m = tape.constant(masked);
    let c = tape.constant(center);
    let out = generator_forward(&mut tape, &p, &config.model, &geom, m, c, 1)?;
    Ok(tape.value(out.image).clone())
}

/// Scores the generator on every image of `dataset`. Metrics use `[0, 1]`;
/// ring values are NaN when the ring is empty or too thin.
pub fn evaluate(generator: &ParamSet, config: &Config, dataset: &Dataset) -> Result<Vec<EvalRow>> {
    let geom = config.geometry()?;
    let mask = geom.ring_mask();
    let mut rows = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(8) {
        let samples = dataset.masked_batch(chunk, &geom, config.train.fill)?;
        let fake = generate(generator, config, &samples)?;
        for (k, &i) in chunk.iter().enumerate() {
            let a = to_unit(&fake.batch_item(k)?);
            let b = to_unit(&dataset.images[i]);
            rows.push(EvalRow {
                name: dataset.names[i].clone(),
                psnr_full: psnr(&a, &b)?,
                psnr_ring: if geom.m > 0 { psnr_masked(&a, &b, &mask)? } else { f64::NAN },
                ssim_full: ssim(&a, &b)?,
                // undefined when no SSIM window is centred on the ring
                ssim_ring: ssim_masked(&a, &b, &mask).unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::geometry::make_masked_input;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    fn batch(cfg: &Config, seed: u64) -> Vec<MaskedSample> {
        let geom = cfg.geometry().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.train.batch)
            .map(|_| {
                let gt = Tensor::uniform(&[1, geom.full_h(), geom.full_w(), 3], -1.0, 1.0, &mut rng);
                make_masked_input(&gt, &geom, 0.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn logged_total_recombines_parts() {
        let cfg = small_config();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let log = t.train_step(&batch(&cfg, 1)).unwrap();
        assert_eq!(log.step, 1);
        let want = log.parts.total(&cfg.loss.weights());
        assert!((log.total_g - want).abs() <= 1e-12 * want.abs().max(1.0));
        assert!(log.loss_d >= 0.0 && log.parts.adv >= 0.0);
    }

    #[test]
    fn generator_ignores_discriminator_without_adversarial_weight() {
        let mut cfg = small_config();
        cfg.loss.lambda_adv = 0.0;
        let samples = batch(&cfg, 2);
        let mut with_d = Trainer::new(cfg.clone()).unwrap();
        let mut frozen = cfg.clone();
        frozen.train.train_discriminator = false;
        let mut without_d = Trainer::new(frozen).unwrap();
        with_d.train_step(&samples).unwrap();
        without_d.train_step(&samples).unwrap();
        assert_eq!(with_d.state.generator, without_d.state.generator);
        assert_ne!(with_d.state.discriminator, without_d.state.discriminator);
    }

    #[test]
    fn frozen_discriminator_overfits_one_batch() {
        let mut cfg = small_config();
        cfg.loss.lambda_adv = 0.0;
        cfg.train.train_discriminator = false;
        cfg.train.lr_g = 2e-3;
        let samples = batch(&cfg, 3);
        let mut t = Trainer::new(cfg).unwrap();
        let first = t.train_step(&samples).unwrap().parts.rec;
        let mut last = first;
        for _ in 0..49 {
            last = t.train_step(&samples).unwrap().parts.rec;
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn non_finite_input_names_the_term() {
        let cfg = small_config();
        let mut samples = batch(&cfg, 4);
        samples[0].ground_truth.data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(cfg).unwrap();
        match t.train_step(&samples) {
            Err(Error::NonFinite { step: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn runs_are_reproducible_and_resume_exactly() {
        let cfg = small_config();
        let data = tempfile::tempdir().unwrap();
        gen_synthetic(4, 24, 5, data.path()).unwrap();
        let run = |out: &Path, resume: Option<PathBuf>, cfg: &Config| {
            let paths = RunPaths { data: data.path().into(), out: out.into(), resume };
            train(cfg.clone(), &paths, |_| {}).unwrap()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let end_a = run(a.path(), None, &cfg);
        let end_b = run(b.path(), None, &cfg);
        let csv_a = fs::read_to_string(loss_csv_path(a.path())).unwrap();
        assert_eq!(csv_a, fs::read_to_string(loss_csv_path(b.path())).unwrap());
        assert_eq!(csv_a.lines().count(), 4);
        assert_eq!(end_a, end_b);
        assert!(periodic_checkpoint_path(a.path(), 2).exists());

        let resumed = run(b.path(), Some(periodic_checkpoint_path(a.path(), 2)), &cfg);
        assert_eq!(resumed, end_a);
        assert_eq!(fs::read_to_string(loss_csv_path(b.path())).unwrap(), csv_a);

        let mut longer = cfg.clone();
        longer.train.steps = 4;
        let more = run(a.path(), Some(final_checkpoint_path(a.path())), &longer);
        assert_eq!(more.step, 4);
        assert_eq!(fs::read_to_string(loss_csv_path(a.path())).unwrap().lines().count(), 5);

        let rows = evaluate(&end_a.generator, &cfg, &Dataset::load(data.path(), &cfg.geometry().unwrap()).unwrap())
            .unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.psnr_ring.is_finite() && r.ssim_full <= 1.0 && r.ssim_ring.is_nan()));
    }
}
