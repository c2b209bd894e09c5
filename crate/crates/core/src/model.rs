//! The full generator: encoder, predictor bottleneck and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bound, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{embed_center, OutpaintGeometry};
use crate::params::{Init, ParamSet};
use crate::swin::{decoder_forward, encoder_forward, init_backbone};
use crate::tensor::Tensor;
use crate::tsp::{crop_var, init_tsp, tsp_forward};

/// Fresh generator weights, rounded to `f32`.
pub fn init_generator(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        params: &mut params,
        rng: &mut rng,
        std: cfg.init_std,
    };
    init_backbone(&mut init, cfg);
    init_tsp(&mut init, cfg.bottleneck_channels());
    params.round_to_f32();
    Ok(params)
}

pub struct GeneratorOutput {
    /// `(B, h + 2km, w + 2km, 3)` in `(-1, 1)`.
    pub image: Var,
    /// Predictor output before decoding.
    pub features: Var,
    /// Centre block of `features`.
    pub f_cen: Var,
    /// Encoder bottleneck of the centre crop.
    pub enc_center: Var,
}

/// Runs the generator for `steps` extrapolation steps. `masked` is the full
/// `(B, h + 2km, w + 2km, 3)` frame with the ring filled, `center` the
/// `(B, h, w, 3)` crop and `base` the single-step geometry.
pub fn generator_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    base: &OutpaintGeometry,
    masked: Var,
    center: Var,
    steps: usize,
) -> Result<GeneratorOutput> {
    if steps == 0 {
        return Err(Error::Geometry("at least one extrapolation step is needed".into()));
    }
    let frame = base.with_steps(steps);
    let ms = tape.shape(masked).to_vec();
    if ms.len() != 4 || ms[1] != frame.full_h() || ms[2] != frame.full_w() {
        return Err(Error::Geometry(format!(
            "masked input {ms:?} does not match a {}x{} frame",
            frame.full_h(),
            frame.full_w()
        )));
    }
    let cs = tape.shape(center).to_vec();
    if cs.len() != 4 || cs[1] != base.h || cs[2] != base.w {
        return Err(Error::Geometry(format!(
            "centre input {cs:?} does not match {}x{}",
            base.h, base.w
        )));
    }
    let skips = encoder_forward(tape, p, cfg, masked)?;
    let enc_center = encoder_forward(tape, p, cfg, center)?.bottleneck();
    let grid = base.feature_grid();
    let (ch, cw, ring) = (grid.center_h, grid.center_w, grid.ring);
    let features = if ring == 0 {
        tape.layer_norm(enc_center, p.var("tsp.norm.g"), p.var("tsp.norm.b"), cfg.ln_eps)
    } else {
        tsp_forward(tape, p, enc_center, steps, ring, cfg.bottleneck_heads(), cfg.ln_eps)?
    };
    let off = steps * ring;
    let f_cen = crop_var(tape, features, off, off, ch, cw);
    let image = decoder_forward(tape, p, cfg, features, &skips.stages, &frame)?;
    Ok(GeneratorOutput {
        image,
        features,
        f_cen,
        enc_center,
    })
}

/// Outpaints `(B, h, w, 3)` centre images in `[-1, 1]` by `steps` margins.
/// With `keep_center` the input pixels replace the generated centre.
pub fn outpaint(
    params: &ParamSet,
    cfg: &ModelConfig,
    base: &OutpaintGeometry,
    center: &Tensor,
    steps: usize,
    fill: f64,
    keep_center: bool,
) -> Result<Tensor> {
    let frame = base.with_steps(steps);
    let masked = embed_center(center, &frame, fill)?;
    let mut tape = Tape::inference();
    let p = tape.bind(params.iter(), false);
    let m = tape.constant(masked);
    let c = tape.constant(center.clone());
    let out = generator_forward(&mut tape, &p, cfg, base, m, c, steps)?;
    let mut image = tape.value(out.image).clone();
    if keep_center {
        paste_center(&mut image, center, frame.m)?;
    }
    Ok(image)
}

/// Writes `center` into `image` at offset `(m, m)`.
pub fn paste_center(image: &mut Tensor, center: &Tensor, m: usize) -> Result<()> {
    let (b, h, w, c) = image.dims4()?;
    let (cb, ch, cw, cc) = center.dims4()?;
    if cb != b || cc != c || ch + 2 * m != h || cw + 2 * m != w {
        return Err(Error::Shape(format!(
            "cannot paste {:?} into {:?} at margin {m}",
            center.shape(),
            image.shape()
        )));
    }
    let src = center.data().to_vec();
    let dst = image.data_mut();
    for bi in 0..b {
        for y in 0..ch {
            let s = ((bi * ch + y) * cw) * c;
            let d = ((bi * h + y + m) * w + m) * c;
            dst[d..d + cw * c].copy_from_slice(&src[s..s + cw * c]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn toy_shapes_for_one_and_two_steps() {
        let cfg = Config::toy();
        let geom = cfg.geometry().unwrap();
        let params = init_generator(&cfg.model, 0).unwrap();
        let center = rand_t(&[2, 32, 32, 3], 1);
        let one = outpaint(&params, &cfg.model, &geom, &center, 1, 0.0, false).unwrap();
        assert_eq!(one.shape(), &[2, 48, 48, 3]);
        assert!(one.data().iter().all(|v| v.abs() < 1.0));
        let two = outpaint(&params, &cfg.model, &geom, &center, 2, 0.0, true).unwrap();
        assert_eq!(two.shape(), &[2, 64, 64, 3]);
        assert_eq!(two.crop4(16, 16, 32, 32).unwrap(), center);
    }

    #[test]
    fn zero_margin_keeps_input_size() {
        let mut cfg = Config::toy();
        cfg.geometry.margin = 0;
        let geom = cfg.geometry().unwrap();
        let params = init_generator(&cfg.model, 0).unwrap();
        let center = rand_t(&[1, 32, 32, 3], 2);
        let out = outpaint(&params, &cfg.model, &geom, &center, 1, 0.0, false).unwrap();
        assert_eq!(out.shape(), &[1, 32, 32, 3]);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = Config::toy();
        let geom = cfg.geometry().unwrap();
        let params = init_generator(&cfg.model, 3).unwrap();
        let mut tape = Tape::new();
        let p = tape.bind(params.iter(), true);
        let masked = tape.constant(rand_t(&[1, 48, 48, 3], 4));
        let center = tape.constant(rand_t(&[1, 32, 32, 3], 5));
        let out = generator_forward(&mut tape, &p, &cfg.model, &geom, masked, center, 1).unwrap();
        let r1 = tape.constant(rand_t(&[1, 48, 48, 3], 6));
        let r2 = tape.constant(rand_t(&[1, 8, 8, 32], 7));
        let a = tape.mul(out.image, r1);
        let b = tape.mul(out.f_cen, r2);
        let a = tape.sum_all(a);
        let b = tape.sum_all(b);
        let loss = tape.add(a, b);
        let grads = p.gradients(&tape.backward(loss), &tape);
        for (name, g) in &grads {
            assert!(g.max_abs() > 0.0, "no gradient reaches `{name}`");
        }
        assert_eq!(grads.len(), params.len());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = Config::toy();
        let geom = cfg.geometry().unwrap();
        let params = init_generator(&cfg.model, 0).unwrap();
        let mut tape = Tape::inference();
        let p = tape.bind(params.iter(), false);
        let masked = tape.constant(rand_t(&[1, 40, 48, 3], 4));
        let center = tape.constant(rand_t(&[1, 32, 32, 3], 5));
        assert!(generator_forward(&mut tape, &p, &cfg.model, &geom, masked, center, 1).is_err());
        assert!(outpaint(&params, &cfg.model, &geom, &rand_t(&[1, 30, 32, 3], 1), 1, 0.0, false).is_err());
    }
}
