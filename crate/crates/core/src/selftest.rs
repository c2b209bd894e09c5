//! Offline invariant suite behind the `selftest` command. Every check builds
//! its own inputs from fixed seeds, so no data or checkpoints are needed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::relative_position_index;
use crate::autograd::{Bound, Tape, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{Config, SwinStageConfig};
use crate::gradcheck::{check_gradients, check_gradients_sampled, GradReport};
use crate::losses::{
    feat_rec_loss, idmrf_loss, pixel_rec_loss, ralsgan_losses, total_generator_loss, LossVars, LossWeights, NORM_EPS,
};
use crate::metrics::{psnr, ssim};
use crate::model::{init_generator, outpaint};
use crate::optim::Adam;
use crate::params::{Init, ParamSet};
use crate::swin::{init_block, patch_expand, patch_merge, skip_fuse, swin_block_pair, Region};
use crate::tensor::Tensor;
use crate::tsp::{extend_sequences, init_tsp, regulate_bar};

/// Largest accepted analytic-vs-numeric relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Seeds per gradient check.
pub const GRAD_SEEDS: u64 = 10;

#[derive(Clone, Debug)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(group: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { group, name: name.into(), passed, detail: detail.into() }
    }
}

pub fn run_all() -> Vec<Check> {
    let mut out = oracle_checks();
    out.extend(metric_checks());
    out.extend(shape_checks());
    out.extend(persistence_checks());
    out.extend(gradient_checks());
    out
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

fn grad_check<F>(name: &str, mut per_seed: F) -> Check
where
    F: FnMut(u64) -> GradReport,
{
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..GRAD_SEEDS {
        let r = per_seed(seed);
        checked += r.checked;
        if !(r.max_rel_error <= worst) {
            worst = r.max_rel_error;
        }
    }
    Check::new(
        "gradients",
        name,
        worst <= GRAD_TOLERANCE,
        format!("max rel err {worst:.2e} over {GRAD_SEEDS} seeds, {checked} probes"),
    )
}

fn named(ps: &ParamSet) -> (Vec<String>, Vec<Tensor>) {
    ps.iter().map(|(n, t)| (n.clone(), t.clone())).unzip()
}

fn bind_prefix(names: &[String], v: &[Var]) -> Bound {
    Bound::from_vars(names.iter().cloned().zip(v.iter().copied()))
}

fn weighted_sum(tape: &mut Tape, x: Var, w: Var) -> Var {
    let z = tape.mul(x, w);
    tape.sum_all(z)
}

/// Analytic vs central-difference gradients for every differentiable
/// building block and each loss.
pub fn gradient_checks() -> Vec<Check> {
    let mut out = Vec::new();

    out.push(grad_check("attention", |seed| {
        let inputs = vec![
            rand_t(&[4, 3, 2], seed),
            rand_t(&[4, 5, 2], seed + 100),
            rand_t(&[4, 5, 3], seed + 200),
            rand_t(&[2, 3, 5], seed + 300),
            rand_t(&[4, 3, 3], seed + 400),
        ];
        let mask: Vec<bool> = (0..20).map(|i| i % 7 != 2).collect();
        check_gradients(&inputs, |tape, v| {
            let o = tape.attention(v[0], v[1], v[2], Some(v[3]), Some(mask.clone()));
            weighted_sum(tape, o, v[4])
        })
    }));

    let stage = SwinStageConfig { depth: 2, num_heads: 2, channels: 4, window: 3 };
    out.push(grad_check("swin block pair", |seed| {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { params: &mut ps, rng: &mut rng, std: 0.5 };
        for j in 0..2 {
            init_block(&mut init, &format!("t.b{j}"), &stage, 4);
        }
        let (names, mut inputs) = named(&ps);
        for (n, t) in names.iter().zip(inputs.iter_mut()) {
            if n.ends_with(".g") {
                *t = rand_t(t.shape(), seed + 50).map(|v| 1.0 + 0.3 * v);
            }
        }
        inputs.push(rand_t(&[1, 4, 5, 4], seed + 1000));
        inputs.push(rand_t(&[1, 4, 5, 4], seed + 2000));
        check_gradients_sampled(&inputs, 16, |tape, v| {
            let n = names.len();
            let p = bind_prefix(&names, &v[..n]);
            let y = swin_block_pair(tape, &p, "t", 0, v[n], &stage, 1e-5).expect("block pair");
            weighted_sum(tape, y, v[n + 1])
        })
    }));

    out.push(grad_check("patch merge", |seed| {
        let inputs = vec![
            rand_t(&[2, 4, 6, 3], seed),
            rand_t(&[12, 6], seed + 1),
            rand_t(&[6], seed + 2),
            rand_t(&[2, 2, 3, 6], seed + 3),
        ];
        check_gradients(&inputs, |tape, v| {
            let m = patch_merge(tape, v[0], v[1], v[2]).expect("merge");
            weighted_sum(tape, m, v[3])
        })
    }));

    out.push(grad_check("patch expand", |seed| {
        let inputs = vec![
            rand_t(&[2, 2, 3, 6], seed),
            rand_t(&[6, 12], seed + 1),
            rand_t(&[12], seed + 2),
            rand_t(&[2, 4, 6, 3], seed + 3),
        ];
        check_gradients(&inputs, |tape, v| {
            let e = patch_expand(tape, v[0], v[1], v[2]).expect("expand");
            weighted_sum(tape, e, v[3])
        })
    }));

    out.push(grad_check("skip fusion", |seed| {
        let inputs = vec![
            rand_t(&[2, 4, 6, 3], seed),
            rand_t(&[2, 4, 6, 3], seed + 1),
            rand_t(&[2, 4, 6, 3], seed + 2),
        ];
        let center = Region { top: 1, left: 2, height: 2, width: 3 };
        check_gradients(&inputs, |tape, v| {
            let f = skip_fuse(tape, v[0], v[1], center).expect("fuse");
            weighted_sum(tape, f, v[2])
        })
    }));

    let tsp_params = |c: usize, seed: u64| {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_tsp(&mut Init { params: &mut ps, rng: &mut rng, std: 0.5 }, c);
        named(&ps)
    };

    out.push(grad_check("predictor extend", |seed| {
        let (names, mut inputs) = tsp_params(3, seed);
        inputs.push(rand_t(&[2, 3, 3], seed + 10));
        inputs.push(rand_t(&[2, 2, 3], seed + 20));
        check_gradients_sampled(&inputs, 24, |tape, v| {
            let n = names.len();
            let p = bind_prefix(&names, &v[..n]);
            let e = extend_sequences(tape, &p, "tsp.lstm_h", v[n], 2).expect("extend").expect("steps > 0");
            weighted_sum(tape, e, v[n + 1])
        })
    }));

    out.push(grad_check("predictor regulate", |seed| {
        let (names, mut inputs) = tsp_params(4, seed);
        inputs.push(rand_t(&[2, 2, 4], seed + 10));
        inputs.push(rand_t(&[2, 5, 4], seed + 20));
        inputs.push(rand_t(&[2, 2, 4], seed + 30));
        let mask: Vec<bool> = (0..10).map(|i| i != 3).collect();
        check_gradients_sampled(&inputs, 24, |tape, v| {
            let n = names.len();
            let p = bind_prefix(&names, &v[..n]);
            let r = regulate_bar(tape, &p, v[n], v[n + 1], Some(mask.clone()), 2).expect("regulate");
            weighted_sum(tape, r, v[n + 2])
        })
    }));

    type LossFn = fn(&mut Tape, &[Var]) -> Var;
    let losses: [(&str, LossFn); 5] = [
        ("pixel reconstruction loss", |t, v| pixel_rec_loss(t, v[0], v[1]).expect("rec")),
        ("feature reconstruction loss", |t, v| feat_rec_loss(t, v[0], v[1]).expect("feat")),
        ("texture loss", |t, v| idmrf_loss(t, &[v[0]], &[v[1]], 0.5, 1e-5).expect("mrf")),
        ("adversarial loss (D)", |t, v| {
            let (r, f) = (t.reshape(v[0], &[54]), t.reshape(v[1], &[54]));
            ralsgan_losses(t, r, f).expect("adv").0
        }),
        ("adversarial loss (G)", |t, v| {
            let (r, f) = (t.reshape(v[0], &[54]), t.reshape(v[1], &[54]));
            ralsgan_losses(t, r, f).expect("adv").1
        }),
    ];
    for (name, f) in losses {
        out.push(grad_check(name, |seed| {
            let inputs = vec![rand_t(&[2, 3, 3, 3], seed), rand_t(&[2, 3, 3, 3], seed + 7)];
            check_gradients(&inputs, f)
        }));
    }
    out
}

/// Texture loss of one image pair by direct loops over sites.
pub fn idmrf_reference(fake: &[Vec<f64>], real: &[Vec<f64>], bandwidth: f64, eps: f64) -> f64 {
    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
    let mut rs_bar = vec![vec![0.0; real.len()]; fake.len()];
    for (v, f) in fake.iter().enumerate() {
        let mu: Vec<f64> = real
            .iter()
            .map(|r| f.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (norm(f) * norm(r)))
            .collect();
        let best = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rs: Vec<f64> = mu.iter().map(|m| (m / (best + eps) / bandwidth).exp()).collect();
        let z: f64 = rs.iter().sum();
        for (s, r) in rs.iter().enumerate() {
            rs_bar[v][s] = r / z;
        }
    }
    let mut acc = 0.0;
    for s in 0..real.len() {
        acc += (0..fake.len()).map(|v| rs_bar[v][s]).fold(f64::NEG_INFINITY, f64::max);
    }
    -(acc / real.len() as f64).ln()
}

fn sites(t: &Tensor, image: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (n, c) = (s[1] * s[2], s[3]);
    (0..n).map(|i| t.data()[(image * n + i) * c..(image * n + i + 1) * c].to_vec()).collect()
}

/// Index lookups, closed-form loss values and loss recombination.
pub fn oracle_checks() -> Vec<Check> {
    let mut out = Vec::new();

    for window in [1usize, 2, 3, 7] {
        let index = relative_position_index(window);
        let t = window * window;
        let m = window as i64;
        let mut bad = 0;
        for i in 0..t {
            for j in 0..t {
                let (dy, dx) = ((i / window) as i64 - (j / window) as i64, (i % window) as i64 - (j % window) as i64);
                let mut slot = 0;
                'scan: for oy in -(m - 1)..m {
                    for ox in -(m - 1)..m {
                        if (oy, ox) == (dy, dx) {
                            break 'scan;
                        }
                        slot += 1;
                    }
                }
                if index[i * t + j] as usize != slot {
                    bad += 1;
                }
            }
        }
        out.push(Check::new(
            "oracles",
            format!("relative bias index M={window}"),
            bad == 0 && index.len() == t * t,
            format!("{} pairs, {bad} mismatches", t * t),
        ));
    }

    let mut worst = 0.0f64;
    for (seed, h, w) in [(1u64, 8, 8), (2, 3, 5), (3, 1, 4), (4, 6, 2)] {
        let f = rand_t(&[2, h, w, 5], seed);
        let r = rand_t(&[2, h, w, 5], seed + 9);
        let want = (0..2).map(|i| idmrf_reference(&sites(&f, i), &sites(&r, i), 0.5, 1e-5)).sum::<f64>() / 2.0;
        let mut tape = Tape::inference();
        let (fv, rv) = (tape.constant(f), tape.constant(r));
        let got = idmrf_loss(&mut tape, &[fv], &[rv], 0.5, 1e-5).map(|l| scalar(&tape, l));
        worst = worst.max(got.map_or(f64::INFINITY, |g| (g - want).abs()));
    }
    out.push(Check::new("oracles", "texture loss vs double loop", worst <= 1e-6, format!("max abs err {worst:.2e}")));

    let adv = |real: &[f64], fake: &[f64]| {
        let mut tape = Tape::inference();
        let r = tape.constant(Tensor::new(&[real.len()], real.to_vec()).expect("scores"));
        let f = tape.constant(Tensor::new(&[fake.len()], fake.to_vec()).expect("scores"));
        let (d, g) = ralsgan_losses(&mut tape, r, f).expect("adv");
        (scalar(&tape, d), scalar(&tape, g))
    };
    let (d, g) = adv(&[1.0], &[0.0]);
    out.push(Check::new(
        "oracles",
        "adversarial (1,0) -> D 0, G 8",
        d.abs() < 1e-12 && (g - 8.0).abs() < 1e-12,
        format!("D {d}, G {g}"),
    ));
    let (d, g) = adv(&[0.3; 4], &[0.3; 4]);
    out.push(Check::new(
        "oracles",
        "adversarial equal scores -> 2, 2",
        (d - 2.0).abs() < 1e-12 && (g - 2.0).abs() < 1e-12,
        format!("D {d}, G {g}"),
    ));

    let parts = [0.3, 0.7, 1.9, 0.45];
    let w = LossWeights::default();
    let mut tape = Tape::inference();
    let v: Vec<Var> = parts.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
    let t = total_generator_loss(&mut tape, &LossVars { rec: v[0], feat_rec: v[1], mrf: v[2], adv: v[3] }, &w);
    let got = scalar(&tape, t);
    let want = 20.0 * 0.3 + 0.7 + 0.5 * 1.9 + 0.45;
    out.push(Check::new(
        "oracles",
        "generator loss recombination (20, 1, 0.5, 1)",
        got == want,
        format!("{got} vs {want}"),
    ));
    out
}

/// PSNR with peak 1 straight from the definition.
pub fn psnr_reference(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    -10.0 * mse.log10()
}

/// SSIM from the definition: a full 11x11 Gaussian-weighted sum per window,
/// averaged over valid windows and channels.
pub fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let px = |t: &Tensor, y: usize, x: usize, ch: usize| t.data()[(y * w + x) * c + ch];
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut total, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = g[dy] * g[dx] / (gs * gs);
                        let (p, q) = (px(a, y0 + dy, x0 + dx, ch), px(b, y0 + dy, x0 + dx, ch));
                        mx += k * p;
                        my += k * q;
                        sxx += k * p * p;
                        syy += k * q * q;
                        sxy += k * p * q;
                    }
                }
                let num = (2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2);
                let den = (mx * mx + my * my + c1) * (sxx - mx * mx + syy - my * my + c2);
                total += num / den;
                n += 1;
            }
        }
    }
    total / n as f64
}

fn unit_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[1, h, w, 3], 0.0, 1.0, &mut rng)
}

pub fn metric_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let a = unit_image(16, 13, seed);
        let b = unit_image(16, 13, seed + 100);
        dp = dp.max(psnr(&a, &b).map_or(f64::INFINITY, |p| (p - psnr_reference(&a, &b)).abs()));
        ds = ds.max(ssim(&a, &b).map_or(f64::INFINITY, |s| (s - ssim_reference(&a, &b)).abs()));
    }
    out.push(Check::new("metrics", "PSNR vs definition, 20 pairs", dp <= 1e-6, format!("max abs err {dp:.2e}")));
    out.push(Check::new("metrics", "SSIM vs definition, 20 pairs", ds <= 1e-6, format!("max abs err {ds:.2e}")));

    let x = unit_image(24, 24, 7);
    let self_ssim = ssim(&x, &x).unwrap_or(f64::NAN);
    out.push(Check::new(
        "metrics",
        "ssim(x, x) = 1",
        (self_ssim - 1.0).abs() < 1e-12,
        format!("{self_ssim}"),
    ));

    let noise = unit_image(24, 24, 8).map(|v| v - 0.5);
    let levels = [0.01, 0.02, 0.05, 0.1, 0.2];
    let scores: Vec<f64> = levels
        .iter()
        .map(|&s| psnr(&x, &x.zip_map(&noise, |p, n| p + s * n)).unwrap_or(f64::NAN))
        .collect();
    let monotone = scores.windows(2).all(|p| p[0] > p[1]);
    out.push(Check::new(
        "metrics",
        "PSNR decreases with noise",
        monotone,
        format!("{}", scores.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join(" > ")),
    ));
    out
}

fn describe(r: &crate::Result<Vec<usize>>) -> String {
    match r {
        Ok(shape) => format!("{shape:?}"),
        Err(e) => e.to_string(),
    }
}

/// Output sizes of the small preset for one and two steps, and the
/// degenerate zero-margin case.
pub fn shape_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let cfg = Config::toy();
    let run = |cfg: &Config, steps: usize| -> crate::Result<Vec<usize>> {
        let geom = cfg.geometry()?;
        let params = init_generator(&cfg.model, 3)?;
        let center = rand_t(&[1, geom.h, geom.w, 3], 4);
        Ok(outpaint(&params, &cfg.model, &geom, &center, steps, 0.0, false)?.shape().to_vec())
    };
    for steps in [1usize, 2] {
        let want = vec![1, 32 + 2 * steps * 8, 32 + 2 * steps * 8, 3];
        let got = run(&cfg, steps);
        out.push(Check::new(
            "shapes",
            format!("small preset, {steps} step(s)"),
            got.as_ref().ok() == Some(&want),
            describe(&got),
        ));
    }
    let mut flat = cfg.clone();
    flat.geometry.margin = 0;
    let got = run(&flat, 1);
    out.push(Check::new(
        "shapes",
        "zero margin keeps size",
        got.as_ref().ok() == Some(&vec![1, 32, 32, 3]),
        describe(&got),
    ));
    out
}

/// Checkpoint encode/decode is exact and reproduces the forward pass bit
/// for bit.
pub fn persistence_checks() -> Vec<Check> {
    let result = (|| -> crate::Result<(bool, bool)> {
        let config = Config::toy();
        let generator = init_generator(&config.model, 11)?;
        let discriminator = crate::conv::init_discriminator(&config.discriminator, 0.02, 12);
        let t = &config.train;
        let state = Checkpoint {
            step: 5,
            seed: 11,
            opt_g: Adam::new(&generator, t.lr_g, t.beta1, t.beta2, t.adam_eps),
            opt_d: Adam::new(&discriminator, t.lr_d, t.beta1, t.beta2, t.adam_eps),
            config: config.clone(),
            generator,
            discriminator,
        };
        let back = checkpoint::decode(&checkpoint::encode(&state))?;
        let geom = config.geometry()?;
        let center = rand_t(&[1, geom.h, geom.w, 3], 13);
        let a = outpaint(&state.generator, &config.model, &geom, &center, 1, 0.0, false)?;
        let b = outpaint(&back.generator, &back.config.model, &geom, &center, 1, 0.0, false)?;
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        Ok((back == state, same))
    })();
    let (exact, same) = match &result {
        Ok(v) => *v,
        Err(_) => (false, false),
    };
    let (d1, d2) = match result {
        Ok(_) => ("all tensors and optimiser state equal".to_string(), "compared bitwise".to_string()),
        Err(e) => (e.to_string(), e.to_string()),
    };
    vec![
        Check::new("persistence", "checkpoint roundtrip is exact", exact, d1),
        Check::new("persistence", "reloaded forward is bit-identical", same, d2),
    ]
}

/// Text table of results grouped in run order.
pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    let mut group = "";
    for c in checks {
        if c.group != group {
            group = c.group;
            s.push_str(&format!("[{group}]\n"));
        }
        let mark = if c.passed { "pass" } else { "FAIL" };
        s.push_str(&format!("  {mark}  {:width$}  {}\n", c.name, c.detail));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    s.push_str(&format!("{} checks, {failed} failed\n", checks.len()));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_groups_pass() {
        let mut checks = oracle_checks();
        checks.extend(metric_checks());
        checks.extend(shape_checks());
        checks.extend(persistence_checks());
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn table_marks_failures() {
        let checks = vec![
            Check::new("a", "one", true, "ok"),
            Check::new("b", "two", false, "bad"),
        ];
        let t = format_table(&checks);
        assert!(t.contains("[a]") && t.contains("FAIL  two"));
        assert!(t.ends_with("2 checks, 1 failed\n"));
    }
}
