//! Training objectives.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Reduce, RowOp};

/// Guard inside the feature-norm square root so that all-zero features stay
/// differentiable.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_feat_rec: f64,
    pub lambda_mrf: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 20.0,
            lambda_feat_rec: 1.0,
            lambda_mrf: 0.5,
            lambda_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_feat_rec, self.lambda_mrf, self.lambda_adv];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Scalar values of the generator loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub feat_rec: f64,
    pub mrf: f64,
    pub adv: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_rec * self.rec
            + w.lambda_feat_rec * self.feat_rec
            + w.lambda_mrf * self.mrf
            + w.lambda_adv * self.adv
    }

    /// Names the first non-finite term.
    pub fn check_finite(&self, step: u64) -> Result<()> {
        for (term, v) in [
            ("rec", self.rec),
            ("feat_rec", self.feat_rec),
            ("mrf", self.mrf),
            ("adv", self.adv),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term, step });
            }
        }
        Ok(())
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean absolute pixel difference.
pub fn pixel_rec_loss(tape: &mut Tape, gt: Var, pred: Var) -> Result<Var> {
    same_shape(tape, gt, pred, "pixel reconstruction")?;
    Ok(tape.l1_mean(pred, gt))
}

/// Mean absolute difference between predicted and encoded centre features.
pub fn feat_rec_loss(tape: &mut Tape, f_cen: Var, enc_center: Var) -> Result<Var> {
    same_shape(tape, f_cen, enc_center, "feature reconstruction (geometry mismatch?)")?;
    Ok(tape.l1_mean(f_cen, enc_center))
}

/// Texture loss between lists of `(B, h, w, c)` feature maps, one per scale.
/// Per scale and image it compares every generated site `v` against every
/// real site `s` by cosine similarity, forms relative similarities
/// `exp((mu / (max_r mu(v, r) + eps)) / bandwidth)`, normalises them over `s`
/// and scores `-log(mean_s max_v)`. Scales are summed, images averaged.
pub fn idmrf_loss(tape: &mut Tape, fake: &[Var], real: &[Var], bandwidth: f64, eps: f64) -> Result<Var> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::Shape(format!(
            "texture loss needs matching feature lists, got {} and {}",
            fake.len(),
            real.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&f, &r) in fake.iter().zip(real) {
        same_shape(tape, f, r, "texture features")?;
        let s = tape.shape(f).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("features {s:?} are not (B, h, w, c)")));
        }
        let (b, n, c) = (s[0], s[1] * s[2], s[3]);
        let fs = tape.reshape(f, &[b * n, c]);
        let rs = tape.reshape(r, &[b * n, c]);
        let fh = unit_rows(tape, fs);
        let rh = unit_rows(tape, rs);
        let mut per_image = Vec::with_capacity(b);
        for i in 0..b {
            let fi = rows(tape, fh, i * n, n, c);
            let ri = rows(tape, rh, i * n, n, c);
            per_image.push(mrf_single(tape, fi, ri, bandwidth, eps));
        }
        let stacked = tape.concat(&per_image, 0);
        let mean = tape.mean_all(stacked);
        total = Some(match total {
            Some(t) => tape.add(t, mean),
            None => mean,
        });
    }
    Ok(total.expect("non-empty"))
}

fn rows(tape: &mut Tape, x: Var, start: usize, n: usize, c: usize) -> Var {
    let index = (start * c..(start + n) * c).map(|i| i as u32).collect();
    tape.gather(x, index, &[n, c])
}

fn unit_rows(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.square(x);
    let ss = tape.reduce_last(sq, Reduce::Sum);
    let ss = tape.add_scalar(ss, NORM_EPS);
    let norm = tape.sqrt(ss);
    tape.row_op(x, norm, RowOp::Div)
}

/// `(Nf, C)` and `(Nr, C)` unit rows to a rank-1 `(1)` loss.
fn mrf_single(tape: &mut Tape, fake: Var, real: Var, bandwidth: f64, eps: f64) -> Var {
    let mu = tape.matmul(fake, real, true);
    let best = tape.reduce_last(mu, Reduce::Max);
    let best = tape.add_scalar(best, eps);
    let rel = tape.row_op(mu, best, RowOp::Div);
    let rel = tape.scale(rel, 1.0 / bandwidth);
    let rs = tape.exp(rel);
    let z = tape.reduce_last(rs, Reduce::Sum);
    let rs_bar = tape.row_op(rs, z, RowOp::Div);
    // max over generated sites for each real site
    let sz = tape.shape(rs_bar).to_vec();
    let (nf, nr) = (sz[0], sz[1]);
    let index = (0..nr)
        .flat_map(|s| (0..nf).map(move |v| (v * nr + s) as u32))
        .collect();
    let by_real = tape.gather(rs_bar, index, &[nr, nf]);
    let best_v = tape.reduce_last(by_real, Reduce::Max);
    let mean = tape.mean_all(best_v);
    let l = tape.ln(mean);
    let l = tape.scale(l, -1.0);
    tape.reshape(l, &[1])
}

/// Relativistic average least-squares losses from per-image scores.
/// Returns `(L_D, L_G)`.
pub fn ralsgan_losses(tape: &mut Tape, real: Var, fake: Var) -> Result<(Var, Var)> {
    for v in [real, fake] {
        let s = tape.shape(v);
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::Shape(format!("scores must be a non-empty vector, got {s:?}")));
        }
    }
    let mean_r = tape.mean_all(real);
    let mean_f = tape.mean_all(fake);
    let real_rel = tape.row_op(real, mean_f, RowOp::Sub);
    let fake_rel = tape.row_op(fake, mean_r, RowOp::Sub);
    let term = |tape: &mut Tape, x: Var, target: f64| {
        let d = tape.add_scalar(x, -target);
        let sq = tape.square(d);
        tape.mean_all(sq)
    };
    let d1 = term(tape, real_rel, 1.0);
    let d2 = term(tape, fake_rel, -1.0);
    let g1 = term(tape, fake_rel, 1.0);
    let g2 = term(tape, real_rel, -1.0);
    Ok((tape.add(d1, d2), tape.add(g1, g2)))
}

/// Generator loss term vars.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec: Var,
    pub feat_rec: Var,
    pub mrf: Var,
    pub adv: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        LossParts {
            rec: tape.value(self.rec).item(),
            feat_rec: tape.value(self.feat_rec).item(),
            mrf: tape.value(self.mrf).item(),
            adv: tape.value(self.adv).item(),
        }
    }
}

/// Weighted sum of the generator terms.
pub fn total_generator_loss(tape: &mut Tape, parts: &LossVars, w: &LossWeights) -> Var {
    let terms = [
        (parts.rec, w.lambda_rec),
        (parts.feat_rec, w.lambda_feat_rec),
        (parts.mrf, w.lambda_mrf),
        (parts.adv, w.lambda_adv),
    ];
    let mut total = tape.scale(terms[0].0, terms[0].1);
    for &(v, l) in &terms[1..] {
        let s = tape.scale(v, l);
        total = tape.add(total, s);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    /// Direct double loop over sites of one image.
    fn mrf_oracle(fake: &[Vec<f64>], real: &[Vec<f64>], h: f64, eps: f64) -> f64 {
        let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
        let mu: Vec<Vec<f64>> = fake
            .iter()
            .map(|v| {
                real.iter()
                    .map(|s| v.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / (norm(v) * norm(s)))
                    .collect()
            })
            .collect();
        let rs_bar: Vec<Vec<f64>> = mu
            .iter()
            .map(|row| {
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let rs: Vec<f64> = row.iter().map(|m| ((m / (best + eps)) / h).exp()).collect();
                let z: f64 = rs.iter().sum();
                rs.iter().map(|r| r / z).collect()
            })
            .collect();
        let mut acc = 0.0;
        for s in 0..real.len() {
            acc += (0..fake.len()).map(|v| rs_bar[v][s]).fold(f64::NEG_INFINITY, f64::max);
        }
        -(acc / real.len() as f64).ln()
    }

    fn sites(t: &Tensor, image: usize) -> Vec<Vec<f64>> {
        let s = t.shape();
        let (n, c) = (s[1] * s[2], s[3]);
        (0..n)
            .map(|i| t.data()[(image * n + i) * c..(image * n + i + 1) * c].to_vec())
            .collect()
    }

    fn mrf(fake: &[Tensor], real: &[Tensor]) -> f64 {
        let mut tape = Tape::inference();
        let f: Vec<Var> = fake.iter().map(|t| tape.constant(t.clone())).collect();
        let r: Vec<Var> = real.iter().map(|t| tape.constant(t.clone())).collect();
        let l = idmrf_loss(&mut tape, &f, &r, 0.5, 1e-5).unwrap();
        scalar(&tape, l)
    }

    #[test]
    fn pixel_and_feature_l1() {
        let mut tape = Tape::inference();
        let a = rand_t(&[2, 4, 4, 3], 1);
        let av = tape.constant(a.clone());
        let bv = tape.constant(a.map(|v| v + 0.5));
        let zero = pixel_rec_loss(&mut tape, av, av).unwrap();
        assert_eq!(scalar(&tape, zero), 0.0);
        let half = pixel_rec_loss(&mut tape, av, bv).unwrap();
        assert!((scalar(&tape, half) - 0.5).abs() < 1e-12);
        let b = rand_t(&[2, 4, 4, 3], 2);
        let bv = tape.constant(b.clone());
        let l = pixel_rec_loss(&mut tape, av, bv).unwrap();
        let want: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!((scalar(&tape, l) - want).abs() < 1e-14);

        let mut one_off = a.clone();
        one_off.data_mut()[7] += 1.0;
        let ov = tape.constant(one_off);
        let l = feat_rec_loss(&mut tape, av, ov).unwrap();
        assert!((scalar(&tape, l) - 1.0 / a.len() as f64).abs() < 1e-14);
        let wrong = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        assert!(feat_rec_loss(&mut tape, av, wrong).is_err());
    }

    #[test]
    fn idmrf_matches_double_loop() {
        for (seed, h, w) in [(1, 8, 8), (2, 3, 5), (3, 1, 4)] {
            let f = rand_t(&[2, h, w, 6], seed);
            let r = rand_t(&[2, h, w, 6], seed + 9);
            let f2 = rand_t(&[2, h, w, 4], seed + 20);
            let r2 = rand_t(&[2, h, w, 4], seed + 29);
            let want: f64 = (0..2)
                .map(|i| {
                    mrf_oracle(&sites(&f, i), &sites(&r, i), 0.5, 1e-5)
                        + mrf_oracle(&sites(&f2, i), &sites(&r2, i), 0.5, 1e-5)
                })
                .sum::<f64>()
                / 2.0;
            let got = mrf(&[f.clone(), f2.clone()], &[r.clone(), r2.clone()]);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            let same = mrf(std::slice::from_ref(&f), std::slice::from_ref(&f));
            let want_same = (0..2)
                .map(|i| mrf_oracle(&sites(&f, i), &sites(&f, i), 0.5, 1e-5))
                .sum::<f64>()
                / 2.0;
            assert!((same - want_same).abs() < 1e-12);
        }
    }

    #[test]
    fn idmrf_singleton_and_degenerate_cases() {
        let f = rand_t(&[3, 1, 1, 5], 4);
        let r = rand_t(&[3, 1, 1, 5], 5);
        assert!(mrf(&[f], &[r]).abs() < 1e-15);
        let zeros = Tensor::zeros(&[1, 3, 3, 4]);
        let l = mrf(std::slice::from_ref(&zeros), std::slice::from_ref(&zeros));
        assert!(l.is_finite());
        let mut tape = Tape::new();
        let z = tape.variable(zeros.clone());
        let loss = idmrf_loss(&mut tape, &[z], &[z], 0.5, 1e-5).unwrap();
        let g = tape.backward(loss);
        assert!(g.get(z).unwrap().all_finite());
    }

    #[test]
    fn idmrf_scale_invariant() {
        let f = rand_t(&[1, 4, 4, 3], 6);
        let r = rand_t(&[1, 4, 4, 3], 7);
        let base = mrf(&[f.clone()], &[r.clone()]);
        let scaled = mrf(&[f.map(|v| v * 3.7)], &[r.map(|v| v * 3.7)]);
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn ralsgan_hand_cases() {
        let mut tape = Tape::inference();
        let r = tape.constant(Tensor::new(&[1], vec![1.0]).unwrap());
        let f = tape.constant(Tensor::new(&[1], vec![0.0]).unwrap());
        let (d, g) = ralsgan_losses(&mut tape, r, f).unwrap();
        assert_eq!((scalar(&tape, d), scalar(&tape, g)), (0.0, 8.0));
        for v in [0.3, -2.0, 5.0] {
            let s = tape.constant(Tensor::full(&[3], v));
            let (d, g) = ralsgan_losses(&mut tape, s, s).unwrap();
            assert!((scalar(&tape, d) - 2.0).abs() < 1e-12);
            assert!((scalar(&tape, g) - 2.0).abs() < 1e-12);
        }
        let s = tape.constant(Tensor::new(&[3], vec![0.3, -2.0, 5.0]).unwrap());
        let empty = tape.constant(Tensor::zeros(&[0]));
        assert!(ralsgan_losses(&mut tape, empty, s).is_err());
    }

    #[test]
    fn total_loss_recombines() {
        let mut tape = Tape::inference();
        let one = tape.constant(Tensor::scalar(1.0));
        let parts = LossVars { rec: one, feat_rec: one, mrf: one, adv: one };
        let w = LossWeights::default();
        let t = total_generator_loss(&mut tape, &parts, &w);
        assert_eq!(scalar(&tape, t), 22.5);
        let zero_w = LossWeights { lambda_rec: 0.0, lambda_feat_rec: 0.0, lambda_mrf: 0.0, lambda_adv: 0.0 };
        let t = total_generator_loss(&mut tape, &parts, &zero_w);
        assert_eq!(scalar(&tape, t), 0.0);
        assert!(LossWeights { lambda_mrf: -1.0, ..w }.validate().is_err());
        let p = LossParts { rec: 0.25, feat_rec: 0.5, mrf: 2.0, adv: 0.125 };
        assert_eq!(p.total(&w), 20.0 * 0.25 + 0.5 + 0.5 * 2.0 + 0.125);
        assert!(matches!(
            LossParts { mrf: f64::NAN, ..p }.check_finite(9),
            Err(Error::NonFinite { term: "mrf", step: 9 })
        ));
    }

    proptest! {
        #[test]
        fn ralsgan_translation_invariant(
            r in prop::collection::vec(-3.0f64..3.0, 1..6),
            f in prop::collection::vec(-3.0f64..3.0, 1..6),
            c in -10.0f64..10.0,
        ) {
            let eval = |r: &[f64], f: &[f64]| {
                let mut tape = Tape::inference();
                let rv = tape.constant(Tensor::new(&[r.len()], r.to_vec()).unwrap());
                let fv = tape.constant(Tensor::new(&[f.len()], f.to_vec()).unwrap());
                let (d, g) = ralsgan_losses(&mut tape, rv, fv).unwrap();
                (scalar(&tape, d), scalar(&tape, g))
            };
            let (d0, g0) = eval(&r, &f);
            let rs: Vec<f64> = r.iter().map(|v| v + c).collect();
            let fs: Vec<f64> = f.iter().map(|v| v + c).collect();
            let (d1, g1) = eval(&rs, &fs);
            prop_assert!((d0 - d1).abs() < 1e-6 && (g0 - g1).abs() < 1e-6);
            prop_assert!(d0 >= 0.0 && g0 >= 0.0);
        }

        #[test]
        fn total_is_linear_in_each_part(
            parts in prop::array::uniform4(0.0f64..5.0),
            k in 0usize..4,
            delta in -2.0f64..2.0,
        ) {
            let w = LossWeights::default();
            let lambdas = [w.lambda_rec, w.lambda_feat_rec, w.lambda_mrf, w.lambda_adv];
            let eval = |p: [f64; 4]| {
                let mut tape = Tape::inference();
                let v: Vec<Var> = p.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
                let lv = LossVars { rec: v[0], feat_rec: v[1], mrf: v[2], adv: v[3] };
                let t = total_generator_loss(&mut tape, &lv, &w);
                scalar(&tape, t)
            };
            let mut moved = parts;
            moved[k] += delta;
            let diff = eval(moved) - eval(parts);
            prop_assert!((diff - lambdas[k] * delta).abs() < 1e-9);
        }

        #[test]
        fn losses_are_finite_and_non_negative(seed in 0u64..1000) {
            let a = rand_t(&[1, 3, 3, 4], seed);
            let b = rand_t(&[1, 3, 3, 4], seed + 1);
            let l = mrf(&[a.clone()], &[b.clone()]);
            prop_assert!(l.is_finite() && l >= -1e-12);
            let mut tape = Tape::inference();
            let (av, bv) = (tape.constant(a), tape.constant(b));
            let p = pixel_rec_loss(&mut tape, av, bv).unwrap();
            prop_assert!(scalar(&tape, p) >= 0.0);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..10 {
            let inputs = vec![
                rand_t(&[2, 3, 3, 4], seed),
                rand_t(&[2, 3, 3, 4], seed + 100),
                rand_t(&[2, 2, 2, 3], seed + 200),
                rand_t(&[2, 2, 2, 3], seed + 300),
                rand_t(&[3], seed + 400),
                rand_t(&[3], seed + 500),
            ];
            let report = check_gradients(&inputs, |tape, v| {
                let rec = pixel_rec_loss(tape, v[0], v[1]).unwrap();
                let feat = feat_rec_loss(tape, v[2], v[3]).unwrap();
                let mrf = idmrf_loss(tape, &[v[0], v[2]], &[v[1], v[3]], 0.5, 1e-5).unwrap();
                let (d, g) = ralsgan_losses(tape, v[4], v[5]).unwrap();
                let parts = LossVars { rec, feat_rec: feat, mrf, adv: g };
                let t = total_generator_loss(tape, &parts, &LossWeights::default());
                tape.add(t, d)
            });
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn each_loss_gradient_matches_finite_differences() {
        type LossFn = fn(&mut Tape, &[Var]) -> Var;
        let cases: [(&str, LossFn); 5] = [
            ("rec", |t, v| pixel_rec_loss(t, v[0], v[1]).unwrap()),
            ("feat", |t, v| feat_rec_loss(t, v[0], v[1]).unwrap()),
            ("mrf", |t, v| idmrf_loss(t, &[v[0]], &[v[1]], 0.5, 1e-5).unwrap()),
            ("d", |t, v| {
                let (r, f) = (t.reshape(v[0], &[54]), t.reshape(v[1], &[54]));
                ralsgan_losses(t, r, f).unwrap().0
            }),
            ("g", |t, v| {
                let (r, f) = (t.reshape(v[0], &[54]), t.reshape(v[1], &[54]));
                ralsgan_losses(t, r, f).unwrap().1
            }),
        ];
        for (name, f) in cases {
            for seed in 0..10 {
                let inputs = vec![rand_t(&[2, 3, 3, 3], seed), rand_t(&[2, 3, 3, 3], seed + 7)];
                let report = check_gradients(&inputs, f);
                assert!(report.max_rel_error < 1e-4, "{name} seed {seed}: {report:?}");
            }
        }
    }
}
