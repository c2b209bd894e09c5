//! Scaled dot-product attention with additive bias and key masking, plus the
//! relative position bias lookup used inside windows.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Logit assigned to masked keys before the softmax.
const MASKED_LOGIT: f64 = -1e30;

/// Number of entries in the bias table for window size `m`.
pub fn bias_table_len(window: usize) -> usize {
    (2 * window - 1) * (2 * window - 1)
}

/// For every pair `(i, j)` of in-window positions, the table slot holding
/// their bias: `(dy + M - 1) * (2M - 1) + (dx + M - 1)` with `(dy, dx)` the
/// offset from `j` to `i`. Row-major `M^2 x M^2`.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let m = window as isize;
    let t = window * window;
    let mut index = Vec::with_capacity(t * t);
    for i in 0..t as isize {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t as isize {
            let (yj, xj) = (j / m, j % m);
            let dy = yi - yj + m - 1;
            let dx = xi - xj + m - 1;
            index.push((dy * (2 * m - 1) + dx) as u32);
        }
    }
    index
}

/// Expands a per-head table into the full bias: `(heads, M^2, M^2)`.
pub fn relative_position_bias(table: &Tensor, window: usize) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let t = tape.constant(table.clone());
    let b = tape.relative_position_bias(t, window)?;
    Ok(tape.value(b).clone())
}

impl Tape {
    /// Differentiable form of [`relative_position_bias`]; `table` is
    /// `(heads, (2M-1)^2)`.
    pub fn relative_position_bias(&mut self, table: Var, window: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let len = bias_table_len(window);
        if shape.len() != 2 || shape[1] != len {
            return Err(Error::Shape(format!(
                "bias table {shape:?} should be (heads, {len}) for window {window}"
            )));
        }
        let heads = shape[0];
        let base = relative_position_index(window);
        let t = window * window;
        let mut index = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            index.extend(base.iter().map(|&i| (h * len) as u32 + i));
        }
        Ok(self.gather(table, index, &[heads, t, t]))
    }

    /// `softmax(Q K^T / sqrt(d) + B) V` for a batch of groups.
    ///
    /// * `q`: `(G, Tq, d)`, `k`: `(G, Tk, d)`, `v`: `(G, Tk, dv)`
    /// * `bias`: `(Hb, Tq, Tk)`, group `g` uses slice `g % Hb`
    /// * `key_valid`: `G * Tk` flags; invalid keys get zero weight. A query
    ///   with no valid key produces a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        key_valid: Option<Vec<bool>>,
    ) -> Var {
        let (qs, ks, vs) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        assert!(qs.len() == 3 && ks.len() == 3 && vs.len() == 3, "attention wants rank-3 inputs");
        let (g, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        let dv = vs[2];
        assert!(ks[0] == g && vs[0] == g && ks[2] == d && vs[1] == tk, "attention shapes {qs:?} {ks:?} {vs:?}");
        let hb = bias.map(|b| {
            let bs = self.shape(b);
            assert!(bs.len() == 3 && bs[1] == tq && bs[2] == tk, "bias shape {bs:?}");
            bs[0]
        });
        if let Some(mask) = &key_valid {
            assert_eq!(mask.len(), g * tk, "mask length");
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let bv = bias.map(|b| self.value(b).data());

        let mut probs = vec![0.0; g * tq * tk];
        let mut out = vec![0.0; g * tq * dv];
        for gi in 0..g {
            let p = &mut probs[gi * tq * tk..(gi + 1) * tq * tk];
            gemm(
                tq,
                d,
                tk,
                &qv[gi * tq * d..(gi + 1) * tq * d],
                false,
                &kv[gi * tk * d..(gi + 1) * tk * d],
                true,
                0.0,
                p,
            );
            let bias_slice = bv.map(|b| {
                let h = gi % hb.unwrap();
                &b[h * tq * tk..(h + 1) * tq * tk]
            });
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let mut any = false;
                for (j, s) in row.iter_mut().enumerate() {
                    let valid = key_valid.as_ref().is_none_or(|m| m[gi * tk + j]);
                    if valid {
                        *s = *s * scale + bias_slice.map_or(0.0, |b| b[i * tk + j]);
                        any = true;
                    } else {
                        *s = MASKED_LOGIT;
                    }
                }
                if !any {
                    row.fill(0.0);
                    continue;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = if *s == MASKED_LOGIT { 0.0 } else { (*s - max).exp() };
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            gemm(
                tq,
                tk,
                dv,
                p,
                false,
                &vv[gi * tk * dv..(gi + 1) * tk * dv],
                false,
                0.0,
                &mut out[gi * tq * dv..(gi + 1) * tq * dv],
            );
        }
        let value = Tensor::from_parts(vec![g, tq, dv], out);
        let mut parents = vec![q, k, v];
        parents.extend(bias);
        self.push(value, &parents, move || {
            Box::new(move |grad, _, inputs| {
                let (qv, kv, vv) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
                let gd = grad.data();
                let mut dq = vec![0.0; g * tq * d];
                let mut dk = vec![0.0; g * tk * d];
                let mut dvv = vec![0.0; g * tk * dv];
                let mut db = hb.map(|h| vec![0.0; h * tq * tk]);
                let mut dp = vec![0.0; tq * tk];
                for gi in 0..g {
                    let p = &probs[gi * tq * tk..(gi + 1) * tq * tk];
                    let go = &gd[gi * tq * dv..(gi + 1) * tq * dv];
                    // dV = P^T dO
                    gemm(tk, tq, dv, p, true, go, false, 0.0, &mut dvv[gi * tk * dv..(gi + 1) * tk * dv]);
                    // dP = dO V^T
                    gemm(tq, dv, tk, go, false, &vv[gi * tk * dv..(gi + 1) * tk * dv], true, 0.0, &mut dp);
                    // dS = P * (dP - rowsum(dP * P))
                    for i in 0..tq {
                        let pr = &p[i * tk..(i + 1) * tk];
                        let dr = &mut dp[i * tk..(i + 1) * tk];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (x, &pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let h = gi % hb.unwrap();
                        for (acc, s) in db[h * tq * tk..(h + 1) * tq * tk].iter_mut().zip(&dp) {
                            *acc += s;
                        }
                    }
                    for s in dp.iter_mut() {
                        *s *= scale;
                    }
                    // dQ = dS K, dK = dS^T Q
                    gemm(tq, tk, d, &dp, false, &kv[gi * tk * d..(gi + 1) * tk * d], false, 0.0, &mut dq[gi * tq * d..(gi + 1) * tq * d]);
                    gemm(tk, tq, d, &dp, true, &qv[gi * tq * d..(gi + 1) * tq * d], false, 0.0, &mut dk[gi * tk * d..(gi + 1) * tk * d]);
                }
                let mut grads = vec![
                    Some(Tensor::from_parts(vec![g, tq, d], dq)),
                    Some(Tensor::from_parts(vec![g, tk, d], dk)),
                    Some(Tensor::from_parts(vec![g, tk, dv], dvv)),
                ];
                if let Some(db) = db {
                    grads.push(Some(Tensor::from_parts(inputs[3].shape().to_vec(), db)));
                }
                grads
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Slot for the offset between two positions, found by scanning every
    /// offset in the table rather than by the closed-form index.
    fn brute_force_slot(window: usize, i: usize, j: usize) -> usize {
        let m = window as i64;
        let (yi, xi) = ((i / window) as i64, (i % window) as i64);
        let (yj, xj) = ((j / window) as i64, (j % window) as i64);
        let mut slot = 0;
        for dy in -(m - 1)..m {
            for dx in -(m - 1)..m {
                if dy == yi - yj && dx == xi - xj {
                    return slot;
                }
                slot += 1;
            }
        }
        unreachable!()
    }

    #[test]
    fn bias_index_matches_enumeration() {
        for window in [1, 2, 3, 7] {
            let index = relative_position_index(window);
            let t = window * window;
            assert_eq!(index.len(), t * t);
            for i in 0..t {
                for j in 0..t {
                    assert_eq!(index[i * t + j] as usize, brute_force_slot(window, i, j));
                }
            }
        }
    }

    #[test]
    fn bias_table_sizes() {
        assert_eq!(bias_table_len(7), 169);
        let table = Tensor::from_fn(&[2, 169], |i| i as f64);
        let b = relative_position_bias(&table, 7).unwrap();
        assert_eq!(b.shape(), &[2, 49, 49]);
        let one = relative_position_bias(&Tensor::new(&[1, 1], vec![3.5]).unwrap(), 1).unwrap();
        assert_eq!(one.data(), &[3.5]);
        let two = relative_position_bias(&Tensor::from_fn(&[1, 9], |i| i as f64), 2).unwrap();
        assert_eq!(two.data()[0], 4.0);
        assert!(relative_position_bias(&Tensor::zeros(&[1, 8]), 2).is_err());
    }

    fn attend(q: Tensor, k: Tensor, v: Tensor, mask: Option<Vec<bool>>) -> Tensor {
        let mut tape = Tape::inference();
        let (q, k, v) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let o = tape.attention(q, k, v, None, mask);
        tape.value(o).clone()
    }

    #[test]
    fn singleton_returns_value() {
        let o = attend(
            Tensor::new(&[1, 1, 2], vec![0.3, -0.2]).unwrap(),
            Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap(),
            Tensor::new(&[1, 1, 3], vec![5.0, 6.0, 7.0]).unwrap(),
            None,
        );
        assert_eq!(o.data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::uniform(&[1, 3, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::from_fn(&[1, 4, 2], |i| if i % 2 == 0 { 0.4 } else { -0.9 });
        let v = Tensor::uniform(&[1, 4, 2], -1.0, 1.0, &mut rng);
        let o = attend(q, k, v.clone(), None);
        for row in o.data().chunks(2) {
            for c in 0..2 {
                let mean = (0..4).map(|t| v.data()[t * 2 + c]).sum::<f64>() / 4.0;
                assert!((row[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_hand_example() {
        let o = attend(
            Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap(),
            Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap(),
            Tensor::new(&[1, 2, 1], vec![2.0, 4.0]).unwrap(),
            None,
        );
        // scalar oracle: weights e/(e+1), 1/(e+1) for the first query, uniform for the second
        let e = std::f64::consts::E;
        let first = 2.0 * e / (e + 1.0) + 4.0 / (e + 1.0);
        assert!((o.data()[0] - first).abs() < 1e-12);
        assert!((o.data()[0] - 2.5379).abs() < 1e-4);
        assert!((o.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let q = Tensor::new(&[1, 2, 1], vec![1.0, -1.0]).unwrap();
        let k = Tensor::new(&[1, 3, 1], vec![1.0, 0.0, 50.0]).unwrap();
        let v = Tensor::new(&[1, 3, 1], vec![2.0, 4.0, 1000.0]).unwrap();
        let masked = attend(q.clone(), k, v, Some(vec![true, true, false]));
        let reference = attend(
            q,
            Tensor::new(&[1, 2, 1], vec![1.0, 0.0]).unwrap(),
            Tensor::new(&[1, 2, 1], vec![2.0, 4.0]).unwrap(),
            None,
        );
        for (a, b) in masked.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let none = attend(
            Tensor::new(&[1, 1, 1], vec![1.0]).unwrap(),
            Tensor::new(&[1, 1, 1], vec![1.0]).unwrap(),
            Tensor::new(&[1, 1, 1], vec![9.0]).unwrap(),
            Some(vec![false]),
        );
        assert_eq!(none.data(), &[0.0]);
    }

    #[test]
    fn rows_sum_to_one_over_valid_keys() {
        // V = identity exposes the attention weights as the output rows.
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::uniform(&[2, 4, 3], -2.0, 2.0, &mut rng);
            let k = Tensor::uniform(&[2, 5, 3], -2.0, 2.0, &mut rng);
            let v = Tensor::from_fn(&[2, 5, 5], |i| if (i % 25) / 5 == i % 5 { 1.0 } else { 0.0 });
            let mask: Vec<bool> = (0..10).map(|i| i % 5 != 3).collect();
            let o = attend(q, k, v, Some(mask.clone()));
            for (r, row) in o.data().chunks(5).enumerate() {
                let g = r / 4;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert_eq!(row[3], 0.0);
                assert!(mask[g * 5..g * 5 + 5].iter().zip(row).all(|(&m, &p)| m || p == 0.0));
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs = vec![
                Tensor::uniform(&[4, 3, 2], -1.0, 1.0, &mut rng),
                Tensor::uniform(&[4, 5, 2], -1.0, 1.0, &mut rng),
                Tensor::uniform(&[4, 5, 3], -1.0, 1.0, &mut rng),
                Tensor::uniform(&[2, 3, 5], -1.0, 1.0, &mut rng),
                Tensor::uniform(&[4, 3, 3], -1.0, 1.0, &mut rng),
            ];
            let mask: Vec<bool> = (0..20).map(|i| i % 7 != 2).collect();
            let report = check_gradients(&inputs, |tape, v| {
                let o = tape.attention(v[0], v[1], v[2], Some(v[3]), Some(mask.clone()));
                let p = tape.mul(o, v[4]);
                tape.sum_all(p)
            });
            assert!(report.max_rel_error < 1e-6, "seed {seed}: {report:?}");
        }
    }
}
