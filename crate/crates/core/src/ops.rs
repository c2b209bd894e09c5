//! Differentiable operations recorded on a [`Tape`].

use crate::autograd::{Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Sentinel in a [`Tape::gather`] index: the output element is zero.
pub const PAD: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn prefix_len(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(value, &[x], || {
            Box::new(|g, _, inputs| {
                vec![Some(g.clone().reshape(inputs[0].shape()).expect("same size"))]
            })
        })
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == PAD`.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, out_shape: &[usize]) -> Var {
        assert_eq!(index.len(), out_shape.iter().product::<usize>());
        let src = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { src[i as usize] })
            .collect();
        let value = Tensor::from_parts(out_shape.to_vec(), data);
        self.push(value, &[x], move || {
            Box::new(move |g, _, inputs| {
                let mut dx = Tensor::zeros(inputs[0].shape());
                let d = dx.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    if i != PAD {
                        d[i as usize] += gv;
                    }
                }
                vec![Some(dx)]
            })
        })
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let s = self.shape(x);
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                assert!(
                    s[..axis] == first[..axis] && s[axis + 1..] == first[axis + 1..],
                    "concat shape mismatch {s:?} vs {first:?}"
                );
                s[axis] * inner
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&x, &wd) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total / inner;
        let value = Tensor::from_parts(shape, data);
        self.push(value, xs, move || {
            Box::new(move |g, _, inputs| {
                let gd = g.data();
                let mut outs: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (buf, &wd) in outs.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&gd[off..off + wd]);
                        off += wd;
                    }
                }
                outs.into_iter()
                    .zip(inputs)
                    .map(|(d, x)| Some(Tensor::from_parts(x.shape().to_vec(), d)))
                    .collect()
            })
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, &[a, b], || {
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, &[a, b], || {
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, &[a, b], || {
            Box::new(|g, _, inputs| {
                vec![
                    Some(g.zip_map(inputs[1], |g, y| g * y)),
                    Some(g.zip_map(inputs[0], |g, x| g * x)),
                ]
            })
        })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, &[x], move || {
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))])
        })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, &[x], || Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Elementwise op between `x: (..., n)` and `r: (...)`, broadcasting `r`
    /// along the trailing axis.
    pub fn row_op(&mut self, x: Var, r: Var, op: RowOp) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(
            self.shape(r),
            &xs[..xs.len().saturating_sub(1)],
            "row_op: {:?} does not match rows of {:?}",
            self.shape(r),
            xs
        );
        let n = self.value(x).last_dim();
        let rv = self.value(r).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = rv[i / n];
                match op {
                    RowOp::Add => v + s,
                    RowOp::Sub => v - s,
                    RowOp::Mul => v * s,
                    RowOp::Div => v / s,
                }
            })
            .collect();
        let value = Tensor::from_parts(xs, data);
        self.push(value, &[x, r], move || {
            Box::new(move |g, out, inputs| {
                let (xv, rv) = (inputs[0].data(), inputs[1].data());
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                let mut dr = vec![0.0; rv.len()];
                for i in 0..gd.len() {
                    let row = i / n;
                    let s = rv[row];
                    match op {
                        RowOp::Add => {
                            dx[i] = gd[i];
                            dr[row] += gd[i];
                        }
                        RowOp::Sub => {
                            dx[i] = gd[i];
                            dr[row] -= gd[i];
                        }
                        RowOp::Mul => {
                            dx[i] = gd[i] * s;
                            dr[row] += gd[i] * xv[i];
                        }
                        RowOp::Div => {
                            dx[i] = gd[i] / s;
                            dr[row] -= gd[i] * out.data()[i] / s;
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx)),
                    Some(Tensor::from_parts(inputs[1].shape().to_vec(), dr)),
                ]
            })
        })
    }

    /// Reduction over the trailing axis.
    pub fn reduce_last(&mut self, x: Var, how: Reduce) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(!xs.is_empty(), "reduce_last on a scalar");
        let n = xs[xs.len() - 1];
        assert!(n > 0, "reduce_last over an empty axis");
        let rows = prefix_len(&xs);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows);
        let mut argmax = Vec::new();
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            match how {
                Reduce::Sum => data.push(row.iter().sum()),
                Reduce::Mean => data.push(row.iter().sum::<f64>() / n as f64),
                Reduce::Max => {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    argmax.push(best);
                    data.push(row[best]);
                }
            }
        }
        let value = Tensor::from_parts(xs[..xs.len() - 1].to_vec(), data);
        self.push(value, &[x], move || {
            Box::new(move |g, _, inputs| {
                let gd = g.data();
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    match how {
                        Reduce::Sum => dx[r * n..(r + 1) * n].fill(gd[r]),
                        Reduce::Mean => dx[r * n..(r + 1) * n].fill(gd[r] / n as f64),
                        Reduce::Max => dx[r * n + argmax[r]] = gd[r],
                    }
                }
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
            })
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], || {
            Box::new(|g, _, inputs| vec![Some(Tensor::full(inputs[0].shape(), g.item()))])
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(value, &[x], move || {
            Box::new(move |g, _, inputs| {
                vec![Some(Tensor::full(inputs[0].shape(), g.item() / n))]
            })
        })
    }

    /// Mean absolute difference; the subgradient of `|0|` is taken as 0.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "l1_mean shape mismatch");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = av.len() as f64;
        let total: f64 = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(total / n);
        self.push(value, &[a, b], move || {
            Box::new(move |g, _, inputs| {
                let s = g.item() / n;
                let da = inputs[0].zip_map(inputs[1], |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                });
                let db = da.map(|v| -v);
                vec![Some(da), Some(db)]
            })
        })
    }

    /// Elementwise function with derivative `df(x, y)` in terms of input and output.
    pub fn unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(value, &[x], move || {
            Box::new(move |g, out, inputs| {
                let d = g
                    .data()
                    .iter()
                    .zip(inputs[0].data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            })
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |x| if x > 0.0 { x } else { LEAKY_SLOPE * x },
            |x, _| if x > 0.0 { 1.0 } else { LEAKY_SLOPE },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, gelu_grad)
    }

    /// `x @ w (+ b)` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "weight must be (in, out)");
        let (k, n) = (ws[0], ws[1]);
        assert_eq!(xs.last(), Some(&k), "linear: input {xs:?} vs weight {ws:?}");
        let m = prefix_len(&xs);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), n, "bias length");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            1.0,
            &mut out,
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_parts(shape, out);
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        let has_bias = b.is_some();
        self.push(value, &parents, move || {
            Box::new(move |g, _, inputs| {
                let (xv, wv) = (inputs[0], inputs[1]);
                let mut dx = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, wv.data(), true, 0.0, &mut dx);
                let mut dw = vec![0.0; k * n];
                gemm(k, m, n, xv.data(), true, g.data(), false, 0.0, &mut dw);
                let mut grads = vec![
                    Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
                    Some(Tensor::from_parts(wv.shape().to_vec(), dw)),
                ];
                if has_bias {
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    grads.push(Some(Tensor::from_parts(vec![n], db)));
                }
                grads
            })
        })
    }

    /// Plain 2-D product `a @ b` or `a @ b^T`.
    pub fn matmul(&mut self, a: Var, b: Var, b_transposed: bool) -> Var {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(asz.len() == 2 && bsz.len() == 2, "matmul needs matrices");
        let (m, k) = (asz[0], asz[1]);
        let n = if b_transposed { bsz[0] } else { bsz[1] };
        let kb = if b_transposed { bsz[1] } else { bsz[0] };
        assert_eq!(k, kb, "matmul inner dims {asz:?} x {bsz:?}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_transposed,
            0.0,
            &mut out,
        );
        let value = Tensor::from_parts(vec![m, n], out);
        self.push(value, &[a, b], move || {
            Box::new(move |g, _, inputs| {
                let (av, bv) = (inputs[0].data(), inputs[1].data());
                let mut da = vec![0.0; m * k];
                // dA = dC B^T (or dC B when B was used transposed)
                gemm(m, n, k, g.data(), false, bv, !b_transposed, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                if b_transposed {
                    // dB (n x k) = dC^T A
                    gemm(n, m, k, g.data(), true, av, false, 0.0, &mut db);
                } else {
                    gemm(k, m, n, av, true, g.data(), false, 0.0, &mut db);
                }
                vec![
                    Some(Tensor::from_parts(inputs[0].shape().to_vec(), da)),
                    Some(Tensor::from_parts(inputs[1].shape().to_vec(), db)),
                ]
            })
        })
    }

    /// Layer normalisation over the trailing axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().expect("layer_norm on scalar");
        let rows = prefix_len(&xs);
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        assert!(gv.len() == n && bv.len() == n, "layer_norm affine length");
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::from_parts(xs, out);
        self.push(value, &[x, gamma, beta], move || {
            Box::new(move |g, _, inputs| {
                let gd = g.data();
                let gv = inputs[1].data();
                let mut dx = vec![0.0; rows * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let off = r * n;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let gj = gd[off + j];
                        dg[j] += gj * xhat[off + j];
                        db[j] += gj;
                        dxhat[j] = gj * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[off + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        dx[off + j] = inv_std[r] * (dxhat[j] - mean_d - xhat[off + j] * mean_dx);
                    }
                }
                vec![
                    Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx)),
                    Some(Tensor::from_parts(vec![n], dg)),
                    Some(Tensor::from_parts(vec![n], db)),
                ]
            })
        })
    }
}

const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64, _: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn gather_pads_with_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.gather(x, vec![2, PAD, 0, 2], &[4]);
        assert_eq!(tape.value(y).data(), &[3.0, 0.0, 1.0, 3.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::from_fn(&[2, 1], |i| i as f64));
        let b = tape.variable(Tensor::from_fn(&[2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1);
        assert_eq!(tape.value(c).data(), &[0.0, 10.0, 11.0, 1.0, 12.0, 13.0]);
        let w = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let p = tape.mul(c, w);
        let s = tape.sum_all(p);
        let g = tape.backward(s);
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 3.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::inference();
        let x = tape.variable(Tensor::scalar(2.0));
        assert!(!tape.requires_grad(x));
        let y = tape.square(x);
        assert_eq!(tape.value(y).item(), 4.0);
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..10 {
            let inputs = vec![
                rand_t(&[3, 4], seed),
                rand_t(&[4, 5], seed + 100),
                rand_t(&[5], seed + 200),
                rand_t(&[3, 4], seed + 300).map(|v| v + 2.0),
            ];
            let report = check_gradients(&inputs, |tape, v| {
                let h = tape.linear(v[0], v[1], Some(v[2]));
                let h = tape.gelu(h);
                let t = tape.tanh(h);
                let s = tape.sigmoid(h);
                let m = tape.mul(t, s);
                let m2 = tape.matmul(m, v[1], true);
                let r = tape_row(tape, v[3]);
                let q = tape.row_op(m2, r, RowOp::Div);
                let e = tape.exp(q);
                let mx = tape.reduce_last(e, Reduce::Max);
                let mean = tape.reduce_last(e, Reduce::Mean);
                let l = tape.ln(v[3]);
                let sq = tape.sqrt(v[3]);
                let a = tape.sum_all(mx);
                let b = tape.mean_all(mean);
                let c = tape.l1_mean(l, sq);
                let ab = tape.add(a, b);
                tape.sub(ab, c)
            });
            assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
        }
    }

    fn tape_row(tape: &mut Tape, x: Var) -> Var {
        tape.reduce_last(x, Reduce::Sum)
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        for seed in 0..10 {
            let inputs = vec![
                rand_t(&[2, 3, 6], seed),
                rand_t(&[6], seed + 1),
                rand_t(&[6], seed + 2),
                rand_t(&[2, 3, 6], seed + 3),
            ];
            let report = check_gradients(&inputs, |tape, v| {
                let y = tape.layer_norm(v[0], v[1], v[2], 1e-5);
                let p = tape.mul(y, v[3]);
                tape.sum_all(p)
            });
            assert!(report.max_rel_error < 1e-6, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let mut tape = Tape::inference();
        let x = tape.constant(rand_t(&[4, 8], 3));
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-5);
        for row in tape.value(y).data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
    }
}
