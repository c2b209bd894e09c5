//! Bottleneck predictor that grows the centre feature map outward.
//!
//! The map is cut into height-1 bars. A 2-layer LSTM shared by every bar reads
//! each bar and keeps generating tokens past its end; the new tokens then
//! attend to the extended bar and its neighbours. A horizontal pass widens the
//! map, a vertical pass over the widened map adds rows (and corners), and a
//! layer norm finishes each step.

use rand::Rng;

use crate::autograd::{Bound, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::PAD;
use crate::params::Init;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Height-1 strips, read left to right.
    Row,
    /// Width-1 strips, read top to bottom.
    Column,
}

/// One strip of a `(1, H, W, C)` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBar {
    /// `(len, C)` tokens.
    pub tokens: Tensor,
    pub orientation: Orientation,
    pub index: usize,
}

/// Splits a single feature map into bars.
pub fn decompose_bars(map: &Tensor, orientation: Orientation) -> Result<Vec<FeatureBar>> {
    let (b, h, w, c) = map.dims4()?;
    if b != 1 {
        return Err(Error::Shape(format!("decompose_bars takes one map, got batch {b}")));
    }
    let d = map.data();
    let bars = match orientation {
        Orientation::Row => (0..h)
            .map(|y| FeatureBar {
                tokens: Tensor::from_parts(vec![w, c], d[y * w * c..(y + 1) * w * c].to_vec()),
                orientation,
                index: y,
            })
            .collect(),
        Orientation::Column => (0..w)
            .map(|x| {
                let mut data = Vec::with_capacity(h * c);
                for y in 0..h {
                    data.extend_from_slice(&d[(y * w + x) * c..(y * w + x + 1) * c]);
                }
                FeatureBar {
                    tokens: Tensor::from_parts(vec![h, c], data),
                    orientation,
                    index: x,
                }
            })
            .collect(),
    };
    Ok(bars)
}

/// Inverse of [`decompose_bars`]; bars must share one orientation and be
/// given in index order.
pub fn assemble_bars(bars: &[FeatureBar]) -> Result<Tensor> {
    let first = bars
        .first()
        .ok_or_else(|| Error::Shape("no bars to assemble".into()))?;
    let (len, c) = (first.tokens.shape()[0], first.tokens.shape()[1]);
    let n = bars.len();
    let mut rows = Vec::with_capacity(n * len * c);
    for (i, bar) in bars.iter().enumerate() {
        if bar.orientation != first.orientation || bar.index != i || bar.tokens.shape() != [len, c] {
            return Err(Error::Shape(format!("bar {i} does not fit the others")));
        }
        rows.extend_from_slice(bar.tokens.data());
    }
    let stacked = Tensor::from_parts(vec![1, n, len, c], rows);
    match first.orientation {
        Orientation::Row => Ok(stacked),
        Orientation::Column => Ok(transpose_hw(&stacked)),
    }
}

fn transpose_hw(t: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let v = tape.constant(t.clone());
    let out = transpose_spatial(&mut tape, v);
    tape.value(out).clone()
}

/// `(B, H, W, C) -> (B, W, H, C)`.
fn transpose_spatial(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for x_ in 0..w {
            for y in 0..h {
                let base = ((bi * h + y) * w + x_) * c;
                index.extend((0..c).map(|ch| (base + ch) as u32));
            }
        }
    }
    tape.gather(x, index, &[b, w, h, c])
}

/// `(N, L, C) -> (N, L, C)` with the sequence axis reversed.
fn reverse_sequences(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let (n, l, c) = (s[0], s[1], s[2]);
    let mut index = Vec::with_capacity(n * l * c);
    for i in 0..n {
        for t in (0..l).rev() {
            let base = (i * l + t) * c;
            index.extend((0..c).map(|ch| (base + ch) as u32));
        }
    }
    tape.gather(x, index, &[n, l, c])
}

/// Rows `[start, start + len)` of the leading axis.
fn take_leading(tape: &mut Tape, x: Var, start: usize, len: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let inner: usize = s[1..].iter().product();
    let index = (start * inner..(start + len) * inner).map(|i| i as u32).collect();
    let mut shape = s.clone();
    shape[0] = len;
    tape.gather(x, index, &shape)
}

/// Trailing-axis slice `[start, start + len)`.
fn slice_last(tape: &mut Tape, x: Var, start: usize, len: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let n = *s.last().unwrap();
    let rows: usize = s[..s.len() - 1].iter().product();
    let mut index = Vec::with_capacity(rows * len);
    for r in 0..rows {
        index.extend((r * n + start..r * n + start + len).map(|i| i as u32));
    }
    let mut shape = s.clone();
    *shape.last_mut().unwrap() = len;
    tape.gather(x, index, &shape)
}

/// Token `t` of every sequence: `(N, L, C) -> (N, C)`.
fn step_of(tape: &mut Tape, x: Var, t: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let (n, l, c) = (s[0], s[1], s[2]);
    let mut index = Vec::with_capacity(n * c);
    for i in 0..n {
        let base = (i * l + t) * c;
        index.extend((0..c).map(|ch| (base + ch) as u32));
    }
    tape.gather(x, index, &[n, c])
}

/// Crops a `(B, H, W, C)` var.
pub fn crop_var(tape: &mut Tape, x: Var, top: usize, left: usize, height: usize, width: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    assert!(top + height <= h && left + width <= w, "crop outside map");
    let mut index = Vec::with_capacity(b * height * width * c);
    for bi in 0..b {
        for y in top..top + height {
            for xx in left..left + width {
                let base = ((bi * h + y) * w + xx) * c;
                index.extend((0..c).map(|ch| (base + ch) as u32));
            }
        }
    }
    tape.gather(x, index, &[b, height, width, c])
}

struct LstmState {
    h: Var,
    c: Var,
}

fn lstm_cell(tape: &mut Tape, p: &Bound, prefix: &str, x_proj: Var, state: &LstmState) -> LstmState {
    let hh = tape.linear(state.h, p.var(&format!("{prefix}.wh")), None);
    let z = tape.add(x_proj, hh);
    let hidden = tape.shape(state.h)[1];
    let i = slice_last(tape, z, 0, hidden);
    let f = slice_last(tape, z, hidden, hidden);
    let g = slice_last(tape, z, 2 * hidden, hidden);
    let o = slice_last(tape, z, 3 * hidden, hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, state.c);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    LstmState { h, c }
}

/// Runs the 2-layer LSTM named `lstm` over `(N, L, C)` sequences, then keeps
/// generating `steps` tokens by feeding each projected output back in.
/// Returns `(N, steps, C)`, nearest token first.
pub fn extend_sequences(tape: &mut Tape, p: &Bound, lstm: &str, seqs: Var, steps: usize) -> Result<Option<Var>> {
    let s = tape.shape(seqs).to_vec();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::Shape(format!("sequences must be (N, L>=1, C), got {s:?}")));
    }
    if steps == 0 {
        return Ok(None);
    }
    let (n, l, c) = (s[0], s[1], s[2]);
    let l0 = format!("{lstm}.l0");
    let l1 = format!("{lstm}.l1");
    let zero = tape.constant(Tensor::zeros(&[n, c]));
    let mut s0 = LstmState { h: zero, c: zero };
    let mut s1 = LstmState { h: zero, c: zero };
    let proj_all = tape.linear(seqs, p.var(&format!("{l0}.wx")), Some(p.var(&format!("{l0}.b"))));

    let advance = |tape: &mut Tape, x0: Var, s0: &mut LstmState, s1: &mut LstmState| {
        *s0 = lstm_cell(tape, p, &l0, x0, s0);
        let x1 = tape.linear(s0.h, p.var(&format!("{l1}.wx")), Some(p.var(&format!("{l1}.b"))));
        *s1 = lstm_cell(tape, p, &l1, x1, s1);
    };
    for t in 0..l {
        let x0 = step_of(tape, proj_all, t);
        advance(tape, x0, &mut s0, &mut s1);
    }
    let mut outputs = Vec::with_capacity(steps);
    for k in 0..steps {
        if k > 0 {
            let prev = outputs[k - 1];
            let x0 = tape.linear(prev, p.var(&format!("{l0}.wx")), Some(p.var(&format!("{l0}.b"))));
            advance(tape, x0, &mut s0, &mut s1);
        }
        let y = tape.linear(s1.h, p.var("tsp.out.w"), Some(p.var("tsp.out.b")));
        outputs.push(y);
    }
    let stacked = tape.concat(&outputs, 1);
    Ok(Some(tape.reshape(stacked, &[n, steps, c])))
}

/// Extends every bar of `bars: (N, L, C)` by `steps` tokens on each side.
/// Returns `(left, right)`, each `(N, steps, C)` ordered outward from the bar.
pub fn extend_bar(tape: &mut Tape, p: &Bound, lstm: &str, bars: Var, steps: usize) -> Result<Option<(Var, Var)>> {
    let n = tape.shape(bars)[0];
    let rev = reverse_sequences(tape, bars);
    let both = tape.concat(&[bars, rev], 0);
    let Some(ext) = extend_sequences(tape, p, lstm, both, steps)? else {
        return Ok(None);
    };
    let right = take_leading(tape, ext, 0, n);
    let left = take_leading(tape, ext, n, n);
    Ok(Some((left, right)))
}

/// Multi-head attention from `queries: (N, Tq, C)` to `context: (N, Tk, C)`
/// with a residual connection on the queries.
pub fn regulate_bar(
    tape: &mut Tape,
    p: &Bound,
    queries: Var,
    context: Var,
    key_valid: Option<Vec<bool>>,
    heads: usize,
) -> Result<Var> {
    let (qs, ks) = (tape.shape(queries).to_vec(), tape.shape(context).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || ks[1] == 0 {
        return Err(Error::Shape(format!("regulate {qs:?} against {ks:?}")));
    }
    let (n, tq, c) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    if c % heads != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let q = tape.linear(queries, p.var("tsp.reg.q.w"), Some(p.var("tsp.reg.q.b")));
    let k = tape.linear(context, p.var("tsp.reg.k.w"), Some(p.var("tsp.reg.k.b")));
    let v = tape.linear(context, p.var("tsp.reg.v.w"), Some(p.var("tsp.reg.v.b")));
    let split = |t: usize| -> Vec<u32> {
        let mut index = Vec::with_capacity(n * t * c);
        for i in 0..n {
            for hh in 0..heads {
                for tok in 0..t {
                    let base = (i * t + tok) * c + hh * d;
                    index.extend((0..d).map(|j| (base + j) as u32));
                }
            }
        }
        index
    };
    let qh = tape.gather(q, split(tq), &[n * heads, tq, d]);
    let kh = tape.gather(k, split(tk), &[n * heads, tk, d]);
    let vh = tape.gather(v, split(tk), &[n * heads, tk, d]);
    let mask = key_valid.map(|m| {
        assert_eq!(m.len(), n * tk, "mask length");
        let mut out = Vec::with_capacity(n * heads * tk);
        for i in 0..n {
            for _ in 0..heads {
                out.extend_from_slice(&m[i * tk..(i + 1) * tk]);
            }
        }
        out
    });
    let att = tape.attention(qh, kh, vh, None, mask);
    let mut merge = Vec::with_capacity(n * tq * c);
    for i in 0..n {
        for tok in 0..tq {
            for hh in 0..heads {
                let base = ((i * heads + hh) * tq + tok) * d;
                merge.extend((0..d).map(|j| (base + j) as u32));
            }
        }
    }
    let merged = tape.gather(att, merge, &[n, tq, c]);
    let out = tape.linear(merged, p.var("tsp.reg.o.w"), Some(p.var("tsp.reg.o.b")));
    Ok(tape.add(queries, out))
}

/// Widens `(B, H, W, C)` to `(B, H, W + 2s, C)` using row bars.
fn horizontal_pass(tape: &mut Tape, p: &Bound, lstm: &str, x: Var, s: usize, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let n = b * h;
    let rows = tape.reshape(x, &[n, w, c]);
    let (left, right) = extend_bar(tape, p, lstm, rows, s)?.expect("s >= 1");
    let left_in_place = reverse_sequences(tape, left);
    let extended = tape.concat(&[left_in_place, rows, right], 1);
    let we = w + 2 * s;

    // context: extended bars r-1, r, r+1 of the same sample
    let tk = 3 * we;
    let mut index = Vec::with_capacity(n * tk * c);
    let mut valid = Vec::with_capacity(n * tk);
    for bi in 0..b {
        for r in 0..h {
            for dr in [-1isize, 0, 1] {
                let rr = r as isize + dr;
                let ok = rr >= 0 && rr < h as isize;
                for t in 0..we {
                    valid.push(ok);
                    if ok {
                        let base = ((bi * h + rr as usize) * we + t) * c;
                        index.extend((0..c).map(|ch| (base + ch) as u32));
                    } else {
                        index.extend(std::iter::repeat_n(PAD, c));
                    }
                }
            }
        }
    }
    let context = tape.gather(extended, index, &[n, tk, c]);
    let new_tokens = tape.concat(&[left_in_place, right], 1);
    let regulated = regulate_bar(tape, p, new_tokens, context, Some(valid), heads)?;
    let reg_left = take_middle(tape, regulated, 0, s);
    let reg_right = take_middle(tape, regulated, s, s);
    let out = tape.concat(&[reg_left, rows, reg_right], 1);
    Ok(tape.reshape(out, &[b, h, we, c]))
}

/// Middle-axis slice of `(N, L, C)`.
fn take_middle(tape: &mut Tape, x: Var, start: usize, len: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let (n, l, c) = (s[0], s[1], s[2]);
    let mut index = Vec::with_capacity(n * len * c);
    for i in 0..n {
        let base = (i * l + start) * c;
        index.extend((base..base + len * c).map(|v| v as u32));
    }
    tape.gather(x, index, &[n, len, c])
}

/// Predicts the surrounding ring: `(B, Hc, Wc, C) -> (B, Hc + 2ks, Wc + 2ks, C)`.
/// The centre block of the result is the input after the final norm(s).
pub fn tsp_forward(tape: &mut Tape, p: &Bound, center: Var, steps: usize, ring: usize, heads: usize, ln_eps: f64) -> Result<Var> {
    if steps == 0 || ring == 0 {
        return Err(Error::Shape(format!(
            "predictor needs steps >= 1 and ring >= 1, got steps={steps}, ring={ring}"
        )));
    }
    if tape.shape(center).len() != 4 {
        return Err(Error::Shape(format!("centre features {:?} are not rank 4", tape.shape(center))));
    }
    let mut x = center;
    for _ in 0..steps {
        x = horizontal_pass(tape, p, "tsp.lstm_h", x, ring, heads)?;
        let xt = transpose_spatial(tape, x);
        let xt = horizontal_pass(tape, p, "tsp.lstm_v", xt, ring, heads)?;
        x = transpose_spatial(tape, xt);
        x = tape.layer_norm(x, p.var("tsp.norm.g"), p.var("tsp.norm.b"), ln_eps);
    }
    Ok(x)
}

pub(crate) fn init_tsp<R: Rng>(init: &mut Init<'_, R>, channels: usize) {
    for dir in ["tsp.lstm_h", "tsp.lstm_v"] {
        for layer in ["l0", "l1"] {
            let prefix = format!("{dir}.{layer}");
            init.normal(&format!("{prefix}.wx"), &[channels, 4 * channels]);
            init.normal(&format!("{prefix}.wh"), &[channels, 4 * channels]);
            init.params
                .insert(format!("{prefix}.b"), Tensor::zeros(&[4 * channels]));
        }
    }
    init.linear("tsp.out", channels, channels);
    for name in ["q", "k", "v", "o"] {
        init.linear(&format!("tsp.reg.{name}"), channels, channels);
    }
    init.norm("tsp.norm", channels);
}
