//! Shifted-window transformer encoder and decoder with centre skip fusion.
//!
//! Feature maps are `(batch, height, width, channels)`. Windows that do not
//! tile the map are completed with zero padding, and padded positions are
//! excluded as attention keys; the shifted variant offsets the window grid by
//! `floor(M / 2)` instead of rolling the map.

use rand::Rng;

use crate::attention::bias_table_len;
use crate::autograd::{Bound, Tape, Var};
use crate::config::{ModelConfig, SwinStageConfig};
use crate::error::{Error, Result};
use crate::geometry::OutpaintGeometry;
use crate::ops::PAD;
use crate::params::Init;
use crate::tensor::Tensor;

/// Placement of `M x M` windows over an `h x w` grid, optionally shifted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl WindowLayout {
    /// Windows start at `-shift`; the grid is padded top/left by `shift` and
    /// bottom/right up to the next multiple of `window`.
    pub fn new(h: usize, w: usize, window: usize, shift: usize) -> Self {
        assert!(window > 0 && shift < window);
        Self {
            h,
            w,
            window,
            shift,
            padded_h: (h + shift).div_ceil(window) * window,
            padded_w: (w + shift).div_ceil(window) * window,
        }
    }

    pub fn windows_h(&self) -> usize {
        self.padded_h / self.window
    }

    pub fn windows_w(&self) -> usize {
        self.padded_w / self.window
    }

    pub fn num_windows(&self) -> usize {
        self.windows_h() * self.windows_w()
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Grid position of token `t` of window `(wy, wx)`, or `None` for padding.
    fn source(&self, wy: usize, wx: usize, t: usize) -> Option<(usize, usize)> {
        let py = wy * self.window + t / self.window;
        let px = wx * self.window + t % self.window;
        let y = py.checked_sub(self.shift)?;
        let x = px.checked_sub(self.shift)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Gather index producing `(batch * windows, M^2, channels)`.
    pub fn partition_index(&self, batch: usize, channels: usize) -> Vec<u32> {
        let nw = self.num_windows();
        let t = self.tokens();
        let mut index = Vec::with_capacity(batch * nw * t * channels);
        for b in 0..batch {
            for wy in 0..self.windows_h() {
                for wx in 0..self.windows_w() {
                    for tok in 0..t {
                        match self.source(wy, wx, tok) {
                            Some((y, x)) => {
                                let base = ((b * self.h + y) * self.w + x) * channels;
                                index.extend((0..channels).map(|c| (base + c) as u32));
                            }
                            None => index.extend(std::iter::repeat_n(PAD, channels)),
                        }
                    }
                }
            }
        }
        index
    }

    /// Gather index mapping windows back onto the unpadded grid.
    pub fn reverse_index(&self, batch: usize, channels: usize) -> Vec<u32> {
        let nw = self.num_windows();
        let t = self.tokens();
        let mut index = Vec::with_capacity(batch * self.h * self.w * channels);
        for b in 0..batch {
            for y in 0..self.h {
                for x in 0..self.w {
                    let (py, px) = (y + self.shift, x + self.shift);
                    let win = (py / self.window) * self.windows_w() + px / self.window;
                    let tok = (py % self.window) * self.window + px % self.window;
                    let base = ((b * nw + win) * t + tok) * channels;
                    index.extend((0..channels).map(|c| (base + c) as u32));
                }
            }
        }
        index
    }

    /// Per-window token validity, `batch * windows * M^2` flags.
    pub fn validity(&self, batch: usize) -> Vec<bool> {
        let mut valid = Vec::with_capacity(batch * self.num_windows() * self.tokens());
        for _ in 0..batch {
            for wy in 0..self.windows_h() {
                for wx in 0..self.windows_w() {
                    valid.extend((0..self.tokens()).map(|t| self.source(wy, wx, t).is_some()));
                }
            }
        }
        valid
    }
}

/// Splits `x` into windows: `(B * nW, M^2, C)` plus the layout and validity
/// needed to undo it.
pub fn window_partition(x: &Tensor, window: usize, shift: usize) -> Result<(Tensor, WindowLayout, Vec<bool>)> {
    let (b, h, w, c) = x.dims4()?;
    let layout = WindowLayout::new(h, w, window, shift);
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let out = tape.gather(v, layout.partition_index(b, c), &[b * layout.num_windows(), layout.tokens(), c]);
    Ok((tape.value(out).clone(), layout, layout.validity(b)))
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let s = windows.shape();
    if s.len() != 3 || s[1] != layout.tokens() || s[0] % layout.num_windows() != 0 {
        return Err(Error::Shape(format!("windows {s:?} do not match {layout:?}")));
    }
    let (b, c) = (s[0] / layout.num_windows(), s[2]);
    let mut tape = Tape::inference();
    let v = tape.constant(windows.clone());
    let out = tape.gather(v, layout.reverse_index(b, c), &[b, layout.h, layout.w, c]);
    Ok(tape.value(out).clone())
}

fn dims4(tape: &Tape, x: Var) -> Result<(usize, usize, usize, usize)> {
    match tape.shape(x) {
        &[b, h, w, c] => Ok((b, h, w, c)),
        s => Err(Error::Shape(format!("expected rank-4 feature map, got {s:?}"))),
    }
}

/// Linear embedding of non-overlapping `patch x patch` pixel blocks.
pub fn patch_embed(tape: &mut Tape, image: Var, patch: usize, w: Var, b: Var) -> Result<Var> {
    let (bs, h, wd, c) = dims4(tape, image)?;
    if h % patch != 0 || wd % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{wd} is not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, wd / patch);
    let raw = patch * patch * c;
    let mut index = Vec::with_capacity(bs * h * wd * c);
    for bi in 0..bs {
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..patch {
                    for px in 0..patch {
                        let base = ((bi * h + ty * patch + py) * wd + tx * patch + px) * c;
                        index.extend((0..c).map(|ch| (base + ch) as u32));
                    }
                }
            }
        }
    }
    let tokens = tape.gather(image, index, &[bs, gh, gw, raw]);
    Ok(tape.linear(tokens, w, Some(b)))
}

/// Inverse rearrangement of [`patch_embed`]'s flattening: `(B, gh, gw,
/// p*p*c)` tokens become a `(B, gh*p, gw*p, c)` image.
pub fn unpatchify(tape: &mut Tape, tokens: Var, patch: usize, channels: usize) -> Result<Var> {
    let (bs, gh, gw, raw) = dims4(tape, tokens)?;
    if raw != patch * patch * channels {
        return Err(Error::Shape(format!(
            "token width {raw} != {patch}*{patch}*{channels}"
        )));
    }
    let (h, w) = (gh * patch, gw * patch);
    let mut index = Vec::with_capacity(bs * h * w * channels);
    for bi in 0..bs {
        for y in 0..h {
            for x in 0..w {
                let tok = (bi * gh + y / patch) * gw + x / patch;
                let inner = ((y % patch) * patch + x % patch) * channels;
                index.extend((0..channels).map(|c| (tok * raw + inner + c) as u32));
            }
        }
    }
    Ok(tape.gather(tokens, index, &[bs, h, w, channels]))
}

/// Concatenates each 2x2 token group in the order (top-left, top-right,
/// bottom-left, bottom-right) and maps `4C -> 2C`.
pub fn patch_merge(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (bs, h, wd, c) = dims4(tape, x)?;
    if h % 2 != 0 || wd % 2 != 0 {
        return Err(Error::Shape(format!("patch merge needs even sizes, got {h}x{wd}")));
    }
    let (oh, ow) = (h / 2, wd / 2);
    let mut index = Vec::with_capacity(bs * h * wd * c);
    for bi in 0..bs {
        for y in 0..oh {
            for xx in 0..ow {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((bi * h + 2 * y + dy) * wd + 2 * xx + dx) * c;
                    index.extend((0..c).map(|ch| (base + ch) as u32));
                }
            }
        }
    }
    let grouped = tape.gather(x, index, &[bs, oh, ow, 4 * c]);
    Ok(tape.linear(grouped, w, Some(b)))
}

/// Maps `2C -> 4C` and spreads the four channel groups of every token over a
/// 2x2 block (group `g` lands at `(g / 2, g % 2)`), the inverse layout of
/// [`patch_merge`].
pub fn patch_expand(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (bs, h, wd, _) = dims4(tape, x)?;
    let y = tape.linear(x, w, Some(b));
    let c4 = tape.shape(y)[3];
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("expand output width {c4} not divisible by 4")));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut index = Vec::with_capacity(bs * oh * ow * c);
    for bi in 0..bs {
        for yy in 0..oh {
            for xx in 0..ow {
                let tok = (bi * h + yy / 2) * wd + xx / 2;
                let g = (yy % 2) * 2 + xx % 2;
                index.extend((0..c).map(|ch| (tok * c4 + g * c + ch) as u32));
            }
        }
    }
    Ok(tape.gather(y, index, &[bs, oh, ow, c]))
}

/// Rectangle on a feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// The centre block of `geom` on a grid reduced by `downsample`.
    pub fn center_of(geom: &OutpaintGeometry, downsample: usize) -> Self {
        Self {
            top: geom.m / downsample,
            left: geom.m / downsample,
            height: geom.h / downsample,
            width: geom.w / downsample,
        }
    }
}

/// Averages encoder and decoder features inside `center`; decoder features
/// pass through unchanged elsewhere.
pub fn skip_fuse(tape: &mut Tape, fe: Var, fd: Var, center: Region) -> Result<Var> {
    let (_, h, w, c) = dims4(tape, fd)?;
    if tape.shape(fe) != tape.shape(fd) {
        return Err(Error::Shape(format!(
            "skip fusion of {:?} and {:?}",
            tape.shape(fe),
            tape.shape(fd)
        )));
    }
    if center.top + center.height > h || center.left + center.width > w {
        return Err(Error::Shape(format!("centre {center:?} outside {h}x{w}")));
    }
    let inside: Vec<bool> = (0..h * w).map(|p| center.contains(p / w, p % w)).collect();
    let (ev, dv) = (tape.value(fe).data(), tape.value(fd).data());
    let data = dv
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if inside[(i / c) % (h * w)] {
                (ev[i] + d) / 2.0
            } else {
                d
            }
        })
        .collect();
    let value = Tensor::from_parts(tape.shape(fd).to_vec(), data);
    Ok(tape.push(value, &[fe, fd], move || {
        Box::new(move |g, _, _| {
            let mut de = vec![0.0; g.len()];
            let mut dd = vec![0.0; g.len()];
            for (i, &gv) in g.data().iter().enumerate() {
                if inside[(i / c) % (h * w)] {
                    de[i] = 0.5 * gv;
                    dd[i] = 0.5 * gv;
                } else {
                    dd[i] = gv;
                }
            }
            vec![
                Some(Tensor::from_parts(g.shape().to_vec(), de)),
                Some(Tensor::from_parts(g.shape().to_vec(), dd)),
            ]
        })
    }))
}

/// One transformer block: `x + MSA(LN(x))` followed by `x + MLP(LN(x))`,
/// with windows shifted by `floor(M/2)` when `shifted`.
pub fn swin_block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    stage: &SwinStageConfig,
    shifted: bool,
    ln_eps: f64,
) -> Result<Var> {
    let (b, h, w, c) = dims4(tape, x)?;
    if c != stage.channels {
        return Err(Error::Shape(format!(
            "{prefix}: input has {c} channels, stage expects {}",
            stage.channels
        )));
    }
    let heads = stage.num_heads;
    let d = stage.head_dim();
    let shift = if shifted { stage.window / 2 } else { 0 };
    let layout = WindowLayout::new(h, w, stage.window, shift);
    let nw = layout.num_windows();
    let t = layout.tokens();

    let xn = tape.layer_norm(x, p.var(&format!("{prefix}.ln1.g")), p.var(&format!("{prefix}.ln1.b")), ln_eps);
    let win = tape.gather(xn, layout.partition_index(b, c), &[b * nw, t, c]);
    let qkv = tape.linear(win, p.var(&format!("{prefix}.qkv.w")), Some(p.var(&format!("{prefix}.qkv.b"))));

    // (B*nW, T, 3C) -> three (B*nW*heads, T, d) tensors
    let split = |part: usize| -> Vec<u32> {
        let mut index = Vec::with_capacity(b * nw * t * c);
        for bw in 0..b * nw {
            for hh in 0..heads {
                for tok in 0..t {
                    let base = (bw * t + tok) * 3 * c + part * c + hh * d;
                    index.extend((0..d).map(|j| (base + j) as u32));
                }
            }
        }
        index
    };
    let g = b * nw * heads;
    let q = tape.gather(qkv, split(0), &[g, t, d]);
    let k = tape.gather(qkv, split(1), &[g, t, d]);
    let v = tape.gather(qkv, split(2), &[g, t, d]);
    let bias = tape.relative_position_bias(p.var(&format!("{prefix}.rpb")), stage.window)?;
    let valid = layout.validity(b);
    let mut key_valid = Vec::with_capacity(g * t);
    for bw in 0..b * nw {
        for _ in 0..heads {
            key_valid.extend_from_slice(&valid[bw * t..(bw + 1) * t]);
        }
    }
    let att = tape.attention(q, k, v, Some(bias), Some(key_valid));

    let mut merge = Vec::with_capacity(b * nw * t * c);
    for bw in 0..b * nw {
        for tok in 0..t {
            for hh in 0..heads {
                let base = ((bw * heads + hh) * t + tok) * d;
                merge.extend((0..d).map(|j| (base + j) as u32));
            }
        }
    }
    let merged = tape.gather(att, merge, &[b * nw, t, c]);
    let proj = tape.linear(merged, p.var(&format!("{prefix}.proj.w")), Some(p.var(&format!("{prefix}.proj.b"))));
    let back = tape.gather(proj, layout.reverse_index(b, c), &[b, h, w, c]);
    let x = tape.add(x, back);

    let xn = tape.layer_norm(x, p.var(&format!("{prefix}.ln2.g")), p.var(&format!("{prefix}.ln2.b")), ln_eps);
    let hdn = tape.linear(xn, p.var(&format!("{prefix}.fc1.w")), Some(p.var(&format!("{prefix}.fc1.b"))));
    let hdn = tape.gelu(hdn);
    let out = tape.linear(hdn, p.var(&format!("{prefix}.fc2.w")), Some(p.var(&format!("{prefix}.fc2.b"))));
    Ok(tape.add(x, out))
}

/// A regular-window block followed by a shifted-window block; blocks are
/// named `{prefix}.b{first}` and `{prefix}.b{first+1}`.
pub fn swin_block_pair(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    first: usize,
    x: Var,
    stage: &SwinStageConfig,
    ln_eps: f64,
) -> Result<Var> {
    let x = swin_block(tape, p, &format!("{prefix}.b{first}"), x, stage, false, ln_eps)?;
    swin_block(tape, p, &format!("{prefix}.b{}", first + 1), x, stage, true, ln_eps)
}

fn swin_stage(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, stage: &SwinStageConfig, ln_eps: f64) -> Result<Var> {
    let mut x = x;
    for first in (0..stage.depth).step_by(2) {
        x = swin_block_pair(tape, p, prefix, first, x, stage, ln_eps)?;
    }
    Ok(x)
}

/// Per-stage outputs of the encoder; the last entry is the bottleneck.
pub struct EncoderOutput {
    pub stages: Vec<Var>,
}

impl EncoderOutput {
    pub fn bottleneck(&self) -> Var {
        *self.stages.last().expect("at least one stage")
    }
}

pub fn encoder_forward(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, image: Var) -> Result<EncoderOutput> {
    let (_, h, w, c) = dims4(tape, image)?;
    let ds = cfg.downsample();
    if c != 3 || h % ds != 0 || w % ds != 0 {
        return Err(Error::Shape(format!(
            "encoder input {h}x{w}x{c} must be RGB with sides divisible by {ds}"
        )));
    }
    let mut x = patch_embed(tape, image, cfg.patch, p.var("enc.embed.w"), p.var("enc.embed.b"))?;
    let mut stages = Vec::with_capacity(cfg.num_stages());
    for (i, stage) in cfg.stages().iter().enumerate() {
        if i > 0 {
            x = patch_merge(tape, x, p.var(&format!("enc.merge{}.w", i - 1)), p.var(&format!("enc.merge{}.b", i - 1)))?;
        }
        x = swin_stage(tape, p, &format!("enc.s{i}"), x, stage, cfg.ln_eps)?;
        stages.push(x);
    }
    Ok(EncoderOutput { stages })
}

/// Mirrors the encoder from the bottleneck back to pixels. After each
/// up-sampling the centre block is fused with the encoder stage at the same
/// resolution. `geom` describes the output frame.
pub fn decoder_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    bottleneck: Var,
    skips: &[Var],
    geom: &OutpaintGeometry,
) -> Result<Var> {
    let stages = cfg.stages();
    let last = stages.len() - 1;
    let (_, gh, gw, gc) = dims4(tape, bottleneck)?;
    let ds = cfg.downsample();
    if gh * ds != geom.full_h() || gw * ds != geom.full_w() || gc != cfg.bottleneck_channels() {
        return Err(Error::Shape(format!(
            "bottleneck {gh}x{gw}x{gc} does not match a {}x{} frame",
            geom.full_h(),
            geom.full_w()
        )));
    }
    if skips.len() != stages.len() {
        return Err(Error::Shape(format!("expected {} skip features, got {}", stages.len(), skips.len())));
    }
    let mut x = swin_stage(tape, p, &format!("dec.s{last}"), bottleneck, &stages[last], cfg.ln_eps)?;
    for i in (0..last).rev() {
        x = patch_expand(tape, x, p.var(&format!("dec.expand{i}.w")), p.var(&format!("dec.expand{i}.b")))?;
        let center = Region::center_of(geom, cfg.stage_downsample(i));
        x = skip_fuse(tape, skips[i], x, center)?;
        x = swin_stage(tape, p, &format!("dec.s{i}"), x, &stages[i], cfg.ln_eps)?;
    }
    let tokens = tape.linear(x, p.var("dec.head.w"), Some(p.var("dec.head.b")));
    let img = unpatchify(tape, tokens, cfg.patch, 3)?;
    Ok(tape.tanh(img))
}

pub(crate) fn init_block<R: Rng>(init: &mut Init<'_, R>, prefix: &str, stage: &SwinStageConfig, mlp_ratio: usize) {
    let c = stage.channels;
    init.norm(&format!("{prefix}.ln1"), c);
    init.linear(&format!("{prefix}.qkv"), c, 3 * c);
    init.normal(&format!("{prefix}.rpb"), &[stage.num_heads, bias_table_len(stage.window)]);
    init.linear(&format!("{prefix}.proj"), c, c);
    init.norm(&format!("{prefix}.ln2"), c);
    init.linear(&format!("{prefix}.fc1"), c, mlp_ratio * c);
    init.linear(&format!("{prefix}.fc2"), mlp_ratio * c, c);
}

/// Registers encoder and decoder weights.
pub(crate) fn init_backbone<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let raw = cfg.patch * cfg.patch * 3;
    init.linear("enc.embed", raw, cfg.embed_dim);
    for (i, stage) in cfg.stages().iter().enumerate() {
        for side in ["enc", "dec"] {
            for j in 0..stage.depth {
                init_block(init, &format!("{side}.s{i}.b{j}"), stage, cfg.mlp_ratio);
            }
        }
        if i + 1 < cfg.num_stages() {
            let c = stage.channels;
            init.linear(&format!("enc.merge{i}"), 4 * c, 2 * c);
            init.linear(&format!("dec.expand{i}"), 2 * c, 4 * c);
        }
    }
    init.linear("dec.head", cfg.embed_dim, raw);
}
