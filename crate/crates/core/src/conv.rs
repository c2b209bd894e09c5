//! Convolutional networks: the image discriminator and the fixed feature
//! extractor used by the texture loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Bound, Tape, Var};
use crate::config::{DiscriminatorConfig, ExtractorConfig};
use crate::error::{Error, Result};
use crate::ops::PAD;
use crate::params::{Init, ParamSet};

pub const KERNEL: usize = 3;

/// Output side length of a 3x3 convolution with padding 1.
pub fn conv_out(size: usize, stride: usize) -> usize {
    (size + 2 - KERNEL) / stride + 1
}

/// 3x3 convolution with zero padding 1. `w` is `(9 * Cin, Cout)` with rows
/// ordered `(ky, kx, cin)`.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("conv input {s:?} is not (B, H, W, C)")));
    }
    let (bn, h, wd, c) = (s[0], s[1], s[2], s[3]);
    if tape.shape(w)[0] != KERNEL * KERNEL * c {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not take {c} channels",
            tape.shape(w)
        )));
    }
    let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
    let k = KERNEL * KERNEL * c;
    let mut index = Vec::with_capacity(bn * ho * wo * k);
    for bi in 0..bn {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let y = (oy * stride + ky) as isize - 1;
                        let xx = (ox * stride + kx) as isize - 1;
                        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                            index.extend(std::iter::repeat_n(PAD, c));
                        } else {
                            let base = ((bi * h + y as usize) * wd + xx as usize) * c;
                            index.extend((base..base + c).map(|i| i as u32));
                        }
                    }
                }
            }
        }
    }
    let cols = tape.gather(x, index, &[bn, ho, wo, k]);
    Ok(tape.linear(cols, w, Some(b)))
}

/// Strided conv stack with LeakyReLU, global mean pooling and a linear
/// score head. Parameters live under `disc.` and are rounded to `f32`.
pub fn init_discriminator(cfg: &DiscriminatorConfig, std: f64, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { params: &mut params, rng: &mut rng, std };
    let mut cin = 3;
    for i in 0..cfg.layers {
        let cout = cfg.base_channels << i;
        init.linear(&format!("disc.conv{i}"), KERNEL * KERNEL * cin, cout);
        cin = cout;
    }
    init.linear("disc.head", cin, 1);
    params.round_to_f32();
    params
}

/// Scores for `(B, H, W, 3)` images, shape `(B)`.
pub fn discriminator_forward(tape: &mut Tape, p: &Bound, cfg: &DiscriminatorConfig, image: Var) -> Result<Var> {
    let mut x = image;
    for i in 0..cfg.layers {
        let w = p.var(&format!("disc.conv{i}.w"));
        let b = p.var(&format!("disc.conv{i}.b"));
        x = conv2d(tape, x, w, b, 2)?;
        x = tape.leaky_relu(x);
    }
    let s = tape.shape(x).to_vec();
    let (bn, c) = (s[0], s[3]);
    // mean over sites: bring channels forward so the sites are the last axis
    let sites = s[1] * s[2];
    let mut index = Vec::with_capacity(bn * c * sites);
    for bi in 0..bn {
        for ch in 0..c {
            index.extend((0..sites).map(|p| ((bi * sites + p) * c + ch) as u32));
        }
    }
    let t = tape.gather(x, index, &[bn, c, sites]);
    let pooled = tape.reduce_last(t, crate::ops::Reduce::Mean);
    let score = tape.linear(pooled, p.var("disc.head.w"), Some(p.var("disc.head.b")));
    Ok(tape.reshape(score, &[bn]))
}

/// Image to multi-scale features. The default weights are random but fixed
/// by the seed; trained weights can be supplied instead.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    cfg: ExtractorConfig,
    params: ParamSet,
}

impl FeatureExtractor {
    pub fn seeded(cfg: &ExtractorConfig) -> Result<Self> {
        validate_extractor(cfg)?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cin = 3;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let fan_in = KERNEL * KERNEL * cin;
            let mut init = Init {
                params: &mut params,
                rng: &mut rng,
                std: (2.0 / fan_in as f64).sqrt(),
            };
            init.linear(&format!("extractor.conv{i}"), fan_in, cout);
            cin = cout;
        }
        params.round_to_f32();
        Ok(Self { cfg: cfg.clone(), params })
    }

    /// Uses externally supplied weights, which must match the seeded layout.
    pub fn from_params(cfg: &ExtractorConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::seeded(cfg)?;
        reference.params.check_compatible(&params)?;
        Ok(Self { cfg: cfg.clone(), params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Activations of the configured layers, each `(B, h, w, c)`.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let p = tape.bind(self.params.iter(), false);
        let last = *self.cfg.layers.iter().max().expect("validated");
        let mut x = image;
        let mut out = Vec::with_capacity(self.cfg.layers.len());
        for i in 0..=last {
            let w = p.var(&format!("extractor.conv{i}.w"));
            let b = p.var(&format!("extractor.conv{i}.b"));
            x = conv2d(tape, x, w, b, self.cfg.strides[i])?;
            x = tape.relu(x);
            if self.cfg.layers.contains(&i) {
                out.push(x);
            }
        }
        Ok(out)
    }
}

fn validate_extractor(cfg: &ExtractorConfig) -> Result<()> {
    if cfg.channels.is_empty() || cfg.channels.len() != cfg.strides.len() {
        return Err(Error::Config(
            "extractor needs one stride per conv layer".into(),
        ));
    }
    if cfg.channels.contains(&0) || cfg.strides.contains(&0) {
        return Err(Error::Config("extractor channels and strides must be positive".into()));
    }
    if cfg.layers.is_empty() || cfg.layers.iter().any(|&l| l >= cfg.channels.len()) {
        return Err(Error::Config(format!(
            "extractor output layers {:?} must name existing layers",
            cfg.layers
        )));
    }
    Ok(())
}
