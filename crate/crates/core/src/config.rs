//! Run configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OutpaintGeometry, DEFAULT_FILL};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub center_h: usize,
    pub center_w: usize,
    pub margin: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    #[serde(default = "defaults::mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "defaults::init_std")]
    pub init_std: f64,
    #[serde(default = "defaults::ln_eps")]
    pub ln_eps: f64,
}

/// One encoder stage (mirrored in the decoder).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwinStageConfig {
    pub depth: usize,
    pub num_heads: usize,
    pub channels: usize,
    pub window: usize,
}

impl SwinStageConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(Error::Config(format!(
                "stage depth {} must be a positive even number (blocks come in pairs)",
                self.depth
            )));
        }
        if self.num_heads == 0 || self.channels % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by {} heads",
                self.channels, self.num_heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn stages(&self) -> Vec<SwinStageConfig> {
        self.depths
            .iter()
            .zip(&self.heads)
            .enumerate()
            .map(|(i, (&depth, &num_heads))| SwinStageConfig {
                depth,
                num_heads,
                channels: self.stage_channels(i),
                window: self.window,
            })
            .collect()
    }

    /// Cumulative spatial reduction at the output of `stage`.
    pub fn stage_downsample(&self, stage: usize) -> usize {
        self.patch << stage
    }

    /// Reduction from pixels to the bottleneck grid.
    pub fn downsample(&self) -> usize {
        self.stage_downsample(self.num_stages() - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.num_stages() - 1)
    }

    /// Heads of the regulating attention in the bottleneck predictor.
    pub fn bottleneck_heads(&self) -> usize {
        self.heads[self.num_stages() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return Err(Error::Config(format!(
                "depths {:?} and heads {:?} must be non-empty and equally long",
                self.depths, self.heads
            )));
        }
        if self.patch == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch, embed_dim and mlp_ratio must be positive".into()));
        }
        for s in self.stages() {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            layers: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Layers (0-based) whose activations feed the texture loss.
    pub layers: Vec<usize>,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 48, 64],
            strides: vec![2, 1, 2, 1],
            layers: vec![2, 3],
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_rec: f64,
    pub lambda_feat_rec: f64,
    pub lambda_mrf: f64,
    pub lambda_adv: f64,
    pub mrf_bandwidth: f64,
    pub mrf_eps: f64,
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_feat_rec: self.lambda_feat_rec,
            lambda_mrf: self.lambda_mrf,
            lambda_adv: self.lambda_adv,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 20.0,
            lambda_feat_rec: 1.0,
            lambda_mrf: 0.5,
            lambda_adv: 1.0,
            mrf_bandwidth: 0.5,
            mrf_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub train_discriminator: bool,
    pub fill: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            steps: 2000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            deterministic: true,
            checkpoint_every: 500,
            train_discriminator: true,
            fill: DEFAULT_FILL,
        }
    }
}

mod defaults {
    pub fn mlp_ratio() -> usize {
        4
    }
    pub fn init_std() -> f64 {
        0.02
    }
    pub fn ln_eps() -> f64 {
        1e-5
    }
}

impl Config {
    /// Desk-scale defaults: 32x32 centre, 8 pixel margin, two stages.
    pub fn toy() -> Self {
        Self {
            geometry: GeometryConfig {
                center_h: 32,
                center_w: 32,
                margin: 8,
            },
            model: ModelConfig {
                patch: 2,
                embed_dim: 16,
                depths: vec![2, 2],
                heads: vec![2, 4],
                window: 4,
                mlp_ratio: 4,
                init_std: 0.02,
                ln_eps: 1e-5,
            },
            discriminator: DiscriminatorConfig::default(),
            extractor: ExtractorConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }

    /// Full-size settings: 128x128 centre, 32 pixel margin, four stages.
    pub fn paper() -> Self {
        Self {
            geometry: GeometryConfig {
                center_h: 128,
                center_w: 128,
                margin: 32,
            },
            model: ModelConfig {
                patch: 4,
                embed_dim: 96,
                depths: vec![2, 2, 6, 2],
                heads: vec![3, 6, 12, 24],
                window: 7,
                mlp_ratio: 4,
                init_std: 0.02,
                ln_eps: 1e-5,
            },
            discriminator: DiscriminatorConfig::default(),
            extractor: ExtractorConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn geometry(&self) -> Result<OutpaintGeometry> {
        OutpaintGeometry::new(
            self.geometry.center_h,
            self.geometry.center_w,
            self.geometry.margin,
            self.model.downsample(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.geometry()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.geometry.margin == 0 {
            log::warn!("margin is 0: nothing will be outpainted");
        }
        let d = &self.discriminator;
        if d.layers == 0 || d.base_channels == 0 {
            return Err(Error::Config("discriminator needs at least one layer".into()));
        }
        let e = &self.extractor;
        if e.channels.is_empty()
            || e.channels.len() != e.strides.len()
            || e.layers.is_empty()
            || e.layers.iter().any(|&l| l >= e.channels.len())
        {
            return Err(Error::Config(format!("invalid extractor config {e:?}")));
        }
        let l = &self.loss;
        for (name, v) in [
            ("lambda_rec", l.lambda_rec),
            ("lambda_feat_rec", l.lambda_feat_rec),
            ("lambda_mrf", l.lambda_mrf),
            ("lambda_adv", l.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(l.mrf_bandwidth > 0.0) || !(l.mrf_eps > 0.0) {
            return Err(Error::Config("mrf_bandwidth and mrf_eps must be positive".into()));
        }
        let t = &self.train;
        if t.batch == 0 || t.steps == 0 {
            return Err(Error::Config("batch and steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}
