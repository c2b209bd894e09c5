//! Masking arithmetic: a centre block of `h x w` pixels surrounded by a ring
//! of `m` pixels on every side, and its image on the bottleneck feature grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value written into the masked ring (mid-gray in `[-1, 1]` space).
pub const DEFAULT_FILL: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutpaintGeometry {
    /// Centre height in pixels.
    pub h: usize,
    /// Centre width in pixels.
    pub w: usize,
    /// Margin added on each side.
    pub m: usize,
    /// Total spatial reduction of the encoder.
    pub downsample: usize,
}

/// Bottleneck grid sizes for one geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub center_h: usize,
    pub center_w: usize,
    pub ring: usize,
}

impl OutpaintGeometry {
    pub fn new(h: usize, w: usize, m: usize, downsample: usize) -> Result<Self> {
        let g = Self { h, w, m, downsample };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.downsample;
        if d == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Geometry(format!(
                "sizes must be positive: {self:?}"
            )));
        }
        for (name, v) in [
            ("h", self.h),
            ("w", self.w),
            ("m", self.m),
            ("h'", self.full_h()),
            ("w'", self.full_w()),
        ] {
            if v % d != 0 {
                return Err(Error::Geometry(format!(
                    "{name} = {v} is not divisible by the encoder downsample {d}"
                )));
            }
        }
        Ok(())
    }

    /// `h' = h + 2m`.
    pub fn full_h(&self) -> usize {
        self.h + 2 * self.m
    }

    /// `w' = w + 2m`.
    pub fn full_w(&self) -> usize {
        self.w + 2 * self.m
    }

    /// Number of pixels per channel that have to be predicted.
    pub fn masked_pixels(&self) -> usize {
        self.full_h() * self.full_w() - self.h * self.w
    }

    pub fn feature_grid(&self) -> FeatureGrid {
        let d = self.downsample;
        FeatureGrid {
            grid_h: self.full_h() / d,
            grid_w: self.full_w() / d,
            center_h: self.h / d,
            center_w: self.w / d,
            ring: self.m / d,
        }
    }

    /// Geometry after `steps` extrapolation steps of `m` pixels each.
    pub fn with_steps(&self, steps: usize) -> Self {
        Self {
            m: self.m * steps,
            ..*self
        }
    }

    /// True when pixel `(y, x)` of the `h' x w'` frame lies in the ring.
    pub fn in_ring(&self, y: usize, x: usize) -> bool {
        y < self.m || y >= self.m + self.h || x < self.m || x >= self.m + self.w
    }

    /// Ring mask over the `h' x w'` frame, 1 where content is predicted.
    pub fn ring_mask(&self) -> Vec<u8> {
        let (fh, fw) = (self.full_h(), self.full_w());
        (0..fh * fw)
            .map(|i| self.in_ring(i / fw, i % fw) as u8)
            .collect()
    }
}

/// Ground truth, its masked copy and the binary mask for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSample {
    pub masked_image: Tensor,
    /// `h' x w'`, 1 on the ring.
    pub mask: Vec<u8>,
    pub ground_truth: Tensor,
}

impl MaskedSample {
    /// The unmasked centre crop (`1 x h x w x 3`).
    pub fn center(&self, geom: &OutpaintGeometry) -> Tensor {
        self.ground_truth
            .crop4(geom.m, geom.m, geom.h, geom.w)
            .expect("validated geometry")
    }
}

/// Builds the masked input for `ground_truth` of size `1 x h' x w' x 3`.
pub fn make_masked_input(
    ground_truth: &Tensor,
    geom: &OutpaintGeometry,
    fill: f64,
) -> Result<MaskedSample> {
    geom.validate()?;
    let (b, h, w, c) = ground_truth.dims4()?;
    if b != 1 || h != geom.full_h() || w != geom.full_w() || c != 3 {
        return Err(Error::Geometry(format!(
            "ground truth {:?} does not match 1x{}x{}x3",
            ground_truth.shape(),
            geom.full_h(),
            geom.full_w()
        )));
    }
    let mask = geom.ring_mask();
    let mut masked = ground_truth.clone();
    for (px, chunk) in masked.data_mut().chunks_mut(3).enumerate() {
        if mask[px] == 1 {
            chunk.fill(fill);
        }
    }
    Ok(MaskedSample {
        masked_image: masked,
        mask,
        ground_truth: ground_truth.clone(),
    })
}

/// Embeds a `1 x h x w x 3` centre image into an `h' x w'` frame filled with
/// `fill`.
pub fn embed_center(center: &Tensor, geom: &OutpaintGeometry, fill: f64) -> Result<Tensor> {
    let (b, h, w, c) = center.dims4()?;
    if h != geom.h || w != geom.w || c != 3 {
        return Err(Error::Geometry(format!(
            "centre image {:?} does not match {}x{}x3",
            center.shape(),
            geom.h,
            geom.w
        )));
    }
    let (fh, fw) = (geom.full_h(), geom.full_w());
    let mut out = Tensor::full(&[b, fh, fw, 3], fill);
    let src = center.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for y in 0..h {
            let s = ((bi * h + y) * w) * 3;
            let d = ((bi * fh + y + geom.m) * fw + geom.m) * 3;
            dst[d..d + w * 3].copy_from_slice(&src[s..s + w * 3]);
        }
    }
    Ok(out)
}
