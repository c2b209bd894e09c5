//! Browser bindings for the demo page in `www/`.
//!
//! Images cross the boundary as tightly packed RGBA bytes, the layout of
//! `ImageData.data`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use outpaint_core::attention::{bias_table_len, relative_position_bias};
use outpaint_core::checkpoint;
use outpaint_core::data::{image_to_tensor, synthetic_image, tensor_to_image};
use outpaint_core::geometry::{embed_center, OutpaintGeometry};
use outpaint_core::model::{init_generator, outpaint};
use outpaint_core::{Config, ParamSet, Tensor};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_rgba(rgb: &image::RgbImage) -> Vec<u8> {
    rgb.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn from_rgba(rgba: &[u8], width: u32, height: u32) -> Result<image::RgbImage, JsError> {
    if rgba.len() != (width * height * 4) as usize {
        return Err(JsError::new("pixel buffer does not match width x height"));
    }
    let rgb = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    image::RgbImage::from_raw(width, height, rgb).ok_or_else(|| JsError::new("bad image size"))
}

/// A synthetic `size x size` image as RGBA.
#[wasm_bindgen]
pub fn synthetic_rgba(size: u32, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    to_rgba(&synthetic_image(size as usize, &mut rng))
}

/// The generator input for a centre image: the image placed in a frame
/// `margin` pixels wider on every side, with the ring set to mid grey.
#[wasm_bindgen]
pub fn masked_preview(rgba: &[u8], width: u32, height: u32, margin: u32) -> Result<Vec<u8>, JsError> {
    let center = image_to_tensor(&from_rgba(rgba, width, height)?);
    let geom = OutpaintGeometry { h: height as usize, w: width as usize, m: margin as usize, downsample: 1 };
    let framed = embed_center(&center, &geom, 0.0).map_err(js_err)?;
    Ok(to_rgba(&tensor_to_image(&framed, 0).map_err(js_err)?))
}

/// Relative position bias of one head for an `M x M` window, as an
/// `M^2 x M^2` heatmap. The table is filled with `table[slot] = f(slot)`
/// where `f` depends on `pattern`: 0 distance decay, 1 random.
#[wasm_bindgen]
pub fn bias_heatmap_rgba(window: u32, pattern: u32, seed: u64) -> Result<Vec<u8>, JsError> {
    let m = window as usize;
    if m == 0 || m > 16 {
        return Err(JsError::new("window must be between 1 and 16"));
    }
    let n = bias_table_len(m);
    let side = 2 * m - 1;
    let table = match pattern {
        0 => Tensor::from_fn(&[1, n], |i| {
            let dy = (i / side) as f64 - (m - 1) as f64;
            let dx = (i % side) as f64 - (m - 1) as f64;
            -(dy * dy + dx * dx).sqrt()
        }),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::uniform(&[1, n], -1.0, 1.0, &mut rng)
        }
    };
    let bias = relative_position_bias(&table, m).map_err(js_err)?;
    let (lo, hi) = bias
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(bias
        .data()
        .iter()
        .flat_map(|&v| {
            let t = (v - lo) / span;
            [(255.0 * t) as u8, (80.0 + 60.0 * (1.0 - t)) as u8, (255.0 * (1.0 - t)) as u8, 255]
        })
        .collect())
}

/// A generator ready to extend images of one fixed centre size.
#[wasm_bindgen]
pub struct Outpainter {
    config: Config,
    geom: OutpaintGeometry,
    params: ParamSet,
}

#[wasm_bindgen]
impl Outpainter {
    /// Loads weights and config from checkpoint file bytes.
    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Outpainter, JsError> {
        let ck = checkpoint::decode(bytes).map_err(js_err)?;
        let geom = ck.config.geometry().map_err(js_err)?;
        Ok(Outpainter { config: ck.config, geom, params: ck.generator })
    }

    /// Freshly initialised weights of the small preset.
    pub fn untrained(seed: u64) -> Result<Outpainter, JsError> {
        let config = Config::toy();
        let geom = config.geometry().map_err(js_err)?;
        let params = init_generator(&config.model, seed).map_err(js_err)?;
        Ok(Outpainter { config, geom, params })
    }

    #[wasm_bindgen(getter, js_name = centerWidth)]
    pub fn center_width(&self) -> u32 {
        self.geom.w as u32
    }

    #[wasm_bindgen(getter, js_name = centerHeight)]
    pub fn center_height(&self) -> u32 {
        self.geom.h as u32
    }

    #[wasm_bindgen(getter)]
    pub fn margin(&self) -> u32 {
        self.geom.m as u32
    }

    /// Extends a centre-sized RGBA image by `steps` margins per side.
    pub fn run(&self, rgba: &[u8], steps: u32, keep_center: bool) -> Result<Vec<u8>, JsError> {
        if steps == 0 {
            return Err(JsError::new("steps must be at least 1"));
        }
        let img = from_rgba(rgba, self.geom.w as u32, self.geom.h as u32)?;
        let out = outpaint(
            &self.params,
            &self.config.model,
            &self.geom,
            &image_to_tensor(&img),
            steps as usize,
            self.config.train.fill,
            keep_center,
        )
        .map_err(js_err)?;
        Ok(to_rgba(&tensor_to_image(&out, 0).map_err(js_err)?))
    }
}
