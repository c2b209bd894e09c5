//! Image files, datasets and procedural training images.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{make_masked_input, MaskedSample, OutpaintGeometry};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// `[0, 255]` to `[-1, 1]`.
pub fn normalize(v: u8) -> f64 {
    2.0 * (v as f64 / 255.0) - 1.0
}

/// `[-1, 1]` to `[0, 255]`, clamped and rounded.
pub fn denormalize(v: f64) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| normalize(v)).collect();
    Tensor::new(&[1, h as usize, w as usize, 3], data).expect("rgb buffer")
}

/// Image `index` of a `(B, H, W, 3)` tensor.
pub fn tensor_to_image(t: &Tensor, index: usize) -> Result<RgbImage> {
    let item = t.batch_item(index)?;
    let (_, h, w, c) = item.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected RGB, got {c} channels")));
    }
    let raw = item.data().iter().map(|&v| denormalize(v)).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer"))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Saves as PNG or JPEG depending on the extension.
pub fn write_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an image and resizes it bilinearly to `h x w`.
pub fn load_resized(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let img = read_image(path)?;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    Ok(image_to_tensor(&img))
}

/// Image files of `dir` in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Ground-truth frames held in memory, in file-name order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    /// `(1, h', w', 3)` each.
    pub images: Vec<Tensor>,
}

impl Dataset {
    /// Loads every decodable image of `dir` at the frame size of `geom`.
    /// Files that fail to decode are skipped with a warning.
    pub fn load(dir: &Path, geom: &OutpaintGeometry) -> Result<Self> {
        let mut names = Vec::new();
        let mut images = Vec::new();
        for path in list_images(dir)? {
            match load_resized(&path, geom.full_h(), geom.full_w()) {
                Ok(t) => {
                    names.push(path.file_name().unwrap().to_string_lossy().into_owned());
                    images.push(t);
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!("no usable images in {}", dir.display())));
        }
        Ok(Self { names, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Only full batches are used.
    pub fn batches_per_epoch(&self, batch: usize) -> usize {
        self.len() / batch.max(1)
    }

    /// Shuffled indices for `epoch`, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// Indices of the batch used at global `step` (0-based).
    pub fn batch_indices(&self, step: u64, batch: usize, seed: u64) -> Result<Vec<usize>> {
        let per_epoch = self.batches_per_epoch(batch) as u64;
        if batch == 0 || per_epoch == 0 {
            return Err(Error::Dataset(format!(
                "{} images cannot fill a batch of {batch}",
                self.len()
            )));
        }
        let order = self.epoch_order(seed, step / per_epoch);
        let start = (step % per_epoch) as usize * batch;
        Ok(order[start..start + batch].to_vec())
    }

    pub fn masked_batch(&self, indices: &[usize], geom: &OutpaintGeometry, fill: f64) -> Result<Vec<MaskedSample>> {
        indices
            .iter()
            .map(|&i| make_masked_input(&self.images[i], geom, fill))
            .collect()
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One procedural image: a two-colour linear gradient with a low-frequency
/// sinusoidal texture and up to three flat rectangles.
pub fn synthetic_image<R: Rng>(size: usize, rng: &mut R) -> RgbImage {
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let amp = rng.random_range(0.04..0.12);
    let freq = rng.random_range(1.0..3.0);
    let wave = rng.random_range(0.0..std::f64::consts::TAU);
    let (wx, wy) = (wave.cos(), wave.sin());
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let rects: Vec<(usize, usize, usize, usize, [f64; 3])> = (0..rng.random_range(0..=3))
        .map(|_| {
            let w = rng.random_range(size / 8..=size / 2).max(1);
            let h = rng.random_range(size / 8..=size / 2).max(1);
            let x = rng.random_range(0..size - w + 1);
            let y = rng.random_range(0..size - h + 1);
            (x, y, w, h, random_color(rng))
        })
        .collect();
    let n = size as f64;
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let (u, v) = (x as f64 / n - 0.5, y as f64 / n - 0.5);
        let t = ((u * dx + v * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
        let tex = amp * (std::f64::consts::TAU * freq * (u * wx + v * wy) + phase).sin();
        let mut px = [0.0; 3];
        for ch in 0..3 {
            px[ch] = c0[ch] * (1.0 - t) + c1[ch] * t + tex;
        }
        for &(rx, ry, rw, rh, col) in &rects {
            if (rx..rx + rw).contains(&(x as usize)) && (ry..ry + rh).contains(&(y as usize)) {
                for ch in 0..3 {
                    px[ch] = col[ch] + tex;
                }
            }
        }
        Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Writes `count` images `synth_00000.png`, ... to `out_dir`.
pub fn gen_synthetic(count: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if count == 0 || size < 8 {
        return Err(Error::Config(format!(
            "need count >= 1 and size >= 8, got {count} and {size}"
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = out_dir.join(format!("synth_{i:05}.png"));
            write_image(&synthetic_image(size, &mut rng), &path)?;
            Ok(path)
        })
        .collect()
}
