//! PSNR and SSIM on images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value written to reports in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Maps generator space `[-1, 1]` to `[0, 1]`.
pub fn to_unit(t: &Tensor) -> Tensor {
    t.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("compare {:?} with {:?}", a.shape(), b.shape())));
    }
    a.dims4()
}

/// `10 log10(1 / MSE)`; infinite for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR over the pixels where `mask` (one byte per pixel) is 1.
pub fn psnr_masked(a: &Tensor, b: &Tensor, mask: &[u8]) -> Result<f64> {
    let (bn, h, w, c) = check_pair(a, b)?;
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask of {} pixels for {h}x{w}", mask.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask[(i / c) % (h * w)] == 1 {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Shape(format!("empty mask over {bn} images")));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

/// Caps infinities for file output.
pub fn report_psnr(v: f64) -> f64 {
    v.min(PSNR_CAP)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-region separable filtering of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// SSIM map for every image and channel, `(B * C, oh * ow)` flattened, with
/// the output size.
fn ssim_maps(a: &Tensor, b: &Tensor) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let (bn, h, w, c) = check_pair(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut maps = Vec::with_capacity(bn * c);
    for bi in 0..bn {
        for ch in 0..c {
            let plane = |t: &Tensor| -> Vec<f64> {
                (0..h * w).map(|p| t.data()[(bi * h * w + p) * c + ch]).collect()
            };
            let (x, y) = (plane(a), plane(b));
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
            let (mx, my) = (filter(&x, h, w, &g), filter(&y, h, w, &g));
            let (sxx, syy, sxy) = (filter(&xx, h, w, &g), filter(&yy, h, w, &g), filter(&xy, h, w, &g));
            let map = (0..mx.len())
                .map(|i| {
                    let (ux, uy) = (mx[i], my[i]);
                    let vx = sxx[i] - ux * ux;
                    let vy = syy[i] - uy * uy;
                    let cov = sxy[i] - ux * uy;
                    ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
                })
                .collect();
            maps.push(map);
        }
    }
    Ok((maps, h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1))
}

/// Gaussian-window SSIM averaged over channels and positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (maps, _, _) = ssim_maps(a, b)?;
    let n: usize = maps.iter().map(Vec::len).sum();
    Ok(maps.iter().flatten().sum::<f64>() / n as f64)
}

/// SSIM over the map positions whose window centre lies where `mask` is 1.
pub fn ssim_masked(a: &Tensor, b: &Tensor, mask: &[u8]) -> Result<f64> {
    let (_, h, w, _) = check_pair(a, b)?;
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask of {} pixels for {h}x{w}", mask.len())));
    }
    let (maps, oh, ow) = ssim_maps(a, b)?;
    let half = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for map in &maps {
        for y in 0..oh {
            for x in 0..ow {
                if mask[(y + half) * w + x + half] == 1 {
                    sum += map[y * ow + x];
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Shape("no SSIM window is centred inside the mask".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[1, h, w, 3], 0.0, 1.0, &mut rng)
    }

    /// SSIM from the definition: direct 2-D weighted sums per window.
    fn ssim_oracle(a: &Tensor, b: &Tensor, mask: Option<&[u8]>) -> f64 {
        let (_, h, w, c) = a.dims4().unwrap();
        let mut g1 = [0.0; 11];
        for (i, v) in g1.iter_mut().enumerate() {
            let d = i as f64 - 5.0;
            *v = (-d * d / 4.5).exp();
        }
        let s: f64 = g1.iter().sum();
        let px = |t: &Tensor, y: usize, x: usize, ch: usize| t.data()[(y * w + x) * c + ch];
        let (mut total, mut n) = (0.0, 0usize);
        for ch in 0..c {
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    if let Some(m) = mask {
                        if m[(y0 + 5) * w + x0 + 5] != 1 {
                            continue;
                        }
                    }
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let wgt = g1[dy] * g1[dx] / (s * s);
                            let (p, q) = (px(a, y0 + dy, x0 + dx, ch), px(b, y0 + dy, x0 + dx, ch));
                            mx += wgt * p;
                            my += wgt * q;
                            sxx += wgt * p * p;
                            syy += wgt * q * q;
                            sxy += wgt * p * q;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    let num = (2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2);
                    let den = (mx * mx + my * my + c1) * (sxx - mx * mx + syy - my * my + c2);
                    total += num / den;
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    fn psnr_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let n = a.len() as f64;
        let mean_sq = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2) / n).sum::<f64>();
        -10.0 * mean_sq.log10()
    }

    #[test]
    fn psnr_known_values() {
        let a = Tensor::full(&[1, 4, 4, 3], 0.5);
        let b = Tensor::full(&[1, 4, 4, 3], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(report_psnr(f64::INFINITY), PSNR_CAP);
        assert!(psnr(&a, &Tensor::zeros(&[1, 4, 3, 3])).is_err());
    }

    #[test]
    fn metrics_match_direct_formulas() {
        for seed in 0..20 {
            let a = img(16, 13, seed);
            let b = img(16, 13, seed + 100);
            assert!((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-6);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b, None)).abs() < 1e-6);
            assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
            assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_identities() {
        let a = img(12, 12, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let c = Tensor::full(&[1, 12, 12, 3], 0.3);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.5);
        assert!(ssim(&img(10, 20, 0), &img(10, 20, 1)).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = img(16, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut b = a.clone();
            b.data_mut().iter_mut().zip(&noise).for_each(|(v, n)| *v += amp * n);
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ring_variants() {
        let (h, w) = (32, 32);
        let mask: Vec<u8> = (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                u8::from(!((8..24).contains(&y) && (8..24).contains(&x)))
            })
            .collect();
        let a = img(h, w, 5);
        let mut b = a.clone();
        // change only the centre
        for p in 0..h * w {
            if mask[p] == 0 {
                for ch in 0..3 {
                    b.data_mut()[p * 3 + ch] = 0.0;
                }
            }
        }
        assert_eq!(psnr_masked(&a, &b, &mask).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b).unwrap().is_finite());
        let noisy = a.map(|v| (v * 0.7 + 0.1).min(1.0));
        let want_psnr = {
            let (mut s, mut n) = (0.0, 0.0);
            for p in 0..h * w {
                if mask[p] == 1 {
                    for ch in 0..3 {
                        s += (a.data()[p * 3 + ch] - noisy.data()[p * 3 + ch]).powi(2);
                        n += 1.0;
                    }
                }
            }
            10.0 * (n / s).log10()
        };
        assert!((psnr_masked(&a, &noisy, &mask).unwrap() - want_psnr).abs() < 1e-9);
        let got = ssim_masked(&a, &noisy, &mask).unwrap();
        assert!((got - ssim_oracle(&a, &noisy, Some(&mask))).abs() < 1e-9);
        assert!(psnr_masked(&a, &b, &vec![0; h * w]).is_err());
    }
}
