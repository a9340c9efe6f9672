//! Independent reference implementations shared by the integration suites.
//! They are written as plain loops straight from the metric definitions,
//! without reusing anything from the library beyond `Tensor`.

#![allow(dead_code)]

use deshadow::Tensor;
use rand::Rng;

pub fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([c, h, w], |_| rng.random_range(0.0..1.0))
}

/// A random mask with at least one pixel on each side.
pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    loop {
        let p = rng.random_range(0.1..0.9);
        let m = Tensor::from_fn([1, h, w], |_| if rng.random_bool(p) { 1.0 } else { 0.0 });
        let on = m.data().iter().filter(|v| **v == 1.0).count();
        if on > 0 && on < h * w {
            return m;
        }
    }
}

fn in_region(mask: f64, region: u8) -> bool {
    match region {
        0 => mask >= 0.5,
        1 => mask < 0.5,
        _ => true,
    }
}

/// Region 0 = shadow, 1 = non-shadow, 2 = all.
pub fn rmse(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: u8) -> f64 {
    let (c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let mut sum = 0.0;
    let mut n = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !in_region(mask.at(&[0, y, x]), region) {
                continue;
            }
            for ch in 0..c {
                let d = 255.0 * pred.at(&[ch, y, x]) - 255.0 * gt.at(&[ch, y, x]);
                sum += d * d;
                n += 1.0;
            }
        }
    }
    (sum / n).sqrt()
}

pub fn psnr(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: u8) -> f64 {
    let mse = rmse(pred, gt, mask, region).powi(2);
    10.0 * (255.0 * 255.0 / mse).log10()
}

/// SSIM map entry at one pixel from a direct 2-D sum over the truncated,
/// renormalised 11×11 Gaussian window (σ = 1.5).
fn ssim_at(a: &[f64], b: &[f64], h: usize, w: usize, y: usize, x: usize) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let (mut wsum, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -5i64..=5 {
        for dx in -5i64..=5 {
            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                continue;
            }
            let g = (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
            let i = yy as usize * w + xx as usize;
            wsum += g;
            ma += g * a[i];
            mb += g * b[i];
            saa += g * a[i] * a[i];
            sbb += g * b[i] * b[i];
            sab += g * a[i] * b[i];
        }
    }
    let (ma, mb) = (ma / wsum, mb / wsum);
    let va = saa / wsum - ma * ma;
    let vb = sbb / wsum - mb * mb;
    let cov = sab / wsum - ma * mb;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

pub fn ssim(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: u8) -> f64 {
    let (c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let n = h * w;
    let mut sum = 0.0;
    let mut count = 0.0;
    for ch in 0..c {
        let a = &pred.data()[ch * n..(ch + 1) * n];
        let b = &gt.data()[ch * n..(ch + 1) * n];
        for y in 0..h {
            for x in 0..w {
                if in_region(mask.at(&[0, y, x]), region) {
                    sum += ssim_at(a, b, h, w, y, x);
                    count += 1.0;
                }
            }
        }
    }
    sum / count
}

/// Entropy in bits of the 8-bit luminance histogram.
pub fn entropy(image: &Tensor) -> f64 {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut hist = vec![0.0f64; 256];
    for y in 0..h {
        for x in 0..w {
            let l = if c == 3 {
                0.299 * image.at(&[0, y, x])
                    + 0.587 * image.at(&[1, y, x])
                    + 0.114 * image.at(&[2, y, x])
            } else {
                image.at(&[0, y, x])
            };
            let level = (l.clamp(0.0, 1.0) * 255.0).round() as usize;
            hist[level] += 1.0;
        }
    }
    let total = (h * w) as f64;
    -hist
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| {
            let p = c / total;
            p * p.log2()
        })
        .sum::<f64>()
}
