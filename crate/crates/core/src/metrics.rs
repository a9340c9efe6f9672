//! Region-restricted full-reference metrics and luminance entropy.
//!
//! Images are `[C, H, W]` in `[0, 1]`; masks are `[1, H, W]` with 1 marking
//! shadow. SSIM is restricted to a region by averaging the SSIM map over the
//! pixels whose window centre lies in it.

use std::fmt::Write as _;

use crate::data::quantize;
use crate::error::{Error, Result};
use crate::losses::{SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Shadow,
    NonShadow,
    All,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Shadow, Region::NonShadow, Region::All];

    fn contains(self, mask_value: f64) -> bool {
        match self {
            Region::Shadow => mask_value >= 0.5,
            Region::NonShadow => mask_value < 0.5,
            Region::All => true,
        }
    }
}

fn check(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() || pred.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    if mask.shape() != [1, pred.shape()[1], pred.shape()[2]] {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: mask.shape().to_vec(),
            rhs: pred.shape().to_vec(),
        });
    }
    Ok((pred.shape()[0], pred.shape()[1] * pred.shape()[2]))
}

/// Sum with a fixed order independent of the input order.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Root mean squared error over the region, on the 0–255 scale.
pub fn rmse_region(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: Region) -> Result<f64> {
    let (c, n) = check(pred, gt, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if !region.contains(mask.data()[p]) {
            continue;
        }
        for ch in 0..c {
            let d = pred.data()[ch * n + p] - gt.data()[ch * n + p];
            sum += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok((sum / count as f64).sqrt() * 255.0)
}

/// `20 log10(255 / rmse)`; `+inf` when the region matches exactly.
pub fn psnr_region(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: Region) -> Result<f64> {
    let rmse = rmse_region(pred, gt, mask, region)?;
    Ok(if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (255.0 / rmse).log10()
    })
}

/// 1-D Gaussian taps for the SSIM window.
fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Gaussian-weighted local mean of a single `h`×`w` plane. Windows are
/// truncated at the border and renormalised.
fn local_mean(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, d) in (-r..=r).enumerate() {
                    let (yy, xx) = if along_rows {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc += taps[k] * src[yy as usize * w + xx as usize];
                    wsum += taps[k];
                }
                out[y * w + x] = acc / wsum;
            }
        }
        out
    };
    let horizontal = pass(plane, true);
    pass(&horizontal, false)
}

/// Per-pixel SSIM `[C, H, W]`.
pub fn ssim_map(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() || pred.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let (c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let n = h * w;
    let taps = gaussian_taps();
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        let x = &pred.data()[ch * n..(ch + 1) * n];
        let y = &gt.data()[ch * n..(ch + 1) * n];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let mx = local_mean(x, h, w, &taps);
        let my = local_mean(y, h, w, &taps);
        let exx = local_mean(&xx, h, w, &taps);
        let eyy = local_mean(&yy, h, w, &taps);
        let exy = local_mean(&xy, h, w, &taps);
        for p in 0..n {
            let vx = exx[p] - mx[p] * mx[p];
            let vy = eyy[p] - my[p] * my[p];
            let cxy = exy[p] - mx[p] * my[p];
            let num = (2.0 * mx[p] * my[p] + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (mx[p] * mx[p] + my[p] * my[p] + SSIM_C1) * (vx + vy + SSIM_C2);
            out.push(num / den);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Mean SSIM over channels and the pixels of `region`.
pub fn ssim_image(pred: &Tensor, gt: &Tensor, mask: &Tensor, region: Region) -> Result<f64> {
    let (c, n) = check(pred, gt, mask)?;
    let map = ssim_map(pred, gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if !region.contains(mask.data()[p]) {
            continue;
        }
        for ch in 0..c {
            sum += map.data()[ch * n + p];
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// 8-bit luminance levels of a `[3, H, W]` or `[1, H, W]` image.
pub fn luminance_levels(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let n = s[1] * s[2];
    let d = image.data();
    (0..n)
        .map(|p| {
            let v = if s[0] == 3 {
                0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p]
            } else {
                d[p]
            };
            quantize(v)
        })
        .collect()
}

/// Shannon entropy in bits of the 256-bin luminance histogram.
pub fn entropy(image: &Tensor) -> f64 {
    let levels = luminance_levels(image);
    let mut hist = [0usize; 256];
    for &l in &levels {
        hist[l as usize] += 1;
    }
    let n = levels.len() as f64;
    let mut terms: Vec<f64> = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .collect();
    sorted_sum(&mut terms).max(0.0)
}

/// A metric evaluated on shadow, non-shadow and whole-image regions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionTriple {
    pub shadow: f64,
    pub nonshadow: f64,
    pub all: f64,
}

impl RegionTriple {
    fn compute(f: impl Fn(Region) -> Result<f64>) -> Result<Self> {
        Ok(RegionTriple {
            shadow: f(Region::Shadow)?,
            nonshadow: f(Region::NonShadow)?,
            all: f(Region::All)?,
        })
    }

    fn values(&self) -> [f64; 3] {
        [self.shadow, self.nonshadow, self.all]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FullReference {
    pub rmse: RegionTriple,
    pub psnr: RegionTriple,
    pub ssim: RegionTriple,
}

/// Metrics of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub full: Option<FullReference>,
    pub entropy: f64,
}

impl ImageMetrics {
    pub fn compute(pred: &Tensor, gt: Option<&Tensor>, mask: &Tensor) -> Result<Self> {
        let full = match gt {
            Some(gt) => Some(FullReference {
                rmse: RegionTriple::compute(|r| rmse_region(pred, gt, mask, r))?,
                psnr: RegionTriple::compute(|r| psnr_region(pred, gt, mask, r))?,
                ssim: RegionTriple::compute(|r| ssim_image(pred, gt, mask, r))?,
            }),
            None => None,
        };
        Ok(ImageMetrics {
            full,
            entropy: entropy(pred),
        })
    }
}

/// Per-image metrics averaged over a set of images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Present only when every image had a reference.
    pub full: Option<FullReference>,
    pub entropy: f64,
    pub images: usize,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    sorted_sum(&mut v) / n
}

impl EvalReport {
    /// Averages per-image metrics. The result does not depend on the order
    /// of `items`.
    pub fn aggregate(items: &[ImageMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let full = if items.iter().all(|m| m.full.is_some()) {
            let f: Vec<FullReference> = items.iter().map(|m| m.full.expect("checked")).collect();
            let triple = |get: fn(&FullReference) -> RegionTriple| RegionTriple {
                shadow: mean_of(f.iter().map(|x| get(x).shadow)),
                nonshadow: mean_of(f.iter().map(|x| get(x).nonshadow)),
                all: mean_of(f.iter().map(|x| get(x).all)),
            };
            Some(FullReference {
                rmse: triple(|x| x.rmse),
                psnr: triple(|x| x.psnr),
                ssim: triple(|x| x.ssim),
            })
        } else {
            None
        };
        Ok(EvalReport {
            full,
            entropy: mean_of(items.iter().map(|m| m.entropy)),
            images: items.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "method,metric,shadow,nonshadow,all";

    /// CSV rows (without header) labelled with `method`.
    pub fn csv_rows(&self, method: &str) -> String {
        let mut out = String::new();
        if let Some(f) = &self.full {
            for (name, t) in [("rmse", f.rmse), ("psnr", f.psnr), ("ssim", f.ssim)] {
                let [a, b, c] = t.values();
                writeln!(out, "{method},{name},{a},{b},{c}").expect("string write");
            }
        }
        writeln!(out, "{method},entropy,,,{}", self.entropy).expect("string write");
        writeln!(out, "{method},images,,,{}", self.images).expect("string write");
        out
    }
}

/// Full CSV document for several labelled reports.
pub fn reports_csv(reports: &[(&str, &EvalReport)]) -> String {
    let mut out = String::from("# ssim per region averages windows centred in the region; psnr inf marks identical inputs\n");
    out.push_str(EvalReport::CSV_HEADER);
    out.push('\n');
    for (label, r) in reports {
        out.push_str(&r.csv_rows(label));
    }
    out
}

fn cell(v: f64) -> String {
    if v.is_infinite() {
        "identical".into()
    } else {
        format!("{v:.4}")
    }
}

/// Aligned text table of several labelled reports.
pub fn reports_table(reports: &[(&str, &EvalReport)]) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        "method".into(),
        "metric".into(),
        "shadow".into(),
        "non-shadow".into(),
        "all".into(),
    ]];
    for (label, r) in reports {
        if let Some(f) = &r.full {
            for (name, t) in [("RMSE", f.rmse), ("PSNR", f.psnr), ("SSIM", f.ssim)] {
                let [a, b, c] = t.values();
                rows.push([label.to_string(), name.into(), cell(a), cell(b), cell(c)]);
            }
        }
        rows.push([
            label.to_string(),
            "Entropy".into(),
            String::new(),
            String::new(),
            cell(r.entropy),
        ]);
    }
    let widths: Vec<usize> = (0..5)
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i < 2 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_left(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([1, h, w], |i| ((i % w) < w / 2) as u8 as f64)
    }

    #[test]
    fn constant_offset_rmse_and_psnr() {
        let gt = Tensor::full([3, 4, 4], 0.5);
        let pred = Tensor::full([3, 4, 4], 0.6);
        let m = mask_left(4, 4);
        for r in Region::ALL {
            assert!((rmse_region(&pred, &gt, &m, r).unwrap() - 25.5).abs() < 1e-9);
            assert!((psnr_region(&pred, &gt, &m, r).unwrap() - 20.0).abs() < 1e-9);
        }
        assert_eq!(
            psnr_region(&gt, &gt, &m, Region::All).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn empty_region_is_an_error() {
        let x = Tensor::zeros([3, 2, 2]);
        let none = Tensor::zeros([1, 2, 2]);
        assert!(matches!(
            rmse_region(&x, &x, &none, Region::Shadow),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn ssim_identity_and_checkerboard() {
        let x = Tensor::from_fn([3, 12, 12], |i| ((i / 12 + i % 12) % 2) as f64);
        let inv = Tensor::from_fn([3, 12, 12], |i| 1.0 - x.data()[i]);
        let m = mask_left(12, 12);
        assert_eq!(ssim_image(&x, &x, &m, Region::All).unwrap(), 1.0);
        assert!(ssim_image(&x, &inv, &m, Region::All).unwrap() < 0.1);
    }

    #[test]
    fn ssim_constant_pair_matches_loss_value() {
        let a = Tensor::full([1, 8, 8], 0.2);
        let b = Tensor::full([1, 8, 8], 0.8);
        let m = mask_left(8, 8);
        let v = ssim_image(&a, &b, &m, Region::All).unwrap();
        assert!((v - (0.32 + 1e-4) / (0.68 + 1e-4)).abs() < 1e-12);
    }

    #[test]
    fn entropy_endpoints() {
        assert_eq!(entropy(&Tensor::full([3, 5, 5], 0.3)), 0.0);
        let uniform = Tensor::from_fn([1, 16, 16], |i| i as f64 / 255.0);
        assert_eq!(entropy(&uniform), 8.0);
        let coin = Tensor::from_fn([1, 2, 4], |i| (i % 2) as f64);
        assert_eq!(entropy(&coin), 1.0);
    }

    #[test]
    fn report_schema() {
        let gt = Tensor::full([3, 4, 4], 0.5);
        let m = mask_left(4, 4);
        let im = ImageMetrics::compute(&gt, Some(&gt), &m).unwrap();
        let r = EvalReport::aggregate(&[im, im]).unwrap();
        let csv = reports_csv(&[("model", &r)]);
        assert!(csv.contains("model,rmse,0,0,0"));
        assert!(csv.contains("model,psnr,inf,inf,inf"));
        assert!(reports_table(&[("model", &r)]).contains("identical"));
    }
}
