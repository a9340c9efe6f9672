//! Images, masks, manifests, patch cropping, the pseudo-infrared and
//! pseudo-shadow renderers, and the synthetic dataset generator.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_CROP_ATTEMPTS: usize = 1000;
pub const DEFAULT_COVERAGE_HI: f64 = 0.7;
pub const DEFAULT_COVERAGE_LO: f64 = 0.02;
/// Width of the border ramp of a rendered pseudo-shadow.
pub const PENUMBRA_WIDTH: usize = 4;
pub const GAMMA_MIN: f64 = 0.1;
pub const GAMMA_MAX: f64 = 0.9;

// ---- image files ---------------------------------------------------------------

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a PNG as `[C, H, W]` in `[0, 1]`; C is 1 for grayscale files, else 3.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = open(path)?;
    if img.color().has_color() {
        Ok(rgb_to_tensor(&img.to_rgb8()))
    } else {
        Ok(gray_to_tensor(&img.to_luma8()))
    }
}

/// Loads a PNG as RGB `[3, H, W]`, replicating grayscale.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(rgb_to_tensor(&open(path.as_ref())?.to_rgb8()))
}

/// Loads a single-channel `[1, H, W]` image.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(gray_to_tensor(&open(path.as_ref())?.to_luma8()))
}

/// Loads a mask `[1, H, W]`, binarised at 0.5.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(binarize(&load_gray(path)?))
}

pub fn binarize(mask: &Tensor) -> Tensor {
    Tensor::from_fn(mask.shape().to_vec(), |i| {
        if mask.data()[i] >= 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

fn gray_to_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, h, w], |i| raw[i] as f64 / 255.0)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[3, H, W]` or `[1, H, W]` in `[0, 1]` as an 8-bit PNG.
pub fn save_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::Shape {
            op: "save_image",
            detail: format!("expected [1|3, H, W], got {s:?}"),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let result = if c == 3 {
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            Rgb([
                quantize(d[p]),
                quantize(d[h * w + p]),
                quantize(d[2 * h * w + p]),
            ])
        });
        img.save(path)
    } else {
        let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([quantize(d[y as usize * w + x as usize])])
        });
        img.save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |i| quantize(t.data()[i]) as f64 / 255.0)
}

// ---- manifests -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub infrared: Option<PathBuf>,
}

/// Records with paths relative to `root`, the manifest's directory. One
/// `image<TAB>mask[<TAB>infrared]` record per line; blank lines and lines
/// starting with `#` are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let entry = match fields.as_slice() {
                [i, m] => ManifestEntry {
                    image: i.into(),
                    mask: m.into(),
                    infrared: None,
                },
                [i, m, ir] => ManifestEntry {
                    image: i.into(),
                    mask: m.into(),
                    infrared: Some(ir.into()),
                },
                _ => {
                    return Err(Error::Manifest(format!(
                        "line {}: expected 2 or 3 tab-separated fields, got {}",
                        n + 1,
                        fields.len()
                    )))
                }
            };
            entries.push(entry);
        }
        Ok(Manifest {
            root: root.into(),
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(root, &text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.image.to_string_lossy());
            out.push('\t');
            out.push_str(&e.mask.to_string_lossy());
            if let Some(ir) = &e.infrared {
                out.push('\t');
                out.push_str(&ir.to_string_lossy());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Ground truth for an entry, looked up as `gt/<file name>` next to the
    /// image directory.
    pub fn ground_truth(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        let img = self.resolve(&entry.image);
        let name = img.file_name()?;
        let gt = img.parent()?.parent()?.join("gt").join(name);
        gt.exists().then_some(gt)
    }

    /// Loads and validates every entry.
    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                let image_path = self.resolve(&e.image);
                let visible = load_rgb(&image_path)?;
                let mask = load_mask(self.resolve(&e.mask))?;
                check_dims(&image_path, &visible, &mask)?;
                let infrared = match &e.infrared {
                    Some(p) => {
                        let ir = load_gray(self.resolve(p))?;
                        check_dims(&image_path, &visible, &ir)?;
                        ir
                    }
                    None => pseudo_infrared(&visible),
                };
                let gt = match self.ground_truth(e) {
                    Some(p) => {
                        let g = load_rgb(&p)?;
                        check_dims(&image_path, &visible, &g)?;
                        Some(g)
                    }
                    None => None,
                };
                Ok(Sample {
                    path: image_path,
                    visible,
                    mask,
                    infrared,
                    infrared_is_proxy: e.infrared.is_none(),
                    gt,
                })
            })
            .collect()
    }
}

fn check_dims(path: &Path, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Manifest(format!(
            "{}: companion file is {:?}, image is {:?}",
            path.display(),
            &b.shape()[1..],
            &a.shape()[1..]
        )));
    }
    Ok(())
}

/// One loaded image with its companions.
#[derive(Clone, Debug)]
pub struct Sample {
    pub path: PathBuf,
    pub visible: Tensor,
    pub mask: Tensor,
    pub infrared: Tensor,
    /// The infrared channel was derived from `visible` rather than loaded.
    pub infrared_is_proxy: bool,
    pub gt: Option<Tensor>,
}

// ---- cropping --------------------------------------------------------------------

/// Summed-area table of a `[1, H, W]` mask for O(1) window coverage.
pub struct Coverage {
    height: usize,
    width: usize,
    table: Vec<f64>,
}

impl Coverage {
    pub fn new(mask: &Tensor) -> Self {
        let (h, w) = (mask.shape()[1], mask.shape()[2]);
        let mut table = vec![0.0; (h + 1) * (w + 1)];
        for i in 0..h {
            for j in 0..w {
                table[(i + 1) * (w + 1) + j + 1] = mask.data()[i * w + j]
                    + table[i * (w + 1) + j + 1]
                    + table[(i + 1) * (w + 1) + j]
                    - table[i * (w + 1) + j];
            }
        }
        Coverage {
            height: h,
            width: w,
            table,
        }
    }

    /// Fraction of masked pixels in the `size`×`size` window at `(row, col)`.
    pub fn window(&self, row: usize, col: usize, size: usize) -> f64 {
        let w1 = self.width + 1;
        let (r0, c0, r1, c1) = (row, col, row + size, col + size);
        let s = self.table[r1 * w1 + c1] - self.table[r0 * w1 + c1] - self.table[r1 * w1 + c0]
            + self.table[r0 * w1 + c0];
        s / (size * size) as f64
    }

    /// Fractions of window positions meeting the shadow and shadow-free bounds.
    pub fn valid_fractions(&self, size: usize, hi: f64, lo: f64) -> (f64, f64) {
        if size > self.height || size > self.width {
            return (0.0, 0.0);
        }
        let (mut a, mut b, mut n) = (0usize, 0usize, 0usize);
        for r in 0..=self.height - size {
            for c in 0..=self.width - size {
                let cov = self.window(r, c, size);
                a += (cov >= hi) as usize;
                b += (cov <= lo) as usize;
                n += 1;
            }
        }
        (a as f64 / n as f64, b as f64 / n as f64)
    }
}

#[derive(Clone, Debug)]
pub struct CropPair {
    /// Shadowed patch `[3, P, P]`.
    pub shadow: Tensor,
    /// Shadow-free patch `[3, P, P]`.
    pub shadow_free: Tensor,
    pub shadow_at: (usize, usize),
    pub shadow_free_at: (usize, usize),
}

/// Copies the `[C, size, size]` window at `(row, col)`.
pub fn crop_tensor(t: &Tensor, row: usize, col: usize, size: usize) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    debug_assert!(row + size <= h && col + size <= w);
    Tensor::from_fn([t.shape()[0], size, size], |i| {
        let c = i / (size * size);
        let (y, x) = ((i / size) % size, i % size);
        t.data()[(c * h + row + y) * w + col + x]
    })
}

fn sample_window(
    cov: &Coverage,
    size: usize,
    rng: &mut impl Rng,
    kind: &'static str,
    accept: impl Fn(f64) -> bool,
) -> Result<(usize, usize)> {
    if size > cov.height || size > cov.width || size == 0 {
        return Err(Error::NoValidWindow {
            kind,
            size,
            attempts: 0,
        });
    }
    for _ in 0..MAX_CROP_ATTEMPTS {
        let r = rng.random_range(0..=cov.height - size);
        let c = rng.random_range(0..=cov.width - size);
        if accept(cov.window(r, c, size)) {
            return Ok((r, c));
        }
    }
    Err(Error::NoValidWindow {
        kind,
        size,
        attempts: MAX_CROP_ATTEMPTS,
    })
}

/// Rejection-samples a shadowed window (coverage ≥ `hi`) and a shadow-free
/// window (coverage ≤ `lo`) from the same image.
pub fn crop_pair(
    image: &Tensor,
    mask: &Tensor,
    size: usize,
    hi: f64,
    lo: f64,
    rng: &mut impl Rng,
) -> Result<CropPair> {
    if image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "crop_pair",
            lhs: image.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let cov = Coverage::new(mask);
    let shadow_at = sample_window(&cov, size, rng, "shadow", |c| c >= hi)?;
    let shadow_free_at = sample_window(&cov, size, rng, "shadow-free", |c| c <= lo)?;
    Ok(CropPair {
        shadow: crop_tensor(image, shadow_at.0, shadow_at.1, size),
        shadow_free: crop_tensor(image, shadow_free_at.0, shadow_free_at.1, size),
        shadow_at,
        shadow_free_at,
    })
}

/// Like [`crop_pair`] but draws uniformly from the enumerated valid
/// positions, so it succeeds whenever any valid window exists.
pub fn crop_pair_exhaustive(
    image: &Tensor,
    mask: &Tensor,
    size: usize,
    hi: f64,
    lo: f64,
    rng: &mut impl Rng,
) -> Result<CropPair> {
    let cov = Coverage::new(mask);
    let (h, w) = (cov.height, cov.width);
    let pick = |rng: &mut dyn rand::RngCore, kind: &'static str, accept: &dyn Fn(f64) -> bool| {
        let valid: Vec<(usize, usize)> = if size == 0 || size > h || size > w {
            Vec::new()
        } else {
            (0..=h - size)
                .flat_map(|r| (0..=w - size).map(move |c| (r, c)))
                .filter(|&(r, c)| accept(cov.window(r, c, size)))
                .collect()
        };
        if valid.is_empty() {
            return Err(Error::NoValidWindow {
                kind,
                size,
                attempts: (h + 1).saturating_sub(size) * (w + 1).saturating_sub(size),
            });
        }
        Ok(valid[rng.random_range(0..valid.len())])
    };
    let shadow_at = pick(rng, "shadow", &|c| c >= hi)?;
    let shadow_free_at = pick(rng, "shadow-free", &|c| c <= lo)?;
    Ok(CropPair {
        shadow: crop_tensor(image, shadow_at.0, shadow_at.1, size),
        shadow_free: crop_tensor(image, shadow_free_at.0, shadow_free_at.1, size),
        shadow_at,
        shadow_free_at,
    })
}

// ---- pseudo-infrared ---------------------------------------------------------------

pub const IR_BLUR_RADIUS: usize = 2;
pub const IR_BLUR_SIGMA: f64 = 1.0;
pub const IR_GAMMA: f64 = 0.6;

pub fn luminance(visible: &Tensor) -> Tensor {
    let (h, w) = (visible.shape()[1], visible.shape()[2]);
    let d = visible.data();
    let n = h * w;
    Tensor::from_fn([1, h, w], |p| {
        0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p]
    })
}

/// Separable Gaussian blur of each channel with edge replication.
pub fn gaussian_blur(t: &Tensor, radius: usize, sigma: f64) -> Tensor {
    let r = radius as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / total).collect();
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut tmp = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, d) in (-r..=r).enumerate() {
                    let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                    acc += k[ki] * src[(ch * h + y) * w + xx];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::from_fn([c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let mut acc = 0.0;
        for (ki, d) in (-r..=r).enumerate() {
            let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
            acc += k[ki] * tmp[(ch * h + yy) * w + x];
        }
        acc
    })
}

/// Single-channel stand-in for an infrared capture: luminance, 5×5 Gaussian
/// blur, gamma lift, clamp.
pub fn pseudo_infrared(visible: &Tensor) -> Tensor {
    let blurred = gaussian_blur(&luminance(visible), IR_BLUR_RADIUS, IR_BLUR_SIGMA);
    Tensor::from_fn(blurred.shape().to_vec(), |i| {
        blurred.data()[i].max(0.0).powf(IR_GAMMA).clamp(0.0, 1.0)
    })
}

// ---- pseudo-shadow -------------------------------------------------------------------

/// Border ramp `[1, P, P]`: `min(1, (d + 1) / width)` with `d` the distance
/// to the nearest edge.
pub fn penumbra_ramp(size: usize, width: usize) -> Tensor {
    Tensor::from_fn([1, size, size], |i| {
        let (y, x) = (i / size, i % size);
        let d = y.min(x).min(size - 1 - y).min(size - 1 - x);
        ((d + 1) as f64 / width as f64).min(1.0)
    })
}

/// Maps unconstrained logits to darkening factors in `(0.1, 0.9)`.
pub fn gamma_from_logits(tape: &mut Tape, theta: Var) -> Result<Var> {
    let s = tape.sigmoid(theta)?;
    let s = tape.scale(s, GAMMA_MAX - GAMMA_MIN)?;
    tape.offset(s, GAMMA_MIN)
}

/// Darkens a shadow-free patch `[3, P, P]` by per-channel factors derived from
/// `theta` `[3]`, fading to a quarter strength at the border.
pub fn pseudo_shadow(tape: &mut Tape, patch: Var, theta: Var) -> Result<Var> {
    let s = tape.shape(patch).to_vec();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] || tape.shape(theta) != [3] {
        return Err(Error::Shape {
            op: "pseudo_shadow",
            detail: format!("patch {s:?} with factors {:?}", tape.shape(theta)),
        });
    }
    let gamma = gamma_from_logits(tape, theta)?;
    let gamma = tape.reshape(gamma, &[3, 1, 1])?;
    let depth = tape.neg(gamma)?;
    let depth = tape.offset(depth, 1.0)?;
    let ramp = tape.constant(penumbra_ramp(s[1], PENUMBRA_WIDTH));
    let shade = tape.mul(depth, ramp)?;
    let shade = tape.neg(shade)?;
    let shade = tape.offset(shade, 1.0)?;
    tape.mul(patch, shade)
}

// ---- synthetic data --------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Crop size that every generated mask must support.
    pub patch_size: usize,
    pub coverage_hi: f64,
    pub coverage_lo: f64,
    /// Fraction of images held out for testing (the tail of the list).
    pub test_fraction: f64,
}

impl SynthConfig {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        SynthConfig {
            count,
            size,
            seed,
            patch_size: (size / 2).max(1),
            coverage_hi: DEFAULT_COVERAGE_HI,
            coverage_lo: DEFAULT_COVERAGE_LO,
            test_fraction: 0.1,
        }
    }
}

/// Minimum fraction of window positions meeting each coverage bound, so that
/// rejection sampling succeeds with overwhelming probability.
const MIN_VALID_FRACTION: f64 = 0.02;
const MAX_SHAPE_TRIES: usize = 10_000;
const SHADOW_MIN: f64 = 0.3;
const SHADOW_MAX: f64 = 0.6;
const SOFT_EDGE: usize = 2;

/// One rendered synthetic scene, all `[C, size, size]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub gt: Tensor,
    pub mask: Tensor,
    /// Multiplicative darkening; 1 outside the mask.
    pub darkening: Tensor,
    pub shadow: Tensor,
}

fn background(size: usize, rng: &mut impl Rng) -> Tensor {
    let cell = (size / 4).max(2);
    let g = size / cell + 2;
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        let base = rng.random_range(0.5..0.85);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.02..0.06),
                    rng.random_range(0.5..2.0) * std::f64::consts::TAU / size as f64,
                    rng.random_range(0.5..2.0) * std::f64::consts::TAU / size as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-0.04..0.04)).collect();
        for y in 0..size {
            for x in 0..size {
                let mut v = base;
                for &(a, fy, fx, ph) in &waves {
                    v += a * (fy * y as f64 + fx * x as f64 + ph).sin();
                }
                let (gy, gx) = (y as f64 / cell as f64, x as f64 / cell as f64);
                let (iy, ix) = (gy as usize, gx as usize);
                let (ty, tx) = (gy - iy as f64, gx - ix as f64);
                let sy = ty * ty * (3.0 - 2.0 * ty);
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let at = |r: usize, c: usize| grid[r * g + c];
                let top = at(iy, ix) * (1.0 - sx) + at(iy, ix + 1) * sx;
                let bot = at(iy + 1, ix) * (1.0 - sx) + at(iy + 1, ix + 1) * sx;
                v += top * (1.0 - sy) + bot * sy;
                data.push(v.clamp(0.05, 1.0));
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], data)
}

fn shape_mask(size: usize, rng: &mut impl Rng) -> Tensor {
    let s = size as f64;
    let cy = rng.random_range(0.2 * s..0.8 * s);
    let cx = rng.random_range(0.2 * s..0.8 * s);
    let inside: Box<dyn Fn(f64, f64) -> bool> = if rng.random_bool(0.5) {
        let ry = rng.random_range(0.22 * s..0.45 * s);
        let rx = rng.random_range(0.22 * s..0.45 * s);
        let th = rng.random_range(0.0..std::f64::consts::PI);
        let (c, sn) = (th.cos(), th.sin());
        Box::new(move |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            let u = c * dx + sn * dy;
            let v = -sn * dx + c * dy;
            (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
        })
    } else {
        let k = rng.random_range(5..=8);
        let mut angles: Vec<f64> = (0..k)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let verts: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let r = rng.random_range(0.25 * s..0.5 * s);
                (cy + r * a.sin(), cx + r * a.cos())
            })
            .collect();
        Box::new(move |y, x| {
            // Even-odd rule.
            let mut inside = false;
            let n = verts.len();
            for i in 0..n {
                let (y1, x1) = verts[i];
                let (y2, x2) = verts[(i + 1) % n];
                if (y1 > y) != (y2 > y) && x < x1 + (y - y1) * (x2 - x1) / (y2 - y1) {
                    inside = !inside;
                }
            }
            inside
        })
    };
    Tensor::from_fn([1, size, size], |i| {
        let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
        inside(y, x) as u8 as f64
    })
}

/// Chessboard distance from each masked pixel to the nearest unmasked pixel
/// (or image edge), capped at `cap`.
fn inner_distance(mask: &Tensor, cap: usize) -> Vec<usize> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let m = mask.data();
    let mut dist = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            if m[y * w + x] < 0.5 {
                continue;
            }
            let mut d = cap;
            'search: for r in 1..=cap {
                for yy in y as isize - r as isize..=y as isize + r as isize {
                    for xx in x as isize - r as isize..=x as isize + r as isize {
                        let out = yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize;
                        if !out && m[yy as usize * w + xx as usize] < 0.5 {
                            d = r - 1;
                            break 'search;
                        }
                    }
                }
            }
            dist[y * w + x] = d;
        }
    }
    dist
}

/// Renders one scene. The mask is redrawn until both crop windows are
/// plentiful and the masked region is darker on average than the rest.
pub fn render_scene(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<SynthScene> {
    loop {
        let scene = render_once(cfg, rng)?;
        let (inside, outside) = region_means(&scene.shadow, &scene.mask);
        if inside < outside {
            return Ok(scene);
        }
    }
}

fn render_once(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<SynthScene> {
    let size = cfg.size;
    let gt = background(size, rng);
    let mut mask = None;
    for _ in 0..MAX_SHAPE_TRIES {
        let m = shape_mask(size, rng);
        let (a, b) =
            Coverage::new(&m).valid_fractions(cfg.patch_size, cfg.coverage_hi, cfg.coverage_lo);
        if a >= MIN_VALID_FRACTION && b >= MIN_VALID_FRACTION {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or(Error::NoValidWindow {
        kind: "synthetic mask",
        size: cfg.patch_size,
        attempts: MAX_SHAPE_TRIES,
    })?;

    let depth = rng.random_range(SHADOW_MIN..SHADOW_MAX);
    let ripple = rng.random_range(0.0..0.05);
    let fy = rng.random_range(0.5..1.5) * std::f64::consts::TAU / size as f64;
    let fx = rng.random_range(0.5..1.5) * std::f64::consts::TAU / size as f64;
    let dist = inner_distance(&mask, SOFT_EDGE);
    let n = size * size;
    let field: Vec<f64> = (0..n)
        .map(|p| {
            if mask.data()[p] < 0.5 {
                return 1.0;
            }
            let (y, x) = ((p / size) as f64, (p % size) as f64);
            let k = (depth + ripple * (fy * y + fx * x).sin()).clamp(SHADOW_MIN, SHADOW_MAX);
            let alpha = ((dist[p] + 1) as f64 / (SOFT_EDGE + 1) as f64).min(1.0);
            1.0 - alpha * (1.0 - k)
        })
        .collect();
    let darkening = Tensor::from_parts(vec![1, size, size], field);
    let shadow = Tensor::from_fn([3, size, size], |i| gt.data()[i] * darkening.data()[i % n]);
    Ok(SynthScene {
        gt,
        mask,
        darkening,
        shadow,
    })
}

/// Mean intensity inside and outside the mask.
pub fn region_means(image: &Tensor, mask: &Tensor) -> (f64, f64) {
    let n = mask.len();
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (i, v) in image.data().iter().enumerate() {
        if mask.data()[i % n] >= 0.5 {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

/// Writes `images/`, `masks/` and `gt/` PNG triples under `out_dir` with
/// `manifest.tsv` listing all of them and `train.tsv`/`test.tsv` splitting
/// them. Returns the full manifest.
pub fn synth_dataset(out_dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Manifest> {
    let out = out_dir.as_ref();
    if cfg.count == 0 || cfg.size < 8 {
        return Err(Error::Config(
            "synthetic dataset needs count ≥ 1 and size ≥ 8".into(),
        ));
    }
    for d in ["images", "masks", "gt"] {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let scene = render_scene(cfg, &mut rng)?;
        let name = format!("{i:05}.png");
        let image = PathBuf::from("images").join(&name);
        let mask = PathBuf::from("masks").join(&name);
        save_image(out.join(&image), &scene.shadow)?;
        save_image(out.join(&mask), &scene.mask)?;
        save_image(out.join("gt").join(&name), &scene.gt)?;
        entries.push(ManifestEntry {
            image,
            mask,
            infrared: None,
        });
    }
    let test =
        ((cfg.count as f64 * cfg.test_fraction).round() as usize).min(cfg.count.saturating_sub(1));
    let split = cfg.count - test;
    let all = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    all.save(out.join("manifest.tsv"))?;
    Manifest {
        root: out.to_path_buf(),
        entries: all.entries[..split].to_vec(),
    }
    .save(out.join("train.tsv"))?;
    Manifest {
        root: out.to_path_buf(),
        entries: all.entries[split..].to_vec(),
    }
    .save(out.join("test.tsv"))?;
    Ok(all)
}
