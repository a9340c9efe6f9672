//! Training losses and the patch discriminator.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ScalarFn, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Decomposition, FeatureBundle};
use crate::params::{ParamId, ParamStore, Params};
use crate::tensor::Tensor;

/// Guards the norms in the normalised orthogonality loss.
pub const ORT_EPS: f64 = 1e-12;
/// Added under each square root so the norm stays differentiable at zero.
const NORM_FLOOR: f64 = 1e-24;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const MINMAX_EPS: f64 = 1e-8;
/// Discriminator outputs are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

fn check_same(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// `F Fᵀ / (H'·W')` for a feature map `[C, H', W']`.
pub fn gram(tape: &mut Tape, feat: Var) -> Result<Var> {
    let s = tape.shape(feat).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "gram",
            detail: format!("expected [C, H, W], got {s:?}"),
        });
    }
    let n = s[1] * s[2];
    let f = tape.reshape(feat, &[s[0], n])?;
    let ft = tape.transpose(f)?;
    let g = tape.matmul(f, ft)?;
    tape.scale(g, 1.0 / n as f64)
}

fn soft_norm(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let s = tape.sum_all(sq)?;
    let s = tape.offset(s, NORM_FLOOR)?;
    tape.sqrt(s)
}

/// Inner product of the flattened Gram matrices of `align` and `separ`.
///
/// Normalised: `|<ga, gs>| / (|ga| |gs| + eps)`, in `[0, 1]`. Otherwise the
/// raw inner product is returned.
pub fn orthogonality_loss(
    tape: &mut Tape,
    align: Var,
    separ: Var,
    normalized: bool,
) -> Result<Var> {
    check_same("orthogonality_loss", tape, align, separ)?;
    let ga = gram(tape, align)?;
    let gs = gram(tape, separ)?;
    let prod = tape.mul(ga, gs)?;
    let dot = tape.sum_all(prod)?;
    if !normalized {
        return Ok(dot);
    }
    let num = tape.abs(dot)?;
    let na = soft_norm(tape, ga)?;
    let ns = soft_norm(tape, gs)?;
    let den = tape.mul(na, ns)?;
    let den = tape.offset(den, ORT_EPS)?;
    tape.div(num, den)
}

/// Normalised truncated Gaussian window for every centre pixel, as the
/// matrix `K[source, centre]` so that local means are `x · K`.
///
/// When either spatial side is smaller than the window a single global
/// window is used instead: `K` is then `[H·W, 1]` with uniform weights.
pub fn ssim_window_matrix(height: usize, width: usize) -> Tensor {
    let n = height * width;
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Tensor::full([n, 1], 1.0 / n as f64);
    }
    let r = (SSIM_WINDOW / 2) as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut k = vec![0.0; n * n];
    for ci in 0..height as isize {
        for cj in 0..width as isize {
            let centre = (ci * width as isize + cj) as usize;
            let mut total = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (i, j) = (ci + di, cj + dj);
                    if i >= 0 && j >= 0 && i < height as isize && j < width as isize {
                        total += g[(di + r) as usize] * g[(dj + r) as usize];
                    }
                }
            }
            for di in -r..=r {
                for dj in -r..=r {
                    let (i, j) = (ci + di, cj + dj);
                    if i >= 0 && j >= 0 && i < height as isize && j < width as isize {
                        let src = (i * width as isize + j) as usize;
                        k[src * n + centre] = g[(di + r) as usize] * g[(dj + r) as usize] / total;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, n], k)
}

/// Rescales each channel of `[C, N]` to `[0, 1]`.
fn minmax_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let hi = tape.max(x, &[1], true)?;
    let neg = tape.neg(x)?;
    let lo = tape.max(neg, &[1], true)?;
    let lo = tape.neg(lo)?;
    let shifted = tape.sub(x, lo)?;
    let range = tape.sub(hi, lo)?;
    let range = tape.offset(range, MINMAX_EPS)?;
    tape.div(shifted, range)
}

/// Per-channel SSIM map `[C, windows]` between two `[C, H, W]` tensors.
pub fn ssim_map(tape: &mut Tape, a: Var, b: Var, normalize: bool) -> Result<Var> {
    check_same("ssim", tape, a, b)?;
    let s = tape.shape(a).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("expected [C, H, W], got {s:?}"),
        });
    }
    let n = s[1] * s[2];
    let mut x = tape.reshape(a, &[s[0], n])?;
    let mut y = tape.reshape(b, &[s[0], n])?;
    if normalize {
        x = minmax_rows(tape, x)?;
        y = minmax_rows(tape, y)?;
    }
    let k = tape.constant(ssim_window_matrix(s[1], s[2]));
    let mx = tape.matmul(x, k)?;
    let my = tape.matmul(y, k)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let exx = tape.matmul(xx, k)?;
    let eyy = tape.matmul(yy, k)?;
    let exy = tape.matmul(xy, k)?;
    let mx2 = tape.mul(mx, mx)?;
    let my2 = tape.mul(my, my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(exx, mx2)?;
    let vy = tape.sub(eyy, my2)?;
    let cxy = tape.sub(exy, mxy)?;

    let l_num = tape.scale(mxy, 2.0)?;
    let l_num = tape.offset(l_num, SSIM_C1)?;
    let c_num = tape.scale(cxy, 2.0)?;
    let c_num = tape.offset(c_num, SSIM_C2)?;
    let l_den = tape.add(mx2, my2)?;
    let l_den = tape.offset(l_den, SSIM_C1)?;
    let c_den = tape.add(vx, vy)?;
    let c_den = tape.offset(c_den, SSIM_C2)?;
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    tape.div(num, den)
}

/// `1 - mean SSIM` over channels and windows, in `[0, 2]`.
pub fn ssim_loss(tape: &mut Tape, a: Var, b: Var, normalize: bool) -> Result<Var> {
    let m = ssim_map(tape, a, b, normalize)?;
    let mean = tape.mean_all(m)?;
    let neg = tape.neg(mean)?;
    tape.offset(neg, 1.0)
}

fn clamp_prob(x: f64, eps: f64) -> f64 {
    x.clamp(eps, 1.0 - eps)
}

fn clamp_prob_grad(x: f64, eps: f64) -> f64 {
    if x > eps && x < 1.0 - eps {
        1.0
    } else {
        0.0
    }
}

const CLAMP_PROB: ScalarFn = ScalarFn {
    name: "clamp_prob",
    f: clamp_prob,
    df: clamp_prob_grad,
    param: PROB_EPS,
};

fn mean_log(tape: &mut Tape, p: Var, complement: bool) -> Result<Var> {
    let p = tape.map(p, CLAMP_PROB)?;
    let p = if complement {
        let n = tape.neg(p)?;
        tape.offset(n, 1.0)?
    } else {
        p
    };
    let l = tape.log(p)?;
    tape.mean_all(l)
}

/// `-mean log D(real) - mean log(1 - D(fake))` from discriminator outputs.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let a = mean_log(tape, d_real, false)?;
    let b = mean_log(tape, d_fake, true)?;
    let s = tape.add(a, b)?;
    tape.neg(s)
}

/// Non-saturating generator loss `-mean log D(fake)`.
pub fn generator_loss(tape: &mut Tape, d_fake: Var) -> Result<Var> {
    let a = mean_log(tape, d_fake, false)?;
    tape.neg(a)
}

/// Mean absolute difference.
pub fn identity_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_same("identity_loss", tape, a, b)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean_all(d)
}

// ---- discriminator -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    fn out_size(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

pub const DISCRIMINATOR_LAYERS: [ConvSpec; 4] = [
    ConvSpec {
        in_channels: 3,
        out_channels: 16,
        kernel: 4,
        stride: 2,
        padding: 1,
    },
    ConvSpec {
        in_channels: 16,
        out_channels: 32,
        kernel: 4,
        stride: 2,
        padding: 1,
    },
    ConvSpec {
        in_channels: 32,
        out_channels: 64,
        kernel: 4,
        stride: 2,
        padding: 1,
    },
    ConvSpec {
        in_channels: 64,
        out_channels: 1,
        kernel: 3,
        stride: 1,
        padding: 1,
    },
];

const LEAKY_SLOPE: f64 = 0.2;
const DISC_INIT_STD: f64 = 0.02;

/// Input layout of an im2col gather.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    /// `[C, H, W]`
    ChannelFirst,
    /// `[H·W, C]`
    ChannelLast,
}

/// Gather index producing `[Ho·Wo, C·k·k]` patch rows; out-of-bounds taps read 0.
fn im2col_index(
    spec: &ConvSpec,
    h: usize,
    w: usize,
    layout: Layout,
) -> (Arc<[isize]>, usize, usize) {
    let ho = spec.out_size(h).expect("checked by caller");
    let wo = spec.out_size(w).expect("checked by caller");
    let (c, k) = (spec.in_channels, spec.kernel);
    let mut idx = Vec::with_capacity(ho * wo * c * k * k);
    for oi in 0..ho {
        for oj in 0..wo {
            for ch in 0..c {
                for di in 0..k {
                    for dj in 0..k {
                        let i = (oi * spec.stride + di) as isize - spec.padding as isize;
                        let j = (oj * spec.stride + dj) as isize - spec.padding as isize;
                        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                            idx.push(-1);
                        } else {
                            let (i, j) = (i as usize, j as usize);
                            idx.push(match layout {
                                Layout::ChannelFirst => ((ch * h + i) * w + j) as isize,
                                Layout::ChannelLast => ((i * w + j) * c + ch) as isize,
                            });
                        }
                    }
                }
            }
        }
    }
    (idx.into(), ho, wo)
}

/// Strided convolutional patch classifier with a sigmoid realness map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<(ConvSpec, ParamId, ParamId)>,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        let layers = DISCRIMINATOR_LAYERS
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let fan = spec.in_channels * spec.kernel * spec.kernel;
                let w = store.normal(
                    format!("{name}.conv{i}.weight"),
                    &[fan, spec.out_channels],
                    DISC_INIT_STD,
                    rng,
                );
                let b = store.zeros(format!("{name}.conv{i}.bias"), &[spec.out_channels]);
                (*spec, w, b)
            })
            .collect();
        Discriminator { layers }
    }

    /// Realness probabilities `[Ho·Wo]` for one image `[3, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &mut Params, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != self.layers[0].0.in_channels {
            return Err(Error::Shape {
                op: "discriminator",
                detail: format!("expected [3, H, W], got {s:?}"),
            });
        }
        let (mut h, mut w) = (s[1], s[2]);
        let mut x = image;
        let mut layout = Layout::ChannelFirst;
        let last = self.layers.len() - 1;
        for (li, (spec, wid, bid)) in self.layers.iter().enumerate() {
            if spec.out_size(h).is_none() || spec.out_size(w).is_none() {
                return Err(Error::Shape {
                    op: "discriminator",
                    detail: format!("input {}x{} is too small", s[1], s[2]),
                });
            }
            let (idx, ho, wo) = im2col_index(spec, h, w, layout);
            let cols = tape.gather(
                x,
                idx,
                &[ho * wo, spec.in_channels * spec.kernel * spec.kernel],
            )?;
            let wv = p.var(tape, *wid);
            let bv = p.var(tape, *bid);
            let y = tape.matmul(cols, wv)?;
            let y = tape.add(y, bv)?;
            x = if li == last {
                tape.sigmoid(y)?
            } else {
                tape.leaky_relu(y, LEAKY_SLOPE)?
            };
            layout = Layout::ChannelLast;
            h = ho;
            w = wo;
        }
        tape.reshape(x, &[h * w])
    }

    /// Realness maps of several images concatenated into one vector.
    pub fn forward_batch(&self, tape: &mut Tape, p: &mut Params, images: &[Var]) -> Result<Var> {
        let outs = images
            .iter()
            .map(|&im| self.forward(tape, p, im))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&outs, 0)
    }
}

// ---- combination -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ort_visible: f64,
    pub ort_infrared: f64,
    pub sim: f64,
    pub adv: f64,
    pub ide: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ort_visible: 1.0,
            ort_infrared: 1.0,
            sim: 1.0,
            adv: 1.0,
            ide: 1.0,
            rec: 1.0,
        }
    }
}

/// Which side of the spherical transform the feature losses read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureSource {
    #[default]
    Psi,
    PsiHat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub ort_normalized: bool,
    pub ssim_normalize: bool,
    pub features: FeatureSource,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            weights: LossWeights::default(),
            ort_normalized: true,
            ssim_normalize: true,
            features: FeatureSource::Psi,
        }
    }
}

/// Everything one generator step's objective is computed from. Image
/// entries are lists over the batch; feature entries are per sample.
pub struct LossInputs<'a> {
    pub visible: &'a [Decomposition],
    pub infrared: &'a [Decomposition],
    /// Removal output for each sample.
    pub restored: &'a [Var],
    /// Shadow-free crop each restoration is compared with.
    pub shadow_free: &'a [Var],
    /// Rendered pseudo-shadow for each sample.
    pub generated_shadow: &'a [Var],
    /// Genuine shadow crop for each sample.
    pub shadow: &'a [Var],
    /// Discriminator realness of the generated shadows (discriminator frozen).
    pub d_fake: Var,
}

/// Component nodes of the generator objective on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ort_visible: Var,
    pub ort_infrared: Var,
    pub sim: Var,
    pub adv_generator: Var,
    pub ide: Var,
    pub rec: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub ort_visible: f64,
    pub ort_infrared: f64,
    pub sim: f64,
    pub adv_generator: f64,
    pub adv_discriminator: f64,
    pub ide: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,ort_visible,ort_infrared,sim,adv_generator,adv_discriminator,ide,rec,total";

    pub fn csv_line(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{}",
            self.ort_visible,
            self.ort_infrared,
            self.sim,
            self.adv_generator,
            self.adv_discriminator,
            self.ide,
            self.rec,
            self.total
        )
    }

    /// Names of non-finite components.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("ort_visible", self.ort_visible),
            ("ort_infrared", self.ort_infrared),
            ("sim", self.sim),
            ("adv_generator", self.adv_generator),
            ("adv_discriminator", self.adv_discriminator),
            ("ide", self.ide),
            ("rec", self.rec),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

impl LossTerms {
    pub fn report(&self, tape: &Tape, adv_discriminator: f64) -> LossReport {
        let v = |x: Var| tape.value(x).item();
        LossReport {
            ort_visible: v(self.ort_visible),
            ort_infrared: v(self.ort_infrared),
            sim: v(self.sim),
            adv_generator: v(self.adv_generator),
            adv_discriminator,
            ide: v(self.ide),
            rec: v(self.rec),
            total: v(self.total),
        }
    }
}

fn pick(d: &Decomposition, src: FeatureSource) -> FeatureBundle {
    match src {
        FeatureSource::Psi => d.psi,
        FeatureSource::PsiHat => d.psi_hat,
    }
}

fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Err(Error::Shape {
            op: "total_loss",
            detail: "empty batch".into(),
        });
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

fn per_sample(
    tape: &mut Tape,
    a: &[Var],
    b: &[Var],
    mut f: impl FnMut(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<Var> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "total_loss",
            detail: format!("batch sizes {} and {} differ", a.len(), b.len()),
        });
    }
    let terms = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f(tape, x, y))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, &terms)
}

/// Builds the weighted generator objective. Each component is averaged over
/// the batch.
pub fn total_loss(tape: &mut Tape, inputs: &LossInputs, opts: &LossOptions) -> Result<LossTerms> {
    let vis: Vec<FeatureBundle> = inputs
        .visible
        .iter()
        .map(|d| pick(d, opts.features))
        .collect();
    let ir: Vec<FeatureBundle> = inputs
        .infrared
        .iter()
        .map(|d| pick(d, opts.features))
        .collect();
    let norm = opts.ort_normalized;

    let va: Vec<Var> = vis.iter().map(|b| b.align).collect();
    let vs: Vec<Var> = vis.iter().map(|b| b.separ).collect();
    let ia: Vec<Var> = ir.iter().map(|b| b.align).collect();
    let is: Vec<Var> = ir.iter().map(|b| b.separ).collect();
    let ort_visible = per_sample(tape, &va, &vs, |t, a, s| orthogonality_loss(t, a, s, norm))?;
    let ort_infrared = per_sample(tape, &ia, &is, |t, a, s| orthogonality_loss(t, a, s, norm))?;
    let sim = per_sample(tape, &va, &ia, |t, a, b| {
        ssim_loss(t, a, b, opts.ssim_normalize)
    })?;
    let adv_generator = generator_loss(tape, inputs.d_fake)?;
    let ide = per_sample(tape, inputs.generated_shadow, inputs.shadow, identity_loss)?;
    let rec = per_sample(tape, inputs.restored, inputs.shadow_free, identity_loss)?;

    let w = &opts.weights;
    let parts = [
        (ort_visible, w.ort_visible),
        (ort_infrared, w.ort_infrared),
        (sim, w.sim),
        (adv_generator, w.adv),
        (ide, w.ide),
        (rec, w.rec),
    ];
    let mut total = tape.scale(parts[0].0, parts[0].1)?;
    for &(v, wt) in &parts[1..] {
        let s = tape.scale(v, wt)?;
        total = tape.add(total, s)?;
    }
    Ok(LossTerms {
        ort_visible,
        ort_infrared,
        sim,
        adv_generator,
        ide,
        rec,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.constant(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn gram_of_single_position_is_outer_product() {
        let mut tape = Tape::new();
        let f = var(&mut tape, &[2, 1, 1], vec![1.0, 2.0]);
        let g = gram(&mut tape, f).unwrap();
        assert_eq!(tape.data(g), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn orthogonality_of_identical_features_is_one() {
        let mut tape = Tape::new();
        let f = var(&mut tape, &[2, 2, 1], vec![1.0, -0.5, 0.3, 2.0]);
        let l = orthogonality_loss(&mut tape, f, f, true).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_of_disjoint_channels_is_zero() {
        let mut tape = Tape::new();
        let a = var(&mut tape, &[2, 1, 2], vec![1.0, 2.0, 0.0, 0.0]);
        let s = var(&mut tape, &[2, 1, 2], vec![0.0, 0.0, 3.0, -1.0]);
        let l = orthogonality_loss(&mut tape, a, s, true).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn ssim_of_identical_inputs_is_exactly_one() {
        let mut tape = Tape::new();
        let x = var(
            &mut tape,
            &[2, 12, 12],
            (0..288).map(|i| (i as f64 * 0.13).sin()).collect(),
        );
        for normalize in [true, false] {
            let l = ssim_loss(&mut tape, x, x, normalize).unwrap();
            assert_eq!(tape.value(l).item(), 0.0);
        }
    }

    #[test]
    fn ssim_constant_pair() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full([1, 8, 8], 0.2));
        let b = tape.constant(Tensor::full([1, 8, 8], 0.8));
        let l = ssim_loss(&mut tape, a, b, false).unwrap();
        let expected = (2.0 * 0.2 * 0.8 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert!((1.0 - tape.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.470_666).abs() < 1e-6);
    }

    #[test]
    fn window_matrix_columns_are_distributions() {
        let k = ssim_window_matrix(12, 13);
        let n = 12 * 13;
        for c in 0..n {
            let s: f64 = (0..n).map(|r| k.data()[r * n + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adversarial_constants_at_half() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::full([5], 0.5));
        let dl = discriminator_loss(&mut tape, d, d).unwrap();
        let gl = generator_loss(&mut tape, d).unwrap();
        assert!((tape.value(dl).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((tape.value(gl).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_discriminator_is_clamped() {
        let mut tape = Tape::new();
        let real = tape.constant(Tensor::ones([3]));
        let fake = tape.constant(Tensor::zeros([3]));
        let dl = discriminator_loss(&mut tape, real, fake).unwrap();
        assert!(tape.value(dl).item() < 1e-6);
        let gl = generator_loss(&mut tape, fake).unwrap();
        assert!((tape.value(gl).item() + PROB_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn identity_loss_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([3, 2, 2]));
        let o = tape.constant(Tensor::ones([3, 2, 2]));
        let l = identity_loss(&mut tape, z, o).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = identity_loss(&mut tape, o, o).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn discriminator_map_shape_and_range() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let d = Discriminator::new(&mut store, "disc", &mut rng);
        let mut tape = Tape::new();
        let mut p = Params::frozen(&store);
        let img = tape.constant(Tensor::from_fn([3, 32, 32], |i| {
            (i as f64 * 0.01).sin().abs()
        }));
        let out = d.forward(&mut tape, &mut p, img).unwrap();
        assert_eq!(tape.shape(out), &[16]);
        assert!(tape.data(out).iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let (h, w) = (5, 4);
        let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 * 0.1 - 1.0).collect();
        let kern: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new([2, h, w], x.clone()).unwrap());
        let (idx, ho, wo) = im2col_index(&spec, h, w, Layout::ChannelFirst);
        let cols = tape.gather(xv, idx, &[ho * wo, 18]).unwrap();
        let kv = tape.constant(Tensor::new([18, 1], kern.clone()).unwrap());
        let y = tape.matmul(cols, kv).unwrap();
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0;
                for c in 0..2 {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let i = (oi * 2 + di) as isize - 1;
                            let j = (oj * 2 + dj) as isize - 1;
                            if i >= 0 && j >= 0 && i < h as isize && j < w as isize {
                                acc += x[(c * h + i as usize) * w + j as usize]
                                    * kern[(c * 3 + di) * 3 + dj];
                            }
                        }
                    }
                }
                assert!((tape.data(y)[oi * wo + oj] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_line_has_nine_fields() {
        let r = LossReport {
            total: 1.5,
            ..LossReport::default()
        };
        let line = r.csv_line(3);
        assert_eq!(
            line.split(',').count(),
            LossReport::CSV_HEADER.split(',').count()
        );
        assert!(line.starts_with("3,"));
    }
}
