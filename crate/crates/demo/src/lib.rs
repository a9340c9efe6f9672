//! WebAssembly bindings behind `www/index.html`.
//!
//! Three operations are exposed: mapping a point through a tangent-space
//! rotation on the sphere, rendering a synthetic shadow scene with its
//! pseudo-infrared companion, and scoring a relit scene against its
//! shadow-free reference per region. Everything here is a thin wrapper that
//! converts between flat `f64`/`u8` buffers and library tensors.

use deshadow::data::{pseudo_infrared, quantize, render_scene, SynthConfig, SynthScene};
use deshadow::metrics::{psnr_region, rmse_region, ssim_image, Region};
use deshadow::sphere::{
    exp_map, geodesic_distance, log_map, tangent_linear, SpherePoint, SphericalConfig,
};
use deshadow::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: deshadow::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Maps `point` (ambient coordinates, any length ≥ 2) through
/// `exp(R·log(x) + b)` where `R` rotates the first two tangent axes by
/// `angle` radians and `b` shifts the first tangent axis by `shift`.
///
/// Returns `[projected.., log.., distance, transformed..]`, so an n-vector
/// yields `n + (n-1) + 1 + n` values.
#[wasm_bindgen]
pub fn sphere_map(point: &[f64], radius: f64, angle: f64, shift: f64) -> Result<Vec<f64>, JsError> {
    let n = point.len();
    let cfg = SphericalConfig::new(radius, n).map_err(js_err)?;
    let k = n - 1;
    let (c, s) = (angle.cos(), angle.sin());
    let w = Tensor::from_fn([k, k], |i| {
        let (r, col) = (i / k, i % k);
        match (r, col) {
            (0, 0) => c,
            (0, 1) => -s,
            (1, 0) => s,
            (1, 1) => c,
            _ if r == col => 1.0,
            _ => 0.0,
        }
    });
    let b = Tensor::from_fn([k], |i| if i == 0 { shift } else { 0.0 });
    let x = SpherePoint::new(point.to_vec(), &cfg).map_err(js_err)?;
    let m = log_map(&x, &cfg).map_err(js_err)?;
    let y = exp_map(&tangent_linear(&m, &w, &b).map_err(js_err)?, &cfg).map_err(js_err)?;
    let d = geodesic_distance(&cfg.north_pole(), &x, &cfg).map_err(js_err)?;
    let mut out = x.coords().to_vec();
    out.extend_from_slice(m.components());
    out.push(d);
    out.extend_from_slice(y.coords());
    Ok(out)
}

/// One synthetic scene kept alive on the Rust side between UI events.
#[wasm_bindgen]
pub struct Scene {
    inner: SynthScene,
    infrared: Tensor,
    size: usize,
}

fn rgba(t: &Tensor) -> Vec<u8> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let n = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(4 * n);
    for p in 0..n {
        for ch in 0..3 {
            out.push(quantize(d[(ch % c) * n + p]));
        }
        out.push(255);
    }
    out
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize) -> Result<Scene, JsError> {
        if !(16..=256).contains(&size) {
            return Err(JsError::new("size must be between 16 and 256"));
        }
        let cfg = SynthConfig::new(1, size, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = render_scene(&cfg, &mut rng).map_err(js_err)?;
        let infrared = pseudo_infrared(&inner.shadow);
        Ok(Scene {
            inner,
            infrared,
            size,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA bytes of one layer: `shadow`, `gt`, `mask` or `infrared`.
    pub fn layer(&self, name: &str) -> Result<Vec<u8>, JsError> {
        let t = match name {
            "shadow" => &self.inner.shadow,
            "gt" => &self.inner.gt,
            "mask" => &self.inner.mask,
            "infrared" => &self.infrared,
            _ => return Err(JsError::new(&format!("unknown layer {name}"))),
        };
        Ok(rgba(t))
    }

    /// Multiplies the shadowed pixels by `gain` (clamped to [0, 1]).
    fn relit(&self, gain: f64) -> Tensor {
        let n = self.size * self.size;
        let (img, mask) = (&self.inner.shadow, &self.inner.mask);
        Tensor::from_fn(img.shape().to_vec(), |i| {
            let v = img.data()[i];
            if mask.data()[i % n] >= 0.5 {
                (v * gain).clamp(0.0, 1.0)
            } else {
                v
            }
        })
    }

    pub fn relit_rgba(&self, gain: f64) -> Vec<u8> {
        rgba(&self.relit(gain))
    }

    /// RMSE, PSNR and SSIM of the relit scene against the shadow-free
    /// reference, each as shadow, non-shadow, all: nine values.
    pub fn metrics(&self, gain: f64) -> Result<Vec<f64>, JsError> {
        let pred = self.relit(gain);
        let (gt, mask) = (&self.inner.gt, &self.inner.mask);
        let mut out = Vec::with_capacity(9);
        for f in [rmse_region, psnr_region, ssim_image] {
            for region in Region::ALL {
                out.push(f(&pred, gt, mask, region).map_err(js_err)?);
            }
        }
        Ok(out)
    }

    /// The gain that exactly undoes a uniform darkening: reciprocal of the
    /// mean darkening inside the mask.
    pub fn oracle_gain(&self) -> f64 {
        let (d, m) = (self.inner.darkening.data(), self.inner.mask.data());
        let (sum, count) = d
            .iter()
            .zip(m)
            .filter(|(_, m)| **m >= 0.5)
            .fold((0.0, 0usize), |(s, c), (d, _)| (s + d, c + 1));
        count as f64 / sum
    }
}
