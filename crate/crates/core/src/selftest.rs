//! Sphere-geometry property suite run by the `selftest` command.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gradcheck;
use crate::sphere::{
    exp_map, geodesic_distance, log_map, spherical_transform, SpherePoint, SphericalConfig,
    TangentVector,
};
use crate::tensor::Tensor;

pub const SAMPLES: usize = 1000;
pub const GRADCHECK_CONFIGS: usize = 20;
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A point on the sphere at angle `alpha` from the pole, in a random direction.
fn point_at_angle(rng: &mut impl Rng, cfg: &SphericalConfig, alpha: f64) -> Vec<f64> {
    let n = cfg.ambient_dim;
    let dir = gaussian(rng, n - 1);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut x: Vec<f64> = dir
        .iter()
        .map(|v| cfg.radius * alpha.sin() * v / norm)
        .collect();
    x.push(cfg.radius * alpha.cos());
    x
}

/// Outcome of one property: the worst error seen, or the first failure.
fn measure(f: impl FnOnce() -> crate::Result<f64>) -> std::result::Result<f64, String> {
    match f() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("non-finite error measure {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn result(
    name: &'static str,
    outcome: std::result::Result<f64, String>,
    tol: f64,
) -> PropertyResult {
    match outcome {
        Ok(err) => PropertyResult {
            name,
            passed: err <= tol,
            detail: format!("max error {err:.3e} (tolerance {tol:.1e})"),
        },
        Err(msg) => PropertyResult {
            name,
            passed: false,
            detail: msg,
        },
    }
}

/// Runs every property at `cfg`'s radius. `cfg` is used as given, so an
/// invalid pole tolerance is reported by the failing properties rather than
/// rejected up front.
pub fn run(cfg: &SphericalConfig, seed: u64) -> Vec<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = cfg.radius;
    let tol = 1e-9 * r;
    let mut out = Vec::new();

    let points: Vec<Vec<f64>> = (0..SAMPLES)
        .map(|_| {
            let alpha = rng.random_range(0.0..0.95 * PI);
            point_at_angle(&mut rng, cfg, alpha)
        })
        .collect();
    let tangents: Vec<Vec<f64>> = (0..SAMPLES)
        .map(|_| {
            let v = gaussian(&mut rng, cfg.ambient_dim - 1);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let len = rng.random_range(0.0..0.95 * PI * r);
            v.iter().map(|x| x * len / n).collect()
        })
        .collect();

    out.push(result(
        "exp(log(x)) = x",
        measure(|| {
            let mut worst: f64 = 0.0;
            for p in &points {
                let x = SpherePoint::new(p.clone(), cfg)?;
                let back = exp_map(&log_map(&x, cfg)?, cfg)?;
                worst = worst.max(dist(back.coords(), x.coords()));
            }
            Ok(worst)
        }),
        tol,
    ));
    out.push(result(
        "log(exp(m)) = m",
        measure(|| {
            let mut worst: f64 = 0.0;
            for t in &tangents {
                let m = TangentVector::new(t.clone());
                let back = log_map(&exp_map(&m, cfg)?, cfg)?;
                worst = worst.max(dist(back.components(), t));
            }
            Ok(worst)
        }),
        tol,
    ));
    out.push(result(
        "|exp(m)| = r",
        measure(|| {
            let mut worst: f64 = 0.0;
            for t in &tangents {
                let x = exp_map(&TangentVector::new(t.clone()), cfg)?;
                let n = x.coords().iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max((n - r).abs());
            }
            Ok(worst)
        }),
        tol,
    ));
    out.push(result(
        "|log(x)| = d(N, x)",
        measure(|| {
            let mut worst: f64 = 0.0;
            let pole = cfg.north_pole();
            for p in &points {
                let x = SpherePoint::new(p.clone(), cfg)?;
                let d = geodesic_distance(&pole, &x, cfg)?;
                worst = worst.max((log_map(&x, cfg)?.norm() - d).abs());
            }
            Ok(worst)
        }),
        tol,
    ));
    out.push(result(
        "pole branch is finite and invertible",
        measure(|| {
            let mut worst: f64 = 0.0;
            for alpha in [0.0, 1e-12, 1e-9, 1e-7] {
                let p = point_at_angle(&mut rng, cfg, alpha);
                let x = SpherePoint::new(p, cfg)?;
                let m = log_map(&x, cfg)?;
                let back = exp_map(&m, cfg)?;
                worst = worst.max(dist(back.coords(), x.coords()));
                worst = worst.max((m.norm() - r * alpha).abs());
            }
            Ok(worst)
        }),
        tol,
    ));
    out.push(result(
        "spherical transform gradients",
        measure(|| {
            let mut worst: f64 = 0.0;
            for _ in 0..GRADCHECK_CONFIGS {
                let n = cfg.ambient_dim;
                let positions = rng.random_range(1..4);
                let feats = Tensor::from_fn([n, positions], |_| rng.random_range(-1.0..1.0));
                let w = Tensor::from_fn([n - 1, n - 1], |i| {
                    let eye = if i / (n - 1) == i % (n - 1) { 1.0 } else { 0.0 };
                    eye + 0.3 * rng.random_range(-1.0..1.0)
                });
                let b = Tensor::from_fn([n - 1], |_| 0.2 * rng.random_range(-1.0..1.0));
                let probe = Tensor::from_fn([n, positions], |_| rng.random_range(-1.0..1.0));
                let report = gradcheck::check(&feats, gradcheck::DEFAULT_STEP, |tape, x| {
                    let wv = tape.constant(w.clone());
                    let bv = tape.constant(b.clone());
                    let y = spherical_transform(tape, x, wv, bv, cfg)?;
                    let pv = tape.constant(probe.clone());
                    let prod = tape.mul(y, pv)?;
                    tape.sum_all(prod)
                })?;
                worst = worst.max(report.max_rel_err).max(report.max_abs_err_small);
            }
            Ok(worst)
        }),
        GRAD_TOL,
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerance() {
        for r in [0.5, 1.0, 2.5] {
            let cfg = SphericalConfig::new(r, 4).unwrap();
            for p in run(&cfg, 1) {
                assert!(p.passed, "{} at r={r}: {}", p.name, p.detail);
            }
        }
    }

    #[test]
    fn zero_pole_tolerance_fails_the_pole_branch() {
        let mut cfg = SphericalConfig::new(1.0, 4).unwrap();
        cfg.pole_tolerance = 0.0;
        let results = run(&cfg, 1);
        let pole = results.iter().find(|p| p.name.starts_with("pole")).unwrap();
        assert!(!pole.passed);
    }
}
