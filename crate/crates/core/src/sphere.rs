//! Geometry of the radius-`r` sphere in `R^n`, anchored at the north pole
//! `N = (0, ..., 0, r)`.
//!
//! The logarithmic map sends a sphere point to the tangent space at `N`, the
//! exponential map goes back, and [`spherical_transform`] composes
//! `exp ∘ linear ∘ log` per feature position on a [`Tape`] so that the whole
//! pipeline is differentiable.
//!
//! Tangent vectors at `N` have a zero final ambient coordinate, so they are
//! stored by their first `n - 1` components only.
//!
//! Near the pole both maps divide by quantities that vanish (`sin α`, `β`).
//! Below `pole_tolerance` they switch to second-order series:
//! `α / sin α ≈ 1 + α²/6` and `sin β / β ≈ 1 - β²/6`.

use std::f64::consts::PI;

use crate::autodiff::{ScalarFn, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative tolerance for points that are supposed to lie on the sphere.
pub const ON_SPHERE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    /// Scale inputs onto the sphere; zero vectors are rejected.
    #[default]
    NormalizeToSphere,
    /// Inputs must already lie on the sphere.
    RejectOffSphere,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalConfig {
    pub radius: f64,
    pub ambient_dim: usize,
    pub pole_tolerance: f64,
    pub projection: ProjectionMode,
}

impl SphericalConfig {
    pub const DEFAULT_POLE_TOLERANCE: f64 = 1e-6;

    pub fn new(radius: f64, ambient_dim: usize) -> Result<Self> {
        let cfg = SphericalConfig {
            radius,
            ambient_dim,
            pole_tolerance: Self::DEFAULT_POLE_TOLERANCE,
            projection: ProjectionMode::NormalizeToSphere,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_pole_tolerance(mut self, eps: f64) -> Result<Self> {
        self.pole_tolerance = eps;
        self.validate()?;
        Ok(self)
    }

    pub fn with_projection(mut self, mode: ProjectionMode) -> Self {
        self.projection = mode;
        self
    }

    pub fn with_dim(mut self, ambient_dim: usize) -> Result<Self> {
        self.ambient_dim = ambient_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::SphereConfig(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if self.ambient_dim < 2 {
            return Err(Error::SphereConfig(format!(
                "ambient dimension must be at least 2, got {}",
                self.ambient_dim
            )));
        }
        if !(self.pole_tolerance > 0.0 && self.pole_tolerance <= 1e-3) {
            return Err(Error::SphereConfig(format!(
                "pole tolerance must lie in (0, 1e-3], got {}",
                self.pole_tolerance
            )));
        }
        Ok(())
    }

    pub fn north_pole(&self) -> SpherePoint {
        let mut coords = vec![0.0; self.ambient_dim];
        coords[self.ambient_dim - 1] = self.radius;
        SpherePoint { coords }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpherePoint {
    coords: Vec<f64>,
}

impl SpherePoint {
    /// Places `coords` on the sphere according to the configured projection.
    pub fn new(coords: Vec<f64>, cfg: &SphericalConfig) -> Result<Self> {
        if coords.len() != cfg.ambient_dim {
            return Err(Error::Shape {
                op: "sphere point",
                detail: format!(
                    "expected {} coordinates, got {}",
                    cfg.ambient_dim,
                    coords.len()
                ),
            });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sphere point".into()));
        }
        let norm = l2(&coords);
        match cfg.projection {
            ProjectionMode::NormalizeToSphere => {
                if norm == 0.0 {
                    return Err(Error::Degenerate(
                        "zero vector cannot be placed on the sphere".into(),
                    ));
                }
                let s = cfg.radius / norm;
                Ok(SpherePoint {
                    coords: coords.into_iter().map(|v| v * s).collect(),
                })
            }
            ProjectionMode::RejectOffSphere => {
                if (norm - cfg.radius).abs() > ON_SPHERE_TOL * cfg.radius {
                    return Err(Error::OffSphere {
                        norm,
                        radius: cfg.radius,
                    });
                }
                Ok(SpherePoint { coords })
            }
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    components: Vec<f64>,
}

impl TangentVector {
    pub fn new(components: Vec<f64>) -> Self {
        TangentVector { components }
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    /// Ambient dimension of the sphere this vector is tangent to.
    pub fn base_dim(&self) -> usize {
        self.components.len() + 1
    }

    /// Ambient coordinates `(m, 0)`.
    pub fn ambient(&self) -> Vec<f64> {
        let mut v = self.components.clone();
        v.push(0.0);
        v
    }

    pub fn norm(&self) -> f64 {
        l2(&self.components)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `α / sin α`, with the series branch below `eps`.
pub fn alpha_over_sin(alpha: f64, eps: f64) -> f64 {
    if alpha < eps {
        1.0 + alpha * alpha / 6.0
    } else {
        alpha / alpha.sin()
    }
}

/// `sin β / β`, with the series branch below `eps`.
pub fn sin_over_beta(beta: f64, eps: f64) -> f64 {
    if beta < eps {
        1.0 - beta * beta / 6.0
    } else {
        beta.sin() / beta
    }
}

// Log-map coefficient as a function of u = cos α = X_n / r.
fn log_coef(u: f64, eps: f64) -> f64 {
    alpha_over_sin(u.clamp(-1.0, 1.0).acos(), eps)
}

fn log_coef_du(u: f64, eps: f64) -> f64 {
    let a = u.clamp(-1.0, 1.0).acos();
    if a < eps {
        -(1.0 / 3.0 + 2.0 * a * a / 15.0)
    } else {
        let s = a.sin();
        -(s - a * a.cos()) / (s * s * s)
    }
}

// Exp-map coefficients as functions of s = β², smooth at s = 0.
fn sinc_sqrt(s: f64, eps: f64) -> f64 {
    sin_over_beta(s.max(0.0).sqrt(), eps)
}

fn sinc_sqrt_ds(s: f64, eps: f64) -> f64 {
    let b = s.max(0.0).sqrt();
    if b < eps {
        -1.0 / 6.0 + s / 60.0
    } else {
        (b * b.cos() - b.sin()) / (2.0 * b * b * b)
    }
}

fn cos_sqrt(s: f64, _eps: f64) -> f64 {
    s.max(0.0).sqrt().cos()
}

fn cos_sqrt_ds(s: f64, eps: f64) -> f64 {
    -0.5 * sinc_sqrt(s, eps)
}

/// Logarithmic map at the north pole.
pub fn log_map(x: &SpherePoint, cfg: &SphericalConfig) -> Result<TangentVector> {
    let n = cfg.ambient_dim;
    if x.dim() != n {
        return Err(Error::ShapeMismatch {
            op: "log_map",
            lhs: vec![x.dim()],
            rhs: vec![n],
        });
    }
    let norm = l2(&x.coords);
    if (norm - cfg.radius).abs() > ON_SPHERE_TOL * cfg.radius {
        return Err(Error::OffSphere {
            norm,
            radius: cfg.radius,
        });
    }
    let r = cfg.radius;
    let u = x.coords[n - 1] / r;
    let alpha = u.clamp(-1.0, 1.0).acos();
    if alpha >= PI - cfg.pole_tolerance {
        return Err(Error::Antipodal { alpha });
    }
    let coef = alpha_over_sin(alpha, cfg.pole_tolerance);
    // X - N cos α has first n-1 coordinates equal to X's.
    let components: Vec<f64> = x.coords[..n - 1].iter().map(|v| coef * v).collect();
    if components.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log_map result".into()));
    }
    Ok(TangentVector { components })
}

/// Exponential map at the north pole.
pub fn exp_map(m: &TangentVector, cfg: &SphericalConfig) -> Result<SpherePoint> {
    let n = cfg.ambient_dim;
    if m.base_dim() != n {
        return Err(Error::ShapeMismatch {
            op: "exp_map",
            lhs: vec![m.components.len()],
            rhs: vec![n - 1],
        });
    }
    if m.components.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tangent vector".into()));
    }
    let r = cfg.radius;
    let beta = m.norm() / r;
    let k = sin_over_beta(beta, cfg.pole_tolerance);
    let mut coords: Vec<f64> = m.components.iter().map(|v| v * k).collect();
    coords.push(r * beta.cos());
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("exp_map result".into()));
    }
    Ok(SpherePoint { coords })
}

/// `W m + b` between tangent spaces. `W` is `(n2-1) x (n1-1)`.
pub fn tangent_linear(m: &TangentVector, w: &Tensor, b: &Tensor) -> Result<TangentVector> {
    let k = m.components.len();
    let ws = w.shape();
    if ws.len() != 2 || ws[1] != k || b.shape() != [ws[0]] {
        return Err(Error::Shape {
            op: "tangent_linear",
            detail: format!(
                "weight {ws:?} and bias {:?} do not fit a tangent vector of {k} components",
                b.shape()
            ),
        });
    }
    let components = (0..ws[0])
        .map(|i| {
            let row = &w.data()[i * k..(i + 1) * k];
            row.iter()
                .zip(&m.components)
                .map(|(a, x)| a * x)
                .sum::<f64>()
                + b.data()[i]
        })
        .collect();
    Ok(TangentVector { components })
}

/// Great-circle distance `r · arccos(XᵀY / r²)`.
pub fn geodesic_distance(x: &SpherePoint, y: &SpherePoint, cfg: &SphericalConfig) -> Result<f64> {
    for p in [x, y] {
        let norm = l2(&p.coords);
        if p.dim() != cfg.ambient_dim {
            return Err(Error::ShapeMismatch {
                op: "geodesic_distance",
                lhs: vec![p.dim()],
                rhs: vec![cfg.ambient_dim],
            });
        }
        if (norm - cfg.radius).abs() > ON_SPHERE_TOL * cfg.radius {
            return Err(Error::OffSphere {
                norm,
                radius: cfg.radius,
            });
        }
    }
    let r = cfg.radius;
    let dot: f64 = x.coords.iter().zip(&y.coords).map(|(a, b)| a * b).sum();
    Ok(r * (dot / (r * r)).clamp(-1.0, 1.0).acos())
}

/// Point-wise composition `exp(linear(log(X)))` on a single point.
pub fn transform_point(
    x: &SpherePoint,
    w: &Tensor,
    b: &Tensor,
    cfg_in: &SphericalConfig,
    cfg_out: &SphericalConfig,
) -> Result<SpherePoint> {
    let m = log_map(x, cfg_in)?;
    let m2 = tangent_linear(&m, w, b)?;
    exp_map(&m2, cfg_out)
}

// ---- differentiable versions ----------------------------------------------

/// Projects every column of `features` (`[n, positions]`) onto the sphere.
pub fn project_columns(tape: &mut Tape, features: Var, cfg: &SphericalConfig) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "project_columns",
            detail: format!("expected [channels, positions], got {shape:?}"),
        });
    }
    let sq = tape.mul(features, features)?;
    let norm_sq = tape.sum(sq, &[0], true)?;
    if let Some(p) = tape.data(norm_sq).iter().position(|v| *v == 0.0) {
        return Err(Error::Degenerate(format!(
            "zero channel vector at position {p}"
        )));
    }
    match cfg.projection {
        ProjectionMode::NormalizeToSphere => {
            let norm = tape.sqrt(norm_sq)?;
            let unit = tape.div(features, norm)?;
            tape.scale(unit, cfg.radius)
        }
        ProjectionMode::RejectOffSphere => {
            let r = cfg.radius;
            if let Some(v) = tape
                .data(norm_sq)
                .iter()
                .map(|v| v.sqrt())
                .find(|n| (n - r).abs() > ON_SPHERE_TOL * r)
            {
                return Err(Error::OffSphere { norm: v, radius: r });
            }
            Ok(features)
        }
    }
}

/// Column-wise logarithmic map: `[n, P]` sphere points to `[n-1, P]` tangent
/// components.
pub fn log_map_columns(tape: &mut Tape, points: Var, cfg: &SphericalConfig) -> Result<Var> {
    let shape = tape.shape(points).to_vec();
    let n = shape[0];
    if shape.len() != 2 || n < 2 {
        return Err(Error::Shape {
            op: "log_map",
            detail: format!("expected [n >= 2, positions], got {shape:?}"),
        });
    }
    let r = cfg.radius;
    let y = tape.narrow(points, 0, 0, n - 1)?;
    let z = tape.narrow(points, 0, n - 1, 1)?;
    let u = tape.scale(z, 1.0 / r)?;
    if let Some(alpha) = tape
        .data(u)
        .iter()
        .map(|u| u.clamp(-1.0, 1.0).acos())
        .find(|a| *a >= PI - cfg.pole_tolerance)
    {
        return Err(Error::Antipodal { alpha });
    }
    let coef = tape.map(
        u,
        ScalarFn {
            name: "log_coef",
            f: log_coef,
            df: log_coef_du,
            param: cfg.pole_tolerance,
        },
    )?;
    tape.mul(y, coef)
}

/// Column-wise exponential map: `[n-1, P]` tangent components to `[n, P]`
/// sphere points.
pub fn exp_map_columns(tape: &mut Tape, tangent: Var, cfg: &SphericalConfig) -> Result<Var> {
    let shape = tape.shape(tangent).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "exp_map",
            detail: format!("expected [n-1, positions], got {shape:?}"),
        });
    }
    let r = cfg.radius;
    let sq = tape.mul(tangent, tangent)?;
    let norm_sq = tape.sum(sq, &[0], true)?;
    let beta_sq = tape.scale(norm_sq, 1.0 / (r * r))?;
    let eps = cfg.pole_tolerance;
    let k = tape.map(
        beta_sq,
        ScalarFn {
            name: "sinc_sqrt",
            f: sinc_sqrt,
            df: sinc_sqrt_ds,
            param: eps,
        },
    )?;
    let c = tape.map(
        beta_sq,
        ScalarFn {
            name: "cos_sqrt",
            f: cos_sqrt,
            df: cos_sqrt_ds,
            param: eps,
        },
    )?;
    let top = tape.mul(tangent, k)?;
    let last = tape.scale(c, r)?;
    tape.concat(&[top, last], 0)
}

/// `exp(W · log(project(M)) + b)` applied independently at every position.
///
/// `features` is `[n1, positions]`, `weight` is `[(n2-1), (n1-1)]` and `bias`
/// is `[n2-1]`; the result is `[n2, positions]` on the radius-`r` sphere.
pub fn spherical_transform(
    tape: &mut Tape,
    features: Var,
    weight: Var,
    bias: Var,
    cfg: &SphericalConfig,
) -> Result<Var> {
    cfg_check_radius(cfg)?;
    let n1 = tape.shape(features)[0];
    let ws = tape.shape(weight).to_vec();
    let bs = tape.shape(bias).to_vec();
    if ws.len() != 2 || ws[1] + 1 != n1 || bs != [ws[0]] {
        return Err(Error::Shape {
            op: "spherical_transform",
            detail: format!("weight {ws:?} / bias {bs:?} incompatible with {n1} input channels"),
        });
    }
    let on_sphere = project_columns(tape, features, cfg)?;
    let tangent = log_map_columns(tape, on_sphere, cfg)?;
    let moved = tape.matmul(weight, tangent)?;
    let bias_col = tape.reshape(bias, &[ws[0], 1])?;
    let moved = tape.add(moved, bias_col)?;
    exp_map_columns(tape, moved, cfg)
}

fn cfg_check_radius(cfg: &SphericalConfig) -> Result<()> {
    if !(cfg.radius > 0.0 && cfg.radius.is_finite()) {
        return Err(Error::SphereConfig(format!(
            "radius must be positive, got {}",
            cfg.radius
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cfg3() -> SphericalConfig {
        SphericalConfig::new(1.0, 3).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SphericalConfig::new(0.0, 3).is_err());
        assert!(SphericalConfig::new(1.0, 1).is_err());
        assert!(cfg3().with_pole_tolerance(0.0).is_err());
        assert!(cfg3().with_pole_tolerance(1e-2).is_err());
        assert_eq!(cfg3().north_pole().coords(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_of_pole_is_zero() {
        let cfg = cfg3();
        let m = log_map(&cfg.north_pole(), &cfg).unwrap();
        assert_eq!(m.components(), &[0.0, 0.0]);
    }

    #[test]
    fn log_of_equator_point() {
        let cfg = cfg3();
        let x = SpherePoint::new(vec![1.0, 0.0, 0.0], &cfg).unwrap();
        let m = log_map(&x, &cfg).unwrap();
        assert!((m.components()[0] - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(m.components()[1], 0.0);
    }

    #[test]
    fn exp_of_zero_and_quarter_turn() {
        let cfg = cfg3();
        let p = exp_map(&TangentVector::new(vec![0.0, 0.0]), &cfg).unwrap();
        assert_eq!(p, cfg.north_pole());
        let q = exp_map(&TangentVector::new(vec![FRAC_PI_2, 0.0]), &cfg).unwrap();
        assert!((q.coords()[0] - 1.0).abs() < 1e-15);
        assert!(q.coords()[1].abs() < 1e-15);
        assert!(q.coords()[2].abs() < 1e-15);
    }

    #[test]
    fn antipode_is_rejected() {
        let cfg = cfg3();
        let x = SpherePoint::new(vec![0.0, 0.0, -1.0], &cfg).unwrap();
        assert!(matches!(log_map(&x, &cfg), Err(Error::Antipodal { .. })));
    }

    #[test]
    fn projection_modes() {
        let cfg = cfg3();
        assert!(SpherePoint::new(vec![0.0, 0.0, 0.0], &cfg).is_err());
        let p = SpherePoint::new(vec![3.0, 0.0, 4.0], &cfg).unwrap();
        assert!((l2(p.coords()) - 1.0).abs() < 1e-15);
        let strict = cfg.with_projection(ProjectionMode::RejectOffSphere);
        assert!(matches!(
            SpherePoint::new(vec![3.0, 0.0, 4.0], &strict),
            Err(Error::OffSphere { .. })
        ));
        assert!(SpherePoint::new(vec![0.6, 0.0, 0.8], &strict).is_ok());
    }

    #[test]
    fn tangent_linear_cases() {
        let m = TangentVector::new(vec![1.0, 1.0]);
        let w = Tensor::new([2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let b = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        assert_eq!(
            tangent_linear(&m, &w, &b).unwrap().components(),
            &[3.0, 2.0]
        );
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros([2]);
        assert_eq!(tangent_linear(&m, &eye, &zero).unwrap(), m);
        let cfg = cfg3();
        let z = tangent_linear(&m, &Tensor::zeros([2, 2]), &zero).unwrap();
        assert_eq!(exp_map(&z, &cfg).unwrap(), cfg.north_pole());
        assert!(tangent_linear(&m, &Tensor::zeros([2, 3]), &zero).is_err());
    }

    #[test]
    fn geodesic_cases() {
        let cfg = cfg3();
        let n = cfg.north_pole();
        let x = SpherePoint::new(vec![1.0, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(geodesic_distance(&x, &x, &cfg).unwrap(), 0.0);
        assert!((geodesic_distance(&n, &x, &cfg).unwrap() - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn series_branch_is_continuous() {
        let eps = 1e-6;
        for k in 0..50 {
            let a = eps / 10.0 * (100.0f64).powf(k as f64 / 49.0);
            assert!((1.0 + a * a / 6.0 - a / a.sin()).abs() < 1e-12);
            assert!((1.0 - a * a / 6.0 - a.sin() / a).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_transform_matches_point_transform() {
        let cfg = SphericalConfig::new(1.5, 3).unwrap();
        let w = Tensor::new([2, 2], vec![0.8, -0.3, 0.2, 1.1]).unwrap();
        let b = Tensor::new([2], vec![0.05, -0.1]).unwrap();
        let cols = [[0.3, -0.7, 1.2], [2.0, 0.1, 0.4], [-0.2, -0.2, 0.9]];
        let mut data = vec![0.0; 9];
        for (p, c) in cols.iter().enumerate() {
            for i in 0..3 {
                data[i * 3 + p] = c[i];
            }
        }
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new([3, 3], data).unwrap());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let out = spherical_transform(&mut tape, f, wv, bv, &cfg).unwrap();
        for (p, c) in cols.iter().enumerate() {
            let x = SpherePoint::new(c.to_vec(), &cfg).unwrap();
            let y = transform_point(&x, &w, &b, &cfg, &cfg).unwrap();
            for i in 0..3 {
                assert!((tape.value(out).at(&[i, p]) - y.coords()[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_column_is_degenerate() {
        let cfg = cfg3();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::zeros([2, 2]));
        let b = tape.constant(Tensor::zeros([2]));
        assert!(matches!(
            spherical_transform(&mut tape, f, w, b, &cfg),
            Err(Error::Degenerate(_))
        ));
    }
}
