//! The Carleman weight `phi(t) = exp(2 (t + a)^lambda)` and empirical
//! diagnostics for the forward and backward parabolic Carleman estimates.
//!
//! The diagnostics report the ratio of the left-hand side of each estimate
//! to the bracket on its right-hand side. A strictly positive ratio is the
//! observable content of the estimate; the constant itself is never computed.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{MfgError, Result};
use crate::grid::{gradient_c, integrate_qt, laplacian_neumann, time_deriv, Field, GridSpec};

/// Shift `a` and exponent `lambda` of the weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanParams {
    pub a: f64,
    pub lambda: f64,
}

impl Default for CarlemanParams {
    fn default() -> Self {
        Self {
            a: 1.01,
            lambda: 2.0,
        }
    }
}

impl CarlemanParams {
    /// Checked constructor: `a > 0`, `lambda >= 1`.
    pub fn new(a: f64, lambda: f64) -> Result<Self> {
        let p = Self { a, lambda };
        p.validate()?;
        Ok(p)
    }

    /// Permits `0 < lambda < 1`, which parameter sweeps use even though the
    /// weight's monotonicity argument assumes `lambda >= 1`.
    pub fn relaxed(a: f64, lambda: f64) -> Result<Self> {
        let p = Self { a, lambda };
        p.validate_relaxed()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_relaxed()?;
        if self.lambda < 1.0 {
            return Err(MfgError::Domain(format!(
                "lambda must be at least 1, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn validate_relaxed(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(MfgError::Domain(format!("a must be positive, got {}", self.a)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(MfgError::Domain(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// `phi(t)` without a range check.
    pub fn value(&self, t: f64) -> f64 {
        (2.0 * (t + self.a).powf(self.lambda)).exp()
    }

    /// `phi(t)` for `t` in `[0, horizon]`.
    pub fn weight(&self, t: f64, horizon: f64) -> Result<f64> {
        if !(0.0..=horizon).contains(&t) {
            return Err(MfgError::Domain(format!(
                "t = {t} outside [0, {horizon}]"
            )));
        }
        let w = self.value(t);
        if !w.is_finite() {
            return Err(MfgError::Numeric(format!(
                "weight overflows at t = {t} (a = {}, lambda = {})",
                self.a, self.lambda
            )));
        }
        Ok(w)
    }

    /// The weight (or its square) sampled on every node of `grid`.
    pub fn weight_field(&self, grid: &GridSpec, squared: bool) -> Field {
        let levels: Vec<f64> = (0..grid.nt)
            .map(|k| {
                let w = self.value(grid.t(k));
                if squared {
                    w * w
                } else {
                    w
                }
            })
            .collect();
        let values = Array3::from_shape_fn((grid.nt, grid.ny, grid.nx), |(k, _, _)| levels[k]);
        Field::from_values_unchecked(grid, values)
    }
}

fn weighted_integral(f: &Field, weight: &Field) -> f64 {
    integrate_qt(&f.mul(weight))
}

fn grad_sq(f: &Field) -> Field {
    let g = gradient_c(f);
    let mut out = g[0].mul(&g[0]);
    for comp in &g[1..] {
        out.axpy(1.0, &comp.mul(comp));
    }
    out
}

fn trace_is_zero(f: &Field, k: usize) -> bool {
    let scale = f.max_abs();
    f.level(k).max_abs() <= 1e-10 * scale
}

/// Empirical ratio for the estimate of `d_t + beta Delta` with weight
/// `phi^2`, valid for functions vanishing at `t = T`.
pub fn carleman_ratio_forward(f: &Field, params: &CarlemanParams, beta: f64) -> Result<f64> {
    params.validate_relaxed()?;
    f.check_finite()?;
    let grid = f.grid();
    if f.max_abs() == 0.0 {
        return Ok(0.0);
    }
    if !trace_is_zero(f, grid.nt - 1) {
        return Err(MfgError::Precondition(
            "forward Carleman diagnostic needs f(., T) = 0".into(),
        ));
    }
    let w2 = params.weight_field(grid, true);
    let ft = time_deriv(f);
    let lap = laplacian_neumann(f);
    let lhs = weighted_integral(&ft.zip_map(&lap, |a, b| (a + beta * b).powi(2)), &w2);
    let lam = params.lambda;
    let rhs = weighted_integral(&ft.zip_map(&lap, |a, b| a * a + b * b), &w2)
        + lam * weighted_integral(&grad_sq(f), &w2)
        + lam * lam * weighted_integral(&f.mul(f), &w2);
    if rhs == 0.0 {
        return Ok(0.0);
    }
    Ok(lhs / rhs)
}

/// Empirical ratio for the estimate of `d_t - beta Delta` with weight
/// `phi`, valid for functions vanishing at `t = 0` and `t = T`.
pub fn carleman_ratio_backward(f: &Field, params: &CarlemanParams, beta: f64) -> Result<f64> {
    params.validate_relaxed()?;
    f.check_finite()?;
    let grid = f.grid();
    if f.max_abs() == 0.0 {
        return Ok(0.0);
    }
    if !trace_is_zero(f, 0) || !trace_is_zero(f, grid.nt - 1) {
        return Err(MfgError::Precondition(
            "backward Carleman diagnostic needs f(., 0) = f(., T) = 0".into(),
        ));
    }
    let w = params.weight_field(grid, false);
    let ft = time_deriv(f);
    let lap = laplacian_neumann(f);
    let lhs = weighted_integral(&ft.zip_map(&lap, |a, b| (a - beta * b).powi(2)), &w);
    let lam = params.lambda;
    let rhs = lam.sqrt() * weighted_integral(&grad_sq(f), &w)
        + lam * lam * weighted_integral(&f.mul(f), &w);
    if rhs == 0.0 {
        return Ok(0.0);
    }
    Ok(lhs / rhs)
}

/// Built-in test functions admissible for the forward estimate: smooth,
/// Neumann-exact in space, vanishing at `t = T`.
pub fn forward_family(grid: &GridSpec) -> Vec<Field> {
    let t_end = grid.horizon;
    let (lx, ly) = (grid.lx, grid.ly);
    let mut family = vec![
        Field::from_fn(grid, |x, _, t| (t_end - t) * (PI * x / lx).cos()),
        Field::from_fn(grid, |x, _, t| (t_end - t).powi(2) * (2.0 * PI * x / lx).cos()),
        Field::from_fn(grid, |x, _, t| (t_end - t) * (1.0 + t) * (1.0 + (PI * x / lx).cos())),
    ];
    if grid.dim == 2 {
        family.push(Field::from_fn(grid, |x, y, t| {
            (t_end - t) * (PI * x / lx).cos() * (PI * y / ly).cos()
        }));
    }
    family
}

/// Built-in test functions admissible for the backward estimate: vanish at
/// both `t = 0` and `t = T`.
pub fn backward_family(grid: &GridSpec) -> Vec<Field> {
    let t_end = grid.horizon;
    let (lx, ly) = (grid.lx, grid.ly);
    let mut family = vec![
        Field::from_fn(grid, |x, _, t| t * (t_end - t) * (PI * x / lx).cos()),
        Field::from_fn(grid, |x, _, t| t * t * (t_end - t) * (2.0 * PI * x / lx).cos()),
        Field::from_fn(grid, |x, _, t| t * (t_end - t) * (1.0 + (PI * x / lx).cos())),
    ];
    if grid.dim == 2 {
        family.push(Field::from_fn(grid, |x, y, t| {
            t * (t_end - t) * (PI * x / lx).cos() * (PI * y / ly).cos()
        }));
    }
    family
}

/// One line of a Carleman diagnostic sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarlemanRow {
    pub lambda: f64,
    pub member: usize,
    pub forward: f64,
    pub backward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarlemanReport {
    pub rows: Vec<CarlemanRow>,
    pub min_forward: f64,
    pub min_backward: f64,
}

impl CarlemanReport {
    pub fn all_positive(&self) -> bool {
        self.rows.iter().all(|r| r.forward > 0.0 && r.backward > 0.0)
    }
}

/// Evaluates both ratios for every member of the built-in families at every
/// `lambda`.
pub fn carleman_sweep(grid: &GridSpec, a: f64, lambdas: &[f64], beta: f64) -> Result<CarlemanReport> {
    let fwd = forward_family(grid);
    let bwd = backward_family(grid);
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let params = CarlemanParams::relaxed(a, lambda)?;
        for (member, (f, b)) in fwd.iter().zip(&bwd).enumerate() {
            rows.push(CarlemanRow {
                lambda,
                member,
                forward: carleman_ratio_forward(f, &params, beta)?,
                backward: carleman_ratio_backward(b, &params, beta)?,
            });
        }
    }
    let min_forward = rows.iter().map(|r| r.forward).fold(f64::INFINITY, f64::min);
    let min_backward = rows.iter().map(|r| r.backward).fold(f64::INFINITY, f64::min);
    Ok(CarlemanReport {
        rows,
        min_forward,
        min_backward,
    })
}
