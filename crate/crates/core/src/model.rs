//! Coefficients of the second-order mean field games system and its
//! discrete residual operators.
//!
//! ```text
//! L1(u,p) = u_t + beta Lap u + s |grad u|^2 / 2 + int K(x,y) p(y,t) dy + f p + F1
//! L2(u,p) = p_t - beta Lap p + div(s p grad u) + F2
//! ```
//!
//! Besides the residuals this module provides their exact directional
//! derivatives and the transposes of those derivatives, which the objective
//! gradient is assembled from.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};
use crate::grid::{
    divergence_c, divergence_c_transpose, gradient_c, gradient_c_transpose, laplacian_neumann,
    laplacian_neumann_transpose, time_deriv, time_deriv_transpose, Field, GridSpec, SpatialField,
};

/// Largest spatial node count for which a dense kernel is accepted.
pub const DENSE_KERNEL_MAX_NODES: usize = 41 * 41;

/// The interaction kernel `K(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Constant(f64),
    /// `K(x, y) = left(x) * right(y)`.
    Separable {
        left: SpatialField,
        right: SpatialField,
    },
    /// Tabulated `K[x, y]` over flattened spatial indices (`j * nx + i`).
    Dense(Array2<f64>),
}

/// Serializable description of constant model coefficients, sampled onto a
/// concrete grid with [`ModelParams::on_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub beta: f64,
    pub s: f64,
    pub f: f64,
    pub kernel: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            beta: 0.02,
            s: 1.0,
            f: 1.0,
            kernel: 1.0,
        }
    }
}

impl ModelParams {
    pub fn on_grid(&self, grid: &GridSpec) -> Result<MfgCoefficients> {
        MfgCoefficients::uniform(grid, self.beta, self.s, self.f, self.kernel)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfgCoefficients {
    /// Viscosity.
    pub beta: f64,
    /// Hamiltonian coefficient `s(x,t)`.
    pub hamiltonian: Field,
    /// Local interaction coefficient `f(x,t)`.
    pub local: Field,
    pub kernel: Kernel,
    /// Source of the value-function equation (`F1`).
    pub source_hjb: Field,
    /// Source of the density equation (`F2`).
    pub source_fp: Field,
}

impl MfgCoefficients {
    pub fn new(
        beta: f64,
        hamiltonian: Field,
        local: Field,
        kernel: Kernel,
        source_hjb: Field,
        source_fp: Field,
    ) -> Result<Self> {
        let c = Self {
            beta,
            hamiltonian,
            local,
            kernel,
            source_hjb,
            source_fp,
        };
        c.validate()?;
        Ok(c)
    }

    /// Constant `s`, `f`, `K` with zero sources.
    pub fn uniform(grid: &GridSpec, beta: f64, s: f64, f: f64, kernel: f64) -> Result<Self> {
        Self::new(
            beta,
            Field::constant(grid, s),
            Field::constant(grid, f),
            Kernel::Constant(kernel),
            Field::zeros(grid),
            Field::zeros(grid),
        )
    }

    /// `beta = 0.02`, `s = f = K = 1`, zero sources.
    pub fn paper_defaults(grid: &GridSpec) -> Self {
        Self::uniform(grid, 0.02, 1.0, 1.0, 1.0).expect("default coefficients are valid")
    }

    pub fn grid(&self) -> &GridSpec {
        self.hamiltonian.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MfgError::Domain(format!("beta must be positive, got {}", self.beta)));
        }
        let grid = self.grid();
        grid.validate()?;
        for (name, field) in [
            ("f", &self.local),
            ("F1", &self.source_hjb),
            ("F2", &self.source_fp),
        ] {
            self.hamiltonian.ensure_same_grid(field, name)?;
        }
        for field in [&self.hamiltonian, &self.local, &self.source_hjb, &self.source_fp] {
            field.check_finite()?;
        }
        match &self.kernel {
            Kernel::Constant(c) => {
                if !c.is_finite() {
                    return Err(MfgError::InvalidField("non-finite kernel constant".into()));
                }
            }
            Kernel::Separable { left, right } => {
                for part in [left, right] {
                    if (part.grid().nx, part.grid().ny) != (grid.nx, grid.ny) {
                        return Err(MfgError::GridMismatch("separable kernel factor".into()));
                    }
                    part.check_finite()?;
                }
            }
            Kernel::Dense(k) => {
                let n = grid.space_len();
                if n > DENSE_KERNEL_MAX_NODES {
                    return Err(MfgError::Config(format!(
                        "dense kernel limited to {DENSE_KERNEL_MAX_NODES} spatial nodes, grid has {n}"
                    )));
                }
                if k.dim() != (n, n) {
                    return Err(MfgError::InvalidField(format!(
                        "dense kernel shape {:?}, expected ({n}, {n})",
                        k.dim()
                    )));
                }
                if k.iter().any(|v| !v.is_finite()) {
                    return Err(MfgError::InvalidField("non-finite dense kernel entry".into()));
                }
            }
        }
        Ok(())
    }

    fn check(&self, fields: &[(&str, &Field)]) -> Result<()> {
        for (name, field) in fields {
            self.hamiltonian.ensure_same_grid(field, name)?;
        }
        Ok(())
    }
}

/// `int_Omega K(x,y) p(y,t) dy` at every node.
pub fn kernel_integral(coeffs: &MfgCoefficients, p: &Field) -> Result<Field> {
    coeffs.check(&[("p", p)])?;
    Ok(apply_kernel(coeffs, p, false))
}

pub(crate) fn kernel_integral_transpose(coeffs: &MfgCoefficients, r: &Field) -> Field {
    apply_kernel(coeffs, r, true)
}

fn apply_kernel(coeffs: &MfgCoefficients, p: &Field, transpose: bool) -> Field {
    let grid = *p.grid();
    let ws = grid.space_weights();
    let ns = grid.space_len();
    let mut out = Array3::zeros((grid.nt, grid.ny, grid.nx));
    for (slice, mut target) in p.values().outer_iter().zip(out.outer_iter_mut()) {
        match &coeffs.kernel {
            Kernel::Constant(c) => {
                if transpose {
                    let total: f64 = slice.iter().sum();
                    target.assign(&ws.mapv(|w| c * w * total));
                } else {
                    let total: f64 = slice.iter().zip(ws.iter()).map(|(a, w)| a * w).sum();
                    target.fill(c * total);
                }
            }
            Kernel::Separable { left, right } => {
                let (outer, inner) = if transpose { (right, left) } else { (left, right) };
                if transpose {
                    let total: f64 = slice
                        .iter()
                        .zip(inner.values().iter())
                        .map(|(a, l)| a * l)
                        .sum();
                    for ((t, w), o) in target.iter_mut().zip(ws.iter()).zip(outer.values().iter()) {
                        *t = o * w * total;
                    }
                } else {
                    let total: f64 = slice
                        .iter()
                        .zip(ws.iter())
                        .zip(inner.values().iter())
                        .map(|((a, w), r)| a * w * r)
                        .sum();
                    for (t, o) in target.iter_mut().zip(outer.values().iter()) {
                        *t = o * total;
                    }
                }
            }
            Kernel::Dense(k) => {
                let flat: Vec<f64> = slice.iter().copied().collect();
                let wflat: Vec<f64> = ws.iter().copied().collect();
                let result: Vec<f64> = if transpose {
                    (0..ns)
                        .map(|y| wflat[y] * (0..ns).map(|x| k[[x, y]] * flat[x]).sum::<f64>())
                        .collect()
                } else {
                    (0..ns)
                        .map(|x| (0..ns).map(|y| k[[x, y]] * wflat[y] * flat[y]).sum::<f64>())
                        .collect()
                };
                for (t, v) in target.iter_mut().zip(result) {
                    *t = v;
                }
            }
        }
    }
    Field::from_values_unchecked(&grid, out)
}

fn grad_dot(a: &[Field], b: &[Field]) -> Field {
    let mut out = a[0].mul(&b[0]);
    for (x, y) in a.iter().zip(b).skip(1) {
        out.axpy(1.0, &x.mul(y));
    }
    out
}

/// `L1` without its source term.
pub(crate) fn hjb_operator(coeffs: &MfgCoefficients, u: &Field, p: &Field) -> Field {
    let grad_u = gradient_c(u);
    let mut out = time_deriv(u);
    out.axpy(coeffs.beta, &laplacian_neumann(u));
    out.axpy(0.5, &coeffs.hamiltonian.mul(&grad_dot(&grad_u, &grad_u)));
    out.axpy(1.0, &apply_kernel(coeffs, p, false));
    out.axpy(1.0, &coeffs.local.mul(p));
    out
}

/// `div(s p grad u)` through the conservative divergence.
pub(crate) fn transport_term(coeffs: &MfgCoefficients, u: &Field, p: &Field) -> Field {
    let sp = coeffs.hamiltonian.mul(p);
    let flux: Vec<Field> = gradient_c(u).iter().map(|g| g.mul(&sp)).collect();
    divergence_c(&flux).expect("flux has one component per axis")
}

pub fn residual_l1(coeffs: &MfgCoefficients, u: &Field, p: &Field) -> Result<Field> {
    coeffs.check(&[("u", u), ("p", p)])?;
    let mut out = hjb_operator(coeffs, u, p);
    out.axpy(1.0, &coeffs.source_hjb);
    Ok(out)
}

pub fn residual_l2(coeffs: &MfgCoefficients, u: &Field, p: &Field) -> Result<Field> {
    coeffs.check(&[("u", u), ("p", p)])?;
    let mut out = time_deriv(p);
    out.axpy(-coeffs.beta, &laplacian_neumann(p));
    out.axpy(1.0, &transport_term(coeffs, u, p));
    out.axpy(1.0, &coeffs.source_fp);
    Ok(out)
}

/// Directional derivative of [`residual_l1`] at `(u, p)` along `(h, q)`.
pub fn linearized_l1(
    coeffs: &MfgCoefficients,
    u: &Field,
    p: &Field,
    h: &Field,
    q: &Field,
) -> Result<Field> {
    coeffs.check(&[("u", u), ("p", p), ("h", h), ("q", q)])?;
    let mut out = time_deriv(h);
    out.axpy(coeffs.beta, &laplacian_neumann(h));
    out.axpy(1.0, &coeffs.hamiltonian.mul(&grad_dot(&gradient_c(h), &gradient_c(u))));
    out.axpy(1.0, &apply_kernel(coeffs, q, false));
    out.axpy(1.0, &coeffs.local.mul(q));
    Ok(out)
}

/// Directional derivative of [`residual_l2`] at `(u, p)` along `(h, q)`.
pub fn linearized_l2(
    coeffs: &MfgCoefficients,
    u: &Field,
    p: &Field,
    h: &Field,
    q: &Field,
) -> Result<Field> {
    coeffs.check(&[("u", u), ("p", p), ("h", h), ("q", q)])?;
    let mut out = time_deriv(q);
    out.axpy(-coeffs.beta, &laplacian_neumann(q));
    out.axpy(1.0, &transport_term(coeffs, u, q));
    out.axpy(1.0, &transport_term(coeffs, h, p));
    Ok(out)
}

/// Transpose of the Jacobian of `L1` at `(u, p)` applied to `r`; returns the
/// `(u, p)` components.
pub fn linearized_l1_transpose(
    coeffs: &MfgCoefficients,
    u: &Field,
    _p: &Field,
    r: &Field,
) -> (Field, Field) {
    let mut du = time_deriv_transpose(r);
    du.axpy(coeffs.beta, &laplacian_neumann_transpose(r));
    let sr = coeffs.hamiltonian.mul(r);
    let weighted: Vec<Field> = gradient_c(u).iter().map(|g| g.mul(&sr)).collect();
    du.axpy(1.0, &gradient_c_transpose(&weighted));
    let mut dp = kernel_integral_transpose(coeffs, r);
    dp.axpy(1.0, &coeffs.local.mul(r));
    (du, dp)
}

/// Transpose of the Jacobian of `L2` at `(u, p)` applied to `r`; returns the
/// `(u, p)` components.
pub fn linearized_l2_transpose(
    coeffs: &MfgCoefficients,
    u: &Field,
    p: &Field,
    r: &Field,
) -> (Field, Field) {
    let div_t = divergence_c_transpose(r);
    let grad_u = gradient_c(u);

    let mut dp = time_deriv_transpose(r);
    dp.axpy(-coeffs.beta, &laplacian_neumann_transpose(r));
    let mut adv = grad_u[0].mul(&div_t[0]);
    for (g, d) in grad_u.iter().zip(&div_t).skip(1) {
        adv.axpy(1.0, &g.mul(d));
    }
    dp.axpy(1.0, &coeffs.hamiltonian.mul(&adv));

    let sp = coeffs.hamiltonian.mul(p);
    let weighted: Vec<Field> = div_t.iter().map(|d| d.mul(&sp)).collect();
    let du = gradient_c_transpose(&weighted);
    (du, dp)
}

/// Largest `|s grad v|` over all nodes.
pub(crate) fn max_drift(coeffs: &MfgCoefficients, v: &Field) -> f64 {
    let grad = gradient_c(v);
    let mut speed_sq = grad[0].mul(&grad[0]);
    for g in &grad[1..] {
        speed_sq.axpy(1.0, &g.mul(g));
    }
    speed_sq
        .zip_map(&coeffs.hamiltonian, |a, s| s.abs() * a.sqrt())
        .max()
}

/// Tabulates `k(x1, x2, y1, y2)` as a dense kernel over flattened spatial
/// indices.
pub fn dense_kernel_from_fn(grid: &GridSpec, k: impl Fn(f64, f64, f64, f64) -> f64) -> Array2<f64> {
    let n = grid.space_len();
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|idx| (grid.x(idx % grid.nx), grid.y(idx / grid.nx)))
        .collect();
    Array2::from_shape_fn((n, n), |(a, b)| {
        let (x1, x2) = coords[a];
        let (y1, y2) = coords[b];
        k(x1, x2, y1, y2)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use std::f64::consts::PI;

    fn unit() -> GridSpec {
        GridSpec::unit_square(9, 5).unwrap()
    }

    #[test]
    fn kernel_cases() {
        let g = unit();
        let c = MfgCoefficients::paper_defaults(&g);
        let k1 = kernel_integral(&c, &Field::constant(&g, 2.5)).unwrap();
        assert!(k1.map(|v| v - 2.5).max_abs() < 1e-13);
        let k2 = kernel_integral(&c, &Field::from_fn(&g, |_, y, _| y)).unwrap();
        assert!(k2.map(|v| v - 0.5).max_abs() < 1e-13);
        let zero = MfgCoefficients::uniform(&g, 0.02, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(kernel_integral(&zero, &Field::constant(&g, 3.0)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn kernel_forms_agree() {
        let g = GridSpec::unit_square(5, 3).unwrap();
        let left = SpatialField::from_fn(&g, |x, y| 1.0 + x * y);
        let right = SpatialField::from_fn(&g, |x, y| (x - y).cos());
        let mut sep = MfgCoefficients::paper_defaults(&g);
        sep.kernel = Kernel::Separable {
            left: left.clone(),
            right: right.clone(),
        };
        let mut dense = MfgCoefficients::paper_defaults(&g);
        dense.kernel = Kernel::Dense(dense_kernel_from_fn(&g, |x1, x2, y1, y2| {
            (1.0 + x1 * x2) * (y1 - y2).cos()
        }));
        dense.validate().unwrap();
        let p = Field::from_fn(&g, |x, y, t| x + y * y + t);
        let a = kernel_integral(&sep, &p).unwrap();
        let b = kernel_integral(&dense, &p).unwrap();
        assert!(a.sub(&b).max_abs() < 1e-13);
        let r = Field::from_fn(&g, |x, y, t| (x * 3.0 + y + t).sin());
        let at = kernel_integral_transpose(&sep, &r);
        let bt = kernel_integral_transpose(&dense, &r);
        assert!(at.sub(&bt).max_abs() < 1e-13);
    }

    #[test]
    fn dense_kernel_size_gate() {
        let g = GridSpec::unit_square(43, 2).unwrap();
        let mut c = MfgCoefficients::paper_defaults(&g);
        c.kernel = Kernel::Dense(Array2::zeros((1, 1)));
        assert!(matches!(c.validate(), Err(MfgError::Config(_))));
    }

    #[test]
    fn residual_l1_examples() {
        let g = unit();
        let c = MfgCoefficients::paper_defaults(&g);
        let zero = Field::zeros(&g);
        assert_eq!(residual_l1(&c, &zero, &zero).unwrap().max_abs(), 0.0);
        let r = residual_l1(&c, &zero, &Field::constant(&g, 1.0)).unwrap();
        assert!(r.map(|v| v - 2.0).max_abs() < 1e-13);
    }

    #[test]
    fn residual_l2_examples() {
        let g = unit();
        let mut c = MfgCoefficients::paper_defaults(&g);
        let zero = Field::zeros(&g);
        assert!(residual_l2(&c, &zero, &Field::constant(&g, 0.7)).unwrap().max_abs() < 1e-13);
        c.source_fp = Field::from_fn(&g, |x, y, t| x * y + t);
        let r = residual_l2(&c, &Field::from_fn(&g, |x, _, _| x * x), &zero).unwrap();
        assert_eq!(r, c.source_fp);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let g = unit();
        let other = GridSpec::unit_square(7, 5).unwrap();
        let c = MfgCoefficients::paper_defaults(&g);
        let a = Field::zeros(&g);
        let b = Field::zeros(&other);
        assert!(matches!(residual_l1(&c, &a, &b), Err(MfgError::GridMismatch(_))));
        assert!(matches!(residual_l2(&c, &b, &a), Err(MfgError::GridMismatch(_))));
        assert!(linearized_l1(&c, &a, &a, &a, &b).is_err());
    }

    #[test]
    fn linearization_at_zero_direction() {
        let g = unit();
        let c = MfgCoefficients::paper_defaults(&g);
        let u = Field::from_fn(&g, |x, y, t| (PI * x).cos() * y * y * (1.0 + t));
        let p = Field::from_fn(&g, |x, y, _| 1.0 + x * y);
        let z = Field::zeros(&g);
        assert_eq!(linearized_l1(&c, &u, &p, &z, &z).unwrap().max_abs(), 0.0);
        assert_eq!(linearized_l2(&c, &u, &p, &z, &z).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn linearized_l1_without_hamiltonian_matches_direct_assembly() {
        let g = unit();
        let mut c = MfgCoefficients::paper_defaults(&g);
        c.hamiltonian = Field::zeros(&g);
        let u = Field::from_fn(&g, |x, y, t| x * y * t);
        let p = Field::from_fn(&g, |x, _, _| x);
        let h = Field::from_fn(&g, |x, y, t| (x + 2.0 * y).sin() * (1.0 + t));
        let q = Field::from_fn(&g, |x, y, t| x * x - y + t);
        let lin = linearized_l1(&c, &u, &p, &h, &q).unwrap();
        // h_t + beta Lap h + int q dy + q, assembled by hand
        let ws = g.space_weights();
        let mut direct = time_deriv(&h);
        direct.axpy(c.beta, &laplacian_neumann(&h));
        for k in 0..g.nt {
            let slice = q.values().index_axis(Axis(0), k);
            let total: f64 = slice.iter().zip(ws.iter()).map(|(a, w)| a * w).sum();
            for j in 0..g.ny {
                for i in 0..g.nx {
                    direct.values_mut()[[k, j, i]] += total + q.at(k, j, i);
                }
            }
        }
        assert!(lin.sub(&direct).max_abs() < 1e-12);
    }
}
