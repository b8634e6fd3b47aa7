//! The Carleman-weighted least-squares objective
//!
//! ```text
//! J(u,p) = int L1(u,p)^2 phi + (1/2 + c1/lambda^2) int L2(u,p)^2 phi + gamma (|u|^2 + |p|^2)
//! ```
//!
//! evaluated on the grid, the affine lifting that turns the boundary data
//! into homogeneous constraints, and the exact gradient of the discrete
//! objective with respect to the free nodes.
//!
//! The gradient is the transpose of the discrete linearization applied to
//! the quadrature- and Carleman-weighted residuals, so it agrees with finite
//! differences of [`eval_j`] up to round-off.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carleman::CarlemanParams;
use crate::error::{MfgError, Result};
use crate::forward::Dataset;
use crate::grid::{
    apply_space_axis, apply_time, gradient_c, gradient_c_transpose, time_deriv,
    time_deriv_transpose, time_second_difference, weighted_sum, Field, GridSpec, SpaceStencil,
};
use crate::model::{
    linearized_l1_transpose, linearized_l2_transpose, residual_l1, residual_l2, MfgCoefficients,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionalParams {
    pub carleman: CarlemanParams,
    /// Regularization weight.
    pub gamma: f64,
    /// Constant in the coupling coefficient `1/2 + c1 / lambda^2`.
    pub c1: f64,
    /// Highest derivative order in the discrete Sobolev regularizer (1 or 2).
    pub reg_order: usize,
}

impl Default for FunctionalParams {
    fn default() -> Self {
        Self {
            carleman: CarlemanParams::default(),
            gamma: 0.001,
            c1: 2.0,
            reg_order: 2,
        }
    }
}

impl FunctionalParams {
    pub fn validate(&self) -> Result<()> {
        self.carleman.validate_relaxed()?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(MfgError::Domain(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(MfgError::Domain(format!("c1 must be positive, got {}", self.c1)));
        }
        if !(1..=2).contains(&self.reg_order) {
            return Err(MfgError::Domain(format!(
                "reg_order must be 1 or 2, got {}",
                self.reg_order
            )));
        }
        Ok(())
    }

    /// Weight of the density-equation term.
    pub fn coupling(&self) -> f64 {
        0.5 + self.c1 / (self.carleman.lambda * self.carleman.lambda)
    }
}

/// Affine-in-time fields carrying the boundary data:
/// `g1 = (t/T) u_T`, `g2 = (t/T) p_T + (1 - t/T) p_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lifting {
    pub g1: Field,
    pub g2: Field,
}

pub fn make_lifting(dataset: &Dataset) -> Result<Lifting> {
    dataset.validate()?;
    let grid = *dataset.grid();
    let horizon = grid.horizon;
    let mut g1 = Field::zeros(&grid);
    let mut g2 = Field::zeros(&grid);
    for k in 0..grid.nt {
        let s = grid.t(k) / horizon;
        g1.set_level(k, &dataset.u_terminal.scaled(s));
        let mut level = dataset.p_terminal.scaled(s);
        level.axpy(1.0 - s, &dataset.p_initial);
        g2.set_level(k, &level);
    }
    // exact endpoint identities regardless of rounding in s
    let last = grid.nt - 1;
    g1.set_level(last, &dataset.u_terminal);
    g2.set_level(0, &dataset.p_initial);
    g2.set_level(last, &dataset.p_terminal);
    Ok(Lifting { g1, g2 })
}

/// Unknowns after lifting: `u = v + g1`, `p = w + g2`. The slices
/// `v(., T)`, `w(., 0)` and `w(., T)` are held at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedPair {
    pub v: Field,
    pub w: Field,
}

impl ShiftedPair {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            v: Field::zeros(grid),
            w: Field::zeros(grid),
        }
    }

    /// Checks grids and that the constrained slices are exactly zero.
    pub fn new(v: Field, w: Field) -> Result<Self> {
        v.ensure_same_grid(&w, "shifted pair")?;
        let pair = Self { v, w };
        if !pair.is_admissible() {
            return Err(MfgError::Precondition(
                "shifted pair must vanish on v(., T), w(., 0), w(., T)".into(),
            ));
        }
        Ok(pair)
    }

    pub fn grid(&self) -> &GridSpec {
        self.v.grid()
    }

    pub fn is_admissible(&self) -> bool {
        let last = self.grid().nt - 1;
        self.v.level(last).max_abs() == 0.0
            && self.w.level(0).max_abs() == 0.0
            && self.w.level(last).max_abs() == 0.0
    }

    /// Zeroes the constrained slices.
    pub fn enforce_constraints(&mut self) {
        let grid = *self.grid();
        let last = grid.nt - 1;
        let zero = crate::grid::SpatialField::zeros(&grid);
        self.v.set_level(last, &zero);
        self.w.set_level(0, &zero);
        self.w.set_level(last, &zero);
    }

    pub fn axpy(&mut self, c: f64, other: &ShiftedPair) {
        self.v.axpy(c, &other.v);
        self.w.axpy(c, &other.w);
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            v: self.v.scaled(c),
            w: self.w.scaled(c),
        }
    }

    /// Euclidean dot product over all nodes.
    pub fn dot(&self, other: &ShiftedPair) -> f64 {
        weighted_sum(self.v.values(), other.v.values())
            + weighted_sum(self.w.values(), other.w.values())
    }

    /// Dot product with node-wise weights.
    pub fn weighted_dot(&self, other: &ShiftedPair, weights: &Array3<f64>) -> f64 {
        let f = |a: &Field, b: &Field| -> f64 {
            a.values()
                .iter()
                .zip(b.values().iter())
                .zip(weights.iter())
                .map(|((x, y), w)| x * y * w)
                .sum()
        };
        f(&self.v, &other.v) + f(&self.w, &other.w)
    }

    /// Node-wise map of both components.
    pub fn map_with(&self, weights: &Array3<f64>, f: impl Fn(f64, f64) -> f64) -> Self {
        let g = |a: &Field| {
            let mut vals = a.values().clone();
            ndarray::Zip::from(&mut vals)
                .and(weights)
                .for_each(|x, &w| *x = f(*x, w));
            Field::from_values_unchecked(a.grid(), vals)
        };
        Self {
            v: g(&self.v),
            w: g(&self.w),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.check_finite().is_ok() && self.w.check_finite().is_ok()
    }
}

/// `u = v + g1`, `p = w + g2`.
pub fn assemble(pair: &ShiftedPair, lift: &Lifting) -> Result<(Field, Field)> {
    pair.v.ensure_same_grid(&lift.g1, "assemble")?;
    pair.w.ensure_same_grid(&lift.g2, "assemble")?;
    Ok((pair.v.add(&lift.g1), pair.w.add(&lift.g2)))
}

/// Inverse of [`assemble`]; fails unless `(u, p)` reproduces the lifted
/// boundary data exactly.
pub fn shift(u: &Field, p: &Field, lift: &Lifting) -> Result<ShiftedPair> {
    u.ensure_same_grid(&lift.g1, "shift")?;
    p.ensure_same_grid(&lift.g2, "shift")?;
    let mut pair = ShiftedPair {
        v: u.sub(&lift.g1),
        w: p.sub(&lift.g2),
    };
    let last = u.grid().nt - 1;
    let tol = 1e-12 * (1.0 + u.max_abs().max(p.max_abs()));
    if pair.v.level(last).max_abs() > tol
        || pair.w.level(0).max_abs() > tol
        || pair.w.level(last).max_abs() > tol
    {
        return Err(MfgError::Precondition(
            "fields do not match the boundary data".into(),
        ));
    }
    pair.enforce_constraints();
    Ok(pair)
}

/// The three parts of the objective and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JValue {
    pub total: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
}

fn space_second_differences(f: &Field) -> Vec<Field> {
    (0..f.grid().dim)
        .map(|axis| apply_space_axis(f, SpaceStencil::SecondNeumann, axis, false))
        .collect()
}

/// Squared discrete Sobolev norm: trapezoidal `L2` norms of the field, its
/// first time and space differences and, for order 2, its pure second
/// differences.
pub fn sobolev_norm_sq(f: &Field, order: usize) -> f64 {
    let w = f.grid().qt_weights();
    let sq = |g: &Field| -> f64 {
        g.values()
            .iter()
            .zip(w.iter())
            .map(|(x, w)| w * x * x)
            .sum()
    };
    let mut total = sq(f) + sq(&time_deriv(f));
    total += gradient_c(f).iter().map(sq).sum::<f64>();
    if order >= 2 {
        let grid = f.grid();
        total += sq(&apply_time(f, &time_second_difference(grid.nt, grid.dt()), false));
        total += space_second_differences(f).iter().map(sq).sum::<f64>();
    }
    total
}

/// Gram operator of [`sobolev_norm_sq`]: `sobolev_norm_sq(f) = <f, gram(f)>`
/// in the plain Euclidean dot product.
pub(crate) fn sobolev_gram(f: &Field, order: usize) -> Field {
    let grid = *f.grid();
    let w = grid.qt_weights();
    let weigh = |g: &Field| {
        let mut vals = g.values().clone();
        ndarray::Zip::from(&mut vals).and(&w).for_each(|x, &w| *x *= w);
        Field::from_values_unchecked(&grid, vals)
    };
    let mut out = weigh(f);
    out.axpy(1.0, &time_deriv_transpose(&weigh(&time_deriv(f))));
    let grads: Vec<Field> = gradient_c(f).iter().map(weigh).collect();
    out.axpy(1.0, &gradient_c_transpose(&grads));
    if order >= 2 {
        let op = time_second_difference(grid.nt, grid.dt());
        out.axpy(1.0, &apply_time(&weigh(&apply_time(f, &op, false)), &op, true));
        for (axis, d2) in space_second_differences(f).iter().enumerate() {
            out.axpy(
                1.0,
                &apply_space_axis(&weigh(d2), SpaceStencil::SecondNeumann, axis, true),
            );
        }
    }
    out
}

/// The discrete objective bound to one problem instance.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    params: FunctionalParams,
    coeffs: &'a MfgCoefficients,
    lift: &'a Lifting,
    /// Quadrature weight times Carleman weight at every node.
    carleman_weights: Array3<f64>,
    qt_weights: Array3<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(
        params: &FunctionalParams,
        coeffs: &'a MfgCoefficients,
        lift: &'a Lifting,
    ) -> Result<Self> {
        params.validate()?;
        coeffs.hamiltonian.ensure_same_grid(&lift.g1, "lifting g1")?;
        coeffs.hamiltonian.ensure_same_grid(&lift.g2, "lifting g2")?;
        let grid = *coeffs.grid();
        let qt_weights = grid.qt_weights();
        let phi = params.carleman.weight_field(&grid, false);
        let carleman_weights = &qt_weights * phi.values();
        if carleman_weights.iter().any(|v| !v.is_finite()) {
            return Err(MfgError::Numeric(format!(
                "Carleman weight overflows at lambda = {}",
                params.carleman.lambda
            )));
        }
        Ok(Self {
            params: *params,
            coeffs,
            lift,
            carleman_weights,
            qt_weights,
        })
    }

    pub fn params(&self) -> &FunctionalParams {
        &self.params
    }

    pub fn grid(&self) -> &GridSpec {
        self.coeffs.grid()
    }

    pub fn lifting(&self) -> &Lifting {
        self.lift
    }

    pub fn qt_weights(&self) -> &Array3<f64> {
        &self.qt_weights
    }

    fn check_pair(&self, pair: &ShiftedPair) -> Result<()> {
        self.lift.g1.ensure_same_grid(&pair.v, "pair v")?;
        self.lift.g2.ensure_same_grid(&pair.w, "pair w")?;
        Ok(())
    }

    fn residuals(&self, pair: &ShiftedPair) -> Result<(Field, Field, Field, Field)> {
        self.check_pair(pair)?;
        let (u, p) = assemble(pair, self.lift)?;
        let r1 = residual_l1(self.coeffs, &u, &p)?;
        let r2 = residual_l2(self.coeffs, &u, &p)?;
        if r1.check_finite().is_err() || r2.check_finite().is_err() {
            return Err(MfgError::Numeric("non-finite residual".into()));
        }
        Ok((u, p, r1, r2))
    }

    fn weighted_square(&self, r: &Field) -> f64 {
        r.values()
            .iter()
            .zip(self.carleman_weights.iter())
            .map(|(x, w)| w * x * x)
            .sum()
    }

    fn parts(&self, u: &Field, p: &Field, r1: &Field, r2: &Field) -> JValue {
        let j1 = self.weighted_square(r1);
        let j2 = self.weighted_square(r2);
        let j3 = if self.params.gamma > 0.0 {
            self.params.gamma
                * (sobolev_norm_sq(u, self.params.reg_order) + sobolev_norm_sq(p, self.params.reg_order))
        } else {
            0.0
        };
        JValue {
            total: j1 + self.params.coupling() * j2 + j3,
            j1,
            j2,
            j3,
        }
    }

    pub fn value(&self, pair: &ShiftedPair) -> Result<JValue> {
        let (u, p, r1, r2) = self.residuals(pair)?;
        let j = self.parts(&u, &p, &r1, &r2);
        if !j.total.is_finite() {
            return Err(MfgError::Numeric("non-finite objective".into()));
        }
        Ok(j)
    }

    pub fn value_and_gradient(&self, pair: &ShiftedPair) -> Result<(JValue, ShiftedPair)> {
        let (u, p, r1, r2) = self.residuals(pair)?;
        let j = self.parts(&u, &p, &r1, &r2);
        if !j.total.is_finite() {
            return Err(MfgError::Numeric("non-finite objective".into()));
        }
        let weigh = |r: &Field, c: f64| {
            let mut vals = r.values().clone();
            ndarray::Zip::from(&mut vals)
                .and(&self.carleman_weights)
                .for_each(|x, &w| *x *= c * w);
            Field::from_values_unchecked(r.grid(), vals)
        };
        let adj1 = weigh(&r1, 2.0);
        let adj2 = weigh(&r2, 2.0 * self.params.coupling());
        let (mut du, mut dp) = linearized_l1_transpose(self.coeffs, &u, &p, &adj1);
        let (du2, dp2) = linearized_l2_transpose(self.coeffs, &u, &p, &adj2);
        du.axpy(1.0, &du2);
        dp.axpy(1.0, &dp2);
        if self.params.gamma > 0.0 {
            let order = self.params.reg_order;
            du.axpy(2.0 * self.params.gamma, &sobolev_gram(&u, order));
            dp.axpy(2.0 * self.params.gamma, &sobolev_gram(&p, order));
        }
        let mut grad = ShiftedPair { v: du, w: dp };
        grad.enforce_constraints();
        if !grad.is_finite() {
            return Err(MfgError::Numeric("non-finite gradient".into()));
        }
        Ok((j, grad))
    }

    /// Norm of the gradient as an element of `L2(Q_T)`: the nodal partials
    /// divided by their quadrature weights, measured in the trapezoidal
    /// norm. Insensitive to grid size.
    pub fn gradient_norm(&self, grad: &ShiftedPair) -> f64 {
        let sq = |a: &Field| -> f64 {
            a.values()
                .iter()
                .zip(self.qt_weights.iter())
                .map(|(g, w)| g * g / w)
                .sum()
        };
        (sq(&grad.v) + sq(&grad.w)).sqrt()
    }

    /// The `L2(Q_T)` representative of a nodal gradient: each partial divided
    /// by its quadrature weight.
    pub fn riesz(&self, grad: &ShiftedPair) -> ShiftedPair {
        grad.map_with(&self.qt_weights, |g, w| g / w)
    }
}

pub fn eval_j(
    params: &FunctionalParams,
    coeffs: &MfgCoefficients,
    pair: &ShiftedPair,
    lift: &Lifting,
) -> Result<JValue> {
    Objective::new(params, coeffs, lift)?.value(pair)
}

pub fn grad_j(
    params: &FunctionalParams,
    coeffs: &MfgCoefficients,
    pair: &ShiftedPair,
    lift: &Lifting,
) -> Result<ShiftedPair> {
    Ok(Objective::new(params, coeffs, lift)?.value_and_gradient(pair)?.1)
}

/// `J(z1) - J(z) - <J'(z), z1 - z>`.
pub fn bregman_gap(objective: &Objective<'_>, z: &ShiftedPair, z1: &ShiftedPair) -> Result<f64> {
    let (jz, gz) = objective.value_and_gradient(z)?;
    let jz1 = objective.value(z1)?;
    let mut diff = z1.clone();
    diff.axpy(-1.0, z);
    Ok(jz1.total - jz.total - gz.dot(&diff))
}

/// Random admissible pair with nodal values uniform in `[-scale, scale]`.
pub fn random_pair(grid: &GridSpec, scale: f64, rng: &mut impl Rng) -> ShiftedPair {
    let mut sample = || {
        let vals = Array3::from_shape_fn((grid.nt, grid.ny, grid.nx), |_| {
            scale * (2.0 * rng.random::<f64>() - 1.0)
        });
        Field::from_values_unchecked(grid, vals)
    };
    let mut pair = ShiftedPair {
        v: sample(),
        w: sample(),
    };
    pair.enforce_constraints();
    pair
}

/// Summary of sampled Bregman gaps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BregmanSummary {
    pub samples: usize,
    pub nonnegative: usize,
    pub min_gap: f64,
    pub fraction_nonnegative: f64,
}

/// Samples pairs around `center` and reports how many Bregman gaps are
/// nonnegative. A convex objective gives only nonnegative gaps.
pub fn bregman_survey(
    objective: &Objective<'_>,
    center: &ShiftedPair,
    scale: f64,
    samples: usize,
    seed: u64,
) -> Result<BregmanSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = *objective.grid();
    let mut nonnegative = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..samples {
        let mut z = center.clone();
        z.axpy(1.0, &random_pair(&grid, scale, &mut rng));
        let mut z1 = center.clone();
        z1.axpy(1.0, &random_pair(&grid, scale, &mut rng));
        let gap = bregman_gap(objective, &z, &z1)?;
        if gap >= 0.0 {
            nonnegative += 1;
        }
        min_gap = min_gap.min(gap);
    }
    Ok(BregmanSummary {
        samples,
        nonnegative,
        min_gap,
        fraction_nonnegative: if samples == 0 {
            1.0
        } else {
            nonnegative as f64 / samples as f64
        },
    })
}

/// Comparison of analytic and central-difference directional derivatives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientCheck {
    pub eps: f64,
    /// Relative error per direction.
    pub errors: Vec<f64>,
    pub max_rel_error: f64,
}

/// Checks `<grad J(z), h>` against `(J(z + eps h) - J(z - eps h)) / (2 eps)`
/// for random admissible unit directions `h`.
pub fn gradient_check(
    objective: &Objective<'_>,
    at: &ShiftedPair,
    directions: usize,
    eps: f64,
    seed: u64,
) -> Result<GradientCheck> {
    if !(eps > 0.0) {
        return Err(MfgError::Domain(format!("eps must be positive, got {eps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = *objective.grid();
    let (_, grad) = objective.value_and_gradient(at)?;
    let mut errors = Vec::with_capacity(directions);
    for _ in 0..directions {
        let h = random_pair(&grid, 1.0, &mut rng);
        let h = h.scaled(1.0 / h.dot(&h).sqrt());
        let mut plus = at.clone();
        plus.axpy(eps, &h);
        let mut minus = at.clone();
        minus.axpy(-eps, &h);
        let fd = (objective.value(&plus)?.total - objective.value(&minus)?.total) / (2.0 * eps);
        let analytic = grad.dot(&h);
        let scale = fd.abs().max(analytic.abs()).max(f64::MIN_POSITIVE);
        errors.push((analytic - fd).abs() / scale);
    }
    let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradientCheck {
        eps,
        errors,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Dataset;
    use crate::grid::SpatialField;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn zero_dataset(grid: &GridSpec) -> Dataset {
        let coeffs = MfgCoefficients::paper_defaults(grid);
        Dataset::from_truth(coeffs, Field::zeros(grid), Field::zeros(grid)).unwrap()
    }

    #[test]
    fn coupling_defaults_to_one() {
        assert_abs_diff_eq!(FunctionalParams::default().coupling(), 1.0);
        let mut p = FunctionalParams::default();
        p.reg_order = 3;
        assert!(p.validate().is_err());
        p.reg_order = 1;
        p.gamma = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn lifting_examples() {
        let g = GridSpec::unit_square(5, 3).unwrap();
        let zero = make_lifting(&zero_dataset(&g)).unwrap();
        assert_eq!(zero.g1.max_abs(), 0.0);
        assert_eq!(zero.g2.max_abs(), 0.0);

        let mut data = zero_dataset(&g);
        data.p_initial = SpatialField::constant(&g, 1.0);
        data.p_terminal = SpatialField::constant(&g, 3.0);
        data.u_terminal = SpatialField::from_fn(&g, |x, y| x - y);
        let lift = make_lifting(&data).unwrap();
        assert!(lift.g2.level(1).map(|v| v - 2.0).max_abs() < 1e-15);
        assert_eq!(lift.g2.level(0), data.p_initial);
        assert_eq!(lift.g2.level(2), data.p_terminal);
        assert_eq!(lift.g1.level(2), data.u_terminal);
        assert_eq!(lift.g1.level(0).max_abs(), 0.0);
    }

    #[test]
    fn assemble_and_shift_are_inverse() {
        let g = GridSpec::unit_square(5, 4).unwrap();
        let coeffs = MfgCoefficients::paper_defaults(&g);
        let u = Field::from_fn(&g, |x, y, t| x * y + t * t);
        let p = Field::from_fn(&g, |x, y, t| 1.0 + x - y * t);
        let data = Dataset::from_truth(coeffs, u.clone(), p.clone()).unwrap();
        let lift = make_lifting(&data).unwrap();
        let zero = ShiftedPair::zeros(&g);
        let (gu, gp) = assemble(&zero, &lift).unwrap();
        assert_eq!((gu, gp), (lift.g1.clone(), lift.g2.clone()));
        let pair = shift(&u, &p, &lift).unwrap();
        assert!(pair.is_admissible());
        let (u2, p2) = assemble(&pair, &lift).unwrap();
        assert!(u2.sub(&u).max_abs() < 1e-14);
        assert!(p2.sub(&p).max_abs() < 1e-14);
        assert_eq!(u2.level(3), data.u_terminal);
    }

    #[test]
    fn shifted_pair_rejects_constrained_values() {
        let g = GridSpec::unit_square(5, 4).unwrap();
        let bad = Field::constant(&g, 1.0);
        assert!(ShiftedPair::new(bad, Field::zeros(&g)).is_err());
    }

    #[test]
    fn zero_problem_has_zero_objective_and_gradient() {
        let g = GridSpec::unit_square(5, 4).unwrap();
        let coeffs = MfgCoefficients::uniform(&g, 0.02, 0.0, 0.0, 0.0).unwrap();
        coeffs.validate().unwrap();
        let data = Dataset::from_truth(coeffs.clone(), Field::zeros(&g), Field::zeros(&g)).unwrap();
        let lift = make_lifting(&data).unwrap();
        let params = FunctionalParams {
            gamma: 0.0,
            ..Default::default()
        };
        let pair = ShiftedPair::zeros(&g);
        let j = eval_j(&params, &coeffs, &pair, &lift).unwrap();
        assert_eq!(j.total, 0.0);
        let grad = grad_j(&params, &coeffs, &pair, &lift).unwrap();
        assert_eq!(grad.v.max_abs() + grad.w.max_abs(), 0.0);
    }

    #[test]
    fn regularizer_of_constant_is_l2_norm() {
        let g = GridSpec::unit_square(6, 5).unwrap();
        let mut coeffs = MfgCoefficients::uniform(&g, 0.02, 0.0, 0.0, 0.0).unwrap();
        coeffs.source_hjb = Field::zeros(&g);
        let u = Field::constant(&g, 1.0);
        let data = Dataset::from_truth(coeffs.clone(), u.clone(), Field::zeros(&g)).unwrap();
        let lift = make_lifting(&data).unwrap();
        let pair = shift(&u, &Field::zeros(&g), &lift).unwrap();
        for order in [1, 2] {
            let params = FunctionalParams {
                gamma: 0.25,
                reg_order: order,
                ..Default::default()
            };
            let j = eval_j(&params, &coeffs, &pair, &lift).unwrap();
            assert_abs_diff_eq!(j.j3, 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn gram_matches_quadratic_form() {
        // For a quadratic form, central differences are exact up to round-off,
        // so each gradient entry can be recovered independently.
        let g = GridSpec::unit_square(4, 4).unwrap();
        let f = Field::from_fn(&g, |x, y, t| (PI * x).sin() + y * t + t * t * x);
        for order in [1, 2] {
            let gram = sobolev_gram(&f, order);
            let mut max_err = 0.0_f64;
            for k in 0..g.nt {
                for j in 0..g.ny {
                    for i in 0..g.nx {
                        let mut plus = f.clone();
                        plus.values_mut()[[k, j, i]] += 0.5;
                        let mut minus = f.clone();
                        minus.values_mut()[[k, j, i]] -= 0.5;
                        let fd = sobolev_norm_sq(&plus, order) - sobolev_norm_sq(&minus, order);
                        max_err = max_err.max((fd - 2.0 * gram.at(k, j, i)).abs());
                    }
                }
            }
            assert!(max_err < 1e-9, "order {order}: {max_err}");
        }
    }
}
