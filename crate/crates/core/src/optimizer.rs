//! Gradient descent on the lifted unknowns with Armijo backtracking.
//!
//! Steps are taken along the gradient in the regularizer's Sobolev inner
//! product (or, optionally, in `L2(Q_T)`), so step sizes and the stopping
//! tolerance do not depend on the grid resolution. A limited-memory secant
//! accelerator is available but off by default.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};
use crate::experiments::{relative_errors, ErrorReport};
use crate::forward::Dataset;
use crate::functional::{
    assemble, make_lifting, sobolev_norm_sq, FunctionalParams, JValue, Lifting, Objective,
    ShiftedPair,
};
use crate::grid::Field;
use crate::metric::SobolevMetric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescentMethod {
    /// Steepest descent, the iteration the convergence theory analyzes.
    Gradient,
    /// Limited-memory BFGS directions with the same line search.
    Lbfgs,
}

/// Inner product in which the gradient is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMetric {
    /// The discrete Sobolev inner product of the regularizer.
    Sobolev,
    /// Trapezoidal `L2(Q_T)`.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Multiplier of the first trial step `J / |grad J|^2`, the step that
    /// would bring a linear model of `J` to zero.
    pub step0: f64,
    /// Step reduction factor applied on each failed Armijo test.
    pub backtrack: f64,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    /// Factor by which the previous accepted step is enlarged to form the
    /// next trial step.
    pub growth: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Radius of the monitored ball; iterates are never projected.
    pub ball_radius: Option<f64>,
    pub seed: u64,
    pub method: DescentMethod,
    pub metric: GradientMetric,
    pub lbfgs_memory: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step0: 1.0,
            backtrack: 0.5,
            armijo: 1e-4,
            growth: 2.0,
            max_iters: 5000,
            grad_tol: 1e-2,
            ball_radius: None,
            seed: 0,
            method: DescentMethod::Gradient,
            metric: GradientMetric::Sobolev,
            lbfgs_memory: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MfgError::Config(m));
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return bad(format!("step0 must be positive, got {}", self.step0));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad(format!("backtrack must lie in (0,1), got {}", self.backtrack));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return bad(format!("armijo must lie in (0,1), got {}", self.armijo));
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            return bad(format!("growth must be >= 1, got {}", self.growth));
        }
        if !(self.grad_tol > 0.0) {
            return bad(format!("grad_tol must be positive, got {}", self.grad_tol));
        }
        if let Some(r) = self.ball_radius {
            if !(r > 0.0) {
                return bad(format!("ball_radius must be positive, got {r}"));
            }
        }
        if self.method == DescentMethod::Lbfgs && self.lbfgs_memory == 0 {
            return bad("lbfgs_memory must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    LineSearchFailure,
}

/// State at one iterate. Iterate 0 is the starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub grad_norm: f64,
    /// Step that produced this iterate (0 for the start).
    pub step: f64,
    pub u_err: Option<f64>,
    pub p_err: Option<f64>,
    pub norm: f64,
    pub outside_ball: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<IterationRecord>,
    pub status: RunStatus,
    pub final_pair: ShiftedPair,
    pub final_u: Field,
    pub final_p: Field,
    pub evaluations: usize,
}

/// Scalar summary written next to the iteration log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_j: f64,
    pub final_j: f64,
    pub final_grad_norm: f64,
    pub final_u_err: Option<f64>,
    pub final_p_err: Option<f64>,
}

impl RunReport {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("a run has at least one record")
    }

    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.last();
        RunSummary {
            status: self.status,
            iterations: self.iterations(),
            evaluations: self.evaluations,
            initial_j: self.records[0].j,
            final_j: last.j,
            final_grad_norm: last.grad_norm,
            final_u_err: last.u_err,
            final_p_err: last.p_err,
        }
    }

    /// One row per iterate.
    pub fn write_iterations_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "iter,j,j1,j2,j3,grad_norm,step,u_err,p_err,norm,outside_ball")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{:.16e},{}",
                r.iter,
                r.j,
                r.j1,
                r.j2,
                r.j3,
                r.grad_norm,
                r.step,
                opt(r.u_err),
                opt(r.p_err),
                r.norm,
                r.outside_ball
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.summary())?)?;
        Ok(())
    }
}

/// Starting point: `u = u_T` at every time, `p` linear in time between
/// `p_0` and `p_T`. In lifted form `v = (1 - t/T) u_T` and `w = 0`.
pub fn initial_guess(dataset: &Dataset) -> Result<ShiftedPair> {
    dataset.validate()?;
    let grid = *dataset.grid();
    let mut v = Field::zeros(&grid);
    for k in 0..grid.nt - 1 {
        let s = 1.0 - grid.t(k) / grid.horizon;
        v.set_level(k, &dataset.u_terminal.scaled(s));
    }
    ShiftedPair::new(v, Field::zeros(&grid))
}

/// Regularizer norm of the assembled pair and whether it leaves the ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub norm: f64,
    pub inside: bool,
}

pub fn norm_monitor(
    pair: &ShiftedPair,
    lift: &Lifting,
    ball_radius: Option<f64>,
    reg_order: usize,
) -> Result<NormReport> {
    let (u, p) = assemble(pair, lift)?;
    let norm = (sobolev_norm_sq(&u, reg_order) + sobolev_norm_sq(&p, reg_order)).sqrt();
    let inside = ball_radius.is_none_or(|r| norm < r);
    Ok(NormReport { norm, inside })
}

struct Tracker<'a> {
    dataset: &'a Dataset,
    lift: &'a Lifting,
    config: &'a OptimizerConfig,
    reg_order: usize,
}

impl Tracker<'_> {
    fn record(
        &self,
        iter: usize,
        j: JValue,
        grad_norm: f64,
        step: f64,
        pair: &ShiftedPair,
    ) -> Result<IterationRecord> {
        let (u_err, p_err) = match &self.dataset.truth {
            Some(truth) => {
                let (u, p) = assemble(pair, self.lift)?;
                let ErrorReport { u_e, p_e, .. } = relative_errors(&truth.u, &truth.p, &u, &p)?;
                (Some(u_e), Some(p_e))
            }
            None => (None, None),
        };
        let monitor = norm_monitor(pair, self.lift, self.config.ball_radius, self.reg_order)?;
        Ok(IterationRecord {
            iter,
            j: j.total,
            j1: j.j1,
            j2: j.j2,
            j3: j.j3,
            grad_norm,
            step,
            u_err,
            p_err,
            norm: monitor.norm,
            outside_ball: !monitor.inside,
        })
    }
}

/// Minimizes the objective from [`initial_guess`].
pub fn descend(
    config: &OptimizerConfig,
    params: &FunctionalParams,
    dataset: &Dataset,
) -> Result<RunReport> {
    let start = initial_guess(dataset)?;
    descend_from(config, params, dataset, start)
}

/// Minimizes the objective from an arbitrary admissible starting pair.
pub fn descend_from(
    config: &OptimizerConfig,
    params: &FunctionalParams,
    dataset: &Dataset,
    start: ShiftedPair,
) -> Result<RunReport> {
    descend_observed(config, params, dataset, start, &mut |_, _| {})
}

/// Like [`descend_from`], calling `observer(k, iterate)` for the start
/// (`k = 0`) and after every accepted step.
pub fn descend_observed(
    config: &OptimizerConfig,
    params: &FunctionalParams,
    dataset: &Dataset,
    start: ShiftedPair,
    observer: &mut dyn FnMut(usize, &ShiftedPair),
) -> Result<RunReport> {
    config.validate()?;
    params.validate()?;
    dataset.validate()?;
    if !start.is_admissible() {
        return Err(MfgError::Precondition(
            "starting pair violates the boundary constraints".into(),
        ));
    }
    let lift = make_lifting(dataset)?;
    let objective = Objective::new(params, &dataset.coeffs, &lift)?;
    let tracker = Tracker {
        dataset,
        lift: &lift,
        config,
        reg_order: params.reg_order,
    };

    let metric = match config.metric {
        GradientMetric::Sobolev => Some(SobolevMetric::new(dataset.grid(), params.reg_order)?),
        GradientMetric::L2 => None,
    };
    let riesz_of = |g: &ShiftedPair| match &metric {
        Some(m) => m.riesz(g),
        None => objective.riesz(g),
    };

    let mut pair = start;
    let (mut j, mut grad) = objective.value_and_gradient(&pair)?;
    let mut riesz = riesz_of(&grad);
    let mut grad_norm = grad.dot(&riesz).max(0.0).sqrt();
    let mut evaluations = 1;
    let mut records = vec![tracker.record(0, j, grad_norm, 0.0, &pair)?];
    observer(0, &pair);
    let first_step = if grad_norm > 0.0 {
        config.step0 * j.total / (grad_norm * grad_norm)
    } else {
        config.step0
    };
    let mut step = first_step;
    let mut memory = SecantMemory::default();
    let min_step = 1e-14 * first_step;

    let status = loop {
        if grad_norm < config.grad_tol {
            break RunStatus::Converged;
        }
        if records.len() > config.max_iters {
            break RunStatus::MaxIters;
        }
        let iter = records.len();

        let mut direction = match config.method {
            DescentMethod::Gradient => riesz.scaled(-1.0),
            DescentMethod::Lbfgs => memory.direction(&grad, &riesz, &riesz_of),
        };
        // slope of J along the direction
        let mut slope = grad.dot(&direction);
        if slope >= 0.0 {
            memory.pairs.clear();
            direction = riesz.scaled(-1.0);
            slope = grad.dot(&direction);
        }
        let mut trial_step = match config.method {
            DescentMethod::Lbfgs if !memory.pairs.is_empty() => 1.0,
            _ => step,
        };

        let accepted = loop {
            let mut trial = pair.clone();
            trial.axpy(trial_step, &direction);
            evaluations += 1;
            let ok = match objective.value(&trial) {
                Ok(jt) => jt.total <= j.total + config.armijo * trial_step * slope,
                // overflow on a huge trial step: shrink
                Err(MfgError::Numeric(_)) => false,
                Err(e) => return Err(e),
            };
            if ok {
                break Some(trial);
            }
            trial_step *= config.backtrack;
            if trial_step < min_step {
                break None;
            }
        };
        let Some(next) = accepted else {
            debug!("line search failed at iteration {iter}");
            break RunStatus::LineSearchFailure;
        };

        let (j_next, grad_next) = objective.value_and_gradient(&next)?;
        evaluations += 1;
        if j_next.total > j.total {
            return Err(MfgError::Numeric(
                "accepted step increased the objective".into(),
            ));
        }
        if config.method == DescentMethod::Lbfgs {
            let mut s = next.clone();
            s.axpy(-1.0, &pair);
            let mut y = grad_next.clone();
            y.axpy(-1.0, &grad);
            memory.push(s, y, &riesz_of, config.lbfgs_memory);
        }
        pair = next;
        j = j_next;
        grad = grad_next;
        riesz = riesz_of(&grad);
        grad_norm = grad.dot(&riesz).max(0.0).sqrt();
        records.push(tracker.record(iter, j, grad_norm, trial_step, &pair)?);
        observer(iter, &pair);
        if iter % 100 == 0 {
            debug!(
                "iter {iter}: J = {:.6e}, |grad| = {grad_norm:.3e}, step = {trial_step:.3e}",
                j.total
            );
        }
        step = trial_step * config.growth;
    };

    let (final_u, final_p) = assemble(&pair, &lift)?;
    info!(
        "descent finished: {status:?} after {} iterations, J = {:.6e}, |grad| = {:.3e}",
        records.len() - 1,
        j.total,
        grad_norm
    );
    Ok(RunReport {
        records,
        status,
        final_pair: pair,
        final_u,
        final_p,
        evaluations,
    })
}

/// Secant pairs `(s, y, s.y)` of nodal steps and gradient changes.
#[derive(Default)]
struct SecantMemory {
    pairs: VecDeque<(ShiftedPair, ShiftedPair, f64)>,
    /// Scaling of the initial inverse Hessian (the Riesz map).
    scale: f64,
}

impl SecantMemory {
    fn push(
        &mut self,
        s: ShiftedPair,
        y: ShiftedPair,
        riesz_of: &impl Fn(&ShiftedPair) -> ShiftedPair,
        capacity: usize,
    ) {
        let sy = s.dot(&y);
        let yhy = y.dot(&riesz_of(&y));
        if sy <= 0.0 || yhy <= 0.0 || !sy.is_finite() {
            return;
        }
        self.scale = sy / yhy;
        self.pairs.push_back((s, y, sy));
        if self.pairs.len() > capacity {
            self.pairs.pop_front();
        }
    }

    /// Two-loop recursion.
    fn direction(
        &self,
        grad: &ShiftedPair,
        riesz: &ShiftedPair,
        riesz_of: &impl Fn(&ShiftedPair) -> ShiftedPair,
    ) -> ShiftedPair {
        if self.pairs.is_empty() {
            return riesz.scaled(-1.0);
        }
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, sy) in self.pairs.iter().rev() {
            let alpha = s.dot(&q) / sy;
            q.axpy(-alpha, y);
            alphas.push(alpha);
        }
        let mut r = riesz_of(&q).scaled(self.scale);
        for ((s, y, sy), alpha) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let beta = y.dot(&r) / sy;
            r.axpy(alpha - beta, s);
        }
        r.scaled(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridSpec, SpatialField};
    use crate::model::MfgCoefficients;

    fn quadratic_dataset(grid: &GridSpec) -> Dataset {
        let coeffs = MfgCoefficients::uniform(grid, 0.02, 0.0, 0.0, 0.0).unwrap();
        Dataset::from_truth(coeffs, Field::zeros(grid), Field::zeros(grid)).unwrap()
    }

    #[test]
    fn initial_guess_examples() {
        let g = GridSpec::unit_square(5, 5).unwrap();
        let mut data = quadratic_dataset(&g);
        let zero = initial_guess(&data).unwrap();
        assert_eq!(zero.v.max_abs() + zero.w.max_abs(), 0.0);

        data.u_terminal = SpatialField::from_fn(&g, |x, y| 1.0 + x * y);
        data.p_initial = SpatialField::constant(&g, 2.0);
        data.p_terminal = SpatialField::constant(&g, 5.0);
        let guess = initial_guess(&data).unwrap();
        assert_eq!(guess.w.max_abs(), 0.0);
        assert_eq!(guess.v.level(g.nt - 1).max_abs(), 0.0);
        let lift = make_lifting(&data).unwrap();
        let (u, p) = assemble(&guess, &lift).unwrap();
        for k in 0..g.nt {
            assert!(u.level(k).sub(&data.u_terminal).max_abs() < 1e-15);
            let s = g.t(k);
            let expected = data.p_initial.scaled(1.0 - s).add(&data.p_terminal.scaled(s));
            assert!(p.level(k).sub(&expected).max_abs() < 1e-14);
        }
    }

    #[test]
    fn norm_monitor_examples() {
        let g = GridSpec::unit_square(5, 4).unwrap();
        let data = quadratic_dataset(&g);
        let lift = make_lifting(&data).unwrap();
        let zero = ShiftedPair::zeros(&g);
        let r = norm_monitor(&zero, &lift, Some(1.0), 2).unwrap();
        assert_eq!(r.norm, 0.0);
        assert!(r.inside);

        let mut pair = ShiftedPair::zeros(&g);
        pair.v = Field::from_fn(&g, |x, y, t| (1.0 - t) * (x + y * y));
        pair.w = Field::from_fn(&g, |x, _, t| t * (1.0 - t) * x);
        let n1 = norm_monitor(&pair, &lift, None, 2).unwrap();
        assert!(n1.inside);
        let n2 = norm_monitor(&pair.scaled(2.0), &lift, Some(n1.norm * 1.5), 2).unwrap();
        assert!((n2.norm - 2.0 * n1.norm).abs() < 1e-12 * n1.norm);
        assert!(!n2.inside);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::default();
        assert!(c.validate().is_ok());
        c.backtrack = 1.0;
        assert!(c.validate().is_err());
        c = OptimizerConfig {
            ball_radius: Some(-1.0),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn pure_regularizer_problem_converges_to_zero() {
        let g = GridSpec::unit_square(5, 5).unwrap();
        let data = quadratic_dataset(&g);
        let params = FunctionalParams {
            gamma: 0.1,
            reg_order: 1,
            ..Default::default()
        };
        let mut start = ShiftedPair::zeros(&g);
        start.v = Field::from_fn(&g, |x, y, t| (1.0 - t) * (1.0 + x * y));
        start.w = Field::from_fn(&g, |x, _, t| t * (1.0 - t) * (2.0 + x));
        let config = OptimizerConfig {
            step0: 1.0,
            grad_tol: 1e-8,
            ..Default::default()
        };
        let report = descend_from(&config, &params, &data, start).unwrap();
        // the residual part is nonzero for a nonzero pair, so the minimum is
        // the zero pair where both parts vanish
        assert_eq!(report.status, RunStatus::Converged);
        assert!(report.last().j < 1e-12 * report.records[0].j);
        for w in report.records.windows(2) {
            assert!(w[1].j < w[0].j);
        }
        assert!(report.final_pair.v.max_abs() < 1e-4);
    }
}
