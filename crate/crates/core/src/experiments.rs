//! Test problems, noise, error metrics and the experiment driver.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::carleman::CarlemanParams;
use crate::error::{MfgError, Result};
use crate::forward::{generate_dataset, Dataset, GeneratorSpec};
use crate::functional::FunctionalParams;
use crate::grid::{integrate_qt, Field, GridSpec, SpatialField};
use crate::io::{fmt_num, read_dataset, write_dataset, write_field};
use crate::model::ModelParams;
use crate::optimizer::{descend, OptimizerConfig, RunReport, RunStatus, RunSummary};

/// Closed-form value functions used to manufacture synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestCase {
    /// Polynomial in space with vanishing normal derivative.
    Poly,
    /// Small-amplitude trigonometric profile.
    Trig,
    /// Letter-C shaped bump expanding in time.
    Cshape,
    /// A dataset directory written by [`write_dataset`].
    CustomFile { path: PathBuf },
}

fn poly(x: f64, y: f64, t: f64) -> f64 {
    let a = x * x * (x - 1.0).powi(2) * (x + 1.0);
    let b = y * y * (y - 1.0).powi(2) * (y + 2.0);
    a * b * (t * t + 1.0)
}

fn trig(x: f64, y: f64, t: f64) -> f64 {
    0.01 * (PI * x).cos() * (PI * (y - 0.5)).sin() * (t * t + 1.0)
}

fn cshape(x: f64, y: f64, t: f64) -> f64 {
    let d = ((x - 0.6).powi(2) + (y - 0.5).powi(2)).sqrt();
    let r1 = 0.05 * (1.0 - t) + 0.15 * t;
    let r2 = 0.35 * (1.0 - t) + 0.45 * t;
    let r3 = 0.5 * (r1 + r2);
    if d < r1 || d > r2 || x > 0.75 {
        return 0.0;
    }
    let h = 0.1 * (0.75 - x) * (d - r1) * (r2 - d) * (-100.0 * (d - r3).powi(2)).exp();
    h * (1.0 + t * t)
}

/// Samples the test value function on `grid` (the second coordinate is
/// fixed at 0.5 on one-dimensional grids).
pub fn test_generator(case: &TestCase, grid: &GridSpec) -> Result<Field> {
    grid.validate()?;
    let f: fn(f64, f64, f64) -> f64 = match case {
        TestCase::Poly => poly,
        TestCase::Trig => trig,
        TestCase::Cshape => cshape,
        TestCase::CustomFile { .. } => {
            return Err(MfgError::Config(
                "a custom dataset has no generating function".into(),
            ))
        }
    };
    let field = if grid.dim == 1 {
        Field::from_fn(grid, |x, _, t| f(x, 0.5, t))
    } else {
        Field::from_fn(grid, f)
    };
    field.check_finite()?;
    Ok(field)
}

/// Gaussian initial density centred in the unit square.
pub fn gaussian_m0(grid: &GridSpec) -> SpatialField {
    let c = 1.0 / (2.0 * PI);
    if grid.dim == 1 {
        SpatialField::from_fn(grid, |x, _| c * (-(x - 0.5).powi(2) / 2.0).exp())
    } else {
        SpatialField::from_fn(grid, |x, y| {
            c * (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 2.0).exp()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub delta: f64,
    pub seed: u64,
    /// Draw from `[-1, 1]` instead of `[0, 1]`.
    pub symmetric: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            delta: 0.0,
            seed: 2023,
            symmetric: false,
        }
    }
}

/// Multiplies every boundary datum by `1 + delta * zeta` with independent
/// uniform draws on `[0, 1]`. The truth is left untouched.
pub fn add_noise(data: &Dataset, delta: f64, seed: u64) -> Result<Dataset> {
    add_noise_with(
        data,
        &NoiseSpec {
            delta,
            seed,
            symmetric: false,
        },
    )
}

pub fn add_noise_with(data: &Dataset, noise: &NoiseSpec) -> Result<Dataset> {
    if !(noise.delta >= 0.0 && noise.delta.is_finite()) {
        return Err(MfgError::Domain(format!(
            "noise level must be >= 0, got {}",
            noise.delta
        )));
    }
    let mut out = data.clone();
    if noise.delta == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    for f in [&mut out.u_terminal, &mut out.p_initial, &mut out.p_terminal] {
        for v in f.values_mut().iter_mut() {
            let u: f64 = rng.random();
            let zeta = if noise.symmetric { 2.0 * u - 1.0 } else { u };
            *v *= 1.0 + noise.delta * zeta;
        }
    }
    Ok(out)
}

/// Error restricted to one cross-section `{x2 = const, t = const}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceError {
    pub x2: f64,
    pub t: f64,
    pub u_e: f64,
    pub p_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub u_e: f64,
    pub p_e: f64,
    pub slices: Vec<SliceError>,
}

pub const SLICE_COORDS: [f64; 3] = [0.2, 0.5, 0.8];

/// Relative error in the trapezoidal norm. A zero reference gives the
/// absolute error instead.
fn relative(diff_sq: f64, ref_sq: f64) -> f64 {
    if ref_sq > 0.0 {
        (diff_sq / ref_sq).sqrt()
    } else {
        diff_sq.sqrt()
    }
}

fn slice_values(f: &Field, j: usize, k: usize) -> Vec<f64> {
    (0..f.grid().nx).map(|i| f.at(k, j, i)).collect()
}

fn slice_sq(a: &[f64], b: Option<&[f64]>, w: &[f64]) -> f64 {
    a.iter()
        .enumerate()
        .map(|(i, x)| {
            let d = x - b.map_or(0.0, |b| b[i]);
            w[i] * d * d
        })
        .sum()
}

/// `u_E = |u - u_comp| / |u|` and the same for `p`, both in the discrete
/// `L2(Q_T)` norm, plus per-slice errors along `x1`.
pub fn relative_errors(
    truth_u: &Field,
    truth_p: &Field,
    comp_u: &Field,
    comp_p: &Field,
) -> Result<ErrorReport> {
    truth_u.ensure_same_grid(truth_p, "truth p")?;
    truth_u.ensure_same_grid(comp_u, "computed u")?;
    truth_u.ensure_same_grid(comp_p, "computed p")?;
    let g = *truth_u.grid();
    let err = |t: &Field, c: &Field| {
        let d = t.sub(c);
        relative(integrate_qt(&d.mul(&d)), integrate_qt(&t.mul(t)))
    };
    let wx = g.x_weights().to_vec();
    let ys: &[f64] = if g.dim == 1 { &[0.5] } else { &SLICE_COORDS };
    let mut slices = Vec::new();
    for &x2 in ys {
        let j = if g.dim == 1 { 0 } else { g.nearest_y(x2) };
        for &t in &SLICE_COORDS {
            let k = g.nearest_level(t);
            let pair = |a: &Field, b: &Field| {
                let (a, b) = (slice_values(a, j, k), slice_values(b, j, k));
                relative(slice_sq(&a, Some(&b), &wx), slice_sq(&a, None, &wx))
            };
            slices.push(SliceError {
                x2,
                t,
                u_e: pair(truth_u, comp_u),
                p_e: pair(truth_p, comp_p),
            });
        }
    }
    Ok(ErrorReport {
        u_e: err(truth_u, comp_u),
        p_e: err(truth_p, comp_p),
        slices,
    })
}

/// Every knob of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub test_case: TestCase,
    /// Grid of the forward density solve.
    pub fine_grid: GridSpec,
    /// Grid of the inversion.
    pub coarse_grid: GridSpec,
    pub model: ModelParams,
    pub functional: FunctionalParams,
    /// Values used by [`sweep_lambda`].
    pub lambdas: Vec<f64>,
    pub optimizer: OptimizerConfig,
    pub noise: NoiseSpec,
    pub output: Option<PathBuf>,
}

pub const TABLE_LAMBDAS: [f64; 7] = [0.01, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0];

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            test_case: TestCase::Poly,
            fine_grid: GridSpec::unit_square(81, 321).expect("valid grid"),
            coarse_grid: GridSpec::unit_square(21, 11).expect("valid grid"),
            model: ModelParams::default(),
            functional: FunctionalParams::default(),
            lambdas: TABLE_LAMBDAS.to_vec(),
            optimizer: OptimizerConfig::default(),
            noise: NoiseSpec::default(),
            output: None,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.fine_grid.validate()?;
        self.coarse_grid.validate()?;
        if !self.fine_grid.nests(&self.coarse_grid) {
            return Err(MfgError::Config(
                "fine grid does not nest the coarse grid".into(),
            ));
        }
        self.functional.validate()?;
        self.optimizer.validate()?;
        if !(self.noise.delta >= 0.0) {
            return Err(MfgError::Config(format!(
                "noise level must be >= 0, got {}",
                self.noise.delta
            )));
        }
        for &l in &self.lambdas {
            CarlemanParams::relaxed(self.functional.carleman.a, l)?;
        }
        Ok(())
    }

    /// Git-style content hash (`sha256("blob <len>\0" + json)`) of every
    /// input except the output location.
    pub fn input_hash(&self) -> Result<String> {
        let mut s = self.clone();
        s.output = None;
        let json = serde_json::to_string(&s)?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", json.len()).as_bytes());
        h.update(json.as_bytes());
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Generates (or loads) the dataset and applies the configured noise.
pub fn build_dataset(spec: &ExperimentSpec) -> Result<Dataset> {
    spec.validate()?;
    let clean = match &spec.test_case {
        TestCase::CustomFile { path } => read_dataset(path)?,
        case => {
            let v = test_generator(case, &spec.fine_grid)?;
            let m0 = gaussian_m0(&spec.fine_grid);
            let gen = GeneratorSpec::new(v, m0, spec.coarse_grid)?;
            generate_dataset(&gen, &spec.model)?
        }
    };
    add_noise_with(&clean, &spec.noise)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub lambda: f64,
    pub summary: RunSummary,
    pub errors: Option<ErrorReport>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    complete: bool,
    input_hash: String,
    spec: &'a ExperimentSpec,
    lambda: f64,
    summary: Option<&'a RunSummary>,
    errors: Option<&'a ErrorReport>,
    failure: Option<String>,
}

fn write_manifest(dir: &Path, m: &Manifest<'_>) -> Result<()> {
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

/// Runs one inversion on a prepared dataset. With `out` set, artifacts are
/// written there; the manifest is marked incomplete until the run finishes.
pub fn run_on_dataset(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    functional: &FunctionalParams,
    out: Option<&Path>,
) -> Result<(ExperimentOutcome, RunReport)> {
    let lambda = functional.carleman.lambda;
    let hash = spec.input_hash()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_manifest(
            dir,
            &Manifest {
                complete: false,
                input_hash: hash.clone(),
                spec,
                lambda,
                summary: None,
                errors: None,
                failure: None,
            },
        )?;
    }
    let result = descend(&spec.optimizer, functional, dataset);
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            if let Some(dir) = out {
                write_manifest(
                    dir,
                    &Manifest {
                        complete: false,
                        input_hash: hash,
                        spec,
                        lambda,
                        summary: None,
                        errors: None,
                        failure: Some(e.to_string()),
                    },
                )?;
            }
            return Err(e);
        }
    };
    let errors = match &dataset.truth {
        Some(t) => Some(relative_errors(&t.u, &t.p, &report.final_u, &report.final_p)?),
        None => None,
    };
    let summary = report.summary();
    if let Some(dir) = out {
        report.write_iterations_csv(&dir.join("iterations.csv"))?;
        if let Some(e) = &errors {
            write_errors_csv(&dir.join("errors.csv"), e)?;
        }
        let fields = dir.join("fields");
        write_field(&fields, "u_comp", &report.final_u)?;
        write_field(&fields, "p_comp", &report.final_p)?;
        if let Some(t) = &dataset.truth {
            write_field(&fields, "u_true", &t.u)?;
            write_field(&fields, "p_true", &t.p)?;
        }
        write_slices(&dir.join("slices"), dataset, &report.final_u, &report.final_p)?;
        write_manifest(
            dir,
            &Manifest {
                complete: true,
                input_hash: hash,
                spec,
                lambda,
                summary: Some(&summary),
                errors: errors.as_ref(),
                failure: None,
            },
        )?;
    }
    info!(
        "lambda = {lambda}: {:?}, u_E = {:?}, p_E = {:?}",
        summary.status,
        errors.as_ref().map(|e| e.u_e),
        errors.as_ref().map(|e| e.p_e)
    );
    Ok((
        ExperimentOutcome {
            lambda,
            summary,
            errors,
        },
        report,
    ))
}

/// Full pipeline: data generation, noise, descent, errors, artifacts.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let dataset = build_dataset(spec)?;
    let (outcome, _) = run_on_dataset(spec, &dataset, &spec.functional, spec.output.as_deref())?;
    Ok(outcome)
}

fn write_errors_csv(path: &Path, e: &ErrorReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "scope,x2,t,u_e,p_e")?;
    writeln!(w, "all,,,{},{}", fmt_num(e.u_e), fmt_num(e.p_e))?;
    for s in &e.slices {
        writeln!(
            w,
            "slice,{},{},{},{}",
            s.x2,
            s.t,
            fmt_num(s.u_e),
            fmt_num(s.p_e)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Name of the slice file at `{x2, t}`.
pub fn slice_file_name(x2: f64, t: f64) -> String {
    format!("x2_{x2:.2}_t_{t:.2}.csv")
}

fn write_slices(dir: &Path, dataset: &Dataset, u: &Field, p: &Field) -> Result<()> {
    fs::create_dir_all(dir)?;
    let g = *u.grid();
    let ys: &[f64] = if g.dim == 1 { &[0.5] } else { &SLICE_COORDS };
    for &x2 in ys {
        let j = if g.dim == 1 { 0 } else { g.nearest_y(x2) };
        for &t in &SLICE_COORDS {
            let k = g.nearest_level(t);
            let mut w = std::io::BufWriter::new(fs::File::create(dir.join(slice_file_name(x2, t)))?);
            writeln!(w, "x1,u_true,u_comp,p_true,p_comp")?;
            for i in 0..g.nx {
                let (ut, pt) = match &dataset.truth {
                    Some(tr) => (fmt_num(tr.u.at(k, j, i)), fmt_num(tr.p.at(k, j, i))),
                    None => (String::new(), String::new()),
                };
                writeln!(
                    w,
                    "{},{ut},{},{pt},{}",
                    fmt_num(g.x(i)),
                    fmt_num(u.at(k, j, i)),
                    fmt_num(p.at(k, j, i))
                )?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub u_e: Option<f64>,
    pub p_e: Option<f64>,
    pub status: RunStatus,
    pub iterations: usize,
    pub final_j: f64,
    pub final_grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, lambda: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.lambda == lambda)
    }

    /// The `lambda` with the smallest `u_E`.
    pub fn argmin_u(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.u_e.map(|e| (r.lambda, e)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(w, "lambda,u_e,p_e,status,iterations,final_j,final_grad_norm")?;
        let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.lambda,
                opt(r.u_e),
                opt(r.p_e),
                serde_json::to_value(r.status)?.as_str().unwrap_or_default(),
                r.iterations,
                fmt_num(r.final_j),
                fmt_num(r.final_grad_norm)
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One inversion per value in `spec.lambdas`, all on the same dataset, run
/// in parallel. Per-run artifacts go to `output/lambda_<value>/` and the
/// table to `output/sweep.csv`.
pub fn sweep_lambda(spec: &ExperimentSpec) -> Result<SweepTable> {
    let dataset = build_dataset(spec)?;
    sweep_on_dataset(spec, &dataset)
}

pub fn sweep_on_dataset(spec: &ExperimentSpec, dataset: &Dataset) -> Result<SweepTable> {
    if spec.lambdas.is_empty() {
        return Err(MfgError::Config("empty lambda list".into()));
    }
    let rows = spec
        .lambdas
        .par_iter()
        .map(|&lambda| {
            let mut functional = spec.functional;
            functional.carleman = CarlemanParams::relaxed(functional.carleman.a, lambda)?;
            let dir = spec.output.as_ref().map(|o| o.join(format!("lambda_{lambda}")));
            let (outcome, _) = run_on_dataset(spec, dataset, &functional, dir.as_deref())?;
            Ok(SweepRow {
                lambda,
                u_e: outcome.errors.as_ref().map(|e| e.u_e),
                p_e: outcome.errors.as_ref().map(|e| e.p_e),
                status: outcome.summary.status,
                iterations: outcome.summary.iterations,
                final_j: outcome.summary.final_j,
                final_grad_norm: outcome.summary.final_grad_norm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = SweepTable { rows };
    if let Some(out) = &spec.output {
        fs::create_dir_all(out)?;
        table.write_csv(&out.join("sweep.csv"))?;
    }
    Ok(table)
}

/// Generates the dataset of `spec` and writes it to `dir`.
pub fn generate_to(spec: &ExperimentSpec, dir: &Path) -> Result<Dataset> {
    let data = build_dataset(spec)?;
    write_dataset(dir, &data)?;
    Ok(data)
}
