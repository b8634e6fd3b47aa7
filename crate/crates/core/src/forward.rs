//! Manufactured data: solve the Fokker-Planck equation for a chosen value
//! function `v`, then back-compute the source `F1` that makes `(v, m)` an
//! exact solution of the discrete system, and read off the boundary data.

use log::debug;

use crate::error::{MfgError, Result};
use crate::grid::{
    divergence_c, gradient_c, laplacian_neumann, Field, GridSpec, SpatialField,
};
use crate::model::{hjb_operator, max_drift, MfgCoefficients, ModelParams};

/// Relative residual at which the implicit diffusion solve stops.
const SOLVE_TOL: f64 = 1e-14;
const SOLVE_MAX_ITERS: usize = 1000;

/// Inputs of the data generator.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    /// Value function on the fine grid.
    pub v: Field,
    /// Initial density on the fine grid.
    pub m0: SpatialField,
    /// Grid on which the inversion runs; must nest in `v`'s grid.
    pub coarse_grid: GridSpec,
}

impl GeneratorSpec {
    pub fn new(v: Field, m0: SpatialField, coarse_grid: GridSpec) -> Result<Self> {
        let spec = Self { v, m0, coarse_grid };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fine_grid(&self) -> &GridSpec {
        self.v.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let fine = self.fine_grid();
        fine.validate()?;
        self.coarse_grid.validate()?;
        let mg = self.m0.grid();
        if (mg.dim, mg.nx, mg.ny) != (fine.dim, fine.nx, fine.ny) {
            return Err(MfgError::GridMismatch(
                "initial density is not on the fine spatial grid".into(),
            ));
        }
        self.v.check_finite()?;
        self.m0.check_finite()?;
        if self.m0.min() < 0.0 {
            return Err(MfgError::Domain(format!(
                "initial density must be nonnegative, min = {}",
                self.m0.min()
            )));
        }
        if !fine.nests(&self.coarse_grid) {
            return Err(MfgError::GridMismatch(format!(
                "fine grid {fine:?} does not nest coarse grid {:?}",
                self.coarse_grid
            )));
        }
        Ok(())
    }
}

/// Ground-truth pair on the inversion grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub u: Field,
    pub p: Field,
}

/// Boundary measurements, coefficients (including the manufactured `F1`)
/// and, for synthetic data, the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u_terminal: SpatialField,
    pub p_initial: SpatialField,
    pub p_terminal: SpatialField,
    pub coeffs: MfgCoefficients,
    pub truth: Option<Truth>,
}

impl Dataset {
    /// Builds a dataset whose boundary data are the exact slices of `(u, p)`.
    pub fn from_truth(coeffs: MfgCoefficients, u: Field, p: Field) -> Result<Self> {
        coeffs.hamiltonian.ensure_same_grid(&u, "truth u")?;
        coeffs.hamiltonian.ensure_same_grid(&p, "truth p")?;
        let last = u.grid().nt - 1;
        Ok(Self {
            u_terminal: u.level(last),
            p_initial: p.level(0),
            p_terminal: p.level(last),
            coeffs,
            truth: Some(Truth { u, p }),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        self.coeffs.grid()
    }

    pub fn validate(&self) -> Result<()> {
        self.coeffs.validate()?;
        let g = self.grid();
        for (name, f) in [
            ("u_T", &self.u_terminal),
            ("p_0", &self.p_initial),
            ("p_T", &self.p_terminal),
        ] {
            let fg = f.grid();
            if (fg.nx, fg.ny, fg.dim) != (g.nx, g.ny, g.dim) {
                return Err(MfgError::GridMismatch(format!("{name} is not on the dataset grid")));
            }
            f.check_finite()?;
        }
        if let Some(truth) = &self.truth {
            self.coeffs.hamiltonian.ensure_same_grid(&truth.u, "truth u")?;
            self.coeffs.hamiltonian.ensure_same_grid(&truth.p, "truth p")?;
        }
        Ok(())
    }
}

fn dot_w(a: &SpatialField, b: &SpatialField, w: &ndarray::Array2<f64>) -> f64 {
    a.values()
        .iter()
        .zip(b.values().iter())
        .zip(w.iter())
        .map(|((x, y), w)| x * y * w)
        .sum()
}

/// Solves `(I - c Lap) x = rhs` by conjugate gradients in the
/// quadrature-weighted inner product, where the Neumann Laplacian is
/// self-adjoint.
fn solve_implicit_diffusion(rhs: &SpatialField, c: f64) -> Result<SpatialField> {
    let w = rhs.grid().space_weights();
    let apply = |x: &SpatialField| {
        let mut out = x.clone();
        out.axpy(-c, &laplacian_neumann(x));
        out
    };
    let rhs_norm = dot_w(rhs, rhs, &w).sqrt();
    if rhs_norm == 0.0 {
        return Ok(rhs.clone());
    }
    let mut x = rhs.clone();
    let mut r = rhs.sub(&apply(&x));
    let mut dir = r.clone();
    let mut rr = dot_w(&r, &r, &w);
    for _ in 0..SOLVE_MAX_ITERS {
        if rr.sqrt() <= SOLVE_TOL * rhs_norm {
            return Ok(x);
        }
        let ad = apply(&dir);
        let alpha = rr / dot_w(&dir, &ad, &w);
        x.axpy(alpha, &dir);
        r.axpy(-alpha, &ad);
        let rr_next = dot_w(&r, &r, &w);
        dir = r.add(&dir.scaled(rr_next / rr));
        rr = rr_next;
    }
    if rr.sqrt() <= 1e3 * SOLVE_TOL * rhs_norm {
        return Ok(x);
    }
    Err(MfgError::Numeric(format!(
        "implicit diffusion solve did not converge: relative residual {:.3e}",
        rr.sqrt() / rhs_norm
    )))
}

/// Marches `m_t - beta Lap m + div(s m grad v) = 0` from `m0` on the fine
/// grid. Diffusion is implicit (backward Euler), advection explicit and
/// conservative, so the discrete mass is preserved to solver precision.
pub fn solve_fokker_planck(spec: &GeneratorSpec, coeffs: &MfgCoefficients) -> Result<Field> {
    spec.validate()?;
    let grid = *spec.fine_grid();
    if *coeffs.grid() != grid {
        return Err(MfgError::GridMismatch(
            "coefficients are not on the fine grid".into(),
        ));
    }
    let dt = grid.dt();
    let h = grid.h_min();
    let speed = max_drift(coeffs, &spec.v);
    let courant = speed * dt / h;
    if courant > 1.0 {
        return Err(MfgError::Cfl {
            courant,
            speed,
            dt,
            h,
        });
    }
    debug!("fokker-planck: {} levels, courant {courant:.3e}", grid.nt);

    let mut m = Field::zeros(&grid);
    m.set_level(0, &spec.m0);
    let mut current = spec.m0.clone();
    for k in 0..grid.nt - 1 {
        let s = coeffs.hamiltonian.level(k);
        let sm = s.mul(&current);
        let flux: Vec<SpatialField> = gradient_c(&spec.v.level(k))
            .iter()
            .map(|g| g.mul(&sm))
            .collect();
        let mut rhs = current.clone();
        rhs.axpy(-dt, &divergence_c(&flux)?);
        current = solve_implicit_diffusion(&rhs, dt * coeffs.beta)?;
        current.check_finite().map_err(|e| {
            MfgError::Numeric(format!("non-finite density at level {}: {e}", k + 1))
        })?;
        m.set_level(k + 1, &current);
    }
    Ok(m)
}

/// `F1 = -(v_t + beta Lap v + s |grad v|^2 / 2 + int K m dy + f m)`, built
/// from the same discrete operators as the residual so that
/// `residual_l1(v, m)` vanishes to round-off.
pub fn manufacture_source(coeffs: &MfgCoefficients, v: &Field, m: &Field) -> Result<Field> {
    coeffs.hamiltonian.ensure_same_grid(v, "v")?;
    coeffs.hamiltonian.ensure_same_grid(m, "m")?;
    Ok(hjb_operator(coeffs, v, m).scaled(-1.0))
}

/// Nodal sampling of a fine field onto a nested coarse grid.
pub fn restrict(field: &Field, coarse: &GridSpec) -> Result<Field> {
    let fine = field.grid();
    if !fine.nests(coarse) {
        return Err(MfgError::GridMismatch(format!(
            "{fine:?} does not nest {coarse:?}"
        )));
    }
    let sx = (fine.nx - 1) / (coarse.nx - 1);
    let sy = if fine.dim == 1 { 1 } else { (fine.ny - 1) / (coarse.ny - 1) };
    let st = (fine.nt - 1) / (coarse.nt - 1);
    let values = ndarray::Array3::from_shape_fn((coarse.nt, coarse.ny, coarse.nx), |(k, j, i)| {
        field.at(k * st, j * sy, i * sx)
    });
    Field::from_values(coarse, values)
}

/// Runs the fine-grid solve, restricts `(v, m)` to the coarse grid,
/// manufactures `F1` there, and extracts `u_T`, `p_0`, `p_T`.
pub fn generate_dataset(spec: &GeneratorSpec, params: &ModelParams) -> Result<Dataset> {
    spec.validate()?;
    let fine_coeffs = params.on_grid(spec.fine_grid())?;
    let m_fine = solve_fokker_planck(spec, &fine_coeffs)?;
    let v = restrict(&spec.v, &spec.coarse_grid)?;
    let m = restrict(&m_fine, &spec.coarse_grid)?;
    let mut coeffs = params.on_grid(&spec.coarse_grid)?;
    coeffs.source_hjb = manufacture_source(&coeffs, &v, &m)?;
    coeffs.validate()?;
    Dataset::from_truth(coeffs, v, m)
}
