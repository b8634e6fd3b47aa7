//! Space-time lattice, sampled fields and the finite-difference operators
//! used by every other module.
//!
//! The lattice is node-centred and includes the boundary nodes. The zero
//! Neumann condition is imposed through mirror ghosts: the ghost node beyond
//! a boundary takes the value of the first interior node, so the discrete
//! normal derivative vanishes identically and no degrees of freedom are spent
//! on it.
//!
//! Every linear operator is stored as a sparse one-dimensional stencil
//! ([`LineOp`]) applied along an axis. The same stencil object provides the
//! exact transpose, which the objective gradient relies on.

use ndarray::{Array, Array1, Array2, Array3, ArrayView, Axis, Dimension, Ix2, Ix3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};

/// Axis-aligned space-time lattice over `[0,lx] x [0,ly] x [0,horizon]`.
///
/// `nx`, `ny` and `nt` count nodes including the boundary. In one space
/// dimension `ny` is 1 and `ly` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub lx: f64,
    pub ly: f64,
    pub horizon: f64,
}

impl GridSpec {
    pub fn new_1d(nx: usize, nt: usize, lx: f64, horizon: f64) -> Result<Self> {
        let grid = Self {
            dim: 1,
            nx,
            ny: 1,
            nt,
            lx,
            ly: 1.0,
            horizon,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn new_2d(nx: usize, ny: usize, nt: usize, lx: f64, ly: f64, horizon: f64) -> Result<Self> {
        let grid = Self {
            dim: 2,
            nx,
            ny,
            nt,
            lx,
            ly,
            horizon,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// `n x n` nodes on the unit square with `nt` time levels on `[0,1]`.
    pub fn unit_square(n: usize, nt: usize) -> Result<Self> {
        Self::new_2d(n, n, nt, 1.0, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MfgError::InvalidGrid(msg));
        match self.dim {
            1 => {
                if self.ny != 1 {
                    return bad(format!("1D grid must have ny = 1, got {}", self.ny));
                }
            }
            2 => {
                if self.ny < 3 {
                    return bad(format!("ny must be at least 3, got {}", self.ny));
                }
                if !(self.ly > 0.0 && self.ly.is_finite()) {
                    return bad(format!("ly must be positive, got {}", self.ly));
                }
            }
            d => return bad(format!("only 1 or 2 space dimensions are supported, got {d}")),
        }
        if self.nx < 3 {
            return bad(format!("nx must be at least 3, got {}", self.nx));
        }
        if self.nt < 2 {
            return bad(format!("nt must be at least 2, got {}", self.nt));
        }
        if !(self.lx > 0.0 && self.lx.is_finite()) {
            return bad(format!("lx must be positive, got {}", self.lx));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        Ok(())
    }

    pub fn hx(&self) -> f64 {
        self.lx / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        if self.dim == 1 {
            1.0
        } else {
            self.ly / (self.ny - 1) as f64
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.nt - 1) as f64
    }

    /// Smallest spatial spacing.
    pub fn h_min(&self) -> f64 {
        if self.dim == 1 {
            self.hx()
        } else {
            self.hx().min(self.hy())
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.hx()
    }

    pub fn y(&self, j: usize) -> f64 {
        if self.dim == 1 {
            0.0
        } else {
            j as f64 * self.hy()
        }
    }

    pub fn t(&self, k: usize) -> f64 {
        if k + 1 == self.nt {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn space_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len(&self) -> usize {
        self.nt * self.space_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the time level closest to `t`.
    pub fn nearest_level(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.nt - 1)
    }

    /// Index of the x-node closest to `x`.
    pub fn nearest_x(&self, x: f64) -> usize {
        ((x / self.hx()).round().max(0.0) as usize).min(self.nx - 1)
    }

    /// Index of the y-node closest to `y`.
    pub fn nearest_y(&self, y: f64) -> usize {
        if self.dim == 1 {
            0
        } else {
            ((y / self.hy()).round().max(0.0) as usize).min(self.ny - 1)
        }
    }

    /// Same lattice with a different number of time levels.
    pub fn with_levels(&self, nt: usize) -> Result<Self> {
        let grid = Self { nt, ..*self };
        grid.validate()?;
        Ok(grid)
    }

    /// Trapezoidal weights along x.
    pub fn x_weights(&self) -> Array1<f64> {
        trapezoid_weights(self.nx, self.hx())
    }

    /// Trapezoidal weights along y (a single unit weight in 1D).
    pub fn y_weights(&self) -> Array1<f64> {
        if self.dim == 1 {
            Array1::ones(1)
        } else {
            trapezoid_weights(self.ny, self.hy())
        }
    }

    pub fn time_weights(&self) -> Array1<f64> {
        trapezoid_weights(self.nt, self.dt())
    }

    /// Tensor-product trapezoidal weights over Omega, shape `(ny, nx)`.
    pub fn space_weights(&self) -> Array2<f64> {
        let wx = self.x_weights();
        let wy = self.y_weights();
        Array2::from_shape_fn((self.ny, self.nx), |(j, i)| wy[j] * wx[i])
    }

    /// Tensor-product trapezoidal weights over Q_T, shape `(nt, ny, nx)`.
    pub fn qt_weights(&self) -> Array3<f64> {
        let ws = self.space_weights();
        let wt = self.time_weights();
        Array3::from_shape_fn((self.nt, self.ny, self.nx), |(k, j, i)| wt[k] * ws[[j, i]])
    }

    /// True when every node of `coarse` is also a node of `self` and the two
    /// lattices cover the same box.
    pub fn nests(&self, coarse: &GridSpec) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
        self.dim == coarse.dim
            && close(self.lx, coarse.lx)
            && (self.dim == 1 || close(self.ly, coarse.ly))
            && close(self.horizon, coarse.horizon)
            && (self.nx - 1).is_multiple_of(coarse.nx - 1)
            && (self.ny.max(2) - 1).is_multiple_of(coarse.ny.max(2) - 1)
            && (self.nt - 1).is_multiple_of(coarse.nt - 1)
    }
}

fn trapezoid_weights(n: usize, h: f64) -> Array1<f64> {
    let mut w = Array1::from_elem(n, h);
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// Array layouts a [`GridFn`] may take on a given grid.
pub trait Layout: Dimension {
    fn shape_for(grid: &GridSpec) -> Self;
    /// Position of the x axis.
    const X_AXIS: usize;
}

impl Layout for Ix3 {
    fn shape_for(grid: &GridSpec) -> Self {
        ndarray::Dim([grid.nt, grid.ny, grid.nx])
    }
    const X_AXIS: usize = 2;
}

impl Layout for Ix2 {
    fn shape_for(grid: &GridSpec) -> Self {
        ndarray::Dim([grid.ny, grid.nx])
    }
    const X_AXIS: usize = 1;
}

/// Real values sampled at the nodes of a grid.
///
/// [`Field`] is the space-time flavour indexed `(t, y, x)`;
/// [`SpatialField`] is a single time slice indexed `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFn<D: Layout> {
    grid: GridSpec,
    values: Array<f64, D>,
}

pub type Field = GridFn<Ix3>;
pub type SpatialField = GridFn<Ix2>;

impl<D: Layout> GridFn<D> {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            grid: *grid,
            values: Array::zeros(D::shape_for(grid)),
        }
    }

    pub fn constant(grid: &GridSpec, c: f64) -> Self {
        Self {
            grid: *grid,
            values: Array::from_elem(D::shape_for(grid), c),
        }
    }

    /// Wraps an array, checking its shape against the grid and that every
    /// entry is finite.
    pub fn from_values(grid: &GridSpec, values: Array<f64, D>) -> Result<Self> {
        grid.validate()?;
        let expected = D::shape_for(grid);
        if values.raw_dim() != expected {
            return Err(MfgError::InvalidField(format!(
                "shape {:?} does not match grid shape {:?}",
                values.shape(),
                expected.slice()
            )));
        }
        let field = Self {
            grid: *grid,
            values,
        };
        field.check_finite()?;
        Ok(field)
    }

    pub(crate) fn from_values_unchecked(grid: &GridSpec, values: Array<f64, D>) -> Self {
        debug_assert_eq!(values.raw_dim(), D::shape_for(grid));
        Self {
            grid: *grid,
            values,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &Array<f64, D> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array<f64, D> {
        &mut self.values
    }

    pub fn into_values(self) -> Array<f64, D> {
        self.values
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(bad) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(MfgError::InvalidField(format!("non-finite entry {bad}")));
        }
        Ok(())
    }

    pub fn ensure_same_grid(&self, other: &Self, what: &str) -> Result<()> {
        if self.grid != other.grid {
            return Err(MfgError::GridMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_values_unchecked(&self.grid, self.values.mapv(f))
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.grid, other.grid, "zip_map over different grids");
        let mut out = self.values.clone();
        Zip::from(&mut out)
            .and(&other.values)
            .for_each(|a, &b| *a = f(*a, b));
        Self::from_values_unchecked(&self.grid, out)
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        assert_eq!(self.grid, other.grid, "axpy over different grids");
        Zip::from(&mut self.values)
            .and(&other.values)
            .for_each(|a, &b| *a += c * b);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl Field {
    /// Samples `f(x, y, t)` at every node.
    pub fn from_fn(grid: &GridSpec, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let values = Array3::from_shape_fn((grid.nt, grid.ny, grid.nx), |(k, j, i)| {
            f(grid.x(i), grid.y(j), grid.t(k))
        });
        Self::from_values_unchecked(grid, values)
    }

    /// Time slice `k`.
    pub fn level(&self, k: usize) -> SpatialField {
        SpatialField::from_values_unchecked(&self.grid, self.values.index_axis(Axis(0), k).to_owned())
    }

    pub fn set_level(&mut self, k: usize, slice: &SpatialField) {
        assert_eq!(
            (self.grid.nx, self.grid.ny),
            (slice.grid.nx, slice.grid.ny),
            "slice shape"
        );
        self.values
            .index_axis_mut(Axis(0), k)
            .assign(&slice.values);
    }

    /// Field that repeats `slice` at every time level.
    pub fn from_level(grid: &GridSpec, slice: &SpatialField) -> Self {
        let mut out = Self::zeros(grid);
        for k in 0..grid.nt {
            out.set_level(k, slice);
        }
        out
    }

    pub fn at(&self, k: usize, j: usize, i: usize) -> f64 {
        self.values[[k, j, i]]
    }
}

impl SpatialField {
    pub fn from_fn(grid: &GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = Array2::from_shape_fn((grid.ny, grid.nx), |(j, i)| f(grid.x(i), grid.y(j)));
        Self::from_values_unchecked(grid, values)
    }

    pub fn at(&self, j: usize, i: usize) -> f64 {
        self.values[[j, i]]
    }
}

/// Sparse matrix acting on one grid line, with an exact transpose.
#[derive(Debug, Clone)]
pub(crate) struct LineOp {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    coefs: Vec<f64>,
}

impl LineOp {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut coefs = Vec::new();
        offsets.push(0);
        for row in rows {
            for (c, v) in row {
                cols.push(c);
                coefs.push(v);
            }
            offsets.push(cols.len());
        }
        Self {
            offsets,
            cols,
            coefs,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub(crate) fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            *yi = self.cols[lo..hi]
                .iter()
                .zip(&self.coefs[lo..hi])
                .map(|(&c, &v)| v * x[c])
                .sum();
        }
    }

    /// Dense matrix with `ncols` columns.
    pub(crate) fn to_dense(&self, ncols: usize) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), ncols));
        for i in 0..self.len() {
            for k in self.offsets[i]..self.offsets[i + 1] {
                m[[i, self.cols[k]]] += self.coefs[k];
            }
        }
        m
    }

    pub(crate) fn apply_transpose(&self, r: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &ri) in r.iter().enumerate() {
            let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
            for (&c, &v) in self.cols[lo..hi].iter().zip(&self.coefs[lo..hi]) {
                y[c] += v * ri;
            }
        }
    }
}

/// Second difference with mirror ghosts at both ends.
pub(crate) fn neumann_second_difference(n: usize, h: f64) -> LineOp {
    let s = 1.0 / (h * h);
    let rows = (0..n)
        .map(|i| {
            if i == 0 {
                vec![(0, -2.0 * s), (1, 2.0 * s)]
            } else if i == n - 1 {
                vec![(n - 2, 2.0 * s), (n - 1, -2.0 * s)]
            } else {
                vec![(i - 1, s), (i, -2.0 * s), (i + 1, s)]
            }
        })
        .collect();
    LineOp::from_rows(rows)
}

/// Central first difference; zero at the end nodes where the mirror ghost
/// cancels the stencil.
pub(crate) fn central_first_difference(n: usize, h: f64) -> LineOp {
    let s = 0.5 / h;
    let rows = (0..n)
        .map(|i| {
            if i == 0 || i == n - 1 {
                Vec::new()
            } else {
                vec![(i - 1, -s), (i + 1, s)]
            }
        })
        .collect();
    LineOp::from_rows(rows)
}

/// Divergence stencil: central in the interior, one-sided at the ends so
/// that the trapezoidal integral telescopes to the boundary flux difference.
pub(crate) fn divergence_difference(n: usize, h: f64) -> LineOp {
    let s = 0.5 / h;
    let rows = (0..n)
        .map(|i| {
            if i == 0 {
                vec![(0, -1.0 / h), (1, 1.0 / h)]
            } else if i == n - 1 {
                vec![(n - 2, -1.0 / h), (n - 1, 1.0 / h)]
            } else {
                vec![(i - 1, -s), (i + 1, s)]
            }
        })
        .collect();
    LineOp::from_rows(rows)
}

/// Time derivative: central at interior levels, second-order one-sided at
/// the first and last level (first-order when only two levels exist).
pub(crate) fn time_first_difference(n: usize, dt: f64) -> LineOp {
    if n == 2 {
        let s = 1.0 / dt;
        return LineOp::from_rows(vec![vec![(0, -s), (1, s)], vec![(0, -s), (1, s)]]);
    }
    let s = 0.5 / dt;
    let rows = (0..n)
        .map(|k| {
            if k == 0 {
                vec![(0, -3.0 * s), (1, 4.0 * s), (2, -s)]
            } else if k == n - 1 {
                vec![(n - 3, s), (n - 2, -4.0 * s), (n - 1, 3.0 * s)]
            } else {
                vec![(k - 1, -s), (k + 1, s)]
            }
        })
        .collect();
    LineOp::from_rows(rows)
}

/// Compact second difference in time at interior levels; zero at the end
/// levels.
pub(crate) fn time_second_difference(n: usize, dt: f64) -> LineOp {
    let s = 1.0 / (dt * dt);
    let rows = (0..n)
        .map(|k| {
            if k == 0 || k == n - 1 {
                Vec::new()
            } else {
                vec![(k - 1, s), (k, -2.0 * s), (k + 1, s)]
            }
        })
        .collect();
    LineOp::from_rows(rows)
}

/// Applies `op` (or its transpose) to every lane of `a` along `axis`.
pub(crate) fn apply_along<D: Dimension>(
    op: &LineOp,
    a: &ArrayView<f64, D>,
    axis: Axis,
    transpose: bool,
) -> Array<f64, D> {
    debug_assert_eq!(op.len(), a.len_of(axis));
    let mut out = Array::zeros(a.raw_dim());
    let n = a.len_of(axis);
    let mut src = vec![0.0; n];
    let mut dst = vec![0.0; n];
    for (lane_in, mut lane_out) in a.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        for (s, v) in src.iter_mut().zip(lane_in.iter()) {
            *s = *v;
        }
        if transpose {
            op.apply_transpose(&src, &mut dst);
        } else {
            op.apply(&src, &mut dst);
        }
        for (o, d) in lane_out.iter_mut().zip(&dst) {
            *o = *d;
        }
    }
    out
}

/// Which operator to run along each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SpaceStencil {
    SecondNeumann,
    CentralFirst,
    Divergence,
}

impl SpaceStencil {
    pub(crate) fn build(self, n: usize, h: f64) -> LineOp {
        match self {
            SpaceStencil::SecondNeumann => neumann_second_difference(n, h),
            SpaceStencil::CentralFirst => central_first_difference(n, h),
            SpaceStencil::Divergence => divergence_difference(n, h),
        }
    }
}

/// `axis_index` is 0 for x and 1 for y.
pub(crate) fn apply_space_axis<D: Layout>(
    f: &GridFn<D>,
    stencil: SpaceStencil,
    axis_index: usize,
    transpose: bool,
) -> GridFn<D> {
    let grid = f.grid;
    let (n, h, axis) = if axis_index == 0 {
        (grid.nx, grid.hx(), Axis(D::X_AXIS))
    } else {
        (grid.ny, grid.hy(), Axis(D::X_AXIS - 1))
    };
    let op = stencil.build(n, h);
    GridFn::from_values_unchecked(&grid, apply_along(&op, &f.values.view(), axis, transpose))
}

pub(crate) fn apply_time(f: &Field, op: &LineOp, transpose: bool) -> Field {
    Field::from_values_unchecked(&f.grid, apply_along(op, &f.values.view(), Axis(0), transpose))
}

/// Discrete Laplacian with zero-Neumann mirror ghosts.
pub fn laplacian_neumann<D: Layout>(f: &GridFn<D>) -> GridFn<D> {
    let mut out = apply_space_axis(f, SpaceStencil::SecondNeumann, 0, false);
    if f.grid.dim == 2 {
        out.axpy(1.0, &apply_space_axis(f, SpaceStencil::SecondNeumann, 1, false));
    }
    out
}

/// Laplacian of a single time level of a space-time field.
pub fn laplacian_at_level(f: &Field, k: usize) -> Result<SpatialField> {
    if k >= f.grid.nt {
        return Err(MfgError::Domain(format!(
            "time level {k} out of range (nt = {})",
            f.grid.nt
        )));
    }
    Ok(laplacian_neumann(&f.level(k)))
}

pub(crate) fn laplacian_neumann_transpose<D: Layout>(r: &GridFn<D>) -> GridFn<D> {
    let mut out = apply_space_axis(r, SpaceStencil::SecondNeumann, 0, true);
    if r.grid.dim == 2 {
        out.axpy(1.0, &apply_space_axis(r, SpaceStencil::SecondNeumann, 1, true));
    }
    out
}

/// Central-difference gradient, one component per spatial axis. Components
/// normal to a boundary vanish on that boundary.
pub fn gradient_c<D: Layout>(f: &GridFn<D>) -> Vec<GridFn<D>> {
    (0..f.grid.dim)
        .map(|axis| apply_space_axis(f, SpaceStencil::CentralFirst, axis, false))
        .collect()
}

/// Transpose of [`gradient_c`]: sums `G_k^T r_k` over the components.
pub(crate) fn gradient_c_transpose<D: Layout>(r: &[GridFn<D>]) -> GridFn<D> {
    let mut out = apply_space_axis(&r[0], SpaceStencil::CentralFirst, 0, true);
    for (axis, comp) in r.iter().enumerate().skip(1) {
        out.axpy(1.0, &apply_space_axis(comp, SpaceStencil::CentralFirst, axis, true));
    }
    out
}

/// Divergence of a vector field. Central in the interior and one-sided on
/// the boundary, so the trapezoidal integral over Omega equals the net
/// boundary flux and vanishes for fields with zero normal component.
pub fn divergence_c<D: Layout>(vec: &[GridFn<D>]) -> Result<GridFn<D>> {
    let first = vec
        .first()
        .ok_or_else(|| MfgError::InvalidField("empty vector field".into()))?;
    if vec.len() != first.grid.dim {
        return Err(MfgError::InvalidField(format!(
            "vector field has {} components, grid has dimension {}",
            vec.len(),
            first.grid.dim
        )));
    }
    for comp in &vec[1..] {
        first.ensure_same_grid(comp, "divergence components")?;
    }
    let mut out = apply_space_axis(first, SpaceStencil::Divergence, 0, false);
    for (axis, comp) in vec.iter().enumerate().skip(1) {
        out.axpy(1.0, &apply_space_axis(comp, SpaceStencil::Divergence, axis, false));
    }
    Ok(out)
}

/// Transpose of the divergence: one output component per axis.
pub(crate) fn divergence_c_transpose<D: Layout>(r: &GridFn<D>) -> Vec<GridFn<D>> {
    (0..r.grid.dim)
        .map(|axis| apply_space_axis(r, SpaceStencil::Divergence, axis, true))
        .collect()
}

/// Time derivative of a space-time field.
pub fn time_deriv(f: &Field) -> Field {
    apply_time(f, &time_first_difference(f.grid.nt, f.grid.dt()), false)
}

pub(crate) fn time_deriv_transpose(r: &Field) -> Field {
    apply_time(r, &time_first_difference(r.grid.nt, r.grid.dt()), true)
}

/// Trapezoidal integral over Q_T.
pub fn integrate_qt(f: &Field) -> f64 {
    weighted_sum(&f.values, &f.grid.qt_weights())
}

/// Trapezoidal integral over Omega.
pub fn integrate_omega(f: &SpatialField) -> f64 {
    weighted_sum(&f.values, &f.grid.space_weights())
}

/// Trapezoidal integral over Omega at every time level.
pub fn integrate_omega_levels(f: &Field) -> Vec<f64> {
    let ws = f.grid.space_weights();
    f.values
        .outer_iter()
        .map(|slice| weighted_sum(&slice, &ws))
        .collect()
}

/// Plain sequential dot product; fixed summation order keeps results
/// bit-reproducible.
pub(crate) fn weighted_sum<D: Dimension, S1, S2>(
    a: &ndarray::ArrayBase<S1, D>,
    w: &ndarray::ArrayBase<S2, D>,
) -> f64
where
    S1: ndarray::Data<Elem = f64>,
    S2: ndarray::Data<Elem = f64>,
{
    a.iter().zip(w.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn unit(n: usize, nt: usize) -> GridSpec {
        GridSpec::unit_square(n, nt).unwrap()
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(GridSpec::unit_square(2, 5).is_err());
        assert!(GridSpec::unit_square(5, 1).is_err());
        assert!(GridSpec::new_2d(5, 5, 5, -1.0, 1.0, 1.0).is_err());
        assert!(GridSpec::new_2d(5, 5, 5, 1.0, 1.0, 0.0).is_err());
        assert!(GridSpec::new_1d(3, 2, 1.0, 1.0).is_ok());
    }

    #[test]
    fn spacings() {
        let g = GridSpec::new_2d(11, 21, 6, 1.0, 2.0, 0.5).unwrap();
        assert_abs_diff_eq!(g.hx(), 0.1);
        assert_abs_diff_eq!(g.hy(), 0.1);
        assert_abs_diff_eq!(g.dt(), 0.1);
        assert_eq!(g.len(), 6 * 21 * 11);
    }

    #[test]
    fn from_values_checks_shape_and_finiteness() {
        let g = unit(5, 3);
        assert!(Field::from_values(&g, Array3::zeros((3, 5, 4))).is_err());
        let mut bad = Array3::zeros((3, 5, 5));
        bad[[1, 1, 1]] = f64::NAN;
        assert!(Field::from_values(&g, bad).is_err());
        assert!(Field::from_values(&g, Array3::zeros((3, 5, 5))).is_ok());
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let g = unit(7, 3);
        let lap = laplacian_neumann(&Field::constant(&g, 3.5));
        assert!(lap.max_abs() < 1e-12);
    }

    #[test]
    fn laplacian_exact_on_quadratic_interior() {
        let g = unit(9, 2);
        let f = SpatialField::from_fn(&g, |x, _| x * x);
        let lap = laplacian_neumann(&f);
        for j in 0..g.ny {
            for i in 1..g.nx - 1 {
                assert_abs_diff_eq!(lap.at(j, i), 2.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn laplacian_of_cosine_matches_analytic() {
        let g = GridSpec::new_1d(41, 2, 1.0, 1.0).unwrap();
        let f = SpatialField::from_fn(&g, |x, _| (PI * x).cos());
        let lap = laplacian_neumann(&f);
        let mut err = 0.0_f64;
        for i in 1..g.nx - 1 {
            let exact = -PI * PI * (PI * g.x(i)).cos();
            err = err.max((lap.at(0, i) - exact).abs());
        }
        assert!(err < 0.01 * PI * PI, "max interior error {err}");
    }

    #[test]
    fn laplacian_at_level_range_check() {
        let g = unit(5, 3);
        let f = Field::constant(&g, 1.0);
        assert!(laplacian_at_level(&f, 2).is_ok());
        assert!(matches!(laplacian_at_level(&f, 3), Err(MfgError::Domain(_))));
    }

    #[test]
    fn gradient_cases() {
        let g = unit(11, 2);
        let c = gradient_c(&SpatialField::constant(&g, 2.0));
        assert!(c.iter().all(|comp| comp.max_abs() < 1e-12));

        let lin = gradient_c(&SpatialField::from_fn(&g, |x, _| x));
        let quad = gradient_c(&SpatialField::from_fn(&g, |x, _| x * x));
        for j in 0..g.ny {
            for i in 1..g.nx - 1 {
                assert_abs_diff_eq!(lin[0].at(j, i), 1.0, epsilon = 1e-13);
                assert_abs_diff_eq!(quad[0].at(j, i), 2.0 * g.x(i), epsilon = 1e-13);
            }
            assert_eq!(lin[0].at(j, 0), 0.0);
            assert_eq!(lin[0].at(j, g.nx - 1), 0.0);
        }
        assert!(lin[1].max_abs() < 1e-13);
    }

    #[test]
    fn divergence_cases() {
        let g = unit(9, 2);
        let zero = SpatialField::zeros(&g);
        let c = divergence_c(&[SpatialField::constant(&g, 1.0), SpatialField::constant(&g, -2.0)])
            .unwrap();
        assert!(c.max_abs() < 1e-12);
        let d = divergence_c(&[SpatialField::from_fn(&g, |x, _| x), zero.clone()]).unwrap();
        for j in 0..g.ny {
            for i in 1..g.nx - 1 {
                assert_abs_diff_eq!(d.at(j, i), 1.0, epsilon = 1e-12);
            }
        }
        assert!(divergence_c(std::slice::from_ref(&zero)).is_err());
        assert!(divergence_c::<Ix2>(&[]).is_err());
    }

    #[test]
    fn divergence_of_zero_normal_flux_integrates_to_zero() {
        let g = unit(13, 2);
        let fx = SpatialField::from_fn(&g, |x, y| (PI * x).sin() * (1.0 + y * y) * 3.0);
        let fy = SpatialField::from_fn(&g, |x, y| (2.0 * PI * y).sin() * x.exp());
        let div = divergence_c(&[fx, fy]).unwrap();
        assert!(integrate_omega(&div).abs() < 1e-12);
    }

    #[test]
    fn time_derivative_cases() {
        let g = unit(3, 11);
        let c = time_deriv(&Field::constant(&g, 4.0));
        assert!(c.max_abs() < 1e-12);
        let lin = time_deriv(&Field::from_fn(&g, |_, _, t| t));
        assert!(lin.map(|v| v - 1.0).max_abs() < 1e-12);
        let quad = time_deriv(&Field::from_fn(&g, |_, _, t| t * t));
        let exact = Field::from_fn(&g, |_, _, t| 2.0 * t);
        assert!(quad.sub(&exact).max_abs() < 1e-12);
    }

    #[test]
    fn two_level_time_derivative_is_forward_difference() {
        let g = unit(3, 2);
        let d = time_deriv(&Field::from_fn(&g, |_, _, t| 3.0 * t + 1.0));
        assert!(d.map(|v| v - 3.0).max_abs() < 1e-12);
    }

    #[test]
    fn quadrature_cases() {
        assert_abs_diff_eq!(integrate_qt(&Field::constant(&unit(5, 4), 1.0)), 1.0, epsilon = 1e-14);
        let big = GridSpec::new_2d(7, 5, 3, 2.0, 2.0, 1.0).unwrap();
        assert_abs_diff_eq!(integrate_qt(&Field::constant(&big, 1.0)), 4.0, epsilon = 1e-14);
        let g = unit(6, 4);
        assert_abs_diff_eq!(integrate_qt(&Field::from_fn(&g, |x, _, _| x)), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(integrate_omega(&SpatialField::constant(&g, 2.5)), 2.5, epsilon = 1e-14);
    }

    #[test]
    fn line_ops_transpose_exactly() {
        let n = 7;
        let ops = [
            neumann_second_difference(n, 0.3),
            central_first_difference(n, 0.3),
            divergence_difference(n, 0.3),
            time_first_difference(n, 0.2),
            time_second_difference(n, 0.2),
        ];
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).sin()).collect();
        let r: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos() + 0.1).collect();
        for op in &ops {
            let mut ax = vec![0.0; n];
            let mut atr = vec![0.0; n];
            op.apply(&x, &mut ax);
            op.apply_transpose(&r, &mut atr);
            let lhs: f64 = ax.iter().zip(&r).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&atr).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn nesting() {
        let fine = unit(81, 321);
        assert!(fine.nests(&unit(21, 11)));
        assert!(fine.nests(&unit(11, 6)));
        assert!(!fine.nests(&unit(12, 11)));
    }
}
