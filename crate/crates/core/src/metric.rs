//! Riesz map of the discrete Sobolev inner product on free nodes.
//!
//! The Gram operator of the regularizer is a Kronecker sum of one-dimensional
//! weighted grams, and the constraints remove whole time levels, so the
//! masked system is solved exactly by per-axis generalized eigenbases.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis, Zip};

use crate::error::{MfgError, Result};
use crate::functional::ShiftedPair;
use crate::grid::{
    central_first_difference, neumann_second_difference, time_first_difference,
    time_second_difference, Field, GridSpec, LineOp,
};

/// Generalized eigenbasis `K V = W V diag(eig)` with `V^T W V = I`,
/// restricted to the indices `offset .. offset + len`.
#[derive(Debug, Clone)]
struct AxisBasis {
    offset: usize,
    v: Array2<f64>,
    eig: Array1<f64>,
}

fn weighted_gram(w: &Array1<f64>, ops: &[LineOp]) -> Array2<f64> {
    let n = w.len();
    let mut k = Array2::zeros((n, n));
    for op in ops {
        let d = op.to_dense(n);
        let wd = &d * &w.view().insert_axis(Axis(1));
        k = k + d.t().dot(&wd);
    }
    k
}

impl AxisBasis {
    fn new(w: &Array1<f64>, k: &Array2<f64>, offset: usize, len: usize) -> Result<Self> {
        if len == 0 {
            return Ok(Self {
                offset,
                v: Array2::zeros((0, 0)),
                eig: Array1::zeros(0),
            });
        }
        let sw: Vec<f64> = (0..len).map(|i| w[offset + i].sqrt()).collect();
        let c = DMatrix::from_fn(len, len, |i, j| {
            let (a, b) = (i.min(j), i.max(j));
            k[[offset + a, offset + b]] / (sw[a] * sw[b])
        });
        let eig = SymmetricEigen::try_new(c, 1e-14, 10_000)
            .ok_or_else(|| MfgError::Numeric("eigendecomposition did not converge".into()))?;
        let v = Array2::from_shape_fn((len, len), |(i, c)| eig.eigenvectors[(i, c)] / sw[i]);
        let eig = Array1::from_iter(eig.eigenvalues.iter().map(|&l| l.max(0.0)));
        Ok(Self { offset, v, eig })
    }

    fn len(&self) -> usize {
        self.eig.len()
    }
}

fn transform(a: &Array3<f64>, m: &Array2<f64>, axis: usize) -> Array3<f64> {
    let mut shape = [a.shape()[0], a.shape()[1], a.shape()[2]];
    shape[axis] = m.nrows();
    let mut out = Array3::zeros(shape);
    for (lane, mut dst) in a.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        dst.assign(&m.dot(&lane));
    }
    out
}

/// Exact inverse of the regularizer's Gram operator restricted to the free
/// nodes of a shifted pair.
#[derive(Debug, Clone)]
pub struct SobolevMetric {
    grid: GridSpec,
    x: AxisBasis,
    y: AxisBasis,
    /// Free levels of `v`: all but the last.
    t_v: AxisBasis,
    /// Free levels of `w`: all but the first and last.
    t_w: AxisBasis,
}

impl SobolevMetric {
    pub fn new(grid: &GridSpec, order: usize) -> Result<Self> {
        grid.validate()?;
        let second = order >= 2;
        let wx = grid.x_weights();
        let mut ops = vec![central_first_difference(grid.nx, grid.hx())];
        if second {
            ops.push(neumann_second_difference(grid.nx, grid.hx()));
        }
        let x = AxisBasis::new(&wx, &weighted_gram(&wx, &ops), 0, grid.nx)?;

        let wy = grid.y_weights();
        let ky = if grid.dim == 2 {
            let mut ops = vec![central_first_difference(grid.ny, grid.hy())];
            if second {
                ops.push(neumann_second_difference(grid.ny, grid.hy()));
            }
            weighted_gram(&wy, &ops)
        } else {
            Array2::zeros((1, 1))
        };
        let y = AxisBasis::new(&wy, &ky, 0, wy.len())?;

        let wt = grid.time_weights();
        let mut ops = vec![time_first_difference(grid.nt, grid.dt())];
        if second {
            ops.push(time_second_difference(grid.nt, grid.dt()));
        }
        let kt = weighted_gram(&wt, &ops);
        let t_v = AxisBasis::new(&wt, &kt, 0, grid.nt - 1)?;
        let t_w = AxisBasis::new(&wt, &kt, 1, grid.nt - 2)?;
        Ok(Self {
            grid: *grid,
            x,
            y,
            t_v,
            t_w,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn solve(&self, g: &Field, t: &AxisBasis) -> Field {
        let mut out = Array3::zeros((self.grid.nt, self.grid.ny, self.grid.nx));
        if t.len() > 0 {
            let range = t.offset..t.offset + t.len();
            let sub: ArrayView3<f64> = g.values().slice(s![range.clone(), .., ..]);
            let mut c = transform(&sub.to_owned(), &t.v.t().to_owned(), 0);
            c = transform(&c, &self.y.v.t().to_owned(), 1);
            c = transform(&c, &self.x.v.t().to_owned(), 2);
            Zip::indexed(&mut c).for_each(|(a, b, d), v| {
                *v /= 1.0 + t.eig[a] + self.y.eig[b] + self.x.eig[d];
            });
            c = transform(&c, &t.v, 0);
            c = transform(&c, &self.y.v, 1);
            c = transform(&c, &self.x.v, 2);
            out.slice_mut(s![range, .., ..]).assign(&c);
        }
        Field::from_values_unchecked(&self.grid, out)
    }

    /// Representative of a nodal gradient in the Sobolev inner product.
    pub fn riesz(&self, grad: &ShiftedPair) -> ShiftedPair {
        ShiftedPair {
            v: self.solve(&grad.v, &self.t_v),
            w: self.solve(&grad.w, &self.t_w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::sobolev_gram;

    fn check_inverse(grid: &GridSpec, order: usize) {
        let metric = SobolevMetric::new(grid, order).unwrap();
        let mut g = ShiftedPair {
            v: Field::from_fn(grid, |x, y, t| (3.0 * x).sin() + y * t + 1.0),
            w: Field::from_fn(grid, |x, y, t| x * x - (2.0 * y).cos() * t),
        };
        g.enforce_constraints();
        let r = metric.riesz(&g);
        assert!(r.is_admissible());
        let mut back = ShiftedPair {
            v: sobolev_gram(&r.v, order),
            w: sobolev_gram(&r.w, order),
        };
        back.enforce_constraints();
        let scale = g.dot(&g).sqrt();
        let mut diff = back;
        diff.axpy(-1.0, &g);
        assert!(diff.dot(&diff).sqrt() < 1e-9 * scale, "order {order}");
    }

    #[test]
    fn inverts_the_masked_gram() {
        check_inverse(&GridSpec::unit_square(7, 5).unwrap(), 2);
        check_inverse(&GridSpec::new_2d(6, 9, 4, 1.0, 2.0, 0.5).unwrap(), 1);
        check_inverse(&GridSpec::new_1d(11, 6, 1.0, 1.0).unwrap(), 2);
    }

    #[test]
    fn two_levels_leave_w_without_freedom() {
        let g = GridSpec::unit_square(5, 2).unwrap();
        let metric = SobolevMetric::new(&g, 2).unwrap();
        let grad = ShiftedPair {
            v: Field::constant(&g, 1.0),
            w: Field::constant(&g, 1.0),
        };
        let r = metric.riesz(&grad);
        assert_eq!(r.w.max_abs(), 0.0);
    }
}
