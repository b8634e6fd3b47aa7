//! CSV and JSON persistence of fields and datasets.
//!
//! A spatial field is one CSV file with one row per `y` node and one column
//! per `x` node. A space-time field is a set of files `{name}_t{k:04}.csv`,
//! one per time level. Numbers carry 17 significant digits.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};
use crate::forward::{Dataset, Truth};
use crate::grid::{Field, GridSpec, SpatialField};
use crate::model::{Kernel, MfgCoefficients};

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub(crate) fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_matrix(path: &Path, rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..rows {
        w.write_record((0..cols).map(|c| fmt_num(at(r, c))))?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Array2::zeros((rows, cols));
    let mut r = 0;
    for rec in rd.records() {
        let rec = rec?;
        if r >= rows || rec.len() != cols {
            return Err(MfgError::GridMismatch(format!(
                "{}: expected {rows}x{cols} values",
                path.display()
            )));
        }
        for (c, s) in rec.iter().enumerate() {
            out[[r, c]] = s.trim().parse::<f64>().map_err(|e| {
                MfgError::InvalidField(format!("{}: bad number {s:?}: {e}", path.display()))
            })?;
        }
        r += 1;
    }
    if r != rows {
        return Err(MfgError::GridMismatch(format!(
            "{}: expected {rows} rows, found {r}",
            path.display()
        )));
    }
    Ok(out)
}

pub fn write_spatial_csv(path: &Path, f: &SpatialField) -> Result<()> {
    let v = f.values();
    write_matrix(path, v.nrows(), v.ncols(), |r, c| v[[r, c]])
}

pub fn read_spatial_csv(path: &Path, grid: &GridSpec) -> Result<SpatialField> {
    let vals = read_matrix(path, grid.ny, grid.nx)?;
    SpatialField::from_values(grid, vals)
}

pub fn level_path(dir: &Path, name: &str, k: usize) -> PathBuf {
    dir.join(format!("{name}_t{k:04}.csv"))
}

/// Writes every time level of `f` into `dir`.
pub fn write_field(dir: &Path, name: &str, f: &Field) -> Result<()> {
    fs::create_dir_all(dir)?;
    for k in 0..f.grid().nt {
        write_spatial_csv(&level_path(dir, name, k), &f.level(k))?;
    }
    Ok(())
}

pub fn read_field(dir: &Path, name: &str, grid: &GridSpec) -> Result<Field> {
    let mut vals = Array3::zeros((grid.nt, grid.ny, grid.nx));
    for k in 0..grid.nt {
        let level = read_matrix(&level_path(dir, name, k), grid.ny, grid.nx)?;
        vals.index_axis_mut(ndarray::Axis(0), k).assign(&level);
    }
    Field::from_values(grid, vals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelRecord {
    Constant { value: f64 },
    /// Factors stored as `kernel_left.csv` and `kernel_right.csv`.
    Separable,
    /// Matrix stored as `kernel_dense.csv`.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub grid: GridSpec,
    pub beta: f64,
    pub kernel: KernelRecord,
    pub has_truth: bool,
}

/// Writes a dataset directory: `manifest.json`, the boundary data, the
/// coefficient fields and, when present, the truth.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    fs::create_dir_all(dir)?;
    let c = &data.coeffs;
    let kernel = match &c.kernel {
        Kernel::Constant(value) => KernelRecord::Constant { value: *value },
        Kernel::Separable { left, right } => {
            write_spatial_csv(&dir.join("kernel_left.csv"), left)?;
            write_spatial_csv(&dir.join("kernel_right.csv"), right)?;
            KernelRecord::Separable
        }
        Kernel::Dense(m) => {
            write_matrix(&dir.join("kernel_dense.csv"), m.nrows(), m.ncols(), |r, k| m[[r, k]])?;
            KernelRecord::Dense
        }
    };
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        grid: *data.grid(),
        beta: c.beta,
        kernel,
        has_truth: data.truth.is_some(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_spatial_csv(&dir.join("u_terminal.csv"), &data.u_terminal)?;
    write_spatial_csv(&dir.join("p_initial.csv"), &data.p_initial)?;
    write_spatial_csv(&dir.join("p_terminal.csv"), &data.p_terminal)?;
    write_field(&dir.join("hamiltonian"), "s", &c.hamiltonian)?;
    write_field(&dir.join("local"), "f", &c.local)?;
    write_field(&dir.join("source_hjb"), "f1", &c.source_hjb)?;
    write_field(&dir.join("source_fp"), "f2", &c.source_fp)?;
    if let Some(t) = &data.truth {
        write_field(&dir.join("truth_u"), "u", &t.u)?;
        write_field(&dir.join("truth_p"), "p", &t.p)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(MfgError::Config(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let g = manifest.grid;
    g.validate()?;
    let kernel = match manifest.kernel {
        KernelRecord::Constant { value } => Kernel::Constant(value),
        KernelRecord::Separable => Kernel::Separable {
            left: read_spatial_csv(&dir.join("kernel_left.csv"), &g)?,
            right: read_spatial_csv(&dir.join("kernel_right.csv"), &g)?,
        },
        KernelRecord::Dense => {
            let n = g.space_len();
            Kernel::Dense(read_matrix(&dir.join("kernel_dense.csv"), n, n)?)
        }
    };
    let coeffs = MfgCoefficients::new(
        manifest.beta,
        read_field(&dir.join("hamiltonian"), "s", &g)?,
        read_field(&dir.join("local"), "f", &g)?,
        kernel,
        read_field(&dir.join("source_hjb"), "f1", &g)?,
        read_field(&dir.join("source_fp"), "f2", &g)?,
    )?;
    let truth = if manifest.has_truth {
        Some(Truth {
            u: read_field(&dir.join("truth_u"), "u", &g)?,
            p: read_field(&dir.join("truth_p"), "p", &g)?,
        })
    } else {
        None
    };
    let data = Dataset {
        u_terminal: read_spatial_csv(&dir.join("u_terminal.csv"), &g)?,
        p_initial: read_spatial_csv(&dir.join("p_initial.csv"), &g)?,
        p_terminal: read_spatial_csv(&dir.join("p_terminal.csv"), &g)?,
        coeffs,
        truth,
    };
    data.validate()?;
    Ok(data)
}
