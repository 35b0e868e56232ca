//! System matrix assembly.
//!
//! Every column is a translate of the same radially symmetric problem, so
//! the pressure `p(d, t_j)` is tabulated once over distance and each entry
//! is a linear interpolation in `d = |s_n - r_i|`.

use std::fs::OpenOptions;
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter, Fnv1a, MATRIX_MAGIC};
use crate::error::{check_len, Error, Result};
use crate::geometry::{BasisGrid, CoefficientImage, Measurement, MeasurementGeometry};
use crate::profile::{quadrature_residual, ProfileOptions, RadialProfiler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssemblyOptions {
    /// Distance samples per time step in the profile table.
    pub table_resolution: usize,
    pub profile: ProfileOptions,
    /// Largest accepted linear-interpolation error, relative to the table peak.
    pub interpolation_tolerance: f64,
    /// Every n-th table distance is recomputed with the refined rule to
    /// estimate the quadrature error.
    pub quadrature_check_stride: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions {
            table_resolution: 8,
            profile: ProfileOptions::default(),
            interpolation_tolerance: 0.02,
            quadrature_check_stride: 16,
        }
    }
}

/// `p(k·spacing, t_j)` for all table distances `k` and sample times `j`.
#[derive(Debug, Clone)]
pub struct ProfileTable {
    pub spacing: f64,
    pub times: Vec<f64>,
    /// Row-major `[distance][time]`.
    pub values: Vec<f64>,
    support_radius: f64,
}

impl ProfileTable {
    pub fn build(
        grid: &BasisGrid,
        geom: &MeasurementGeometry,
        opts: &AssemblyOptions,
    ) -> Result<Self> {
        grid.validate()?;
        geom.validate()?;
        if opts.table_resolution < 2 {
            return Err(Error::InvalidParameter(format!(
                "table resolution must be at least 2 samples per time step, got {}",
                opts.table_resolution
            )));
        }
        let a = grid.kb.support_radius;
        let dt = geom.time_step();
        let spacing = dt / opts.table_resolution as f64;
        let max_distance = max_distance(grid, geom) + a;
        let count = (max_distance / spacing).ceil() as usize + 2;
        let times = geom.times();
        let step = dt / opts.profile.derivative_refinement.max(1) as f64;

        let profiler = RadialProfiler::new(grid.kb, opts.profile.rule)?;
        let nt = times.len();
        let mut values = vec![0.0; count * nt];
        values
            .par_chunks_mut(nt)
            .enumerate()
            .for_each(|(k, row)| {
                let d = k as f64 * spacing;
                for (v, &t) in row.iter_mut().zip(&times) {
                    *v = profiler.pressure(d, t, step);
                }
            });

        let stride = opts.quadrature_check_stride.max(1);
        let refined = RadialProfiler::new(grid.kb, opts.profile.rule.refined())?;
        let residual = (0..count)
            .step_by(stride)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&k| {
                let d = k as f64 * spacing;
                let fine = refined.trace(d, &times, step);
                let coarse = &values[k * nt..(k + 1) * nt];
                quadrature_residual(coarse, &fine)
            })
            .reduce(|| 0.0, f64::max);
        if residual > opts.profile.tolerance {
            return Err(Error::QuadratureNonConvergence {
                residual,
                tolerance: opts.profile.tolerance,
            });
        }

        let table = ProfileTable {
            spacing,
            times,
            values,
            support_radius: a,
        };
        let bound = table.interpolation_error_bound();
        if bound > opts.interpolation_tolerance {
            return Err(Error::InterpolationTooCoarse {
                bound,
                tolerance: opts.interpolation_tolerance,
            });
        }
        Ok(table)
    }

    pub fn distances(&self) -> usize {
        self.values.len() / self.times.len()
    }

    /// `max |Δ²p| / 8` over the table relative to its peak: the usual bound
    /// for piecewise-linear interpolation with second differences standing
    /// in for `h² p''`.
    pub fn interpolation_error_bound(&self) -> f64 {
        let nt = self.times.len();
        let nd = self.distances();
        let peak = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 || nd < 3 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for k in 1..nd - 1 {
            for j in 0..nt {
                let d2 = self.values[(k + 1) * nt + j] - 2.0 * self.values[k * nt + j]
                    + self.values[(k - 1) * nt + j];
                worst = worst.max(d2.abs());
            }
        }
        worst / 8.0 / peak
    }

    /// Fills `out[j] = p(d, t_j)`.
    pub fn interpolate_into(&self, d: f64, out: &mut [f64]) {
        let nt = self.times.len();
        let pos = d / self.spacing;
        let k = (pos.floor() as usize).min(self.distances() - 2);
        let w = pos - k as f64;
        let lo = &self.values[k * nt..(k + 1) * nt];
        let hi = &self.values[(k + 1) * nt..(k + 2) * nt];
        let arrival = d - self.support_radius;
        for j in 0..nt {
            out[j] = if self.times[j] < arrival {
                0.0
            } else {
                (1.0 - w) * lo[j] + w * hi[j]
            };
        }
    }
}

fn max_distance(grid: &BasisGrid, geom: &MeasurementGeometry) -> f64 {
    let corners = [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]];
    geom.detector_positions()
        .iter()
        .flat_map(|s| {
            corners
                .iter()
                .map(move |c| (s[0] - c[0]).hypot(s[1] - c[1]))
        })
        .fold(0.0, f64::max)
        .max(grid.spacing())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMetadata {
    pub grid: BasisGrid,
    pub geometry: MeasurementGeometry,
    pub table_resolution: usize,
}

/// Dense forward operator; rows follow [`MeasurementGeometry::row`], columns
/// follow the [`BasisGrid`] index.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    pub meta: MatrixMetadata,
    pub entries: DMatrix<f64>,
}

fn fill_column(
    table: &ProfileTable,
    grid: &BasisGrid,
    detectors: &[[f64; 2]],
    nt: usize,
    index: usize,
    column: &mut [f64],
) {
    let c = grid.center(index);
    for (n, s) in detectors.iter().enumerate() {
        let d = (s[0] - c[0]).hypot(s[1] - c[1]);
        table.interpolate_into(d, &mut column[n * nt..(n + 1) * nt]);
    }
}

impl SystemMatrix {
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let rows = self.rows();
        &self.entries.as_slice()[i * rows..(i + 1) * rows]
    }

    /// FNV-1a over the entries in row-major order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                h.update(&self.entries[(r, c)].to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ContainerWriter::create(path, MATRIX_MAGIC)?;
        w.u64(self.rows() as u64)?;
        w.u64(self.cols() as u64)?;
        let mut row = vec![0.0; self.cols()];
        for r in 0..self.rows() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.entries[(r, c)];
            }
            w.f64s(&row)?;
        }
        w.text(&serde_json::to_string(&self.meta)?)?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ContainerReader::open(path, MATRIX_MAGIC)?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let data = r.f64s(rows * cols)?;
        let meta: MatrixMetadata = serde_json::from_str(&r.text()?)?;
        if meta.grid.len() != cols || meta.geometry.len() != rows {
            return Err(Error::container(
                r.path(),
                "header dimensions disagree with metadata",
            ));
        }
        r.expect_end()?;
        Ok(SystemMatrix {
            meta,
            entries: DMatrix::from_row_slice(rows, cols, &data),
        })
    }
}

/// Assembles the `(N_t·N_s) × N²` system matrix in memory.
pub fn assemble_system_matrix(
    grid: &BasisGrid,
    geom: &MeasurementGeometry,
    opts: &AssemblyOptions,
) -> Result<SystemMatrix> {
    let table = ProfileTable::build(grid, geom, opts)?;
    Ok(assemble_from_table(&table, grid, geom, opts.table_resolution))
}

pub fn assemble_from_table(
    table: &ProfileTable,
    grid: &BasisGrid,
    geom: &MeasurementGeometry,
    table_resolution: usize,
) -> SystemMatrix {
    let rows = geom.len();
    let cols = grid.len();
    let nt = geom.time_samples;
    let detectors = geom.detector_positions();
    let mut entries = DMatrix::<f64>::zeros(rows, cols);
    entries
        .as_mut_slice()
        .par_chunks_mut(rows)
        .enumerate()
        .for_each(|(i, column)| fill_column(table, grid, &detectors, nt, i, column));
    SystemMatrix {
        meta: MatrixMetadata {
            grid: *grid,
            geometry: *geom,
            table_resolution,
        },
        entries,
    }
}

/// Writes the matrix container directly, computing `block_cols` columns at
/// a time so the full matrix never has to fit in memory.
pub fn assemble_to_file(
    grid: &BasisGrid,
    geom: &MeasurementGeometry,
    opts: &AssemblyOptions,
    block_cols: usize,
    path: &Path,
) -> Result<()> {
    let table = ProfileTable::build(grid, geom, opts)?;
    let rows = geom.len();
    let cols = grid.len();
    let nt = geom.time_samples;
    let block_cols = block_cols.clamp(1, cols);
    let detectors = geom.detector_positions();
    let header = 7 + 16;
    let payload = (rows * cols * 8) as u64;

    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)?;
    file.write_all(MATRIX_MAGIC)?;
    file.write_all(&(rows as u64).to_le_bytes())?;
    file.write_all(&(cols as u64).to_le_bytes())?;
    file.set_len(header as u64 + payload)?;

    let mut block = vec![0.0; rows * block_cols];
    let mut segment = Vec::with_capacity(block_cols * 8);
    for start in (0..cols).step_by(block_cols) {
        let width = block_cols.min(cols - start);
        block[..rows * width]
            .par_chunks_mut(rows)
            .enumerate()
            .for_each(|(c, column)| {
                fill_column(&table, grid, &detectors, nt, start + c, column)
            });
        for r in 0..rows {
            segment.clear();
            for c in 0..width {
                segment.extend_from_slice(&block[c * rows + r].to_le_bytes());
            }
            file.seek(SeekFrom::Start((header + (r * cols + start) * 8) as u64))?;
            file.write_all(&segment)?;
        }
    }
    let meta = serde_json::to_string(&MatrixMetadata {
        grid: *grid,
        geometry: *geom,
        table_resolution: opts.table_resolution,
    })?;
    file.seek(SeekFrom::Start(header as u64 + payload))?;
    file.write_all(&(meta.len() as u64).to_le_bytes())?;
    file.write_all(meta.as_bytes())?;
    file.flush()?;
    Ok(())
}

/// Noise-free data `A x`.
pub fn forward_apply(a: &SystemMatrix, x: &CoefficientImage) -> Result<Measurement> {
    check_len("forward_apply input", a.cols(), x.values.len())?;
    let xv = DVector::from_column_slice(&x.values);
    let y = &a.entries * xv;
    Ok(Measurement::clean(y.as_slice().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kaiser_bessel::KaiserBesselParams;

    use std::sync::OnceLock;

    fn small() -> (BasisGrid, MeasurementGeometry) {
        (
            BasisGrid::new(6, KaiserBesselParams::default()).unwrap(),
            MeasurementGeometry::new(8, 96, 3.75).unwrap(),
        )
    }

    fn small_matrix() -> &'static SystemMatrix {
        static A: OnceLock<SystemMatrix> = OnceLock::new();
        A.get_or_init(|| {
            let (grid, geom) = small();
            assemble_system_matrix(&grid, &geom, &AssemblyOptions::default()).unwrap()
        })
    }

    #[test]
    fn full_scale_dimensions() {
        let grid = BasisGrid::new(128, KaiserBesselParams::default()).unwrap();
        let geom = MeasurementGeometry::full_scale();
        assert_eq!((geom.len(), grid.len()), (150_400, 16_384));
    }

    #[test]
    fn causal_zeros_and_finite_entries() {
        let (grid, geom) = small();
        let a = small_matrix();
        assert_eq!((a.rows(), a.cols()), (geom.len(), grid.len()));
        assert!(a.entries.iter().all(|v| v.is_finite()));
        let mut nonzero = 0;
        for i in 0..grid.len() {
            let c = grid.center(i);
            for n in 0..geom.detectors {
                let s = geom.detector(n);
                let d = (s[0] - c[0]).hypot(s[1] - c[1]);
                for j in 0..geom.time_samples {
                    let v = a.entries[(geom.row(n, j), i)];
                    if geom.time(j) < d - grid.kb.support_radius {
                        assert_eq!(v, 0.0);
                    } else if v != 0.0 {
                        nonzero += 1;
                    }
                }
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn forward_apply_is_linear_and_selects_columns() {
        let (grid, _) = small();
        let a = small_matrix();
        let zero = forward_apply(a, &CoefficientImage::zeros(grid.side)).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        let e3 = forward_apply(a, &CoefficientImage::unit(grid.side, 3)).unwrap();
        assert_eq!(e3.values, a.column(3));
        let mut x = CoefficientImage::unit(grid.side, 3);
        x.values[10] = 1.0;
        let y = forward_apply(a, &x).unwrap();
        for (r, v) in y.values.iter().enumerate() {
            assert!((v - (a.column(3)[r] + a.column(10)[r])).abs() <= 1e-15 * v.abs().max(1.0));
        }
        assert!(forward_apply(a, &CoefficientImage::zeros(5)).is_err());
    }

    #[test]
    fn equal_distance_columns_agree() {
        // Centers mirrored across x = 0 see mirrored detectors identically.
        let (grid, geom) = small();
        let a = small_matrix();
        let nt = geom.time_samples;
        let side = grid.side;
        for row in 0..side {
            let left = row * side;
            let right = row * side + side - 1;
            for n in 0..geom.detectors - 1 {
                // detector n at angle (n+1)π/N_s mirrors to N_s-2-n
                let m = geom.detectors - 2 - n;
                let l = &a.column(left)[n * nt..(n + 1) * nt];
                let r = &a.column(right)[m * nt..(m + 1) * nt];
                for (x, y) in l.iter().zip(r) {
                    assert!((x - y).abs() < 1e-12, "row {row} n {n}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_round_trips_through_file() {
        let (grid, geom) = small();
        let opts = AssemblyOptions::default();
        let a = small_matrix();
        let b = assemble_system_matrix(&grid, &geom, &opts).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        a.save(&p1).unwrap();
        assemble_to_file(&grid, &geom, &opts, 5, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = SystemMatrix::load(&p1).unwrap();
        assert_eq!(back.entries, a.entries);
        assert_eq!(back.meta, a.meta);
    }

    #[test]
    fn coarse_table_is_rejected() {
        let (grid, geom) = small();
        let opts = AssemblyOptions {
            table_resolution: 1,
            ..Default::default()
        };
        assert!(matches!(
            assemble_system_matrix(&grid, &geom, &opts),
            Err(Error::InvalidParameter(_))
        ));
        let opts = AssemblyOptions {
            table_resolution: 2,
            interpolation_tolerance: 1e-6,
            ..Default::default()
        };
        assert!(matches!(
            assemble_system_matrix(&grid, &geom, &opts),
            Err(Error::InterpolationTooCoarse { .. })
        ));
    }
}
