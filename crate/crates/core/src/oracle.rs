//! Finite-difference reference solver for the 2D wave equation.
//!
//! Second-order leapfrog in time, five-point Laplacian in space, zero
//! initial velocity, homogeneous Dirichlet walls placed far enough out that
//! no reflection reaches a detector before the last requested time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BasisGrid, CoefficientImage, MeasurementGeometry};
use crate::kaiser_bessel::KaiserBessel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Spatial step `h`.
    pub spacing: f64,
    /// Time step `k`.
    pub time_step: f64,
    /// The domain is `[-L, L]²`; `L` is a multiple of `h`.
    pub half_width: f64,
}

impl FdConfig {
    /// Picks `k` as the largest stable step dividing the sampling interval
    /// of `geom`, and the smallest reflection-free half-width for sources in
    /// `[-source_extent, source_extent]²`.
    pub fn for_geometry(spacing: f64, geom: &MeasurementGeometry, source_extent: f64) -> Self {
        let dt = geom.time_step();
        let per_sample = (dt / (spacing / std::f64::consts::SQRT_2)).ceil().max(1.0);
        let time_step = dt / per_sample;
        // wall distance from the sources plus from the farthest detector
        let needed = 0.5 * (geom.horizon + source_extent + 1.0) + 4.0 * spacing;
        let half_width = (needed / spacing).ceil() * spacing;
        FdConfig {
            spacing,
            time_step,
            half_width,
        }
    }

    /// Same CFL ratio and domain with `h` and `k` halved.
    pub fn halved(&self) -> Self {
        FdConfig {
            spacing: 0.5 * self.spacing,
            time_step: 0.5 * self.time_step,
            half_width: self.half_width,
        }
    }

    pub fn cfl(&self) -> f64 {
        self.time_step / self.spacing
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing > 0.0 && self.time_step > 0.0 && self.half_width > 0.0) {
            return Err(Error::InvalidParameter(
                "FD spacing, time step and half-width must be positive".into(),
            ));
        }
        let ratio = self.cfl();
        if ratio > std::f64::consts::FRAC_1_SQRT_2 * (1.0 + 1e-12) {
            return Err(Error::CflViolation { ratio });
        }
        if self.nodes() < 5 {
            return Err(Error::InvalidParameter("FD grid needs at least 5 nodes".into()));
        }
        Ok(())
    }

    /// Nodes per axis.
    pub fn nodes(&self) -> usize {
        (2.0 * self.half_width / self.spacing).round() as usize + 1
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing
    }

    /// Samples `f` at every node, row-major with rows along `y`.
    pub fn sample<F: Fn([f64; 2]) -> f64>(&self, f: F) -> Vec<f64> {
        let n = self.nodes();
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            let y = self.coord(r);
            for c in 0..n {
                out[r * n + c] = f([self.coord(c), y]);
            }
        }
        out
    }

    /// `Σ x_i φ_i` sampled at the nodes.
    pub fn sample_blobs(&self, grid: &BasisGrid, x: &CoefficientImage) -> Result<Vec<f64>> {
        let kb = KaiserBessel::new(grid.kb)?;
        let n = self.nodes();
        let a = grid.kb.support_radius;
        let mut out = vec![0.0; n * n];
        let index = |v: f64| ((v + self.half_width) / self.spacing).floor();
        for (i, &xi) in x.values.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let c = grid.center(i);
            let c0 = index(c[0] - a).max(0.0) as usize;
            let c1 = (index(c[0] + a) + 1.0).min((n - 1) as f64) as usize;
            let r0 = index(c[1] - a).max(0.0) as usize;
            let r1 = (index(c[1] + a) + 1.0).min((n - 1) as f64) as usize;
            for r in r0..=r1 {
                let dy = self.coord(r) - c[1];
                for col in c0..=c1 {
                    let dx = self.coord(col) - c[0];
                    out[r * n + col] += xi * kb.eval_sq(dx * dx + dy * dy);
                }
            }
        }
        Ok(out)
    }
}

/// Bounding box `(r0, r1, c0, c1)` of the non-zero nodes.
fn support_box(field: &[f64], n: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for r in 0..n {
        for c in 0..n {
            if field[r * n + c] != 0.0 {
                bb = Some(match bb {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    bb
}

fn bilinear(field: &[f64], n: usize, cfg: &FdConfig, p: [f64; 2]) -> f64 {
    let fx = (p[0] + cfg.half_width) / cfg.spacing;
    let fy = (p[1] + cfg.half_width) / cfg.spacing;
    let c = (fx.floor() as usize).min(n - 2);
    let r = (fy.floor() as usize).min(n - 2);
    let wx = fx - c as f64;
    let wy = fy - r as f64;
    let f00 = field[r * n + c];
    let f01 = field[r * n + c + 1];
    let f10 = field[(r + 1) * n + c];
    let f11 = field[(r + 1) * n + c + 1];
    (1.0 - wy) * ((1.0 - wx) * f00 + wx * f01) + wy * ((1.0 - wx) * f10 + wx * f11)
}

struct Leapfrog<'a> {
    cfg: &'a FdConfig,
    n: usize,
    prev: Vec<f64>,
    cur: Vec<f64>,
    c2: f64,
    // active box, grows one node per step
    lo: usize,
    hi_r: usize,
    lo_c: usize,
    hi_c: usize,
    steps: usize,
}

impl<'a> Leapfrog<'a> {
    fn new(cfg: &'a FdConfig, initial: Vec<f64>) -> Self {
        let n = cfg.nodes();
        let (r0, r1, c0, c1) = support_box(&initial, n).unwrap_or((n / 2, n / 2, n / 2, n / 2));
        let c2 = cfg.cfl() * cfg.cfl();
        Leapfrog {
            cfg,
            n,
            prev: initial.clone(),
            cur: initial,
            c2,
            lo: r0,
            hi_r: r1,
            lo_c: c0,
            hi_c: c1,
            steps: 0,
        }
    }

    fn step(&mut self) {
        let n = self.n;
        self.lo = self.lo.saturating_sub(1).max(1);
        self.lo_c = self.lo_c.saturating_sub(1).max(1);
        self.hi_r = (self.hi_r + 1).min(n - 2);
        self.hi_c = (self.hi_c + 1).min(n - 2);
        // prev == cur before the first step, so halving c² there gives
        // p¹ = p⁰ + ½ c² Δp⁰ (zero initial velocity)
        let c2 = if self.steps == 0 { 0.5 * self.c2 } else { self.c2 };
        let (c0, c1) = (self.lo_c, self.hi_c);
        for r in self.lo..=self.hi_r {
            let row = r * n;
            let up = &self.cur[row - n + c0..=row - n + c1];
            let down = &self.cur[row + n + c0..=row + n + c1];
            let mid = &self.cur[row + c0 - 1..=row + c1 + 1];
            let out = &mut self.prev[row + c0..=row + c1];
            for (i, o) in out.iter_mut().enumerate() {
                let u = mid[i + 1];
                let lap = mid[i] + mid[i + 2] + up[i] + down[i] - 4.0 * u;
                *o = 2.0 * u - *o + c2 * lap;
            }
        }
        std::mem::swap(&mut self.prev, &mut self.cur);
        self.steps += 1;
    }

    /// Conserved discrete energy between the previous and current level.
    fn energy(&self) -> f64 {
        let n = self.n;
        let (p1, p0) = (&self.cur, &self.prev);
        let h2k2 = (self.cfg.spacing / self.cfg.time_step).powi(2);
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for r in 0..n {
            for c in 0..n {
                let i = r * n + c;
                kinetic += (p1[i] - p0[i]).powi(2);
                if c + 1 < n {
                    potential += (p1[i + 1] - p1[i]) * (p0[i + 1] - p0[i]);
                }
                if r + 1 < n {
                    potential += (p1[i + n] - p1[i]) * (p0[i + n] - p0[i]);
                }
            }
        }
        h2k2 * kinetic + potential
    }
}

fn check_support(
    initial: &[f64],
    detectors: &[[f64; 2]],
    t_max: f64,
    cfg: &FdConfig,
) -> Result<()> {
    let n = cfg.nodes();
    let Some((r0, r1, c0, c1)) = support_box(initial, n) else {
        return Ok(());
    };
    if r0 < 2 || c0 < 2 || r1 + 2 >= n || c1 + 2 >= n {
        return Err(Error::SupportTooClose {
            arrival: 0.0,
            horizon: t_max,
        });
    }
    let l = cfg.half_width;
    let (xmin, xmax, ymin, ymax) = (cfg.coord(c0), cfg.coord(c1), cfg.coord(r0), cfg.coord(r1));
    let mut arrival = f64::INFINITY;
    for d in detectors {
        arrival = arrival
            .min((l - xmax) + (l - d[0]))
            .min((xmin + l) + (d[0] + l))
            .min((l - ymax) + (l - d[1]))
            .min((ymin + l) + (d[1] + l));
    }
    if arrival <= t_max {
        return Err(Error::SupportTooClose {
            arrival,
            horizon: t_max,
        });
    }
    Ok(())
}

/// Pressure traces `[detector][time]` for initial pressure `initial`
/// sampled on the nodes of `cfg`.
pub fn fd_wave_solve(
    initial: &[f64],
    detectors: &[[f64; 2]],
    times: &[f64],
    cfg: &FdConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n = cfg.nodes();
    if initial.len() != n * n {
        return Err(Error::DimensionMismatch {
            context: "FD initial field",
            expected: n * n,
            actual: initial.len(),
        });
    }
    if times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::InvalidParameter("times must be non-negative".into()));
    }
    let t_max = times.iter().copied().fold(0.0, f64::max);
    check_support(initial, detectors, t_max, cfg)?;
    for d in detectors {
        if d[0].abs() >= cfg.half_width - cfg.spacing || d[1].abs() >= cfg.half_width - cfg.spacing {
            return Err(Error::InvalidParameter("detector outside the FD domain".into()));
        }
    }

    let last_step = (t_max / cfg.time_step - 1e-9).ceil() as usize;
    let mut solver = Leapfrog::new(cfg, initial.to_vec());
    // samples[step][detector]
    let mut samples = Vec::with_capacity(last_step + 1);
    samples.push(detectors.iter().map(|d| bilinear(&solver.cur, n, cfg, *d)).collect::<Vec<_>>());
    while solver.steps < last_step {
        solver.step();
        samples.push(detectors.iter().map(|d| bilinear(&solver.cur, n, cfg, *d)).collect());
    }

    let mut traces = vec![vec![0.0; times.len()]; detectors.len()];
    for (j, &t) in times.iter().enumerate() {
        let s = t / cfg.time_step;
        let nearest = s.round();
        let (lo, hi, w) = if (s - nearest).abs() < 1e-6 {
            let k = (nearest as usize).min(last_step);
            (k, k, 0.0)
        } else {
            let k = (s.floor() as usize).min(last_step.saturating_sub(1));
            (k, k + 1, s - k as f64)
        };
        for (trace, (a, b)) in traces
            .iter_mut()
            .zip(samples[lo].iter().zip(&samples[hi]))
        {
            trace[j] = (1.0 - w) * a + w * b;
        }
    }
    Ok(traces)
}

/// Energy after each step, `steps + 1` values starting from the first step.
pub fn fd_energy_trace(initial: &[f64], cfg: &FdConfig, steps: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut solver = Leapfrog::new(cfg, initial.to_vec());
    solver.lo = 1;
    solver.lo_c = 1;
    solver.hi_r = cfg.nodes() - 2;
    solver.hi_c = cfg.nodes() - 2;
    let mut out = Vec::with_capacity(steps);
    while solver.steps < steps {
        solver.step();
        out.push(solver.energy());
    }
    Ok(out)
}

/// FD approximation of `A x`, laid out like a system-matrix column.
pub fn oracle_apply(
    x: &CoefficientImage,
    grid: &BasisGrid,
    geom: &MeasurementGeometry,
    cfg: &FdConfig,
) -> Result<Vec<f64>> {
    let initial = cfg.sample_blobs(grid, x)?;
    let traces = fd_wave_solve(&initial, &geom.detector_positions(), &geom.times(), cfg)?;
    Ok(traces.into_iter().flatten().collect())
}

/// Richardson extrapolation `(4 A_{h/2} x - A_h x) / 3` of [`oracle_apply`],
/// cancelling the leading `O(h²)` error term.
pub fn oracle_apply_extrapolated(
    x: &CoefficientImage,
    grid: &BasisGrid,
    geom: &MeasurementGeometry,
    cfg: &FdConfig,
) -> Result<Vec<f64>> {
    let coarse = oracle_apply(x, grid, geom, cfg)?;
    let fine = oracle_apply(x, grid, geom, &cfg.halved())?;
    Ok(coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect())
}

/// FD approximation of system-matrix column `index`.
pub fn oracle_column(
    index: usize,
    grid: &BasisGrid,
    geom: &MeasurementGeometry,
    cfg: &FdConfig,
) -> Result<Vec<f64>> {
    oracle_apply(&CoefficientImage::unit(grid.side, index), grid, geom, cfg)
}
