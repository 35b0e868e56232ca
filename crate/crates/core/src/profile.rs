//! Pressure trace of a single centered blob seen from distance `d`.
//!
//! For the 2D wave equation with `c = 1`, initial pressure `φ` and zero
//! initial velocity, the pressure at a point `s` is `p(t) = W'(t)` with
//!
//! ```text
//! W(t) = 1/(2π) ∫_0^t ρ C(ρ) / sqrt(t² - ρ²) dρ,   C(ρ) = ∫_{|ω|=1} φ(s + ρω) dω.
//! ```
//!
//! The substitution `ρ = t sin θ` removes the square-root singularity, so
//! `W(t) = 1/(2π) ∫ t sin θ · C(t sin θ) dθ`. Only `ρ ∈ (d-a, d+a)` contributes,
//! and for those radii `C` is an integral over the arc of the circle that
//! crosses the blob. Both integrals use composite Gauss-Legendre; the time
//! derivative is a fourth-order central difference.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kaiser_bessel::{KaiserBessel, KaiserBesselParams};
use crate::quadrature::{composite, gauss_legendre};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub theta_panels: usize,
    pub theta_nodes: usize,
    pub arc_nodes: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule {
            theta_panels: 4,
            theta_nodes: 8,
            arc_nodes: 16,
        }
    }
}

impl QuadratureRule {
    /// The rule used to estimate the error of `self`.
    pub fn refined(&self) -> Self {
        QuadratureRule {
            theta_panels: self.theta_panels * 2,
            theta_nodes: self.theta_nodes,
            arc_nodes: self.arc_nodes * 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub rule: QuadratureRule,
    /// Largest accepted quadrature residual, relative to the trace peak.
    pub tolerance: f64,
    /// Derivative step is the sampling interval divided by this.
    pub derivative_refinement: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            rule: QuadratureRule::default(),
            tolerance: 1e-3,
            derivative_refinement: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RadialProfiler {
    kb: KaiserBessel,
    rule: QuadratureRule,
    theta_gl: (Vec<f64>, Vec<f64>),
    arc_gl: (Vec<f64>, Vec<f64>),
}

impl RadialProfiler {
    pub fn new(params: KaiserBesselParams, rule: QuadratureRule) -> Result<Self> {
        if rule.theta_panels == 0 || rule.theta_nodes == 0 || rule.arc_nodes == 0 {
            return Err(Error::InvalidParameter(
                "quadrature rule needs at least one node and panel".into(),
            ));
        }
        Ok(RadialProfiler {
            kb: KaiserBessel::new(params)?,
            rule,
            theta_gl: gauss_legendre(rule.theta_nodes),
            arc_gl: gauss_legendre(rule.arc_nodes),
        })
    }

    pub fn support_radius(&self) -> f64 {
        self.kb.support_radius()
    }

    /// `C(ρ)`: integral of the blob over the circle of radius `rho` around a
    /// point at distance `d` from the blob center.
    pub fn circle_integral(&self, d: f64, rho: f64) -> f64 {
        let a = self.kb.support_radius();
        if d < 1e-12 || rho < 1e-12 {
            let r = d + rho;
            return 2.0 * PI * self.kb.eval_sq(r * r);
        }
        let cos_max = (d * d + rho * rho - a * a) / (2.0 * d * rho);
        if cos_max >= 1.0 {
            return 0.0;
        }
        let psi_max = if cos_max <= -1.0 { PI } else { cos_max.acos() };
        let base = d * d + rho * rho;
        let cross = 2.0 * d * rho;
        let half = 0.5 * psi_max;
        let mut acc = 0.0;
        for (x, w) in self.arc_gl.0.iter().zip(&self.arc_gl.1) {
            let psi = half * (1.0 + x);
            acc += w * self.kb.eval_sq(base - cross * psi.cos());
        }
        2.0 * half * acc
    }

    /// `W(t)`, extended to negative times as an odd function.
    pub fn weighted_mean(&self, d: f64, t: f64) -> f64 {
        if t < 0.0 {
            return -self.weighted_mean(d, -t);
        }
        if t == 0.0 {
            return 0.0;
        }
        let a = self.kb.support_radius();
        let lo = (d - a).max(0.0);
        let hi = (d + a).min(t);
        if hi <= lo {
            return 0.0;
        }
        let theta_lo = (lo / t).min(1.0).asin();
        let theta_hi = (hi / t).min(1.0).asin();
        let integral = composite(
            &self.theta_gl,
            self.rule.theta_panels,
            theta_lo,
            theta_hi,
            |theta| {
                let rho = t * theta.sin();
                rho * self.circle_integral(d, rho)
            },
        );
        integral / (2.0 * PI)
    }

    /// `p(d, t)` with derivative step `step`. Exactly zero before the
    /// wavefront can arrive.
    pub fn pressure(&self, d: f64, t: f64, step: f64) -> f64 {
        if t < d - self.kb.support_radius() {
            return 0.0;
        }
        let w = |s: f64| self.weighted_mean(d, s);
        (w(t - 2.0 * step) - 8.0 * w(t - step) + 8.0 * w(t + step) - w(t + 2.0 * step))
            / (12.0 * step)
    }

    pub fn trace(&self, d: f64, times: &[f64], step: f64) -> Vec<f64> {
        times.iter().map(|&t| self.pressure(d, t, step)).collect()
    }
}

pub(crate) fn derivative_step(times: &[f64], refinement: usize, fallback: f64) -> f64 {
    let min_gap = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let gap = if min_gap.is_finite() {
        min_gap
    } else {
        fallback
    };
    gap / refinement.max(1) as f64
}

/// Pressure trace at `distance` from a blob centered at the origin.
pub fn radial_pressure_profile(
    distance: f64,
    params: &KaiserBesselParams,
    times: &[f64],
) -> Result<Vec<f64>> {
    radial_pressure_profile_with(distance, params, times, &ProfileOptions::default())
}

/// As [`radial_pressure_profile`], with explicit quadrature settings. The
/// trace is recomputed with [`QuadratureRule::refined`]; if the two differ
/// by more than `tolerance` of the peak the call fails.
pub fn radial_pressure_profile_with(
    distance: f64,
    params: &KaiserBesselParams,
    times: &[f64],
    opts: &ProfileOptions,
) -> Result<Vec<f64>> {
    if !(distance >= 0.0 && distance.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "distance must be non-negative, got {distance}"
        )));
    }
    if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidParameter("times must be finite and non-negative".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("times must be strictly increasing".into()));
    }
    let step = derivative_step(
        times,
        opts.derivative_refinement,
        params.support_radius / 4.0,
    );
    let coarse = RadialProfiler::new(*params, opts.rule)?.trace(distance, times, step);
    let fine = RadialProfiler::new(*params, opts.rule.refined())?.trace(distance, times, step);
    let residual = quadrature_residual(&coarse, &fine);
    if residual > opts.tolerance {
        return Err(Error::QuadratureNonConvergence {
            residual,
            tolerance: opts.tolerance,
        });
    }
    Ok(coarse)
}

pub(crate) fn quadrature_residual(coarse: &[f64], fine: &[f64]) -> f64 {
    let peak = fine.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    coarse
        .iter()
        .zip(fine)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / peak
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profiler() -> RadialProfiler {
        RadialProfiler::new(KaiserBesselParams::default(), QuadratureRule::default()).unwrap()
    }

    #[test]
    fn circle_integral_at_center_is_full_circle() {
        let p = profiler();
        let kb = KaiserBessel::new(KaiserBesselParams::default()).unwrap();
        let rho = 0.02;
        let expected = 2.0 * PI * kb.eval_radius(rho);
        assert!((p.circle_integral(0.0, rho) - expected).abs() < 1e-14);
    }

    #[test]
    fn circle_integral_matches_brute_force() {
        let p = profiler();
        let kb = KaiserBessel::new(KaiserBesselParams::default()).unwrap();
        let n = 400_000;
        for (d, rho) in [(0.5, 0.49), (0.5, 0.52), (0.03, 0.04), (1.2, 1.16)] {
            let mut acc = 0.0;
            for k in 0..n {
                let w = 2.0 * PI * (k as f64 + 0.5) / n as f64;
                acc += kb.eval([d + rho * w.cos(), rho * w.sin()]);
            }
            let brute = acc * 2.0 * PI / n as f64;
            let got = p.circle_integral(d, rho);
            assert!(
                (got - brute).abs() < 1e-6 * brute.abs().max(1e-3),
                "d={d} rho={rho}: {got} vs {brute}"
            );
        }
    }

    #[test]
    fn zero_before_arrival() {
        let params = KaiserBesselParams::default();
        let times: Vec<f64> = (1..=40).map(|j| j as f64 * 0.01).collect();
        let d = 0.5;
        let trace = radial_pressure_profile(d, &params, &times).unwrap();
        for (t, p) in times.iter().zip(&trace) {
            if *t < d - params.support_radius {
                assert_eq!(*p, 0.0);
            }
        }
    }

    #[test]
    fn tail_decays_after_passage() {
        let params = KaiserBesselParams::default();
        let d = 0.5;
        let times: Vec<f64> = (1..=375).map(|j| j as f64 * 0.01).collect();
        let trace = radial_pressure_profile(d, &params, &times).unwrap();
        let peak = trace.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak > 0.0);
        // Tail behaves like -(mass/2π) t / (t² - d²)^{3/2}.
        for (t, p) in times.iter().zip(&trace) {
            if *t > d + params.support_radius + 2.0 {
                assert!(p.abs() < 1e-3 * peak, "t={t}: {p} vs peak {peak}");
            }
        }
    }

    #[test]
    fn small_distance_is_finite() {
        let params = KaiserBesselParams::default();
        let times: Vec<f64> = (1..=20).map(|j| j as f64 * 0.005).collect();
        let trace = radial_pressure_profile(0.0, &params, &times).unwrap();
        assert!(trace.iter().all(|v| v.is_finite()));
        // At the blob center p(0) = φ(0) = 1; the trace starts near it.
        let early = radial_pressure_profile(0.0, &params, &[0.0005, 0.001]).unwrap();
        assert!((early[0] - 1.0).abs() < 0.01, "{}", early[0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = KaiserBesselParams::default();
        assert!(radial_pressure_profile(-0.1, &params, &[0.1]).is_err());
        assert!(radial_pressure_profile(0.1, &params, &[0.2, 0.1]).is_err());
    }

    #[test]
    fn too_coarse_quadrature_is_reported() {
        let params = KaiserBesselParams::default();
        let opts = ProfileOptions {
            rule: QuadratureRule {
                theta_panels: 1,
                theta_nodes: 1,
                arc_nodes: 1,
            },
            tolerance: 1e-6,
            derivative_refinement: 4,
        };
        let times: Vec<f64> = (1..=60).map(|j| j as f64 * 0.01).collect();
        match radial_pressure_profile_with(0.5, &params, &times, &opts) {
            Err(Error::QuadratureNonConvergence { residual, .. }) => assert!(residual > 1e-6),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
