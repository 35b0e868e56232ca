//! Generalized Kaiser-Bessel blobs.
//!
//! The blob of support radius `a`, taper `γ` and order `m` is
//! `φ(r) = s^m I_m(γ s) / I_m(γ)` with `s = sqrt(1 - |r|²/a²)` inside the
//! support and zero outside. Expanding `I_m` as a power series turns this
//! into `u^m · Σ c_k u^k` with `u = s²`, which is what [`KaiserBessel`]
//! evaluates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KaiserBesselParams {
    pub support_radius: f64,
    pub taper: f64,
    pub order: u32,
}

impl Default for KaiserBesselParams {
    fn default() -> Self {
        KaiserBesselParams {
            support_radius: 0.055,
            taper: 7.0,
            order: 2,
        }
    }
}

impl KaiserBesselParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.support_radius > 0.0 && self.support_radius.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "support radius must be positive, got {}",
                self.support_radius
            )));
        }
        if !(self.taper > 0.0 && self.taper.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "taper must be positive, got {}",
                self.taper
            )));
        }
        if self.order > 32 {
            return Err(Error::InvalidParameter(format!(
                "order {} is unreasonably large",
                self.order
            )));
        }
        Ok(())
    }
}

/// Modified Bessel function of the first kind, `I_order(x)` for `x ≥ 0`,
/// summed from its power series. All terms are positive, so the sum is
/// free of cancellation.
pub fn bessel_i(order: u32, x: f64) -> f64 {
    let half = 0.5 * x.abs();
    let mut term = 1.0;
    for k in 1..=order {
        term *= half / k as f64;
    }
    let q = half * half;
    let mut sum = term;
    let mut k = 0u32;
    loop {
        k += 1;
        term *= q / (k as f64 * (k + order) as f64);
        sum += term;
        if term <= sum * 1e-17 && k as f64 > half {
            break;
        }
        if k > 10_000 {
            break;
        }
    }
    if x < 0.0 && order % 2 == 1 {
        -sum
    } else {
        sum
    }
}

/// Precomputed blob evaluator.
#[derive(Debug, Clone)]
pub struct KaiserBessel {
    params: KaiserBesselParams,
    inv_radius_sq: f64,
    // φ = u^m · Σ coeffs[k] u^k
    coeffs: Vec<f64>,
}

impl KaiserBessel {
    pub fn new(params: KaiserBesselParams) -> Result<Self> {
        params.validate()?;
        let m = params.order;
        let g = params.taper;
        let norm = bessel_i(m, g);
        let mut c0 = 1.0;
        for k in 1..=m {
            c0 *= 0.5 * g / k as f64;
        }
        let q = 0.25 * g * g;
        let mut coeffs = vec![c0 / norm];
        let mut term = c0;
        let mut k = 0u32;
        loop {
            k += 1;
            term *= q / (k as f64 * (k + m) as f64);
            coeffs.push(term / norm);
            if term <= c0 * 1e-18 && k as f64 > q {
                break;
            }
        }
        Ok(KaiserBessel {
            params,
            inv_radius_sq: 1.0 / (params.support_radius * params.support_radius),
            coeffs,
        })
    }

    pub fn params(&self) -> &KaiserBesselParams {
        &self.params
    }

    pub fn support_radius(&self) -> f64 {
        self.params.support_radius
    }

    /// Blob value at squared distance `r2` from its center.
    #[inline]
    pub fn eval_sq(&self, r2: f64) -> f64 {
        let u = 1.0 - r2 * self.inv_radius_sq;
        if u < 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for c in self.coeffs.iter().rev() {
            acc = acc * u + c;
        }
        acc * u.powi(self.params.order as i32)
    }

    #[inline]
    pub fn eval_radius(&self, r: f64) -> f64 {
        self.eval_sq(r * r)
    }

    #[inline]
    pub fn eval(&self, offset: [f64; 2]) -> f64 {
        self.eval_sq(offset[0] * offset[0] + offset[1] * offset[1])
    }
}

/// One-shot evaluation of the blob at `offset` from its center.
pub fn kaiser_bessel_eval(offset: [f64; 2], params: &KaiserBesselParams) -> f64 {
    let r2 = offset[0] * offset[0] + offset[1] * offset[1];
    let a = params.support_radius;
    if r2 > a * a {
        return 0.0;
    }
    let s = (1.0 - r2 / (a * a)).max(0.0).sqrt();
    s.powi(params.order as i32) * bessel_i(params.order, params.taper * s)
        / bessel_i(params.order, params.taper)
}
