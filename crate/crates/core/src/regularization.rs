//! Pseudo-inverse, truncated SVD and the complement projector.
//!
//! With `c_i = ⟨u_i, y⟩ / σ_i`, the truncated reconstruction is
//! `B_α y = Σ_{σ_i² ≥ α} c_i v_i`, and `P_α z = z - Σ_{σ_i² ≥ α} ⟨v_i, z⟩ v_i`
//! projects onto everything `B_α` throws away (including the null space).

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{norm2, CoefficientImage, Measurement};
use crate::noise::gaussian_noise;
use crate::svd::SvdFactors;

/// Truncation threshold `α` and the number of kept singular values
/// `k(α) = #{i : σ_i² ≥ α}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub alpha: f64,
    pub kept: usize,
}

impl TruncationPolicy {
    pub fn from_alpha(f: &SvdFactors, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        let kept = f.sigma.iter().filter(|s| *s * *s >= alpha).count();
        Ok(TruncationPolicy { alpha, kept })
    }

    /// Threshold that keeps the first `kept` values: `α = σ_kept²`, or just
    /// above `σ_1²` when nothing is kept. Ties in σ can make the actual
    /// kept count larger than requested.
    pub fn from_kept(f: &SvdFactors, kept: usize) -> Result<Self> {
        if kept > f.rank() {
            return Err(Error::InvalidParameter(format!(
                "cannot keep {kept} of {} singular values",
                f.rank()
            )));
        }
        let alpha = if kept == 0 {
            match f.sigma.first() {
                Some(s) => (s * s).next_up(),
                None => 1.0,
            }
        } else {
            let s = f.sigma[kept - 1];
            s * s
        };
        Self::from_alpha(f, alpha)
    }
}

/// `⟨u_i, y⟩` for all `i`.
pub fn data_coefficients(f: &SvdFactors, y: &[f64]) -> Result<Vec<f64>> {
    check_len("measurement", f.data_dim(), y.len())?;
    Ok(f.u.tr_mul(&DVector::from_column_slice(y)).as_slice().to_vec())
}

/// `⟨v_i, z⟩` for all `i`.
pub fn image_coefficients(f: &SvdFactors, z: &[f64]) -> Result<Vec<f64>> {
    check_len("coefficient image", f.coeff_dim(), z.len())?;
    Ok(f.v.tr_mul(&DVector::from_column_slice(z)).as_slice().to_vec())
}

/// `Σ_{i < kept} c_i v_i`.
pub fn synthesize(f: &SvdFactors, coeffs: &[f64], kept: usize) -> Vec<f64> {
    let kept = kept.min(coeffs.len());
    let vk = f.v.columns(0, kept);
    let c = DVector::from_column_slice(&coeffs[..kept]);
    (vk * c).as_slice().to_vec()
}

fn side_of(f: &SvdFactors) -> usize {
    (f.coeff_dim() as f64).sqrt().round() as usize
}

fn image(f: &SvdFactors, values: Vec<f64>) -> CoefficientImage {
    CoefficientImage {
        side: side_of(f),
        values,
    }
}

fn truncated(f: &SvdFactors, y: &[f64], kept: usize) -> Result<Vec<f64>> {
    let mut c = data_coefficients(f, y)?;
    for (ci, s) in c.iter_mut().zip(&f.sigma) {
        *ci /= s;
    }
    Ok(synthesize(f, &c, kept))
}

/// Moore-Penrose inverse `A⁺ y`.
pub fn pseudo_inverse_apply(f: &SvdFactors, y: &Measurement) -> Result<CoefficientImage> {
    Ok(image(f, truncated(f, &y.values, f.rank())?))
}

/// Truncated SVD reconstruction `B_α y`.
pub fn tsvd_apply(
    f: &SvdFactors,
    policy: &TruncationPolicy,
    y: &Measurement,
) -> Result<CoefficientImage> {
    Ok(image(f, truncated(f, &y.values, policy.kept)?))
}

/// `P_α z`, the orthogonal projection onto the complement of the kept
/// input singular vectors.
pub fn complement_project(
    f: &SvdFactors,
    policy: &TruncationPolicy,
    z: &CoefficientImage,
) -> Result<CoefficientImage> {
    let mut out = z.values.clone();
    complement_project_in_place(f, policy.kept, &mut out)?;
    Ok(CoefficientImage {
        side: z.side,
        values: out,
    })
}

pub fn complement_project_in_place(f: &SvdFactors, kept: usize, z: &mut [f64]) -> Result<()> {
    check_len("coefficient image", f.coeff_dim(), z.len())?;
    let kept = kept.min(f.rank());
    if kept == 0 {
        return Ok(());
    }
    let vk = f.v.columns(0, kept);
    let c = vk.tr_mul(&DVector::from_column_slice(z));
    let back = vk * c;
    for (zi, bi) in z.iter_mut().zip(back.iter()) {
        *zi -= bi;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `‖B_α(Ax + ξ) − A⁺Ax‖`
    pub lhs: f64,
    /// `δ/√α + ‖(A⁺ − B_α)Ax‖`
    pub rhs: f64,
    pub delta: f64,
    pub holds: bool,
}

/// Evaluates both sides of the truncated-SVD stability estimate for one
/// `(x, ξ, α)`. `A x` is formed from the factors.
pub fn stability_check(
    f: &SvdFactors,
    policy: &TruncationPolicy,
    x: &CoefficientImage,
    noise: &[f64],
) -> Result<StabilityReport> {
    check_len("noise", f.data_dim(), noise.len())?;
    let ax = f.apply(&x.values);
    let y: Vec<f64> = ax.iter().zip(noise).map(|(a, e)| a + e).collect();
    let delta = norm2(noise);
    let by = truncated(f, &y, policy.kept)?;
    let pinv_ax = truncated(f, &ax, f.rank())?;
    let b_ax = truncated(f, &ax, policy.kept)?;
    let lhs = by
        .iter()
        .zip(&pinv_ax)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let approx = pinv_ax
        .iter()
        .zip(&b_ax)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let rhs = delta / policy.alpha.sqrt() + approx;
    Ok(StabilityReport {
        lhs,
        rhs,
        delta,
        holds: lhs <= rhs * (1.0 + 1e-9),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelection {
    pub policy: TruncationPolicy,
    /// Mean objective for keeping `k` values, `k = 0..=r`.
    pub objective: Vec<f64>,
}

/// Chooses the cut point minimizing the mean of
/// `‖B_α(Ax+ξ) − B_α(Ax)‖ + ‖x − B_α A x‖` over phantoms and noise draws.
///
/// Only the `r + 1` cut points matter since `B_α` is piecewise constant in
/// `α`. Noise is Gaussian with standard deviation `ρ · max(Ax)`.
pub fn select_alpha(
    f: &SvdFactors,
    phantoms: &[CoefficientImage],
    noise_fraction: f64,
    draws: usize,
    seed: u64,
) -> Result<AlphaSelection> {
    if phantoms.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if !(noise_fraction >= 0.0) {
        return Err(Error::InvalidParameter("noise fraction must be ≥ 0".into()));
    }
    let r = f.rank();
    let draws = draws.max(1);
    let mut objective = vec![0.0; r + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (phantoms.len() * draws) as f64;
    for x in phantoms {
        let b = image_coefficients(f, &x.values)?;
        let ax = f.apply(&x.values);
        let x2 = x.values.iter().map(|v| v * v).sum::<f64>();
        // ‖x − B_α A x‖² = ‖x‖² − Σ_{i<k} ⟨v_i, x⟩²
        let mut approx = Vec::with_capacity(r + 1);
        let mut acc = 0.0;
        approx.push(x2.max(0.0).sqrt());
        for bi in &b {
            acc += bi * bi;
            approx.push((x2 - acc).max(0.0).sqrt());
        }
        let peak = ax.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let std = noise_fraction * peak.max(0.0);
        for _ in 0..draws {
            let noise = gaussian_noise(&mut rng, ax.len(), std);
            let c = data_coefficients(f, &noise)?;
            let mut amp = 0.0;
            objective[0] += approx[0] / samples;
            for k in 1..=r {
                let ck = c[k - 1] / f.sigma[k - 1];
                amp += ck * ck;
                objective[k] += (amp.sqrt() + approx[k]) / samples;
            }
        }
    }
    // ties go to the larger kept count (smaller α)
    let mut best = 0;
    for k in 1..=r {
        if objective[k] <= objective[best] {
            best = k;
        }
    }
    Ok(AlphaSelection {
        policy: TruncationPolicy::from_kept(f, best)?,
        objective,
    })
}

/// Ground-truth-aware baseline: the cut point with the smallest
/// `‖B_α y − x_true‖`.
pub fn optimal_tsvd(
    f: &SvdFactors,
    y: &Measurement,
    x_true: &CoefficientImage,
) -> Result<(TruncationPolicy, CoefficientImage)> {
    let mut c = data_coefficients(f, &y.values)?;
    for (ci, s) in c.iter_mut().zip(&f.sigma) {
        *ci /= s;
    }
    let b = image_coefficients(f, &x_true.values)?;
    // ‖Σ_{i<k} c_i v_i − x‖² = ‖x‖² − 2 Σ c_i b_i + Σ c_i²
    let mut err = x_true.values.iter().map(|v| v * v).sum::<f64>();
    let mut best = (err, 0);
    for k in 1..=f.rank() {
        let (ci, bi) = (c[k - 1], b[k - 1]);
        err += ci * ci - 2.0 * ci * bi;
        if err < best.0 {
            best = (err, k);
        }
    }
    let policy = TruncationPolicy::from_kept(f, best.1)?;
    let recon = image(f, synthesize(f, &c, policy.kept));
    Ok((policy, recon))
}
