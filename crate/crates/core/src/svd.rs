//! Thin SVD of the system matrix, `A = Σ σ_i u_i v_iᵀ`, with `v_i` in
//! coefficient space and `u_i` in data space.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter, Fnv1a, FACTORS_MAGIC};
use crate::error::{Error, Result};
use crate::system_matrix::{MatrixMetadata, SystemMatrix};

pub const DEFAULT_RANK_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SvdBackend {
    Deterministic,
    /// Gaussian sketch of width `rank + oversampling` with `power_iterations`
    /// subspace iterations.
    Randomized {
        rank: usize,
        oversampling: usize,
        power_iterations: usize,
        seed: u64,
    },
}

impl SvdBackend {
    pub fn randomized(rank: usize, seed: u64) -> Self {
        SvdBackend::Randomized {
            rank,
            oversampling: 10,
            power_iterations: 2,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorsMetadata {
    pub rank_cutoff: f64,
    pub backend: SvdBackend,
    pub matrix_checksum: u64,
    pub matrix: Option<MatrixMetadata>,
}

#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// Non-increasing, all above `rank_cutoff · σ_1`.
    pub sigma: Vec<f64>,
    /// `data_dim × r`, column `i` is `u_i`.
    pub u: DMatrix<f64>,
    /// `coeff_dim × r`, column `i` is `v_i`.
    pub v: DMatrix<f64>,
    pub meta: FactorsMetadata,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn data_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn coeff_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn u_col(&self, i: usize) -> &[f64] {
        let n = self.data_dim();
        &self.u.as_slice()[i * n..(i + 1) * n]
    }

    pub fn v_col(&self, i: usize) -> &[f64] {
        let n = self.coeff_dim();
        &self.v.as_slice()[i * n..(i + 1) * n]
    }

    /// FNV-1a over σ, u and v; identifies the factors a network is bound to.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.update_f64s(&self.sigma);
        h.update_f64s(self.u.as_slice());
        h.update_f64s(self.v.as_slice());
        h.finish()
    }

    /// `Σ σ_i u_i v_iᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (i, s) in self.sigma.iter().enumerate() {
            us.column_mut(i).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    /// `A x` through the factors.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let mut c = self.v.tr_mul(&xv);
        for (ci, s) in c.iter_mut().zip(&self.sigma) {
            *ci *= s;
        }
        (&self.u * c).as_slice().to_vec()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ContainerWriter::create(path, FACTORS_MAGIC)?;
        w.u64(self.rank() as u64)?;
        w.u64(self.data_dim() as u64)?;
        w.u64(self.coeff_dim() as u64)?;
        w.f64s(&self.sigma)?;
        w.f64s(self.u.as_slice())?;
        w.f64s(self.v.as_slice())?;
        w.text(&serde_json::to_string(&self.meta)?)?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ContainerReader::open(path, FACTORS_MAGIC)?;
        let rank = r.u64()? as usize;
        let data_dim = r.u64()? as usize;
        let coeff_dim = r.u64()? as usize;
        let sigma = r.f64s(rank)?;
        let u = r.f64s(rank * data_dim)?;
        let v = r.f64s(rank * coeff_dim)?;
        let meta: FactorsMetadata = serde_json::from_str(&r.text()?)?;
        r.expect_end()?;
        Ok(SvdFactors {
            sigma,
            u: DMatrix::from_column_slice(data_dim, rank, &u),
            v: DMatrix::from_column_slice(coeff_dim, rank, &v),
            meta,
        })
    }
}

/// Factorizes the system matrix and records its provenance.
pub fn svd_factorize(a: &SystemMatrix, rank_cutoff: f64, backend: SvdBackend) -> Result<SvdFactors> {
    let mut f = factorize_dense(&a.entries, rank_cutoff, backend)?;
    f.meta.matrix_checksum = a.checksum();
    f.meta.matrix = Some(a.meta.clone());
    Ok(f)
}

pub fn factorize_dense(a: &DMatrix<f64>, rank_cutoff: f64, backend: SvdBackend) -> Result<SvdFactors> {
    if !(0.0..1.0).contains(&rank_cutoff) {
        return Err(Error::InvalidParameter(format!(
            "rank cutoff must lie in [0, 1), got {rank_cutoff}"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("matrix has non-finite entries".into()));
    }
    let (u, sigma, v) = match backend {
        SvdBackend::Deterministic => deterministic(a)?,
        SvdBackend::Randomized {
            rank,
            oversampling,
            power_iterations,
            seed,
        } => randomized(a, rank, oversampling, power_iterations, seed)?,
    };
    Ok(finalize(
        u,
        sigma,
        v,
        FactorsMetadata {
            rank_cutoff,
            backend,
            matrix_checksum: 0,
            matrix: None,
        },
    ))
}

type Triple = (DMatrix<f64>, Vec<f64>, DMatrix<f64>);

fn small_svd(m: DMatrix<f64>, stage: &'static str) -> Result<Triple> {
    let svd = m
        .try_svd(true, true, 5.0 * f64::EPSILON, 1_000_000)
        .ok_or(Error::Factorization { stage })?;
    let u = svd.u.ok_or(Error::Factorization { stage })?;
    let v_t = svd.v_t.ok_or(Error::Factorization { stage })?;
    Ok((u, svd.singular_values.as_slice().to_vec(), v_t.transpose()))
}

fn deterministic(a: &DMatrix<f64>) -> Result<Triple> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok((DMatrix::zeros(m, 0), vec![], DMatrix::zeros(n, 0)));
    }
    if m >= n {
        // Tall: reduce to the n × n triangular factor first.
        let qr = a.clone().qr();
        let (q, r) = qr.unpack();
        let (ur, s, v) = small_svd(r, "bidiagonal SVD of the triangular factor")?;
        Ok((q * ur, s, v))
    } else {
        let (v, s, u) = deterministic(&a.transpose())?;
        Ok((u, s, v))
    }
}

fn orthonormal_basis(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

fn randomized(
    a: &DMatrix<f64>,
    rank: usize,
    oversampling: usize,
    power_iterations: usize,
    seed: u64,
) -> Result<Triple> {
    let (m, n) = a.shape();
    let width = (rank + oversampling).min(m.min(n));
    if rank == 0 || width == 0 {
        return Err(Error::InvalidParameter("randomized SVD needs rank ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::<f64>::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormal_basis(a * omega);
    for _ in 0..power_iterations {
        let z = orthonormal_basis(a.tr_mul(&q));
        q = orthonormal_basis(a * z);
    }
    let b = q.tr_mul(a);
    let (ub, s, v) = small_svd(b, "SVD of the sketched matrix")?;
    let keep = rank.min(s.len());
    let u = q * ub;
    // small_svd may return unsorted values; finalize sorts before truncating,
    // so truncate after sorting here.
    let (u, s, v) = sort_desc(u, s, v);
    Ok((
        u.columns(0, keep).into_owned(),
        s[..keep].to_vec(),
        v.columns(0, keep).into_owned(),
    ))
}

fn sort_desc(u: DMatrix<f64>, s: Vec<f64>, v: DMatrix<f64>) -> Triple {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(v.nrows(), order.len(), |r, c| v[(r, order[c])]);
    let s = order.iter().map(|&i| s[i]).collect();
    (u, s, v)
}

fn finalize(u: DMatrix<f64>, s: Vec<f64>, v: DMatrix<f64>, meta: FactorsMetadata) -> SvdFactors {
    let (mut u, s, mut v) = sort_desc(u, s, v);
    let top = s.first().copied().unwrap_or(0.0);
    let keep = s
        .iter()
        .take_while(|&&x| top > 0.0 && x > meta.rank_cutoff * top)
        .count();
    // Sign convention: the largest-magnitude entry of each v_i is positive.
    for i in 0..keep {
        let col = v.column(i);
        let mut best = 0;
        for (r, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = r;
            }
        }
        if col[best] < 0.0 {
            v.column_mut(i).neg_mut();
            u.column_mut(i).neg_mut();
        }
    }
    SvdFactors {
        sigma: s[..keep].to_vec(),
        u: u.columns(0, keep).into_owned(),
        v: v.columns(0, keep).into_owned(),
        meta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() - 0.5)
    }

    fn orthonormality_residual(q: &DMatrix<f64>) -> f64 {
        let g = q.tr_mul(q);
        let k = g.nrows();
        (g - DMatrix::<f64>::identity(k, k)).amax()
    }

    #[test]
    fn diagonal_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let f = factorize_dense(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
        assert_eq!(f.rank(), 2);
        assert!((f.sigma[0] - 3.0).abs() < 1e-14 && (f.sigma[1] - 1.0).abs() < 1e-14);
        for i in 0..2 {
            assert!((f.v[(i, i)].abs() - 1.0).abs() < 1e-14);
            assert!((f.u[(i, i)].abs() - 1.0).abs() < 1e-14);
            assert!((f.u[(i, i)] - f.v[(i, i)]).abs() < 1e-14);
        }
    }

    #[test]
    fn random_tall_and_wide_reconstruct() {
        for (m, n) in [(20, 12), (12, 20)] {
            let a = random(m, n, 7);
            let f = factorize_dense(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
            let rel = (f.reconstruct() - &a).norm() / a.norm();
            assert!(rel <= 1e-10, "{rel}");
            assert!(orthonormality_residual(&f.u) <= 1e-10);
            assert!(orthonormality_residual(&f.v) <= 1e-10);
            assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_cutoff_discards_null_directions() {
        // rank-3 product
        let a = random(15, 3, 1) * random(3, 10, 2);
        let f = factorize_dense(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
        assert_eq!(f.rank(), 3);
        let rel = (f.reconstruct() - &a).norm() / a.norm();
        assert!(rel <= 1e-10);
        let zero = DMatrix::<f64>::zeros(4, 3);
        let f = factorize_dense(&zero, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
        assert_eq!(f.rank(), 0);
        assert!(factorize_dense(&a, 1.0, SvdBackend::Deterministic).is_err());
    }

    #[test]
    fn randomized_matches_deterministic_on_low_rank() {
        let a = random(60, 8, 3) * random(8, 40, 4);
        let det = factorize_dense(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
        let rnd = factorize_dense(&a, DEFAULT_RANK_CUTOFF, SvdBackend::randomized(8, 11)).unwrap();
        assert_eq!(rnd.rank(), 8);
        for (x, y) in det.sigma.iter().zip(&rnd.sigma) {
            assert!((x - y).abs() <= 1e-10 * det.sigma[0], "{x} vs {y}");
        }
        let rel = (rnd.reconstruct() - &a).norm() / a.norm();
        assert!(rel <= 1e-10, "{rel}");
    }

    #[test]
    fn file_round_trip() {
        let a = random(9, 5, 5);
        let f = factorize_dense(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        f.save(&p).unwrap();
        let g = SvdFactors::load(&p).unwrap();
        assert_eq!(f.sigma, g.sigma);
        assert_eq!(f.u, g.u);
        assert_eq!(f.v, g.v);
        assert_eq!(f.meta, g.meta);
        assert_eq!(f.checksum(), g.checksum());
    }
}
