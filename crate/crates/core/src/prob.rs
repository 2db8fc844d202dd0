//! Shared probabilistic primitives: Gaussian quantiles, the two-dof
//! chi-squared quantile, covariance hygiene and a seeded multivariate
//! normal sampler.
//!
//! The sampler is deterministic: ChaCha12 keyed by a `u64` seed, normals
//! via Box-Muller. All randomized checks in the workspace go through it.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// Symmetric matrices may deviate from PSD by at most this much.
pub const PSD_TOL: f64 = 1e-10;
/// Default diagonal jitter used when repairing marginally indefinite matrices.
pub const DEFAULT_JITTER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProbError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max |m - m^T| = {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is indefinite beyond tolerance (min eigenvalue = {min_eigenvalue:e})")]
    Indefinite { min_eigenvalue: f64 },
    #[error("Cholesky factorization failed after jitter up to {max_jitter:e}")]
    CholeskyFailed { max_jitter: f64 },
    #[error("probability {0} outside the open interval (0, 1)")]
    InvalidProbability(f64),
    #[error("dimension mismatch: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A symmetric positive semidefinite matrix (up to [`PSD_TOL`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    m: DMatrix<f64>,
}

impl Covariance {
    /// Validates symmetry and PSD-ness of `m`.
    pub fn new(m: DMatrix<f64>) -> Result<Self, ProbError> {
        if m.nrows() != m.ncols() {
            return Err(ProbError::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        let max_asym = max_asymmetry(&m);
        if max_asym > PSD_TOL {
            return Err(ProbError::NotSymmetric {
                max_asymmetry: max_asym,
            });
        }
        let sym = symmetric_part(&m);
        let min_eig = min_eigenvalue(&sym);
        if min_eig < -PSD_TOL {
            return Err(ProbError::Indefinite {
                min_eigenvalue: min_eig,
            });
        }
        Ok(Self { m: sym })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            m: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            m: DMatrix::identity(n, n),
        }
    }

    /// Symmetrizes `m` and escalates diagonal jitter until the PSD check
    /// passes. Fails if even the largest jitter cannot repair it.
    pub fn repair(m: &DMatrix<f64>) -> Result<Self, ProbError> {
        const JITTERS: [f64; 6] = [0.0, 1e-12, 1e-10, DEFAULT_JITTER, 1e-8, 1e-7];
        let mut last = ProbError::CholeskyFailed { max_jitter: 1e-7 };
        for &jitter in &JITTERS {
            match symmetrize_and_jitter(m, jitter) {
                Ok(cov) => return Ok(cov),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.m
    }

    pub fn is_zero(&self) -> bool {
        self.m.iter().all(|&v| v == 0.0)
    }
}

/// A Gaussian distribution over a real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: Covariance) -> Result<Self, ProbError> {
        if mean.len() != cov.dim() {
            return Err(ProbError::DimensionMismatch {
                expected: mean.len(),
                got: cov.dim(),
            });
        }
        Ok(Self { mean, cov })
    }

    /// A point mass: zero covariance around `mean`.
    pub fn dirac(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: Covariance::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let d = libm::fabs(m[(i, j)] - m[(j, i)]);
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 0.0;
    }
    sym.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// `(m + m^T)/2 + jitter * I`, validated as a [`Covariance`].
pub fn symmetrize_and_jitter(m: &DMatrix<f64>, jitter: f64) -> Result<Covariance, ProbError> {
    if m.nrows() != m.ncols() {
        return Err(ProbError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let mut sym = symmetric_part(m);
    if jitter != 0.0 {
        for i in 0..sym.nrows() {
            sym[(i, i)] += jitter;
        }
    }
    let min_eig = min_eigenvalue(&sym);
    if min_eig < -PSD_TOL {
        return Err(ProbError::Indefinite {
            min_eigenvalue: min_eig,
        });
    }
    Ok(Covariance { m: sym })
}

/// Standard normal CDF through `erfc`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Standard normal quantile, by bisection on [`std_normal_cdf`].
///
/// Absolute error below 1e-9 for probabilities that are representable
/// away from 0 and 1.
pub fn std_normal_quantile(p: f64) -> Result<f64, ProbError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ProbError::InvalidProbability(p));
    }
    let mut lo = -40.0f64;
    let mut hi = 40.0f64;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if std_normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Quantile of the chi-squared distribution with two degrees of freedom:
/// `-2 ln(1 - p)`.
pub fn chi2_2_quantile(p: f64) -> Result<f64, ProbError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ProbError::InvalidProbability(p));
    }
    Ok(-2.0 * libm::log1p(-p))
}

/// Deterministic standard normal stream: ChaCha12 + Box-Muller.
pub struct NormalSampler {
    rng: ChaCha12Rng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let th = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(th));
        r * libm::cos(th)
    }

    pub fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| self.next_normal()))
    }
}

/// `n` i.i.d. draws from `belief`, one per row, deterministic in `seed`.
///
/// Uses the Cholesky factor of the covariance, escalating jitter when the
/// matrix is singular. An exactly zero covariance returns copies of the mean.
pub fn mvn_sample(belief: &GaussianBelief, n: usize, seed: u64) -> Result<DMatrix<f64>, ProbError> {
    let dim = belief.dim();
    if belief.cov.is_zero() {
        let mut out = DMatrix::zeros(n, dim);
        for i in 0..n {
            out.row_mut(i).copy_from(&belief.mean.transpose());
        }
        return Ok(out);
    }
    let factor = cholesky_with_jitter(belief.cov.matrix())?;
    let mut sampler = NormalSampler::new(seed);
    let mut out = DMatrix::zeros(n, dim);
    for i in 0..n {
        let z = sampler.normal_vector(dim);
        let x = &belief.mean + &factor * z;
        out.row_mut(i).copy_from(&x.transpose());
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor, retrying with escalating jitter.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<DMatrix<f64>, ProbError> {
    const JITTERS: [f64; 4] = [0.0, 1e-12, 1e-10, DEFAULT_JITTER];
    for &jitter in &JITTERS {
        let mut trial = m.clone();
        for i in 0..trial.nrows() {
            trial[(i, i)] += jitter;
        }
        if let Some(chol) = trial.cholesky() {
            return Ok(chol.l());
        }
    }
    Err(ProbError::CholeskyFailed {
        max_jitter: DEFAULT_JITTER,
    })
}

/// Sample mean and sample covariance (denominator `n - 1`) of row-major draws.
pub fn sample_moments(samples: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.nrows();
    let d = samples.ncols();
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        mean += samples.row(i).transpose();
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let c = samples.row(i).transpose() - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

/// Convenience: collect a Vec of row vectors into a sample matrix.
pub fn rows_to_matrix(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = if n == 0 { 0 } else { rows[0].len() };
    let mut out = DMatrix::zeros(n, d);
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from(&r.transpose());
    }
    out
}

/// All entries of a `Vec` view, used by tests and scenario code.
pub fn dvector_from(vals: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(vals)
}

/// Row-major construction helper.
pub fn dmatrix_from(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, vals)
}

#[allow(dead_code)]
fn assert_send_sync<T: Send + Sync>() {}
const _: () = {
    fn check() {
        assert_send_sync::<Covariance>();
        assert_send_sync::<GaussianBelief>();
    }
    let _ = check;
};
