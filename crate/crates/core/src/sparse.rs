//! Sparse GP approximation with inducing inputs (fully independent
//! training conditional), plus the receding-horizon selection of inducing
//! inputs along a previous solution trajectory.
//!
//! With `Q_ab := K_aI Kii^-1 K_Ib` (`I` the inducing set), the approximate
//! posterior for output `a` is
//!
//! ```text
//! mean_a(z) = m_a(z) + Q_zZ (Q_ZZ + D)^-1 (y_a - m_a(Z))
//! var_a(z)  = k_a(z, z) - Q_zZ (Q_ZZ + D)^-1 Q_Zz
//! D         = diag(K_ZZ - Q_ZZ) + s_a^2 I
//! ```
//!
//! Internally everything is reduced through the Woodbury identity so that an
//! evaluation touches only the inducing set: with
//! `A = Kii + K_IZ D^-1 K_ZI`, the mean weights are
//! `beta = A^-1 K_IZ D^-1 (y - m)` and the variance precision is
//! `Kii^-1 - A^-1`. Evaluation cost is therefore independent of the
//! training set size.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::gp::{
    cross_kernel, kernel_vector, GpDataset, GpError, GpModel, GpPrediction, GpRegressor,
    PriorMean, SeKernel, WeightForm,
};
use crate::prob::NormalSampler;

/// Floor for the diagonal training-conditional correction.
const LAMBDA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
struct SparseOutput {
    /// Mean weights: mean(z) = m(z) + k(z, I) beta.
    beta: DVector<f64>,
    /// Lower Cholesky factor of the (jittered) inducing Gram matrix.
    kii_l: DMatrix<f64>,
    /// Lower Cholesky factor of B = I + V D^-1 V^T with V = L^-1 K_IZ.
    b_l: DMatrix<f64>,
}

/// FITC approximation of a [`GpModel`] around a fixed inducing set.
pub struct SparseGpModel {
    kernels: Vec<SeKernel>,
    prior_mean: PriorMean,
    inducing: DMatrix<f64>,
    per_output: Vec<SparseOutput>,
    n_d: usize,
}

impl SparseGpModel {
    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.inducing
    }

    pub fn inducing_count(&self) -> usize {
        self.inducing.nrows()
    }
}

/// Builds the FITC caches for `base` around `inducing_inputs` (rows).
pub fn fitc_build(base: &GpModel, inducing_inputs: DMatrix<f64>) -> Result<SparseGpModel, GpError> {
    let n_z = base.input_dim();
    let n_d = base.output_dim();
    if inducing_inputs.ncols() != n_z {
        return Err(GpError::DimensionMismatch {
            context: "inducing input dimension",
            expected: n_z,
            got: inducing_inputs.ncols(),
        });
    }
    if inducing_inputs.nrows() == 0 {
        return Err(GpError::TooFewPoints { needed: 1, got: 0 });
    }
    let dataset = base.dataset();
    let m = dataset.len();
    let mut per_output = Vec::with_capacity(n_d);
    for a in 0..n_d {
        let kernel = &base.kernels()[a];
        let noise = base.noise_variances()[a];
        let mi = inducing_inputs.nrows();
        let kii = crate::gp::gram_matrix(kernel, &inducing_inputs);
        let kii_chol = crate::gp::cholesky_escalating(&kii)
            .ok_or(GpError::Factorization { output: a })?;
        let kii_l = kii_chol.l();
        if m == 0 {
            // No data: B = I and the approximation reduces to the prior.
            per_output.push(SparseOutput {
                beta: DVector::zeros(mi),
                kii_l,
                b_l: DMatrix::identity(mi, mi),
            });
            continue;
        }
        let k_iz = cross_kernel(kernel, &inducing_inputs, dataset.inputs()); // Mi x M
        let v = kii_l
            .solve_lower_triangular(&k_iz)
            .ok_or(GpError::Factorization { output: a })?;
        // lambda_j = k(z_j, z_j) - q_jj + noise, floored for the diagonal solve
        let mut lambda_inv = DVector::zeros(m);
        for j in 0..m {
            let q_jj = v.column(j).norm_squared();
            let zj = dataset.input_row(j);
            let lam = (kernel.eval(&zj, &zj) - q_jj).max(0.0) + noise;
            lambda_inv[j] = 1.0 / lam.max(LAMBDA_FLOOR);
        }
        // B = I + V D^-1 V^T; bounded below by I, so it factors stably.
        let mut v_scaled = v.clone();
        for j in 0..m {
            let s = lambda_inv[j];
            v_scaled.column_mut(j).scale_mut(s);
        }
        let b_mat = DMatrix::identity(mi, mi) + &v * v_scaled.transpose();
        let b_chol = b_mat
            .cholesky()
            .ok_or(GpError::Factorization { output: a })?;
        let residual = centered_column(base.prior_mean(), dataset, a);
        // beta = L^-T B^-1 V D^-1 (y - m)
        let rhs = &v_scaled * residual;
        let t = b_chol.solve(&rhs);
        let beta = kii_l
            .transpose()
            .solve_upper_triangular(&t)
            .ok_or(GpError::Factorization { output: a })?;
        per_output.push(SparseOutput {
            beta,
            kii_l,
            b_l: b_chol.l(),
        });
    }
    Ok(SparseGpModel {
        kernels: base.kernels().to_vec(),
        prior_mean: base.prior_mean().clone(),
        inducing: inducing_inputs,
        per_output,
        n_d,
    })
}

fn centered_column(prior: &PriorMean, dataset: &GpDataset, a: usize) -> DVector<f64> {
    DVector::from_fn(dataset.len(), |j, _| {
        let mj = prior.value(&dataset.input_row(j), dataset.output_dim());
        dataset.outputs()[(j, a)] - mj[a]
    })
}

impl GpRegressor for SparseGpModel {
    fn input_dim(&self) -> usize {
        self.inducing.ncols()
    }

    fn output_dim(&self) -> usize {
        self.n_d
    }

    fn kernels(&self) -> &[SeKernel] {
        &self.kernels
    }

    fn has_zero_prior_mean(&self) -> bool {
        self.prior_mean.is_zero()
    }

    fn predict(&self, z: &DVector<f64>, want_jacobian: bool) -> GpPrediction {
        let n_d = self.n_d;
        let prior = self.prior_mean.value(z, n_d);
        let mut mean = prior;
        let mut variance = DVector::zeros(n_d);
        let mut jac = if want_jacobian {
            Some(self.prior_mean.jacobian(z, n_d))
        } else {
            None
        };
        for a in 0..n_d {
            let kernel = &self.kernels[a];
            let out = &self.per_output[a];
            let k_vec = kernel_vector(kernel, &self.inducing, z);
            mean[a] += k_vec.dot(&out.beta);
            // var = k_zz - |w|^2 + |Lb^-1 w|^2 with w = L^-1 k(I, z); both
            // corrections are bounded, so nothing cancels catastrophically.
            let w = out
                .kii_l
                .solve_lower_triangular(&k_vec)
                .expect("cached factor is nonsingular");
            let t = out
                .b_l
                .solve_lower_triangular(&w)
                .expect("cached factor is nonsingular");
            variance[a] =
                (kernel.eval(z, z) - w.norm_squared() + t.norm_squared()).max(0.0);
            if let Some(j) = jac.as_mut() {
                for r in 0..z.len() {
                    let ell = kernel.length_scales()[r];
                    let mut acc = 0.0;
                    for p in 0..self.inducing.nrows() {
                        acc -= out.beta[p] * k_vec[p] * (z[r] - self.inducing[(p, r)]) / ell;
                    }
                    j[(a, r)] += acc;
                }
            }
        }
        GpPrediction {
            mean,
            variance,
            mean_jacobian: jac,
        }
    }

    fn weight_form(&self) -> WeightForm {
        // W = L^-T (I - B^-1) L^-1, assembled explicitly for moment
        // propagation. I - B^-1 is PSD since B >= I.
        let precisions = self
            .per_output
            .iter()
            .map(|o| {
                let mi = o.kii_l.nrows();
                let b_inv = o
                    .b_l
                    .solve_lower_triangular(&DMatrix::identity(mi, mi))
                    .and_then(|x| o.b_l.transpose().solve_upper_triangular(&x))
                    .expect("cached factor is nonsingular");
                let inner = DMatrix::identity(mi, mi) - b_inv;
                let li = o
                    .kii_l
                    .solve_lower_triangular(&DMatrix::identity(mi, mi))
                    .expect("cached factor is nonsingular");
                li.transpose() * inner * li
            })
            .collect();
        WeightForm {
            points: self.inducing.clone(),
            alphas: self.per_output.iter().map(|o| o.beta.clone()).collect(),
            precisions,
        }
    }
}

/// Indices of `count` points at equal index spacing over `0..len`, endpoints
/// included for `count >= 2`, consecutive duplicates removed. A single point
/// picks the midpoint.
pub fn inducing_indices(len: usize, count: usize) -> Result<Vec<usize>, GpError> {
    if len == 0 {
        return Err(GpError::TooFewPoints { needed: 1, got: 0 });
    }
    if count == 0 {
        return Err(GpError::TooFewPoints { needed: 1, got: 0 });
    }
    if count == 1 {
        return Ok(alloc::vec![libm::round((len - 1) as f64 / 2.0) as usize]);
    }
    let mut out = Vec::with_capacity(count);
    let span = (len - 1) as f64;
    for k in 0..count {
        let idx = libm::round(span * k as f64 / (count - 1) as f64) as usize;
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    Ok(out)
}

/// Samples `count` GP-input points at equal index spacing along a previous
/// solution trajectory (already mapped to GP input coordinates).
pub fn select_inducing_from_trajectory(
    trajectory: &[DVector<f64>],
    count: usize,
) -> Result<DMatrix<f64>, GpError> {
    let idx = inducing_indices(trajectory.len(), count)?;
    let n_z = trajectory[0].len();
    let mut out = DMatrix::zeros(idx.len(), n_z);
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).copy_from(&trajectory[i].transpose());
    }
    Ok(out)
}

/// Cold-start fallback: a deterministic random subset of the training
/// inputs (used when no previous trajectory is available).
pub fn select_inducing_random(
    dataset: &GpDataset,
    count: usize,
    seed: u64,
) -> Result<DMatrix<f64>, GpError> {
    let m = dataset.len();
    if m == 0 || count == 0 {
        return Err(GpError::TooFewPoints {
            needed: 1,
            got: m.min(count),
        });
    }
    let count = count.min(m);
    let mut sampler = NormalSampler::new(seed);
    // Partial Fisher-Yates over row indices.
    let mut order: Vec<usize> = (0..m).collect();
    for i in 0..count {
        let j = i + (sampler.uniform() * (m - i) as f64) as usize;
        let j = j.min(m - 1);
        order.swap(i, j);
    }
    let mut out = DMatrix::zeros(count, dataset.input_dim());
    for (row, &i) in order[..count].iter().enumerate() {
        out.row_mut(row).copy_from(&dataset.inputs().row(i));
    }
    Ok(out)
}
