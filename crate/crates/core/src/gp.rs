//! Multi-output Gaussian-process regression with squared-exponential
//! kernels.
//!
//! Each output dimension is modeled independently given the inputs. The
//! posterior for output `a` conditions on targets centered by the prior
//! mean:
//!
//! ```text
//! mean_a(z) = m_a(z) + K_a(z, Z) (K_a(Z, Z) + s_a^2 I)^-1 (y_a - m_a(Z))
//! var_a(z)  = k_a(z, z) - K_a(z, Z) (K_a(Z, Z) + s_a^2 I)^-1 K_a(Z, z)
//! ```
//!
//! Models cache the Cholesky factor of `K + s^2 I` and the weight vector
//! `alpha`; the cache is rebuilt eagerly on any dataset mutation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Dyn};

use crate::prob::NormalSampler;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("hyperparameter {what} must be positive")]
    NonPositiveHyper { what: &'static str },
    #[error("factorization failed for output dimension {output}")]
    Factorization { output: usize },
    #[error("hyperparameter fit failed: {trace}")]
    FitFailed { trace: String },
    #[error("dataset must contain at least {needed} points, has {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// Squared-exponential kernel
/// `k(z, z') = sf2 * exp(-1/2 (z - z')^T L^-1 (z - z'))`
/// with `L = diag(length_scales)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeKernel {
    length_scales: DVector<f64>,
    signal_variance: f64,
}

impl SeKernel {
    pub fn new(length_scales: DVector<f64>, signal_variance: f64) -> Result<Self, GpError> {
        if length_scales.iter().any(|&l| !(l > 0.0)) {
            return Err(GpError::NonPositiveHyper {
                what: "length scale",
            });
        }
        if !(signal_variance > 0.0) {
            return Err(GpError::NonPositiveHyper {
                what: "signal variance",
            });
        }
        Ok(Self {
            length_scales,
            signal_variance,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.length_scales.len()
    }

    pub fn length_scales(&self) -> &DVector<f64> {
        &self.length_scales
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn eval(&self, zi: &DVector<f64>, zj: &DVector<f64>) -> f64 {
        assert_eq!(zi.len(), self.input_dim(), "kernel input dimension");
        assert_eq!(zj.len(), self.input_dim(), "kernel input dimension");
        let mut q = 0.0;
        for k in 0..zi.len() {
            let d = zi[k] - zj[k];
            q += d * d / self.length_scales[k];
        }
        self.signal_variance * libm::exp(-0.5 * q)
    }

    /// Gradient of `eval` with respect to the first argument.
    pub fn grad_zi(&self, zi: &DVector<f64>, zj: &DVector<f64>) -> DVector<f64> {
        let k = self.eval(zi, zj);
        DVector::from_fn(zi.len(), |r, _| {
            -k * (zi[r] - zj[r]) / self.length_scales[r]
        })
    }
}

/// Per-output prior mean over the GP input space.
#[derive(Clone)]
pub enum PriorMean {
    Zero,
    Custom {
        /// Value of every output's prior mean at `z` (length `n_d`).
        f: alloc::sync::Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
        /// Jacobian of the prior mean at `z` (`n_d` x `n_z`).
        grad: alloc::sync::Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    },
}

impl PriorMean {
    pub fn is_zero(&self) -> bool {
        matches!(self, PriorMean::Zero)
    }

    pub fn value(&self, z: &DVector<f64>, n_d: usize) -> DVector<f64> {
        match self {
            PriorMean::Zero => DVector::zeros(n_d),
            PriorMean::Custom { f, .. } => f(z),
        }
    }

    pub fn jacobian(&self, z: &DVector<f64>, n_d: usize) -> DMatrix<f64> {
        match self {
            PriorMean::Zero => DMatrix::zeros(n_d, z.len()),
            PriorMean::Custom { grad, .. } => grad(z),
        }
    }
}

impl core::fmt::Debug for PriorMean {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PriorMean::Zero => write!(f, "PriorMean::Zero"),
            PriorMean::Custom { .. } => write!(f, "PriorMean::Custom"),
        }
    }
}

/// Training data: inputs are rows of `inputs`, targets rows of `outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    capacity: Option<usize>,
}

impl GpDataset {
    pub fn new(
        inputs: DMatrix<f64>,
        outputs: DMatrix<f64>,
        capacity: Option<usize>,
    ) -> Result<Self, GpError> {
        if inputs.nrows() != outputs.nrows() {
            return Err(GpError::DimensionMismatch {
                context: "dataset rows",
                expected: inputs.nrows(),
                got: outputs.nrows(),
            });
        }
        if inputs.ncols() == 0 || outputs.ncols() == 0 {
            return Err(GpError::DimensionMismatch {
                context: "dataset columns",
                expected: 1,
                got: 0,
            });
        }
        Ok(Self {
            inputs,
            outputs,
            capacity,
        })
    }

    pub fn empty(n_z: usize, n_d: usize, capacity: Option<usize>) -> Self {
        Self {
            inputs: DMatrix::zeros(0, n_z.max(1)),
            outputs: DMatrix::zeros(0, n_d.max(1)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn input_row(&self, j: usize) -> DVector<f64> {
        self.inputs.row(j).transpose()
    }

    /// Appends an observation; when at capacity, the oldest row is evicted.
    pub fn push(&mut self, z: &DVector<f64>, y: &DVector<f64>) -> Result<(), GpError> {
        if z.len() != self.input_dim() {
            return Err(GpError::DimensionMismatch {
                context: "new input",
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        if y.len() != self.output_dim() {
            return Err(GpError::DimensionMismatch {
                context: "new output",
                expected: self.output_dim(),
                got: y.len(),
            });
        }
        let evict = matches!(self.capacity, Some(c) if self.len() >= c && c > 0);
        let start = if evict { 1 } else { 0 };
        let m_new = self.len() - start + 1;
        let mut inputs = DMatrix::zeros(m_new, self.input_dim());
        let mut outputs = DMatrix::zeros(m_new, self.output_dim());
        for (dst, src) in (start..self.len()).enumerate() {
            inputs.row_mut(dst).copy_from(&self.inputs.row(src));
            outputs.row_mut(dst).copy_from(&self.outputs.row(src));
        }
        inputs.row_mut(m_new - 1).copy_from(&z.transpose());
        outputs.row_mut(m_new - 1).copy_from(&y.transpose());
        self.inputs = inputs;
        self.outputs = outputs;
        Ok(())
    }
}

/// Posterior mean/variance (and optionally the mean Jacobian) at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    /// Posterior mean per output (`n_d`).
    pub mean: DVector<f64>,
    /// Posterior variance per output (`n_d`, the diagonal of the full matrix).
    pub variance: DVector<f64>,
    /// `n_d` x `n_z` Jacobian of the posterior mean, when requested.
    pub mean_jacobian: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
struct OutputCache {
    chol: Option<nalgebra::Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

/// Posterior of a GP in "weight form": a basis point set plus, per output,
/// a mean weight vector and a variance precision matrix `W` so that
/// `mean_a(z) = m_a(z) + k_a(z, P) alpha_a` and
/// `var_a(z) = k_a(z, z) - k_a(z, P) W_a k_a(P, z)`.
///
/// Exact moment propagation operates on this representation, which both the
/// full model and the sparse approximation can produce.
#[derive(Debug, Clone)]
pub struct WeightForm {
    pub points: DMatrix<f64>,
    pub alphas: Vec<DVector<f64>>,
    pub precisions: Vec<DMatrix<f64>>,
}

/// Common evaluation surface of full and sparse GP models.
pub trait GpRegressor: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn kernels(&self) -> &[SeKernel];
    fn has_zero_prior_mean(&self) -> bool;
    fn predict(&self, z: &DVector<f64>, want_jacobian: bool) -> GpPrediction;
    fn weight_form(&self) -> WeightForm;
}

/// Full GP model: one SE kernel and noise variance per output dimension,
/// shared training inputs, cached factorizations.
#[derive(Debug)]
pub struct GpModel {
    kernels: Vec<SeKernel>,
    noise_variances: DVector<f64>,
    prior_mean: PriorMean,
    dataset: GpDataset,
    cache: Vec<OutputCache>,
}

impl GpModel {
    pub fn new(
        kernels: Vec<SeKernel>,
        noise_variances: DVector<f64>,
        prior_mean: PriorMean,
        dataset: GpDataset,
    ) -> Result<Self, GpError> {
        if kernels.len() != dataset.output_dim() {
            return Err(GpError::DimensionMismatch {
                context: "kernel count",
                expected: dataset.output_dim(),
                got: kernels.len(),
            });
        }
        if noise_variances.len() != dataset.output_dim() {
            return Err(GpError::DimensionMismatch {
                context: "noise variances",
                expected: dataset.output_dim(),
                got: noise_variances.len(),
            });
        }
        for k in &kernels {
            if k.input_dim() != dataset.input_dim() {
                return Err(GpError::DimensionMismatch {
                    context: "kernel input dimension",
                    expected: dataset.input_dim(),
                    got: k.input_dim(),
                });
            }
        }
        if noise_variances.iter().any(|&v| !(v > 0.0)) {
            return Err(GpError::NonPositiveHyper {
                what: "noise variance",
            });
        }
        let cache = build_cache(&kernels, &noise_variances, &prior_mean, &dataset)?;
        Ok(Self {
            kernels,
            noise_variances,
            prior_mean,
            dataset,
            cache,
        })
    }

    pub fn dataset(&self) -> &GpDataset {
        &self.dataset
    }

    pub fn noise_variances(&self) -> &DVector<f64> {
        &self.noise_variances
    }

    pub fn prior_mean(&self) -> &PriorMean {
        &self.prior_mean
    }

    /// Kernel matrix of the training inputs for output `a` (no noise).
    fn gram(&self, a: usize) -> DMatrix<f64> {
        gram_matrix(&self.kernels[a], self.dataset.inputs())
    }

    /// FIFO append-and-evict; the cache is rebuilt on the new dataset.
    pub fn with_observation(
        &self,
        z: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<GpModel, GpError> {
        let mut dataset = self.dataset.clone();
        dataset.push(z, y)?;
        let cache = build_cache(
            &self.kernels,
            &self.noise_variances,
            &self.prior_mean,
            &dataset,
        )?;
        Ok(GpModel {
            kernels: self.kernels.clone(),
            noise_variances: self.noise_variances.clone(),
            prior_mean: self.prior_mean.clone(),
            dataset,
            cache,
        })
    }

    /// Sum over outputs of the Gaussian log-density of the (centered)
    /// targets under the prior plus noise.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml_impl(false).0
    }

    /// Log marginal likelihood and its gradient with respect to the
    /// log-hyperparameters, one vector `[log l_1.., log sf2, log s2]`
    /// per output dimension.
    pub fn lml_with_grad(&self) -> (f64, Vec<DVector<f64>>) {
        let (v, g) = self.lml_impl(true);
        (v, g.expect("gradient requested"))
    }

    fn lml_impl(&self, want_grad: bool) -> (f64, Option<Vec<DVector<f64>>>) {
        let m = self.dataset.len();
        let n_z = self.dataset.input_dim();
        let mut total = 0.0;
        let mut grads = Vec::new();
        for a in 0..self.output_dim() {
            let cache = &self.cache[a];
            let residual = centered_targets(&self.prior_mean, &self.dataset, a);
            let chol = cache.chol.as_ref().expect("LML needs at least one point");
            let mut logdet = 0.0;
            for i in 0..m {
                logdet += libm::log(chol.l_dirty()[(i, i)]);
            }
            let value = -0.5 * residual.dot(&cache.alpha)
                - logdet
                - 0.5 * m as f64 * libm::log(2.0 * core::f64::consts::PI);
            total += value;
            if want_grad {
                // d LML / d theta_j = 1/2 tr((alpha alpha^T - Kinv) dK/dtheta_j)
                let kinv = chol.inverse();
                let b = &cache.alpha * cache.alpha.transpose() - kinv;
                let gram = self.gram(a);
                let mut g = DVector::zeros(n_z + 2);
                let z = self.dataset.inputs();
                for d in 0..n_z {
                    let ell = self.kernels[a].length_scales()[d];
                    let mut acc = 0.0;
                    for i in 0..m {
                        for j in 0..m {
                            let diff = z[(i, d)] - z[(j, d)];
                            acc += b[(i, j)] * gram[(i, j)] * 0.5 * diff * diff / ell;
                        }
                    }
                    g[d] = 0.5 * acc;
                }
                let mut acc_sf = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        acc_sf += b[(i, j)] * gram[(i, j)];
                    }
                }
                g[n_z] = 0.5 * acc_sf;
                g[n_z + 1] = 0.5 * self.noise_variances[a] * b.trace();
                grads.push(g);
            }
        }
        (total, if want_grad { Some(grads) } else { None })
    }
}

impl GpRegressor for GpModel {
    fn input_dim(&self) -> usize {
        self.dataset.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.dataset.output_dim()
    }

    fn kernels(&self) -> &[SeKernel] {
        &self.kernels
    }

    fn has_zero_prior_mean(&self) -> bool {
        self.prior_mean.is_zero()
    }

    fn predict(&self, z: &DVector<f64>, want_jacobian: bool) -> GpPrediction {
        let n_d = self.output_dim();
        let m = self.dataset.len();
        let prior = self.prior_mean.value(z, n_d);
        let mut mean = prior.clone();
        let mut variance = DVector::zeros(n_d);
        let mut jac = if want_jacobian {
            Some(self.prior_mean.jacobian(z, n_d))
        } else {
            None
        };
        for a in 0..n_d {
            let kernel = &self.kernels[a];
            if m == 0 {
                variance[a] = kernel.signal_variance();
                continue;
            }
            let k_vec = kernel_vector(kernel, self.dataset.inputs(), z);
            let cache = &self.cache[a];
            mean[a] += k_vec.dot(&cache.alpha);
            let v = cache.chol.as_ref().unwrap().solve(&k_vec);
            variance[a] = (kernel.eval(z, z) - k_vec.dot(&v)).max(0.0);
            if let Some(j) = jac.as_mut() {
                // d mean / d z = sum_p alpha_p dk(z, z_p)/dz
                for r in 0..z.len() {
                    let ell = kernel.length_scales()[r];
                    let mut acc = 0.0;
                    for p in 0..m {
                        acc -= cache.alpha[p] * k_vec[p] * (z[r] - self.dataset.inputs()[(p, r)])
                            / ell;
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
        let n_d = self.output_dim();
        let m = self.dataset.len();
        let mut alphas = Vec::with_capacity(n_d);
        let mut precisions = Vec::with_capacity(n_d);
        for a in 0..n_d {
            alphas.push(self.cache[a].alpha.clone());
            let w = match &self.cache[a].chol {
                Some(chol) => chol.inverse(),
                None => DMatrix::zeros(m, m),
            };
            precisions.push(w);
        }
        WeightForm {
            points: self.dataset.inputs().clone(),
            alphas,
            precisions,
        }
    }
}

pub fn gram_matrix(kernel: &SeKernel, inputs: &DMatrix<f64>) -> DMatrix<f64> {
    let m = inputs.nrows();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        let zi = inputs.row(i).transpose();
        for j in 0..=i {
            let zj = inputs.row(j).transpose();
            let v = kernel.eval(&zi, &zj);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub fn kernel_vector(kernel: &SeKernel, inputs: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(inputs.nrows(), |j, _| {
        kernel.eval(&inputs.row(j).transpose(), z)
    })
}

pub fn cross_kernel(kernel: &SeKernel, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        kernel.eval(&a.row(i).transpose(), &b.row(j).transpose())
    })
}

fn centered_targets(prior: &PriorMean, dataset: &GpDataset, a: usize) -> DVector<f64> {
    let m = dataset.len();
    let mut r = DVector::zeros(m);
    for j in 0..m {
        let mj = prior.value(&dataset.input_row(j), dataset.output_dim());
        r[j] = dataset.outputs()[(j, a)] - mj[a];
    }
    r
}

fn build_cache(
    kernels: &[SeKernel],
    noise_variances: &DVector<f64>,
    prior: &PriorMean,
    dataset: &GpDataset,
) -> Result<Vec<OutputCache>, GpError> {
    let m = dataset.len();
    let mut cache = Vec::with_capacity(kernels.len());
    for (a, kernel) in kernels.iter().enumerate() {
        if m == 0 {
            cache.push(OutputCache {
                chol: None,
                alpha: DVector::zeros(0),
            });
            continue;
        }
        let mut k = gram_matrix(kernel, dataset.inputs());
        for i in 0..m {
            k[(i, i)] += noise_variances[a];
        }
        let chol = cholesky_escalating(&k).ok_or(GpError::Factorization { output: a })?;
        let residual = centered_targets(prior, dataset, a);
        let alpha = chol.solve(&residual);
        cache.push(OutputCache {
            chol: Some(chol),
            alpha,
        });
    }
    Ok(cache)
}

pub(crate) fn cholesky_escalating(k: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, Dyn>> {
    const JITTERS: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];
    for &jitter in &JITTERS {
        let mut trial = k.clone();
        for i in 0..trial.nrows() {
            trial[(i, i)] += jitter;
        }
        if let Some(c) = trial.cholesky() {
            return Some(c);
        }
    }
    None
}

/// Initial hyperparameters for [`fit_hyperparameters`], shared by all
/// output dimensions.
#[derive(Debug, Clone)]
pub struct HyperInit {
    pub length_scales: DVector<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

/// Maximum-likelihood hyperparameters by gradient ascent in log-space with
/// backtracking line search, restarted from log-uniform perturbations of
/// `init`. Outputs are fitted independently; the best restart wins.
///
/// The fit assumes a zero prior mean. `seed` drives the restart
/// perturbations, making the whole fit deterministic.
pub fn fit_hyperparameters(
    dataset: &GpDataset,
    init: &HyperInit,
    restarts: usize,
    max_iters: usize,
    seed: u64,
) -> Result<GpModel, GpError> {
    if dataset.len() < 2 {
        return Err(GpError::TooFewPoints {
            needed: 2,
            got: dataset.len(),
        });
    }
    let n_z = dataset.input_dim();
    if init.length_scales.len() != n_z {
        return Err(GpError::DimensionMismatch {
            context: "init length scales",
            expected: n_z,
            got: init.length_scales.len(),
        });
    }
    let mut theta0 = DVector::zeros(n_z + 2);
    for d in 0..n_z {
        theta0[d] = libm::log(init.length_scales[d]);
    }
    theta0[n_z] = libm::log(init.signal_variance);
    theta0[n_z + 1] = libm::log(init.noise_variance);

    let mut sampler = NormalSampler::new(seed);
    let mut kernels = Vec::with_capacity(dataset.output_dim());
    let mut noises = DVector::zeros(dataset.output_dim());
    let mut trace = String::new();
    for a in 0..dataset.output_dim() {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for r in 0..restarts.max(1) {
            let mut theta = theta0.clone();
            if r > 0 {
                for v in theta.iter_mut() {
                    *v += 2.0 * sampler.uniform() - 1.0;
                }
            }
            match ascend(dataset, a, theta, max_iters) {
                Some((value, theta)) => {
                    if best.as_ref().map_or(true, |(b, _)| value > *b) {
                        best = Some((value, theta));
                    }
                }
                None => {
                    trace.push_str(&format!("output {a} restart {r}: diverged; "));
                }
            }
        }
        let (_, theta) = best.ok_or_else(|| GpError::FitFailed {
            trace: trace.clone(),
        })?;
        let ls = DVector::from_fn(n_z, |d, _| libm::exp(theta[d]));
        kernels.push(SeKernel::new(ls, libm::exp(theta[n_z]))?);
        noises[a] = libm::exp(theta[n_z + 1]);
    }
    GpModel::new(kernels, noises, PriorMean::Zero, dataset.clone())
}

/// Single-output log marginal likelihood of `dataset` column `a` under
/// log-hyperparameters `theta`, with gradient. `None` when the kernel
/// matrix cannot be factorized.
fn lml_single(dataset: &GpDataset, a: usize, theta: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
    let n_z = dataset.input_dim();
    let ls = DVector::from_fn(n_z, |d, _| libm::exp(theta[d]));
    let kernel = SeKernel::new(ls, libm::exp(theta[n_z])).ok()?;
    let noise = libm::exp(theta[n_z + 1]);
    let m = dataset.len();
    let mut k = gram_matrix(&kernel, dataset.inputs());
    for i in 0..m {
        k[(i, i)] += noise;
    }
    let chol = k.cholesky()?;
    let y = dataset.outputs().column(a).clone_owned();
    let alpha = chol.solve(&y);
    let mut logdet = 0.0;
    for i in 0..m {
        logdet += libm::log(chol.l_dirty()[(i, i)]);
    }
    let value =
        -0.5 * y.dot(&alpha) - logdet - 0.5 * m as f64 * libm::log(2.0 * core::f64::consts::PI);
    if !value.is_finite() {
        return None;
    }
    let kinv = chol.inverse();
    let b = &alpha * alpha.transpose() - kinv;
    let gram = gram_matrix(&kernel, dataset.inputs());
    let z = dataset.inputs();
    let mut g = DVector::zeros(n_z + 2);
    for d in 0..n_z {
        let ell = kernel.length_scales()[d];
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let diff = z[(i, d)] - z[(j, d)];
                acc += b[(i, j)] * gram[(i, j)] * 0.5 * diff * diff / ell;
            }
        }
        g[d] = 0.5 * acc;
    }
    let mut acc_sf = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc_sf += b[(i, j)] * gram[(i, j)];
        }
    }
    g[n_z] = 0.5 * acc_sf;
    g[n_z + 1] = 0.5 * noise * b.trace();
    Some((value, g))
}

const THETA_MIN: f64 = -13.8; // exp(-13.8) ~ 1e-6
const THETA_MAX: f64 = 13.8;

fn clamp_theta(theta: &mut DVector<f64>) {
    for v in theta.iter_mut() {
        *v = v.clamp(THETA_MIN, THETA_MAX);
    }
}

fn ascend(
    dataset: &GpDataset,
    a: usize,
    mut theta: DVector<f64>,
    max_iters: usize,
) -> Option<(f64, DVector<f64>)> {
    clamp_theta(&mut theta);
    let (mut value, mut grad) = lml_single(dataset, a, &theta)?;
    for _ in 0..max_iters {
        let gnorm = grad.amax();
        if gnorm < 1e-6 {
            break;
        }
        let mut step = 1.0 / (1.0 + gnorm);
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand = &theta + step * &grad;
            clamp_theta(&mut cand);
            if let Some((v, g)) = lml_single(dataset, a, &cand) {
                if v > value + 1e-4 * step * grad.norm_squared() {
                    theta = cand;
                    value = v;
                    grad = g;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some((value, theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{dmatrix_from, dvector_from, mvn_sample, Covariance, GaussianBelief};
    use approx::assert_abs_diff_eq;

    fn toy_kernel() -> SeKernel {
        SeKernel::new(dvector_from(&[1.0, 1.0]), 1.0).unwrap()
    }

    fn random_dataset(m: usize, n_z: usize, n_d: usize, seed: u64) -> GpDataset {
        let mut s = NormalSampler::new(seed);
        let inputs = DMatrix::from_fn(m, n_z, |_, _| s.next_normal());
        let outputs = DMatrix::from_fn(m, n_d, |_, _| s.next_normal());
        GpDataset::new(inputs, outputs, None).unwrap()
    }

    fn model_from(dataset: GpDataset, ls: &[f64], sf2: f64, s2: f64) -> GpModel {
        let n_d = dataset.output_dim();
        let kernels = (0..n_d)
            .map(|_| SeKernel::new(dvector_from(ls), sf2).unwrap())
            .collect();
        GpModel::new(
            kernels,
            DVector::from_element(n_d, s2),
            PriorMean::Zero,
            dataset,
        )
        .unwrap()
    }

    #[test]
    fn kernel_zero_distance_is_signal_variance() {
        let k = toy_kernel();
        let z = dvector_from(&[0.3, -0.7]);
        assert_abs_diff_eq!(k.eval(&z, &z), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn kernel_hand_value() {
        let k = toy_kernel();
        let zi = dvector_from(&[1.0, 0.0]);
        let zj = dvector_from(&[0.0, 0.0]);
        assert_abs_diff_eq!(k.eval(&zi, &zj), libm::exp(-0.5), epsilon = 1e-15);
    }

    #[test]
    fn kernel_symmetry() {
        let k = SeKernel::new(dvector_from(&[0.4, 2.5]), 1.7).unwrap();
        let mut s = NormalSampler::new(5);
        for _ in 0..50 {
            let zi = s.normal_vector(2);
            let zj = s.normal_vector(2);
            assert_eq!(k.eval(&zi, &zj), k.eval(&zj, &zi));
        }
    }

    #[test]
    fn kernel_rejects_bad_hypers() {
        assert!(SeKernel::new(dvector_from(&[0.0]), 1.0).is_err());
        assert!(SeKernel::new(dvector_from(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn empty_model_recovers_prior() {
        let dataset = GpDataset::empty(2, 1, None);
        let model = GpModel::new(
            alloc::vec![SeKernel::new(dvector_from(&[1.0, 1.0]), 2.5).unwrap()],
            dvector_from(&[0.01]),
            PriorMean::Zero,
            dataset,
        )
        .unwrap();
        let p = model.predict(&dvector_from(&[0.4, 0.1]), true);
        assert_eq!(p.mean[0], 0.0);
        assert_abs_diff_eq!(p.variance[0], 2.5, epsilon = 1e-15);
        assert_eq!(p.mean_jacobian.unwrap(), DMatrix::zeros(1, 2));
    }

    #[test]
    fn single_point_alpha_scalar_formula() {
        let dataset =
            GpDataset::new(dmatrix_from(1, 1, &[0.5]), dmatrix_from(1, 1, &[2.0]), None).unwrap();
        let model = model_from(dataset, &[1.0], 1.5, 0.1);
        // mean at the training input: k * y / (k(z,z) + s2)
        let p = model.predict(&dvector_from(&[0.5]), false);
        assert_abs_diff_eq!(p.mean[0], 1.5 * 2.0 / (1.5 + 0.1), epsilon = 1e-12);
    }

    #[test]
    fn duplicate_inputs_regularized_by_noise() {
        let dataset = GpDataset::new(
            dmatrix_from(2, 1, &[0.5, 0.5]),
            dmatrix_from(2, 1, &[1.0, 1.2]),
            None,
        )
        .unwrap();
        let model = model_from(dataset, &[1.0], 1.0, 0.05);
        let p = model.predict(&dvector_from(&[0.5]), false);
        assert!(p.mean[0].is_finite());
    }

    #[test]
    fn interpolation_limit() {
        let dataset = GpDataset::new(
            dmatrix_from(3, 1, &[-1.0, 0.0, 1.0]),
            dmatrix_from(3, 1, &[0.3, -0.2, 0.8]),
            None,
        )
        .unwrap();
        let model = model_from(dataset, &[0.5], 1.0, 1e-12);
        let p = model.predict(&dvector_from(&[0.0]), false);
        assert_abs_diff_eq!(p.mean[0], -0.2, epsilon = 1e-4);
        assert!(p.variance[0] <= 1e-6);
    }

    #[test]
    fn matches_dense_inverse_oracle() {
        // Independent path: explicit LU inverse, no Cholesky cache.
        let dataset = random_dataset(10, 1, 1, 11);
        let model = model_from(dataset.clone(), &[0.8], 1.3, 0.05);
        let kernel = &model.kernels()[0];
        let mut k = gram_matrix(kernel, dataset.inputs());
        for i in 0..10 {
            k[(i, i)] += 0.05;
        }
        let kinv = k.try_inverse().unwrap();
        let y = dataset.outputs().column(0).clone_owned();
        let mut s = NormalSampler::new(13);
        for _ in 0..20 {
            let z = s.normal_vector(1);
            let kv = kernel_vector(kernel, dataset.inputs(), &z);
            let mean = kv.dot(&(&kinv * &y));
            let var = kernel.eval(&z, &z) - (kv.transpose() * &kinv * &kv)[(0, 0)];
            let p = model.predict(&z, false);
            assert_abs_diff_eq!(p.mean[0], mean, epsilon = 1e-8);
            assert_abs_diff_eq!(p.variance[0], var.max(0.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn posterior_variance_below_prior() {
        let dataset = random_dataset(25, 2, 2, 3);
        let model = model_from(dataset, &[0.7, 1.2], 2.0, 0.01);
        let mut s = NormalSampler::new(4);
        for _ in 0..50 {
            let z = s.normal_vector(2);
            let p = model.predict(&z, false);
            for a in 0..2 {
                assert!(p.variance[a] <= model.kernels()[a].signal_variance() + 1e-10);
            }
        }
    }

    #[test]
    fn variance_independent_of_targets() {
        let d1 = random_dataset(15, 2, 1, 21);
        let mut outputs2 = d1.outputs().clone();
        outputs2 *= -3.5;
        let d2 = GpDataset::new(d1.inputs().clone(), outputs2, None).unwrap();
        let m1 = model_from(d1, &[0.9, 0.9], 1.0, 0.02);
        let m2 = model_from(d2, &[0.9, 0.9], 1.0, 0.02);
        let z = dvector_from(&[0.3, -0.4]);
        assert_eq!(
            m1.predict(&z, false).variance,
            m2.predict(&z, false).variance
        );
    }

    #[test]
    fn posterior_mean_linear_in_targets() {
        let base = random_dataset(12, 1, 1, 31);
        let mut s = NormalSampler::new(32);
        let y2 = DMatrix::from_fn(12, 1, |_, _| s.next_normal());
        let sum = base.outputs() + &y2;
        let m_a = model_from(base.clone(), &[0.6], 1.0, 0.05);
        let m_b = model_from(
            GpDataset::new(base.inputs().clone(), y2, None).unwrap(),
            &[0.6],
            1.0,
            0.05,
        );
        let m_ab = model_from(
            GpDataset::new(base.inputs().clone(), sum, None).unwrap(),
            &[0.6],
            1.0,
            0.05,
        );
        let z = dvector_from(&[0.1]);
        assert_abs_diff_eq!(
            m_ab.predict(&z, false).mean[0],
            m_a.predict(&z, false).mean[0] + m_b.predict(&z, false).mean[0],
            epsilon = 1e-10
        );
    }

    #[test]
    fn mean_jacobian_matches_finite_differences() {
        let dataset = random_dataset(20, 3, 2, 41);
        let model = model_from(dataset, &[0.8, 1.1, 0.5], 1.4, 0.02);
        let mut s = NormalSampler::new(42);
        let h = 1e-5;
        for _ in 0..20 {
            let z = s.normal_vector(3);
            let jac = model.predict(&z, true).mean_jacobian.unwrap();
            for r in 0..3 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[r] += h;
                zm[r] -= h;
                let fp = model.predict(&zp, false).mean;
                let fm = model.predict(&zm, false).mean;
                for a in 0..2 {
                    let fd = (fp[a] - fm[a]) / (2.0 * h);
                    let err = (jac[(a, r)] - fd).abs();
                    assert!(
                        err <= 1e-5 * (1.0 + fd.abs()),
                        "jac ({a},{r}): {} vs fd {}",
                        jac[(a, r)],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn lml_scalar_formula() {
        let dataset =
            GpDataset::new(dmatrix_from(1, 1, &[0.0]), dmatrix_from(1, 1, &[0.7]), None).unwrap();
        let model = model_from(dataset, &[1.0], 1.2, 0.3);
        let total = 1.2 + 0.3;
        let expected =
            -0.5 * 0.7 * 0.7 / total - 0.5 * libm::log(2.0 * core::f64::consts::PI * total);
        assert_abs_diff_eq!(model.log_marginal_likelihood(), expected, epsilon = 1e-12);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let dataset = random_dataset(12, 2, 1, 51);
        let theta = dvector_from(&[
            libm::log(0.7),
            libm::log(1.3),
            libm::log(1.1),
            libm::log(0.08),
        ]);
        let (_, grad) = lml_single(&dataset, 0, &theta).unwrap();
        let h = 1e-5;
        for j in 0..4 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let (vp, _) = lml_single(&dataset, 0, &tp).unwrap();
            let (vm, _) = lml_single(&dataset, 0, &tm).unwrap();
            let fd = (vp - vm) / (2.0 * h);
            let err = (grad[j] - fd).abs();
            assert!(
                err <= 1e-4 * (1.0 + fd.abs()),
                "grad[{j}] {} vs fd {}",
                grad[j],
                fd
            );
        }
    }

    #[test]
    fn lml_zero_targets_is_normalization_only() {
        let inputs = dmatrix_from(3, 1, &[0.0, 0.5, 1.0]);
        let zeros = DMatrix::zeros(3, 1);
        let dataset = GpDataset::new(inputs, zeros, None).unwrap();
        let model = model_from(dataset, &[1.0], 1.0, 0.1);
        let (v, _) = model.lml_with_grad();
        // Pure normalization: -logdet/2 - M/2 log(2 pi).
        let mut k = gram_matrix(&model.kernels()[0], model.dataset().inputs());
        for i in 0..3 {
            k[(i, i)] += 0.1;
        }
        let expected =
            -0.5 * libm::log(k.determinant()) - 1.5 * libm::log(2.0 * core::f64::consts::PI);
        assert_abs_diff_eq!(v, expected, epsilon = 1e-10);
    }

    #[test]
    fn fit_recovers_generating_hypers() {
        // Sample targets from a known SE-kernel GP, then fit.
        let m = 50;
        let mut s = NormalSampler::new(101);
        let inputs = DMatrix::from_fn(m, 1, |_, _| 2.0 * s.next_normal());
        let gen_kernel = SeKernel::new(dvector_from(&[0.5]), 1.0).unwrap();
        let mut k = gram_matrix(&gen_kernel, &inputs);
        for i in 0..m {
            k[(i, i)] += 0.01;
        }
        let belief =
            GaussianBelief::new(DVector::zeros(m), Covariance::repair(&k).unwrap()).unwrap();
        let y = mvn_sample(&belief, 1, 102).unwrap().row(0).transpose();
        let dataset =
            GpDataset::new(inputs, DMatrix::from_column_slice(m, 1, y.as_slice()), None).unwrap();
        let init = HyperInit {
            length_scales: dvector_from(&[1.5]),
            signal_variance: 0.5,
            noise_variance: 0.05,
        };
        let model = fit_hyperparameters(&dataset, &init, 5, 200, 63).unwrap();
        let dl = libm::log(model.kernels()[0].length_scales()[0]) - libm::log(0.5);
        let dsf = libm::log(model.kernels()[0].signal_variance()) - libm::log(1.0);
        let dn = libm::log(model.noise_variances()[0]) - libm::log(0.01);
        assert!(dl.abs() < 0.5, "length scale off by {dl} in log space");
        assert!(dsf.abs() < 0.5, "signal variance off by {dsf} in log space");
        assert!(dn.abs() < 0.5, "noise off by {dn} in log space");
    }

    #[test]
    fn fit_does_not_decrease_from_generating_point() {
        let dataset = random_dataset(20, 1, 1, 71);
        let init = HyperInit {
            length_scales: dvector_from(&[1.0]),
            signal_variance: 1.0,
            noise_variance: 0.1,
        };
        let theta0 = dvector_from(&[0.0, 0.0, libm::log(0.1)]);
        let (v0, _) = lml_single(&dataset, 0, &theta0).unwrap();
        let model = fit_hyperparameters(&dataset, &init, 1, 200, 72).unwrap();
        assert!(model.log_marginal_likelihood() >= v0 - 1e-9);
    }

    #[test]
    fn fit_zero_targets_shrinks_signal() {
        let inputs = dmatrix_from(6, 1, &[0.0, 0.4, 0.8, 1.2, 1.6, 2.0]);
        let dataset = GpDataset::new(inputs, DMatrix::zeros(6, 1), None).unwrap();
        let init = HyperInit {
            length_scales: dvector_from(&[1.0]),
            signal_variance: 1.0,
            noise_variance: 0.1,
        };
        let model = fit_hyperparameters(&dataset, &init, 3, 200, 73).unwrap();
        assert!(model.kernels()[0].signal_variance() < 0.05);
        let p = model.predict(&dvector_from(&[1.0]), false);
        assert!(p.mean[0].abs() < 1e-6);
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut dataset = GpDataset::empty(1, 1, Some(30));
        for j in 0..30 {
            dataset
                .push(&dvector_from(&[j as f64]), &dvector_from(&[0.0]))
                .unwrap();
        }
        assert_eq!(dataset.len(), 30);
        dataset
            .push(&dvector_from(&[99.0]), &dvector_from(&[1.0]))
            .unwrap();
        assert_eq!(dataset.len(), 30);
        assert_eq!(dataset.inputs()[(0, 0)], 1.0); // oldest evicted
        assert_eq!(dataset.inputs()[(29, 0)], 99.0);
    }

    #[test]
    fn push_below_capacity_grows() {
        let mut dataset = GpDataset::empty(1, 1, Some(30));
        for j in 0..5 {
            dataset
                .push(&dvector_from(&[j as f64]), &dvector_from(&[0.0]))
                .unwrap();
        }
        dataset
            .push(&dvector_from(&[5.0]), &dvector_from(&[0.0]))
            .unwrap();
        assert_eq!(dataset.len(), 6);
    }

    #[test]
    fn observation_update_then_query() {
        let dataset = GpDataset::empty(1, 1, Some(10));
        let model = GpModel::new(
            alloc::vec![SeKernel::new(dvector_from(&[1.0]), 1.0).unwrap()],
            dvector_from(&[1e-10]),
            PriorMean::Zero,
            dataset,
        )
        .unwrap();
        let updated = model
            .with_observation(&dvector_from(&[0.5]), &dvector_from(&[0.9]))
            .unwrap();
        let p = updated.predict(&dvector_from(&[0.5]), false);
        assert_abs_diff_eq!(p.mean[0], 0.9, epsilon = 1e-6);
    }

    #[test]
    fn push_dimension_mismatch_rejected() {
        let mut dataset = GpDataset::empty(2, 1, None);
        let err = dataset.push(&dvector_from(&[0.0]), &dvector_from(&[0.0]));
        assert!(err.is_err());
    }
}
