//! Ensemble state and the per-step linear algebra shared by every flow:
//! the Gram-type matrix `M_t`, its regularized solve, self-normalized
//! importance weights, and the weighted and unweighted kernel means.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{imq_grad1_into, kernel_matrix, KernelSpec};
use crate::targets::TargetModel;

/// `J` particles in `R^d` (stored row-major) at pseudo-time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    data: Vec<f64>,
    len: usize,
    dim: usize,
    t: f64,
}

impl Ensemble {
    pub fn from_rows(data: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::InvalidParameter(
                "an ensemble needs at least one particle and one dimension".into(),
            ));
        }
        if data.len() != len * dim {
            return Err(Error::DimensionMismatch {
                expected: len * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "particle position",
            });
        }
        Ok(Self {
            data,
            len,
            dim,
            t: 0.0,
        })
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Positions as a J×d matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len, self.dim, &self.data)
    }

    /// New ensemble with particle `j` taken from position `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let data = order
            .iter()
            .flat_map(|&j| self.particle(j).iter().copied())
            .collect();
        Self {
            data,
            len: self.len,
            dim: self.dim,
            t: self.t,
        }
    }

    /// Ensemble at time `t` obtained by adding `increment` (J×d, row-major).
    pub(crate) fn displaced(&self, increment: &[f64], t: f64) -> Result<Self> {
        debug_assert_eq!(increment.len(), self.data.len());
        let data = self
            .data
            .iter()
            .zip(increment)
            .map(|(x, dx)| x + dx)
            .collect();
        Ok(Self::from_rows(data, self.len, self.dim)?.with_time(t))
    }
}

/// Kernel quantities shared by all updates within one step.
#[derive(Debug, Clone)]
pub struct FlowWorkspace {
    /// Bandwidth used for every kernel evaluation in this step.
    pub h: f64,
    /// `K(X⁽ⁱ⁾, X⁽ʲ⁾)`.
    pub kmat: DMatrix<f64>,
    /// J × (J·d) matrix; columns `i·d .. i·d + d` hold the Jacobian of the
    /// basis-kernel vector at `X⁽ⁱ⁾`, i.e. row `l` is `∇₁K(X⁽ⁱ⁾, X⁽ˡ⁾)`.
    pub grads: DMatrix<f64>,
    /// `(1/J) Σᵢ ∇K_t(X⁽ⁱ⁾) ∇K_t(X⁽ⁱ⁾)ᵀ`.
    pub m: DMatrix<f64>,
    dim: usize,
}

impl FlowWorkspace {
    pub fn new(ensemble: &Ensemble, spec: &KernelSpec) -> Self {
        let h = spec.bandwidth_for(ensemble);
        Self::with_bandwidth(ensemble, h)
    }

    pub fn with_bandwidth(ensemble: &Ensemble, h: f64) -> Self {
        let kmat = kernel_matrix(ensemble, h);
        let grads = stacked_jacobians(ensemble, h);
        let m = gram_from_jacobians(&grads);
        Self {
            h,
            kmat,
            grads,
            m,
            dim: ensemble.dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.kmat.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// J×d Jacobian of the basis-kernel vector at particle `i`.
    pub fn jacobian(&self, i: usize) -> DMatrix<f64> {
        self.grads.columns(i * self.dim, self.dim).into_owned()
    }

    /// Rows `∇K_t(X⁽ʲ⁾)ᵀ coeffs` for every particle, flattened row-major.
    pub fn map_displacement(&self, coeffs: &DVector<f64>) -> Vec<f64> {
        // (gradsᵀ · coeffs)[j·d + k] = Σ_l coeffs_l ∇₁K(X⁽ʲ⁾, X⁽ˡ⁾)_k
        let out = self.grads.tr_mul(coeffs);
        out.as_slice().to_vec()
    }
}

fn stacked_jacobians(ensemble: &Ensemble, h: f64) -> DMatrix<f64> {
    let (n, d) = (ensemble.len(), ensemble.dim());
    let mut grads = DMatrix::zeros(n, n * d);
    let mut g = vec![0.0; d];
    for i in 0..n {
        let xi = ensemble.particle(i);
        for l in 0..n {
            if l == i {
                continue;
            }
            imq_grad1_into(xi, ensemble.particle(l), h, &mut g);
            for k in 0..d {
                grads[(l, i * d + k)] = g[k];
            }
        }
    }
    grads
}

fn gram_from_jacobians(grads: &DMatrix<f64>) -> DMatrix<f64> {
    let n = grads.nrows();
    let mut m = grads * grads.transpose();
    m /= n as f64;
    // exact symmetry regardless of the product kernel's blocking
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn assemble_m(ensemble: &Ensemble, h: f64) -> DMatrix<f64> {
    gram_from_jacobians(&stacked_jacobians(ensemble, h))
}

pub fn regularize(m: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "regularization must be nonnegative, got {lambda}"
        )));
    }
    let mut out = m.clone();
    if lambda > 0.0 {
        for i in 0..out.nrows() {
            out[(i, i)] += lambda;
        }
    }
    Ok(out)
}

/// Solves `mreg · x = rhs` for symmetric positive-definite `mreg` by Cholesky.
///
/// `lambda` only labels the error when the factorization fails.
pub fn solve_m(mreg: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let size = mreg.nrows();
    let chol = Cholesky::new(mreg.clone()).ok_or(Error::NotPositiveDefinite { size, lambda })?;
    let x = chol.solve(rhs);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NotPositiveDefinite { size, lambda })
    }
}

/// Solves `(M + λI) x = rhs`. If the factorization fails, retries once with
/// `λ' = max(λ, 1e-8 · trace(M) / J)` and logs a warning.
pub fn solve_regularized(
    m: &DMatrix<f64>,
    lambda: f64,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    match solve_m(&regularize(m, lambda)?, rhs, lambda) {
        Ok(x) => Ok(x),
        Err(err @ Error::NotPositiveDefinite { .. }) => {
            let n = m.nrows() as f64;
            let fallback = lambda.max(1e-8 * m.trace() / n);
            if fallback > lambda {
                log::warn!(
                    "M_t + {lambda:e} I is not positive definite; retrying with lambda = {fallback:e}"
                );
                solve_m(&regularize(m, fallback)?, rhs, fallback)
            } else {
                Err(err)
            }
        }
        Err(e) => Err(e),
    }
}

pub fn log_ratios(ensemble: &Ensemble, target: &dyn TargetModel) -> Result<Vec<f64>> {
    ensemble
        .rows()
        .enumerate()
        .map(|(j, x)| {
            let r = target.log_ratio(x);
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::NonFiniteLogRatio { particle: j })
            }
        })
        .collect()
}

/// Self-normalized weights `∝ exp(Δt · r_j)`, computed in the log domain.
pub fn weights_from_log_ratios(ratios: &[f64], dt: f64) -> Result<DVector<f64>> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "time step must be nonnegative, got {dt}"
        )));
    }
    if let Some(j) = ratios.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFiniteLogRatio { particle: j });
    }
    let scaled: Vec<f64> = ratios.iter().map(|r| dt * r).collect();
    let top = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = scaled.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(DVector::from_iterator(
        unnorm.len(),
        unnorm.into_iter().map(|u| u / total),
    ))
}

pub fn importance_weights(
    ensemble: &Ensemble,
    target: &dyn TargetModel,
    dt: f64,
) -> Result<DVector<f64>> {
    weights_from_log_ratios(&log_ratios(ensemble, target)?, dt)
}

pub fn uniform_weights(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// `(a, b)`: kernel means over the unweighted and weighted ensemble.
pub fn kernel_means(
    workspace: &FlowWorkspace,
    weights: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = workspace.len();
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: weights.len(),
        });
    }
    let a = &workspace.kmat * uniform_weights(n);
    let b = &workspace.kmat * weights;
    Ok((a, b))
}
