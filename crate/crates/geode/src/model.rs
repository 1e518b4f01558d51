//! Model types, priors, truncated-distribution samplers, and the two
//! likelihood paths.
//!
//! Each tree node carries a Gaussian with covariance `ΦΣΦᵀ + σ²I`, where
//! `Σ = diag(α²)` lives on the node's retained dimensions. The shrinkage
//! variables are `u = (1 + σ⁻²α²)⁻¹`, so `α²` is never stored — it is always
//! derived as `σ²(1/u − 1)`. With the sufficient statistics `A = ỹᵀỹ` and
//! `Z = Φᵀỹ`, the log-density reduces to
//!
//! ```text
//! −(D/2)·log(2πσ²) + ½·Σₘ log uₘ − (1/2σ²)·[A − Σₘ (1−uₘ)Zₘ²]
//! ```
//!
//! summed over retained dimensions (the matrix-inversion and determinant
//! identities for a low-rank-plus-isotropic covariance). The dense path
//! builds the covariance explicitly and exists as the slow oracle against
//! which the fast path is verified.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::dict::PartialStats;
use crate::error::{GeodeError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest ambient dimension the dense likelihood oracle accepts.
pub const DENSE_GUARD: usize = 2000;

/// Shape threshold beyond which the truncated-gamma sampler switches to its
/// boundary-layer approximation (the exact CDF underflows there).
pub const HUGE_SHAPE: f64 = 1e6;

/// All sampler hyperparameters and run lengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Shape of the gamma prior on σ⁻² (one draw per scale).
    pub a_sigma: f64,
    /// Rate of the gamma prior on σ⁻².
    pub b_sigma: f64,
    /// Rate of the unit-shifted exponential prior on τ.
    pub a_tau: f64,
    /// Stopping-probability prior: S ~ Beta(1, a_stop).
    pub a_stop: f64,
    /// Branching prior: R ~ Beta(b_branch, b_branch).
    pub b_branch: f64,
    /// Adaptation schedule intercept: p(t) = exp(c0 + c1·t).
    pub c0: f64,
    /// Adaptation schedule slope (negative: adaptation dies out).
    pub c1: f64,
    /// Relative-variance threshold below which a dimension is deleted.
    pub tol: f64,
    /// Upper bound on per-node local dimension (basis width).
    pub d_upper: usize,
    /// Maximum tree depth L.
    pub max_depth: usize,
    /// Smallest cell the tree builder may create; defaults to 2·d_upper.
    pub min_cell_size: Option<usize>,
    /// Total Gibbs iterations.
    pub iters: usize,
    /// Iterations discarded before snapshots are kept.
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in snapshot.
    pub thin: usize,
    /// Master RNG seed.
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            a_sigma: 0.5,
            b_sigma: 0.5,
            a_tau: 0.05,
            a_stop: 1.0,
            b_branch: 1.0,
            c0: -1.0,
            c1: -0.005,
            tol: 1e-4,
            d_upper: 10,
            max_depth: 6,
            min_cell_size: None,
            iters: 1000,
            burn_in: 500,
            thin: 1,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("a_tau", self.a_tau),
            ("a_stop", self.a_stop),
            ("b_branch", self.b_branch),
            ("tol", self.tol),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(GeodeError::InvalidHyper(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !self.c0.is_finite() || !self.c1.is_finite() {
            return Err(GeodeError::InvalidHyper(
                "adaptation schedule must be finite".into(),
            ));
        }
        if self.d_upper == 0 {
            return Err(GeodeError::InvalidHyper("d_upper must be >= 1".into()));
        }
        if self.thin == 0 {
            return Err(GeodeError::InvalidHyper("thin must be >= 1".into()));
        }
        if self.burn_in > self.iters {
            return Err(GeodeError::InvalidHyper(format!(
                "burn_in ({}) exceeds iters ({})",
                self.burn_in, self.iters
            )));
        }
        Ok(())
    }

    /// Effective minimum cell size for tree building.
    pub fn effective_min_cell(&self) -> usize {
        self.min_cell_size.unwrap_or(2 * self.d_upper).max(2)
    }
}

/// Per-node shrinkage state over the `d_upper` basis dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeParams {
    /// Shrinkage variables u ∈ (0,1]; deleted dimensions are pinned at 1.
    pub u: Vec<f64>,
    /// Multiplicative-shrinkage factors τ ∈ [1,∞).
    pub tau: Vec<f64>,
    /// Retained dimension indices, ascending.
    pub retained: Vec<usize>,
    /// Deleted dimensions with the relative variance they had on deletion.
    pub deleted: Vec<DeletedDim>,
}

/// A deleted dimension and its last-known relative variance, which weighs
/// re-insertion proposals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeletedDim {
    pub dim: usize,
    pub last_ratio: f64,
}

impl NodeParams {
    /// All dimensions retained, with the given initial values.
    pub fn all_retained(u: Vec<f64>, tau: Vec<f64>) -> Self {
        let d = u.len();
        Self {
            u,
            tau,
            retained: (0..d).collect(),
            deleted: Vec::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.u.len()
    }

    /// δ_m = ∏_{k ≤ m, k retained} τ_k — the prior shape for u_m.
    pub fn delta(&self, m: usize) -> f64 {
        self.retained
            .iter()
            .take_while(|&&k| k <= m)
            .map(|&k| self.tau[k])
            .product()
    }

    /// α²_m = σ²(1/u_m − 1) for one dimension.
    pub fn alpha2(&self, m: usize, sigma2: f64) -> f64 {
        alpha2_from_u(self.u[m], sigma2)
    }

    /// α² on the retained dimensions, in retained order.
    pub fn retained_alpha2(&self, sigma2: f64) -> Vec<f64> {
        self.retained
            .iter()
            .map(|&m| alpha2_from_u(self.u[m], sigma2))
            .collect()
    }
}

#[inline]
pub fn alpha2_from_u(u: f64, sigma2: f64) -> f64 {
    sigma2 * (1.0 / u - 1.0)
}

#[inline]
pub fn u_from_alpha2(alpha2: f64, sigma2: f64) -> f64 {
    1.0 / (1.0 + alpha2 / sigma2)
}

/// Per-scale isotropic noise variances σ_s².
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleParams {
    pub sigma2: Vec<f64>,
}

/// Stick-breaking state: stopping and go-right probabilities per node, plus
/// the derived node weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StickState {
    /// Stopping probability S per node (forced to 1 at leaves).
    pub stop: Vec<f64>,
    /// Go-right probability R per node (unused at leaves).
    pub right: Vec<f64>,
    /// Truncated node weights π̃; sums to 1 over all nodes.
    pub weights: Vec<f64>,
}

/// Fast-path Gaussian log-density from sufficient statistics.
///
/// `a` and `z` are the statistics of one observation at one node; the sum
/// runs over the node's retained dimensions only (dimensions with u = 1
/// contribute nothing, exactly).
pub fn node_log_likelihood(
    a: f64,
    z: &[f64],
    params: &NodeParams,
    sigma2: f64,
    dim: usize,
) -> Result<f64> {
    if !a.is_finite() || !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(GeodeError::NonFiniteInput("node_log_likelihood"));
    }
    let mut sum_ln_u = 0.0;
    let mut shrunk = 0.0;
    for &m in &params.retained {
        let u = params.u[m];
        let zm = z[m];
        sum_ln_u += u.ln();
        shrunk += (1.0 - u) * zm * zm;
    }
    let quad = a - shrunk;
    let out = -0.5 * dim as f64 * (LN_2PI + sigma2.ln()) + 0.5 * sum_ln_u - quad / (2.0 * sigma2);
    if out.is_nan() {
        return Err(GeodeError::NonFiniteInput("node_log_likelihood"));
    }
    Ok(out)
}

/// Dense-oracle Gaussian log-density with the covariance `Φ diag(α²) Φᵀ + σ²I`
/// built explicitly. Exists to certify the fast path; refuses very large D.
pub fn dense_log_likelihood(
    y: &DVector<f64>,
    mu: &DVector<f64>,
    phi: &DMatrix<f64>,
    alpha2: &[f64],
    sigma2: f64,
) -> Result<f64> {
    let dim = y.len();
    if dim > DENSE_GUARD {
        return Err(GeodeError::DenseGuard {
            dim,
            max: DENSE_GUARD,
        });
    }
    if mu.len() != dim || phi.nrows() != dim || phi.ncols() != alpha2.len() {
        return Err(GeodeError::DimensionMismatch {
            expected: dim,
            got: mu.len().min(phi.nrows()),
        });
    }
    let mut cov = DMatrix::<f64>::identity(dim, dim) * sigma2;
    for (k, &a2) in alpha2.iter().enumerate() {
        if a2 < 0.0 {
            return Err(GeodeError::NotPositiveDefinite);
        }
        let col = phi.column(k);
        cov.syger(a2, &col, &col, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    let chol = Cholesky::new(cov).ok_or(GeodeError::NotPositiveDefinite)?;
    let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let centred = y - mu;
    let solved = chol.solve(&centred);
    let quad = centred.dot(&solved);
    Ok(-0.5 * (dim as f64 * LN_2PI + ln_det + quad))
}

/// Marginal Gaussian log-density of the observed coordinates of a partially
/// observed row, computed from the O(d²) statistics.
///
/// With `G = I + Σ^{1/2} (Φ_OᵀΦ_O) Σ^{1/2} / σ²` on the retained block,
///
/// ```text
/// log N(y_O; μ_O, Φ_OΣΦ_Oᵀ + σ²I)
///   = −(D_obs/2)·log(2πσ²) − ½·log|G| − B/(2σ²) + ‖L⁻¹Σ^{1/2}C‖²/(2σ⁴)
/// ```
///
/// where `L` is the Cholesky factor of `G`. Dimensions with α² = 0 drop out
/// exactly, so only retained dimensions participate.
pub fn partial_node_loglik(stats: &PartialStats, params: &NodeParams, sigma2: f64) -> Result<f64> {
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(GeodeError::NonFiniteInput("partial_node_loglik"));
    }
    let r = &params.retained;
    let d_r = r.len();
    let mut sqrt_a = DVector::<f64>::zeros(d_r);
    for (k, &m) in r.iter().enumerate() {
        let a2 = alpha2_from_u(params.u[m], sigma2);
        if a2 < 0.0 {
            return Err(GeodeError::SingularSystem);
        }
        sqrt_a[k] = a2.sqrt();
    }
    // G = I + S Gram_r S / σ² on the retained block.
    let mut g = DMatrix::<f64>::zeros(d_r, d_r);
    for i in 0..d_r {
        for j in 0..d_r {
            g[(i, j)] = sqrt_a[i] * stats.gram[(r[i], r[j])] * sqrt_a[j] / sigma2;
        }
        g[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(g).ok_or(GeodeError::SingularSystem)?;
    let ln_det_g = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut sc = DVector::<f64>::zeros(d_r);
    for (k, &m) in r.iter().enumerate() {
        sc[k] = sqrt_a[k] * stats.c[m];
    }
    let solved = chol.solve(&sc);
    let quad = sc.dot(&solved); // Cᵀ(Σ⁻¹ + Gram/σ²)⁻¹C
    let d_obs = stats.n_obs as f64;
    let out = -0.5 * d_obs * (LN_2PI + sigma2.ln()) - 0.5 * ln_det_g - stats.b / (2.0 * sigma2)
        + quad / (2.0 * sigma2 * sigma2);
    if out.is_nan() {
        return Err(GeodeError::NonFiniteInput("partial_node_loglik"));
    }
    Ok(out)
}

/// Posterior of the latent factor η given the observed coordinates of one
/// row at one node: mean `Σ̂_η Φ_Oᵀ(y_O − μ_O)/σ²` and covariance
/// `Σ̂_η = (Σ⁻¹ + Φ_OᵀΦ_O/σ²)⁻¹` on the retained block.
///
/// Returns the retained-block mean and a matrix `T` with `Σ̂_η = TTᵀ`, so a
/// draw is `mean + T·ξ` with ξ standard normal; dimensions with α² = 0 come
/// out exactly zero.
pub fn latent_posterior(
    stats: &PartialStats,
    params: &NodeParams,
    sigma2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r = &params.retained;
    let d_r = r.len();
    let mut sqrt_a = DVector::<f64>::zeros(d_r);
    for (k, &m) in r.iter().enumerate() {
        let a2 = alpha2_from_u(params.u[m], sigma2);
        if a2 < 0.0 {
            return Err(GeodeError::SingularSystem);
        }
        sqrt_a[k] = a2.sqrt();
    }
    let mut g = DMatrix::<f64>::zeros(d_r, d_r);
    for i in 0..d_r {
        for j in 0..d_r {
            g[(i, j)] = sqrt_a[i] * stats.gram[(r[i], r[j])] * sqrt_a[j] / sigma2;
        }
        g[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(g).ok_or(GeodeError::SingularSystem)?;

    // Σ̂_η = Σ^{1/2} G⁻¹ Σ^{1/2}; with G = LLᵀ, T = Σ^{1/2} L⁻ᵀ gives TTᵀ = Σ̂_η.
    let l = chol.l();
    let mut l_inv = DMatrix::<f64>::identity(d_r, d_r);
    if !l.solve_lower_triangular_mut(&mut l_inv) {
        return Err(GeodeError::SingularSystem);
    }
    let t = DMatrix::from_fn(d_r, d_r, |i, j| sqrt_a[i] * l_inv[(j, i)]); // Σ^{1/2}(L⁻¹)ᵀ

    // mean = Σ̂_η C_r / σ² = Σ^{1/2} G⁻¹ Σ^{1/2} C_r / σ².
    let mut sc = DVector::<f64>::zeros(d_r);
    for (k, &m) in r.iter().enumerate() {
        sc[k] = sqrt_a[k] * stats.c[m];
    }
    let solved = chol.solve(&sc);
    let mean = DVector::from_fn(d_r, |k, _| sqrt_a[k] * solved[k] / sigma2);
    Ok((mean, t))
}

/// Exponential on `[1, ∞)` with rate `lambda`, by inverse CDF.
pub fn sample_trunc_exp<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<f64> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(GeodeError::InvalidRate(lambda));
    }
    let u: f64 = rng.gen();
    Ok(trunc_exp_inv_cdf(lambda, u))
}

/// Quantile function of the `[1, ∞)`-truncated exponential.
#[inline]
pub fn trunc_exp_inv_cdf(lambda: f64, u: f64) -> f64 {
    1.0 - (1.0 - u).ln() / lambda
}

/// Gamma(shape, rate) conditioned on `(0, 1)`, by inverse CDF on the
/// regularized lower incomplete gamma, evaluated in log space so that very
/// large shapes (where `P(X < 1)` underflows linearly) still work. Shapes
/// beyond [`HUGE_SHAPE`] use a boundary-layer approximation: the density
/// then concentrates so tightly near 1 that `1 − X` is exponentially
/// distributed to leading order.
pub fn sample_trunc_gamma01<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if shape <= 0.0 || !shape.is_finite() {
        return Err(GeodeError::InvalidShape(shape));
    }
    if rate <= 0.0 || !rate.is_finite() {
        return Err(GeodeError::InvalidRate(rate));
    }
    if shape > HUGE_SHAPE {
        // Density ∝ x^{shape−1}e^{−rate·x}; substituting x = 1 − w/shape gives
        // w ~ Exp((shape − 1 − rate)/shape) to leading order.
        let rate_eff = ((shape - 1.0 - rate) / shape).max(1e-12);
        let w: f64 = -(1.0 - rng.gen::<f64>()).ln() / rate_eff;
        let x = 1.0 - w / shape;
        return Ok(x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
    }
    let u: f64 = rng.gen();
    let u = u.max(f64::MIN_POSITIVE); // keep ln finite
    Ok(trunc_gamma01_inv_cdf(shape, rate, u))
}

/// Quantile function of Gamma(shape, rate) restricted to `(0, 1)`, solved by
/// bisection in log-x on the log-space incomplete gamma.
pub fn trunc_gamma01_inv_cdf(shape: f64, rate: f64, u: f64) -> f64 {
    let ln_total = ln_lower_inc_gamma(shape, rate);
    let target = u.ln() + ln_total;
    // Bisect t = ln x over [ln(min positive), 0].
    let mut lo = -745.0f64;
    let mut hi = 0.0f64;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let val = ln_lower_inc_gamma(shape, rate * mid.exp());
        if val < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = (0.5 * (lo + hi)).exp();
    x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `ln γ(a, z)` — natural log of the lower incomplete gamma function,
/// stable for large `a` where the regularized form underflows.
///
/// For `z < a + 1` the standard ascending series
/// `γ(a, z) = z^a e^{−z} Σ_k z^k / (a(a+1)⋯(a+k))` is evaluated with the
/// prefactor kept in logs; otherwise the regularized incomplete gamma is
/// well-scaled and is used directly.
pub fn ln_lower_inc_gamma(a: f64, z: f64) -> f64 {
    if z <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if z < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut k = 1.0;
        while k < 10_000.0 {
            term *= z / (a + k);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            k += 1.0;
        }
        a * z.ln() - z + sum.ln()
    } else {
        gamma_lr(a, z).ln() + ln_gamma(a)
    }
}
