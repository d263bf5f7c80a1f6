//! Canonical-link GLM machinery: cumulant functions, the deviance loss
//! `b(xᵀβ) − y·xᵀβ`, and its Newton minimizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clip applied to imputed binomial responses before fitting.
pub const BINOMIAL_RESPONSE_CLIP: f64 = 1e-6;

/// Relative threshold on the smallest singular value of the design.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Identity link, `b(t) = t²/2`.
    Gaussian,
    /// Logit link, `b(t) = log(1 + eᵗ)`.
    Binomial,
}

impl Family {
    /// Cumulant function `b`.
    pub fn b(self, t: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * t * t,
            Family::Binomial => softplus(t),
        }
    }

    /// Mean function `b′`.
    pub fn b_prime(self, t: f64) -> f64 {
        match self {
            Family::Gaussian => t,
            Family::Binomial => sigmoid(t),
        }
    }

    /// Variance function `b″`.
    pub fn b_double_prime(self, t: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => {
                let p = sigmoid(t);
                p * (1.0 - p)
            }
        }
    }

    /// Bring an imputed response into the range where the loss is finite.
    pub fn clip_response(self, q: f64) -> f64 {
        match self {
            Family::Gaussian => q,
            Family::Binomial => q.clamp(BINOMIAL_RESPONSE_CLIP, 1.0 - BINOMIAL_RESPONSE_CLIP),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "continuous" | "normal" => Ok(Family::Gaussian),
            "binomial" | "binary" | "logistic" => Ok(Family::Binomial),
            other => Err(Error::InvalidArgument(format!("unknown family '{other}'"))),
        }
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Solver settings for [`fit_glm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    /// Sup-norm tolerance on the mean score.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GlmOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
}

/// `b(xᵀβ) − y·xᵀβ` for one row.
pub fn deviance_loss(x_row: &[f64], y: f64, beta: &[f64], family: Family) -> Result<f64> {
    if x_row.len() != beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "row has {} entries, beta has {}",
            x_row.len(),
            beta.len()
        )));
    }
    let eta: f64 = x_row.iter().zip(beta).map(|(a, b)| a * b).sum();
    let loss = family.b(eta) - y * eta;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("deviance overflow at linear predictor {eta}")))
    }
}

/// Empirical mean of the deviance loss over the rows of `x`.
pub fn mean_deviance(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, family: Family) -> f64 {
    let eta = x * beta;
    let n = y.len().max(1) as f64;
    eta.iter()
        .zip(y)
        .map(|(&t, &yi)| family.b(t) - yi * t)
        .sum::<f64>()
        / n
}

/// Mean score `Ê[(b′(Xᵀβ) − Y)X]`, the gradient of [`mean_deviance`].
pub fn mean_score(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, family: Family) -> DVector<f64> {
    let eta = x * beta;
    let resid = DVector::from_iterator(
        y.len(),
        eta.iter().zip(y).map(|(&t, &yi)| family.b_prime(t) - yi),
    );
    x.tr_mul(&resid) / y.len().max(1) as f64
}

/// Mean Hessian `Ê[b″(Xᵀβ)XXᵀ]`.
pub fn mean_hessian(x: &DMatrix<f64>, beta: &DVector<f64>, family: Family) -> DMatrix<f64> {
    let eta = x * beta;
    weighted_gram(x, eta.iter().map(|&t| family.b_double_prime(t)))
}

/// `Ê[w·XXᵀ]` for per-row weights.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, weights: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut scaled = x.clone();
    for (i, w) in weights.enumerate() {
        scaled.row_mut(i).scale_mut(w);
    }
    x.tr_mul(&scaled) / n.max(1) as f64
}

/// Reject designs whose smallest singular value is negligible.
pub fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::InsufficientData(format!("need n > p, got n = {n}, p = {p}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix".into()));
    }
    let gram = x.tr_mul(x) / n as f64;
    let eig = gram.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    // Eigenvalues of XᵀX/n are squared singular values of X/√n.
    if max <= 0.0 || min.max(0.0).sqrt() <= RANK_TOLERANCE * max.sqrt() {
        return Err(Error::SingularDesign(format!(
            "smallest singular value ratio {:.3e}",
            (min.max(0.0) / max.max(f64::MIN_POSITIVE)).sqrt()
        )));
    }
    Ok(())
}

/// Minimize `Ê_n[ℓ(β)]` by Newton's method with step halving.
///
/// Non-convergence is reported through [`GlmFit::converged`] rather than as an
/// error; rank deficiency is an error.
pub fn fit_glm(x: &DMatrix<f64>, y: &[f64], family: Family, opts: GlmOptions) -> Result<GlmFit> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, response has {}",
            x.nrows(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response".into()));
    }
    check_full_rank(x)?;
    Ok(newton(x, y, family, opts, DVector::zeros(x.ncols())))
}

/// Minimize `Ê_n[b(Xᵀβ) − q̂·Xᵀβ]`: the same solver as [`fit_glm`] with the
/// response replaced by imputed means.
pub fn fit_glm_imputed(x: &DMatrix<f64>, q_hat: &[f64], family: Family, opts: GlmOptions) -> Result<GlmFit> {
    if q_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("imputed response".into()));
    }
    let clipped: Vec<f64> = q_hat.iter().map(|&q| family.clip_response(q)).collect();
    fit_glm(x, &clipped, family, opts)
}

fn newton(x: &DMatrix<f64>, y: &[f64], family: Family, opts: GlmOptions, start: DVector<f64>) -> GlmFit {
    let mut beta = start;
    let mut loss = mean_deviance(x, y, &beta, family);
    let mut grad = mean_score(x, y, &beta, family);
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if grad.amax() <= opts.tol {
            break;
        }
        iterations += 1;
        let hess = mean_hessian(x, &beta, family);
        let direction = match hess.cholesky() {
            Some(chol) => chol.solve(&grad),
            None => grad.clone(),
        };
        let direction = if direction.iter().all(|v| v.is_finite()) {
            direction
        } else {
            grad.clone()
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = &beta - &direction * step;
            let cand_loss = mean_deviance(x, y, &candidate, family);
            if cand_loss.is_finite() && cand_loss <= loss + 1e-13 * (1.0 + loss.abs()) {
                accepted = Some((candidate, cand_loss));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((b, l)) => {
                beta = b;
                loss = l;
                grad = mean_score(x, y, &beta, family);
            }
            None => break,
        }
    }

    let final_gradient_norm = grad.amax();
    GlmFit {
        beta,
        converged: final_gradient_norm <= opts.tol,
        iterations,
        final_gradient_norm,
    }
}
