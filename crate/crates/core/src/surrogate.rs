//! Observed data and the first estimation step: reduced subspace, kernel
//! imputation, initial coefficients and the projection direction `v̂`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::glm::{self, Family, GlmOptions};
use crate::kernel::{self, KernelOrder, Points, SmootherFit};
use crate::reduction::{self, ReducedBasis};

/// Diagonal jitter added to the weighted normal equations for `ŵ`.
pub const PROJECTION_RIDGE: f64 = 1e-10;

/// The observed tuple `(X, Z, R, RY)`.
///
/// Outcomes of rows with `R = 0` are replaced by NaN at construction, so an
/// accidental read poisons every downstream quantity instead of leaking the
/// hidden value.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    z: Option<Vec<f64>>,
    r: Vec<bool>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, z: Option<Vec<f64>>, r: Vec<bool>, y: Vec<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if r.len() != n || y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "x has {n} rows, r has {}, y has {}",
                r.len(),
                y.len()
            )));
        }
        if let Some(z) = &z {
            if z.len() != n {
                return Err(Error::DimensionMismatch(format!("x has {n} rows, z has {}", z.len())));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("surrogate".into()));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates".into()));
        }
        let observed = r.iter().filter(|&&ri| ri).count();
        if observed < p + 2 {
            return Err(Error::InsufficientData(format!(
                "{observed} observed outcomes, need at least p + 2 = {}",
                p + 2
            )));
        }
        let y: Vec<f64> = y
            .into_iter()
            .zip(&r)
            .map(|(v, &ri)| if ri { v } else { f64::NAN })
            .collect();
        if y.iter().zip(&r).any(|(v, &ri)| ri && !v.is_finite()) {
            return Err(Error::NonFinite("observed outcome".into()));
        }
        Ok(Self { x, z, r, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> Option<&[f64]> {
        self.z.as_deref()
    }

    pub fn r(&self) -> &[bool] {
        &self.r
    }

    pub fn observed(&self, i: usize) -> bool {
        self.r[i]
    }

    /// `Some(y)` only for rows with an observed outcome.
    pub fn y(&self, i: usize) -> Option<f64> {
        self.r[i].then_some(self.y[i])
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.r[i]).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.r.iter().filter(|&&ri| ri).count()
    }

    /// `Ê_n[R]`.
    pub fn observed_fraction(&self) -> f64 {
        self.observed_count() as f64 / self.n() as f64
    }

    pub fn missing_rate(&self) -> f64 {
        1.0 - self.observed_fraction()
    }

    /// `X̃ = [Z | X]`, or `X` when the surrogate is absent.
    pub fn augmented(&self) -> DMatrix<f64> {
        reduction::augment(&self.x, self.z.as_deref()).expect("lengths checked at construction")
    }

    pub fn without_surrogate(&self) -> Dataset {
        Dataset { z: None, ..self.clone() }
    }

    /// Rows `idx` in order; repeats allowed.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.x.select_rows(idx),
            self.z.as_ref().map(|z| idx.iter().map(|&i| z[i]).collect()),
            idx.iter().map(|&i| self.r[i]).collect(),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }
}

/// Replaces kernel imputations in tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum OutcomeHook {
    #[default]
    None,
    /// Observed rows impute their own outcome, in the first step and in every
    /// cross-fitted refit.
    ObservedOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstStageOptions {
    /// Fixed reduced dimension; chosen by cross-validation when `None`.
    pub d: Option<usize>,
    pub d_max: usize,
    pub cv_folds: usize,
    pub n_slices: usize,
    pub kernel_order: KernelOrder,
    /// Bandwidth rate override passed to [`kernel::default_bandwidth`].
    pub bandwidth_rate: Option<f64>,
    pub glm: GlmOptions,
    pub hook: OutcomeHook,
}

impl Default for FirstStageOptions {
    fn default() -> Self {
        Self {
            d: None,
            d_max: 2,
            cv_folds: reduction::DEFAULT_CV_FOLDS,
            n_slices: reduction::DEFAULT_SLICES,
            kernel_order: KernelOrder::Second,
            bandwidth_rate: None,
            glm: GlmOptions::default(),
            hook: OutcomeHook::None,
        }
    }
}

/// Target-independent part of the first step.
#[derive(Debug, Clone)]
pub struct Imputation {
    pub family: Family,
    pub basis: ReducedBasis,
    /// `Γ̂ᵀx̃ᵢ` for every row.
    pub reduced: Points,
    pub g_hat: SmootherFit,
    /// Imputed means `Q̂ᵢ = ĝ(Γ̂ᵀx̃ᵢ)`, clipped for the binomial family.
    pub q_hat: Vec<f64>,
    pub beta_init: DVector<f64>,
    pub glm_converged: bool,
    /// Query points where ĝ fell back to the global mean.
    pub fallback_count: usize,
    pub options: FirstStageOptions,
}

impl Imputation {
    pub fn d(&self) -> usize {
        self.basis.d()
    }

    /// Attach the projection direction for coordinate `target`.
    pub fn for_target(self: &Arc<Self>, data: &Dataset, target: usize) -> Result<FirstStageFit> {
        let v_hat = projection_direction(data.x(), &self.beta_init, self.family, target)?;
        Ok(FirstStageFit { imputation: Arc::clone(self), v_hat, target })
    }
}

/// First-step output for one target coordinate.
#[derive(Debug, Clone)]
pub struct FirstStageFit {
    pub imputation: Arc<Imputation>,
    /// `v̂` with `v̂[target] = 1` and `−ŵ` in the remaining coordinates.
    pub v_hat: DVector<f64>,
    pub target: usize,
}

impl FirstStageFit {
    pub fn basis(&self) -> &ReducedBasis {
        &self.imputation.basis
    }

    pub fn g_hat(&self) -> &SmootherFit {
        &self.imputation.g_hat
    }

    pub fn q_hat(&self) -> &[f64] {
        &self.imputation.q_hat
    }

    pub fn beta_init(&self) -> &DVector<f64> {
        &self.imputation.beta_init
    }

    /// `ŵ`, the coefficients of `X_{−j}` in the weighted projection.
    pub fn w_hat(&self) -> DVector<f64> {
        let p = self.v_hat.len();
        DVector::from_iterator(
            p - 1,
            (0..p).filter(|&k| k != self.target).map(|k| -self.v_hat[k]),
        )
    }
}

/// Run the whole first step for one target coordinate.
pub fn fit_first_stage(
    data: &Dataset,
    family: Family,
    target: usize,
    opts: FirstStageOptions,
) -> Result<FirstStageFit> {
    if target >= data.p() {
        return Err(Error::InvalidArgument(format!("target {target} outside 0..{}", data.p())));
    }
    let imputation = Arc::new(fit_imputation(data, family, opts)?);
    imputation.for_target(data, target)
}

/// Subspace, link estimate, imputations and initial coefficients.
pub fn fit_imputation(data: &Dataset, family: Family, opts: FirstStageOptions) -> Result<Imputation> {
    let xt = data.augmented();
    let obs = data.observed_indices();
    let xt_obs = xt.select_rows(&obs);
    let y_obs: Vec<f64> = obs.iter().map(|&i| data.y(i).expect("observed")).collect();

    let q = xt.ncols();
    let d = match opts.d {
        Some(d) => d,
        None => reduction::select_dimension(&xt_obs, &y_obs, opts.d_max.min(q), opts.cv_folds, opts.n_slices)?,
    };
    let basis = reduction::estimate_subspace(&xt_obs, &y_obs, d, opts.n_slices)?;
    let reduced = basis.project_points(&xt)?;

    let g_hat = fit_link(&reduced, &obs, &y_obs, opts)?;
    let pred = g_hat.predict_points(&reduced)?;
    let mut q_hat = pred.values;
    apply_hook(&mut q_hat, data, opts.hook, 0..data.n());
    for v in q_hat.iter_mut() {
        *v = family.clip_response(*v);
    }

    let fit = glm::fit_glm_imputed(data.x(), &q_hat, family, opts.glm)?;
    Ok(Imputation {
        family,
        basis,
        reduced,
        g_hat,
        q_hat,
        beta_init: fit.beta,
        glm_converged: fit.converged,
        fallback_count: pred.fallback_count,
        options: opts,
    })
}

fn fit_link(reduced: &Points, rows: &[usize], y: &[f64], opts: FirstStageOptions) -> Result<SmootherFit> {
    let inputs = reduced.select(rows);
    let h = kernel::default_bandwidth(&inputs.to_matrix(), opts.bandwidth_rate)?;
    kernel::nw_fit_points(inputs, y.to_vec(), h, opts.kernel_order)
}

pub(crate) fn apply_hook(q: &mut [f64], data: &Dataset, hook: OutcomeHook, rows: impl Iterator<Item = usize>) {
    if hook == OutcomeHook::ObservedOutcome {
        for (k, i) in rows.enumerate() {
            if let Some(y) = data.y(i) {
                q[k] = y;
            }
        }
    }
}

/// `v̂ = e_j − ŵ` embedded, with `ŵ` minimizing
/// `Ê_n[b″(Xᵀβ̂)(X_j − X_{−j}ᵀw)²]` over all rows.
pub fn projection_direction(
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    family: Family,
    target: usize,
) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if target >= p {
        return Err(Error::InvalidArgument(format!("target {target} outside 0..{p}")));
    }
    if beta.len() != p {
        return Err(Error::DimensionMismatch(format!("beta has {} entries, x has {p} columns", beta.len())));
    }
    let mut v = DVector::zeros(p);
    v[target] = 1.0;
    if p == 1 {
        return Ok(v);
    }
    let eta = x * beta;
    let weights: Vec<f64> = eta.iter().map(|&t| family.b_double_prime(t)).collect();
    let others: Vec<usize> = (0..p).filter(|&k| k != target).collect();
    let x_rest = x.select_columns(&others);
    let mut gram = glm::weighted_gram(&x_rest, weights.iter().cloned());
    for k in 0..p - 1 {
        gram[(k, k)] += PROJECTION_RIDGE;
    }
    let mut rhs = DVector::zeros(p - 1);
    for i in 0..n {
        let wy = weights[i] * x[(i, target)];
        for (k, &c) in others.iter().enumerate() {
            rhs[k] += wy * x[(i, c)];
        }
    }
    rhs /= n as f64;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("weighted design for the projection direction".into()))?
        .solve(&rhs);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularDesign("non-finite projection coefficients".into()));
    }
    for (k, &c) in others.iter().enumerate() {
        v[c] = -w[k];
    }
    Ok(v)
}

/// ĝ refitted on observed rows outside `fold`, on the first-step basis.
pub fn refit_g_excluding(data: &Dataset, imputation: &Imputation, fold: &[usize]) -> Result<SmootherFit> {
    let mut excluded = vec![false; data.n()];
    for &i in fold {
        excluded[i] = true;
    }
    let rows: Vec<usize> = (0..data.n()).filter(|&i| data.observed(i) && !excluded[i]).collect();
    if rows.is_empty() {
        return Err(Error::InsufficientData("no observed rows outside the fold".into()));
    }
    let y: Vec<f64> = rows.iter().map(|&i| data.y(i).expect("observed")).collect();
    fit_link(&imputation.reduced, &rows, &y, imputation.options)
}
