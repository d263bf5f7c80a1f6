//! Second estimation step: the doubly robust score, the trimmed kernel
//! estimate of the low-dimensional weighting function, the cross-fitted
//! one-step estimator and its bootstrap interval.
//!
//! The weighting function replaces the inverse propensity. With
//! `Jᵣ(u) = E[Xᵀv | Γᵀx̃ = u, R = r]·η(u | R = r)` and `ρ = P(R = 1)` it is
//!
//! ```text
//! π⁻¹(u) = 1 + J₀(u)(1 − ρ) / (J₁(u) ρ)
//! ```
//!
//! and it is estimated by replacing `Jᵣ` with unnormalized kernel averages.
//! Wherever `|Ĵ₁| ≤ c_n` the estimate falls back to `ρ̂⁻¹`.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::Family;
use crate::kernel::{self, KernelOrder, Points, ProductKernel, WeightedKernelSum};
use crate::seeds;
use crate::surrogate::{self, Dataset, FirstStageFit, FirstStageOptions, Imputation};

/// Normal quantile for two-sided 95% intervals.
pub const Z_95: f64 = 1.96;
/// `|Ī|` below this aborts the one-step update.
pub const MIN_INFORMATION: f64 = 1e-10;
/// Redraw share above which a bootstrap is flagged unstable.
pub const UNSTABLE_REDRAW_SHARE: f64 = 0.10;
const MAX_REDRAWS_PER_REPLICATE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebiasOptions {
    pub k_folds: usize,
    /// Margin exponent in the trimming threshold.
    pub gamma_m: f64,
    /// Imputation rate exponent in the trimming threshold.
    pub gamma_d: f64,
    pub kernel_order: KernelOrder,
    /// Bandwidth rate override for the weighting-function kernel.
    pub bandwidth_rate: Option<f64>,
}

impl Default for DebiasOptions {
    fn default() -> Self {
        Self { k_folds: 5, gamma_m: 1.0, gamma_d: 0.4, kernel_order: KernelOrder::Second, bandwidth_rate: None }
    }
}

/// Settings for the full two-step estimator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProposedOptions {
    pub first: FirstStageOptions,
    pub debias: DebiasOptions,
}

/// Seeded random partition of `0..n` into `k` blocks whose sizes differ by at
/// most one.
pub fn fold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} rows cannot fill {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeds::rng(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut block = perm[start..start + len].to_vec();
        block.sort_unstable();
        folds.push(block);
        start += len;
    }
    Ok(folds)
}

/// Doubly robust score `S(β; π, Q)` for one row.
///
/// `y` must be present exactly when `r` is true.
pub fn score_row(
    x_row: &[f64],
    y: Option<f64>,
    r: bool,
    beta: &[f64],
    q: f64,
    inv_pi: f64,
    family: Family,
) -> Vec<f64> {
    let eta: f64 = x_row.iter().zip(beta).map(|(a, b)| a * b).sum();
    let factor = score_factor(family.b_prime(eta), y, r, q, inv_pi);
    x_row.iter().map(|v| factor * v).collect()
}

/// Scalar multiplying `x` in [`score_row`], given `b′(xᵀβ)`.
#[inline]
fn score_factor(mean: f64, y: Option<f64>, r: bool, q: f64, inv_pi: f64) -> f64 {
    if r {
        let y = y.expect("observed row without outcome");
        inv_pi * (mean - y) - (inv_pi - 1.0) * (mean - q)
    } else {
        mean - q
    }
}

/// `δ̃ₙ = (nħ^d / log n)^{−1/2} + ħ^ν + n^{−γ_d}` and `c_n = δ̃ₙ^{2/(2+γ_m)}`.
pub fn trimming_threshold(n: usize, bandwidth: f64, d: usize, nu: u32, gamma_m: f64, gamma_d: f64) -> (f64, f64) {
    let n = n as f64;
    let delta = (n * bandwidth.powi(d as i32) / n.ln()).powf(-0.5) + bandwidth.powi(nu as i32) + n.powf(-gamma_d);
    (delta, delta.powf(2.0 / (2.0 + gamma_m)))
}

/// One evaluation of the weighting function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvPi {
    pub value: f64,
    pub trimmed: bool,
}

/// `π̂⁻¹` from the two kernel components.
#[inline]
pub fn inv_pi_from_components(j1: f64, j0: f64, rho_hat: f64, inv_rho: f64, c_n: f64) -> InvPi {
    if j1.abs() > c_n {
        InvPi { value: 1.0 + j0 * (1.0 - rho_hat) / (j1 * rho_hat), trimmed: false }
    } else {
        InvPi { value: inv_rho, trimmed: true }
    }
}

/// Trimmed kernel estimate of the weighting function for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    pub j1: WeightedKernelSum,
    /// `None` when no row with `R = 0` is available; `Ĵ₀` is then zero.
    pub j0: Option<WeightedKernelSum>,
    /// `Ê_n[R]` on the full sample.
    pub rho_hat: f64,
    inv_rho: f64,
    pub c_n: f64,
    pub bandwidth: f64,
}

impl WeightModel {
    pub fn components(&self, u: &[f64]) -> (f64, f64) {
        (self.j1.eval(u), self.j0.as_ref().map_or(0.0, |j| j.eval(u)))
    }

    pub fn evaluate(&self, u: &[f64]) -> InvPi {
        let (j1, j0) = self.components(u);
        inv_pi_from_components(j1, j0, self.rho_hat, self.inv_rho, self.c_n)
    }

    /// Kernel ratio without trimming; infinite where `Ĵ₁ = 0`.
    pub fn evaluate_untrimmed(&self, u: &[f64]) -> f64 {
        let (j1, j0) = self.components(u);
        1.0 + j0 * (1.0 - self.rho_hat) / (j1 * self.rho_hat)
    }

    pub fn is_degenerate(&self) -> bool {
        self.j0.is_none()
    }

    /// Evaluate at many reduced points, counting trimmed evaluations.
    pub fn evaluate_many(&self, points: &Points) -> (Vec<f64>, usize) {
        let mut trimmed = 0;
        let values = (0..points.len())
            .map(|i| {
                let e = self.evaluate(points.row(i));
                trimmed += usize::from(e.trimmed);
                e.value
            })
            .collect();
        (values, trimmed)
    }
}

pub fn evaluate_inv_pi(model: &WeightModel, reduced_point: &[f64]) -> f64 {
    model.evaluate(reduced_point).value
}

/// Bandwidth of the weighting-function kernel: the rule of thumb on all
/// reduced points.
pub fn weight_bandwidth(imputation: &Imputation, opts: DebiasOptions) -> Result<f64> {
    kernel::default_bandwidth(&imputation.reduced.to_matrix(), opts.bandwidth_rate)
}

/// Fit `Ĵ₁`, `Ĵ₀` on the rows outside `fold` with weights `Xᵀv̂`.
pub fn fit_weight_model(
    data: &Dataset,
    first: &FirstStageFit,
    fold: &[usize],
    bandwidth: f64,
    gamma_m: f64,
    gamma_d: f64,
) -> Result<WeightModel> {
    let imp = &first.imputation;
    let order = imp.options.kernel_order;
    let xv = data.x() * &first.v_hat;
    let mut excluded = vec![false; data.n()];
    for &i in fold {
        excluded[i] = true;
    }
    let rows1: Vec<usize> = (0..data.n()).filter(|&i| !excluded[i] && data.observed(i)).collect();
    let rows0: Vec<usize> = (0..data.n()).filter(|&i| !excluded[i] && !data.observed(i)).collect();
    if rows1.is_empty() {
        return Err(Error::InsufficientData("no observed rows outside the fold".into()));
    }
    let make = |rows: &[usize]| {
        WeightedKernelSum::new(imp.reduced.select(rows), rows.iter().map(|&i| xv[i]).collect(), bandwidth, order)
    };
    let j1 = make(&rows1)?;
    let j0 = if rows0.is_empty() { None } else { Some(make(&rows0)?) };
    let rho_hat = data.observed_fraction();
    let (_, c_n) = trimming_threshold(data.n(), bandwidth, imp.d(), order.nu(), gamma_m, gamma_d);
    Ok(WeightModel { j1, j0, rho_hat, inv_rho: 1.0 / rho_hat, c_n, bandwidth })
}

/// Diagnostics attached to every estimate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub d: usize,
    pub rho_hat: f64,
    pub c_n: f64,
    pub weight_bandwidth: f64,
    /// Share of score evaluations that used the `ρ̂⁻¹` fallback.
    pub trim_fraction: f64,
    /// Share of score evaluations with a negative weight.
    pub negative_weight_fraction: f64,
    /// Folds whose training part had no `R = 0` rows.
    pub degenerate_folds: usize,
    /// Kernel-regression fallbacks to the global mean across all refits.
    pub fallback_count: usize,
    pub glm_converged: bool,
    pub bootstrap_redraws: usize,
    pub unstable_bootstrap: bool,
}

/// Point estimate and, after bootstrapping, interval for one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasedEstimate {
    pub target: usize,
    pub beta_init: DVector<f64>,
    pub beta_tilde: f64,
    pub i_bar: f64,
    pub s_bar: f64,
    pub fold_scores: Vec<f64>,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub bootstrap_draws: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl DebiasedEstimate {
    fn with_se(mut self, se: f64) -> Self {
        self.se = Some(se);
        self.ci = Some((self.beta_tilde - Z_95 * se, self.beta_tilde + Z_95 * se));
        self
    }
}

/// `β̂ⱼ − S̄/Ī`.
pub fn one_step_update(beta_init_j: f64, s_bar: f64, i_bar: f64) -> Result<f64> {
    if !(i_bar.abs() >= MIN_INFORMATION) {
        return Err(Error::DegenerateInformation(i_bar));
    }
    Ok(beta_init_j - s_bar / i_bar)
}

/// Target-independent cross-fitting state: folds, fold-excluded imputations
/// and the kernel weights between every fold row and its training rows.
pub struct CrossFit {
    folds: Vec<Vec<usize>>,
    /// Cross-fitted `Q̂₍₋ₖ₎` for each row, indexed by row.
    q_cross: Vec<f64>,
    /// Per fold, training rows outside the fold.
    train: Vec<Vec<usize>>,
    /// Per fold, row-major `|fold| × |train|` kernel values.
    gram: Vec<Vec<f64>>,
    rho_hat: f64,
    c_n: f64,
    bandwidth: f64,
    fallback_count: usize,
    degenerate_folds: usize,
}

impl CrossFit {
    pub fn new(data: &Dataset, imputation: &Imputation, folds: Vec<Vec<usize>>, opts: DebiasOptions) -> Result<Self> {
        let n = data.n();
        let bandwidth = weight_bandwidth(imputation, opts)?;
        let kern = ProductKernel::new(bandwidth, opts.kernel_order, imputation.d())?;
        let (_, c_n) = trimming_threshold(n, bandwidth, imputation.d(), opts.kernel_order.nu(), opts.gamma_m, opts.gamma_d);
        let mut q_cross = vec![f64::NAN; n];
        let mut train_sets = Vec::with_capacity(folds.len());
        let mut grams = Vec::with_capacity(folds.len());
        let mut fallback_count = 0;
        let mut degenerate_folds = 0;
        for fold in &folds {
            let g = surrogate::refit_g_excluding(data, imputation, fold)?;
            let pts = imputation.reduced.select(fold);
            let pred = g.predict_points(&pts)?;
            fallback_count += pred.fallback_count;
            let mut q: Vec<f64> = pred.values;
            surrogate::apply_hook(&mut q, data, imputation.options.hook, fold.iter().copied());
            for (k, &i) in fold.iter().enumerate() {
                q_cross[i] = imputation.family.clip_response(q[k]);
            }
        }

        // Training rows of fold k are the other folds in order; `offsets[k][j]`
        // is where fold j starts inside them.
        let n_folds = folds.len();
        let mut offsets = vec![vec![0usize; n_folds]; n_folds];
        for k in 0..n_folds {
            let mut rows = Vec::with_capacity(n - folds[k].len());
            for (j, other) in folds.iter().enumerate() {
                if j != k {
                    offsets[k][j] = rows.len();
                    rows.extend_from_slice(other);
                }
            }
            if !rows.iter().any(|&i| !data.observed(i)) {
                degenerate_folds += 1;
            }
            train_sets.push(rows);
        }
        for (k, fold) in folds.iter().enumerate() {
            grams.push(vec![0.0; fold.len() * train_sets[k].len()]);
        }
        // Each cross-fold block is evaluated once and written to both folds.
        for k in 0..n_folds {
            for j in k + 1..n_folds {
                let (tk, tj) = (train_sets[k].len(), train_sets[j].len());
                let (ok, oj) = (offsets[k][j], offsets[j][k]);
                for (a, &i) in folds[k].iter().enumerate() {
                    let u = imputation.reduced.row(i);
                    for (b, &l) in folds[j].iter().enumerate() {
                        let v = kern.eval(imputation.reduced.row(l), u);
                        grams[k][a * tk + ok + b] = v;
                        grams[j][b * tj + oj + a] = v;
                    }
                }
            }
        }
        Ok(Self {
            folds,
            q_cross,
            train: train_sets,
            gram: grams,
            rho_hat: data.observed_fraction(),
            c_n,
            bandwidth,
            fallback_count,
            degenerate_folds,
        })
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn cross_fitted_imputations(&self) -> &[f64] {
        &self.q_cross
    }

    /// One-step estimate for the target carried by `first`.
    pub fn estimate(&self, data: &Dataset, first: &FirstStageFit) -> Result<DebiasedEstimate> {
        let imp = &first.imputation;
        let family = imp.family;
        let x = data.x();
        let beta = &imp.beta_init;
        let eta = x * beta;
        let xv = x * &first.v_hat;
        let inv_rho = 1.0 / self.rho_hat;

        let n = data.n();
        let i_bar = (0..n)
            .map(|i| family.b_double_prime(eta[i]) * x[(i, first.target)] * xv[i])
            .sum::<f64>()
            / n as f64;

        let mut fold_scores = Vec::with_capacity(self.folds.len());
        let mut trimmed = 0usize;
        let mut negative = 0usize;
        let mut evaluated = 0usize;
        for (f, fold) in self.folds.iter().enumerate() {
            let train = &self.train[f];
            let m1 = train.iter().filter(|&&l| data.observed(l)).count();
            let m0 = train.len() - m1;
            if m1 == 0 {
                return Err(Error::InsufficientData("fold training part has no observed rows".into()));
            }
            let gram = &self.gram[f];
            let mut total = 0.0;
            for (k, &i) in fold.iter().enumerate() {
                let row = &gram[k * train.len()..(k + 1) * train.len()];
                let (mut s1, mut s0) = (0.0, 0.0);
                for (kv, &l) in row.iter().zip(train) {
                    if data.observed(l) {
                        s1 += xv[l] * kv;
                    } else {
                        s0 += xv[l] * kv;
                    }
                }
                let j1 = s1 / m1 as f64;
                let j0 = if m0 == 0 { 0.0 } else { s0 / m0 as f64 };
                let w = inv_pi_from_components(j1, j0, self.rho_hat, inv_rho, self.c_n);
                trimmed += usize::from(w.trimmed);
                negative += usize::from(w.value < 0.0);
                evaluated += 1;
                let factor = score_factor(family.b_prime(eta[i]), data.y(i), data.observed(i), self.q_cross[i], w.value);
                total += factor * xv[i];
            }
            fold_scores.push(total / fold.len() as f64);
        }
        let s_bar = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
        let beta_tilde = one_step_update(beta[first.target], s_bar, i_bar)?;
        Ok(DebiasedEstimate {
            target: first.target,
            beta_init: beta.clone(),
            beta_tilde,
            i_bar,
            s_bar,
            fold_scores,
            se: None,
            ci: None,
            bootstrap_draws: Vec::new(),
            diagnostics: Diagnostics {
                d: imp.d(),
                rho_hat: self.rho_hat,
                c_n: self.c_n,
                weight_bandwidth: self.bandwidth,
                trim_fraction: trimmed as f64 / evaluated.max(1) as f64,
                negative_weight_fraction: negative as f64 / evaluated.max(1) as f64,
                degenerate_folds: self.degenerate_folds,
                fallback_count: imp.fallback_count + self.fallback_count,
                glm_converged: imp.glm_converged,
                bootstrap_redraws: 0,
                unstable_bootstrap: false,
            },
        })
    }
}

/// Cross-fitted one-step estimate with folds drawn from `rng_seed`.
pub fn one_step_estimate(
    data: &Dataset,
    first: &FirstStageFit,
    opts: DebiasOptions,
    rng_seed: u64,
) -> Result<DebiasedEstimate> {
    let folds = fold_partition(data.n(), opts.k_folds, rng_seed)?;
    one_step_with_folds(data, first, folds, opts)
}

/// One-step estimate on an explicit partition.
pub fn one_step_with_folds(
    data: &Dataset,
    first: &FirstStageFit,
    folds: Vec<Vec<usize>>,
    opts: DebiasOptions,
) -> Result<DebiasedEstimate> {
    CrossFit::new(data, &first.imputation, folds, opts)?.estimate(data, first)
}

/// Point estimates for several target coordinates sharing one first step and
/// one fold partition.
pub fn proposed_point_estimates(
    data: &Dataset,
    family: Family,
    targets: &[usize],
    opts: ProposedOptions,
    rng_seed: u64,
) -> Result<(Arc<Imputation>, Vec<DebiasedEstimate>)> {
    for &t in targets {
        if t >= data.p() {
            return Err(Error::InvalidArgument(format!("target {t} outside 0..{}", data.p())));
        }
    }
    let imputation = Arc::new(surrogate::fit_imputation(data, family, opts.first)?);
    let folds = fold_partition(data.n(), opts.debias.k_folds, seeds::derive_labeled(rng_seed, "folds", 0))?;
    let cross = CrossFit::new(data, &imputation, folds, opts.debias)?;
    let estimates = targets
        .iter()
        .map(|&t| {
            let first = imputation.for_target(data, t)?;
            cross.estimate(data, &first)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((imputation, estimates))
}

/// How bootstrap resamples are seeded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ResampleSeeding {
    /// Replicate `b` uses its own derived stream.
    #[default]
    Independent,
    /// Every replicate uses the stream of replicate 0 (test hook).
    Identical,
}

/// Indices of a with-replacement resample of `0..n`.
pub fn resample_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeds::rng(seed);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Outcome of one bootstrap replicate after redraws.
pub(crate) struct Replicate<T> {
    pub value: T,
    pub redraws: usize,
}

/// Draw resamples until `run` succeeds on one.
pub(crate) fn bootstrap_replicates<T, F>(
    n: usize,
    b_reps: usize,
    seed: u64,
    seeding: ResampleSeeding,
    run: F,
) -> Result<Vec<Replicate<T>>>
where
    T: Send,
    F: Fn(&[usize], u64) -> Result<T> + Sync,
{
    (0..b_reps)
        .into_par_iter()
        .map(|b| {
            let stream = match seeding {
                ResampleSeeding::Independent => b as u64,
                ResampleSeeding::Identical => 0,
            };
            let base = seeds::derive_labeled(seed, "resample", stream);
            let mut last_err = None;
            for attempt in 0..MAX_REDRAWS_PER_REPLICATE {
                let draw_seed = seeds::derive(base, attempt as u64);
                let idx = resample_indices(n, draw_seed);
                match run(&idx, draw_seed) {
                    Ok(value) => return Ok(Replicate { value, redraws: attempt }),
                    Err(e) => last_err = Some(e),
                }
            }
            Err(Error::Bootstrap(format!(
                "replicate {b} failed {MAX_REDRAWS_PER_REPLICATE} draws; last error: {}",
                last_err.map(|e| e.to_string()).unwrap_or_default()
            )))
        })
        .collect()
}

/// Sample standard deviation with the `B − 1` denominator.
pub fn sample_sd(values: &[f64]) -> f64 {
    let b = values.len() as f64;
    let mean = values.iter().sum::<f64>() / b;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1.0)).sqrt()
}

/// Bootstrap intervals for several target coordinates.
///
/// Each resample reruns the whole pipeline with the reduced dimension fixed
/// at the value selected on the original data.
pub fn bootstrap_inference_multi(
    data: &Dataset,
    family: Family,
    targets: &[usize],
    opts: ProposedOptions,
    b_reps: usize,
    rng_seed: u64,
    seeding: ResampleSeeding,
) -> Result<Vec<DebiasedEstimate>> {
    if b_reps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bootstrap replicates, got {b_reps}")));
    }
    let (imputation, estimates) = proposed_point_estimates(data, family, targets, opts, rng_seed)?;
    let mut boot_opts = opts;
    boot_opts.first.d = Some(imputation.d());

    let reps = bootstrap_replicates(data.n(), b_reps, rng_seed, seeding, |idx, draw_seed| {
        let sample = data.subset(idx)?;
        let (_, est) = proposed_point_estimates(&sample, family, targets, boot_opts, draw_seed)?;
        Ok(est.into_iter().map(|e| e.beta_tilde).collect::<Vec<f64>>())
    })?;
    let redraws: usize = reps.iter().map(|r| r.redraws).sum();
    let unstable = redraws as f64 > UNSTABLE_REDRAW_SHARE * b_reps as f64;

    Ok(estimates
        .into_iter()
        .enumerate()
        .map(|(k, est)| {
            let draws: Vec<f64> = reps.iter().map(|r| r.value[k]).collect();
            let se = sample_sd(&draws);
            let mut est = est.with_se(se);
            est.bootstrap_draws = draws;
            est.diagnostics.bootstrap_redraws = redraws;
            est.diagnostics.unstable_bootstrap = unstable;
            est
        })
        .collect())
}

/// Bootstrap interval for one target coordinate.
pub fn bootstrap_inference(
    data: &Dataset,
    family: Family,
    target: usize,
    opts: ProposedOptions,
    b_reps: usize,
    rng_seed: u64,
) -> Result<DebiasedEstimate> {
    bootstrap_inference_multi(data, family, &[target], opts, b_reps, rng_seed, ResampleSeeding::Independent)
        .map(|mut v| v.remove(0))
}

/// Finite populations with discrete support, where the weighting function
/// can be computed exactly.
pub mod population {
    use rand::Rng;

    use crate::seeds;

    /// Atoms of `x̃ = (z, x)` with their conditional probabilities given `R`.
    #[derive(Debug, Clone)]
    pub struct DiscretePopulation {
        /// Each atom is `(z, x₁, …, x_p)`.
        pub atoms: Vec<Vec<f64>>,
        pub prob_given_observed: Vec<f64>,
        pub prob_given_missing: Vec<f64>,
        /// `P(R = 1)`.
        pub rho: f64,
        /// Index direction applied to the atoms.
        pub gamma: Vec<f64>,
        /// Projection vector applied to the covariate part `x`.
        pub v: Vec<f64>,
    }

    /// One draw: atom index and missingness indicator.
    #[derive(Debug, Clone, Copy)]
    pub struct Draw {
        pub atom: usize,
        pub r: bool,
    }

    impl DiscretePopulation {
        /// Twelve atoms on a 3 × 2 × 2 grid whose index `u = Γᵀx̃` takes
        /// repeated values, with missingness depending on the atom.
        pub fn standard() -> Self {
            let mut atoms = Vec::new();
            for &z in &[-1.0, 0.0, 1.0] {
                for &x1 in &[0.0, 1.0] {
                    for &x2 in &[-1.0, 1.0] {
                        atoms.push(vec![z, x1 + 0.5, x2]);
                    }
                }
            }
            let raw1: Vec<f64> = (0..12).map(|a| 1.0 + (a % 5) as f64 + 0.5 * (a / 4) as f64).collect();
            let raw0: Vec<f64> = (0..12).map(|a| 6.0 - (a % 4) as f64 + 0.3 * (a % 3) as f64).collect();
            let s1: f64 = raw1.iter().sum();
            let s0: f64 = raw0.iter().sum();
            Self {
                atoms,
                prob_given_observed: raw1.iter().map(|p| p / s1).collect(),
                prob_given_missing: raw0.iter().map(|p| p / s0).collect(),
                rho: 0.3,
                gamma: vec![1.0, 1.0, 0.0],
                v: vec![1.0, -0.4],
            }
        }

        pub fn index(&self, atom: usize) -> f64 {
            self.atoms[atom].iter().zip(&self.gamma).map(|(a, g)| a * g).sum()
        }

        pub fn xv(&self, atom: usize) -> f64 {
            self.atoms[atom][1..].iter().zip(&self.v).map(|(a, v)| a * v).sum()
        }

        /// `J_r(u) = E[Xᵀv 1{U = u} | R = r]` (probability mass in place of
        /// a density).
        pub fn j(&self, u: f64, observed: bool) -> f64 {
            let probs = if observed { &self.prob_given_observed } else { &self.prob_given_missing };
            (0..self.atoms.len())
                .filter(|&a| (self.index(a) - u).abs() < 1e-12)
                .map(|a| probs[a] * self.xv(a))
                .sum()
        }

        /// `1 + J₀(u)(1 − ρ)/(J₁(u)ρ)`.
        pub fn exact_inv_pi(&self, u: f64) -> f64 {
            1.0 + self.j(u, false) * (1.0 - self.rho) / (self.j(u, true) * self.rho)
        }

        pub fn sample(&self, n: usize, seed: u64) -> Vec<Draw> {
            let mut rng = seeds::rng(seed);
            let pick = |rng: &mut rand_chacha::ChaCha8Rng, probs: &[f64]| {
                let t: f64 = rng.gen();
                let mut acc = 0.0;
                for (a, p) in probs.iter().enumerate() {
                    acc += p;
                    if t < acc {
                        return a;
                    }
                }
                probs.len() - 1
            };
            (0..n)
                .map(|_| {
                    let r = rng.gen_bool(self.rho);
                    let probs = if r { &self.prob_given_observed } else { &self.prob_given_missing };
                    Draw { atom: pick(&mut rng, probs), r }
                })
                .collect()
        }

        /// Empirical mean and Monte Carlo standard error of
        /// `(R·π⁻¹(x̃) − 1)·f(u)·Xᵀv`.
        pub fn moment(&self, draws: &[Draw], f: impl Fn(f64) -> f64) -> (f64, f64) {
            let vals: Vec<f64> = draws
                .iter()
                .map(|d| {
                    let u = self.index(d.atom);
                    let w = if d.r { self.exact_inv_pi(u) } else { 0.0 };
                    (w - 1.0) * f(u) * self.xv(d.atom)
                })
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        }
    }
}
