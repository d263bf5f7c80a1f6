//! Comparison estimators: cross-fitted AIPW (double machine learning) with a
//! kernel or a logistic propensity, and the proposed estimator run without
//! the surrogate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::debias::{self, ProposedOptions, ResampleSeeding, Z_95};
use crate::error::{Error, Result};
use crate::glm::{self, Family, GlmOptions};
use crate::kernel::{self, KernelOrder};
use crate::reduction;
use crate::seeds;
use crate::surrogate::Dataset;

/// Propensities are clipped to `[PROPENSITY_FLOOR, 1]`.
pub const PROPENSITY_FLOOR: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityKind {
    Kernel,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    DmlKernel,
    DmlLogistic,
    ProposedNoZ,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::DmlKernel => "dml_kernel",
            BaselineMethod::DmlLogistic => "dml_logistic",
            BaselineMethod::ProposedNoZ => "proposed_no_z",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmlOptions {
    pub k_folds: usize,
    /// Outcome-model dimension; chosen by cross-validation when `None`.
    pub d: Option<usize>,
    pub d_max: usize,
    pub cv_folds: usize,
    pub n_slices: usize,
    pub kernel_order: KernelOrder,
    pub bandwidth_rate: Option<f64>,
    pub glm: GlmOptions,
}

impl Default for DmlOptions {
    fn default() -> Self {
        Self {
            k_folds: 5,
            d: None,
            d_max: 2,
            cv_folds: reduction::DEFAULT_CV_FOLDS,
            n_slices: reduction::DEFAULT_SLICES,
            kernel_order: KernelOrder::Second,
            bandwidth_rate: None,
            glm: GlmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEstimate {
    pub method: BaselineMethod,
    pub beta: DVector<f64>,
    /// Bootstrap standard errors; `None` for coordinates that were not
    /// bootstrapped.
    pub se: Vec<Option<f64>>,
    pub per_coordinate_ci: Vec<Option<(f64, f64)>>,
    /// Share of score evaluations whose propensity hit the floor.
    pub clip_fraction: f64,
    /// Max-norm of the mean score at `beta`.
    pub score_norm: f64,
    pub converged: bool,
    /// Outcome-model dimension.
    pub d: usize,
    pub bootstrap_redraws: usize,
    pub unstable_bootstrap: bool,
}

impl BaselineEstimate {
    fn attach_bootstrap(&mut self, draws: &[Vec<f64>], redraws: usize) {
        let p = self.beta.len();
        for j in 0..p {
            let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            let se = debias::sample_sd(&col);
            self.se[j] = Some(se);
            self.per_coordinate_ci[j] = Some((self.beta[j] - Z_95 * se, self.beta[j] + Z_95 * se));
        }
        self.bootstrap_redraws = redraws;
        self.unstable_bootstrap = redraws as f64 > debias::UNSTABLE_REDRAW_SHARE * draws.len() as f64;
    }
}

/// Cross-fitted outcome means and clipped propensities.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlNuisance {
    pub q: Vec<f64>,
    pub pi: Vec<f64>,
    pub clipped: usize,
}

fn observed_design(data: &Dataset, rows: &[usize], xt: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<usize>) {
    let obs: Vec<usize> = rows.iter().copied().filter(|&i| data.observed(i)).collect();
    let y = obs.iter().map(|&i| data.y(i).expect("observed")).collect();
    (xt.select_rows(&obs), y, obs)
}

/// Outcome dimension chosen on all observed rows.
pub fn select_outcome_dimension(data: &Dataset, opts: DmlOptions) -> Result<usize> {
    if let Some(d) = opts.d {
        return Ok(d);
    }
    let xt = data.augmented();
    let all: Vec<usize> = (0..data.n()).collect();
    let (xt_obs, y_obs, _) = observed_design(data, &all, &xt);
    reduction::select_dimension(&xt_obs, &y_obs, opts.d_max.min(xt.ncols()), opts.cv_folds, opts.n_slices)
}

/// SDR followed by kernel regression, fitted on `train_x`/`train_y` and
/// evaluated at `query`.
fn sdr_kernel_predict(
    train_x: &DMatrix<f64>,
    train_y: &[f64],
    query: &DMatrix<f64>,
    d: usize,
    opts: DmlOptions,
) -> Result<Vec<f64>> {
    let basis = reduction::estimate_subspace(train_x, train_y, d, opts.n_slices)?;
    let u_train = basis.project(train_x)?;
    let h = kernel::default_bandwidth(&u_train, opts.bandwidth_rate)?;
    let fit = kernel::nw_fit(&u_train, train_y, h, opts.kernel_order)?;
    Ok(fit.predict(&basis.project(query)?)?.values)
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Cross-fitted `Q̂` and clipped `π̂` for every row.
pub fn dml_nuisance(
    data: &Dataset,
    kind: PropensityKind,
    folds: &[Vec<usize>],
    d: usize,
    opts: DmlOptions,
) -> Result<DmlNuisance> {
    let n = data.n();
    let xt = data.augmented();
    let r: Vec<f64> = data.r().iter().map(|&b| f64::from(u8::from(b))).collect();
    let mut q = vec![f64::NAN; n];
    let mut pi = vec![f64::NAN; n];
    let mut clipped = 0;
    let mut in_fold = vec![false; n];
    for fold in folds {
        for &i in fold {
            in_fold[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !in_fold[i]).collect();
        for &i in fold {
            in_fold[i] = false;
        }
        let query = xt.select_rows(fold);

        let (xt_obs, y_obs, _) = observed_design(data, &train, &xt);
        let q_fold = sdr_kernel_predict(&xt_obs, &y_obs, &query, d, opts)?;

        let xt_train = xt.select_rows(&train);
        let r_train: Vec<f64> = train.iter().map(|&i| r[i]).collect();
        let pi_fold = match kind {
            // A single class has no inverse regression; its kernel fit is the constant.
            PropensityKind::Kernel if r_train.iter().all(|&v| v == r_train[0]) => vec![r_train[0]; fold.len()],
            PropensityKind::Kernel => sdr_kernel_predict(&xt_train, &r_train, &query, 1, opts)?,
            PropensityKind::Logistic => {
                let fit = glm::fit_glm(&with_intercept(&xt_train), &r_train, Family::Binomial, opts.glm)?;
                let eta = with_intercept(&query) * &fit.beta;
                eta.iter().map(|&t| Family::Binomial.b_prime(t)).collect()
            }
        };
        for (k, &i) in fold.iter().enumerate() {
            q[i] = q_fold[k];
            let p = pi_fold[k];
            if p < PROPENSITY_FLOOR {
                clipped += 1;
            }
            pi[i] = p.clamp(PROPENSITY_FLOOR, 1.0);
        }
    }
    Ok(DmlNuisance { q, pi, clipped })
}

/// `Q̂ + R(Y − Q̂)/π̂`; the AIPW score equals the GLM score with this response.
pub fn pseudo_outcome(data: &Dataset, nuisance: &DmlNuisance) -> Vec<f64> {
    (0..data.n())
        .map(|i| match data.y(i) {
            Some(y) => nuisance.q[i] + (y - nuisance.q[i]) / nuisance.pi[i],
            None => nuisance.q[i],
        })
        .collect()
}

fn dml_point(
    data: &Dataset,
    family: Family,
    kind: PropensityKind,
    d: usize,
    opts: DmlOptions,
    seed: u64,
) -> Result<BaselineEstimate> {
    let folds = debias::fold_partition(data.n(), opts.k_folds, seeds::derive_labeled(seed, "folds", 0))?;
    let nuisance = dml_nuisance(data, kind, &folds, d, opts)?;
    let y_tilde = pseudo_outcome(data, &nuisance);
    let fit = glm::fit_glm(data.x(), &y_tilde, family, opts.glm)?;
    if fit.beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("baseline coefficients".into()));
    }
    let p = data.p();
    Ok(BaselineEstimate {
        method: match kind {
            PropensityKind::Kernel => BaselineMethod::DmlKernel,
            PropensityKind::Logistic => BaselineMethod::DmlLogistic,
        },
        beta: fit.beta,
        se: vec![None; p],
        per_coordinate_ci: vec![None; p],
        clip_fraction: nuisance.clipped as f64 / data.n() as f64,
        score_norm: fit.final_gradient_norm,
        converged: fit.converged,
        d,
        bootstrap_redraws: 0,
        unstable_bootstrap: false,
    })
}

/// Cross-fitted AIPW estimate of the whole coefficient vector.
///
/// `b_reps = 0` skips the bootstrap.
pub fn fit_dml(
    data: &Dataset,
    family: Family,
    kind: PropensityKind,
    opts: DmlOptions,
    b_reps: usize,
    rng_seed: u64,
) -> Result<BaselineEstimate> {
    let d = select_outcome_dimension(data, opts)?;
    let mut est = dml_point(data, family, kind, d, opts, rng_seed)?;
    if b_reps == 0 {
        return Ok(est);
    }
    if b_reps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bootstrap replicates, got {b_reps}")));
    }
    let reps = debias::bootstrap_replicates(data.n(), b_reps, rng_seed, ResampleSeeding::Independent, |idx, s| {
        let sample = data.subset(idx)?;
        Ok(dml_point(&sample, family, kind, d, opts, s)?.beta.iter().copied().collect::<Vec<f64>>())
    })?;
    let redraws = reps.iter().map(|r| r.redraws).sum();
    let draws: Vec<Vec<f64>> = reps.into_iter().map(|r| r.value).collect();
    est.attach_bootstrap(&draws, redraws);
    Ok(est)
}

/// The proposed estimator with `X̃ = X`.
///
/// Targets in `point_targets` get one-step estimates; the subset in
/// `interval_targets` is also bootstrapped (`b_reps = 0` skips it). Other
/// coordinates carry the initial estimate.
pub fn fit_proposed_no_z(
    data: &Dataset,
    family: Family,
    point_targets: &[usize],
    interval_targets: &[usize],
    opts: ProposedOptions,
    b_reps: usize,
    rng_seed: u64,
) -> Result<BaselineEstimate> {
    let mut est = proposed_summary(&data.without_surrogate(), family, point_targets, interval_targets, opts, b_reps, rng_seed)?;
    est.method = BaselineMethod::ProposedNoZ;
    Ok(est)
}

/// Shared driver for the proposed estimator with or without `Z`, reported in
/// the baseline layout.
pub fn proposed_summary(
    data: &Dataset,
    family: Family,
    point_targets: &[usize],
    interval_targets: &[usize],
    opts: ProposedOptions,
    b_reps: usize,
    rng_seed: u64,
) -> Result<BaselineEstimate> {
    let p = data.p();
    let (imputation, points) = debias::proposed_point_estimates(data, family, point_targets, opts, rng_seed)?;
    let mut beta = imputation.beta_init.clone();
    let mut trims = 0.0;
    for e in &points {
        beta[e.target] = e.beta_tilde;
        trims += e.diagnostics.trim_fraction;
    }
    let mut est = BaselineEstimate {
        method: BaselineMethod::ProposedNoZ,
        beta,
        se: vec![None; p],
        per_coordinate_ci: vec![None; p],
        clip_fraction: trims / points.len().max(1) as f64,
        score_norm: points.iter().map(|e| e.s_bar.abs()).fold(0.0, f64::max),
        converged: imputation.glm_converged,
        d: imputation.d(),
        bootstrap_redraws: 0,
        unstable_bootstrap: false,
    };
    if b_reps > 0 && !interval_targets.is_empty() {
        let boot = debias::bootstrap_inference_multi(
            data,
            family,
            interval_targets,
            opts,
            b_reps,
            rng_seed,
            ResampleSeeding::Independent,
        )?;
        for e in boot {
            // Same seed and data: the point estimate coincides with `points`.
            debug_assert_eq!(e.beta_tilde, est.beta[e.target]);
            est.se[e.target] = e.se;
            est.per_coordinate_ci[e.target] = e.ci;
            est.bootstrap_redraws = e.diagnostics.bootstrap_redraws;
            est.unstable_bootstrap = e.diagnostics.unstable_bootstrap;
        }
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::debias::DebiasedEstimate;
    use crate::glm::GlmOptions;
    use crate::surrogate::FirstStageOptions;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy(n: usize, observed: f64, seed: u64, mcar: bool, binary: bool) -> Dataset {
        let mut rng = seeds::rng(seed);
        let p = 3;
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (mut y, mut z, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let lin = x[(i, 0)] - 0.5 * x[(i, 1)];
            let e: f64 = rng.sample(StandardNormal);
            let yi = if binary { f64::from(u8::from(lin + e > 0.0)) } else { lin + 0.2 * lin * lin + 0.5 * e };
            y.push(yi);
            z.push(lin + 0.5 * rng.sample::<f64, _>(StandardNormal));
            let prob = if mcar { observed } else { (observed * 1.6 / (1.0 + (-x[(i, 0)]).exp())).clamp(0.05, 1.0) };
            r.push(rng.gen_bool(prob));
        }
        Dataset::new(x, Some(z), r, y).unwrap()
    }

    fn full_data_mle(data: &Dataset, family: Family) -> DVector<f64> {
        let y: Vec<f64> = (0..data.n()).map(|i| data.y(i).unwrap()).collect();
        glm::fit_glm(data.x(), &y, family, GlmOptions::default()).unwrap().beta
    }

    #[test]
    fn no_missingness_reduces_to_full_data_glm() {
        for (family, binary) in [(Family::Gaussian, false), (Family::Binomial, true)] {
            let data = toy(300, 1.0, 1, true, binary);
            assert_eq!(data.observed_count(), 300);
            let mle = full_data_mle(&data, family);
            for kind in [PropensityKind::Kernel, PropensityKind::Logistic] {
                let opts = DmlOptions { d: Some(1), ..Default::default() };
                let est = fit_dml(&data, family, kind, opts, 0, 3).unwrap();
                assert!((&est.beta - &mle).amax() < 1e-6, "{kind:?} {family:?}");
            }
        }
    }

    #[test]
    fn pseudo_outcome_is_response_when_propensity_is_one() {
        let data = toy(50, 1.0, 2, true, false);
        let nuisance = DmlNuisance { q: vec![0.3; 50], pi: vec![1.0; 50], clipped: 0 };
        let yt = pseudo_outcome(&data, &nuisance);
        for i in 0..50 {
            assert!((yt[i] - data.y(i).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn pseudo_outcome_score_matches_aipw_score() {
        let data = toy(200, 0.5, 3, false, false);
        let folds = debias::fold_partition(200, 5, 4).unwrap();
        let opts = DmlOptions::default();
        let nu = dml_nuisance(&data, PropensityKind::Logistic, &folds, 1, opts).unwrap();
        let beta = vec![0.2, -0.1, 0.4];
        let yt = pseudo_outcome(&data, &nu);
        let via_glm = glm::mean_score(data.x(), &yt, &DVector::from_column_slice(&beta), Family::Gaussian);
        let mut direct = vec![0.0; 3];
        for i in 0..200 {
            let xi: Vec<f64> = data.x().row(i).iter().copied().collect();
            let s = debias::score_row(&xi, data.y(i), data.observed(i), &beta, nu.q[i], 1.0 / nu.pi[i], Family::Gaussian);
            for j in 0..3 {
                direct[j] += s[j] / 200.0;
            }
        }
        for j in 0..3 {
            assert!((via_glm[j] - direct[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn propensities_are_clipped_and_score_solved() {
        for kind in [PropensityKind::Kernel, PropensityKind::Logistic] {
            let data = toy(400, 0.3, 5, false, false);
            let folds = debias::fold_partition(400, 5, 6).unwrap();
            let nu = dml_nuisance(&data, kind, &folds, 1, DmlOptions::default()).unwrap();
            assert!(nu.pi.iter().all(|&p| (PROPENSITY_FLOOR..=1.0).contains(&p)));
            assert!(nu.q.iter().all(|v| v.is_finite()));
            let est = fit_dml(&data, Family::Gaussian, kind, DmlOptions { d: Some(1), ..Default::default() }, 0, 6).unwrap();
            assert!(est.score_norm <= 1e-6);
            assert!((0.0..=1.0).contains(&est.clip_fraction));
        }
    }

    #[test]
    fn logistic_propensity_is_flat_under_mcar() {
        let data = toy(5000, 0.5, 7, true, false);
        let xt = with_intercept(&data.augmented());
        let r: Vec<f64> = data.r().iter().map(|&b| f64::from(u8::from(b))).collect();
        let fit = glm::fit_glm(&xt, &r, Family::Binomial, GlmOptions::default()).unwrap();
        for j in 1..fit.beta.len() {
            assert!(fit.beta[j].abs() < 0.1, "coef {j}: {}", fit.beta[j]);
        }
        let rho = data.observed_fraction();
        assert!((fit.beta[0] - (rho / (1.0 - rho)).ln()).abs() < 0.1);
    }

    #[test]
    fn bootstrap_intervals_are_ordered() {
        let data = toy(200, 0.6, 8, false, false);
        let est = fit_dml(&data, Family::Gaussian, PropensityKind::Kernel, DmlOptions { d: Some(1), ..Default::default() }, 6, 9)
            .unwrap();
        for ci in &est.per_coordinate_ci {
            let (lo, hi) = ci.unwrap();
            assert!(lo <= hi);
        }
        let again = fit_dml(&data, Family::Gaussian, PropensityKind::Kernel, DmlOptions { d: Some(1), ..Default::default() }, 6, 9)
            .unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn constant_surrogate_does_not_crash_no_z_or_with_z() {
        let base = toy(250, 0.6, 10, false, false);
        let x = base.x().clone();
        let y: Vec<f64> = (0..250).map(|i| base.y(i).unwrap_or(0.0)).collect();
        let data = Dataset::new(x, Some(vec![4.0; 250]), base.r().to_vec(), y).unwrap();
        let opts = ProposedOptions { first: FirstStageOptions { d: Some(1), ..Default::default() }, ..Default::default() };
        let with = proposed_summary(&data, Family::Gaussian, &[0, 1], &[], opts, 0, 1).unwrap();
        let without = fit_proposed_no_z(&data, Family::Gaussian, &[0, 1], &[], opts, 0, 1).unwrap();
        // Dropping a constant column leaves SIR unchanged.
        assert!((&with.beta - &without.beta).amax() < 1e-8);
        assert_eq!(without.method, BaselineMethod::ProposedNoZ);
    }

    #[test]
    fn noise_surrogate_agrees_with_no_surrogate() {
        let base = toy(600, 0.5, 11, false, false);
        let mut rng = seeds::rng(12);
        let noise: Vec<f64> = (0..600).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..600).map(|i| base.y(i).unwrap_or(0.0)).collect();
        let data = Dataset::new(base.x().clone(), Some(noise), base.r().to_vec(), y).unwrap();
        let opts = ProposedOptions { first: FirstStageOptions { d: Some(1), ..Default::default() }, ..Default::default() };
        let with = proposed_summary(&data, Family::Gaussian, &[0], &[0], opts, 40, 2).unwrap();
        let without = fit_proposed_no_z(&data, Family::Gaussian, &[0], &[0], opts, 40, 2).unwrap();
        let joint = (with.se[0].unwrap().powi(2) + without.se[0].unwrap().powi(2)).sqrt();
        assert!((with.beta[0] - without.beta[0]).abs() < 2.0 * joint, "{} vs {}", with.beta[0], without.beta[0]);
    }

    #[test]
    fn summary_matches_direct_one_step() {
        let data = toy(200, 0.5, 13, false, false);
        let opts = ProposedOptions { first: FirstStageOptions { d: Some(1), ..Default::default() }, ..Default::default() };
        let s = proposed_summary(&data, Family::Gaussian, &[0, 1, 2], &[], opts, 0, 5).unwrap();
        let (_, direct): (_, Vec<DebiasedEstimate>) =
            debias::proposed_point_estimates(&data, Family::Gaussian, &[2], opts, 5).unwrap();
        assert_eq!(s.beta[2], direct[0].beta_tilde);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn every_propensity_in_range(seed in 0u64..1000, observed in 0.15f64..0.9) {
            let data = toy(150, observed, seed, false, false);
            prop_assume!(data.observed_count() >= 30 && data.observed_count() < 150);
            let folds = debias::fold_partition(150, 5, seed).unwrap();
            for kind in [PropensityKind::Kernel, PropensityKind::Logistic] {
                if let Ok(nu) = dml_nuisance(&data, kind, &folds, 1, DmlOptions::default()) {
                    prop_assert!(nu.pi.iter().all(|&p| (PROPENSITY_FLOOR..=1.0).contains(&p)));
                }
            }
        }
    }
}
