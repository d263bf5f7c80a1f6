//! Sufficient dimension reduction of `Y` against the augmented covariates
//! `X̃ = (Z, Xᵀ)ᵀ` by sliced inverse regression, plus cross-validated choice
//! of the reduced dimension.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelOrder, Points};

/// Slices used for a continuous response.
pub const DEFAULT_SLICES: usize = 10;
/// Folds used when scoring candidate dimensions.
pub const DEFAULT_CV_FOLDS: usize = 5;

/// Columns whose variance falls below this fraction of the largest variance
/// are dropped by the standardizer.
const ZERO_VARIANCE_RATIO: f64 = 1e-12;
/// Relative eigenvalue floor of the retained covariance block.
const SINGULAR_RATIO: f64 = 1e-10;

/// Orthonormal basis of the estimated central subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    /// `(p+1)×d`, orthonormal columns.
    pub gamma: DMatrix<f64>,
    /// Leading eigenvalues of the slice-mean kernel matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Column means of `X̃` used during estimation.
    pub mean: DVector<f64>,
    /// Symmetric inverse square root of the covariance of the retained
    /// columns, embedded with zero rows and columns for dropped ones.
    pub whitening: DMatrix<f64>,
}

impl ReducedBasis {
    pub fn d(&self) -> usize {
        self.gamma.ncols()
    }

    /// Reduced coordinates `Γ̂ᵀx̃` of every row.
    pub fn project(&self, xt: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xt.ncols() != self.gamma.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, basis expects {}",
                xt.ncols(),
                self.gamma.nrows()
            )));
        }
        Ok(xt * &self.gamma)
    }

    pub(crate) fn project_points(&self, xt: &DMatrix<f64>) -> Result<Points> {
        Ok(Points::from_matrix(&self.project(xt)?))
    }

    /// Orthogonal projector `Γ̂Γ̂ᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.gamma * self.gamma.transpose()
    }
}

/// `[z | x]`, or `x` itself when the surrogate is absent.
pub fn augment(x: &DMatrix<f64>, z: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let Some(z) = z else {
        return Ok(x.clone());
    };
    let (n, p) = x.shape();
    if z.len() != n {
        return Err(Error::DimensionMismatch(format!("x has {n} rows, z has {}", z.len())));
    }
    Ok(DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { z[i] } else { x[(i, j - 1)] }))
}

fn is_binary(y: &[f64]) -> bool {
    y.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Slice membership: class labels for a 0/1 response, otherwise
/// `n_slices` contiguous groups of the ranks of `y`.
fn slice_labels(y: &[f64], n_slices: usize) -> Result<(Vec<usize>, usize)> {
    let n = y.len();
    if is_binary(y) {
        let labels: Vec<usize> = y.iter().map(|&v| v as usize).collect();
        let ones = labels.iter().sum::<usize>();
        if ones == 0 || ones == n {
            return Err(Error::InsufficientData("binary response has a single class".into()));
        }
        return Ok((labels, 2));
    }
    if n_slices < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 slices, got {n_slices}")));
    }
    if n < n_slices {
        return Err(Error::InsufficientData(format!("{n} rows cannot fill {n_slices} slices")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank * n_slices / n;
    }
    Ok((labels, n_slices))
}

/// Sliced inverse regression estimate of a `d`-dimensional central subspace.
///
/// `xt` and `y` must hold only rows with an observed outcome.
pub fn estimate_subspace(xt: &DMatrix<f64>, y: &[f64], d: usize, n_slices: usize) -> Result<ReducedBasis> {
    let (n, q) = xt.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} rows vs {} responses", y.len())));
    }
    if d == 0 || d > q {
        return Err(Error::InvalidArgument(format!("reduced dimension {d} outside 1..={q}")));
    }
    if n < q + 2 {
        return Err(Error::InsufficientData(format!("{n} observed rows for {q} columns")));
    }

    let mean = DVector::from_fn(q, |j, _| xt.column(j).mean());
    let mut centered = xt.clone();
    for j in 0..q {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.tr_mul(&centered) / n as f64;

    let max_var = (0..q).map(|j| cov[(j, j)]).fold(0.0_f64, f64::max);
    if !(max_var > 0.0) {
        return Err(Error::SingularDesign("all columns are constant".into()));
    }
    let active: Vec<usize> = (0..q).filter(|&j| cov[(j, j)] > ZERO_VARIANCE_RATIO * max_var).collect();
    let qa = active.len();
    if d > qa {
        return Err(Error::InvalidArgument(format!(
            "reduced dimension {d} exceeds the {qa} non-constant columns"
        )));
    }
    let cov_a = DMatrix::from_fn(qa, qa, |a, b| cov[(active[a], active[b])]);
    let eig = SymmetricEigen::new(cov_a);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmin > SINGULAR_RATIO * lmax) {
        return Err(Error::SingularDesign(format!(
            "covariance condition ratio {:.3e}",
            lmin / lmax
        )));
    }
    let inv_sqrt = DVector::from_iterator(qa, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let w_a = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    let mut whitening = DMatrix::zeros(q, q);
    for (a, &ja) in active.iter().enumerate() {
        for (b, &jb) in active.iter().enumerate() {
            whitening[(ja, jb)] = w_a[(a, b)];
        }
    }

    // Standardized rows: z = W(x − μ), restricted to active coordinates.
    let centered_a = DMatrix::from_fn(n, qa, |i, a| centered[(i, active[a])]);
    let standardized = centered_a * &w_a;

    let (labels, h) = slice_labels(y, n_slices)?;
    let mut sums = DMatrix::<f64>::zeros(h, qa);
    let mut counts = vec![0usize; h];
    for i in 0..n {
        counts[labels[i]] += 1;
        let mut row = sums.row_mut(labels[i]);
        row += standardized.row(i);
    }
    if counts.contains(&0) {
        return Err(Error::InsufficientData("empty slice".into()));
    }
    let mut kernel_matrix = DMatrix::<f64>::zeros(qa, qa);
    for s in 0..h {
        let m = sums.row(s).transpose() / counts[s] as f64;
        kernel_matrix += (&m * m.transpose()) * (counts[s] as f64 / n as f64);
    }

    let eig = SymmetricEigen::new(kernel_matrix);
    let mut order: Vec<usize> = (0..qa).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order[..d].iter().map(|&k| eig.eigenvalues[k]).collect();

    // Back-transform the leading directions to the original scale.
    let mut directions = DMatrix::<f64>::zeros(q, d);
    for (c, &k) in order[..d].iter().enumerate() {
        let eta = eig.eigenvectors.column(k);
        let beta = &w_a * eta;
        for (a, &ja) in active.iter().enumerate() {
            directions[(ja, c)] = beta[a];
        }
    }
    let gamma = orthonormalize(directions)?;

    Ok(ReducedBasis { gamma, eigenvalues, mean, whitening })
}

/// Modified Gram-Schmidt with the largest-magnitude entry of every column made
/// positive.
fn orthonormalize(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.ncols();
    for c in 0..d {
        for prev in 0..c {
            let proj = m.column(prev).dot(&m.column(c));
            let p = m.column(prev).clone_owned();
            m.column_mut(c).axpy(-proj, &p, 1.0);
        }
        let norm = m.column(c).norm();
        if !(norm > 1e-300) {
            return Err(Error::SingularDesign("collinear subspace directions".into()));
        }
        m.column_mut(c).scale_mut(1.0 / norm);
        // Re-orthogonalize once for accuracy.
        for prev in 0..c {
            let proj = m.column(prev).dot(&m.column(c));
            let p = m.column(prev).clone_owned();
            m.column_mut(c).axpy(-proj, &p, 1.0);
        }
        let norm = m.column(c).norm();
        m.column_mut(c).scale_mut(1.0 / norm);

        let lead = m
            .column(c)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if m[(lead, c)] < 0.0 {
            m.column_mut(c).neg_mut();
        }
    }
    Ok(m)
}

/// Cross-validation error of every candidate dimension `1..=d_max`.
///
/// Folds are interleaved (`row % n_folds`). For each `d` the subspace is
/// re-estimated on the training folds, `y` is kernel-regressed on the
/// reduced coordinates with the default bandwidth, and squared prediction
/// error is averaged over held-out rows.
pub fn cv_curve(
    xt: &DMatrix<f64>,
    y: &[f64],
    d_max: usize,
    n_folds: usize,
    n_slices: usize,
) -> Result<Vec<f64>> {
    let (n, q) = xt.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} rows vs {} responses", y.len())));
    }
    if d_max == 0 || d_max > q {
        return Err(Error::InvalidArgument(format!("d_max {d_max} outside 1..={q}")));
    }
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut curve = Vec::with_capacity(d_max);
    for d in 1..=d_max {
        let mut sse = 0.0;
        let mut count = 0usize;
        for fold in 0..n_folds {
            let train: Vec<usize> = (0..n).filter(|i| i % n_folds != fold).collect();
            let test: Vec<usize> = (0..n).filter(|i| i % n_folds == fold).collect();
            if test.is_empty() {
                continue;
            }
            let xt_train = xt.select_rows(&train);
            let y_train: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let basis = estimate_subspace(&xt_train, &y_train, d, n_slices)?;
            let u_train = basis.project(&xt_train)?;
            let h = kernel::default_bandwidth(&u_train, None)?;
            let fit = kernel::nw_fit(&u_train, &y_train, h, KernelOrder::Second)?;
            let u_test = basis.project(&xt.select_rows(&test))?;
            let pred = fit.predict(&u_test)?;
            for (k, &i) in test.iter().enumerate() {
                let e = pred.values[k] - y[i];
                sse += e * e;
                count += 1;
            }
        }
        curve.push(sse / count.max(1) as f64);
    }
    Ok(curve)
}

/// Dimension in `1..=d_max` with the smallest CV error; ties go to the
/// smaller dimension.
pub fn select_dimension(
    xt: &DMatrix<f64>,
    y: &[f64],
    d_max: usize,
    n_folds: usize,
    n_slices: usize,
) -> Result<usize> {
    if d_max == 1 {
        return Ok(1);
    }
    let curve = cv_curve(xt, y, d_max, n_folds, n_slices)?;
    let mut best = 0;
    for (d, &err) in curve.iter().enumerate() {
        if err < curve[best] {
            best = d;
        }
    }
    Ok(best + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal_matrix(n: usize, q: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeds::rng(seed);
        DMatrix::from_fn(n, q, |_, _| rng.sample(StandardNormal))
    }

    /// Largest principal angle between span(a) and span(b), both orthonormal.
    pub(crate) fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let s = (a.transpose() * b).singular_values();
        let smin = s.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
        smin.acos()
    }

    #[test]
    fn augment_examples() {
        let x = DMatrix::identity(2, 2);
        let xt = augment(&x, Some(&[5.0, 7.0])).unwrap();
        assert_eq!(xt, DMatrix::from_row_slice(2, 3, &[5.0, 1.0, 0.0, 7.0, 0.0, 1.0]));
        assert_eq!(augment(&x, None).unwrap(), x);
        let empty = augment(&DMatrix::zeros(0, 4), Some(&[])).unwrap();
        assert_eq!(empty.shape(), (0, 5));
        assert!(augment(&x, Some(&[1.0])).is_err());
    }

    #[test]
    fn single_index_is_recovered() {
        let n = 2000;
        let xt = normal_matrix(n, 5, 11);
        let b0 = DVector::from_vec(vec![1.0, -1.0, 0.5, 0.0, 0.0]).normalize();
        let mut rng = seeds::rng(12);
        let y: Vec<f64> = (0..n)
            .map(|i| xt.row(i).dot(&b0.transpose()).powi(3) + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let basis = estimate_subspace(&xt, &y, 1, DEFAULT_SLICES).unwrap();
        let b0m = DMatrix::from_column_slice(5, 1, b0.as_slice());
        assert!(max_principal_angle(&basis.gamma, &b0m) < 0.2);
    }

    #[test]
    fn null_response_has_small_eigenvalues() {
        let n = 2000;
        let xt = normal_matrix(n, 9, 13);
        let mut rng = seeds::rng(14);
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let basis = estimate_subspace(&xt, &y, 2, DEFAULT_SLICES).unwrap();
        assert!(basis.eigenvalues[0] < 0.1, "{:?}", basis.eigenvalues);
        assert!(basis.eigenvalues[0] >= basis.eigenvalues[1]);
    }

    #[test]
    fn full_dimension_basis_matches_whitened_regression() {
        let n = 300;
        let xt = normal_matrix(n, 3, 15);
        let y: Vec<f64> = (0..n).map(|i| xt[(i, 0)] + xt[(i, 1)].powi(2)).collect();
        let basis = estimate_subspace(&xt, &y, 3, DEFAULT_SLICES).unwrap();
        let g = &basis.gamma;
        assert!((g.transpose() * g - DMatrix::identity(3, 3)).amax() < 1e-10);
        // A full orthonormal basis is a rotation, and the isotropic gaussian
        // product kernel is rotation invariant.
        let u = basis.project(&xt).unwrap();
        let q = xt.rows(0, 20).into_owned();
        let a = kernel::nw_fit(&u, &y, 0.5, KernelOrder::Second).unwrap()
            .predict(&basis.project(&q).unwrap()).unwrap().values;
        let b = kernel::nw_fit(&xt, &y, 0.5, KernelOrder::Second).unwrap().predict(&q).unwrap().values;
        for (s, t) in a.iter().zip(&b) {
            assert!((s - t).abs() < 1e-10);
        }
    }

    #[test]
    fn binary_response_slices_by_class() {
        let n = 1000;
        let xt = normal_matrix(n, 4, 16);
        let y: Vec<f64> = (0..n).map(|i| if xt[(i, 1)] - xt[(i, 2)] > 0.0 { 1.0 } else { 0.0 }).collect();
        let basis = estimate_subspace(&xt, &y, 1, DEFAULT_SLICES).unwrap();
        let truth = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, -1.0, 0.0]).normalize();
        assert!(max_principal_angle(&basis.gamma, &truth) < 0.2);
        assert!(estimate_subspace(&xt, &vec![1.0; n], 1, 2).is_err());
    }

    #[test]
    fn constant_column_is_dropped() {
        let n = 500;
        let mut xt = normal_matrix(n, 4, 17);
        xt.column_mut(0).fill(3.0);
        let y: Vec<f64> = (0..n).map(|i| xt[(i, 1)] + 0.1 * xt[(i, 2)]).collect();
        let basis = estimate_subspace(&xt, &y, 2, DEFAULT_SLICES).unwrap();
        assert!(basis.gamma.row(0).amax() == 0.0);
        assert_eq!(basis.whitening.row(0).amax(), 0.0);
    }

    #[test]
    fn error_paths() {
        let xt = normal_matrix(5, 4, 18);
        assert!(matches!(estimate_subspace(&xt, &[0.0, 1.0, 2.0, 3.0, 4.0], 1, 2), Err(Error::InsufficientData(_))));
        let mut xt = normal_matrix(50, 3, 19);
        let c = xt.column(0).clone_owned();
        xt.set_column(2, &(c * 2.0));
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(matches!(estimate_subspace(&xt, &y, 1, 5), Err(Error::SingularDesign(_))));
        let xt = normal_matrix(50, 3, 20);
        assert!(estimate_subspace(&xt, &y, 4, 5).is_err());
        assert!(estimate_subspace(&xt, &y, 1, 1).is_err());
    }

    #[test]
    fn dimension_selection_single_and_double_index() {
        let n = 1000;
        let xt = normal_matrix(n, 4, 21);
        let mut rng = seeds::rng(22);
        let y1: Vec<f64> = (0..n)
            .map(|i| (xt[(i, 0)] + xt[(i, 1)]).powi(3) + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        assert_eq!(select_dimension(&xt, &y1, 3, DEFAULT_CV_FOLDS, DEFAULT_SLICES).unwrap(), 1);
        assert_eq!(select_dimension(&xt, &y1, 1, DEFAULT_CV_FOLDS, DEFAULT_SLICES).unwrap(), 1);
    }

    #[test]
    fn dimension_selection_finds_two_indices() {
        let n = 4000;
        let xt = normal_matrix(n, 4, 23);
        let mut rng = seeds::rng(24);
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * xt[(i, 0)] + (1.5 * xt[(i, 2)]).tanh() * 3.0 + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let curve = cv_curve(&xt, &y, 3, DEFAULT_CV_FOLDS, DEFAULT_SLICES).unwrap();
        assert!(curve[1] < curve[0], "{curve:?}");
        assert_eq!(select_dimension(&xt, &y, 3, DEFAULT_CV_FOLDS, DEFAULT_SLICES).unwrap(), 2, "{curve:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn projector_is_idempotent_and_span_is_scale_equivariant(seed in 0u64..5000, coord in 0usize..4, scale in 0.1f64..10.0) {
            let n = 400;
            let xt = normal_matrix(n, 4, seed);
            let y: Vec<f64> = (0..n).map(|i| xt[(i, 0)] - 0.5 * xt[(i, 1)] + (xt[(i, 2)] * 2.0).tanh()).collect();
            let basis = estimate_subspace(&xt, &y, 2, DEFAULT_SLICES).unwrap();
            let p = basis.projector();
            prop_assert!((&p * &p - &p).amax() < 1e-8);
            prop_assert!((basis.gamma.transpose() * &basis.gamma - DMatrix::identity(2, 2)).amax() < 1e-8);

            // Scaling column `coord` by s maps index vectors β to D⁻¹β, so the
            // span of DΓ̂' must equal the span of Γ̂.
            let mut scaled = xt.clone();
            scaled.column_mut(coord).scale_mut(scale);
            let other = estimate_subspace(&scaled, &y, 2, DEFAULT_SLICES).unwrap();
            let mut back = other.gamma.clone();
            back.row_mut(coord).scale_mut(scale);
            let back = orthonormalize(back).unwrap();
            let diff = (&back * back.transpose() - p).norm();
            prop_assert!(diff < 1e-6, "projector difference {}", diff);
        }

        #[test]
        fn estimation_is_reproducible(seed in 0u64..5000) {
            let xt = normal_matrix(200, 3, seed);
            let y: Vec<f64> = (0..200).map(|i| xt[(i, 0)] + xt[(i, 1)].powi(3)).collect();
            let a = estimate_subspace(&xt, &y, 2, 8).unwrap();
            let b = estimate_subspace(&xt, &y, 2, 8).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
