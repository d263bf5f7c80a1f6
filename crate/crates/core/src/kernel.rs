//! Multivariate product-kernel smoothing.
//!
//! Two estimators share the kernel: the Nadaraya-Watson regression used for
//! the imputation link, and the unnormalized kernel average
//! `(1/m)·Σ wᵢ·K_ħ(uᵢ − u)` used for the weighting-function components.
//! Evaluation is brute force, `O(m·k)` for `m` training and `k` query points.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators below this make a Nadaraya-Watson prediction fall back to the
/// global response mean.
pub const UNDERFLOW_THRESHOLD: f64 = 1e-300;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Order ν of the univariate kernel used in each coordinate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelOrder {
    /// Gaussian density, ν = 2.
    #[default]
    Second,
    /// `(3/2 − t²/2)·φ(t)`, ν = 4. Takes negative values for |t| > √3.
    Fourth,
}

impl KernelOrder {
    pub fn nu(self) -> u32 {
        match self {
            KernelOrder::Second => 2,
            KernelOrder::Fourth => 4,
        }
    }

    pub fn from_nu(nu: u32) -> Result<Self> {
        match nu {
            2 => Ok(KernelOrder::Second),
            4 => Ok(KernelOrder::Fourth),
            _ => Err(Error::InvalidArgument(format!("kernel order {nu} not supported (2 or 4)"))),
        }
    }

    /// Univariate kernel `K(t)`.
    pub fn eval(self, t: f64) -> f64 {
        let phi = INV_SQRT_2PI * (-0.5 * t * t).exp();
        match self {
            KernelOrder::Second => phi,
            KernelOrder::Fourth => (1.5 - 0.5 * t * t) * phi,
        }
    }
}

/// Row-major point cloud; rows are points.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    data: Vec<f64>,
    dim: usize,
}

impl Points {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, dim) = m.shape();
        let mut data = Vec::with_capacity(rows * dim);
        for i in 0..rows {
            data.extend(m.row(i).iter());
        }
        Self { data, dim }
    }

    pub fn from_rows(data: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && data.len() % dim == 0);
        Self { data, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, idx: &[usize]) -> Points {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Points { data, dim: self.dim }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.data)
    }
}

/// Product kernel `K_ħ(a − b) = Πⱼ K((aⱼ − bⱼ)/ħ) / ħ^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductKernel {
    pub bandwidth: f64,
    pub order: KernelOrder,
    dim: usize,
    norm: f64,
    inv_h2: f64,
}

impl ProductKernel {
    pub fn new(bandwidth: f64, order: KernelOrder, dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let norm = (INV_SQRT_2PI / bandwidth).powi(dim as i32);
        Ok(Self { bandwidth, order, dim, norm, inv_h2: 1.0 / (bandwidth * bandwidth) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.order {
            KernelOrder::Second => {
                let mut sq = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let d = x - y;
                    sq += d * d;
                }
                self.norm * (-0.5 * sq * self.inv_h2).exp()
            }
            KernelOrder::Fourth => {
                let mut sq = 0.0;
                let mut poly = 1.0;
                for (x, y) in a.iter().zip(b) {
                    let t2 = (x - y) * (x - y) * self.inv_h2;
                    sq += t2;
                    poly *= 1.5 - 0.5 * t2;
                }
                self.norm * poly * (-0.5 * sq).exp()
            }
        }
    }
}

/// Rule-of-thumb bandwidth `σ̄ · m^(−rate)` with `rate = 1/(d+4)` by default.
///
/// `σ̄` is the mean of the coordinate-wise sample standard deviations.
pub fn default_bandwidth(inputs: &DMatrix<f64>, exponent_override: Option<f64>) -> Result<f64> {
    let (m, d) = inputs.shape();
    if m < 2 {
        return Err(Error::InsufficientData(format!("bandwidth needs at least 2 points, got {m}")));
    }
    if d == 0 {
        return Err(Error::DimensionMismatch("zero-width inputs".into()));
    }
    let sigma_bar = inputs
        .column_iter()
        .map(|c| {
            let mean = c.mean();
            (c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64).sqrt()
        })
        .sum::<f64>()
        / d as f64;
    if !(sigma_bar > 0.0) || !sigma_bar.is_finite() {
        return Err(Error::DegenerateScale(format!("mean coordinate sd is {sigma_bar}")));
    }
    let rate = exponent_override.unwrap_or(1.0 / (d as f64 + 4.0));
    Ok(sigma_bar * (m as f64).powf(-rate))
}

/// A stored Nadaraya-Watson regression.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherFit {
    inputs: Points,
    responses: Vec<f64>,
    kernel: ProductKernel,
    global_mean: f64,
}

/// Predictions plus the number of query points that hit the fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub values: Vec<f64>,
    pub fallback_count: usize,
}

pub fn nw_fit(
    inputs: &DMatrix<f64>,
    responses: &[f64],
    bandwidth: f64,
    order: KernelOrder,
) -> Result<SmootherFit> {
    nw_fit_points(Points::from_matrix(inputs), responses.to_vec(), bandwidth, order)
}

pub(crate) fn nw_fit_points(
    inputs: Points,
    responses: Vec<f64>,
    bandwidth: f64,
    order: KernelOrder,
) -> Result<SmootherFit> {
    if inputs.len() != responses.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs vs {} responses",
            inputs.len(),
            responses.len()
        )));
    }
    if responses.is_empty() {
        return Err(Error::InsufficientData("kernel regression needs at least one point".into()));
    }
    let kernel = ProductKernel::new(bandwidth, order, inputs.dim())?;
    let global_mean = responses.iter().sum::<f64>() / responses.len() as f64;
    Ok(SmootherFit { inputs, responses, kernel, global_mean })
}

impl SmootherFit {
    pub fn bandwidth(&self) -> f64 {
        self.kernel.bandwidth
    }

    pub fn kernel_order(&self) -> KernelOrder {
        self.kernel.order
    }

    pub fn dim(&self) -> usize {
        self.inputs.dim()
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn inputs(&self) -> &Points {
        &self.inputs
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn predict(&self, query: &DMatrix<f64>) -> Result<Prediction> {
        self.predict_points(&Points::from_matrix(query))
    }

    pub fn predict_points(&self, query: &Points) -> Result<Prediction> {
        if query.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query width {} vs fit width {}",
                query.dim(),
                self.dim()
            )));
        }
        let mut fallback_count = 0;
        let values = (0..query.len())
            .map(|k| match self.predict_one(query.row(k)) {
                Some(v) => v,
                None => {
                    fallback_count += 1;
                    self.global_mean
                }
            })
            .collect();
        Ok(Prediction { values, fallback_count })
    }

    /// `None` when the kernel mass at `u` underflows.
    pub fn predict_one(&self, u: &[f64]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &y) in self.responses.iter().enumerate() {
            let k = self.kernel.eval(self.inputs.row(i), u);
            num += k * y;
            den += k;
        }
        if den.abs() < UNDERFLOW_THRESHOLD {
            None
        } else {
            Some(num / den)
        }
    }
}

/// `(1/m)·Σᵢ wᵢ·K_ħ(uᵢ − u)` at every query point.
pub fn kernel_weighted_mean(
    inputs: &DMatrix<f64>,
    weights: &[f64],
    bandwidth: f64,
    query: &DMatrix<f64>,
    order: KernelOrder,
) -> Result<Vec<f64>> {
    let sum = WeightedKernelSum::new(Points::from_matrix(inputs), weights.to_vec(), bandwidth, order)?;
    let q = Points::from_matrix(query);
    if q.dim() != sum.dim() {
        return Err(Error::DimensionMismatch(format!("query width {} vs {}", q.dim(), sum.dim())));
    }
    Ok((0..q.len()).map(|k| sum.eval(q.row(k))).collect())
}

/// Stored evaluator for [`kernel_weighted_mean`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedKernelSum {
    inputs: Points,
    weights: Vec<f64>,
    kernel: ProductKernel,
}

impl WeightedKernelSum {
    pub fn new(inputs: Points, weights: Vec<f64>, bandwidth: f64, order: KernelOrder) -> Result<Self> {
        if inputs.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs vs {} weights",
                inputs.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::InsufficientData("kernel average needs at least one point".into()));
        }
        let kernel = ProductKernel::new(bandwidth, order, inputs.dim())?;
        Ok(Self { inputs, weights, kernel })
    }

    pub fn dim(&self) -> usize {
        self.inputs.dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        let total: f64 = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| w * self.kernel.eval(self.inputs.row(i), u))
            .sum();
        total / self.weights.len() as f64
    }
}
