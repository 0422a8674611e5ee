//! Multi-bandwidth Gaussian RBF kernels.
//!
//! A [`KernelSpec`] is a convex mixture
//! `k(a, b) = Σ_m w_m · exp(−‖a − b‖² / (2σ²_m))`, where the `σ²_m` are stored
//! directly as `bandwidths` (squared feature units). Every entry of a kernel
//! matrix therefore lies in `(0, 1]`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

/// Multipliers applied to the median heuristic to build the default mixture.
pub const MEDIAN_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(Error::InvalidKernel(format!(
                "{} bandwidths vs {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if let Some(bad) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidKernel(format!("bandwidth {bad} is not positive")));
        }
        if let Some(bad) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidKernel(format!("weight {bad} is not positive")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidKernel(format!("weights sum to {total}")));
        }
        Ok(Self { bandwidths, weights })
    }

    /// A single Gaussian with squared bandwidth `sigma_sq`.
    pub fn single(sigma_sq: f64) -> Result<Self> {
        Self::new(vec![sigma_sq], vec![1.0])
    }

    /// Uniform mixture over `base × {1/4, 1/2, 1, 2, 4}`.
    pub fn from_base(base: f64) -> Result<Self> {
        let n = MEDIAN_MULTIPLIERS.len();
        Self::new(
            MEDIAN_MULTIPLIERS.iter().map(|m| m * base).collect(),
            vec![1.0 / n as f64; n],
        )
    }

    /// Default mixture with its base bandwidth set by [`median_heuristic`].
    pub fn from_median(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Self> {
        Self::from_base(median_heuristic(a, b)?)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Kernel value for a squared distance. Summation order over the mixture is fixed.
    #[inline]
    pub fn eval_sq(&self, dist_sq: f64) -> f64 {
        let mut acc = 0.0;
        for (s, w) in self.bandwidths.iter().zip(&self.weights) {
            acc += w * (-dist_sq / (2.0 * s)).exp();
        }
        acc
    }

    /// `Σ_m w_m exp(−d/(2σ²_m)) / σ²_m`, the scalar factor of the input gradient.
    #[inline]
    fn grad_factor_sq(&self, dist_sq: f64) -> f64 {
        let mut acc = 0.0;
        for (s, w) in self.bandwidths.iter().zip(&self.weights) {
            acc += w * (-dist_sq / (2.0 * s)).exp() / s;
        }
        acc
    }
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub fn squared_distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            what: "feature width",
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            out[[i, j]] = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    Ok(out)
}

/// Median of all pairwise squared distances over the pooled rows of `a` and `b`,
/// self-pairs excluded. Falls back to 1.0 when every point coincides.
pub fn median_heuristic(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let n = a.nrows() + b.nrows();
    if n < 2 {
        return Err(Error::NoSamplesForBandwidth);
    }
    if a.nrows() > 0 && b.nrows() > 0 && a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            what: "feature width",
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    let rows: Vec<_> = a.rows().into_iter().chain(b.rows()).collect();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = rows[i]
                .iter()
                .zip(rows[j].iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(d);
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 && median.is_finite() {
        Ok(median)
    } else {
        Ok(1.0)
    }
}

/// `K[i, j] = k(a_i, b_j)`.
pub fn kernel_matrix(spec: &KernelSpec, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Matrix> {
    let mut k = squared_distances(a, b)?;
    k.mapv_inplace(|d| spec.eval_sq(d));
    Ok(k)
}

/// Gradients of `Σ_ij upstream[i, j] · K[i, j]` with respect to the rows of `a` and `b`.
///
/// When `a` and `b` are the same matrix the caller must add the two results.
pub fn kernel_matrix_grad(
    spec: &KernelSpec,
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
) -> Result<(Matrix, Matrix)> {
    if upstream.dim() != (a.nrows(), b.nrows()) {
        return Err(Error::DimensionMismatch {
            what: "upstream rows",
            left: upstream.nrows(),
            right: a.nrows(),
        });
    }
    let mut coeff = squared_distances(a, b)?;
    ndarray::Zip::from(&mut coeff)
        .and(&upstream)
        .for_each(|c, &u| *c = if u == 0.0 { 0.0 } else { u * spec.grad_factor_sq(*c) });

    // grad_a[i] = Σ_j C_ij (b_j − a_i);  grad_b[j] = Σ_i C_ij (a_i − b_j)
    let row_sums: Array1<f64> = coeff.sum_axis(Axis(1));
    let col_sums: Array1<f64> = coeff.sum_axis(Axis(0));
    let mut grad_a = coeff.dot(&b);
    grad_a -= &(&a * &row_sums.insert_axis(Axis(1)));
    let mut grad_b = coeff.t().dot(&a);
    grad_b -= &(&b * &col_sums.insert_axis(Axis(1)));
    Ok((grad_a, grad_b))
}
