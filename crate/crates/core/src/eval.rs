//! Forecast metrics, baseline aggregators, weekly quantile bands, and report
//! assembly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::num::Scalar;

/// Mean absolute error over the horizon, in raw units.
pub fn mae<F: Scalar>(y: &[F], yhat: &[F]) -> Result<F> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(CoreError::ShapeMismatch {
            context: "mae".into(),
            expected: format!("equal nonzero lengths ({})", y.len()),
            got: format!("{}", yhat.len()),
        });
    }
    let n = F::from_f64((y.len()) as f64);
    Ok(y.iter().zip(yhat).map(|(&a, &b)| (a - b).abs()).sum::<F>() / n)
}

/// Weighted absolute percentage error: sum |err| / sum actuals. The
/// denominator must be positive; a zero sum is an explicit error, never a
/// silent infinity.
pub fn wape<F: Scalar>(y: &[F], yhat: &[F]) -> Result<F> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(CoreError::ShapeMismatch {
            context: "wape".into(),
            expected: format!("equal nonzero lengths ({})", y.len()),
            got: format!("{}", yhat.len()),
        });
    }
    let denom = y.iter().copied().sum::<F>();
    if denom <= F::zero() {
        return Err(CoreError::WapeUndefined);
    }
    let num = y.iter().zip(yhat).map(|(&a, &b)| (a - b).abs()).sum::<F>();
    Ok(num / denom)
}

/// Linear-interpolation quantile of an unsorted slice (same convention as
/// numpy's default); even-N medians are the midpoint of the central order
/// statistics.
pub fn quantile<F: Scalar>(values: &[F], q: f64) -> F {
    debug_assert!(!values.is_empty());
    let mut sorted: Vec<F> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = F::from_f64(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub const BAND_QUANTILES: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];

/// Per-week q10/q25/q50/q75/q90 over the draws of a `(W, N)` sheet.
pub fn weekly_quantiles<F: Scalar>(draws: &Array2<F>) -> Vec<[F; 5]> {
    (0..draws.nrows())
        .map(|w| {
            let row: Vec<F> = draws.row(w).to_vec();
            let mut out = [F::zero(); 5];
            for (slot, &q) in out.iter_mut().zip(BAND_QUANTILES.iter()) {
                *slot = quantile(&row, q);
            }
            out
        })
        .collect()
}

/// Per-week mean and median across the draws of a `(W, N)` sheet.
pub fn aggregate_baselines<F: Scalar>(draws: &Array2<F>) -> (Vec<F>, Vec<F>) {
    let n = F::from_f64((draws.ncols()) as f64);
    let mean: Vec<F> = (0..draws.nrows())
        .map(|w| draws.row(w).sum() / n)
        .collect();
    let median: Vec<F> = (0..draws.nrows())
        .map(|w| quantile(&draws.row(w).to_vec(), 0.5))
        .collect();
    (mean, median)
}

/// One product's evaluation entry, all values in raw (denormalized) units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductReport {
    pub id: String,
    pub truth: Vec<f64>,
    pub refined: Vec<f64>,
    /// Refined forecast with negative sales clamped to zero.
    pub refined_clamped: Vec<f64>,
    /// Per-week [q10, q25, q50, q75, q90] of the draw sheet.
    pub quantiles: Vec<[f64; 5]>,
    pub mae: f64,
    pub mae_clamped: f64,
    pub abs_err_sum: f64,
    pub abs_err_sum_clamped: f64,
    pub truth_sum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    /// MAE averaged per product, then across products.
    pub mae: f64,
    pub mae_clamped: f64,
    /// WAPE pooled: summed errors over summed actuals across all products.
    pub wape: f64,
    pub wape_clamped: f64,
    /// Mean of per-product WAPEs, emitted for transparency (differs from the
    /// pooled ratio in general).
    pub wape_mean_of_products: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub diffusion_hash: String,
    pub refiner_hash: String,
    pub n_samples: usize,
    pub config: serde_json::Value,
    /// The evaluation split doubles as the monitoring set during training
    /// (the benchmark ships no validation split); flagged here on purpose.
    pub caveat: String,
    pub skipped_products: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastReport {
    pub products: Vec<ProductReport>,
    pub aggregate: AggregateMetrics,
    pub metadata: ReportMetadata,
}

pub fn product_report<F: Scalar>(
    id: &str,
    truth: &[F],
    refined: &[F],
    sheet_raw: &Array2<F>,
) -> Result<ProductReport> {
    let clamped: Vec<F> = refined.iter().map(|&v| v.max(F::zero())).collect();
    let quantiles = weekly_quantiles(sheet_raw)
        .into_iter()
        .map(|qs| {
            let mut out = [0.0; 5];
            for (o, q) in out.iter_mut().zip(qs.iter()) {
                *o = (*q).to_f64();
            }
            out
        })
        .collect();
    let abs_err_sum: F = truth
        .iter()
        .zip(refined)
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    let abs_err_sum_clamped: F = truth
        .iter()
        .zip(&clamped)
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(ProductReport {
        id: id.to_string(),
        truth: truth.iter().map(|&v| v.to_f64()).collect(),
        refined: refined.iter().map(|&v| v.to_f64()).collect(),
        refined_clamped: clamped.iter().map(|&v| v.to_f64()).collect(),
        quantiles,
        mae: mae(truth, refined)?.to_f64(),
        mae_clamped: mae(truth, &clamped)?.to_f64(),
        abs_err_sum: abs_err_sum.to_f64(),
        abs_err_sum_clamped: abs_err_sum_clamped.to_f64(),
        truth_sum: truth.iter().map(|&v| v.to_f64()).sum(),
    })
}

/// Aggregate over products: MAE averaged per product then across products,
/// WAPE pooled (summed numerators and denominators before dividing).
pub fn aggregate(products: &[ProductReport]) -> Result<AggregateMetrics> {
    if products.is_empty() {
        return Ok(AggregateMetrics {
            mae: 0.0,
            mae_clamped: 0.0,
            wape: 0.0,
            wape_clamped: 0.0,
            wape_mean_of_products: 0.0,
        });
    }
    let n = products.len() as f64;
    let truth_total: f64 = products.iter().map(|p| p.truth_sum).sum();
    if truth_total <= 0.0 {
        return Err(CoreError::WapeUndefined);
    }
    let err_total: f64 = products.iter().map(|p| p.abs_err_sum).sum();
    let err_total_clamped: f64 = products.iter().map(|p| p.abs_err_sum_clamped).sum();
    let per_product_wape: f64 = products
        .iter()
        .filter(|p| p.truth_sum > 0.0)
        .map(|p| p.abs_err_sum / p.truth_sum)
        .sum::<f64>()
        / products.iter().filter(|p| p.truth_sum > 0.0).count().max(1) as f64;
    Ok(AggregateMetrics {
        mae: products.iter().map(|p| p.mae).sum::<f64>() / n,
        mae_clamped: products.iter().map(|p| p.mae_clamped).sum::<f64>() / n,
        wape: err_total / truth_total,
        wape_clamped: err_total_clamped / truth_total,
        wape_mean_of_products: per_product_wape,
    })
}
