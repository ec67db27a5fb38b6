//! Noise schedule, closed-form forward noising, and ancestral reverse
//! sampling with an optional guidance hook. Independent of any particular
//! denoiser network.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::num::Scalar;
use crate::sheet::SampleSheet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Reverse-step standard deviation choice; the small DDPM variance
/// (sigma^2 = beta) is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    Beta,
    Posterior,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NoiseSchedule<F: Scalar> {
    pub t_max: usize,
    pub beta: Vec<F>,
    pub alpha: Vec<F>,
    pub alpha_bar: Vec<F>,
    pub sigma: Vec<F>,
}

pub const DEFAULT_T: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl<F: Scalar> NoiseSchedule<F> {
    pub fn make(
        t_max: usize,
        _kind: ScheduleKind,
        beta_start: f64,
        beta_end: f64,
        sigma_kind: SigmaKind,
    ) -> Result<Self> {
        if t_max < 1 {
            return Err(CoreError::InvalidSchedule {
                index: 0,
                reason: "T must be >= 1".into(),
            });
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::InvalidSchedule {
                index: 0,
                reason: format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
            });
        }
        let mut beta = Vec::with_capacity(t_max);
        let mut alpha = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = F::one();
        for i in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            let b = F::from_f64(beta_start + (beta_end - beta_start) * frac);
            let a = F::one() - b;
            prod = prod * a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(prod);
        }
        let mut sigma = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let s2 = match sigma_kind {
                SigmaKind::Beta => beta[i],
                SigmaKind::Posterior => {
                    let prev = if i == 0 { F::one() } else { alpha_bar[i - 1] };
                    beta[i] * (F::one() - prev) / (F::one() - alpha_bar[i])
                }
            };
            sigma.push(s2.sqrt());
        }
        let schedule = NoiseSchedule {
            t_max,
            beta,
            alpha,
            alpha_bar,
            sigma,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn default_linear(t_max: usize) -> Result<Self> {
        Self::make(
            t_max,
            ScheduleKind::Linear,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            SigmaKind::Beta,
        )
    }

    fn validate(&self) -> Result<()> {
        for (i, &b) in self.beta.iter().enumerate() {
            if !(b > F::zero() && b < F::one()) || !b.is_finite() {
                return Err(CoreError::InvalidSchedule {
                    index: i,
                    reason: format!("beta out of (0,1): {}", b.to_f64()),
                });
            }
        }
        for i in 1..self.t_max {
            if self.alpha_bar[i] >= self.alpha_bar[i - 1] {
                return Err(CoreError::InvalidSchedule {
                    index: i,
                    reason: "alpha_bar not strictly decreasing".into(),
                });
            }
        }
        for (i, &s) in self.sigma.iter().enumerate() {
            if s < F::zero() || !s.is_finite() {
                return Err(CoreError::InvalidSchedule {
                    index: i,
                    reason: "sigma negative or non-finite".into(),
                });
            }
        }
        Ok(())
    }

    /// `alpha_bar[t]` with 1-based step index.
    pub fn alpha_bar_at(&self, t: usize) -> F {
        self.alpha_bar[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(CoreError::StepOutOfRange { t, max: self.t_max });
        }
        Ok(())
    }
}

/// Closed-form forward noising: x^t = sqrt(abar_t) x0 + sqrt(1-abar_t) noise.
pub fn forward_sample<F: Scalar>(
    x0: &Array1<F>,
    t: usize,
    noise: &Array1<F>,
    schedule: &NoiseSchedule<F>,
) -> Result<Array1<F>> {
    schedule.check_t(t)?;
    if x0.len() != noise.len() {
        return Err(CoreError::ShapeMismatch {
            context: "forward_sample".into(),
            expected: format!("noise len {}", x0.len()),
            got: format!("{}", noise.len()),
        });
    }
    let abar = schedule.alpha_bar_at(t);
    let a = abar.sqrt();
    let b = (F::one() - abar).sqrt();
    Ok(x0.mapv(|v| v * a) + &noise.mapv(|v| v * b))
}

/// Optional guidance term for the reverse step.
pub struct GuidanceSpec<'a, F: Scalar> {
    pub strength: F,
    #[allow(clippy::type_complexity)]
    pub gradient_fn: Option<&'a dyn Fn(&Array1<F>, usize) -> Array1<F>>,
}

impl<F: Scalar> Default for GuidanceSpec<'_, F> {
    fn default() -> Self {
        GuidanceSpec {
            strength: F::zero(),
            gradient_fn: None,
        }
    }
}

/// One ancestral reverse step. The mean is the standard DDPM posterior mean
/// computed from the predicted noise; with positive guidance strength the
/// extra `s * sigma_t^2 * grad` term is added. No noise is injected at t=1.
pub fn reverse_step<F: Scalar, R: Rng>(
    xt: &Array1<F>,
    t: usize,
    predicted_noise: &Array1<F>,
    guidance: &GuidanceSpec<F>,
    schedule: &NoiseSchedule<F>,
    rng: &mut R,
) -> Result<Array1<F>> {
    schedule.check_t(t)?;
    if xt.len() != predicted_noise.len() {
        return Err(CoreError::ShapeMismatch {
            context: "reverse_step".into(),
            expected: format!("predicted_noise len {}", xt.len()),
            got: format!("{}", predicted_noise.len()),
        });
    }
    let idx = t - 1;
    let beta = schedule.beta[idx];
    let alpha = schedule.alpha[idx];
    let abar = schedule.alpha_bar[idx];
    let sigma = schedule.sigma[idx];
    let coef = beta / (F::one() - abar).sqrt();
    let sqrt_alpha = alpha.sqrt();
    let mut mean: Array1<F> = xt
        .iter()
        .zip(predicted_noise.iter())
        .map(|(&x, &e)| (x - coef * e) / sqrt_alpha)
        .collect();
    if guidance.strength > F::zero() {
        if let Some(grad_fn) = guidance.gradient_fn {
            let grad = grad_fn(xt, t);
            let scale = guidance.strength * sigma * sigma;
            mean = mean + &grad.mapv(|g| g * scale);
        }
    }
    if t == 1 || sigma == F::zero() {
        return Ok(mean);
    }
    let noise: Array1<F> = (0..xt.len()).map(|_| F::standard_normal(rng)).collect();
    Ok(mean + &noise.mapv(|z| z * sigma))
}

/// Batched denoiser contract used by the sampling loop.
pub trait Denoiser<F: Scalar> {
    /// Predict the injected noise for a batch of noised curves (rows) at a
    /// shared step `t`, under one conditioning vector `(C, 1)`.
    fn predict_noise(&self, xt: &Array2<F>, t: usize, cond: &Array2<F>) -> Result<Array2<F>>;
    fn horizon(&self) -> usize;
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Draw `n_samples` iid curves for one conditioning embedding. Each draw has
/// its own rng substream keyed by its index, so the sheet is identical
/// however the draws are scheduled; the one batched denoiser call per step is
/// shared across draws.
pub fn sample<F: Scalar, D: Denoiser<F>>(
    denoiser: &D,
    cond: &Array2<F>,
    n_samples: usize,
    schedule: &NoiseSchedule<F>,
    guidance: &GuidanceSpec<F>,
    seed: u64,
    product_id: &str,
) -> Result<SampleSheet<F>> {
    if n_samples < 1 {
        return Err(CoreError::InvalidConfig("n_samples must be >= 1".into()));
    }
    let w = denoiser.horizon();
    let mut rngs: Vec<ChaCha8Rng> = (0..n_samples)
        .map(|n| ChaCha8Rng::seed_from_u64(mix_seed(seed, n as u64)))
        .collect();
    let mut xt = Array2::zeros((n_samples, w));
    for (n, rng) in rngs.iter_mut().enumerate() {
        for j in 0..w {
            xt[(n, j)] = F::standard_normal(rng);
        }
    }
    for t in (1..=schedule.t_max).rev() {
        let eps = denoiser.predict_noise(&xt, t, cond)?;
        if !eps.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: format!("denoiser output at step {t}"),
            });
        }
        for (n, rng) in rngs.iter_mut().enumerate() {
            let row = xt.row(n).to_owned();
            let eps_row = eps.row(n).to_owned();
            let next = reverse_step(&row, t, &eps_row, guidance, schedule, rng)?;
            xt.row_mut(n).assign(&next);
        }
    }
    // draws stored week-major: (W, N)
    Ok(SampleSheet::new(xt.t().to_owned(), product_id.to_string(), seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::<f64>::make(1, ScheduleKind::Linear, 0.5, 0.5, SigmaKind::Beta)
            .unwrap();
        assert_eq!(s.alpha_bar, vec![0.5]);
    }

    #[test]
    fn default_schedule_terminal_marginal_is_small() {
        let s = NoiseSchedule::<f64>::default_linear(DEFAULT_T).unwrap();
        for i in 1..s.t_max {
            assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
        }
        // with 100 steps of the standard beta range, roughly e^{-sum beta}
        let expected = (-s.beta.iter().sum::<f64>()).exp();
        let got = s.alpha_bar[s.t_max - 1];
        assert!(got < 0.5 && (got - expected).abs() < 0.05, "abar_T = {got}");
        assert!(s.beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn invalid_beta_end_rejected() {
        assert!(
            NoiseSchedule::<f64>::make(10, ScheduleKind::Linear, 1e-4, 1.0, SigmaKind::Beta)
                .is_err()
        );
    }

    #[test]
    fn forward_with_zero_noise_scales_x0() {
        let s = NoiseSchedule::<f64>::default_linear(50).unwrap();
        let x0 = array![1.0, -2.0, 0.5];
        let noise = Array1::zeros(3);
        let xt = forward_sample(&x0, 17, &noise, &s).unwrap();
        let a = s.alpha_bar_at(17).sqrt();
        for (got, want) in xt.iter().zip(x0.iter().map(|v| v * a)) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_out_of_range_t() {
        let s = NoiseSchedule::<f64>::default_linear(10).unwrap();
        let x0 = array![1.0];
        let noise = array![0.0];
        assert!(forward_sample(&x0, 0, &noise, &s).is_err());
        assert!(forward_sample(&x0, 11, &noise, &s).is_err());
    }

    #[test]
    fn zero_guidance_is_bitwise_noop() {
        let s = NoiseSchedule::<f64>::default_linear(20).unwrap();
        let xt = array![0.3, -0.8, 1.2];
        let eps = array![0.1, 0.2, -0.4];
        let huge_grad = |_x: &Array1<f64>, _t: usize| array![1e9, 1e9, 1e9];
        let with = GuidanceSpec {
            strength: 0.0,
            gradient_fn: Some(&huge_grad),
        };
        let without = GuidanceSpec::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = reverse_step(&xt, 5, &eps, &with, &s, &mut r1).unwrap();
        let b = reverse_step(&xt, 5, &eps, &without, &s, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_sigma_returns_mean_exactly() {
        let mut s = NoiseSchedule::<f64>::default_linear(20).unwrap();
        s.sigma[4] = 0.0;
        let xt = array![0.3, -0.8];
        let eps = array![0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = reverse_step(&xt, 5, &eps, &GuidanceSpec::default(), &s, &mut rng).unwrap();
        let idx = 4;
        let coef = s.beta[idx] / (1.0 - s.alpha_bar[idx]).sqrt();
        for j in 0..2 {
            let mean = (xt[j] - coef * eps[j]) / s.alpha[idx].sqrt();
            assert_eq!(out[j], mean);
        }
    }

    struct ZeroDenoiser {
        w: usize,
    }
    impl Denoiser<f64> for ZeroDenoiser {
        fn predict_noise(
            &self,
            xt: &Array2<f64>,
            _t: usize,
            _cond: &Array2<f64>,
        ) -> Result<Array2<f64>> {
            Ok(Array2::zeros(xt.dim()))
        }
        fn horizon(&self) -> usize {
            self.w
        }
    }

    #[test]
    fn sheet_shape_and_reproducibility() {
        let s = NoiseSchedule::<f64>::default_linear(10).unwrap();
        let d = ZeroDenoiser { w: 6 };
        let cond = Array2::zeros((4, 1));
        let a = sample(&d, &cond, 50, &s, &GuidanceSpec::default(), 9, "p").unwrap();
        let b = sample(&d, &cond, 50, &s, &GuidanceSpec::default(), 9, "p").unwrap();
        assert_eq!(a.draws.dim(), (6, 50));
        assert_eq!(a.draws, b.draws);
        let c = sample(&d, &cond, 50, &s, &GuidanceSpec::default(), 10, "p").unwrap();
        assert_ne!(a.draws, c.draws);
    }
}
