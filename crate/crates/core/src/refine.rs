//! MLP refinement head: maps the W x N sheet of diffusion draws to the final
//! W-week forecast.
//!
//! The temporal stack is five dense layers on the week dimension with ReLU
//! between them and a skip connection from the input; the sample stack is
//! three dense layers compressing the draw dimension N -> 1. The sample
//! stack is affine (no activations), which keeps the per-week mean
//! aggregator exactly representable: zero the temporal stack and set each
//! compression layer to uniform averaging weights.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::num::Scalar;
use crate::optim::{AdamW, AdamWConfig};
use crate::sheet::SampleSheet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub horizon: usize,
    pub n_draws: usize,
    /// Widths of the five temporal layers' outputs; last must equal horizon.
    pub temporal_widths: Vec<usize>,
    /// Widths of the three sample layers' outputs; last must be 1.
    pub sample_widths: Vec<usize>,
}

impl RefinerConfig {
    pub fn with_dims(horizon: usize, n_draws: usize) -> Self {
        RefinerConfig {
            horizon,
            n_draws,
            temporal_widths: vec![4 * horizon, 8 * horizon, 8 * horizon, 4 * horizon, horizon],
            sample_widths: vec![(n_draws / 2).max(1), (n_draws / 4).max(1), 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_widths.last() != Some(&self.horizon) {
            return Err(CoreError::InvalidConfig(
                "temporal stack must end at the horizon width".into(),
            ));
        }
        if self.sample_widths.last() != Some(&1) {
            return Err(CoreError::InvalidConfig(
                "sample stack must end at width 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RefinerHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RefinerHyper {
    fn default() -> Self {
        RefinerHyper {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Initialize refiner parameters. The temporal stack starts at zero (the skip
/// makes it an identity) and the sample stack at uniform averaging, so an
/// untrained refiner already computes the per-week mean of the draws.
pub fn init_refiner<F: Scalar>(
    config: &RefinerConfig,
    store: &mut ParamStore<F>,
    prefix: &str,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_w = config.horizon;
    for (i, &out_w) in config.temporal_widths.iter().enumerate() {
        let scale = 0.01 / (in_w as f64).sqrt();
        store.init_normal(format!("{prefix}.t{i}.w"), out_w, in_w, scale, &mut rng);
        store.init_zeros(format!("{prefix}.t{i}.b"), out_w, config.n_draws);
        in_w = out_w;
    }
    let mut in_n = config.n_draws;
    for (i, &out_n) in config.sample_widths.iter().enumerate() {
        let avg = F::from_f64(1.0 / in_n as f64);
        store.insert(
            format!("{prefix}.n{i}.w"),
            Array2::from_elem((in_n, out_n), avg),
        );
        store.init_zeros(format!("{prefix}.n{i}.b"), config.horizon, out_n);
        in_n = out_n;
    }
}

/// Set the analytic mean-aggregator weights: temporal stack zeroed, sample
/// stack uniform averaging, all biases zero.
pub fn set_mean_aggregator<F: Scalar>(config: &RefinerConfig, store: &mut ParamStore<F>, prefix: &str) {
    let mut in_w = config.horizon;
    for (i, &out_w) in config.temporal_widths.iter().enumerate() {
        store.insert(format!("{prefix}.t{i}.w"), Array2::zeros((out_w, in_w)));
        store.insert(
            format!("{prefix}.t{i}.b"),
            Array2::zeros((out_w, config.n_draws)),
        );
        in_w = out_w;
    }
    let mut in_n = config.n_draws;
    for (i, &out_n) in config.sample_widths.iter().enumerate() {
        let avg = F::from_f64(1.0 / in_n as f64);
        store.insert(
            format!("{prefix}.n{i}.w"),
            Array2::from_elem((in_n, out_n), avg),
        );
        store.insert(
            format!("{prefix}.n{i}.b"),
            Array2::zeros((config.horizon, out_n)),
        );
        in_n = out_n;
    }
}

/// Forward pass: sheet node `(W, N)` -> forecast node `(W, 1)`.
pub fn refine_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    prefix: &str,
    config: &RefinerConfig,
    sheet: NodeId,
) -> Result<NodeId> {
    config.validate()?;
    let (w, n) = g.shape(sheet);
    if w != config.horizon || n != config.n_draws {
        return Err(CoreError::ShapeMismatch {
            context: "refine".into(),
            expected: format!("({}, {})", config.horizon, config.n_draws),
            got: format!("({w}, {n})"),
        });
    }
    // temporal stack on the week dimension, ReLU between layers
    let mut h = sheet;
    let n_layers = config.temporal_widths.len();
    for i in 0..n_layers {
        let wmat = g.param(store, &format!("{prefix}.t{i}.w"));
        let bmat = g.param(store, &format!("{prefix}.t{i}.b"));
        let lin = g.matmul(wmat, h);
        h = g.add(lin, bmat);
        if i + 1 < n_layers {
            h = g.relu(h);
        }
    }
    // skip connection from the input sheet
    let mut x = g.add(h, sheet);
    // affine sample stack on the draw dimension
    for i in 0..config.sample_widths.len() {
        let wmat = g.param(store, &format!("{prefix}.n{i}.w"));
        let bmat = g.param(store, &format!("{prefix}.n{i}.b"));
        let lin = g.matmul(x, wmat);
        x = g.add(lin, bmat);
    }
    Ok(x)
}

/// Eval-mode refinement of one sheet.
pub fn refine<F: Scalar>(
    sheet: &SampleSheet<F>,
    store: &ParamStore<F>,
    prefix: &str,
    config: &RefinerConfig,
) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let input = g.leaf(sheet.draws.clone());
    let out = refine_forward(&mut g, store, prefix, config, input)?;
    Ok(g.value(out).column(0).to_vec())
}

/// Mean squared error between two equal-length series.
pub fn mse_loss<F: Scalar>(y: &[F], yhat: &[F]) -> Result<F> {
    if y.len() != yhat.len() {
        return Err(CoreError::ShapeMismatch {
            context: "mse_loss".into(),
            expected: format!("len {}", y.len()),
            got: format!("len {}", yhat.len()),
        });
    }
    let n = F::from_f64((y.len()) as f64);
    Ok(y.iter()
        .zip(yhat)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<F>()
        / n)
}

/// Full-batch gradient training of the refiner on (sheet, truth) pairs.
/// Returns the per-epoch loss history.
pub fn train_refiner<F: Scalar>(
    pairs: &[(SampleSheet<F>, Vec<F>)],
    config: &RefinerConfig,
    hyper: &RefinerHyper,
    store: &mut ParamStore<F>,
    prefix: &str,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(CoreError::InvalidConfig("need >= 1 training pair".into()));
    }
    for (sheet, truth) in pairs {
        if sheet.draws.dim() != (config.horizon, config.n_draws) || truth.len() != config.horizon {
            return Err(CoreError::ShapeMismatch {
                context: "train_refiner".into(),
                expected: format!("sheets ({}, {})", config.horizon, config.n_draws),
                got: format!("{:?}", sheet.draws.dim()),
            });
        }
    }
    let mut optim = AdamW::new(AdamWConfig {
        learning_rate: hyper.learning_rate,
        weight_decay: hyper.weight_decay,
        ..Default::default()
    });
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut last_finite = f64::NAN;
    for epoch in 0..hyper.epochs {
        let mut g = Graph::new();
        let mut total: Option<NodeId> = None;
        for (sheet, truth) in pairs {
            let input = g.leaf(sheet.draws.clone());
            let pred = refine_forward(&mut g, store, prefix, config, input)?;
            let target = g.leaf(Array2::from_shape_vec(
                (config.horizon, 1),
                truth.clone(),
            )
            .expect("target shape"));
            let loss = g.mse(pred, target);
            total = Some(match total {
                None => loss,
                Some(acc) => g.add(acc, loss),
            });
        }
        let total = total.unwrap();
        let scaled = g.scale(total, F::from_f64(1.0 / pairs.len() as f64));
        let loss_value = g.scalar_value(scaled).to_f64();
        if !loss_value.is_finite() {
            return Err(CoreError::Diverged {
                epoch,
                last_loss: last_finite,
            });
        }
        last_finite = loss_value;
        history.push(loss_value);
        let grads = g.backward(scaled);
        let named = g.param_grads(&grads);
        optim.step(store, &named);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::Scalar;
    use ndarray::Array2;

    fn sheet_from(draws: Array2<f64>) -> SampleSheet<f64> {
        SampleSheet::new(draws, "p".into(), 0)
    }

    #[test]
    fn mse_hand_cases() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        let base = mse_loss(&[0.0, 0.0], &[1.0, 3.0]).unwrap();
        let doubled: f64 = mse_loss(&[0.0, 0.0], &[2.0, 6.0]).unwrap();
        assert!((doubled - 4.0 * base).abs() < 1e-12);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_aggregator_construction_is_exact() {
        let config = RefinerConfig::with_dims(6, 50);
        let mut store = ParamStore::new();
        init_refiner(&config, &mut store, "ref", 0);
        set_mean_aggregator(&config, &mut store, "ref");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand::SeedableRng;
        let draws = Array2::from_shape_fn((6, 50), |_| f64::standard_normal(&mut rng));
        let sheet = sheet_from(draws.clone());
        let out = refine(&sheet, &store, "ref", &config).unwrap();
        for w in 0..6 {
            let mean: f64 = draws.row(w).sum() / 50.0;
            assert!((out[w] - mean).abs() < 1e-12, "week {w}: {} vs {mean}", out[w]);
        }
    }

    #[test]
    fn constant_sheet_refines_to_the_constant() {
        let config = RefinerConfig::with_dims(6, 10);
        let mut store = ParamStore::new();
        init_refiner(&config, &mut store, "ref", 0);
        set_mean_aggregator(&config, &mut store, "ref");
        let target = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
        let draws = Array2::from_shape_fn((6, 10), |(w, _)| target[w]);
        let out = refine(&sheet_from(draws), &store, "ref", &config).unwrap();
        for w in 0..6 {
            assert!((out[w] - target[w]).abs() < 1e-12);
        }
    }

    #[test]
    fn output_length_is_horizon_for_any_n() {
        for n in [1usize, 7, 50] {
            let config = RefinerConfig::with_dims(6, n);
            let mut store = ParamStore::new();
            init_refiner(&config, &mut store, "ref", 2);
            let draws = Array2::from_elem((6, n), 0.5);
            let out = refine(&sheet_from(draws), &store, "ref", &config).unwrap();
            assert_eq!(out.len(), 6);
        }
    }

    #[test]
    fn n_mismatch_is_fatal() {
        let config = RefinerConfig::with_dims(6, 50);
        let mut store = ParamStore::new();
        init_refiner(&config, &mut store, "ref", 3);
        let draws = Array2::from_elem((6, 40), 0.5);
        assert!(refine(&sheet_from(draws), &store, "ref", &config).is_err());
    }

    #[test]
    fn single_pair_overfits_below_1e3() {
        let config = RefinerConfig::with_dims(6, 8);
        let mut store = ParamStore::new();
        init_refiner(&config, &mut store, "ref", 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        use rand::SeedableRng;
        let draws = Array2::from_shape_fn((6, 8), |_| f64::standard_normal(&mut rng));
        let truth: Vec<f64> = (0..6).map(|_| f64::standard_normal(&mut rng)).collect();
        let pairs = vec![(sheet_from(draws), truth)];
        let hyper = RefinerHyper {
            epochs: 400,
            ..Default::default()
        };
        let history = train_refiner(&pairs, &config, &hyper, &mut store, "ref").unwrap();
        let last = *history.last().unwrap();
        assert!(last < 1e-3, "final training MSE {last}");
    }

    #[test]
    fn training_is_reproducible() {
        let config = RefinerConfig::with_dims(6, 4);
        let run = || {
            let mut store = ParamStore::new();
            init_refiner(&config, &mut store, "ref", 6);
            let draws = Array2::from_shape_fn((6, 4), |(w, n)| (w as f64) - (n as f64) * 0.5);
            let truth: Vec<f64> = (0..6).map(|w| w as f64).collect();
            let pairs = vec![(sheet_from(draws), truth)];
            let hyper = RefinerHyper {
                epochs: 20,
                ..Default::default()
            };
            train_refiner(&pairs, &config, &hyper, &mut store, "ref").unwrap();
            store
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_draw_columns_changes_output_in_general() {
        let config = RefinerConfig::with_dims(6, 4);
        let mut store = ParamStore::new();
        init_refiner(&config, &mut store, "ref", 7);
        // make the head depend on column order by perturbing the first
        // compression layer away from uniform averaging
        store.get_mut("ref.n0.w")[(0, 0)] += 0.5;
        let draws = Array2::from_shape_fn((6, 4), |(w, n)| (w + 2 * n) as f64 * 0.1);
        let mut permuted = draws.clone();
        let tmp = permuted.column(0).to_owned();
        let col3 = permuted.column(3).to_owned();
        permuted.column_mut(0).assign(&col3);
        permuted.column_mut(3).assign(&tmp);
        let a = refine(&sheet_from(draws), &store, "ref", &config).unwrap();
        let b = refine(&sheet_from(permuted), &store, "ref", &config).unwrap();
        assert_ne!(a, b);
    }
}
