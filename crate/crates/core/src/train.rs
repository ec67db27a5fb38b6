//! Diffusion-stage training: per-batch noise regression with AdamW, plus a
//! fully serializable training state so interrupted runs resume bitwise.

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::conditioning::{conditioning_embedding, init_conditioning, ConditioningConfig};
use crate::data::{Dataset, NormalizationMode, ProductRecord, Split};
use crate::denoiser::{denoiser_forward_single, init_denoiser, DenoiserConfig, Parameterization};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, ParamStore};
use crate::num::Scalar;
use crate::optim::{AdamW, AdamWConfig};
use crate::refine::RefinerHyper;
use crate::schedule::{forward_sample, NoiseSchedule, ScheduleKind, SigmaKind};

pub const DENOISER_PREFIX: &str = "den";
pub const CONDITIONING_PREFIX: &str = "cond";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub denoiser: DenoiserConfig,
    pub conditioning: ConditioningConfig,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_kind: SigmaKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub normalization: NormalizationMode,
    /// Draws per product in the sampling stage.
    pub n_samples: usize,
    pub refiner: RefinerHyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            denoiser: DenoiserConfig::default(),
            conditioning: ConditioningConfig::default(),
            t_max: crate::schedule::DEFAULT_T,
            beta_start: crate::schedule::DEFAULT_BETA_START,
            beta_end: crate::schedule::DEFAULT_BETA_END,
            sigma_kind: SigmaKind::Beta,
            epochs: 500,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            normalization: NormalizationMode::Zscore,
            n_samples: 50,
            refiner: RefinerHyper::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.conditioning.validate()?;
        if self.denoiser.horizon != self.conditioning.horizon {
            return Err(CoreError::InvalidConfig(format!(
                "denoiser horizon {} != conditioning horizon {}",
                self.denoiser.horizon, self.conditioning.horizon
            )));
        }
        if self.denoiser.channels != self.conditioning.channels {
            return Err(CoreError::InvalidConfig(format!(
                "denoiser channels {} != conditioning channels {}",
                self.denoiser.channels, self.conditioning.channels
            )));
        }
        if self.batch_size == 0 || self.n_samples == 0 {
            return Err(CoreError::InvalidConfig(
                "batch_size and n_samples must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule<F: Scalar>(&self) -> Result<NoiseSchedule<F>> {
        NoiseSchedule::make(
            self.t_max,
            ScheduleKind::Linear,
            self.beta_start,
            self.beta_end,
            self.sigma_kind,
        )
    }
}

/// Everything the diffusion stage needs to continue from exactly where it
/// stopped: parameters, optimizer moments, the rng mid-stream, and the epoch
/// counter. Serialized as JSON; reloading and continuing is bitwise identical
/// to never having stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainState<F: Scalar> {
    pub epoch: usize,
    pub params: ParamStore<F>,
    pub optim: AdamW<F>,
    pub rng: ChaCha8Rng,
    pub loss_history: Vec<f64>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_denoiser(&config.denoiser, &mut params, DENOISER_PREFIX, config.seed);
        init_conditioning(
            &config.conditioning,
            &mut params,
            CONDITIONING_PREFIX,
            config.seed.wrapping_add(1),
        );
        Ok(TrainState {
            epoch: 0,
            params,
            optim: AdamW::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
            loss_history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// One optimizer step on a batch of records. Each record gets its own uniform
/// step index and fresh noise; the loss is the mean squared error between the
/// network output and its regression target (the injected noise, or the clean
/// curve under the x0 parameterization), averaged over the batch.
pub fn diffusion_train_step<F: Scalar>(
    batch: &[&ProductRecord<F>],
    year_range: (i32, i32),
    config: &TrainConfig,
    schedule: &NoiseSchedule<F>,
    state: &mut TrainState<F>,
) -> Result<f64> {
    debug_assert!(!batch.is_empty());
    let w = config.denoiser.horizon;
    let mut g = Graph::new();
    let mut per_item = Vec::with_capacity(batch.len());
    for rec in batch {
        if rec.sales.horizon().len() != w {
            return Err(CoreError::ShapeMismatch {
                context: format!("sales for product {}", rec.id),
                expected: format!("horizon {w}"),
                got: format!("{}", rec.sales.horizon().len()),
            });
        }
        let t = state.rng.gen_range(1..=schedule.t_max);
        let x0 = Array1::from_vec(rec.sales.horizon().to_vec());
        let noise: Array1<F> = (0..w).map(|_| F::standard_normal(&mut state.rng)).collect();
        let xt = forward_sample(&x0, t, &noise, schedule)?;
        let cond = conditioning_embedding(
            &mut g,
            &state.params,
            CONDITIONING_PREFIX,
            &config.conditioning,
            &rec.image,
            &rec.release,
            year_range,
        )?;
        let xt_node = g.leaf(xt.insert_axis(Axis(0)));
        let pred = denoiser_forward_single(
            &mut g,
            &state.params,
            DENOISER_PREFIX,
            &config.denoiser,
            xt_node,
            t,
            cond,
        )?;
        let target = match config.denoiser.parameterization {
            Parameterization::Epsilon => noise,
            Parameterization::X0 => x0,
        };
        let target_node = g.leaf(target.insert_axis(Axis(0)));
        per_item.push(g.mse(pred, target_node));
    }
    let stacked = g.concat_rows(&per_item);
    let loss = g.mean_all(stacked);
    let loss_value = g.value(loss)[(0, 0)].to_f64();
    if !loss_value.is_finite() {
        return Err(CoreError::Diverged {
            epoch: state.epoch,
            last_loss: state.loss_history.last().copied().unwrap_or(f64::NAN),
        });
    }
    let grads = g.backward(loss);
    let param_grads = g.param_grads(&grads);
    state.optim.step(&mut state.params, &param_grads);
    Ok(loss_value)
}

/// Run diffusion training until `target_epochs`, shuffling the train split
/// each epoch from the state rng. Returns the mean batch loss of the last
/// epoch run (or the last recorded loss if already at the target).
pub fn run_diffusion_epochs<F: Scalar>(
    dataset: &Dataset<F>,
    config: &TrainConfig,
    state: &mut TrainState<F>,
    target_epochs: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<f64> {
    config.validate()?;
    let schedule = config.schedule::<F>()?;
    let train: Vec<&ProductRecord<F>> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(CoreError::Dataset("train split is empty".into()));
    }
    let year_range = dataset.year_range;
    while state.epoch < target_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ProductRecord<F>> = chunk.iter().map(|&i| train[i]).collect();
            epoch_loss += diffusion_train_step(&batch, year_range, config, &schedule, state)?;
            n_batches += 1;
        }
        epoch_loss /= n_batches as f64;
        state.epoch += 1;
        state.loss_history.push(epoch_loss);
        on_epoch(state.epoch, epoch_loss);
    }
    Ok(state.loss_history.last().copied().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::synthetic::{generate_synthetic, SyntheticConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            denoiser: DenoiserConfig {
                n_blocks: 1,
                channels: 8,
                horizon: 6,
                ssm_state_dim: 4,
                step_embed_dim: 8,
                parameterization: Parameterization::Epsilon,
            },
            conditioning: ConditioningConfig {
                channels: 8,
                horizon: 6,
                n_heads: 2,
                positional_encoding: true,
                backbone_channels: vec![4, 8],
                use_image: true,
                use_temporal: true,
            },
            t_max: 10,
            epochs: 2,
            batch_size: 4,
            n_samples: 4,
            seed: 7,
            ..Default::default()
        }
    }

    fn tiny_dataset() -> Dataset<f64> {
        let cfg = SyntheticConfig {
            n_train: 8,
            n_test: 2,
            image_size: 32,
            ..Default::default()
        };
        let (ds, _) = generate_synthetic::<f64>(&cfg, 3).unwrap();
        ds.normalize_sales(NormalizationMode::Zscore).unwrap()
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut cfg = tiny_config();
        cfg.conditioning.channels = 16;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn one_step_decreases_nothing_nonfinite_and_updates_params() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let mut state = TrainState::<f64>::new(&cfg).unwrap();
        let before = state.params.clone();
        let schedule = cfg.schedule::<f64>().unwrap();
        let batch: Vec<&ProductRecord<f64>> = ds.split(Split::Train).take(4).collect();
        let loss =
            diffusion_train_step(&batch, ds.year_range, &cfg, &schedule, &mut state).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let moved = state
            .params
            .iter()
            .any(|(name, v)| v != before.get(name));
        assert!(moved, "optimizer step must move parameters");
    }

    #[test]
    fn training_loss_trends_down() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let cfg = TrainConfig {
            optimizer: crate::optim::AdamWConfig {
                learning_rate: 3e-3,
                ..Default::default()
            },
            ..cfg
        };
        let mut state = TrainState::<f64>::new(&cfg).unwrap();
        run_diffusion_epochs(&ds, &cfg, &mut state, 40, |_, _| {}).unwrap();
        let head: f64 = state.loss_history[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = state.loss_history[35..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "loss should trend down: first {head:.4}, last {tail:.4}"
        );
    }

    #[test]
    fn state_json_round_trip_is_bitwise() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let mut state = TrainState::<f64>::new(&cfg).unwrap();
        run_diffusion_epochs(&ds, &cfg, &mut state, 2, |_, _| {}).unwrap();
        let text = serde_json::to_string(&state).unwrap();
        let loaded: TrainState<f64> = serde_json::from_str(&text).unwrap();
        for (name, v) in state.params.iter() {
            for (a, b) in v.iter().zip(loaded.params.get(name).iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "param {name} bits differ");
            }
        }
        assert_eq!(text, serde_json::to_string(&loaded).unwrap());
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let ds = tiny_dataset();
        let cfg = tiny_config();

        let mut straight = TrainState::<f64>::new(&cfg).unwrap();
        run_diffusion_epochs(&ds, &cfg, &mut straight, 4, |_, _| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let mut halted = TrainState::<f64>::new(&cfg).unwrap();
        run_diffusion_epochs(&ds, &cfg, &mut halted, 2, |_, _| {}).unwrap();
        halted.save(&path).unwrap();
        let mut resumed = TrainState::<f64>::load(&path).unwrap();
        run_diffusion_epochs(&ds, &cfg, &mut resumed, 4, |_, _| {}).unwrap();

        assert_eq!(straight.epoch, resumed.epoch);
        assert_eq!(straight.loss_history, resumed.loss_history);
        for (name, v) in straight.params.iter() {
            assert_eq!(v, resumed.params.get(name), "param {name} diverged");
        }
    }
}

