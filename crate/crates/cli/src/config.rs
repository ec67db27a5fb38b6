//! Run configuration file: one JSON document covering dataset, schedule,
//! model, training, and evaluation, with CLI-flag overrides. The fully
//! resolved form is persisted into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use newcast_core::conditioning::ConditioningConfig;
use newcast_core::data::NormalizationMode;
use newcast_core::denoiser::{DenoiserConfig, Parameterization};
use newcast_core::optim::AdamWConfig;
use newcast_core::refine::RefinerHyper;
use newcast_core::schedule::SigmaKind;
use newcast_core::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Visuelle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub source: DatasetSource,
    pub path: PathBuf,
    pub horizon: usize,
    pub image_size: usize,
    pub normalization: NormalizationMode,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: DatasetSource::Synthetic,
            path: PathBuf::from("data"),
            horizon: 6,
            image_size: 64,
            normalization: NormalizationMode::Zscore,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: SigmaKind,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            t_max: newcast_core::schedule::DEFAULT_T,
            beta_start: newcast_core::schedule::DEFAULT_BETA_START,
            beta_end: newcast_core::schedule::DEFAULT_BETA_END,
            sigma: SigmaKind::Beta,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub n_blocks: usize,
    pub channels: usize,
    pub ssm_state_dim: usize,
    pub step_embed_dim: usize,
    pub parameterization: Parameterization,
    pub n_heads: usize,
    pub positional_encoding: bool,
    pub backbone_channels: Vec<usize>,
    /// Ablation switches; at least one must stay on.
    pub use_image: bool,
    pub use_temporal: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_blocks: 4,
            channels: 64,
            ssm_state_dim: 16,
            step_embed_dim: 64,
            parameterization: Parameterization::Epsilon,
            n_heads: 4,
            positional_encoding: true,
            backbone_channels: vec![16, 32, 64, 64],
            use_image: true,
            use_temporal: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub refiner_epochs: usize,
    pub refiner_learning_rate: f64,
    pub refiner_weight_decay: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let refiner = RefinerHyper::default();
        TrainingSection {
            epochs: 500,
            batch_size: 16,
            learning_rate: opt.learning_rate,
            weight_decay: opt.weight_decay,
            refiner_epochs: refiner.epochs,
            refiner_learning_rate: refiner.learning_rate,
            refiner_weight_decay: refiner.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    pub n_samples: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { n_samples: 50 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("bad config {}: {e}", path.display()))?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !self.model.use_image && !self.model.use_temporal {
            anyhow::bail!("ablation flags use_image and use_temporal cannot both be false");
        }
        if self.evaluation.n_samples < 1 {
            anyhow::bail!("evaluation.n_samples must be >= 1");
        }
        self.to_train_config()
            .validate()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            denoiser: DenoiserConfig {
                n_blocks: self.model.n_blocks,
                channels: self.model.channels,
                horizon: self.dataset.horizon,
                ssm_state_dim: self.model.ssm_state_dim,
                step_embed_dim: self.model.step_embed_dim,
                parameterization: self.model.parameterization,
            },
            conditioning: ConditioningConfig {
                channels: self.model.channels,
                horizon: self.dataset.horizon,
                n_heads: self.model.n_heads,
                positional_encoding: self.model.positional_encoding,
                backbone_channels: self.model.backbone_channels.clone(),
                use_image: self.model.use_image,
                use_temporal: self.model.use_temporal,
            },
            t_max: self.schedule.t_max,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
            sigma_kind: self.schedule.sigma,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.training.learning_rate,
                weight_decay: self.training.weight_decay,
                ..Default::default()
            },
            normalization: self.dataset.normalization,
            n_samples: self.evaluation.n_samples,
            refiner: RefinerHyper {
                learning_rate: self.training.refiner_learning_rate,
                weight_decay: self.training.refiner_weight_decay,
                epochs: self.training.refiner_epochs,
                seed: self.seed.wrapping_add(17),
            },
            seed: self.seed,
        }
    }
}
