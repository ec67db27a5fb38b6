//! End-to-end orchestration: diffusion training, per-product sampling,
//! refinement training bound to the frozen diffusion checkpoint by hash, and
//! evaluation with report rendering.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::conditioning::conditioning_embedding;
use crate::data::{Dataset, NormalizationState, ProductRecord, Split};
use crate::denoiser::StoreDenoiser;
use crate::error::{CoreError, Result};
use crate::eval::{aggregate, product_report, AggregateMetrics, ForecastReport, ProductReport, ReportMetadata};
use crate::graph::{Graph, ParamStore};
use crate::num::Scalar;
use crate::plot::render_product_plot;
use crate::refine::{refine, set_mean_aggregator, train_refiner, RefinerConfig, RefinerHyper};
use crate::schedule::{sample, GuidanceSpec, NoiseSchedule};
use crate::sheet::{content_hash, SampleSheet};
use crate::train::{
    run_diffusion_epochs, TrainConfig, TrainState, CONDITIONING_PREFIX, DENOISER_PREFIX,
};

pub const REFINER_PREFIX: &str = "ref";
pub const DIFFUSION_CKPT: &str = "diffusion.ckpt.json";
pub const REFINER_CKPT: &str = "refiner.ckpt.json";
pub const STATE_FILE: &str = "train_state.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-product sampling seed: the run seed mixed with a stable hash of the
/// product id, so sheets do not depend on dataset ordering.
pub fn product_seed(seed: u64, product_id: &str) -> u64 {
    let digest = Sha256::digest(product_id.as_bytes());
    let mut id_bits = [0u8; 8];
    id_bits.copy_from_slice(&digest[..8]);
    let mut z = seed ^ u64::from_le_bytes(id_bits);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Compute one product's conditioning embedding `(C, 1)` as a plain tensor.
pub fn embed_conditioning<F: Scalar>(
    record: &ProductRecord<F>,
    params: &ParamStore<F>,
    config: &TrainConfig,
    year_range: (i32, i32),
) -> Result<Array2<F>> {
    let mut g = Graph::new();
    let node = conditioning_embedding(
        &mut g,
        params,
        CONDITIONING_PREFIX,
        &config.conditioning,
        &record.image,
        &record.release,
        year_range,
    )?;
    Ok(g.value(node).clone())
}

/// Draw the N-sample sheet for one product under the frozen diffusion model.
pub fn sample_product<F: Scalar>(
    record: &ProductRecord<F>,
    params: &ParamStore<F>,
    config: &TrainConfig,
    schedule: &NoiseSchedule<F>,
    year_range: (i32, i32),
    seed: u64,
) -> Result<SampleSheet<F>> {
    let cond = embed_conditioning(record, params, config, year_range)?;
    let denoiser = StoreDenoiser {
        config: &config.denoiser,
        store: params,
        prefix: DENOISER_PREFIX,
        schedule,
    };
    sample(
        &denoiser,
        &cond,
        config.n_samples,
        schedule,
        &GuidanceSpec::default(),
        product_seed(seed, &record.id),
        &record.id,
    )
}

/// Metadata stored inside the refiner checkpoint: its own shape and training
/// hyperparameters plus the hash of the diffusion checkpoint whose draws it
/// was fitted on. Evaluation refuses to pair it with any other diffusion
/// checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinerMeta {
    pub config: RefinerConfig,
    pub hyper: RefinerHyper,
    pub diffusion_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RunManifest<F: Scalar> {
    pub config: TrainConfig,
    pub schedule_hash: String,
    pub scaler: NormalizationState<F>,
    pub year_range: (i32, i32),
    pub diffusion_checkpoint: String,
    pub diffusion_hash: String,
    pub refiner_checkpoint: String,
    pub refiner_hash: String,
}

#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub out_dir: PathBuf,
    pub diffusion_hash: String,
    pub refiner_hash: String,
    pub final_diffusion_loss: f64,
    pub refiner_loss_history: Vec<f64>,
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Train both stages on `dataset` (raw sales; normalization is fitted here on
/// the train split) and write checkpoints, training state, per-product train
/// sheets, and the run manifest into `out_dir`. If a training state file
/// already exists in `out_dir` the diffusion stage resumes from it.
pub fn train_pipeline<F: Scalar>(
    dataset: Dataset<F>,
    config: &TrainConfig,
    out_dir: &Path,
    save_every: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<PipelineArtifacts> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let dataset = dataset.normalize_sales(config.normalization)?;
    let schedule = config.schedule::<F>()?;
    let schedule_hash = content_hash(&schedule);

    let state_path = out_dir.join(STATE_FILE);
    let mut state = if state_path.exists() {
        TrainState::<F>::load(&state_path)?
    } else {
        TrainState::<F>::new(config)?
    };
    let mut final_loss;
    loop {
        let target = if save_every > 0 {
            (state.epoch + save_every).min(config.epochs)
        } else {
            config.epochs
        };
        final_loss = run_diffusion_epochs(&dataset, config, &mut state, target, &mut on_epoch)?;
        state.save(&state_path)?;
        if state.epoch >= config.epochs {
            break;
        }
    }

    let diffusion_path = out_dir.join(DIFFUSION_CKPT);
    let diffusion_ckpt = Checkpoint::new("diffusion", config, state.params.clone())?;
    let diffusion_hash = diffusion_ckpt.save(&diffusion_path)?;

    // stage 2: sample every train product under the frozen model
    let sheets_dir = out_dir.join("sheets").join("train");
    ensure_dir(&sheets_dir)?;
    let mut pairs: Vec<(SampleSheet<F>, Vec<F>)> = Vec::new();
    for rec in dataset.split(Split::Train) {
        let sheet = sample_product(
            rec,
            &state.params,
            config,
            &schedule,
            dataset.year_range,
            config.seed,
        )?;
        sheet.save(&sheets_dir.join(&rec.id), &schedule_hash)?;
        pairs.push((sheet, rec.sales.horizon().to_vec()));
    }

    let refiner_config = RefinerConfig::with_dims(config.denoiser.horizon, config.n_samples);
    let mut refiner_store = ParamStore::<F>::new();
    set_mean_aggregator(&refiner_config, &mut refiner_store, REFINER_PREFIX);
    let refiner_losses = train_refiner(
        &pairs,
        &refiner_config,
        &config.refiner,
        &mut refiner_store,
        REFINER_PREFIX,
    )?;

    let refiner_meta = RefinerMeta {
        config: refiner_config,
        hyper: config.refiner.clone(),
        diffusion_hash: diffusion_hash.clone(),
    };
    let refiner_path = out_dir.join(REFINER_CKPT);
    let refiner_ckpt = Checkpoint::new("refiner", &refiner_meta, refiner_store)?;
    let refiner_hash = refiner_ckpt.save(&refiner_path)?;

    let manifest = RunManifest::<F> {
        config: config.clone(),
        schedule_hash,
        scaler: dataset
            .scaler
            .clone()
            .expect("scaler fitted by normalize_sales"),
        year_range: dataset.year_range,
        diffusion_checkpoint: DIFFUSION_CKPT.to_string(),
        diffusion_hash: diffusion_hash.clone(),
        refiner_checkpoint: REFINER_CKPT.to_string(),
        refiner_hash: refiner_hash.clone(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?;

    Ok(PipelineArtifacts {
        out_dir: out_dir.to_path_buf(),
        diffusion_hash,
        refiner_hash,
        final_diffusion_loss: final_loss,
        refiner_loss_history: refiner_losses,
    })
}

/// Everything loaded back from a finished run directory, hash-verified.
#[derive(Debug)]
pub struct LoadedRun<F: Scalar> {
    pub manifest: RunManifest<F>,
    pub diffusion_params: ParamStore<F>,
    pub refiner_params: ParamStore<F>,
    pub refiner_meta: RefinerMeta,
}

pub fn load_run<F: Scalar>(out_dir: &Path) -> Result<LoadedRun<F>> {
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let manifest: RunManifest<F> = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path)
            .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?,
    )?;
    let (diffusion_ckpt, diffusion_hash) =
        Checkpoint::<F>::load(&out_dir.join(&manifest.diffusion_checkpoint))?;
    if diffusion_hash != manifest.diffusion_hash {
        return Err(CoreError::HashMismatch {
            expected: manifest.diffusion_hash,
            got: diffusion_hash,
        });
    }
    let (refiner_ckpt, refiner_hash) =
        Checkpoint::<F>::load(&out_dir.join(&manifest.refiner_checkpoint))?;
    if refiner_hash != manifest.refiner_hash {
        return Err(CoreError::HashMismatch {
            expected: manifest.refiner_hash,
            got: refiner_hash,
        });
    }
    let refiner_meta: RefinerMeta = refiner_ckpt.config_as()?;
    if refiner_meta.diffusion_hash != diffusion_hash {
        return Err(CoreError::HashMismatch {
            expected: refiner_meta.diffusion_hash,
            got: diffusion_hash,
        });
    }
    Ok(LoadedRun {
        manifest,
        diffusion_params: diffusion_ckpt.params,
        refiner_params: refiner_ckpt.params,
        refiner_meta,
    })
}

/// Evaluate one split of `dataset` (raw sales) under a finished run. Products
/// whose sampling or refinement fails are skipped with a recorded reason
/// rather than aborting the whole evaluation; their sheets and plots are
/// simply absent. Sheets for evaluated products are written under
/// `out_dir/sheets/<split>/`.
pub fn evaluate_split<F: Scalar>(
    dataset: &Dataset<F>,
    run: &LoadedRun<F>,
    split: Split,
    out_dir: &Path,
) -> Result<ForecastReport> {
    let config = &run.manifest.config;
    let schedule = config.schedule::<F>()?;
    let scaler = &run.manifest.scaler;
    let split_name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let sheets_dir = out_dir.join("sheets").join(split_name);
    ensure_dir(&sheets_dir)?;

    let mut products: Vec<ProductReport> = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    for rec in dataset.split(split) {
        let step = || -> Result<ProductReport> {
            let sheet = sample_product(
                rec,
                &run.diffusion_params,
                config,
                &schedule,
                run.manifest.year_range,
                config.seed,
            )?;
            sheet.save(&sheets_dir.join(&rec.id), &run.manifest.schedule_hash)?;
            let refined_norm = refine(
                &sheet,
                &run.refiner_params,
                REFINER_PREFIX,
                &run.refiner_meta.config,
            )?;
            let refined_raw = scaler.denormalize(&refined_norm);
            let sheet_raw = sheet.draws.mapv(|v| scaler.denormalize_value(v));
            product_report(&rec.id, rec.sales.horizon(), &refined_raw, &sheet_raw)
        };
        match step() {
            Ok(p) => products.push(p),
            Err(e) => skipped.push(format!("{}: {e}", rec.id)),
        }
    }
    let aggregate_metrics: AggregateMetrics = aggregate(&products)?;
    Ok(ForecastReport {
        products,
        aggregate: aggregate_metrics,
        metadata: ReportMetadata {
            diffusion_hash: run.manifest.diffusion_hash.clone(),
            refiner_hash: run.manifest.refiner_hash.clone(),
            n_samples: config.n_samples,
            config: serde_json::to_value(config)?,
            caveat: "metrics computed on the held-out split, which also served as the only \
                     monitoring set during development; no separate validation split exists"
                .to_string(),
            skipped_products: skipped,
        },
    })
}

/// Write `report.json`, `summary.md`, and per-product plots under `dir`. An
/// empty report still produces the JSON and summary, just with no product
/// rows or plots.
pub fn render_report(report: &ForecastReport, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)
        .map_err(|e| CoreError::io(json_path.display().to_string(), e))?;

    let mut md = String::new();
    md.push_str("# Forecast report\n\n");
    md.push_str(&format!(
        "- products evaluated: {}\n- draws per product: {}\n- diffusion checkpoint: `{}`\n- refiner checkpoint: `{}`\n\n",
        report.products.len(),
        report.metadata.n_samples,
        report.metadata.diffusion_hash,
        report.metadata.refiner_hash,
    ));
    md.push_str("## Aggregate metrics\n\n");
    md.push_str("| metric | value |\n|---|---|\n");
    md.push_str(&format!("| WAPE (pooled) | {:.4} |\n", report.aggregate.wape));
    md.push_str(&format!(
        "| WAPE (pooled, clamped) | {:.4} |\n",
        report.aggregate.wape_clamped
    ));
    md.push_str(&format!(
        "| WAPE (mean of products) | {:.4} |\n",
        report.aggregate.wape_mean_of_products
    ));
    md.push_str(&format!("| MAE | {:.4} |\n", report.aggregate.mae));
    md.push_str(&format!(
        "| MAE (clamped) | {:.4} |\n\n",
        report.aggregate.mae_clamped
    ));
    md.push_str(&format!("> {}\n\n", report.metadata.caveat));
    if !report.metadata.skipped_products.is_empty() {
        md.push_str("## Skipped products\n\n");
        for s in &report.metadata.skipped_products {
            md.push_str(&format!("- {s}\n"));
        }
        md.push('\n');
    }
    if !report.products.is_empty() {
        md.push_str("## Per-product\n\n| id | MAE | abs err sum | truth sum |\n|---|---|---|---|\n");
        for p in &report.products {
            md.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} |\n",
                p.id, p.mae, p.abs_err_sum, p.truth_sum
            ));
        }
        let plots_dir = dir.join("plots");
        ensure_dir(&plots_dir)?;
        for p in &report.products {
            render_product_plot(p, &plots_dir.join(format!("{}.png", p.id)))?;
        }
    }
    let md_path = dir.join("summary.md");
    std::fs::write(&md_path, md).map_err(|e| CoreError::io(md_path.display().to_string(), e))?;
    Ok(())
}
