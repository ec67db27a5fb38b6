//! The N-draw sample sheet for one product, and its on-disk form:
//! a CSV (rows = draws, columns = weeks) plus a JSON sidecar.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::num::Scalar;

/// Diffusion draws for one product, week-major: `draws[(w, n)]` is week `w`
/// of draw `n`, in normalized sales space. Draw columns are ordered by rng
/// substream index; the refinement head is not permutation-invariant, so this
/// ordering is part of the contract.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSheet<F: Scalar> {
    pub draws: Array2<F>,
    pub product_id: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SheetSidecar {
    pub product_id: String,
    pub seed: u64,
    pub schedule_hash: String,
    pub n_draws: usize,
    pub horizon: usize,
}

impl<F: Scalar> SampleSheet<F> {
    pub fn new(draws: Array2<F>, product_id: String, seed: u64) -> Self {
        SampleSheet {
            draws,
            product_id,
            seed,
        }
    }

    pub fn horizon(&self) -> usize {
        self.draws.nrows()
    }

    pub fn n_draws(&self) -> usize {
        self.draws.ncols()
    }

    /// Write `<stem>.csv` (rows = draws, columns = weeks) and `<stem>.json`.
    pub fn save(&self, stem: &Path, schedule_hash: &str) -> Result<()> {
        let csv_path = stem.with_extension("csv");
        let mut wtr = csv::Writer::from_path(&csv_path)
            .map_err(|e| CoreError::Dataset(format!("cannot write {}: {e}", csv_path.display())))?;
        let header: Vec<String> = (0..self.horizon()).map(|w| format!("week_{w}")).collect();
        wtr.write_record(&header)
            .map_err(|e| CoreError::Dataset(e.to_string()))?;
        for n in 0..self.n_draws() {
            let row: Vec<String> = (0..self.horizon())
                .map(|w| format!("{:?}", self.draws[(w, n)].to_f64()))
                .collect();
            wtr.write_record(&row)
                .map_err(|e| CoreError::Dataset(e.to_string()))?;
        }
        wtr.flush()
            .map_err(|e| CoreError::io(csv_path.display().to_string(), e))?;
        let sidecar = SheetSidecar {
            product_id: self.product_id.clone(),
            seed: self.seed,
            schedule_hash: schedule_hash.to_string(),
            n_draws: self.n_draws(),
            horizon: self.horizon(),
        };
        let json_path = stem.with_extension("json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)
            .map_err(|e| CoreError::io(json_path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(Self, SheetSidecar)> {
        let json_path = stem.with_extension("json");
        let sidecar: SheetSidecar = serde_json::from_str(
            &std::fs::read_to_string(&json_path)
                .map_err(|e| CoreError::io(json_path.display().to_string(), e))?,
        )?;
        let csv_path = stem.with_extension("csv");
        let mut rdr = csv::Reader::from_path(&csv_path)
            .map_err(|e| CoreError::Dataset(format!("cannot read {}: {e}", csv_path.display())))?;
        let mut draws = Array2::zeros((sidecar.horizon, sidecar.n_draws));
        for (n, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| CoreError::Dataset(e.to_string()))?;
            for w in 0..sidecar.horizon {
                let v: f64 = row
                    .get(w)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| CoreError::Dataset(format!("bad sheet cell at {n},{w}")))?;
                draws[(w, n)] = F::from_f64(v);
            }
        }
        Ok((
            SampleSheet::new(draws, sidecar.product_id.clone(), sidecar.seed),
            sidecar,
        ))
    }
}

/// Content hash of any serializable value (used for schedules, checkpoints,
/// manifests).
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    let digest = Sha256::digest(&bytes);
    format!("{digest:x}")
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
