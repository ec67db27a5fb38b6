//! On-disk dataset layout shared by the generator and the training commands:
//! `records.json` with ids, dates, sales, and splits, plus `images/<id>.png`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ProductImage, ProductRecord, ReleaseDate, SalesCurve, Split};
use crate::error::{CoreError, Result};
use crate::num::Scalar;

#[derive(Debug, Serialize, Deserialize)]
struct RecordEntry {
    id: String,
    release: ReleaseDate,
    sales: Vec<f64>,
    horizon_used: usize,
    split: Split,
    image: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordsFile {
    year_range: (i32, i32),
    records: Vec<RecordEntry>,
}

/// Write `dir/records.json` and `dir/images/<id>.png`. Only raw datasets can
/// be persisted; normalization is refitted by whoever loads them.
pub fn save_dataset<F: Scalar>(dataset: &Dataset<F>, dir: &Path) -> Result<()> {
    if dataset.scaler.is_some() {
        return Err(CoreError::Dataset(
            "refusing to persist a normalized dataset; save raw sales".into(),
        ));
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| CoreError::io(images_dir.display().to_string(), e))?;
    let mut records = Vec::with_capacity(dataset.records.len());
    for rec in &dataset.records {
        let image_name = format!("{}.png", rec.id);
        let image_path = images_dir.join(&image_name);
        rec.image
            .to_rgb8()
            .save(&image_path)
            .map_err(|e| CoreError::Dataset(format!("cannot write {}: {e}", image_path.display())))?;
        records.push(RecordEntry {
            id: rec.id.clone(),
            release: rec.release,
            sales: rec.sales.values.iter().map(|&v| v.to_f64()).collect(),
            horizon_used: rec.sales.horizon_used,
            split: rec.split,
            image: image_name,
        });
    }
    let file = RecordsFile {
        year_range: dataset.year_range,
        records,
    };
    let path = dir.join("records.json");
    std::fs::write(&path, serde_json::to_string_pretty(&file)?)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_dataset<F: Scalar>(dir: &Path) -> Result<Dataset<F>> {
    let path = dir.join("records.json");
    let file: RecordsFile = serde_json::from_str(
        &std::fs::read_to_string(&path).map_err(|e| CoreError::io(path.display().to_string(), e))?,
    )?;
    let mut records = Vec::with_capacity(file.records.len());
    for entry in file.records {
        let image_path = dir.join("images").join(&entry.image);
        let rgb = image::open(&image_path)
            .map_err(|e| CoreError::Record {
                id: entry.id.clone(),
                reason: format!("cannot read image {}: {e}", image_path.display()),
            })?
            .to_rgb8();
        let image = ProductImage::from_rgb8(&rgb)?;
        let sales: Vec<F> = entry.sales.iter().map(|&v| F::from_f64(v)).collect();
        records.push(ProductRecord {
            id: entry.id,
            image,
            release: entry.release,
            sales: SalesCurve::new(sales, entry.horizon_used)?,
            split: entry.split,
        });
    }
    let mut dataset = Dataset::from_records(records)?;
    dataset.year_range = file.year_range;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic, SyntheticConfig};

    #[test]
    fn round_trips_ids_dates_sales_and_splits() {
        let cfg = SyntheticConfig {
            n_train: 4,
            n_test: 2,
            image_size: 16,
            ..Default::default()
        };
        let (ds, _) = generate_synthetic::<f64>(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(loaded.records.len(), ds.records.len());
        assert_eq!(loaded.year_range, ds.year_range);
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.release, b.release);
            assert_eq!(a.split, b.split);
            assert_eq!(a.sales.values, b.sales.values);
            assert_eq!(a.image.size, b.image.size);
        }
        // saving the loaded copy reproduces identical pixel bytes
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        let twice = load_dataset::<f64>(dir2.path()).unwrap();
        for (a, b) in loaded.records.iter().zip(&twice.records) {
            assert_eq!(a.image.pixels, b.image.pixels, "image {} unstable", a.id);
        }
    }

    #[test]
    fn normalized_dataset_is_refused() {
        let cfg = SyntheticConfig {
            n_train: 4,
            n_test: 2,
            image_size: 8,
            ..Default::default()
        };
        let (ds, _) = generate_synthetic::<f64>(&cfg, 1).unwrap();
        let ds = ds
            .normalize_sales(crate::data::NormalizationMode::Zscore)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(save_dataset(&ds, dir.path()).is_err());
    }
}
