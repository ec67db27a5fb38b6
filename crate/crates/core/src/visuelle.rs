//! Loader for datasets in the VISUELLE directory layout.
//!
//! Expected layout under the root:
//!   - `sales.csv` — one row per product: id, release date, 12 weekly sales
//!     columns (names configurable via `column_mapping.json`)
//!   - `test_ids.txt` — one product id per line; everything else is train
//!   - `images/<id>.png` — one square product photo per id (or an explicit
//!     image-path column)
//!
//! The public dump's headers drift between versions, so the column names are
//! read from an optional JSON mapping file at the root.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ProductImage, ProductRecord, ReleaseDate, SalesCurve, Split};
use crate::error::{CoreError, Result};
use crate::num::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub id: String,
    pub release_date: String,
    /// Explicit weekly sales column names, in week order.
    pub sales: Vec<String>,
    /// Optional column holding a path relative to the root; falls back to
    /// `images/<id>.png`.
    pub image_path: Option<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            id: "external_code".into(),
            release_date: "release_date".into(),
            sales: (0..12).map(|w| format!("w{w}")).collect(),
            image_path: Some("image_path".into()),
        }
    }
}

#[derive(Debug)]
pub struct LoadOutcome<F: Scalar> {
    pub dataset: Dataset<F>,
    /// Records dropped during load, with the reason (missing image, bad date...).
    pub rejected: Vec<(String, String)>,
}

/// Parse `YYYY-MM-DD` (also accepts `DD/MM/YYYY`); week is derived from the
/// day of year since the dump carries no explicit week column.
fn parse_release_date(text: &str) -> Result<ReleaseDate> {
    let (year, month, day) = if let Some((y, rest)) = text.split_once('-') {
        let mut it = rest.split('-');
        let m = it.next().unwrap_or("");
        let d = it.next().unwrap_or("");
        (
            y.parse::<i32>().ok(),
            m.parse::<u32>().ok(),
            d.parse::<u32>().ok(),
        )
    } else if text.contains('/') {
        let mut it = text.split('/');
        let d = it.next().unwrap_or("").parse::<u32>().ok();
        let m = it.next().unwrap_or("").parse::<u32>().ok();
        let y = it.next().unwrap_or("").parse::<i32>().ok();
        (y, m, d)
    } else {
        (None, None, None)
    };
    let (Some(year), Some(month), Some(day)) = (year, month, day) else {
        return Err(CoreError::Dataset(format!("malformed date '{text}'")));
    };
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return Err(CoreError::Dataset(format!("malformed date '{text}'")));
    }
    let cumulative = [0u32, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334];
    let doy = cumulative[(month - 1) as usize] + day;
    let week = ((doy - 1) / 7 + 1).min(53);
    ReleaseDate::new(day, week, month, year)
}

fn read_mapping(root: &Path) -> Result<ColumnMapping> {
    let path = root.join("column_mapping.json");
    if path.exists() {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    } else {
        Ok(ColumnMapping::default())
    }
}

fn load_square_image<F: Scalar>(path: &Path, target_size: usize) -> Result<ProductImage<F>> {
    let img = image::open(path)
        .map_err(|e| CoreError::Dataset(format!("cannot read image {}: {e}", path.display())))?;
    let resized = img.resize_exact(
        target_size as u32,
        target_size as u32,
        image::imageops::FilterType::Triangle,
    );
    ProductImage::from_rgb8(&resized.to_rgb8())
}

/// Load a VISUELLE-layout dataset, truncating sales to `horizon` weeks and
/// resizing images to `image_size`.
pub fn load_visuelle<F: Scalar>(
    root: &Path,
    horizon: usize,
    image_size: usize,
) -> Result<LoadOutcome<F>> {
    let mapping = read_mapping(root)?;
    let sales_path = root.join("sales.csv");
    let mut reader = csv::Reader::from_path(&sales_path)
        .map_err(|e| CoreError::Dataset(format!("cannot open {}: {e}", sales_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CoreError::Dataset(e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::Dataset(format!("missing column '{name}' in sales.csv")))
    };
    let id_col = col(&mapping.id)?;
    let date_col = col(&mapping.release_date)?;
    let sales_cols: Vec<usize> = mapping
        .sales
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    if sales_cols.len() < horizon {
        return Err(CoreError::Dataset(format!(
            "mapping has {} sales columns, horizon is {horizon}",
            sales_cols.len()
        )));
    }
    let image_col = mapping
        .image_path
        .as_deref()
        .and_then(|c| headers.iter().position(|h| h == c));

    let split_path = root.join("test_ids.txt");
    let test_ids: HashSet<String> = std::fs::read_to_string(&split_path)
        .map_err(|e| CoreError::io(split_path.display().to_string(), e))?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CoreError::Dataset(e.to_string()))?;
        let id = row.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            rejected.push(("<unknown>".into(), "empty id".into()));
            continue;
        }
        let release = match parse_release_date(row.get(date_col).unwrap_or("")) {
            Ok(d) => d,
            Err(e) => {
                rejected.push((id, e.to_string()));
                continue;
            }
        };
        let image_path: PathBuf = match image_col.and_then(|c| row.get(c)) {
            Some(rel) if !rel.is_empty() => root.join(rel),
            _ => root.join("images").join(format!("{id}.png")),
        };
        if !image_path.exists() {
            rejected.push((id, format!("missing image file {}", image_path.display())));
            continue;
        }
        let image = match load_square_image(&image_path, image_size) {
            Ok(img) => img,
            Err(e) => {
                rejected.push((id, e.to_string()));
                continue;
            }
        };
        let mut sales = Vec::new();
        let mut bad = false;
        for &c in sales_cols.iter().take(horizon) {
            match row.get(c).unwrap_or("").trim().parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => sales.push(F::from_f64(v)),
                _ => {
                    bad = true;
                    break;
                }
            }
        }
        if bad {
            rejected.push((id, "malformed or negative sales value".into()));
            continue;
        }
        let split = if test_ids.contains(&id) {
            Split::Test
        } else {
            Split::Train
        };
        records.push(ProductRecord {
            id,
            image,
            release,
            sales: SalesCurve::new(sales, horizon)?,
            split,
        });
    }

    let dataset = Dataset::from_records(records)?;
    if dataset.train_count() == 0 || dataset.test_count() == 0 {
        return Err(CoreError::Dataset(format!(
            "empty split after load: {} train / {} test",
            dataset.train_count(),
            dataset.test_count()
        )));
    }
    Ok(LoadOutcome { dataset, rejected })
}
