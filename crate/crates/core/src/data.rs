//! Product data model and sales normalization.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::num::Scalar;

pub const DEFAULT_HORIZON: usize = 6;

/// Calendar release date, kept as the four raw components the temporal
/// encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseDate {
    pub day: u32,
    pub week: u32,
    pub month: u32,
    pub year: i32,
}

impl ReleaseDate {
    pub fn new(day: u32, week: u32, month: u32, year: i32) -> Result<Self> {
        if !(1..=31).contains(&day) {
            return Err(CoreError::InvalidConfig(format!("day {day} out of 1..=31")));
        }
        if !(1..=53).contains(&week) {
            return Err(CoreError::InvalidConfig(format!("week {week} out of 1..=53")));
        }
        if !(1..=12).contains(&month) {
            return Err(CoreError::InvalidConfig(format!(
                "month {month} out of 1..=12"
            )));
        }
        Ok(ReleaseDate {
            day,
            week,
            month,
            year,
        })
    }

    /// Four components scaled to [0,1] by their natural maxima; the year is
    /// scaled over `[year_min, year_max]`.
    pub fn encode<F: Scalar>(&self, year_min: i32, year_max: i32) -> [F; 4] {
        let span = (year_max - year_min).max(1) as f64;
        [
            F::from_f64(self.day as f64 / 31.0),
            F::from_f64(self.week as f64 / 53.0),
            F::from_f64(self.month as f64 / 12.0),
            F::from_f64(((self.year - year_min) as f64 / span).clamp(0.0, 1.0)),
        ]
    }
}

/// RGB image in planar layout `(3, height*width)`, values in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ProductImage<F: Scalar> {
    pub pixels: Array2<F>,
    pub size: usize,
}

impl<F: Scalar> ProductImage<F> {
    pub fn new(pixels: Array2<F>, size: usize) -> Result<Self> {
        if pixels.nrows() != 3 || pixels.ncols() != size * size {
            return Err(CoreError::ShapeMismatch {
                context: "ProductImage".into(),
                expected: format!("(3, {})", size * size),
                got: format!("({}, {})", pixels.nrows(), pixels.ncols()),
            });
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "ProductImage pixels".into(),
            });
        }
        Ok(ProductImage { pixels, size })
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Result<Self> {
        let (w, h) = rgb.dimensions();
        if w != h {
            return Err(CoreError::InvalidConfig(format!(
                "image must be square, got {w}x{h}"
            )));
        }
        let size = w as usize;
        let mut pixels = Array2::zeros((3, size * size));
        for (x, y, p) in rgb.enumerate_pixels() {
            let idx = y as usize * size + x as usize;
            for c in 0..3 {
                pixels[(c, idx)] = F::from_f64(p.0[c] as f64 / 255.0);
            }
        }
        ProductImage::new(pixels, size)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let size = self.size as u32;
        image::RgbImage::from_fn(size, size, |x, y| {
            let idx = y as usize * self.size + x as usize;
            let px = |c: usize| (self.pixels[(c, idx)].to_f64().clamp(0.0, 1.0) * 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Weekly unit sales; raw values are non-negative, the model sees the first
/// `horizon_used` weeks (possibly normalized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SalesCurve<F: Scalar> {
    pub values: Vec<F>,
    pub horizon_used: usize,
}

impl<F: Scalar> SalesCurve<F> {
    pub fn new(values: Vec<F>, horizon_used: usize) -> Result<Self> {
        if values.len() < horizon_used {
            return Err(CoreError::InvalidConfig(format!(
                "sales length {} shorter than horizon {}",
                values.len(),
                horizon_used
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "SalesCurve".into(),
            });
        }
        Ok(SalesCurve {
            values,
            horizon_used,
        })
    }

    pub fn horizon(&self) -> &[F] {
        &self.values[..self.horizon_used]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ProductRecord<F: Scalar> {
    pub id: String,
    pub image: ProductImage<F>,
    pub release: ReleaseDate,
    pub sales: SalesCurve<F>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    Zscore,
    Minmax,
}

/// Invertible sales scaler fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NormalizationState<F: Scalar> {
    pub mode: NormalizationMode,
    /// (mean, std) for zscore; (min, max) for minmax.
    pub stats: (F, F),
}

impl<F: Scalar> NormalizationState<F> {
    pub fn fit(mode: NormalizationMode, train_values: &[F]) -> Result<Self> {
        if train_values.is_empty() {
            return Err(CoreError::Dataset("cannot fit scaler on empty train sales".into()));
        }
        let n = F::from_f64((train_values.len()) as f64);
        match mode {
            NormalizationMode::Zscore => {
                let mean = train_values.iter().copied().sum::<F>() / n;
                let var = train_values
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<F>()
                    / n;
                let std = var.sqrt();
                if std <= F::zero() {
                    return Err(CoreError::Dataset(
                        "constant train sales under zscore; use minmax normalization".into(),
                    ));
                }
                Ok(NormalizationState {
                    mode,
                    stats: (mean, std),
                })
            }
            NormalizationMode::Minmax => {
                let min = train_values.iter().copied().fold(F::infinity(), F::min);
                let max = train_values
                    .iter()
                    .copied()
                    .fold(F::neg_infinity(), F::max);
                Ok(NormalizationState {
                    mode,
                    stats: (min, max),
                })
            }
        }
    }

    pub fn normalize_value(&self, v: F) -> F {
        let (a, b) = self.stats;
        match self.mode {
            NormalizationMode::Zscore => (v - a) / b,
            NormalizationMode::Minmax => {
                if b > a {
                    (v - a) / (b - a)
                } else {
                    // degenerate range: everything maps to 0
                    F::zero()
                }
            }
        }
    }

    pub fn denormalize_value(&self, v: F) -> F {
        let (a, b) = self.stats;
        match self.mode {
            NormalizationMode::Zscore => v * b + a,
            NormalizationMode::Minmax => {
                if b > a {
                    v * (b - a) + a
                } else {
                    a
                }
            }
        }
    }

    pub fn normalize(&self, values: &[F]) -> Vec<F> {
        values.iter().map(|&v| self.normalize_value(v)).collect()
    }

    pub fn denormalize(&self, values: &[F]) -> Vec<F> {
        values.iter().map(|&v| self.denormalize_value(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Dataset<F: Scalar> {
    pub records: Vec<ProductRecord<F>>,
    pub scaler: Option<NormalizationState<F>>,
    /// Year range used for release-date encoding, derived at load time.
    pub year_range: (i32, i32),
}

impl<F: Scalar> Dataset<F> {
    pub fn from_records(records: Vec<ProductRecord<F>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CoreError::Dataset(format!("duplicate record id {}", r.id)));
            }
        }
        let years: Vec<i32> = records.iter().map(|r| r.release.year).collect();
        let year_range = match (years.iter().min(), years.iter().max()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => (2016, 2020),
        };
        Ok(Dataset {
            records,
            scaler: None,
            year_range,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ProductRecord<F>> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn train_count(&self) -> usize {
        self.split(Split::Train).count()
    }

    pub fn test_count(&self) -> usize {
        self.split(Split::Test).count()
    }

    /// Fit the scaler on the train split and map every curve into model
    /// space. Fails if the scaler was already fitted.
    pub fn normalize_sales(mut self, mode: NormalizationMode) -> Result<Self> {
        if self.scaler.is_some() {
            return Err(CoreError::Dataset("scaler already fitted".into()));
        }
        let train_values: Vec<F> = self
            .split(Split::Train)
            .flat_map(|r| r.sales.values.iter().copied())
            .collect();
        let scaler = NormalizationState::fit(mode, &train_values)?;
        for r in &mut self.records {
            r.sales.values = scaler.normalize(&r.sales.values);
        }
        self.scaler = Some(scaler);
        Ok(self)
    }

    /// Raw-unit sales for a record, inverting the scaler when present.
    pub fn raw_sales(&self, record: &ProductRecord<F>) -> Vec<F> {
        match &self.scaler {
            Some(s) => s.denormalize(record.sales.horizon()),
            None => record.sales.horizon().to_vec(),
        }
    }
}
