//! Minimal PNG chart for one product: the q10-q90 band of the draw sheet,
//! the median draw, the refined forecast, and (when known) the ground truth.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CoreError, Result};
use crate::eval::ProductReport;

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 30;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const BAND: Rgb<u8> = Rgb([205, 225, 250]);
const GRID: Rgb<u8> = Rgb([230, 230, 230]);
const MEDIAN: Rgb<u8> = Rgb([60, 120, 210]);
const TRUTH: Rgb<u8> = Rgb([30, 30, 30]);
const REFINED: Rgb<u8> = Rgb([210, 80, 60]);

struct Frame {
    y_min: f64,
    y_max: f64,
    n_weeks: usize,
}

impl Frame {
    fn x(&self, week: usize) -> f64 {
        let span = (WIDTH - 2 * MARGIN) as f64;
        MARGIN as f64 + span * week as f64 / (self.n_weeks - 1).max(1) as f64
    }

    fn y(&self, v: f64) -> f64 {
        let span = (HEIGHT - 2 * MARGIN) as f64;
        let frac = if self.y_max > self.y_min {
            (v - self.y_min) / (self.y_max - self.y_min)
        } else {
            0.5
        };
        (HEIGHT - MARGIN) as f64 - span * frac
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round() as i64;
        let y = (y0 + (y1 - y0) * t).round() as i64;
        for (dx, dy) in [(0, 0), (0, 1), (1, 0)] {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

fn polyline(img: &mut RgbImage, frame: &Frame, values: &[f64], color: Rgb<u8>) {
    for w in 1..values.len() {
        draw_line(
            img,
            frame.x(w - 1),
            frame.y(values[w - 1]),
            frame.x(w),
            frame.y(values[w]),
            color,
        );
    }
}

/// Render the product's forecast chart to `path`.
pub fn render_product_plot(report: &ProductReport, path: &Path) -> Result<()> {
    let n_weeks = report.quantiles.len();
    if n_weeks == 0 {
        return Err(CoreError::InvalidConfig("empty quantile band".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for qs in &report.quantiles {
        lo = lo.min(qs[0]);
        hi = hi.max(qs[4]);
    }
    for series in [&report.truth, &report.refined] {
        for &v in series.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(CoreError::NonFinite {
            context: format!("plot data for {}", report.id),
        });
    }
    let pad = 0.05 * (hi - lo).max(1.0);
    let frame = Frame {
        y_min: lo - pad,
        y_max: hi + pad,
        n_weeks,
    };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);

    // week gridlines
    for w in 0..n_weeks {
        let x = frame.x(w).round() as u32;
        for y in MARGIN..(HEIGHT - MARGIN) {
            img.put_pixel(x, y, GRID);
        }
    }

    // q10-q90 band, filled column by column
    for px in MARGIN..(WIDTH - MARGIN) {
        let fx = px as f64;
        // invert frame.x to a fractional week
        let span = (WIDTH - 2 * MARGIN) as f64;
        let pos = (fx - MARGIN as f64) / span * (n_weeks - 1).max(1) as f64;
        let w0 = (pos.floor() as usize).min(n_weeks - 1);
        let w1 = (w0 + 1).min(n_weeks - 1);
        let t = pos - w0 as f64;
        let lo_v = report.quantiles[w0][0] * (1.0 - t) + report.quantiles[w1][0] * t;
        let hi_v = report.quantiles[w0][4] * (1.0 - t) + report.quantiles[w1][4] * t;
        let y_top = frame.y(hi_v).round() as u32;
        let y_bot = frame.y(lo_v).round() as u32;
        for py in y_top..=y_bot.min(HEIGHT - 1) {
            img.put_pixel(px, py, BAND);
        }
    }

    let median: Vec<f64> = report.quantiles.iter().map(|q| q[2]).collect();
    polyline(&mut img, &frame, &median, MEDIAN);
    polyline(&mut img, &frame, &report.truth, TRUTH);
    polyline(&mut img, &frame, &report.refined, REFINED);

    img.save(path)
        .map_err(|e| CoreError::Dataset(format!("cannot write plot {}: {e}", path.display())))?;
    Ok(())
}
