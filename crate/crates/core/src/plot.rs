//! Minimal raster line plots written as PNG.
//!
//! There is no text rendering; axis ranges go in the accompanying CSV.

use std::path::Path;

use crate::imagecore::Image;
use crate::{Error, Result};

const COLORS: [[f64; 3]; 4] = [[0.12, 0.35, 0.75], [0.85, 0.3, 0.1], [0.15, 0.6, 0.25], [0.55, 0.2, 0.6]];

/// Draws each series as a polyline with point markers on a white canvas.
/// Series share one set of axes scaled to the data range.
pub fn line_plot(series: &[Vec<(f64, f64)>], width: usize, height: usize) -> Result<Image> {
    let points: Vec<(f64, f64)> = series.iter().flatten().copied().collect();
    if points.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidArgument("plot data must be finite".into()));
    }
    if width < 32 || height < 32 {
        return Err(Error::InvalidArgument("plot must be at least 32x32".into()));
    }
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = span(&mut points.iter().map(|p| p.0));
    let (y0, y1) = span(&mut points.iter().map(|p| p.1));
    let margin = 12.0;
    let (w, h) = (width as f64, height as f64);
    let to_px = |(x, y): (f64, f64)| {
        let px = margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
        let py = h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);
        (px.round() as i64, py.round() as i64)
    };

    let mut img = Image::new(height, width, 3, vec![1.0; width * height * 3])?;
    let put = |img: &mut Image, x: i64, y: i64, c: [f64; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            for (ch, v) in c.iter().enumerate() {
                img.set(y as usize, x as usize, ch, *v);
            }
        }
    };
    let axis = [0.2, 0.2, 0.2];
    let (ox, oy) = (margin as i64 - 2, (h - margin) as i64 + 2);
    for x in ox..width as i64 - 4 {
        put(&mut img, x, oy, axis);
    }
    for y in 4..=oy {
        put(&mut img, ox, y, axis);
    }
    for (s, pts) in series.iter().enumerate() {
        let c = COLORS[s % COLORS.len()];
        let px: Vec<(i64, i64)> = pts.iter().map(|&p| to_px(p)).collect();
        for pair in px.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
            for t in 0..=steps {
                let x = a.0 + (b.0 - a.0) * t / steps;
                let y = a.1 + (b.1 - a.1) * t / steps;
                put(&mut img, x, y, c);
            }
        }
        for &(x, y) in &px {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, x + dx, y + dy, c);
                }
            }
        }
    }
    Ok(img)
}

pub fn save_line_plot(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    line_plot(series, 320, 240)?.save(path)
}
