//! Minimal line-plot rasterizer for sweep curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::calibration::calvgg::{read_sweep_csv, SweepRow};
use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: i64 = 40;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

/// What was drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSummary {
    /// Method names in drawing order, with their RGB colors.
    pub series: Vec<(String, [u8; 3])>,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

/// Group rows by method (first-appearance order), sorted by boundary.
pub fn series(rows: &[SweepRow]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let pt = (r.far_boundary_deg, r.detection_rate);
        match out.iter_mut().find(|(m, _)| *m == r.method) {
            Some((_, pts)) => pts.push(pt),
            None => out.push((r.method.clone(), vec![pt])),
        }
    }
    for (_, pts) in &mut out {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn extent(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if hi - lo < 1e-12 {
        (lo - 0.05, hi + 0.05)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>, thick: i64) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
        for dy in -(thick / 2)..=(thick / 2) {
            for dx in -(thick / 2)..=(thick / 2) {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, c);
                }
            }
        }
    }
}

/// Render rows: one colored polyline per method, boundary on x, detection
/// rate on y, with axes and unit ticks on x.
pub fn render(rows: &[SweepRow]) -> Result<(RgbImage, PlotSummary)> {
    if rows.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let groups = series(rows);
    let x_range = extent(rows.iter().map(|r| r.far_boundary_deg));
    let y_range = extent(rows.iter().map(|r| r.detection_rate));
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (l, r, t, b) = (MARGIN as f64, (WIDTH as i64 - MARGIN / 2) as f64, (MARGIN / 2) as f64, (HEIGHT as i64 - MARGIN) as f64);
    let sx = |x: f64| l + (x - x_range.0) / (x_range.1 - x_range.0) * (r - l);
    let sy = |y: f64| b - (y - y_range.0) / (y_range.1 - y_range.0) * (b - t);
    let black = Rgb([0, 0, 0]);
    line(&mut img, (l, b), (r, b), black, 1);
    line(&mut img, (l, b), (l, t), black, 1);
    let mut tick = x_range.0.ceil();
    while tick <= x_range.1 {
        line(&mut img, (sx(tick), b), (sx(tick), b + 5.0), black, 1);
        tick += 1.0;
    }
    let mut summary = PlotSummary {
        series: Vec::new(),
        x_range,
        y_range,
    };
    for (i, (name, pts)) in groups.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for w in pts.windows(2) {
            line(&mut img, (sx(w[0].0), sy(w[0].1)), (sx(w[1].0), sy(w[1].1)), Rgb(c), 2);
        }
        for p in pts {
            line(&mut img, (sx(p.0) - 2.0, sy(p.1)), (sx(p.0) + 2.0, sy(p.1)), Rgb(c), 3);
        }
        summary.series.push((name.clone(), c));
    }
    Ok((img, summary))
}

/// Read a sweep CSV and write its plot as PNG.
pub fn plot_curves(csv_in: &Path, png_out: &Path) -> Result<PlotSummary> {
    let rows = read_sweep_csv(csv_in)?;
    let (img, summary) = render(&rows)?;
    if let Some(dir) = png_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(png_out)
        .map_err(|e| Error::format(png_out.display().to_string(), e.to_string()))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calvgg::write_sweep_csv;

    fn rows() -> Vec<SweepRow> {
        let mut v = Vec::new();
        for m in ["a", "b"] {
            for bnd in 9..=22 {
                v.push(SweepRow {
                    method: m.into(),
                    far_boundary_deg: bnd as f64,
                    detection_rate: if m == "a" { 0.5 + bnd as f64 / 100.0 } else { 0.9 - bnd as f64 / 100.0 },
                    n_images: 1,
                });
            }
        }
        v
    }

    #[test]
    fn two_polylines_covering_data() {
        let (img, s) = render(&rows()).unwrap();
        assert_eq!(s.series.len(), 2);
        assert!(s.x_range.0 <= 9.0 && s.x_range.1 >= 22.0);
        assert!(s.y_range.0 <= 0.59 && s.y_range.1 >= 0.81);
        for (_, c) in &s.series {
            assert!(img.pixels().any(|p| p.0 == *c));
        }
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "method,far_boundary_deg,detection_rate,n_images\n").unwrap();
        assert!(plot_curves(&empty, &dir.path().join("x.png")).is_err());
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "method,far_boundary_deg,detection_rate,n_images\na,9,0.5,1\na,ten,0.5,1\n").unwrap();
        let e = plot_curves(&bad, &dir.path().join("x.png")).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let good = dir.path().join("good.csv");
        write_sweep_csv(&good, &rows()).unwrap();
        plot_curves(&good, &dir.path().join("plots/good.png")).unwrap();
        assert!(dir.path().join("plots/good.png").exists());
    }
}
