//! Minimal chart rendering for report artifacts. Accuracies live in [0,1],
//! so both chart types fix that y-range and draw straight into an RGB
//! buffer written out as PNG.

use std::path::Path;

use genmark_core::{Image32, Result};
use ndarray::Array3;

// The pipeline image type is square, so charts are too.
const W: usize = 256;
const H: usize = 256;
const MARGIN: usize = 30;
const BG: [f32; 3] = [1.0, 1.0, 1.0];
const AXIS: [f32; 3] = [0.2, 0.2, 0.2];
const BAR: [f32; 3] = [0.25, 0.45, 0.8];
const LINE: [f32; 3] = [0.8, 0.3, 0.25];

struct Canvas {
    px: Array3<f32>,
}

impl Canvas {
    fn new() -> Self {
        let mut px = Array3::zeros((H, W, 3));
        for c in 0..3 {
            px.index_axis_mut(ndarray::Axis(2), c).fill(BG[c]);
        }
        Self { px }
    }

    fn set(&mut self, x: usize, y: usize, color: [f32; 3]) {
        if x < W && y < H {
            for c in 0..3 {
                self.px[[y, x, c]] = color[c];
            }
        }
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [f32; 3]) {
        for y in y0..=y1.min(H - 1) {
            for x in x0..=x1.min(W - 1) {
                self.set(x, y, color);
            }
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [f32; 3]) {
        // Bresenham; inputs are plot coordinates, may land off-canvas.
        let (dx, sx) = ((x1 - x0).abs(), if x0 < x1 { 1 } else { -1 });
        let (dy, sy) = (-(y1 - y0).abs(), if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 {
                self.set(x as usize, y as usize, color);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn axes(&mut self) {
        let bottom = H - MARGIN;
        self.line(MARGIN as i64, (MARGIN / 2) as i64, MARGIN as i64, bottom as i64, AXIS);
        self.line(MARGIN as i64, bottom as i64, (W - MARGIN / 2) as i64, bottom as i64, AXIS);
        // Gridlines at y = 0.5 and 1.0.
        for frac in [0.5, 1.0] {
            let y = y_for(frac);
            for x in (MARGIN..W - MARGIN / 2).step_by(4) {
                self.set(x, y, [0.8, 0.8, 0.8]);
            }
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Image32::new(self.px.clone())?.write_png(path)
    }
}

/// Canvas row for a value in [0,1]; values are clamped.
fn y_for(v: f64) -> usize {
    let v = v.clamp(0.0, 1.0);
    let span = (H - MARGIN) - MARGIN / 2;
    H - MARGIN - (v * span as f64).round() as usize
}

/// Bar chart of values in [0,1], one bar per label.
pub fn bar_chart(values: &[f64], path: &Path) -> Result<()> {
    let mut canvas = Canvas::new();
    canvas.axes();
    if !values.is_empty() {
        let plot_w = W - MARGIN - MARGIN / 2;
        let slot = plot_w / values.len();
        let bar_w = (slot * 3 / 5).max(2);
        for (i, &v) in values.iter().enumerate() {
            let x0 = MARGIN + i * slot + (slot - bar_w) / 2;
            let y = y_for(v);
            let bottom = H - MARGIN;
            if y < bottom {
                canvas.fill_rect(x0, y, x0 + bar_w - 1, bottom - 1, BAR);
            }
        }
    }
    canvas.write(path)
}

/// Line chart of (x, y) points with y in [0,1]; x is scaled to its range.
pub fn line_chart(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut canvas = Canvas::new();
    canvas.axes();
    if !points.is_empty() {
        let (xmin, xmax) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let span = if (xmax - xmin).abs() < 1e-12 { 1.0 } else { xmax - xmin };
        let plot_w = (W - MARGIN - MARGIN / 2) as f64;
        let xpix = |x: f64| MARGIN + ((x - xmin) / span * (plot_w - 1.0)).round() as usize;
        let mut prev: Option<(usize, usize)> = None;
        for &(x, y) in points {
            let (px, py) = (xpix(x), y_for(y));
            if let Some((qx, qy)) = prev {
                canvas.line(qx as i64, qy as i64, px as i64, py as i64, LINE);
            }
            // Small filled marker at the point itself.
            canvas.fill_rect(px.saturating_sub(2), py.saturating_sub(2), px + 2, py + 2, LINE);
            prev = Some((px, py));
        }
    }
    canvas.write(path)
}
