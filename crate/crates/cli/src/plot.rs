//! Static PNG figures: a training loss curve and axial slice grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use lungseg_core::{CtVolume, Error, HuWindow, LabelVolume, PathologyLabel, Result};

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            rgb: fill.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        // Bresenham.
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    /// Writes an 8-bit RGB PNG with a `Comment` text chunk.
    pub fn save(&self, path: &Path, comment: &str) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
        enc.add_text_chunk("Comment".into(), comment.into())
            .map_err(png_err)?;
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.rgb).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }
}

pub fn label_color(l: PathologyLabel) -> [u8; 3] {
    match l {
        PathologyLabel::Background => [0, 0, 0],
        PathologyLabel::Healthy => [60, 180, 75],
        PathologyLabel::Ggo => [255, 225, 25],
        PathologyLabel::Fibrosis => [230, 25, 75],
        PathologyLabel::Emphysema => [0, 130, 200],
    }
}

const SERIES_COLORS: [[u8; 3]; 3] = [[31, 119, 180], [214, 39, 40], [44, 160, 44]];

/// Diffusion loss, contrastive loss and lambda against step, each scaled to
/// its own range so all three shapes are visible.
pub fn loss_curve(
    path: &Path,
    l_diff: &[f64],
    l_nce: &[f64],
    lambda: &[f64],
    comment: &str,
) -> Result<()> {
    let (w, h, m) = (640usize, 360usize, 30i64);
    let mut c = Canvas::new(w, h, [255, 255, 255]);
    let (x0, y0, x1, y1) = (m, h as i64 - m, w as i64 - m, m);
    c.line((x0, y0), (x1, y0), [0, 0, 0]);
    c.line((x0, y0), (x0, y1), [0, 0, 0]);
    for (series, color) in [l_diff, l_nce, lambda].into_iter().zip(SERIES_COLORS) {
        let finite: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let lo = finite
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .min(0.0);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = series.len().max(2) - 1;
        let mut prev = None;
        for (i, &v) in series.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let px = x0 + ((x1 - x0) as f64 * i as f64 / n as f64).round() as i64;
            let py = y0 - ((y0 - y1) as f64 * (v - lo) / span).round() as i64;
            if let Some(p) = prev {
                c.line(p, (px, py), color);
            } else {
                c.set(px, py, color);
            }
            prev = Some((px, py));
        }
    }
    c.save(path, comment)
}

pub struct GridRow {
    pub volume: CtVolume,
    pub prediction: LabelVolume,
    pub truth: Option<LabelVolume>,
}

/// One row per volume: windowed CT, predicted labels and, when available,
/// ground truth, all on the same axial slice.
pub fn slice_grid(
    path: &Path,
    rows: &[GridRow],
    slice: Option<usize>,
    window: HuWindow,
    comment: &str,
) -> Result<()> {
    let [_, h, w] = rows[0].volume.shape();
    let gap = 4;
    let cols = if rows.iter().any(|r| r.truth.is_some()) {
        3
    } else {
        2
    };
    let mut c = Canvas::new(
        cols * w + (cols + 1) * gap,
        rows.len() * h + (rows.len() + 1) * gap,
        [255, 255, 255],
    );
    for (r, row) in rows.iter().enumerate() {
        let [d, rh, rw] = row.volume.shape();
        if [rh, rw] != [h, w] {
            return Err(Error::ShapeMismatch(format!(
                "slice grid needs equal in-plane shapes, got {rh}x{rw} and {h}x{w}"
            )));
        }
        let z = slice.unwrap_or(d / 2);
        if z >= d {
            return Err(Error::InvalidArgument(format!(
                "slice {z} out of range for depth {d}"
            )));
        }
        let top = gap + r * (h + gap);
        let vox = row.volume.voxels();
        for y in 0..h {
            for x in 0..w {
                let g =
                    (255.0 * (window.normalize(vox[[z, y, x]] as f64) + 1.0) / 2.0).round() as u8;
                let py = (top + y) as i64;
                c.set((gap + x) as i64, py, [g, g, g]);
                c.set(
                    (2 * gap + w + x) as i64,
                    py,
                    label_color(row.prediction[[z, y, x]]),
                );
                if let Some(t) = &row.truth {
                    c.set((3 * gap + 2 * w + x) as i64, py, label_color(t[[z, y, x]]));
                }
            }
        }
    }
    c.save(path, comment)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_hits_both_endpoints() {
        let mut c = Canvas::new(10, 10, [0; 3]);
        c.line((1, 8), (7, 2), [9; 3]);
        assert_eq!(&c.rgb[3 * (8 * 10 + 1)..3 * (8 * 10 + 1) + 3], &[9, 9, 9]);
        assert_eq!(&c.rgb[3 * (2 * 10 + 7)..3 * (2 * 10 + 7) + 3], &[9, 9, 9]);
        // Out-of-range pixels are ignored.
        c.set(-1, 20, [1; 3]);
    }
}
