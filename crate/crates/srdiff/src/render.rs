//! Deterministic figure rendering: heatmaps, overlays, sample grids, and
//! the top-k grid-cell report.
//!
//! Colors use one fixed piecewise-linear map over `[0, 1]` (blue → yellow →
//! red) so rendered bytes never depend on anything but the input values.
//! Tensor outputs follow the crate's `[C, H, W]`, `[-1, 1]` image convention
//! and feed straight into [`crate::imageio::save_image`].

use crate::error::{Error, Result};
use crate::fam::Fam;
use ndarray::{Array3, Array4};

/// Piecewise-linear colormap: 0 → blue, 0.5 → yellow, 1 → red. Input is
/// clamped to `[0, 1]`; output is display-space RGB in `[0, 1]`.
pub fn colormap(v: f32) -> [f32; 3] {
    const BLUE: [f32; 3] = [0.0, 0.0, 1.0];
    const YELLOW: [f32; 3] = [1.0, 1.0, 0.0];
    const RED: [f32; 3] = [1.0, 0.0, 0.0];
    let v = v.clamp(0.0, 1.0);
    let (lo, hi, s) = if v < 0.5 {
        (BLUE, YELLOW, v * 2.0)
    } else {
        (YELLOW, RED, (v - 0.5) * 2.0)
    };
    [
        lo[0] + (hi[0] - lo[0]) * s,
        lo[1] + (hi[1] - lo[1]) * s,
        lo[2] + (hi[2] - lo[2]) * s,
    ]
}

/// Render a flaw map as a `[3, H, W]` color image in `[-1, 1]`.
pub fn render_heatmap(fam: &Fam) -> Array3<f32> {
    let (h, w) = (fam.height(), fam.width());
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let rgb = colormap(fam.data()[[y, x]]);
            for c in 0..3 {
                out[[c, y, x]] = rgb[c] * 2.0 - 1.0;
            }
        }
    }
    out
}

/// Blend an image with its flaw-map colors: display-space intensities are
/// mixed as `0.6 * image + 0.4 * colormap(map)` and clamped. Grayscale
/// inputs are broadcast to color; output is `[3, H, W]` in `[-1, 1]`.
pub fn overlay(image: &Array3<f32>, fam: &Fam) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!(
            "overlay expects 1 or 3 channels, got {c}"
        )));
    }
    if fam.height() != h || fam.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "flaw map {}x{} vs image {h}x{w}",
            fam.height(),
            fam.width()
        )));
    }
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let rgb = colormap(fam.data()[[y, x]]);
            for ch in 0..3 {
                let src = image[[if c == 1 { 0 } else { ch }, y, x]];
                // Same blend expressed in [-1, 1]: the colormap value is
                // first mapped into the image range.
                let blended = 0.6 * src + 0.4 * (rgb[ch] * 2.0 - 1.0);
                out[[ch, y, x]] = blended.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Tile a batch into a grid image, row-major with `cols` images per row.
/// Missing cells in the last row are black. Output keeps the batch's
/// channel count.
pub fn sample_grid(batch: &Array4<f32>, cols: usize) -> Result<Array3<f32>> {
    let (n, c, h, w) = batch.dim();
    if n == 0 || cols == 0 {
        return Err(Error::InvalidArgument(
            "sample grid needs at least one image and one column".into(),
        ));
    }
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!(
            "sample grid expects 1 or 3 channels, got {c}"
        )));
    }
    let rows = n.div_ceil(cols);
    let mut out = Array3::<f32>::from_elem((c, rows * h, cols * w), -1.0);
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, r * h + y, col * w + x]] = batch[[i, ch, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// Mean flaw activation of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScore {
    pub row: usize,
    pub col: usize,
    pub mean: f32,
}

/// Partition a flaw map into `grid x grid` cells and return the `k` cells
/// with the highest mean activation, strongest first (ties broken by
/// position, row-major). Uneven sizes split on rounded boundaries.
pub fn top_cells(fam: &Fam, grid: usize, k: usize) -> Result<Vec<CellScore>> {
    let (h, w) = (fam.height(), fam.width());
    if grid == 0 || grid > h || grid > w {
        return Err(Error::InvalidArgument(format!(
            "{grid}x{grid} grid does not fit a {h}x{w} map"
        )));
    }
    let mut cells = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        let (y0, y1) = (h * r / grid, h * (r + 1) / grid);
        for c in 0..grid {
            let (x0, x1) = (w * c / grid, w * (c + 1) / grid);
            let mut sum = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += fam.data()[[y, x]] as f64;
                }
            }
            let count = (y1 - y0) * (x1 - x0);
            cells.push(CellScore {
                row: r,
                col: c,
                mean: (sum / count as f64) as f32,
            });
        }
    }
    cells.sort_by(|a, b| {
        b.mean
            .partial_cmp(&a.mean)
            .expect("cell means are finite")
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    cells.truncate(k.min(grid * grid));
    Ok(cells)
}

/// CSV report over ranked cells: `rank,row,col,mean`.
pub fn cell_report(cells: &[CellScore]) -> String {
    let mut out = String::from("rank,row,col,mean\n");
    for (i, c) in cells.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i + 1, c.row, c.col, c.mean));
    }
    out
}
