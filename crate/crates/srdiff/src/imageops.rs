//! Small image-processing primitives shared across the crate: bilinear
//! resizing (CAM upsampling), block pooling (attention-resolution flaw map
//! embedding), separable Gaussian blur and Sobel gradients (edge-map
//! guidance), and RGB-to-luminance conversion. Everything operates on
//! `f32` single-channel maps with replicate border handling.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Bilinear resize with half-pixel-center sampling and edge clamping.
pub fn bilinear_resize(src: &Array2<f32>, out_h: usize, out_w: usize) -> Result<Array2<f32>> {
    let (h, w) = src.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("bilinear_resize: empty image".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(src.clone());
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
            let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
            out[[oy, ox]] = top * (1.0 - wy) + bot * wy;
        }
    }
    Ok(out)
}

/// Mean-pool over non-overlapping `factor x factor` blocks.
/// Both dimensions must be divisible by `factor`.
pub fn block_mean_pool(src: &Array2<f32>, factor: usize) -> Result<Array2<f32>> {
    let (h, w) = src.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "block_mean_pool: {h}x{w} not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f32;
    let mut out = Array2::<f32>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for di in 0..factor {
                for dj in 0..factor {
                    s += src[[i * factor + di, j * factor + dj]];
                }
            }
            out[[i, j]] = s / norm;
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    assert!(sigma > 0.0, "gaussian sigma must be positive");
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur(src: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (h, w) = src.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (ki, kv) in k.iter().enumerate() {
                let xx = clamp_idx(x as i64 + ki as i64 - radius, w);
                s += src[[y, xx]] * kv;
            }
            tmp[[y, x]] = s;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (ki, kv) in k.iter().enumerate() {
                let yy = clamp_idx(y as i64 + ki as i64 - radius, h);
                s += tmp[[yy, x]] * kv;
            }
            out[[y, x]] = s;
        }
    }
    out
}

/// 3x3 Sobel gradients `(gx, gy)` with replicate borders.
pub fn sobel_gradients(src: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = src.dim();
    let mut gx = Array2::<f32>::zeros((h, w));
    let mut gy = Array2::<f32>::zeros((h, w));
    let at = |y: i64, x: i64| -> f32 { src[[clamp_idx(y, h), clamp_idx(x, w)]] };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let tl = at(y - 1, x - 1);
            let tc = at(y - 1, x);
            let tr = at(y - 1, x + 1);
            let ml = at(y, x - 1);
            let mr = at(y, x + 1);
            let bl = at(y + 1, x - 1);
            let bc = at(y + 1, x);
            let br = at(y + 1, x + 1);
            gx[[y as usize, x as usize]] = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl);
            gy[[y as usize, x as usize]] = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr);
        }
    }
    (gx, gy)
}

/// Rec. 601 luminance of a `[C, H, W]` image; single-channel input passes
/// through unchanged.
pub fn luminance(img: &Array3<f32>) -> Result<Array2<f32>> {
    let (c, h, w) = img.dim();
    match c {
        1 => Ok(img.index_axis(ndarray::Axis(0), 0).to_owned()),
        3 => {
            let mut out = Array2::<f32>::zeros((h, w));
            for y in 0..h {
                for x in 0..w {
                    out[[y, x]] = 0.299 * img[[0, y, x]]
                        + 0.587 * img[[1, y, x]]
                        + 0.114 * img[[2, y, x]];
                }
            }
            Ok(out)
        }
        _ => Err(Error::InvalidArgument(format!(
            "luminance expects 1 or 3 channels, got {c}"
        ))),
    }
}
