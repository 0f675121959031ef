//! Structural guidance maps: fixed alternatives to the learned mean flaw map.
//!
//! Each map is a drop-in substitute for the averaged flaw map — same `[0, 1]`
//! range, same shape contract — so refinement can be ablated against guidance
//! that encodes geometry (center, periphery) or image structure (edges)
//! instead of classifier evidence.

use crate::error::{Error, Result};
use crate::fam::Fam;
use crate::imageops::{gaussian_blur, luminance, sobel_gradients};
use ndarray::{Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

/// Gaussian width of the center/periphery maps as a fraction of the
/// shorter image side.
pub const DEFAULT_SIGMA_FRAC: f64 = 0.35;
/// Default Canny hysteresis thresholds and pre-blur for edge guidance.
pub const DEFAULT_EDGE_LOW: f32 = 0.1;
pub const DEFAULT_EDGE_HIGH: f32 = 0.3;
pub const DEFAULT_EDGE_BLUR: f32 = 1.0;

/// Which map steers refinement: the learned flaw map or one of the fixed
/// structural alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceKind {
    /// Mean flaw activation map from the highlighter (the learned default).
    Fam,
    CenterGaussian,
    InvertedGaussian,
    Edge,
}

impl GuidanceKind {
    pub const ALL: [GuidanceKind; 4] = [
        GuidanceKind::CenterGaussian,
        GuidanceKind::InvertedGaussian,
        GuidanceKind::Edge,
        GuidanceKind::Fam,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceKind::Fam => "fam",
            GuidanceKind::CenterGaussian => "center-gaussian",
            GuidanceKind::InvertedGaussian => "inverted-gaussian",
            GuidanceKind::Edge => "edge",
        }
    }
}

impl std::str::FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GuidanceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown guidance kind {s:?}; expected one of fam, center-gaussian, \
                     inverted-gaussian, edge"
                ))
            })
    }
}

/// Build the guidance map of `kind` for a refresh: sample-independent kinds
/// use only the image size, `Edge` averages the Canny maps of the refresh
/// samples, and `Fam` is not derivable here (the trainer owns the
/// highlighter pipeline for it).
pub fn guidance_map(kind: GuidanceKind, samples: &Array4<f32>) -> Result<Fam> {
    let (h, w) = (samples.shape()[2], samples.shape()[3]);
    match kind {
        GuidanceKind::CenterGaussian => center_gaussian_map(h, w, DEFAULT_SIGMA_FRAC),
        GuidanceKind::InvertedGaussian => inverted_gaussian_map(h, w, DEFAULT_SIGMA_FRAC),
        GuidanceKind::Edge => {
            mean_edge_map(samples, DEFAULT_EDGE_LOW, DEFAULT_EDGE_HIGH, DEFAULT_EDGE_BLUR)
        }
        GuidanceKind::Fam => Err(Error::InvalidArgument(
            "flaw-map guidance comes from the highlighter, not guidance_map".into(),
        )),
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "guidance map needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Isotropic Gaussian bump centred on the image, min-max normalized so the
/// centre reads 1 and the farthest corner 0. `sigma_frac` sets the width as
/// a fraction of `min(h, w)`.
pub fn center_gaussian_map(h: usize, w: usize, sigma_frac: f64) -> Result<Fam> {
    check_size(h, w)?;
    if !(sigma_frac.is_finite() && sigma_frac > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma fraction must be positive, got {sigma_frac}"
        )));
    }
    let sigma = sigma_frac * h.min(w) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let raw = Array2::from_shape_fn((h, w), |(y, x)| {
        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp() as f32
    });
    Fam::normalize(&raw)
}

/// Complement of [`center_gaussian_map`]: 0 at the centre, 1 at the farthest
/// corner, emphasizing the periphery.
pub fn inverted_gaussian_map(h: usize, w: usize, sigma_frac: f64) -> Result<Fam> {
    let center = center_gaussian_map(h, w, sigma_frac)?;
    Fam::new(center.data().mapv(|v| 1.0 - v))
}

/// Canny-style binary edge map of one `[C, H, W]` image: Gaussian smoothing,
/// Sobel gradients, non-maximum suppression along the gradient direction, and
/// 8-connected hysteresis between the two thresholds. Thresholds apply to the
/// gradient magnitude after scaling its maximum to 1, so they are fractional.
/// `blur_sigma == 0` skips smoothing.
pub fn edge_map(image: ArrayView3<'_, f32>, low: f32, high: f32, blur_sigma: f32) -> Result<Fam> {
    if !(low.is_finite() && high.is_finite() && 0.0 <= low && low < high) {
        return Err(Error::InvalidArgument(format!(
            "edge thresholds need 0 <= low < high, got {low} and {high}"
        )));
    }
    if !(blur_sigma.is_finite() && blur_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be non-negative, got {blur_sigma}"
        )));
    }
    let (_, h, w) = image.dim();
    check_size(h, w)?;

    let gray = luminance(&image.to_owned())?;
    let smooth = if blur_sigma > 0.0 {
        gaussian_blur(&gray, blur_sigma)
    } else {
        gray
    };
    let (gx, gy) = sobel_gradients(&smooth);

    let mut mag = Array2::<f32>::zeros((h, w));
    let mut peak = 0.0f32;
    for ((y, x), m) in mag.indexed_iter_mut() {
        *m = gx[[y, x]].hypot(gy[[y, x]]);
        peak = peak.max(*m);
    }
    if peak == 0.0 {
        return Ok(Fam::zeros(h, w));
    }
    mag /= peak;

    // Non-maximum suppression: keep a pixel only if it is at least as strong
    // as its two neighbours along the (rounded) gradient direction.
    let at = |y: i64, x: i64| -> f32 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mag[[y as usize, x as usize]]
        }
    };
    let mut thin = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let m = mag[[y, x]];
            if m == 0.0 {
                continue;
            }
            let theta = (gy[[y, x]] as f64).atan2(gx[[y, x]] as f64);
            let dx = theta.cos().round() as i64;
            let dy = theta.sin().round() as i64;
            let (yi, xi) = (y as i64, x as i64);
            if m >= at(yi + dy, xi + dx) && m >= at(yi - dy, xi - dx) {
                thin[[y, x]] = m;
            }
        }
    }

    // Hysteresis: flood from strong pixels through weak ones, 8-connected.
    let strong = |v: f32| v >= high;
    let weak = |v: f32| v >= low;
    let mut out = Array2::<f32>::zeros((h, w));
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for ((y, x), &v) in thin.indexed_iter() {
        if strong(v) {
            out[[y, x]] = 1.0;
            stack.push((y, x));
        }
    }
    while let Some((y, x)) = stack.pop() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if out[[ny, nx]] == 0.0 && weak(thin[[ny, nx]]) {
                    out[[ny, nx]] = 1.0;
                    stack.push((ny, nx));
                }
            }
        }
    }
    Fam::new(out)
}

/// Edge maps of every image in a `[N, C, H, W]` batch, averaged into one map
/// — the batch-level analogue of the mean flaw map.
pub fn mean_edge_map(
    images: &Array4<f32>,
    low: f32,
    high: f32,
    blur_sigma: f32,
) -> Result<Fam> {
    if images.shape()[0] == 0 {
        return Err(Error::InvalidArgument("edge map of an empty batch".into()));
    }
    let maps: Vec<Fam> = images
        .axis_iter(Axis(0))
        .map(|img| edge_map(img, low, high, blur_sigma))
        .collect::<Result<_>>()?;
    Fam::average(&maps)
}
