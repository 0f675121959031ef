//! RePaint-style inpainting and the three mask families it is evaluated on.
//!
//! During the reverse chain the known region is repeatedly re-drawn from the
//! forward process of the ground truth and composited with the model's
//! reverse step for the unknown region; optional resampling jumps re-noise a
//! few steps and repeat them to harmonize the seam. The final composite at
//! t = 0 copies the known pixels verbatim.

use crate::autodiff::{Arr, Scalar};
use crate::diffusion::{forward_sample, randn, reverse_step, NoisePredictor};
use crate::error::{Error, Result};
use crate::fam::Fam;
use crate::schedule::NoiseSchedule;
use ndarray::{Array2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Binary inpainting mask: 1 marks a known pixel, 0 a pixel to synthesize.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    data: Array2<f32>,
}

/// The three mask families of the inpainting comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    /// Few thick strokes; 30–50% of the image unknown.
    Wide,
    /// Many thin strokes; 5–15% unknown.
    Narrow,
    /// Every other row unknown, starting with row 1 (row 0 stays known).
    AlternatingLines,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::Wide, MaskKind::Narrow, MaskKind::AlternatingLines];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Wide => "wide",
            MaskKind::Narrow => "narrow",
            MaskKind::AlternatingLines => "alternating-lines",
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown mask kind {s:?}; expected wide, narrow, or alternating-lines"
                ))
            })
    }
}

impl Mask {
    /// Wrap an existing binary array. Values must be exactly 0 or 1; fully
    /// known masks are allowed (inpainting then reproduces the input), but
    /// [`make_mask`] always yields both regions.
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty mask".into()));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(
                "mask values must be exactly 0 or 1".into(),
            ));
        }
        Ok(Mask { data })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    /// Fraction of pixels to synthesize (mask value 0).
    pub fn unknown_fraction(&self) -> f64 {
        let zeros = self.data.iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.data.len() as f64
    }

    /// Persist in the flaw-map container with the binary flag set.
    pub fn save(&self, path: &Path) -> Result<()> {
        Fam::new(self.data.clone())?.save(path, true)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (fam, binary) = Fam::load(path)?;
        if !binary {
            return Err(Error::Format(
                "file does not carry the binary-mask flag".into(),
            ));
        }
        Mask::new(fam.data().clone())
    }
}

/// Paint a disk of `radius` around `(cy, cx)` with zeros (unknown), stopping
/// early once `budget` pixels have been cleared. Returns pixels cleared.
fn clear_disk(data: &mut Array2<f32>, cy: i64, cx: i64, radius: i64, budget: usize) -> usize {
    let (h, w) = data.dim();
    let mut cleared = 0usize;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dy * dy + dx * dx > radius * radius {
                continue;
            }
            let (y, x) = (cy + dy, cx + dx);
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            let cell = &mut data[[y as usize, x as usize]];
            if *cell == 1.0 {
                if cleared >= budget {
                    return cleared;
                }
                *cell = 0.0;
                cleared += 1;
            }
        }
    }
    cleared
}

/// Generate a mask of the given family. Stroke masks walk random segments
/// and stop pixel-exactly inside their coverage band, so the unknown
/// fraction always lands in the documented range. Deterministic per seed.
pub fn make_mask<R: Rng>(kind: MaskKind, h: usize, w: usize, rng: &mut R) -> Result<Mask> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "masks need at least 8x8 pixels, got {h}x{w}"
        )));
    }
    let mut data = Array2::<f32>::ones((h, w));
    match kind {
        MaskKind::AlternatingLines => {
            for y in (1..h).step_by(2) {
                for x in 0..w {
                    data[[y, x]] = 0.0;
                }
            }
        }
        MaskKind::Wide | MaskKind::Narrow => {
            let (lo, hi, radius) = match kind {
                MaskKind::Wide => (0.32, 0.48, (h.min(w) as i64 / 8).max(2)),
                MaskKind::Narrow => (0.06, 0.14, 1),
                MaskKind::AlternatingLines => unreachable!(),
            };
            let total = h * w;
            let target = (total as f64 * rng.gen_range(lo..hi)).round() as usize;
            let mut cleared = 0usize;
            while cleared < target {
                // One stroke: a random walk of disk stamps.
                let mut y = rng.gen_range(0..h) as i64;
                let mut x = rng.gen_range(0..w) as i64;
                let steps = rng.gen_range(3..(h + w) / 2);
                let (dy, dx) = (rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2));
                for _ in 0..steps {
                    cleared += clear_disk(&mut data, y, x, radius, target - cleared);
                    if cleared >= target {
                        break;
                    }
                    y = (y + dy + rng.gen_range(-1i64..=1)).clamp(0, h as i64 - 1);
                    x = (x + dx + rng.gen_range(-1i64..=1)).clamp(0, w as i64 - 1);
                }
            }
        }
    }
    Mask::new(data)
}

/// The t-level trajectory of the resampling schedule. `Down` entries perform
/// a reverse step at that t; `Up` entries re-noise one step upward to t.
/// With `jump_n == 0` this is exactly `T` reverse steps and nothing else.
fn jump_trajectory(t_steps: usize, jump_len: usize, jump_n: usize) -> Vec<(bool, usize)> {
    let mut moves = Vec::new();
    let mut t = t_steps as i64 - 1;
    // Remaining re-ascents allowed at each segment boundary.
    let mut budget = vec![jump_n; t_steps];
    while t >= 0 {
        moves.push((true, t as usize));
        let reached = t - 1;
        if jump_len > 0
            && jump_n > 0
            && reached >= 0
            && (reached as usize) % jump_len == 0
            && reached as usize + jump_len < t_steps
            && budget[reached as usize] > 0
        {
            budget[reached as usize] -= 1;
            for up in 1..=jump_len {
                moves.push((false, reached as usize + up));
            }
            t = reached + jump_len as i64;
        } else {
            t = reached;
        }
    }
    moves
}

/// RePaint sampling of one `[C, H, W]` image. `known` supplies the ground
/// truth for mask-1 pixels; mask-0 pixels are synthesized by the model. The
/// output's known region equals `known` bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn repaint_sample<F: Scalar, M: NoisePredictor<F> + ?Sized, R: Rng>(
    model: &M,
    sched: &NoiseSchedule<F>,
    known: &Arr<F>,
    mask: &Mask,
    jump_len: usize,
    jump_n: usize,
    rng: &mut R,
) -> Result<Arr<F>> {
    let shape = known.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "known image must be [C, H, W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if known.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("known image".into()));
    }

    let gt = known
        .clone()
        .into_shape(IxDyn(&[1, c, h, w]))
        .expect("image reshape cannot fail");
    let m = Arr::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| {
        F::from_f64(mask.data[[ix[2], ix[3]]] as f64)
    });
    let composite = |x: &Arr<F>, known_t: &Arr<F>| -> Arr<F> {
        let mut out = x.clone();
        ndarray::Zip::from(&mut out)
            .and_broadcast(&m)
            .and(known_t)
            .for_each(|o, &mv, &kv| {
                if mv == F::one() {
                    *o = kv;
                }
            });
        out
    };

    let mut x: Arr<F> = randn(&[1, c, h, w], rng);
    for (down, t) in jump_trajectory(sched.len(), jump_len, jump_n) {
        if down {
            // Known region at this step comes from the forward process of
            // the ground truth; at the final step it is the ground truth.
            let eps_hat = model.predict_noise(&x, t);
            let z = if t > 0 {
                Some(randn::<F, _>(x.shape(), rng))
            } else {
                None
            };
            x = reverse_step(&x, &eps_hat, t, z.as_ref(), sched)?;
            let known_t = if t > 0 {
                let eps = randn::<F, _>(gt.shape(), rng);
                forward_sample(&gt, &eps, t - 1, sched)?
            } else {
                gt.clone()
            };
            x = composite(&x, &known_t);
        } else {
            // Re-noise one step up: x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps.
            let beta = sched.betas[t];
            let keep = (F::one() - beta).sqrt();
            let amp = beta.sqrt();
            let eps = randn::<F, _>(x.shape(), rng);
            ndarray::Zip::from(&mut x)
                .and(&eps)
                .for_each(|o, &e| *o = keep * *o + amp * e);
        }
    }
    x.into_shape(IxDyn(&[c, h, w]))
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}
