//! Quantitative evaluation: desk-scale Fréchet distance, PSNR, SSIM, and a
//! highlighter-feature perceptual distance.
//!
//! The Fréchet metric follows the usual d² = ‖μ1−μ2‖² + Tr(Σ1+Σ2−2(Σ1Σ2)^½)
//! over feature embeddings, but the embedder is swappable: the trained flaw
//! highlighter's pooled features by default, or a model-free pixel-PCA
//! embedder. Results are reported as "desk-FID" — the absolute numbers are
//! not comparable to Inception-based FID, only trends are.

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::highlighter::Highlighter;
use crate::linalg::{sqrtm_psd, symmetric_eigen};
use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

/// Dynamic range of the pixel domain `[-1, 1]`.
pub const IMAGE_RANGE: f64 = 2.0;

/// Maps image batches into the feature space whose moments the Fréchet
/// distance compares.
pub trait Embedder {
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f64>>;
}

/// Pooled last-stage features of a trained highlighter.
pub struct HighlighterEmbedder<'a, F: Scalar>(pub &'a Highlighter<F>);

impl<F: Scalar> Embedder for HighlighterEmbedder<'_, F> {
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f64>> {
        if !self.0.is_trained() {
            return Err(Error::InvalidArgument(
                "highlighter embedder needs a trained model".into(),
            ));
        }
        self.0.gap_features(images)
    }
}

/// Model-free fallback: project flattened pixels onto the top principal
/// components of a reference set.
pub struct PcaEmbedder {
    mean: Array1<f64>,
    /// `[pixels, dim]`, orthonormal columns.
    components: Array2<f64>,
}

fn flatten(images: &Array4<f32>) -> Array2<f64> {
    let n = images.shape()[0];
    let p = images.len() / n.max(1);
    let mut out = Array2::zeros((n, p));
    for (i, img) in images.axis_iter(Axis(0)).enumerate() {
        for (j, &v) in img.iter().enumerate() {
            out[[i, j]] = v as f64;
        }
    }
    out
}

impl PcaEmbedder {
    /// Fit `dim` components on a reference batch. Uses the Gram-matrix form
    /// when there are fewer samples than pixels, so fitting stays cheap at
    /// desk scale.
    pub fn fit(reference: &Array4<f32>, dim: usize) -> Result<Self> {
        let n = reference.shape()[0];
        if n < 2 {
            return Err(Error::InvalidArgument(
                "PCA needs at least two reference images".into(),
            ));
        }
        let x = flatten(reference);
        let p = x.ncols();
        if dim == 0 || dim > p || dim > n - 1 {
            return Err(Error::InvalidArgument(format!(
                "PCA dimension {dim} out of range for {n} samples of {p} pixels"
            )));
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &x - &mean.view().insert_axis(Axis(0));

        let mut components = Array2::zeros((p, dim));
        if n <= p {
            // Gram trick: eigenvectors of X X^T / (n-1) lift to pixel space.
            let gram = centered.dot(&centered.t()) / (n - 1) as f64;
            let (vals, vecs) = symmetric_eigen(&gram)?;
            for j in 0..dim {
                let col = n - 1 - j; // largest eigenvalues last (ascending sort)
                let lambda = vals[col].max(0.0);
                let u = vecs.column(col);
                let v = centered.t().dot(&u);
                let norm = (lambda * (n - 1) as f64).sqrt();
                let v = if norm > 1e-12 { v / norm } else { v };
                components.column_mut(j).assign(&v);
            }
        } else {
            let cov = centered.t().dot(&centered) / (n - 1) as f64;
            let (_, vecs) = symmetric_eigen(&cov)?;
            for j in 0..dim {
                components.column_mut(j).assign(&vecs.column(p - 1 - j));
            }
        }
        Ok(PcaEmbedder { mean, components })
    }

    pub fn dim(&self) -> usize {
        self.components.ncols()
    }
}

impl Embedder for PcaEmbedder {
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f64>> {
        let x = flatten(images);
        if x.ncols() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels per image, embedder fitted on {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        let centered = &x - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components))
    }
}

/// Empirical mean and (unbiased) covariance of feature rows.
pub fn feature_moments(features: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples for covariance, got {n}"
        )));
    }
    let mean = features.mean_axis(Axis(0)).expect("n >= 2");
    let centered = features - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    Ok((mean, cov))
}

/// Fréchet distance (squared 2-Wasserstein between Gaussians):
/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`. The cross term is evaluated as
/// the root of the symmetrized product `Σ1^{1/2} Σ2 Σ1^{1/2}`; eigenvalues
/// below -1e-8 mean an invalid covariance, small negatives are clamped.
pub fn frechet_distance(
    mu1: &Array1<f64>,
    cov1: &Array2<f64>,
    mu2: &Array1<f64>,
    cov2: &Array2<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d
        || cov1.nrows() != d
        || cov1.ncols() != d
        || cov2.nrows() != d
        || cov2.ncols() != d
    {
        return Err(Error::ShapeMismatch(format!(
            "moment dimensions: mu {} / {}, cov {:?} / {:?}",
            d,
            mu2.len(),
            cov1.dim(),
            cov2.dim()
        )));
    }
    const NEG_TOL: f64 = 1e-8;
    let s1h = sqrtm_psd(cov1, NEG_TOL)?;
    let inner = s1h.dot(cov2).dot(&s1h);
    let cross = sqrtm_psd(&inner, NEG_TOL * inner.iter().fold(1.0f64, |m, v| m.max(v.abs())))?;

    let mean_term: f64 = mu1
        .iter()
        .zip(mu2.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let trace = |m: &Array2<f64>| -> f64 { m.diag().sum() };
    let d2 = mean_term + trace(cov1) + trace(cov2) - 2.0 * trace(&cross);
    if d2 < -1e-6 {
        return Err(Error::NonFinite(format!(
            "Fréchet distance computed as {d2}; covariances are inconsistent"
        )));
    }
    Ok(d2.max(0.0))
}

/// Fréchet distance between the embedded feature statistics of two image
/// sets. Needs at least two images per side.
pub fn desk_fid(
    real: &Array4<f32>,
    generated: &Array4<f32>,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let fr = embedder.embed(real)?;
    let fg = embedder.embed(generated)?;
    if fr.ncols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "embedder dimension {} too small for covariance statistics",
            fr.ncols()
        )));
    }
    let (mu1, cov1) = feature_moments(&fr)?;
    let (mu2, cov2) = feature_moments(&fg)?;
    frechet_distance(&mu1, &cov1, &mu2, &cov2)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<D: ndarray::Dimension>(
    a: &ndarray::Array<f32, D>,
    b: &ndarray::Array<f32, D>,
    data_range: f64,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty arrays".into()));
    }
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean local SSIM over `[C, H, W]` images with an 11x11 Gaussian window
/// (sigma 1.5) and the standard stabilizers C1 = (0.01·range)²,
/// C2 = (0.03·range)² for the `[-1, 1]` pixel domain.
pub fn ssim(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let (c, h, w) = a.dim();
    if h < WIN || w < WIN {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {WIN}x{WIN} pixels, got {h}x{w}"
        )));
    }

    // 2-D Gaussian window, unit sum.
    let mut win = [[0.0f64; WIN]; WIN];
    let mut sum = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - (WIN as f64 - 1.0) / 2.0;
            let dx = j as f64 - (WIN as f64 - 1.0) / 2.0;
            *v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            sum += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    let c1 = (0.01 * IMAGE_RANGE).powi(2);
    let c2 = (0.03 * IMAGE_RANGE).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - WIN) {
            for x0 in 0..=(w - WIN) {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                for (i, row) in win.iter().enumerate() {
                    for (j, &wv) in row.iter().enumerate() {
                        ma += wv * a[[ch, y0 + i, x0 + j]] as f64;
                        mb += wv * b[[ch, y0 + i, x0 + j]] as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for (i, row) in win.iter().enumerate() {
                    for (j, &wv) in row.iter().enumerate() {
                        let da = a[[ch, y0 + i, x0 + j]] as f64 - ma;
                        let db = b[[ch, y0 + i, x0 + j]] as f64 - mb;
                        va += wv * da * da;
                        vb += wv * db * db;
                        cov += wv * da * db;
                    }
                }
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Highlighter-perceptual distance: per-position unit-normalized feature
/// differences, squared, averaged over positions and then over stages. Zero
/// iff the two images produce identical features.
pub fn perceptual_distance<F: Scalar>(
    a: ArrayView3<'_, f32>,
    b: ArrayView3<'_, f32>,
    model: &Highlighter<F>,
) -> Result<f64> {
    if !model.is_trained() {
        return Err(Error::InvalidArgument(
            "perceptual distance needs a trained highlighter".into(),
        ));
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "perceptual inputs {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (c, h, w) = a.dim();
    let batchify = |v: ArrayView3<'_, f32>| {
        v.to_owned()
            .into_shape((1, c, h, w))
            .expect("image reshape cannot fail")
    };
    let fa = model.stage_features(&batchify(a))?;
    let fb = model.stage_features(&batchify(b))?;

    const NORM_EPS: f64 = 1e-10;
    let mut total = 0.0f64;
    for (sa, sb) in fa.iter().zip(&fb) {
        let (k, fh, fw) = (sa.shape()[1], sa.shape()[2], sa.shape()[3]);
        let mut stage = 0.0f64;
        for y in 0..fh {
            for x in 0..fw {
                let (mut na, mut nb) = (0.0f64, 0.0f64);
                for ch in 0..k {
                    na += sa[[0, ch, y, x]].to_f64().powi(2);
                    nb += sb[[0, ch, y, x]].to_f64().powi(2);
                }
                let (na, nb) = (na.sqrt() + NORM_EPS, nb.sqrt() + NORM_EPS);
                for ch in 0..k {
                    let d = sa[[0, ch, y, x]].to_f64() / na - sb[[0, ch, y, x]].to_f64() / nb;
                    stage += d * d;
                }
            }
        }
        total += stage / (fh * fw) as f64;
    }
    Ok(total / fa.len() as f64)
}

/// One metric observation, serialized as a CSV row or a JSON line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub value: f64,
    pub seed: u64,
}

pub const METRIC_CSV_HEADER: &str = "metric,split,value,seed";

impl MetricRow {
    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{}", self.metric, self.split, self.value, self.seed)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric row serializes")
    }
}
