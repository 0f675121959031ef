//! Real-vs-generated classifier and flaw activation maps.
//!
//! A small CNN (a few conv stages, global average pooling, 2-logit head) is
//! trained to tell training images from model samples. Class-activation maps
//! taken with respect to the *fake* logit localize the regions that gave a
//! sample away; averaged over a batch they form the mean flaw map that steers
//! refinement. The GAP + linear head makes vanilla CAM exact, and Grad-CAM
//! reduces to it analytically, which the tests pin down numerically.

use crate::autodiff::{Arr, Scalar, Tape, Var};
use crate::denoiser::{Conv, Linear, ParamBank};
use crate::error::{Error, Result};
use crate::fam::Fam;
use crate::imageops::bilinear_resize;
use crate::optim::Adam;
use ndarray::{Array2, Array4, ArrayView3, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Index of the "real" logit.
pub const CLASS_REAL: usize = 0;
/// Index of the "fake" logit; flaw maps always target this class.
pub const CLASS_FAKE: usize = 1;

/// Architecture and training hyperparameters for the highlighter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HighlighterConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each conv stage; 2x average pooling sits between
    /// consecutive stages, so the last stage sees `image_size >> (stages-1)`.
    pub stage_channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the combined dataset held out for the accuracy report.
    pub holdout_fraction: f64,
}

impl Default for HighlighterConfig {
    fn default() -> Self {
        HighlighterConfig {
            image_size: 16,
            in_channels: 1,
            stage_channels: vec![8, 16, 32],
            epochs: 30,
            batch_size: 16,
            learning_rate: 5e-3,
            holdout_fraction: 0.2,
        }
    }
}

impl HighlighterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(Error::Config(
                "highlighter needs at least two conv stages".into(),
            ));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(Error::Config("zero-channel highlighter stage".into()));
        }
        let pools = self.stage_channels.len() - 1;
        if self.image_size == 0 || self.image_size % (1 << pools) != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by {} pooling stages",
                self.image_size, pools
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("empty training schedule".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Spatial side of the last stage's feature maps.
    pub fn feature_size(&self) -> usize {
        self.image_size >> (self.stage_channels.len() - 1)
    }
}

/// The trained classifier together with its parameter bank.
pub struct Highlighter<F: Scalar> {
    cfg: HighlighterConfig,
    bank: ParamBank<F>,
    stages: Vec<Conv>,
    head: Linear,
    trained: bool,
}

impl<F: Scalar> Highlighter<F> {
    /// Freshly initialized (untrained) model.
    pub fn new<R: Rng>(cfg: HighlighterConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut bank = ParamBank::new();
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, &cout) in cfg.stage_channels.iter().enumerate() {
            stages.push(Conv::init(&mut bank, &format!("stage{i}"), cin, cout, 3, rng));
            cin = cout;
        }
        let head = Linear::init(&mut bank, "head", cin, 2, rng);
        Ok(Highlighter {
            cfg,
            bank,
            stages,
            head,
            trained: false,
        })
    }

    pub fn config(&self) -> &HighlighterConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &ParamBank<F> {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut ParamBank<F> {
        &mut self.bank
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Mark the weights as trained, e.g. after restoring from a checkpoint
    /// or installing hand-constructed weights.
    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = (self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size);
        if shape.len() == 4 && shape[1] == c && shape[2] == h && shape[3] == w && shape[0] > 0 {
            return Ok(());
        }
        Err(Error::ShapeMismatch(format!(
            "expected [N, {c}, {h}, {w}] images, got {shape:?}"
        )))
    }

    /// Record the whole network on `tape`. Returns the post-ReLU activations
    /// of every stage (the last one carries the maps A^k used for CAM) and
    /// the `[B, 2]` logits.
    fn forward(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> (Vec<Var>, Var) {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (i, conv) in self.stages.iter().enumerate() {
            h = conv.apply(tape, p, h);
            h = tape.relu(h);
            feats.push(h);
            if i + 1 < self.stages.len() {
                h = tape.avg_pool2(h);
            }
        }
        let gap = tape.mean_axes(h, &[2, 3]);
        let b = tape.value(gap).shape()[0];
        let k = tape.value(gap).shape()[1];
        let flat = tape.reshape(gap, &[b, k]);
        let logits = self.head.apply(tape, p, flat);
        (feats, logits)
    }

    /// Inference-only forward; nothing on the tape requires gradients.
    fn infer(&self, images: &Array4<f32>) -> Result<(Tape<F>, Vec<Var>, Var)> {
        self.check_images(images.shape())?;
        let mut tape = Tape::new();
        let p: Vec<Var> = self
            .bank
            .values()
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect();
        let x = tape.constant(images.mapv(|v| F::from_f64(v as f64)).into_dyn());
        let (feats, logits) = self.forward(&mut tape, &p, x);
        Ok((tape, feats, logits))
    }

    /// Raw `[N, 2]` logits.
    pub fn logits(&self, images: &Array4<f32>) -> Result<Array2<f64>> {
        let (tape, _, logits) = self.infer(images)?;
        let v = tape.value(logits);
        let n = v.shape()[0];
        Ok(Array2::from_shape_fn((n, 2), |(i, j)| v[[i, j]].to_f64()))
    }

    /// Per-image probability of the fake class (softmax of the logits).
    pub fn scores(&self, images: &Array4<f32>) -> Result<Vec<f64>> {
        let logits = self.logits(images)?;
        Ok(logits
            .outer_iter()
            .map(|row| {
                let m = row[0].max(row[1]);
                let e0 = (row[0] - m).exp();
                let e1 = (row[1] - m).exp();
                e1 / (e0 + e1)
            })
            .collect())
    }

    /// Global-average-pooled features of the last stage, `[N, K]`. These act
    /// as the embedding space for distribution-level metrics.
    pub fn gap_features(&self, images: &Array4<f32>) -> Result<Array2<f64>> {
        let (tape, feats, _) = self.infer(images)?;
        let a = tape.value(*feats.last().unwrap());
        let (n, k, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
        let mut out = Array2::zeros((n, k));
        for i in 0..n {
            for c in 0..k {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += a[[i, c, y, x]].to_f64();
                    }
                }
                out[[i, c]] = s / (h * w) as f64;
            }
        }
        Ok(out)
    }

    /// Post-ReLU activations of every stage, for feature-space distances.
    pub fn stage_features(&self, images: &Array4<f32>) -> Result<Vec<Arr<F>>> {
        let (tape, feats, _) = self.infer(images)?;
        Ok(feats.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Grad-CAM for one `[C, H, W]` image: channel weights are the spatial
    /// means of d(logit_target)/dA^k, the map is ReLU(sum_k w_k A^k) upsampled
    /// to image size and min-max normalized. A zero-gradient (or otherwise
    /// constant) map normalizes to all zeros, and a spatially constant input
    /// is defined to map to all zeros outright: it has no structure to
    /// attribute, and the normalization would otherwise amplify convolution
    /// border artifacts into a full-range map.
    pub fn grad_cam(&self, image: ArrayView3<'_, f32>, target: usize) -> Result<Fam> {
        self.require_trained()?;
        check_target(target)?;
        let (c, h, w) = image.dim();
        self.check_images(&[1, c, h, w])?;
        if is_constant(&image) {
            return Fam::new(Array2::zeros((h, w)));
        }

        let mut tape = Tape::new();
        let p: Vec<Var> = self
            .bank
            .values()
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect();
        let xv = image.mapv(|v| F::from_f64(v as f64)).into_dyn();
        let x = tape.param(
            xv.into_shape(IxDyn(&[1, c, h, w]))
                .expect("image reshape cannot fail"),
        );
        let (feats, logits) = self.forward(&mut tape, &p, x);
        let features = *feats.last().unwrap();

        let mut seed = Arr::zeros(IxDyn(&[1, 2]));
        seed[[0, target]] = F::one();
        let grads = tape.backward_seeded(logits, seed);
        let fv = tape.value(features);
        let (k, fh, fw) = (fv.shape()[1], fv.shape()[2], fv.shape()[3]);
        let gv = grads.get_or_zeros(features, fv.shape());

        let mut raw = Array2::<f32>::zeros((fh, fw));
        for ch in 0..k {
            let mut wk = 0.0f64;
            for y in 0..fh {
                for x in 0..fw {
                    wk += gv[[0, ch, y, x]].to_f64();
                }
            }
            wk /= (fh * fw) as f64;
            for y in 0..fh {
                for x in 0..fw {
                    raw[[y, x]] += (wk * fv[[0, ch, y, x]].to_f64()) as f32;
                }
            }
        }
        finalize_map(&raw, h, w)
    }

    /// Vanilla CAM: channel weights come straight from the GAP-head linear
    /// layer. For this architecture it agrees with [`Self::grad_cam`] after
    /// normalization (the gradient weights are the head weights over `H*W`).
    pub fn cam(&self, image: ArrayView3<'_, f32>, target: usize) -> Result<Fam> {
        self.require_trained()?;
        check_target(target)?;
        let (c, h, w) = image.dim();
        self.check_images(&[1, c, h, w])?;
        if is_constant(&image) {
            return Fam::new(Array2::zeros((h, w)));
        }

        let batch = image
            .to_owned()
            .into_shape((1, c, h, w))
            .expect("image reshape cannot fail");
        let (tape, feats, _) = self.infer(&batch)?;
        let fv = tape.value(*feats.last().unwrap());
        let (k, fh, fw) = (fv.shape()[1], fv.shape()[2], fv.shape()[3]);

        let head_w = &self.bank.values()[self.head.w];
        let mut raw = Array2::<f32>::zeros((fh, fw));
        for ch in 0..k {
            let wk = head_w[[ch, target]].to_f64();
            for y in 0..fh {
                for x in 0..fw {
                    raw[[y, x]] += (wk * fv[[0, ch, y, x]].to_f64()) as f32;
                }
            }
        }
        finalize_map(&raw, h, w)
    }

    /// Grad-CAM over a batch, targeting the fake class.
    pub fn fams(&self, images: &Array4<f32>) -> Result<Vec<Fam>> {
        self.check_images(images.shape())?;
        images
            .outer_iter()
            .map(|img| self.grad_cam(img, CLASS_FAKE))
            .collect()
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "highlighter has not been trained; flaw maps would be noise".into(),
            ))
        }
    }
}

/// True when every pixel of every channel holds the same value (the
/// degenerate-input rule of both CAM variants).
fn is_constant(image: &ArrayView3<'_, f32>) -> bool {
    let mut it = image.iter();
    match it.next() {
        Some(first) => it.all(|v| v == first),
        None => true,
    }
}

fn check_target(target: usize) -> Result<()> {
    if target > 1 {
        return Err(Error::InvalidArgument(format!(
            "class index {target} out of range (0 = real, 1 = fake)"
        )));
    }
    Ok(())
}

/// Shared tail of both CAM variants: rectify at feature resolution, upsample
/// bilinearly to image size, min-max normalize into `[0, 1]`.
fn finalize_map(raw: &Array2<f32>, out_h: usize, out_w: usize) -> Result<Fam> {
    let rect = raw.mapv(|v| v.max(0.0));
    let up = bilinear_resize(&rect, out_h, out_w)?;
    Fam::normalize(&up)
}

/// Elementwise mean of a batch of flaw maps; inputs are already in `[0, 1]`
/// so no renormalization happens.
pub fn mean_fam(fams: &[Fam]) -> Result<Fam> {
    Fam::average(fams)
}

/// Train a fresh highlighter on real (label 0) vs fake (label 1) batches.
/// Returns the model and its held-out accuracy. Deterministic given the RNG
/// state: the same draws order initialization, the holdout split, and the
/// per-epoch shuffles.
pub fn train_highlighter<F: Scalar, R: Rng>(
    real: &Array4<f32>,
    fake: &Array4<f32>,
    cfg: &HighlighterConfig,
    rng: &mut R,
) -> Result<(Highlighter<F>, f64)> {
    cfg.validate()?;
    if real.shape()[0] == 0 || fake.shape()[0] == 0 {
        return Err(Error::InvalidArgument(
            "both real and fake batches must be non-empty".into(),
        ));
    }
    if real.shape()[1..] != fake.shape()[1..] {
        return Err(Error::ShapeMismatch(format!(
            "real images {:?} vs fake images {:?}",
            real.shape(),
            fake.shape()
        )));
    }

    let mut model = Highlighter::<F>::new(cfg.clone(), rng)?;
    model.check_images(real.shape())?;

    let n_real = real.shape()[0];
    let n = n_real + fake.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_holdout = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, holdout_idx) = order.split_at(n - n_holdout);
    let mut train_idx = train_idx.to_vec();

    let image = |i: usize| {
        if i < n_real {
            real.index_axis(Axis(0), i)
        } else {
            fake.index_axis(Axis(0), i - n_real)
        }
    };
    let label = |i: usize| if i < n_real { CLASS_REAL } else { CLASS_FAKE };
    let gather = |idx: &[usize]| {
        let (c, h, w) = (cfg.in_channels, cfg.image_size, cfg.image_size);
        let mut batch = Array4::<f32>::zeros((idx.len(), c, h, w));
        for (row, &i) in idx.iter().enumerate() {
            batch.index_axis_mut(Axis(0), row).assign(&image(i));
        }
        batch
    };

    let mut adam = Adam::new(cfg.learning_rate, model.bank.values());
    for _ in 0..cfg.epochs {
        train_idx.shuffle(rng);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = gather(chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| label(i)).collect();

            let mut tape = Tape::new();
            let p = model.bank.push_all(&mut tape);
            let x = tape.constant(batch.mapv(|v| F::from_f64(v as f64)).into_dyn());
            let (_, logits) = model.forward(&mut tape, &p, x);
            let loss = tape.cross_entropy_logits(logits, &targets);
            let grads = tape.backward(loss);
            let grad_arrays: Vec<Option<Arr<F>>> =
                p.iter().map(|&v| grads.get(v).cloned()).collect();
            adam.update(model.bank.values_mut(), &grad_arrays)?;
        }
    }
    model.trained = true;

    let mut correct = 0usize;
    for chunk in holdout_idx.chunks(cfg.batch_size.max(1)) {
        let logits = model.logits(&gather(chunk))?;
        for (row, &i) in chunk.iter().enumerate() {
            let pred = if logits[[row, 1]] > logits[[row, 0]] {
                CLASS_FAKE
            } else {
                CLASS_REAL
            };
            if pred == label(i) {
                correct += 1;
            }
        }
    }
    let accuracy = correct as f64 / holdout_idx.len() as f64;
    Ok((model, accuracy))
}

/// Classifier quality at threshold 0.5 plus the rank-statistic ROC-AUC.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when only one class is present (the curve is undefined).
    pub roc_auc: Option<f64>,
}

/// Accuracy and F1 score a 0.5 cut on `scores`; ROC-AUC comes from average
/// ranks, which counts tied (positive, negative) pairs as half-ordered.
pub fn classifier_metrics(labels: &[bool], scores: &[f64]) -> Result<ClassifierMetrics> {
    if labels.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("classifier scores".into()));
    }

    let (mut tp, mut fp, mut tn, mut fnp) = (0u64, 0u64, 0u64, 0u64);
    for (&y, &s) in labels.iter().zip(scores) {
        match (y, s >= 0.5) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fnp += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / labels.len() as f64;
    let f1_denom = 2 * tp + fp + fnp;
    let f1 = if f1_denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / f1_denom as f64
    };

    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    let roc_auc = if n_pos == 0 || n_neg == 0 {
        None
    } else {
        // Average ranks over score-sorted samples; tie groups share the mean
        // of their rank span, so tied cross-class pairs contribute exactly
        // one half each.
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let mut rank_sum_pos = 0.0f64;
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
                j += 1;
            }
            let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
            for &s in &idx[i..j] {
                if labels[s] {
                    rank_sum_pos += avg_rank;
                }
            }
            i = j;
        }
        let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
        Some(u / (n_pos as f64 * n_neg as f64))
    };

    Ok(ClassifierMetrics {
        accuracy,
        f1,
        roc_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> HighlighterConfig {
        HighlighterConfig {
            image_size: 16,
            in_channels: 1,
            stage_channels: vec![2, 2],
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-3,
            holdout_fraction: 0.25,
        }
    }

    /// Model whose fake logit is exactly the GAP of a downsampled copy of the
    /// image: stage convs pass channel 0 through untouched, the head reads
    /// only that channel. Bright regions then dominate the flaw map.
    fn passthrough_model() -> Highlighter<f64> {
        let mut rng = StdRng::seed_from_u64(7);
        let mut m = Highlighter::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        for i in 0..2 {
            let w = m
                .bank_mut()
                .value_mut_by_name(&format!("stage{i}.weight"))
                .unwrap();
            w.fill(0.0);
            w[[0, 0, 1, 1]] = 1.0; // centre tap: identity on channel 0
            m.bank_mut()
                .value_mut_by_name(&format!("stage{i}.bias"))
                .unwrap()
                .fill(0.0);
        }
        let hw = m.bank_mut().value_mut_by_name("head.weight").unwrap();
        hw.fill(0.0);
        hw[[0, CLASS_FAKE]] = 1.0;
        m.bank_mut()
            .value_mut_by_name("head.bias")
            .unwrap()
            .fill(0.0);
        m.set_trained(true);
        m
    }

    fn bright_corner_image(rng: &mut StdRng) -> Array3<f32> {
        let mut img = Array3::from_shape_fn((1, 16, 16), |_| rng.gen::<f32>() * 0.2);
        for y in 0..8 {
            for x in 0..8 {
                img[[0, y, x]] += 0.8;
            }
        }
        img
    }

    #[test]
    fn grad_cam_localizes_constructed_quadrant() {
        let model = passthrough_model();
        let mut rng = StdRng::seed_from_u64(11);
        let mut hits = 0;
        for _ in 0..100 {
            let img = bright_corner_image(&mut rng);
            let fam = model.grad_cam(img.view(), CLASS_FAKE).unwrap();
            let mut best = (0, 0);
            let mut best_v = f32::NEG_INFINITY;
            for ((y, x), &v) in fam.data().indexed_iter() {
                if v > best_v {
                    best_v = v;
                    best = (y, x);
                }
            }
            if best.0 < 8 && best.1 < 8 {
                hits += 1;
            }
        }
        assert!(hits >= 90, "only {hits}/100 maps peaked in the bright quadrant");
    }

    #[test]
    fn cam_matches_grad_cam_for_gap_head() {
        let mut rng = StdRng::seed_from_u64(21);
        let mut model = Highlighter::<f64>::new(
            HighlighterConfig {
                stage_channels: vec![4, 6, 8],
                ..HighlighterConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        model.set_trained(true);
        for trial in 0..5 {
            let img = Array3::from_shape_fn((1, 16, 16), |_| rng.gen::<f32>() * 2.0 - 1.0);
            for target in [CLASS_REAL, CLASS_FAKE] {
                let a = model.cam(img.view(), target).unwrap();
                let b = model.grad_cam(img.view(), target).unwrap();
                let diff = (a.data() - b.data())
                    .iter()
                    .fold(0.0f32, |m, v| m.max(v.abs()));
                assert!(diff <= 1e-5, "trial {trial} target {target}: diff {diff}");
            }
        }
    }

    #[test]
    fn maps_are_deterministic_and_bounded() {
        let model = passthrough_model();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let img = Array3::from_shape_fn((1, 16, 16), |_| rng.gen::<f32>());
            let a = model.grad_cam(img.view(), CLASS_FAKE).unwrap();
            let b = model.grad_cam(img.view(), CLASS_FAKE).unwrap();
            assert_eq!(a.data(), b.data());
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &v in a.data().iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            assert!(lo >= 0.0 && hi <= 1.0);
        }
    }

    #[test]
    fn degenerate_maps_are_all_zeros() {
        // Zero head weights: the target logit ignores every feature, so the
        // gradient (and the CAM weights) vanish and the map must be zeros.
        let mut rng = StdRng::seed_from_u64(5);
        let mut model = Highlighter::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        model
            .bank_mut()
            .value_mut_by_name("head.weight")
            .unwrap()
            .fill(0.0);
        model.set_trained(true);
        let img = Array3::from_shape_fn((1, 16, 16), |_| rng.gen::<f32>());
        let g = model.grad_cam(img.view(), CLASS_FAKE).unwrap();
        let c = model.cam(img.view(), CLASS_FAKE).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));

        // Spatially constant inputs are degenerate no matter the weights:
        // there is nothing to attribute, so the map is zeros by definition.
        let model = passthrough_model();
        for level in [0.0f32, 0.5, -0.3, 1.0] {
            let flat = Array3::from_elem((1, 16, 16), level);
            let g = model.grad_cam(flat.view(), CLASS_FAKE).unwrap();
            let c = model.cam(flat.view(), CLASS_FAKE).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0), "level {level}");
            assert!(c.data().iter().all(|&v| v == 0.0), "level {level}");
        }
    }

    #[test]
    fn untrained_model_is_rejected() {
        let mut rng = StdRng::seed_from_u64(1);
        let model = Highlighter::<f32>::new(tiny_cfg(), &mut rng).unwrap();
        let img = Array3::zeros((1, 16, 16));
        assert!(model.grad_cam(img.view(), CLASS_FAKE).is_err());
        assert!(model.cam(img.view(), CLASS_FAKE).is_err());
        let trained = passthrough_model();
        assert!(trained.grad_cam(img.view(), 2).is_err());
    }

    #[test]
    fn training_separates_corner_square_toy() {
        // Fake images carry a bright 4x4 corner square; otherwise identical
        // noise. A tiny classifier should nail the held-out split.
        let mut rng = StdRng::seed_from_u64(33);
        let n = 80;
        let real = Array4::from_shape_fn((n, 1, 16, 16), |_| rng.gen::<f32>() * 0.5);
        let mut fake = Array4::from_shape_fn((n, 1, 16, 16), |_| rng.gen::<f32>() * 0.5);
        for i in 0..n {
            for y in 0..4 {
                for x in 0..4 {
                    fake[[i, 0, y, x]] += 0.9;
                }
            }
        }
        let cfg = HighlighterConfig {
            stage_channels: vec![4, 8],
            epochs: 12,
            batch_size: 16,
            learning_rate: 1e-2,
            ..HighlighterConfig::default()
        };
        let mut train_rng = StdRng::seed_from_u64(34);
        let (model, acc) = train_highlighter::<f32, _>(&real, &fake, &cfg, &mut train_rng).unwrap();
        assert!(model.is_trained());
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }

    #[test]
    fn identical_distributions_stay_near_chance() {
        let mut rng = StdRng::seed_from_u64(40);
        let real = Array4::from_shape_fn((150, 1, 16, 16), |_| rng.gen::<f32>());
        let fake = Array4::from_shape_fn((150, 1, 16, 16), |_| rng.gen::<f32>());
        let cfg = HighlighterConfig {
            stage_channels: vec![4, 8],
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            ..HighlighterConfig::default()
        };
        let mut train_rng = StdRng::seed_from_u64(41);
        let (_, acc) = train_highlighter::<f32, _>(&real, &fake, &cfg, &mut train_rng).unwrap();
        assert!(
            (acc - 0.5).abs() <= 0.1,
            "indistinguishable classes scored {acc}"
        );
    }

    #[test]
    fn training_is_deterministic_and_validates_input() {
        let mut rng = StdRng::seed_from_u64(50);
        let real = Array4::from_shape_fn((12, 1, 16, 16), |_| rng.gen::<f32>());
        let fake = Array4::from_shape_fn((12, 1, 16, 16), |_| rng.gen::<f32>());
        let cfg = tiny_cfg();

        let (m1, a1) =
            train_highlighter::<f32, _>(&real, &fake, &cfg, &mut StdRng::seed_from_u64(9)).unwrap();
        let (m2, a2) =
            train_highlighter::<f32, _>(&real, &fake, &cfg, &mut StdRng::seed_from_u64(9)).unwrap();
        assert_eq!(a1, a2);
        for (v1, v2) in m1.bank().values().iter().zip(m2.bank().values()) {
            assert_eq!(v1, v2);
        }

        let empty = Array4::<f32>::zeros((0, 1, 16, 16));
        assert!(train_highlighter::<f32, _>(&empty, &fake, &cfg, &mut rng).is_err());
        let small = Array4::<f32>::zeros((4, 1, 8, 8));
        assert!(train_highlighter::<f32, _>(&real, &small, &cfg, &mut rng).is_err());
    }

    #[test]
    fn mean_fam_examples() {
        let a = Fam::new(Array2::zeros((4, 4))).unwrap();
        let b = Fam::new(Array2::ones((4, 4))).unwrap();
        let m = mean_fam(&[a.clone(), b]).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));

        let same = mean_fam(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same.data(), a.data());

        assert!(mean_fam(&[]).is_err());
        let c = Fam::zeros(2, 2);
        assert!(mean_fam(&[a, c]).is_err());
    }

    #[test]
    fn classifier_metrics_examples() {
        let m = classifier_metrics(&[true, false], &[0.9, 0.1]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.roc_auc, Some(1.0));

        let tied = classifier_metrics(&[true, false, true, false], &[0.4; 4]).unwrap();
        assert_eq!(tied.roc_auc, Some(0.5));

        let single = classifier_metrics(&[true, true], &[0.2, 0.9]).unwrap();
        assert_eq!(single.roc_auc, None);

        assert!(classifier_metrics(&[true], &[0.1, 0.2]).is_err());
        assert!(classifier_metrics(&[], &[]).is_err());
        assert!(classifier_metrics(&[true], &[f64::NAN]).is_err());
    }

    #[test]
    fn roc_auc_matches_pairwise_oracle() {
        let mut rng = StdRng::seed_from_u64(77);
        let labels: Vec<bool> = (0..100).map(|_| rng.gen::<f64>() < 0.4).collect();
        // Quantized scores force plenty of ties across classes.
        let scores: Vec<f64> = (0..100)
            .map(|_| (rng.gen::<f64>() * 10.0).floor() / 10.0)
            .collect();

        let mut ordered = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &yi) in labels.iter().enumerate() {
            if !yi {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    ordered += 1.0;
                } else if scores[i] == scores[j] {
                    ordered += 0.5;
                }
            }
        }
        let oracle = ordered / pairs;
        let m = classifier_metrics(&labels, &scores).unwrap();
        assert_eq!(m.roc_auc, Some(oracle));
    }

    #[test]
    fn config_validation() {
        assert!(HighlighterConfig::default().validate().is_ok());
        let one_stage = HighlighterConfig {
            stage_channels: vec![8],
            ..HighlighterConfig::default()
        };
        assert!(one_stage.validate().is_err());
        let indivisible = HighlighterConfig {
            image_size: 18,
            ..HighlighterConfig::default()
        };
        assert!(indivisible.validate().is_err());
        let bad_holdout = HighlighterConfig {
            holdout_fraction: 1.0,
            ..HighlighterConfig::default()
        };
        assert!(bad_holdout.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Mean of a concatenation equals the size-weighted mean of the part
        /// means. Power-of-two list sizes and dyadic-rational values keep
        /// every operation exact in f32, so the identity holds to 1e-12.
        #[test]
        fn mean_fam_is_size_weighted_linear(
            pow in 1usize..=3,
            seed in 0u64..1000,
        ) {
            let total = 1usize << pow;
            let mut rng = StdRng::seed_from_u64(seed);
            let maps: Vec<Fam> = (0..total)
                .map(|_| {
                    let d = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0u16..=256) as f32 / 256.0);
                    Fam::new(d).unwrap()
                })
                .collect();
            let (a, b) = maps.split_at(total / 2);

            let whole = mean_fam(&maps).unwrap();
            let ma = mean_fam(a).unwrap();
            let mb = mean_fam(b).unwrap();
            let wa = a.len() as f64;
            let wb = b.len() as f64;
            for ((y, x), &v) in whole.data().indexed_iter() {
                let expect = (wa * ma.data()[[y, x]] as f64 + wb * mb.data()[[y, x]] as f64)
                    / (wa + wb);
                prop_assert!((v as f64 - expect).abs() <= 1e-12);
            }
        }

        #[test]
        fn mean_fam_matches_per_pixel_oracle(
            grids in proptest::collection::vec(
                proptest::collection::vec(0.0f32..=1.0, 9),
                1..=6,
            ),
        ) {
            let maps: Vec<Fam> = grids
                .iter()
                .map(|g| Fam::new(Array2::from_shape_vec((3, 3), g.clone()).unwrap()).unwrap())
                .collect();
            let m = mean_fam(&maps).unwrap();
            for ((y, x), &v) in m.data().indexed_iter() {
                let oracle: f64 =
                    grids.iter().map(|g| g[y * 3 + x] as f64).sum::<f64>() / grids.len() as f64;
                prop_assert!((v as f64 - oracle).abs() <= 1e-6);
            }
        }
    }
}
