//! Forward and reverse diffusion processes.
//!
//! The forward direction noises an image in closed form,
//! `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`, optionally with
//! the self-refining twist: the injected noise is shifted by a flaw
//! activation map, `eps_sr = eps + lambda * m`, so regions the flaw
//! highlighter flags get extra noise pressure during training. The reverse
//! direction is plain ancestral DDPM sampling — generation itself never
//! consumes a flaw map; the refinement signal only enters through training.
//!
//! Timesteps are 0-based everywhere: `t` ranges over `0..T` and indexes the
//! schedule arrays directly.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Arr, Scalar};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Standard-normal tensor. Values are drawn in `f64` and converted, so the
/// RNG consumes the same number of draws regardless of the element type.
pub fn randn<F: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Arr<F> {
    Arr::from_shape_fn(IxDyn(shape), |_| {
        F::from_f64(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Closed-form forward marginal: noise `x0` directly to step `t`.
pub fn forward_sample<F: Scalar>(
    x0: &Arr<F>,
    eps: &Arr<F>,
    t: usize,
    sched: &NoiseSchedule<F>,
) -> Result<Arr<F>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "forward_sample: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if t >= sched.len() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} out of range for {}-step schedule",
            sched.len()
        )));
    }
    let a = sched.sqrt_alpha_bars[t];
    let b = sched.sqrt_one_minus_alpha_bars[t];
    let mut out = x0.mapv(|v| v * a);
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| *o += e * b);
    Ok(out)
}

/// Forward marginal with a per-sample timestep: batch element `i` of the
/// `[B, ...]` tensors is noised to `ts[i]`.
pub fn forward_sample_batch<F: Scalar>(
    x0: &Arr<F>,
    eps: &Arr<F>,
    ts: &[usize],
    sched: &NoiseSchedule<F>,
) -> Result<Arr<F>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "forward_sample_batch: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if x0.ndim() < 2 || x0.shape()[0] != ts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} timesteps for batch shape {:?}",
            ts.len(),
            x0.shape()
        )));
    }
    if let Some(&bad) = ts.iter().find(|&&t| t >= sched.len()) {
        return Err(Error::InvalidArgument(format!(
            "timestep {bad} out of range for {}-step schedule",
            sched.len()
        )));
    }
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let a = sched.sqrt_alpha_bars[t];
        let b = sched.sqrt_one_minus_alpha_bars[t];
        let mut row = out.index_axis_mut(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut row)
            .and(eps.index_axis(ndarray::Axis(0), i))
            .for_each(|o, &e| *o = *o * a + e * b);
    }
    Ok(out)
}

/// Shift noise toward flagged regions: `eps_sr = eps + lambda * m`.
///
/// `m` is a single-channel map `[H, W]` in `[0, 1]` broadcast over the
/// leading axes of `eps` (`[..., H, W]`). With `lambda == 0` the input is
/// returned unchanged, bit for bit, so a zero-weight refinement run is
/// exactly a baseline run.
pub fn sr_noise<F: Scalar>(eps: &Arr<F>, m: &Arr<F>, lambda: F) -> Result<Arr<F>> {
    if m.ndim() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "flaw map must be 2-d, got {:?}",
            m.shape()
        )));
    }
    if eps.ndim() < 2 || eps.shape()[eps.ndim() - 2..] != *m.shape() {
        return Err(Error::ShapeMismatch(format!(
            "trailing dims of eps {:?} must match flaw map {:?}",
            eps.shape(),
            m.shape()
        )));
    }
    if lambda == F::zero() {
        return Ok(eps.clone());
    }
    let mut shape = vec![1usize; eps.ndim()];
    let d = eps.ndim();
    shape[d - 2] = m.shape()[0];
    shape[d - 1] = m.shape()[1];
    let m_lead = m
        .view()
        .into_shape(IxDyn(&shape))
        .expect("flaw map reshape");
    let mut out = eps.clone();
    let mb = m_lead.broadcast(eps.raw_dim()).expect("flaw map broadcast");
    ndarray::Zip::from(&mut out)
        .and(&mb)
        .for_each(|o, &mv| *o += lambda * mv);
    Ok(out)
}

/// Posterior mean of one ancestral reverse step given a noise prediction.
pub fn reverse_mean<F: Scalar>(
    x_t: &Arr<F>,
    eps_hat: &Arr<F>,
    t: usize,
    sched: &NoiseSchedule<F>,
) -> Result<Arr<F>> {
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reverse_mean: x_t {:?} vs eps_hat {:?}",
            x_t.shape(),
            eps_hat.shape()
        )));
    }
    if t >= sched.len() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} out of range for {}-step schedule",
            sched.len()
        )));
    }
    let coeff = sched.betas[t] / sched.sqrt_one_minus_alpha_bars[t];
    let inv_sqrt_alpha = F::one() / sched.alphas[t].sqrt();
    let mut out = x_t.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_hat)
        .for_each(|o, &e| *o = (*o - coeff * e) * inv_sqrt_alpha);
    Ok(out)
}

/// One ancestral reverse step `x_t -> x_{t-1}` with noise `z` (variance
/// `beta_t`). At `t == 0` the mean is returned and `z` is ignored.
pub fn reverse_step<F: Scalar>(
    x_t: &Arr<F>,
    eps_hat: &Arr<F>,
    t: usize,
    z: Option<&Arr<F>>,
    sched: &NoiseSchedule<F>,
) -> Result<Arr<F>> {
    let mut out = reverse_mean(x_t, eps_hat, t, sched)?;
    if t > 0 {
        let z = z.ok_or_else(|| {
            Error::InvalidArgument(format!("reverse_step at t={t} requires noise"))
        })?;
        if z.shape() != x_t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "reverse_step: z {:?} vs x_t {:?}",
                z.shape(),
                x_t.shape()
            )));
        }
        let sigma = sched.betas[t].sqrt();
        ndarray::Zip::from(&mut out).and(z).for_each(|o, &zv| *o += sigma * zv);
    }
    Ok(out)
}

/// Anything that can predict the noise component of `x_t` at step `t`.
///
/// Implemented by the denoiser; test code substitutes closures via
/// [`FnPredictor`].
pub trait NoisePredictor<F: Scalar> {
    fn predict_noise(&self, x_t: &Arr<F>, t: usize) -> Arr<F>;
}

/// Adapter turning a closure into a [`NoisePredictor`].
pub struct FnPredictor<G>(pub G);

impl<F: Scalar, G: Fn(&Arr<F>, usize) -> Arr<F>> NoisePredictor<F> for FnPredictor<G> {
    fn predict_noise(&self, x_t: &Arr<F>, t: usize) -> Arr<F> {
        self.0(x_t, t)
    }
}

/// Run the reverse chain from pure noise down to `x_0`.
///
/// `shape` is the full tensor shape (e.g. `[B, C, H, W]`).
pub fn sample<F: Scalar, M: NoisePredictor<F> + ?Sized, R: Rng>(
    model: &M,
    sched: &NoiseSchedule<F>,
    shape: &[usize],
    rng: &mut R,
) -> Result<Arr<F>> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "sample shape {shape:?} has no elements"
        )));
    }
    let x_start = randn(shape, rng);
    sample_from(model, sched, x_start, sched.len() - 1, rng)
}

/// Run the reverse chain from a given state `x_{t_start}` down to `x_0`.
///
/// Used by the trainer to cut refresh-sampling cost: noise a real image to
/// a mid-chain step and denoise from there instead of from pure noise.
pub fn sample_from<F: Scalar, M: NoisePredictor<F> + ?Sized, R: Rng>(
    model: &M,
    sched: &NoiseSchedule<F>,
    x_start: Arr<F>,
    t_start: usize,
    rng: &mut R,
) -> Result<Arr<F>> {
    if t_start >= sched.len() {
        return Err(Error::InvalidArgument(format!(
            "t_start {t_start} out of range for {}-step schedule",
            sched.len()
        )));
    }
    let mut x = x_start;
    for t in (0..=t_start).rev() {
        let eps_hat = model.predict_noise(&x, t);
        let z = if t > 0 {
            Some(randn::<F, _>(x.shape(), rng))
        } else {
            None
        };
        x = reverse_step(&x, &eps_hat, t, z.as_ref(), sched)?;
    }
    Ok(x)
}
