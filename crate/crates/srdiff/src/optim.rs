//! Adam optimizer over a flat list of parameter tensors.
//!
//! Bias-corrected first/second moment estimates with fixed hyperparameters;
//! the moment buffers are exposed so the trainer can checkpoint them and
//! resume a run bitwise-identically.

use crate::autodiff::{Arr, Scalar};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct Adam<F: Scalar> {
    lr: F,
    m: Vec<Arr<F>>,
    v: Vec<Arr<F>>,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    /// Optimizer state shaped after `params`.
    pub fn new(lr: f64, params: &[Arr<F>]) -> Self {
        Adam {
            lr: F::from_f64(lr),
            m: params.iter().map(|p| Arr::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Arr::zeros(p.raw_dim())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers, for checkpointing.
    pub fn state(&self) -> (&[Arr<F>], &[Arr<F>]) {
        (&self.m, &self.v)
    }

    /// Restore moment buffers and step counter from a checkpoint.
    pub fn restore(&mut self, m: Vec<Arr<F>>, v: Vec<Arr<F>>, step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state has {}/{} tensors, expected {}",
                m.len(),
                v.len(),
                self.m.len()
            )));
        }
        for (a, b) in m.iter().zip(self.m.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(
                    "optimizer moment shape mismatch".into(),
                ));
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// Apply one update. `grads[i]` may be `None` for parameters that did
    /// not participate in the loss (they are left untouched).
    pub fn update(&mut self, params: &mut [Arr<F>], grads: &[Option<Arr<F>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} params, {} grads, optimizer sized for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let b1 = F::from_f64(BETA1);
        let b2 = F::from_f64(BETA2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - BETA1.powi(self.step as i32));
        let bc2 = F::from_f64(1.0 - BETA2.powi(self.step as i32));
        let eps = F::from_f64(EPS);
        for i in 0..params.len() {
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            if g.shape() != params[i].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "grad {:?} vs param {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = b1 * *mv + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            });
            let lr = self.lr;
            ndarray::Zip::from(&mut params[i])
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
