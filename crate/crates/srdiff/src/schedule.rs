//! Variance schedule for the diffusion process.
//!
//! A [`NoiseSchedule`] holds the per-step noise variances `beta_t` of the
//! forward process together with the derived quantities every other module
//! needs: `alpha_t = 1 - beta_t` and the running products `alpha_bar_t`
//! that give the closed-form marginal `x_t = sqrt(alpha_bar_t) x_0 +
//! sqrt(1 - alpha_bar_t) eps`. All derivations are done in `f64` and
//! converted once, so an `f32` schedule is the rounded image of the `f64`
//! one rather than an accumulation of single-precision error.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Configuration for a linear variance schedule.
///
/// The defaults suit short desk-scale chains: with 200 steps, an endpoint
/// of 0.1 drives `alpha_bar` at the final step below 1e-4 so that the
/// terminal marginal is indistinguishable from pure noise. (The classic
/// 0.02 endpoint only achieves that over 1000 steps.)
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    /// Number of diffusion steps `T`.
    pub t_steps: usize,
    /// Variance of the first step.
    pub beta_start: f64,
    /// Variance of the last step.
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

/// Precomputed linear variance schedule.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<F: Scalar> {
    pub betas: Vec<F>,
    pub alphas: Vec<F>,
    pub alpha_bars: Vec<F>,
    pub sqrt_alpha_bars: Vec<F>,
    pub sqrt_one_minus_alpha_bars: Vec<F>,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Linear schedule from `beta_start` to `beta_end` (inclusive endpoints)
    /// over `t_steps` steps. Timesteps are 0-based throughout the crate.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        for (name, v) in [("beta_start", beta_start), ("beta_end", beta_end)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if beta_start > beta_end {
            return Err(Error::InvalidArgument(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        if t_steps == 1 {
            betas.push(beta_start);
        } else {
            let step = (beta_end - beta_start) / (t_steps - 1) as f64;
            for i in 0..t_steps {
                betas.push(beta_start + step * i as f64);
            }
        }
        let mut alphas = Vec::with_capacity(t_steps);
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut running = 1.0f64;
        for &b in &betas {
            let a = 1.0 - b;
            running *= a;
            alphas.push(a);
            alpha_bars.push(running);
        }
        Ok(NoiseSchedule {
            sqrt_alpha_bars: alpha_bars.iter().map(|&v| F::from_f64(v.sqrt())).collect(),
            sqrt_one_minus_alpha_bars: alpha_bars
                .iter()
                .map(|&v| F::from_f64((1.0 - v).sqrt()))
                .collect(),
            betas: betas.into_iter().map(F::from_f64).collect(),
            alphas: alphas.into_iter().map(F::from_f64).collect(),
            alpha_bars: alpha_bars.into_iter().map(F::from_f64).collect(),
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linspace_hits_both_endpoints() {
        let s = NoiseSchedule::<f64>::linear(50, 1e-4, 0.02).unwrap();
        assert!((s.betas[0] - 1e-4).abs() < 1e-15);
        assert!((s.betas[49] - 0.02).abs() < 1e-15);
        // interior spacing is uniform
        let d = s.betas[1] - s.betas[0];
        for w in s.betas.windows(2) {
            assert!((w[1] - w[0] - d).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_bar_is_running_product() {
        let s = NoiseSchedule::<f64>::linear(20, 1e-3, 0.1).unwrap();
        let mut prod = 1.0;
        for t in 0..20 {
            prod *= 1.0 - s.betas[t];
            assert!((s.alpha_bars[t] - prod).abs() < 1e-15);
            assert!((s.sqrt_alpha_bars[t] - prod.sqrt()).abs() < 1e-15);
            assert!((s.sqrt_one_minus_alpha_bars[t] - (1.0 - prod).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::<f32>::linear(1, 0.05, 0.9).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s.betas[0] - 0.05).abs() < 1e-7);
    }

    #[test]
    fn default_config_ends_near_pure_noise() {
        let cfg = ScheduleConfig::default();
        let s = NoiseSchedule::<f64>::from_config(&cfg).unwrap();
        assert!(
            s.alpha_bars[cfg.t_steps - 1] < 1e-3,
            "terminal alpha_bar {} too large for sampling from pure noise",
            s.alpha_bars[cfg.t_steps - 1]
        );
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::<f64>::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, -0.1, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decreasing_in_unit_interval(
            t_steps in 1usize..400,
            beta_start in 1e-6f64..0.01,
            spread in 0.0f64..0.5,
        ) {
            let beta_end = (beta_start + spread).min(0.999);
            let s = NoiseSchedule::<f64>::linear(t_steps, beta_start, beta_end).unwrap();
            for t in 0..t_steps {
                prop_assert!(s.alpha_bars[t] > 0.0 && s.alpha_bars[t] < 1.0);
                if t > 0 {
                    prop_assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
                    prop_assert!((s.alpha_bars[t] - s.alpha_bars[t-1] * s.alphas[t]).abs() < 1e-15);
                }
            }
        }
    }
}
