//! Dual-phase training orchestration.
//!
//! A run begins with a base phase (standard denoising objective), trains the
//! flaw highlighter at the phase boundary on real images versus fresh model
//! samples, then enters refinement: the mean flaw map is refreshed from new
//! samples on a fixed cycle and drives both the forward noise shift and the
//! attention modulation of every optimization step until the next refresh.
//!
//! Determinism contract: all training-batch draws (indices, timesteps, noise)
//! come from one RNG stream and all auxiliary draws (highlighter training,
//! refresh sampling) from a second, so a zero-weight refinement run replays a
//! pure-baseline run bit for bit.

use crate::autodiff::{ensure_finite, Arr, Scalar, Tape, Var};
use crate::checkpoint::{arr_from_blob, blob_from_arr, Checkpoint};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{forward_sample_batch, randn, reverse_step, sr_noise};
use crate::error::{Error, Result};
use crate::fam::Fam;
use crate::guidance::{guidance_map, GuidanceKind};
use crate::highlighter::{mean_fam, train_highlighter, Highlighter, HighlighterConfig};
use crate::optim::Adam;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use ndarray::{Array4, Ix2, Ix4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Upper bound on model samples drawn for boundary highlighter training;
/// the real side is subsampled to the same count so classes stay balanced.
const MAX_HIGHLIGHTER_FAKES: usize = 128;

/// Hyperparameters of one training run. The first nine keys are the
/// run-defining ones; the rest have defaults and configure the nested
/// schedule, the boundary highlighter, and artifact emission.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Total optimization steps.
    pub total_steps: usize,
    /// Steps spent in the base phase (standard objective, no flaw maps).
    pub base_steps: usize,
    /// Refinement steps between mean-flaw-map refreshes.
    pub cycle: usize,
    /// Forward-process shift weight on the mean flaw map.
    pub lambda_fwd: f64,
    /// Attention key/value modulation weight.
    pub lambda_rev: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Samples drawn per refresh to build the mean flaw map.
    pub refresh_sample_count: usize,
    pub schedule: ScheduleConfig,
    /// Map steering refinement; the learned flaw map unless ablating.
    pub guidance: GuidanceKind,
    /// Architecture used by the command-line entry points; library callers
    /// pass a configuration to [`run_training`] directly.
    pub denoiser: crate::denoiser::DenoiserConfig,
    /// Boundary classifier settings; image size and channels are taken from
    /// the denoiser configuration, not from here.
    pub highlighter: HighlighterConfig,
    /// Reverse steps used when sampling for refreshes and highlighter
    /// training; `None` runs the full chain.
    pub refresh_sample_steps: Option<usize>,
    /// Emit a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 40_000,
            base_steps: 20_000,
            cycle: 100,
            lambda_fwd: 0.01,
            lambda_rev: 0.025,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            refresh_sample_count: 16,
            schedule: ScheduleConfig::default(),
            guidance: GuidanceKind::Fam,
            denoiser: DenoiserConfig::default(),
            highlighter: HighlighterConfig::default(),
            refresh_sample_steps: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_steps > self.total_steps {
            return Err(Error::Config(format!(
                "base_steps {} exceeds total_steps {}",
                self.base_steps, self.total_steps
            )));
        }
        if self.cycle == 0 {
            return Err(Error::Config("cycle must be at least 1".into()));
        }
        for (name, v) in [("lambda_fwd", self.lambda_fwd), ("lambda_rev", self.lambda_rev)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.refresh_sample_count == 0 {
            return Err(Error::Config("refresh_sample_count must be positive".into()));
        }
        if let Some(steps) = self.refresh_sample_steps {
            if steps == 0 || steps > self.schedule.t_steps {
                return Err(Error::Config(format!(
                    "refresh_sample_steps {steps} outside 1..={}",
                    self.schedule.t_steps
                )));
            }
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::Config(
                "checkpoint_every is set but checkpoint_dir is missing".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Which half of the dual-phase schedule a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Base,
    Refine,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Refine => "refine",
        }
    }
}

/// Phase of a step: base strictly before `base_steps`, refinement after.
pub fn phase_of(step: usize, cfg: &TrainConfig) -> Result<Phase> {
    if step >= cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside the {}-step run",
            cfg.total_steps
        )));
    }
    Ok(if step < cfg.base_steps {
        Phase::Base
    } else {
        Phase::Refine
    })
}

/// Whether the mean flaw map is rebuilt at this step: refinement steps at
/// whole-cycle offsets from the phase boundary, starting with the boundary.
pub fn refresh_due(step: usize, cfg: &TrainConfig) -> Result<bool> {
    Ok(phase_of(step, cfg)? == Phase::Refine && (step - cfg.base_steps) % cfg.cycle == 0)
}

/// Every step at which a refresh fires, in order.
pub fn refresh_steps(cfg: &TrainConfig) -> Vec<usize> {
    (cfg.base_steps..cfg.total_steps)
        .step_by(cfg.cycle.max(1))
        .collect()
}

/// The map currently steering refinement, stamped with its refresh step.
/// Both are absent during the base phase and never afterwards.
#[derive(Debug, Clone, Default)]
pub struct CycleState {
    pub mfam: Option<Fam>,
    pub last_refresh: Option<u64>,
}

/// One optimization step as it appears in the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub refreshed: bool,
}

impl LogRecord {
    /// `step phase loss refresh-flag` — float printed with round-trip
    /// precision so the trace can be compared exactly across runs.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {}",
            self.step,
            self.phase.as_str(),
            self.loss,
            u8::from(self.refreshed)
        )
    }
}

/// Write the metrics log, one line per step.
pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", r.to_line())?;
    }
    out.flush()?;
    Ok(())
}

/// A recorded loss computation: the tape, the parameter vars in bank order,
/// the prediction, and the scalar loss node.
pub struct LossGraph<F: Scalar> {
    pub tape: Tape<F>,
    pub params: Vec<Var>,
    pub output: Var,
    pub loss: Var,
}

impl<F: Scalar> LossGraph<F> {
    pub fn loss_value(&self) -> F {
        *self
            .tape
            .value(self.loss)
            .iter()
            .next()
            .expect("loss is scalar")
    }
}

/// Record the self-refining denoising loss on a fresh tape.
///
/// The target noise is `eps + lambda_fwd * mfam`, the input is the forward
/// marginal of `x0` under that shifted noise at per-sample steps `ts`, and
/// the prediction runs with attention modulated by `(mfam, lambda_rev)`.
/// Without a map this is exactly the standard objective; so is the
/// zero-weight case, bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn sr_loss_graph<F: Scalar>(
    model: &Denoiser<F>,
    x0: &Arr<F>,
    ts: &[usize],
    eps: &Arr<F>,
    mfam: Option<&Fam>,
    lambda_fwd: F,
    lambda_rev: F,
    sched: &NoiseSchedule<F>,
) -> Result<LossGraph<F>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let eps_sr = match mfam {
        Some(m) => sr_noise(eps, &m.to_arr::<F>(), lambda_fwd)?,
        None => eps.clone(),
    };
    let x_t = forward_sample_batch(x0, &eps_sr, ts, sched)?;
    let mut tape = Tape::new();
    let (params, output) = model.forward(&mut tape, &x_t, ts, mfam.map(|m| (m, lambda_rev)))?;
    let target = tape.constant(eps_sr);
    let diff = tape.sub(output, target);
    let sq = tape.mul(diff, diff);
    let loss = tape.mean_all(sq);
    ensure_finite(tape.value(loss), "training loss")?;
    Ok(LossGraph {
        tape,
        params,
        output,
        loss,
    })
}

/// Scalar value of the self-refining loss (convenience over [`sr_loss_graph`]).
#[allow(clippy::too_many_arguments)]
pub fn sr_loss<F: Scalar>(
    model: &Denoiser<F>,
    x0: &Arr<F>,
    ts: &[usize],
    eps: &Arr<F>,
    mfam: Option<&Fam>,
    lambda_fwd: F,
    lambda_rev: F,
    sched: &NoiseSchedule<F>,
) -> Result<F> {
    Ok(sr_loss_graph(model, x0, ts, eps, mfam, lambda_fwd, lambda_rev, sched)?.loss_value())
}

/// Reverse chain that propagates model errors instead of panicking; draw
/// order matches [`crate::diffusion::sample`] exactly.
pub(crate) fn sample_checked<F: Scalar, R: Rng>(
    model: &Denoiser<F>,
    sched: &NoiseSchedule<F>,
    count: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Arr<F>> {
    if steps == 0 || steps > sched.len() {
        return Err(Error::InvalidArgument(format!(
            "sample steps {steps} outside 1..={}",
            sched.len()
        )));
    }
    let cfg = model.config();
    let mut x = randn::<F, _>(
        &[count, cfg.in_channels, cfg.image_size, cfg.image_size],
        rng,
    );
    for t in (0..steps).rev() {
        let eps_hat = model.predict(&x, t, None)?;
        let z = if t > 0 {
            Some(randn::<F, _>(x.shape(), rng))
        } else {
            None
        };
        x = reverse_step(&x, &eps_hat, t, z.as_ref(), sched)?;
    }
    Ok(x)
}

pub(crate) fn to_f32_batch<F: Scalar>(x: &Arr<F>) -> Result<Array4<f32>> {
    x.mapv(|v| v.to_f64() as f32)
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Rebuild the mean flaw map: draw `count` fresh samples, extract each
/// sample's flaw activation map for the fake class, and average. Sampling
/// runs the full chain unless `sample_steps` truncates it.
pub fn refresh_mfam<F: Scalar, R: Rng>(
    model: &Denoiser<F>,
    sched: &NoiseSchedule<F>,
    highlighter: &Highlighter<F>,
    count: usize,
    sample_steps: Option<usize>,
    rng: &mut R,
) -> Result<Fam> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "refresh needs at least one sample".into(),
        ));
    }
    let steps = sample_steps.unwrap_or_else(|| sched.len());
    let samples = sample_checked(model, sched, count, steps, rng)?;
    let maps = highlighter.fams(&to_f32_batch(&samples)?)?;
    mean_fam(&maps)
}

/// Everything a finished run hands back.
pub struct TrainOutput<F: Scalar> {
    pub model: Denoiser<F>,
    /// Present whenever the run entered refinement.
    pub highlighter: Option<Highlighter<F>>,
    /// Held-out accuracy from boundary highlighter training.
    pub highlighter_holdout_accuracy: Option<f64>,
    pub log: Vec<LogRecord>,
    /// The map in force at the last refinement step.
    pub final_mfam: Option<Fam>,
}

/// Train from scratch. See the module docs for the phase structure.
pub fn run_training<F: Scalar>(
    cfg: &TrainConfig,
    dataset: &Array4<f32>,
    denoiser_cfg: &DenoiserConfig,
) -> Result<TrainOutput<F>> {
    run_training_inner(cfg, dataset, denoiser_cfg, None)
}

/// Resume a checkpointed run: restores parameters, optimizer moments, both
/// RNG streams, the highlighter, and the current mean flaw map, then
/// continues to `total_steps`. The resumed trajectory is bit-identical to
/// the uninterrupted one.
pub fn resume_training<F: Scalar>(
    cfg: &TrainConfig,
    dataset: &Array4<f32>,
    denoiser_cfg: &DenoiserConfig,
    checkpoint_path: &Path,
) -> Result<TrainOutput<F>> {
    let ck = Checkpoint::load(checkpoint_path)?;
    run_training_inner(cfg, dataset, denoiser_cfg, Some(ck))
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint<F: Scalar>(
    path: &Path,
    next_step: usize,
    model: &Denoiser<F>,
    sched_cfg: &ScheduleConfig,
    opt: &Adam<F>,
    rng_train: &ChaCha8Rng,
    rng_aux: &ChaCha8Rng,
    highlighter: Option<&Highlighter<F>>,
    cycle: &CycleState,
) -> Result<()> {
    let mut ck = Checkpoint::new(next_step as u64);
    ck.store_bank("model", model.bank());
    crate::checkpoint::embed_model_meta(&mut ck, model.config(), sched_cfg)?;
    let (m, v) = opt.state();
    for (name, (mi, vi)) in model.bank().names().iter().zip(m.iter().zip(v.iter())) {
        ck.push_blob(&format!("adam_m/{name}"), blob_from_arr(mi));
        ck.push_blob(&format!("adam_v/{name}"), blob_from_arr(vi));
    }
    ck.meta
        .insert("adam.step".into(), opt.step_count().to_string());
    ck.store_rng("train", rng_train);
    ck.store_rng("aux", rng_aux);
    if let Some(hl) = highlighter {
        ck.meta.insert("highlighter.trained".into(), "1".into());
        ck.store_bank("highlighter", hl.bank());
    } else {
        ck.meta.insert("highlighter.trained".into(), "0".into());
    }
    if let Some(fam) = &cycle.mfam {
        ck.push_blob("mfam", fam.data().clone().into_dyn());
        ck.meta.insert(
            "mfam.last_refresh".into(),
            cycle.last_refresh.unwrap_or(0).to_string(),
        );
    }
    ck.save(path)
}

fn run_training_inner<F: Scalar>(
    cfg: &TrainConfig,
    dataset: &Array4<f32>,
    denoiser_cfg: &DenoiserConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    denoiser_cfg.validate()?;
    let n = dataset.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let (c, h, w) = (dataset.shape()[1], dataset.shape()[2], dataset.shape()[3]);
    if c != denoiser_cfg.in_channels || h != denoiser_cfg.image_size || w != denoiser_cfg.image_size
    {
        return Err(Error::ShapeMismatch(format!(
            "dataset images {c}x{h}x{w} vs configured {}x{}x{}",
            denoiser_cfg.in_channels, denoiser_cfg.image_size, denoiser_cfg.image_size
        )));
    }
    let sched = NoiseSchedule::<F>::from_config(&cfg.schedule)?;
    let mut hl_cfg = cfg.highlighter.clone();
    hl_cfg.image_size = denoiser_cfg.image_size;
    hl_cfg.in_channels = denoiser_cfg.in_channels;

    // Stream 0 feeds training batches, stream 1 everything auxiliary, and
    // stream 2 is burned on initialization; this is what makes zero-weight
    // refinement replay the baseline exactly.
    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_init.set_stream(2);
    let mut rng_train = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_train.set_stream(0);
    let mut rng_aux = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_aux.set_stream(1);

    let mut model = Denoiser::<F>::new(denoiser_cfg.clone(), &mut rng_init)?;
    let mut opt = Adam::new(cfg.learning_rate, model.bank().values());
    let mut highlighter: Option<Highlighter<F>> = None;
    let mut holdout_acc: Option<f64> = None;
    let mut cycle = CycleState::default();
    let mut start_step = 0usize;

    if let Some(ck) = resume {
        start_step = ck.step as usize;
        if start_step > cfg.total_steps {
            return Err(Error::InvalidArgument(format!(
                "checkpoint step {start_step} beyond total_steps {}",
                cfg.total_steps
            )));
        }
        ck.restore_bank("model", model.bank_mut())?;
        let mut m = Vec::with_capacity(model.bank().len());
        let mut v = Vec::with_capacity(model.bank().len());
        for name in model.bank().names() {
            for (list, kind) in [(&mut m, "adam_m"), (&mut v, "adam_v")] {
                let blob = ck
                    .blob(&format!("{kind}/{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint missing {kind}/{name}")))?;
                list.push(arr_from_blob::<F>(blob));
            }
        }
        let opt_step = ck
            .meta
            .get("adam.step")
            .ok_or_else(|| Error::Format("checkpoint missing adam.step".into()))?
            .parse::<u64>()
            .map_err(|e| Error::Format(format!("bad adam.step: {e}")))?;
        opt.restore(m, v, opt_step)?;
        rng_train = ck.load_rng("train")?;
        rng_aux = ck.load_rng("aux")?;
        if ck.meta.get("highlighter.trained").map(String::as_str) == Some("1") {
            let mut throwaway = ChaCha8Rng::seed_from_u64(0);
            let mut hl = Highlighter::<F>::new(hl_cfg.clone(), &mut throwaway)?;
            ck.restore_bank("highlighter", hl.bank_mut())?;
            hl.set_trained(true);
            highlighter = Some(hl);
        }
        if let Some(blob) = ck.blob("mfam") {
            let data = blob
                .clone()
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::Format(format!("mfam blob: {e}")))?;
            cycle.mfam = Some(Fam::new(data)?);
            cycle.last_refresh = ck
                .meta
                .get("mfam.last_refresh")
                .and_then(|s| s.parse().ok());
        }
    }

    let sample_steps = cfg.refresh_sample_steps.unwrap_or_else(|| sched.len());
    let mut log = Vec::with_capacity(cfg.total_steps - start_step);
    for step in start_step..cfg.total_steps {
        let phase = phase_of(step, cfg)?;

        if cfg.guidance == GuidanceKind::Fam && phase == Phase::Refine && highlighter.is_none() {
            // Phase boundary: fit the highlighter on real images vs fresh
            // samples from the model as it stands.
            let n_fake = n.min(MAX_HIGHLIGHTER_FAKES);
            let fakes = sample_checked(&model, &sched, n_fake, sample_steps, &mut rng_aux)?;
            let real = if n > n_fake {
                let mut rows = Array4::<f32>::zeros((n_fake, c, h, w));
                for i in 0..n_fake {
                    let pick = rng_aux.gen_range(0..n);
                    rows.index_axis_mut(ndarray::Axis(0), i)
                        .assign(&dataset.index_axis(ndarray::Axis(0), pick));
                }
                rows
            } else {
                dataset.clone()
            };
            let (hl, acc) =
                train_highlighter::<F, _>(&real, &to_f32_batch(&fakes)?, &hl_cfg, &mut rng_aux)?;
            highlighter = Some(hl);
            holdout_acc = Some(acc);
        }

        let refreshed = refresh_due(step, cfg)?;
        if refreshed {
            cycle.mfam = Some(match cfg.guidance {
                GuidanceKind::Fam => {
                    let hl = highlighter.as_ref().expect("highlighter trained at boundary");
                    refresh_mfam(
                        &model,
                        &sched,
                        hl,
                        cfg.refresh_sample_count,
                        cfg.refresh_sample_steps,
                        &mut rng_aux,
                    )?
                }
                GuidanceKind::Edge => {
                    let samples = sample_checked(
                        &model,
                        &sched,
                        cfg.refresh_sample_count,
                        sample_steps,
                        &mut rng_aux,
                    )?;
                    guidance_map(GuidanceKind::Edge, &to_f32_batch(&samples)?)?
                }
                fixed => {
                    let dummy = Array4::<f32>::zeros((1, c, h, w));
                    guidance_map(fixed, &dummy)?
                }
            });
            cycle.last_refresh = Some(step as u64);
        }
        if phase == Phase::Refine && cycle.mfam.is_none() {
            return Err(Error::InvalidArgument(format!(
                "refinement step {step} has no mean flaw map; resume state is inconsistent"
            )));
        }

        // Training batch: indices, per-sample timesteps, then noise — the
        // draw order is part of the determinism contract.
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng_train.gen_range(0..n)).collect();
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng_train.gen_range(0..sched.len()))
            .collect();
        let eps = randn::<F, _>(&[cfg.batch_size, c, h, w], &mut rng_train);
        let x0 = Arr::<F>::from_shape_fn(IxDyn(&[cfg.batch_size, c, h, w]), |ix| {
            F::from_f64(dataset[[idx[ix[0]], ix[1], ix[2], ix[3]]] as f64)
        });

        let (mfam, lf, lr) = match phase {
            Phase::Base => (None, F::zero(), F::zero()),
            Phase::Refine => (
                cycle.mfam.as_ref(),
                F::from_f64(cfg.lambda_fwd),
                F::from_f64(cfg.lambda_rev),
            ),
        };
        let graph = sr_loss_graph(&model, &x0, &ts, &eps, mfam, lf, lr, &sched).map_err(|e| {
            match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
                other => other,
            }
        })?;
        let loss = graph.loss_value().to_f64();
        let grads = graph.tape.backward(graph.loss);
        let grad_list: Vec<Option<Arr<F>>> = graph
            .params
            .iter()
            .map(|&p| grads.get(p).cloned())
            .collect();
        opt.update(model.bank_mut().values_mut(), &grad_list)?;

        log.push(LogRecord {
            step,
            phase,
            loss,
            refreshed,
        });

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            let dir = cfg.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("ckpt-{:07}.srdf", step + 1));
            save_checkpoint(
                &path,
                step + 1,
                &model,
                &cfg.schedule,
                &opt,
                &rng_train,
                &rng_aux,
                highlighter.as_ref(),
                &cycle,
            )?;
        }
    }

    Ok(TrainOutput {
        model,
        highlighter,
        highlighter_holdout_accuracy: holdout_acc,
        log,
        final_mfam: cycle.mfam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::sample;
    use crate::highlighter::CLASS_FAKE;
    use ndarray::Array2;

    fn tiny_denoiser_cfg() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            in_channels: 1,
            base_channels: 2,
            channel_multipliers: vec![1],
            attention_resolutions: vec![8],
            time_embed_dim: 4,
            heads: 1,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 6,
            base_steps: 3,
            cycle: 2,
            lambda_fwd: 0.05,
            lambda_rev: 0.05,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 7,
            refresh_sample_count: 1,
            schedule: ScheduleConfig {
                t_steps: 8,
                beta_start: 1e-4,
                beta_end: 0.1,
            },
            guidance: GuidanceKind::Fam,
            denoiser: tiny_denoiser_cfg(),
            highlighter: HighlighterConfig {
                image_size: 8,
                in_channels: 1,
                stage_channels: vec![2, 2],
                epochs: 1,
                batch_size: 4,
                learning_rate: 1e-2,
                holdout_fraction: 0.25,
            },
            refresh_sample_steps: Some(3),
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    fn toy_dataset(n: usize) -> Array4<f32> {
        // Smooth deterministic 8x8 patterns in [-1, 1]; content is
        // irrelevant to the orchestration contracts under test.
        Array4::from_shape_fn((n, 1, 8, 8), |(i, _, y, x)| {
            (((i * 5 + y * 8 + x) % 13) as f32) / 6.5 - 1.0
        })
    }

    #[test]
    fn config_validation_and_toml_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();

        let text = toml::to_string_pretty(&cfg).unwrap();
        for key in [
            "total_steps",
            "base_steps",
            "cycle",
            "lambda_fwd",
            "lambda_rev",
            "batch_size",
            "learning_rate",
            "seed",
            "refresh_sample_count",
        ] {
            assert!(text.contains(key), "serialized config lacks {key}");
        }
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        // A file with only the core keys parses; the rest take defaults.
        let minimal = "total_steps = 10\nbase_steps = 5\ncycle = 2\nlambda_fwd = 0.01\n\
                       lambda_rev = 0.025\nbatch_size = 4\nlearning_rate = 0.001\nseed = 3\n\
                       refresh_sample_count = 2\n";
        let cfg: TrainConfig = toml::from_str(minimal).unwrap();
        assert_eq!(cfg.total_steps, 10);
        assert_eq!(cfg.schedule, ScheduleConfig::default());

        for bad in [
            TrainConfig { base_steps: 11, total_steps: 10, ..TrainConfig::default() },
            TrainConfig { cycle: 0, ..TrainConfig::default() },
            TrainConfig { lambda_fwd: -0.1, ..TrainConfig::default() },
            TrainConfig { lambda_rev: f64::NAN, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { refresh_sample_count: 0, ..TrainConfig::default() },
            TrainConfig { refresh_sample_steps: Some(0), ..TrainConfig::default() },
            TrainConfig { refresh_sample_steps: Some(1000), ..TrainConfig::default() },
            TrainConfig { checkpoint_every: 5, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "accepted {bad:?}");
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.toml");
        let cfg = TrainConfig::default();
        cfg.save(&path).unwrap();
        assert_eq!(TrainConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn phase_partition_and_refresh_schedule() {
        let cfg = TrainConfig {
            total_steps: 500,
            base_steps: 250,
            cycle: 100,
            ..TrainConfig::default()
        };
        assert_eq!(phase_of(0, &cfg).unwrap(), Phase::Base);
        assert_eq!(phase_of(249, &cfg).unwrap(), Phase::Base);
        assert_eq!(phase_of(250, &cfg).unwrap(), Phase::Refine);
        assert!(phase_of(500, &cfg).is_err());

        let all_refine = TrainConfig { base_steps: 0, total_steps: 4, ..cfg.clone() };
        let all_base = TrainConfig { base_steps: 4, total_steps: 4, ..cfg.clone() };
        for step in 0..4 {
            assert_eq!(phase_of(step, &all_refine).unwrap(), Phase::Refine);
            assert_eq!(phase_of(step, &all_base).unwrap(), Phase::Base);
        }

        // Exactly base_steps steps are Base.
        let small = TrainConfig { total_steps: 40, base_steps: 17, cycle: 5, ..cfg.clone() };
        let base_count = (0..40)
            .filter(|&s| phase_of(s, &small).unwrap() == Phase::Base)
            .count();
        assert_eq!(base_count, 17);

        let spec = TrainConfig {
            total_steps: 400,
            base_steps: 200,
            cycle: 100,
            ..cfg.clone()
        };
        assert_eq!(refresh_steps(&spec), vec![200, 300]);
        for step in 200..400 {
            let due = refresh_due(step, &spec).unwrap();
            assert_eq!(due, step == 200 || step == 300, "step {step}");
        }

        // Count always equals ceil((total - base) / cycle).
        for (total, base, cycle) in [(10, 0, 3), (400, 200, 100), (7, 7, 1), (9, 2, 10)] {
            let cfg = TrainConfig { total_steps: total, base_steps: base, cycle, ..cfg.clone() };
            let expect = (total - base).div_ceil(cycle);
            assert_eq!(refresh_steps(&cfg).len(), expect, "{total}/{base}/{cycle}");
        }
    }

    #[test]
    fn loss_matches_direct_mse_and_reduces_at_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = Denoiser::<f64>::new(tiny_denoiser_cfg(), &mut rng).unwrap();
        let sched = NoiseSchedule::<f64>::linear(8, 1e-4, 0.1).unwrap();
        let x0 = randn::<f64, _>(&[2, 1, 8, 8], &mut rng);
        let eps = randn::<f64, _>(&[2, 1, 8, 8], &mut rng);
        let ts = [3usize, 6];
        let mfam = Fam::new(Array2::from_shape_fn((8, 8), |(y, x)| {
            ((y * 8 + x) as f32) / 63.0
        }))
        .unwrap();

        let graph = sr_loss_graph(
            &model, &x0, &ts, &eps, Some(&mfam), 0.05, 0.05, &sched,
        )
        .unwrap();
        // Independent recomputation: mean squared difference between the
        // recorded prediction and the shifted target, in plain arithmetic.
        let eps_sr = sr_noise(&eps, &mfam.to_arr::<f64>(), 0.05).unwrap();
        let pred = graph.tape.value(graph.output);
        let mse = pred
            .iter()
            .zip(eps_sr.iter())
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>()
            / pred.len() as f64;
        assert!((graph.loss_value() - mse).abs() <= 1e-12 * mse.max(1.0));

        // Zero weights with a map present == no map at all, bitwise.
        let with_map =
            sr_loss(&model, &x0, &ts, &eps, Some(&mfam), 0.0, 0.0, &sched).unwrap();
        let without = sr_loss(&model, &x0, &ts, &eps, None, 0.0, 0.0, &sched).unwrap();
        assert_eq!(with_map.to_bits(), without.to_bits());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut model = Denoiser::<f64>::new(tiny_denoiser_cfg(), &mut rng).unwrap();
        let sched = NoiseSchedule::<f64>::linear(8, 1e-4, 0.1).unwrap();
        let x0 = randn::<f64, _>(&[2, 1, 8, 8], &mut rng);
        let eps = randn::<f64, _>(&[2, 1, 8, 8], &mut rng);
        let ts = [2usize, 5];
        let mfam = Fam::new(Array2::from_shape_fn((8, 8), |(y, x)| {
            ((y as f32 / 7.0) * 0.5 + (x as f32 / 7.0) * 0.5).clamp(0.0, 1.0)
        }))
        .unwrap();

        let graph = sr_loss_graph(
            &model, &x0, &ts, &eps, Some(&mfam), 0.05, 0.05, &sched,
        )
        .unwrap();
        let grads = graph.tape.backward(graph.loss);
        let analytic: Vec<Arr<f64>> = graph
            .params
            .iter()
            .enumerate()
            .map(|(i, &p)| grads.get_or_zeros(p, model.bank().values()[i].shape()))
            .collect();

        let h = 1e-5;
        for probe in 0..6 {
            let pi = (probe * 31) % analytic.len();
            let len = model.bank().values()[pi].len();
            let ei = (probe * 127) % len;
            let orig = model.bank().values()[pi].as_slice().unwrap()[ei];

            let eval = |v: f64, model: &mut Denoiser<f64>| -> f64 {
                model.bank_mut().values_mut()[pi].as_slice_mut().unwrap()[ei] = v;
                sr_loss(model, &x0, &ts, &eps, Some(&mfam), 0.05, 0.05, &sched).unwrap()
            };
            let plus = eval(orig + h, &mut model);
            let minus = eval(orig - h, &mut model);
            eval(orig, &mut model);

            let fd = (plus - minus) / (2.0 * h);
            let an = analytic[pi].as_slice().unwrap()[ei];
            let denom = fd.abs().max(an.abs());
            if denom < 1e-10 {
                continue;
            }
            let rel = (fd - an).abs() / denom;
            assert!(rel <= 1e-3, "param {pi}[{ei}]: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn refresh_matches_manual_sample_cam_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let model = Denoiser::<f32>::new(tiny_denoiser_cfg(), &mut rng).unwrap();
        let sched = NoiseSchedule::<f32>::linear(6, 1e-4, 0.1).unwrap();
        let hl_cfg = HighlighterConfig {
            image_size: 8,
            in_channels: 1,
            stage_channels: vec![2, 2],
            ..HighlighterConfig::default()
        };
        let mut hl = Highlighter::<f32>::new(hl_cfg, &mut rng).unwrap();
        hl.set_trained(true);

        let mut rng_a = ChaCha8Rng::seed_from_u64(31);
        let got = refresh_mfam(&model, &sched, &hl, 3, None, &mut rng_a).unwrap();

        let mut rng_b = ChaCha8Rng::seed_from_u64(31);
        let samples = sample(&model, &sched, &[3, 1, 8, 8], &mut rng_b).unwrap();
        let mut maps = Vec::new();
        for i in 0..3 {
            let img = samples
                .index_axis(ndarray::Axis(0), i)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            maps.push(hl.grad_cam(img, CLASS_FAKE).unwrap());
        }
        let manual = mean_fam(&maps).unwrap();
        assert_eq!(got.data(), manual.data());

        // Truncated sampling path and argument validation.
        let mut rng_c = ChaCha8Rng::seed_from_u64(32);
        let short = refresh_mfam(&model, &sched, &hl, 2, Some(2), &mut rng_c).unwrap();
        assert!(short.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(refresh_mfam(&model, &sched, &hl, 0, None, &mut rng_c).is_err());
        assert!(refresh_mfam(&model, &sched, &hl, 1, Some(99), &mut rng_c).is_err());
    }

    #[test]
    fn zero_weight_refinement_replays_baseline_bitwise() {
        let dataset = toy_dataset(6);
        let dcfg = tiny_denoiser_cfg();
        let mut refine_cfg = tiny_train_cfg();
        refine_cfg.lambda_fwd = 0.0;
        refine_cfg.lambda_rev = 0.0;
        let mut base_cfg = refine_cfg.clone();
        base_cfg.base_steps = base_cfg.total_steps;

        let refined = run_training::<f32>(&refine_cfg, &dataset, &dcfg).unwrap();
        let baseline = run_training::<f32>(&base_cfg, &dataset, &dcfg).unwrap();
        assert_eq!(refined.log.len(), baseline.log.len());
        for (r, b) in refined.log.iter().zip(baseline.log.iter()) {
            assert_eq!(
                r.loss.to_bits(),
                b.loss.to_bits(),
                "step {} diverged: {} vs {}",
                r.step,
                r.loss,
                b.loss
            );
        }
        for (a, b) in refined
            .model
            .bank()
            .values()
            .iter()
            .zip(baseline.model.bank().values())
        {
            assert_eq!(a, b);
        }
        // The refinement run still produced its side artifacts.
        assert!(refined.highlighter.is_some());
        assert!(refined.final_mfam.is_some());
        assert!(baseline.highlighter.is_none());
    }

    #[test]
    fn training_run_follows_the_dual_phase_schedule() {
        let dataset = toy_dataset(6);
        let out = run_training::<f32>(&tiny_train_cfg(), &dataset, &tiny_denoiser_cfg()).unwrap();

        assert_eq!(out.log.len(), 6);
        let phases: Vec<Phase> = out.log.iter().map(|r| r.phase).collect();
        assert_eq!(
            phases,
            [Phase::Base, Phase::Base, Phase::Base, Phase::Refine, Phase::Refine, Phase::Refine]
        );
        let refreshed: Vec<usize> = out
            .log
            .iter()
            .filter(|r| r.refreshed)
            .map(|r| r.step)
            .collect();
        assert_eq!(refreshed, vec![3, 5]);
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
        let acc = out.highlighter_holdout_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(out.final_mfam.is_some());

        // Same config and data, fresh run: the full trace is reproducible.
        let again = run_training::<f32>(&tiny_train_cfg(), &dataset, &tiny_denoiser_cfg()).unwrap();
        assert_eq!(out.log, again.log);

        // Log lines round-trip the exact float text.
        let rec = &out.log[3];
        let line = rec.to_line();
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0], rec.step.to_string());
        assert_eq!(fields[1], "refine");
        assert_eq!(fields[2].parse::<f64>().unwrap().to_bits(), rec.loss.to_bits());
        assert_eq!(fields[3], "1");

        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("train.log");
        write_log(&log_path, &out.log).unwrap();
        let text = std::fs::read_to_string(&log_path).unwrap();
        assert_eq!(text.lines().count(), 6);

        // Input validation.
        let empty = Array4::<f32>::zeros((0, 1, 8, 8));
        assert!(run_training::<f32>(&tiny_train_cfg(), &empty, &tiny_denoiser_cfg()).is_err());
        let wrong = Array4::<f32>::zeros((4, 1, 16, 16));
        assert!(run_training::<f32>(&tiny_train_cfg(), &wrong, &tiny_denoiser_cfg()).is_err());
    }

    #[test]
    fn fixed_guidance_replaces_the_learned_map() {
        let dataset = toy_dataset(6);
        let mut cfg = tiny_train_cfg();
        cfg.guidance = GuidanceKind::CenterGaussian;
        let out = run_training::<f32>(&cfg, &dataset, &tiny_denoiser_cfg()).unwrap();
        // No highlighter is ever trained for fixed guidance, and the final
        // map is exactly the configured structural prior.
        assert!(out.highlighter.is_none());
        assert!(out.highlighter_holdout_accuracy.is_none());
        let expect =
            crate::guidance::center_gaussian_map(8, 8, crate::guidance::DEFAULT_SIGMA_FRAC)
                .unwrap();
        assert_eq!(out.final_mfam.unwrap().data(), expect.data());
        assert_eq!(out.log.len(), 6);

        cfg.guidance = GuidanceKind::Edge;
        let out = run_training::<f32>(&cfg, &dataset, &tiny_denoiser_cfg()).unwrap();
        assert!(out.highlighter.is_none());
        let m = out.final_mfam.unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn checkpoint_resume_reproduces_uninterrupted_run() {
        let dataset = toy_dataset(6);
        let dcfg = tiny_denoiser_cfg();
        let full_cfg = tiny_train_cfg();

        let full = run_training::<f32>(&full_cfg, &dataset, &dcfg).unwrap();

        // Interrupted run: stop after 3 steps, checkpointing at step 3.
        let dir = tempfile::tempdir().unwrap();
        let mut first_half = full_cfg.clone();
        first_half.total_steps = 3;
        first_half.base_steps = 3;
        first_half.checkpoint_every = 3;
        first_half.checkpoint_dir = Some(dir.path().to_path_buf());
        run_training::<f32>(&first_half, &dataset, &dcfg).unwrap();

        let ckpt = dir.path().join("ckpt-0000003.srdf");
        let resumed = resume_training::<f32>(&full_cfg, &dataset, &dcfg, &ckpt).unwrap();

        assert_eq!(resumed.log.len(), 3);
        for (r, f) in resumed.log.iter().zip(full.log[3..].iter()) {
            assert_eq!(r, f, "resumed step {} diverged", r.step);
        }
        for (a, b) in resumed
            .model
            .bank()
            .values()
            .iter()
            .zip(full.model.bank().values())
        {
            assert_eq!(a, b);
        }
        let (ra, fa) = (
            resumed.final_mfam.unwrap(),
            full.final_mfam.unwrap(),
        );
        assert_eq!(ra.data(), fa.data());

        // Resuming past the configured horizon is rejected.
        let mut short = full_cfg.clone();
        short.total_steps = 2;
        short.base_steps = 2;
        assert!(resume_training::<f32>(&short, &dataset, &dcfg, &ckpt).is_err());
    }
}
