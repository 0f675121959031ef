//! Dual-phase self-refining training on the built-in toy desk dataset.
//!
//! The run spends its first half in the base phase (plain denoising
//! objective), then trains a flaw highlighter at the phase boundary and
//! enters refinement: every `cycle` steps it samples from the current model,
//! extracts flaw activation maps, and feeds their mean back into the forward
//! noising (`eps + lambda_fwd * map`) and the denoiser's attention
//! (key/value scaled by `1 + lambda_rev * map`).
//!
//! ```bash
//! cargo run --release --example train_refine
//! ```

use srdiff::checkpoint::{save_highlighter, save_model};
use srdiff::data::gen_toy_faces;
use srdiff::denoiser::DenoiserConfig;
use srdiff::guidance::GuidanceKind;
use srdiff::highlighter::HighlighterConfig;
use srdiff::schedule::ScheduleConfig;
use srdiff::trainer::{run_training, write_log, Phase, TrainConfig};

fn main() -> srdiff::Result<()> {
    let out_dir = std::path::Path::new("examples-out/train_refine");
    std::fs::create_dir_all(out_dir)?;

    let cfg = TrainConfig {
        total_steps: 120,
        base_steps: 60,
        cycle: 30,
        lambda_fwd: 0.01,
        lambda_rev: 0.025,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 0,
        refresh_sample_count: 4,
        schedule: ScheduleConfig::default(), // 200 steps, linear 1e-4 -> 0.1
        guidance: GuidanceKind::Fam,
        denoiser: DenoiserConfig {
            image_size: 16,
            in_channels: 1,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![8],
            time_embed_dim: 16,
            heads: 1,
        },
        highlighter: HighlighterConfig {
            stage_channels: vec![4, 8],
            epochs: 4,
            ..HighlighterConfig::default()
        },
        // Refresh sampling descends only the last 40 of 200 steps from a
        // noised real image; full-chain refreshes would dominate the runtime.
        refresh_sample_steps: Some(40),
        checkpoint_every: 0,
        checkpoint_dir: None,
    };
    let dataset = gen_toy_faces(64, cfg.denoiser.image_size, cfg.seed)?;

    println!("training: {} steps, refinement after {}", cfg.total_steps, cfg.base_steps);
    let out = run_training::<f32>(&cfg, &dataset, &cfg.denoiser)?;

    let boundary = out.log.iter().position(|r| r.phase == Phase::Refine);
    println!("first refinement step: {:?}", boundary);
    if let Some(acc) = out.highlighter_holdout_accuracy {
        println!("highlighter holdout accuracy: {acc:.3}");
    }
    for r in out.log.iter().filter(|r| r.refreshed) {
        println!("flaw map refreshed at step {}", r.step);
    }
    let (first, last) = (&out.log[0], out.log.last().unwrap());
    println!("loss: {:.4} (step {}) -> {:.4} (step {})", first.loss, first.step, last.loss, last.step);

    cfg.save(&out_dir.join("config.toml"))?;
    save_model(&out_dir.join("model.srdf"), &out.model, &cfg.schedule, cfg.total_steps as u64)?;
    write_log(&out_dir.join("train.log"), &out.log)?;
    if let Some(hl) = &out.highlighter {
        save_highlighter(&out_dir.join("highlighter.srdf"), hl)?;
    }
    if let Some(m) = &out.final_mfam {
        m.save(&out_dir.join("mfam.fam"), false)?;
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
