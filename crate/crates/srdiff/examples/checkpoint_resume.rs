//! Interrupt training at a checkpoint and resume it bit-for-bit.
//!
//! A reference run goes straight through 90 steps. A second run stops at
//! step 45 (writing a checkpoint), then resumes from the file. Because the
//! checkpoint carries the parameters, the optimizer moments, both RNG
//! streams, the highlighter, and the current mean flaw map, the resumed
//! loss trace and final weights match the uninterrupted run exactly.
//!
//! ```bash
//! cargo run --release --example checkpoint_resume
//! ```

use srdiff::checkpoint::{load_model, save_model};
use srdiff::data::gen_toy_faces;
use srdiff::denoiser::DenoiserConfig;
use srdiff::guidance::GuidanceKind;
use srdiff::highlighter::HighlighterConfig;
use srdiff::schedule::ScheduleConfig;
use srdiff::trainer::{resume_training, run_training, write_log, TrainConfig};

fn main() -> srdiff::Result<()> {
    let out_dir = std::path::Path::new("examples-out/checkpoint_resume");
    std::fs::create_dir_all(out_dir)?;

    // The split lands inside refinement so the checkpoint must carry the
    // highlighter and flaw-map state, not just the weights.
    let full = TrainConfig {
        total_steps: 90,
        base_steps: 30,
        cycle: 20,
        lambda_fwd: 0.01,
        lambda_rev: 0.025,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 11,
        refresh_sample_count: 4,
        schedule: ScheduleConfig::default(),
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
        refresh_sample_steps: Some(40),
        ..TrainConfig::default()
    };
    let dataset = gen_toy_faces(64, full.denoiser.image_size, full.seed)?;

    println!("reference: {} steps uninterrupted", full.total_steps);
    let reference = run_training::<f32>(&full, &dataset, &full.denoiser)?;

    let first_half = TrainConfig {
        total_steps: 45,
        checkpoint_every: 45,
        checkpoint_dir: Some(out_dir.to_path_buf()),
        ..full.clone()
    };
    println!("interrupted: stop at step {}", first_half.total_steps);
    run_training::<f32>(&first_half, &dataset, &first_half.denoiser)?;
    let ckpt = out_dir.join("ckpt-0000045.srdf");
    println!("checkpoint: {}", ckpt.display());

    println!("resuming to step {}", full.total_steps);
    let resumed = resume_training::<f32>(&full, &dataset, &full.denoiser, &ckpt)?;

    // The resumed log covers steps 45..90; compare against the reference.
    assert_eq!(resumed.log.len(), 45);
    for (r, f) in resumed.log.iter().zip(&reference.log[45..]) {
        assert_eq!(r, f, "loss trace diverged at step {}", r.step);
    }
    for (a, b) in resumed
        .model
        .bank()
        .values()
        .iter()
        .zip(reference.model.bank().values())
    {
        assert_eq!(a, b, "weights diverged after resume");
    }
    println!("resumed loss trace and weights are bitwise identical");
    write_log(&out_dir.join("resumed.log"), &resumed.log)?;

    // Plain model files round-trip the weights the same way.
    let model_path = out_dir.join("model.srdf");
    save_model(&model_path, &resumed.model, &full.schedule, full.total_steps as u64)?;
    let (loaded, sched_cfg, step) = load_model::<f32>(&model_path)?;
    assert_eq!(step, full.total_steps as u64);
    assert_eq!(sched_cfg, full.schedule);
    for (a, b) in loaded.bank().values().iter().zip(resumed.model.bank().values()) {
        assert_eq!(a, b);
    }
    println!("model file round-trips bitwise: {}", model_path.display());
    Ok(())
}
