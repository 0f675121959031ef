//! Command-line surface tying the pipeline together.
//!
//! Six subcommands cover the full workflow: `train`, `sample`, `fam`,
//! `eval`, `inpaint`, and `compare-maps`. Shared output contract:
//!
//! * exit code 0 on success; on any failure a single line `error: <reason>`
//!   goes to stderr and the exit code is nonzero;
//! * every artifact path is printed to stdout, one path per line;
//! * informational stdout lines start with `# ` (the reproducibility line
//!   `# run ...` with the config and seed, metric echoes, notes), so any
//!   stdout line not starting with `#` is an artifact path;
//! * a command is reproducible from its printed `# run` line.
//!
//! File formats: images are binary PGM/PPM, flaw maps and masks use the
//! flaw-map container (`.fam`), models and highlighters use the
//! self-describing checkpoint container (`.srdf`), metric tables are
//! written twice (CSV and JSON lines).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_highlighter, load_model, save_highlighter, save_model};
use crate::data::{gen_toy_faces, load_folder, save_batch};
use crate::error::{Error, Result};
use crate::guidance::GuidanceKind;
use crate::imageio;
use crate::inpaint::{make_mask, repaint_sample, MaskKind};
use crate::metrics::{
    desk_fid, perceptual_distance, psnr, ssim, HighlighterEmbedder, MetricRow, PcaEmbedder,
    IMAGE_RANGE, METRIC_CSV_HEADER,
};
use crate::render::{overlay, render_heatmap, sample_grid, top_cells};
use crate::schedule::NoiseSchedule;
use crate::trainer::{
    resume_training, run_training, sample_checked, to_f32_batch, write_log, TrainConfig,
};

/// `say!` that ignores a closed stdout: a downstream tool like `head`
/// may stop reading early, and that must not abort the command's work.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Training draws on streams 0..=2; evaluation sampling sits on its own
/// stream so scoring never perturbs a training trajectory.
const EVAL_STREAM: u64 = 3;

/// Highest embedding dimension any command asks of the PCA embedder.
const MAX_PCA_DIM: usize = 8;

#[derive(Parser, Debug)]
#[command(name = "srdiff", version, about = "Self-refining diffusion at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a training configuration and write the resulting artifacts.
    Train(TrainArgs),
    /// Draw images from a model checkpoint and write them plus a grid.
    Sample(SampleArgs),
    /// Explain a folder of images: flaw maps, heatmaps, overlays, cell report.
    Fam(FamArgs),
    /// Score a generated folder against a real folder.
    Eval(EvalArgs),
    /// Mask an image (or folder) and repaint the unknown region.
    Inpaint(InpaintArgs),
    /// Train one model per guidance map under identical seeds and rank them.
    CompareMaps(CompareMapsArgs),
}

/// Parse the command line and run; the binary entry point.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Dispatch one parsed command; errors bubble up as single-line messages.
pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Fam(a) => cmd_fam(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inpaint(a) => cmd_inpaint(a),
        Command::CompareMaps(a) => cmd_compare_maps(a),
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run configuration; keys match `TrainConfig`.
    #[arg(long)]
    pub config: PathBuf,
    /// Trainer checkpoint to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "out/train")]
    pub out_dir: PathBuf,
    /// Folder of PGM/PPM training images; omitted means the built-in toy
    /// desk dataset at the model resolution.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Toy dataset size when --data-dir is omitted.
    #[arg(long, default_value_t = 256)]
    pub toy_count: usize,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&a.config)?;
    let dataset = load_dataset(
        a.data_dir.as_deref(),
        a.toy_count,
        cfg.denoiser.image_size,
        cfg.seed,
    )?;
    say!("# run config={} seed={}", a.config.display(), cfg.seed);
    let out = match &a.resume {
        Some(ckpt) => resume_training::<f32>(&cfg, &dataset, &cfg.denoiser, ckpt)?,
        None => run_training::<f32>(&cfg, &dataset, &cfg.denoiser)?,
    };
    std::fs::create_dir_all(&a.out_dir)?;

    let cfg_path = a.out_dir.join("config.toml");
    cfg.save(&cfg_path)?;
    emit(&cfg_path);

    let model_path = a.out_dir.join("model.srdf");
    save_model(&model_path, &out.model, &cfg.schedule, cfg.total_steps as u64)?;
    emit(&model_path);

    let log_path = a.out_dir.join("train.log");
    write_log(&log_path, &out.log)?;
    emit(&log_path);

    if let Some(hl) = &out.highlighter {
        let p = a.out_dir.join("highlighter.srdf");
        save_highlighter(&p, hl)?;
        emit(&p);
    }
    if let Some(m) = &out.final_mfam {
        let p = a.out_dir.join("mfam.fam");
        m.save(&p, false)?;
        emit(&p);
    }
    if let Some(acc) = out.highlighter_holdout_accuracy {
        say!("# highlighter-holdout-accuracy {acc}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Model file from `train`, or a trainer checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/sample")]
    pub out_dir: PathBuf,
    /// Columns of the assembled grid image.
    #[arg(long, default_value_t = 4)]
    pub cols: usize,
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let (model, sched_cfg, _) = load_model::<f32>(&a.ckpt)?;
    let sched = NoiseSchedule::from_config(&sched_cfg)?;
    say!(
        "# run ckpt={} count={} seed={}",
        a.ckpt.display(),
        a.count,
        a.seed
    );
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let batch = to_f32_batch(&sample_checked(&model, &sched, a.count, sched.len(), &mut rng)?)?;
    std::fs::create_dir_all(&a.out_dir)?;

    let grid = sample_grid(&batch, a.cols)?;
    let grid_path = a.out_dir.join(format!("grid.{}", ext_for(grid.dim().0)));
    imageio::save_image(&grid_path, &grid)?;
    emit(&grid_path);
    for p in save_batch(&a.out_dir.join("images"), "sample", &batch)? {
        emit(&p);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct FamArgs {
    /// Trained highlighter file from `train`.
    #[arg(long)]
    pub highlighter: PathBuf,
    /// Folder of PGM/PPM images to explain.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "out/fam")]
    pub out_dir: PathBuf,
    /// Cell partition of the report (grid x grid).
    #[arg(long, default_value_t = 3)]
    pub grid: usize,
    /// Cells reported per image, strongest first.
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
}

fn cmd_fam(a: &FamArgs) -> Result<()> {
    let hl = load_highlighter::<f32>(&a.highlighter)?;
    let loaded = load_folder(&a.images, hl.config().image_size)?;
    for (path, reason) in &loaded.skipped {
        eprintln!("warning: skipped {}: {reason}", path.display());
    }
    say!(
        "# run highlighter={} images={} grid={} top-k={}",
        a.highlighter.display(),
        a.images.display(),
        a.grid,
        a.top_k
    );
    let fams = hl.fams(&loaded.images)?;
    std::fs::create_dir_all(&a.out_dir)?;

    let mut report = String::from("image,rank,row,col,mean\n");
    for (i, fam) in fams.iter().enumerate() {
        let fam_path = a.out_dir.join(format!("fam_{i:05}.fam"));
        fam.save(&fam_path, false)?;
        emit(&fam_path);

        let heat_path = a.out_dir.join(format!("heat_{i:05}.ppm"));
        imageio::save_image(&heat_path, &render_heatmap(fam))?;
        emit(&heat_path);

        let img = loaded.images.index_axis(Axis(0), i).to_owned();
        let over_path = a.out_dir.join(format!("overlay_{i:05}.ppm"));
        imageio::save_image(&over_path, &overlay(&img, fam)?)?;
        emit(&over_path);

        for (rank, c) in top_cells(fam, a.grid, a.top_k)?.iter().enumerate() {
            report.push_str(&format!("{i},{},{},{},{}\n", rank + 1, c.row, c.col, c.mean));
        }
    }
    let report_path = a.out_dir.join("cells.csv");
    std::fs::write(&report_path, report)?;
    emit(&report_path);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Folder of reference images.
    #[arg(long)]
    pub real_dir: PathBuf,
    /// Folder of generated images.
    #[arg(long)]
    pub gen_dir: PathBuf,
    /// Trained highlighter for the embedding; omitted falls back to a PCA
    /// embedder fit on the real folder (and skips the perceptual row).
    #[arg(long)]
    pub highlighter: Option<PathBuf>,
    #[arg(long, default_value = "out/eval")]
    pub out_dir: PathBuf,
    /// Recorded in every metric row for traceability.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Working resolution when no highlighter fixes one.
    #[arg(long, default_value_t = 16)]
    pub resolution: usize,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let hl = match &a.highlighter {
        Some(p) => Some(load_highlighter::<f32>(p)?),
        None => None,
    };
    let res = hl.as_ref().map_or(a.resolution, |h| h.config().image_size);
    let real = load_dataset(Some(&a.real_dir), 0, res, 0)?;
    let generated = load_dataset(Some(&a.gen_dir), 0, res, 0)?;
    say!(
        "# run real={} gen={} seed={}",
        a.real_dir.display(),
        a.gen_dir.display(),
        a.seed
    );

    let mut rows = Vec::new();
    let fid = match &hl {
        Some(h) => desk_fid(&real, &generated, &HighlighterEmbedder(h))?,
        None => {
            let pca = PcaEmbedder::fit(&real, embed_dim(real.dim().0))?;
            desk_fid(&real, &generated, &pca)?
        }
    };
    rows.push(MetricRow {
        metric: "desk-fid".into(),
        split: "eval".into(),
        value: fid,
        seed: a.seed,
    });
    say!("# desk-fid {fid}");

    if let Some(h) = &hl {
        let pairs = real.dim().0.min(generated.dim().0);
        let mut total = 0.0;
        for i in 0..pairs {
            total += perceptual_distance(
                real.index_axis(Axis(0), i),
                generated.index_axis(Axis(0), i),
                h,
            )?;
        }
        let mean = total / pairs as f64;
        rows.push(MetricRow {
            metric: "highlighter-perceptual".into(),
            split: "eval".into(),
            value: mean,
            seed: a.seed,
        });
        say!("# highlighter-perceptual {mean}");
    } else {
        say!("# note no highlighter: desk-fid uses a PCA embedder, perceptual row omitted");
    }
    for p in write_metric_files(&a.out_dir, &rows)? {
        emit(&p);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InpaintArgs {
    /// Model file from `train`, or a trainer checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One PGM/PPM image, or a folder of them.
    #[arg(long)]
    pub image: PathBuf,
    /// wide | narrow | alternating-lines; omitted runs all three.
    #[arg(long, value_parser = parse_mask_kind)]
    pub mask_kind: Option<MaskKind>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out/inpaint")]
    pub out_dir: PathBuf,
    /// Reverse steps between re-noising jumps of the repaint schedule.
    #[arg(long, default_value_t = 10)]
    pub jump_len: usize,
    /// Re-noising passes allowed per jump boundary; 0 disables jumps.
    #[arg(long, default_value_t = 2)]
    pub jump_n: usize,
}

fn cmd_inpaint(a: &InpaintArgs) -> Result<()> {
    let (model, sched_cfg, _) = load_model::<f32>(&a.ckpt)?;
    let sched = NoiseSchedule::from_config(&sched_cfg)?;
    let res = model.config().image_size;
    let originals = if a.image.is_dir() {
        load_dataset(Some(&a.image), 0, res, 0)?
    } else {
        imageio::load_image(&a.image)?.insert_axis(Axis(0))
    };
    let (n, c, h, w) = originals.dim();
    say!(
        "# run ckpt={} image={} seed={} jump-len={} jump-n={}",
        a.ckpt.display(),
        a.image.display(),
        a.seed,
        a.jump_len,
        a.jump_n
    );
    std::fs::create_dir_all(&a.out_dir)?;

    // The distribution score needs a second moment on both sides, so it only
    // appears when enough images are given; fidelity rows always appear.
    let embedder = if n >= 3 {
        Some(PcaEmbedder::fit(&originals, embed_dim(n))?)
    } else {
        say!("# note desk-fid rows need at least 3 images, got {n}");
        None
    };

    let kinds: Vec<MaskKind> = match a.mask_kind {
        Some(k) => vec![k],
        None => MaskKind::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for kind in kinds {
        // Each kind sits on its own stream, so a single-kind run replays the
        // same trajectory that kind gets inside an all-kinds run.
        let stream = MaskKind::ALL.iter().position(|k| *k == kind).unwrap() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(stream);
        let mask = make_mask(kind, h, w, &mut rng)?;

        let mask_path = a.out_dir.join(format!("mask-{}.fam", kind.as_str()));
        mask.save(&mask_path)?;
        emit(&mask_path);

        let mut masked = Array4::<f32>::zeros((n, c, h, w));
        let mut results = Array4::<f32>::zeros((n, c, h, w));
        for i in 0..n {
            let orig = originals.index_axis(Axis(0), i).to_owned();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        masked[[i, ch, y, x]] = if mask.data()[[y, x]] == 1.0 {
                            orig[[ch, y, x]]
                        } else {
                            -1.0
                        };
                    }
                }
            }
            let out = repaint_sample(
                &model,
                &sched,
                &orig.into_dyn(),
                &mask,
                a.jump_len,
                a.jump_n,
                &mut rng,
            )?;
            results.index_axis_mut(Axis(0), i).assign(&out);
        }

        let kind_dir = a.out_dir.join(kind.as_str());
        for p in save_batch(&kind_dir, "masked", &masked)? {
            emit(&p);
        }
        for p in save_batch(&kind_dir, "result", &results)? {
            emit(&p);
        }

        let mut psnr_total = 0.0;
        let mut ssim_total = 0.0;
        for i in 0..n {
            let o = originals.index_axis(Axis(0), i);
            let r = results.index_axis(Axis(0), i);
            psnr_total += psnr(&o.to_owned(), &r.to_owned(), IMAGE_RANGE)?;
            ssim_total += ssim(o, r)?;
        }
        rows.push(metric_row("psnr", kind.as_str(), psnr_total / n as f64, a.seed));
        rows.push(metric_row("ssim", kind.as_str(), ssim_total / n as f64, a.seed));
        if let Some(e) = &embedder {
            rows.push(metric_row(
                "desk-fid",
                kind.as_str(),
                desk_fid(&originals, &results, e)?,
                a.seed,
            ));
        }
    }
    for r in &rows {
        say!("# {} {} {}", r.metric, r.split, r.value);
    }
    for p in write_metric_files(&a.out_dir, &rows)? {
        emit(&p);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CompareMapsArgs {
    /// Base TOML configuration; the guidance key is overridden per run.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out/compare-maps")]
    pub out_dir: PathBuf,
    /// Folder of PGM/PPM training images; omitted means the toy dataset.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Toy dataset size when --data-dir is omitted.
    #[arg(long, default_value_t = 256)]
    pub toy_count: usize,
    /// Images sampled from each trained model for scoring.
    #[arg(long, default_value_t = 32)]
    pub eval_count: usize,
}

fn cmd_compare_maps(a: &CompareMapsArgs) -> Result<()> {
    if a.eval_count < 2 {
        return Err(Error::InvalidArgument(
            "eval-count must be at least 2".into(),
        ));
    }
    let base = TrainConfig::load(&a.config)?;
    let dataset = load_dataset(
        a.data_dir.as_deref(),
        a.toy_count,
        base.denoiser.image_size,
        base.seed,
    )?;
    say!("# run config={} seed={}", a.config.display(), base.seed);
    std::fs::create_dir_all(&a.out_dir)?;

    // One embedder fit on the shared dataset keeps the four scores comparable.
    let embedder = PcaEmbedder::fit(&dataset, embed_dim(dataset.dim().0))?;
    let mut rows = Vec::new();
    for kind in GuidanceKind::ALL {
        let mut cfg = base.clone();
        cfg.guidance = kind;
        let out = run_training::<f32>(&cfg, &dataset, &cfg.denoiser)?;

        let model_path = a.out_dir.join(format!("model-{}.srdf", kind.as_str()));
        save_model(&model_path, &out.model, &cfg.schedule, cfg.total_steps as u64)?;
        emit(&model_path);

        // Identical evaluation noise for every kind: same seed, same stream.
        let sched = NoiseSchedule::from_config(&cfg.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
        rng.set_stream(EVAL_STREAM);
        let generated = to_f32_batch(&sample_checked(
            &out.model,
            &sched,
            a.eval_count,
            sched.len(),
            &mut rng,
        )?)?;
        rows.push(metric_row(
            "desk-fid",
            kind.as_str(),
            desk_fid(&dataset, &generated, &embedder)?,
            base.seed,
        ));
    }

    let mut ranked: Vec<&MetricRow> = rows.iter().collect();
    ranked.sort_by(|x, y| x.value.total_cmp(&y.value));
    let mut table = String::from("rank,map,desk-fid,seed\n");
    say!("# ranking (lower is better)");
    for (i, r) in ranked.iter().enumerate() {
        table.push_str(&format!("{},{},{},{}\n", i + 1, r.split, r.value, r.seed));
        say!("# {} {} {}", i + 1, r.split, r.value);
    }
    let rank_path = a.out_dir.join("ranking.csv");
    std::fs::write(&rank_path, table)?;
    emit(&rank_path);
    for p in write_metric_files(&a.out_dir, &rows)? {
        emit(&p);
    }
    Ok(())
}

fn parse_mask_kind(s: &str) -> std::result::Result<MaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn metric_row(metric: &str, split: &str, value: f64, seed: u64) -> MetricRow {
    MetricRow {
        metric: metric.into(),
        split: split.into(),
        value,
        seed,
    }
}

fn ext_for(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn emit(path: &Path) {
    say!("{}", path.display());
}

fn embed_dim(n_images: usize) -> usize {
    MAX_PCA_DIM.min(n_images.saturating_sub(1)).max(1)
}

/// Images from a folder (warnings for skipped files go to stderr), or the
/// built-in toy dataset when no folder is given.
fn load_dataset(
    dir: Option<&Path>,
    toy_count: usize,
    resolution: usize,
    seed: u64,
) -> Result<Array4<f32>> {
    match dir {
        Some(d) => {
            let loaded = load_folder(d, resolution)?;
            for (path, reason) in &loaded.skipped {
                eprintln!("warning: skipped {}: {reason}", path.display());
            }
            Ok(loaded.images)
        }
        None => gen_toy_faces(toy_count, resolution, seed),
    }
}

/// Write the rows as `metrics.csv` and `metrics.jsonl` under `dir`.
fn write_metric_files(dir: &Path, rows: &[MetricRow]) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from(METRIC_CSV_HEADER);
    csv.push('\n');
    let mut jsonl = String::new();
    for r in rows {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
        jsonl.push_str(&r.to_json_line());
        jsonl.push('\n');
    }
    let csv_path = dir.join("metrics.csv");
    std::fs::write(&csv_path, csv)?;
    let jsonl_path = dir.join("metrics.jsonl");
    std::fs::write(&jsonl_path, jsonl)?;
    Ok([csv_path, jsonl_path])
}
