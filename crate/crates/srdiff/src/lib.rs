//! Self-refining diffusion at desk scale.
//!
//! Small denoising diffusion models whose flawed regions are located by an
//! explainability-based classifier (flaw activation maps) and fed back into
//! both the forward noising process and the denoiser's attention mechanism.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`schedule`] / [`diffusion`] — noise schedules, the forward (noising)
//!   process, self-refining noise construction, training loss, and ancestral
//!   reverse sampling.
//! - [`autodiff`] — a minimal reverse-mode tape over `ndarray` tensors; the
//!   substrate for every trainable model in the crate.
//! - [`denoiser`] — a small U-Net noise predictor with self-attention blocks
//!   that accept flaw-map key/value modulation.
//! - [`highlighter`] — the real-vs-generated classifier, CAM / Grad-CAM flaw
//!   activation map extraction, and classifier quality metrics.
//! - [`guidance`] — static guidance maps (center / inverted Gaussian, edge)
//!   used as drop-in substitutes for the learned flaw map.
//! - [`trainer`] — dual-phase training orchestration with cycle-based flaw
//!   map refresh, checkpointing, and logging.
//! - [`inpaint`] — RePaint-style inpainting and mask families.
//! - [`metrics`] — desk-FID, PSNR, SSIM, and a highlighter-feature
//!   perceptual distance.
//! - [`data`] — synthetic toy-face generation and PGM/PPM folder ingestion.
//! - [`render`] / [`cli`] — heatmaps, overlays, sample grids, and the
//!   command-line surface.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fam;
pub mod guidance;
pub mod highlighter;
pub mod imageio;
pub mod imageops;
pub mod inpaint;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
