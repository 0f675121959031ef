//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "SRDF"
//! version u32
//! step    u64
//! meta    u32 count, then (key: u32 len + bytes, value: u32 len + bytes)*
//! blobs   u32 count, then (name: u32 len + bytes, ndim: u32,
//!          dims: u32*, data: f32-LE*)*
//! ```
//!
//! Meta entries carry small strings (config JSON, rng state); blobs carry
//! parameter and optimizer tensors. Training is f32, so storing blobs as
//! 32-bit floats makes save→load→resume bitwise exact.

use crate::autodiff::{Arr, Scalar};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::highlighter::{Highlighter, HighlighterConfig};
use crate::schedule::ScheduleConfig;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SRDF";
pub const VERSION: u32 = 1;

const MAX_NDIM: u32 = 8;
const MAX_STR: u32 = 1 << 20;

/// In-memory checkpoint: a step counter, string metadata, and named tensors.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    blobs: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn new(step: u64) -> Self {
        Checkpoint {
            step,
            ..Checkpoint::default()
        }
    }

    pub fn push_blob(&mut self, name: &str, data: ArrayD<f32>) {
        self.blobs.push((name.to_string(), data));
    }

    pub fn blob(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
    }

    pub fn blob_names(&self) -> impl Iterator<Item = &str> {
        self.blobs.iter().map(|(n, _)| n.as_str())
    }

    /// Store a parameter bank's tensors under `prefix/name`.
    pub fn store_bank<F: Scalar>(&mut self, prefix: &str, bank: &crate::denoiser::ParamBank<F>) {
        for (name, value) in bank.names().iter().zip(bank.values()) {
            self.push_blob(
                &format!("{prefix}/{name}"),
                value.mapv(|v| v.to_f64() as f32),
            );
        }
    }

    /// Restore a parameter bank stored with [`Self::store_bank`]; every
    /// parameter must be present with its exact shape.
    pub fn restore_bank<F: Scalar>(
        &self,
        prefix: &str,
        bank: &mut crate::denoiser::ParamBank<F>,
    ) -> Result<()> {
        let names: Vec<String> = bank.names().to_vec();
        for (name, value) in names.iter().zip(bank.values_mut()) {
            let key = format!("{prefix}/{name}");
            let blob = self.blob(&key).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter {key}"))
            })?;
            if blob.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter {key}: checkpoint shape {:?}, model shape {:?}",
                    blob.shape(),
                    value.shape()
                )));
            }
            *value = blob.mapv(|v| F::from_f64(v as f64));
        }
        Ok(())
    }

    /// Record a ChaCha stream's full state (seed, stream id, word position)
    /// so a restored run continues the exact draw sequence.
    pub fn store_rng(&mut self, label: &str, rng: &ChaCha8Rng) {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        self.meta.insert(format!("rng.{label}.seed"), seed);
        self.meta
            .insert(format!("rng.{label}.stream"), rng.get_stream().to_string());
        self.meta.insert(
            format!("rng.{label}.word_pos"),
            rng.get_word_pos().to_string(),
        );
    }

    pub fn load_rng(&self, label: &str) -> Result<ChaCha8Rng> {
        let get = |suffix: &str| -> Result<&String> {
            self.meta.get(&format!("rng.{label}.{suffix}")).ok_or_else(|| {
                Error::Format(format!("checkpoint has no rng state for '{label}'"))
            })
        };
        let seed_hex = get("seed")?;
        if seed_hex.len() != 64 {
            return Err(Error::Format("rng seed must be 32 hex bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Format("malformed rng seed hex".into()))?;
        }
        let stream: u64 = get("stream")?
            .parse()
            .map_err(|_| Error::Format("malformed rng stream".into()))?;
        let word_pos: u128 = get("word_pos")?
            .parse()
            .map_err(|_| Error::Format("malformed rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;

        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }

        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for (name, data) in &self.blobs {
            write_str(&mut w, name)?;
            let shape = data.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let contiguous = data.as_standard_layout();
            for &v in contiguous.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "not a checkpoint file: magic {magic:02x?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let mut step = [0u8; 8];
        r.read_exact(&mut step)?;
        let step = u64::from_le_bytes(step);

        let mut meta = BTreeMap::new();
        let n_meta = read_u32(&mut r)?;
        for _ in 0..n_meta {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            meta.insert(k, v);
        }

        let mut blobs = Vec::new();
        let n_blobs = read_u32(&mut r)?;
        for _ in 0..n_blobs {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)?;
            if ndim > MAX_NDIM {
                return Err(Error::Format(format!(
                    "blob {name}: {ndim} dimensions exceeds limit {MAX_NDIM}"
                )));
            }
            let mut dims = Vec::with_capacity(ndim as usize);
            let mut len = 1usize;
            for _ in 0..ndim {
                let d = read_u32(&mut r)? as usize;
                len = len.checked_mul(d).ok_or_else(|| {
                    Error::Format(format!("blob {name}: shape overflows"))
                })?;
                dims.push(d);
            }
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Format(format!("blob {name}: {e}")))?;
            blobs.push((name, arr));
        }
        Ok(Checkpoint { step, meta, blobs })
    }
}

/// Write the configs a sampler needs into a checkpoint's metadata so model
/// files are self-describing.
pub fn embed_model_meta(
    ck: &mut Checkpoint,
    denoiser_cfg: &DenoiserConfig,
    sched_cfg: &ScheduleConfig,
) -> Result<()> {
    ck.meta.insert(
        "config.denoiser".into(),
        serde_json::to_string(denoiser_cfg).map_err(|e| Error::Format(e.to_string()))?,
    );
    ck.meta.insert(
        "config.schedule".into(),
        serde_json::to_string(sched_cfg).map_err(|e| Error::Format(e.to_string()))?,
    );
    Ok(())
}

/// Persist a trained denoiser together with its architecture and schedule.
pub fn save_model<F: Scalar>(
    path: &Path,
    model: &Denoiser<F>,
    sched_cfg: &ScheduleConfig,
    step: u64,
) -> Result<()> {
    let mut ck = Checkpoint::new(step);
    ck.store_bank("model", model.bank());
    embed_model_meta(&mut ck, model.config(), sched_cfg)?;
    ck.save(path)
}

/// Load any checkpoint carrying a denoiser (a [`save_model`] file or a
/// trainer checkpoint) and rebuild the model and its schedule config.
pub fn load_model<F: Scalar>(
    path: &Path,
) -> Result<(Denoiser<F>, ScheduleConfig, u64)> {
    let ck = Checkpoint::load(path)?;
    let meta_json = |key: &str| -> Result<&String> {
        ck.meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint has no {key} metadata")))
    };
    let dcfg: DenoiserConfig = serde_json::from_str(meta_json("config.denoiser")?)
        .map_err(|e| Error::Format(format!("config.denoiser: {e}")))?;
    let scfg: ScheduleConfig = serde_json::from_str(meta_json("config.schedule")?)
        .map_err(|e| Error::Format(format!("config.schedule: {e}")))?;
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let mut model = Denoiser::<F>::new(dcfg, &mut throwaway)?;
    ck.restore_bank("model", model.bank_mut())?;
    Ok((model, scfg, ck.step))
}

/// Persist a trained highlighter together with its configuration.
pub fn save_highlighter<F: Scalar>(
    path: &Path,
    hl: &Highlighter<F>,
) -> Result<()> {
    if !hl.is_trained() {
        return Err(Error::InvalidArgument(
            "refusing to save an untrained highlighter".into(),
        ));
    }
    let mut ck = Checkpoint::new(0);
    ck.store_bank("highlighter", hl.bank());
    ck.meta.insert(
        "config.highlighter".into(),
        serde_json::to_string(hl.config()).map_err(|e| Error::Format(e.to_string()))?,
    );
    ck.save(path)
}

/// Load a highlighter saved with [`save_highlighter`] (or a trainer
/// checkpoint that includes one).
pub fn load_highlighter<F: Scalar>(path: &Path) -> Result<Highlighter<F>> {
    let ck = Checkpoint::load(path)?;
    let json = ck
        .meta
        .get("config.highlighter")
        .ok_or_else(|| Error::Format("checkpoint has no config.highlighter metadata".into()))?;
    let cfg: HighlighterConfig =
        serde_json::from_str(json).map_err(|e| Error::Format(format!("config.highlighter: {e}")))?;
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let mut hl = Highlighter::<F>::new(cfg, &mut throwaway)?;
    ck.restore_bank("highlighter", hl.bank_mut())?;
    hl.set_trained(true);
    Ok(hl)
}

/// Convert a scalar-generic tensor to the stored f32 form.
pub fn blob_from_arr<F: Scalar>(a: &Arr<F>) -> ArrayD<f32> {
    a.mapv(|v| v.to_f64() as f32)
}

/// Convert a stored f32 tensor back into the working scalar type.
pub fn arr_from_blob<F: Scalar>(b: &ArrayD<f32>) -> Arr<F> {
    b.mapv(|v| F::from_f64(v as f64))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)?;
    if len > MAX_STR {
        return Err(Error::Format(format!("string of {len} bytes in header")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-UTF-8 string in checkpoint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand_chacha::rand_core::RngCore;
    use std::fs;

    fn sample_checkpoint() -> Checkpoint {
        let mut ck = Checkpoint::new(1234);
        ck.meta.insert("config".into(), "{\"lr\":0.001}".into());
        ck.push_blob(
            "weights/a",
            ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f32 * 0.25),
        );
        ck.push_blob("weights/b", ArrayD::from_elem(IxDyn(&[4]), -1.5f32));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(1);
        let _ = rng.next_u64(); // advance so word_pos is nontrivial
        ck.store_rng("train", &rng);
        ck
    }

    #[test]
    fn model_and_highlighter_files_are_self_describing() {
        let dir = tempfile::tempdir().unwrap();
        let dcfg = DenoiserConfig {
            image_size: 8,
            in_channels: 1,
            base_channels: 2,
            channel_multipliers: vec![1],
            attention_resolutions: vec![8],
            time_embed_dim: 4,
            heads: 1,
        };
        let scfg = ScheduleConfig {
            t_steps: 12,
            beta_start: 1e-4,
            beta_end: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Denoiser::<f32>::new(dcfg.clone(), &mut rng).unwrap();
        let mpath = dir.path().join("model.srdf");
        save_model(&mpath, &model, &scfg, 77).unwrap();
        let (back, scfg2, step) = load_model::<f32>(&mpath).unwrap();
        assert_eq!(step, 77);
        assert_eq!(scfg2, scfg);
        assert_eq!(back.config(), &dcfg);
        for (a, b) in back.bank().values().iter().zip(model.bank().values()) {
            assert_eq!(a, b);
        }

        let hcfg = HighlighterConfig {
            image_size: 8,
            in_channels: 1,
            stage_channels: vec![2, 2],
            ..HighlighterConfig::default()
        };
        let mut hl = Highlighter::<f32>::new(hcfg.clone(), &mut rng).unwrap();
        let hpath = dir.path().join("hl.srdf");
        assert!(save_highlighter(&hpath, &hl).is_err()); // untrained
        hl.set_trained(true);
        save_highlighter(&hpath, &hl).unwrap();
        let hback = load_highlighter::<f32>(&hpath).unwrap();
        assert!(hback.is_trained());
        assert_eq!(hback.config(), &hcfg);
        for (a, b) in hback.bank().values().iter().zip(hl.bank().values()) {
            assert_eq!(a, b);
        }

        // A model file is not a highlighter file and vice versa.
        assert!(load_highlighter::<f32>(&mpath).is_err());
        assert!(load_model::<f32>(&hpath).is_err());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.srdf");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, ck.step);
        assert_eq!(back.meta, ck.meta);
        for name in ["weights/a", "weights/b"] {
            let a = ck.blob(name).unwrap();
            let b = back.blob(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rng_state_resumes_draw_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.srdf");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(1);
        for _ in 0..13 {
            let _ = rng.next_u64();
        }
        let mut ck = Checkpoint::new(0);
        ck.store_rng("aux", &rng);
        ck.save(&path).unwrap();

        let mut restored = Checkpoint::load(&path).unwrap().load_rng("aux").unwrap();
        for _ in 0..20 {
            assert_eq!(restored.next_u64(), rng.next_u64());
        }
    }

    #[test]
    fn corrupted_magic_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.srdf");
        sample_checkpoint().save(&path).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff; // restore magic
        bytes[4] = 0xfe; // bump version
        fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn bank_round_trip_and_shape_check() {
        let cfg = DenoiserConfig {
            image_size: 8,
            base_channels: 2,
            channel_multipliers: vec![1],
            attention_resolutions: vec![8],
            time_embed_dim: 4,
            ..DenoiserConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Denoiser::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let mut ck = Checkpoint::new(1);
        ck.store_bank("denoiser", model.bank());

        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let mut other = Denoiser::<f32>::new(cfg, &mut rng2).unwrap();
        ck.restore_bank("denoiser", other.bank_mut()).unwrap();
        for (a, b) in model.bank().values().iter().zip(other.bank().values()) {
            assert_eq!(a, b);
        }

        let bigger = DenoiserConfig {
            image_size: 8,
            base_channels: 4,
            channel_multipliers: vec![1],
            attention_resolutions: vec![8],
            time_embed_dim: 4,
            ..DenoiserConfig::default()
        };
        let mut rng3 = ChaCha8Rng::seed_from_u64(5);
        let mut mismatched = Denoiser::<f32>::new(bigger, &mut rng3).unwrap();
        let err = ck.restore_bank("denoiser", mismatched.bank_mut());
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("shape"), "diagnostic should name shapes: {msg}");
    }
}
