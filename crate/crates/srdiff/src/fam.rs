//! Flaw activation maps (FAMs).
//!
//! A FAM is a single-channel `[H, W]` map with values in `[0, 1]` marking
//! where the flaw highlighter believes a generated image looks fake. The
//! mean FAM (mFAM) over a batch of samples is the guidance signal the
//! trainer feeds back into the forward noising process and the denoiser's
//! attention.
//!
//! On disk a map is a tiny binary file: magic `FAM0`, `u32` height, `u32`
//! width (little endian), one flags byte (bit 0 set means the map is binary,
//! used for inpainting masks), then `H*W` little-endian `f32` values in
//! row-major order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::{Arr, Scalar};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FAM0";
const FLAG_BINARY: u8 = 0b0000_0001;

/// A normalized flaw activation map: `[H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fam {
    data: Array2<f32>,
}

impl Fam {
    /// Wrap a map that is already in `[0, 1]`.
    pub fn new(data: Array2<f32>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("flaw map contains NaN or Inf".into()));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "flaw map value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Fam { data })
    }

    /// All-zero map (no flagged regions) — the neutral guidance signal.
    pub fn zeros(h: usize, w: usize) -> Self {
        Fam {
            data: Array2::zeros((h, w)),
        }
    }

    /// Min-max normalize a raw activation map into `[0, 1]`.
    /// A constant map (max == min) has nothing to localize and becomes zeros.
    pub fn normalize(raw: &Array2<f32>) -> Result<Self> {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in raw.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("raw activation map contains NaN or Inf".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi <= lo {
            return Ok(Fam::zeros(raw.nrows(), raw.ncols()));
        }
        let span = hi - lo;
        Ok(Fam {
            data: raw.mapv(|v| (v - lo) / span),
        })
    }

    /// Elementwise average of several same-shaped maps. Each input is already
    /// in `[0, 1]`, so the mean needs no renormalization.
    pub fn average(maps: &[Fam]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("average of zero flaw maps".into()))?;
        let shape = first.data.dim();
        let mut acc = Array2::<f32>::zeros(shape);
        for m in maps {
            if m.data.dim() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "flaw map {:?} vs {:?}",
                    m.data.dim(),
                    shape
                )));
            }
            acc += &m.data;
        }
        acc /= maps.len() as f32;
        Ok(Fam { data: acc })
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    /// Convert into a dynamic tensor of the training element type.
    pub fn to_arr<F: Scalar>(&self) -> Arr<F> {
        self.data.mapv(|v| F::from_f64(v as f64)).into_dyn()
    }

    /// Write in the FAM binary format. `binary` sets the mask flag and
    /// requires every value to be exactly 0 or 1.
    pub fn save(&self, path: &Path, binary: bool) -> Result<()> {
        if binary {
            for &v in self.data.iter() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "binary flag set but map value {v} is not 0 or 1"
                    )));
                }
            }
        }
        let mut buf = Vec::with_capacity(4 + 4 + 4 + 1 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.height() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width() as u32).to_le_bytes());
        buf.push(if binary { FLAG_BINARY } else { 0 });
        for &v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Read a map written by [`Fam::save`]; returns the map and whether the
    /// binary-mask flag was set.
    pub fn load(path: &Path) -> Result<(Self, bool)> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    fn from_bytes(bytes: &[u8]) -> Result<(Self, bool)> {
        if bytes.len() < 13 {
            return Err(Error::Format("flaw map file too short".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad flaw map magic {:?}",
                &bytes[0..4]
            )));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let flags = bytes[12];
        let expected = 13 + h * w * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "flaw map payload length {} does not match {h}x{w} header",
                bytes.len()
            )));
        }
        let mut vals = Vec::with_capacity(h * w);
        for chunk in bytes[13..].chunks_exact(4) {
            vals.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let data = Array2::from_shape_vec((h, w), vals)
            .map_err(|e| Error::Format(format!("flaw map shape: {e}")))?;
        let binary = flags & FLAG_BINARY != 0;
        let fam = Fam::new(data)?;
        if binary {
            for &v in fam.data.iter() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Format(format!(
                        "binary flag set but stored value {v} is not 0 or 1"
                    )));
                }
            }
        }
        Ok((fam, binary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_min_max_example() {
        let raw = Array2::from_shape_vec((2, 2), vec![1.0f32, 3.0, 2.0, 5.0]).unwrap();
        let fam = Fam::normalize(&raw).unwrap();
        let want = [0.0f32, 0.5, 0.25, 1.0];
        for (a, b) in fam.data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_constant_map_becomes_zeros() {
        let raw = Array2::from_elem((3, 3), 0.7f32);
        let fam = Fam::normalize(&raw).unwrap();
        assert!(fam.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn average_small_example() {
        let a = Fam::new(Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap()).unwrap();
        let b = Fam::new(Array2::from_shape_vec((1, 2), vec![1.0, 0.5]).unwrap()).unwrap();
        let m = Fam::average(&[a, b]).unwrap();
        assert!((m.data()[[0, 0]] - 0.5).abs() < 1e-7);
        assert!((m.data()[[0, 1]] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn rejects_out_of_range_and_non_finite() {
        assert!(Fam::new(Array2::from_elem((1, 1), 1.5f32)).is_err());
        assert!(Fam::new(Array2::from_elem((1, 1), -0.1f32)).is_err());
        assert!(Fam::new(Array2::from_elem((1, 1), f32::NAN)).is_err());
        assert!(Fam::average(&[]).is_err());
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fam");
        let data = Array2::from_shape_fn((5, 7), |(i, j)| ((i * 7 + j) as f32) / 34.0);
        let fam = Fam::new(data).unwrap();
        fam.save(&path, false).unwrap();
        let (back, binary) = Fam::load(&path).unwrap();
        assert!(!binary);
        assert_eq!(back.data(), fam.data());
        // bit-level equality, not just numeric
        for (a, b) in back.data().iter().zip(fam.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn binary_flag_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.fam");
        let data = Array2::from_shape_fn((4, 4), |(i, _)| if i % 2 == 0 { 1.0f32 } else { 0.0 });
        let fam = Fam::new(data).unwrap();
        fam.save(&path, true).unwrap();
        let (back, binary) = Fam::load(&path).unwrap();
        assert!(binary);
        assert_eq!(back.data(), fam.data());

        let soft = Fam::new(Array2::from_elem((2, 2), 0.5f32)).unwrap();
        assert!(soft.save(&path, true).is_err());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fam");
        let fam = Fam::zeros(2, 2);
        fam.save(&path, false).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match Fam::load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.fam");
        let fam = Fam::zeros(4, 4);
        fam.save(&path, false).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Fam::load(&path), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn normalize_output_always_in_unit_interval(vals in proptest::collection::vec(-100.0f32..100.0, 12)) {
            let raw = Array2::from_shape_vec((3, 4), vals).unwrap();
            let fam = Fam::normalize(&raw).unwrap();
            for &v in fam.data().iter() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            // unless constant, both extremes are attained
            let lo = raw.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if hi > lo {
                prop_assert!(fam.data().iter().any(|&v| v == 0.0));
                prop_assert!(fam.data().iter().any(|&v| v == 1.0));
            }
        }
    }
}
