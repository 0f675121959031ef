//! Binary PPM (P6) and PGM (P5) input/output, maxval 255.
//!
//! Images in memory are `[C, H, W]` tensors of `f32` in `[-1, 1]`. The byte
//! mapping is chosen so mid-gray (byte 128) decodes to exactly 0.0:
//! write `b = round((x + 1) * 127.5)`, read `x = clamp((b - 128) / 127.5)`.
//! A write-read round trip changes any value by at most `1/127.5`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// Quantize a `[-1, 1]` value into a byte.
///
/// Decoded bytes land exactly on rounding ties, so the computation runs in
/// `f64` with a nudge (much smaller than one quantization step) that makes
/// encode-after-decode return the original byte instead of depending on
/// accumulated float error.
pub fn to_byte(x: f32) -> u8 {
    ((x as f64 + 1.0) * 127.5 + 0.5 + 1e-4).floor().clamp(0.0, 255.0) as u8
}

/// Decode a byte back into `[-1, 1]`; byte 128 maps to exactly 0.0.
pub fn from_byte(b: u8) -> f32 {
    (((b as f64 - 128.0) / 127.5).clamp(-1.0, 1.0)) as f32
}

/// Write a `[C, H, W]` image as binary PGM (1 channel) or PPM (3 channels).
pub fn save_image(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::InvalidArgument(format!(
                "save_image expects 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut buf = Vec::with_capacity(32 + c * h * w);
    buf.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                buf.push(to_byte(img[[ch, y, x]]));
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a binary PGM/PPM written with maxval 255 into a `[C, H, W]` tensor.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::file(path, e))?
        .read_to_end(&mut bytes)?;
    parse_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_pnm(bytes: &[u8]) -> Result<Array3<f32>> {
    let mut pos = 0usize;
    let magic = read_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1usize,
        "P6" => 3usize,
        other => return Err(Error::Format(format!("unsupported magic {other:?}"))),
    };
    let w: usize = parse_number(&read_token(bytes, &mut pos)?)?;
    let h: usize = parse_number(&read_token(bytes, &mut pos)?)?;
    let maxval: usize = parse_number(&read_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing raster separator".into()));
    }
    pos += 1;
    let need = w * h * channels;
    if bytes.len() - pos != need {
        return Err(Error::Format(format!(
            "raster has {} bytes, expected {need} for {w}x{h}x{channels}",
            bytes.len() - pos
        )));
    }
    let mut img = Array3::<f32>::zeros((channels, h, w));
    let mut i = pos;
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                img[[c, y, x]] = from_byte(bytes[i]);
                i += 1;
            }
        }
    }
    Ok(img)
}

/// Next whitespace-delimited header token, skipping `#` comment lines.
fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_number(tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::Format(format!("bad header number {tok:?}")))
}
