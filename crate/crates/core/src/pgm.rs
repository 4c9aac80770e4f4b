//! Binary PGM (P5) images with maxval 255.

use crate::error::{Error, Result};

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 || pixels.len() != width * height {
        return Err(Error::validation(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Reads back what [`encode_pgm`] writes: `(width, height, pixels)`.
/// Comments and maxval other than 255 are rejected.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::format("expected a P5 image with maxval 255"));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad PGM dimension `{s}`")))
    };
    let (w, h) = (dim(fields[1])?, dim(fields[2])?);
    let body = bytes.get(pos + 1..).ok_or_else(|| Error::format("missing PGM body"))?;
    if Some(body.len()) != w.checked_mul(h) {
        return Err(Error::format(format!(
            "PGM body has {} bytes, expected {w}x{h}",
            body.len()
        )));
    }
    Ok((w, h, body.to_vec()))
}

/// Linearly maps `[0, max(values)]` onto `[0, 255]`. All-zero or negative
/// maps stay black.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (v.max(0.0) / max * 255.0).round() as u8)
        .collect()
}
