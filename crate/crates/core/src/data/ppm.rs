//! Binary PPM (P6), 8 bits per channel.

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Encodes a 3×H×W image in [0, 1] with round-to-nearest quantization.
pub fn encode(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = img.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn header_tokens(bytes: &[u8]) -> Result<([usize; 3], usize)> {
    let mut values = [0usize; 3];
    let mut pos = 2;
    for slot in values.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::load("PPM header truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::load("PPM header has a non-numeric field"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::load("PPM header not terminated by whitespace"));
    }
    Ok((values, pos + 1))
}

/// Decodes a P6 file into a 3×H×W tensor scaled to [0, 1].
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.get(..2) != Some(b"P6".as_slice()) {
        return Err(Error::load("not a binary PPM (missing P6 magic)"));
    }
    let ([w, h, maxval], offset) = header_tokens(bytes)?;
    if maxval != 255 {
        return Err(Error::load(format!("PPM maxval {maxval} unsupported (expected 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::load("PPM has zero size"));
    }
    let plane = w * h;
    let raster = &bytes[offset..];
    if raster.len() != 3 * plane {
        return Err(Error::load(format!(
            "PPM raster has {} bytes, expected {}",
            raster.len(),
            3 * plane
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}
