//! Linear float dump: an ASCII header line `W H 3` followed by `W·H·3`
//! little-endian `f32` values, row-major, channels interleaved.

use std::path::Path;

use gsvton_core::RgbImage;

use crate::error::{IoError, Result};

pub fn encode_raw(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("{} {} 3\n", img.width(), img.height()).into_bytes();
    out.reserve(img.pixels().len() * 12);
    for p in img.pixels() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "header is not text")?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format!("bad header token {t:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let [w, h, 3] = dims[..] else {
        return Err(format!("header {header:?} is not `W H 3`"));
    };
    let body = &bytes[nl + 1..];
    if body.len() != w * h * 12 {
        return Err(format!("expected {} bytes of pixels, found {}", w * h * 12, body.len()));
    }
    let px = body
        .chunks_exact(12)
        .map(|c| core::array::from_fn(|i| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap()) as f64))
        .collect();
    RgbImage::from_pixels(w, h, px).map_err(|e| e.to_string())
}

pub fn save_raw(path: &Path, img: &RgbImage) -> Result<()> {
    super::write_file(path, &encode_raw(img))
}

pub fn load_raw(path: &Path) -> Result<RgbImage> {
    decode_raw(&super::read_file(path)?).map_err(|m| IoError::format(path, m))
}
