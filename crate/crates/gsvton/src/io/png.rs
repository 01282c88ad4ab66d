//! 8-bit PNG in and out. Pixel values in memory are linear; files are sRGB.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use gsvton_core::{LabelMap, Mask, RgbImage};

use super::{read_file, write_file};
use crate::error::{IoError, Result};

/// Linear → sRGB transfer for one channel in `[0, 1]`.
pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// sRGB → linear transfer for one channel in `[0, 1]`.
pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn decode_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| core::array::from_fn(|i| srgb_to_linear(i as f64 / 255.0)))
}

pub fn encode_u8(v: f64) -> u8 {
    (linear_to_srgb(v) * 255.0).round() as u8
}

pub fn decode_u8(b: u8) -> f64 {
    decode_lut()[b as usize]
}

fn write_png<W: Write>(out: W, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> std::io::Result<()> {
    let mut enc = png::Encoder::new(out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

pub fn encode_rgb(img: &RgbImage) -> Vec<u8> {
    let data: Vec<u8> = img.pixels().iter().flat_map(|p| p.map(encode_u8)).collect();
    let mut out = Vec::new();
    write_png(&mut out, img.width(), img.height(), png::ColorType::Rgb, &data).expect("in-memory write");
    out
}

/// Raw 8-bit grayscale PNG, no transfer curve.
pub fn encode_gray(w: usize, h: usize, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    write_png(&mut out, w, h, png::ColorType::Grayscale, data).expect("in-memory write");
    out
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode<R: Read>(r: R) -> std::result::Result<Decoded, String> {
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err("indexed PNG was not expanded".into()),
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

/// Decodes any 8/16-bit PNG to linear RGB. Alpha is dropped.
pub fn decode_rgb(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let d = decode(bytes)?;
    let px = d
        .data
        .chunks_exact(d.channels)
        .map(|c| match d.channels {
            1 | 2 => [decode_u8(c[0]); 3],
            _ => [decode_u8(c[0]), decode_u8(c[1]), decode_u8(c[2])],
        })
        .collect();
    RgbImage::from_pixels(d.width, d.height, px).map_err(|e| e.to_string())
}

/// Decodes a grayscale PNG to its raw bytes.
pub fn decode_gray(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let d = decode(bytes)?;
    if d.channels != 1 {
        return Err(format!("expected a grayscale PNG, got {} channels", d.channels));
    }
    Ok((d.width, d.height, d.data))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&read_file(path)?).map_err(|m| IoError::format(path, m))
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &encode_rgb(img))
}

/// Label maps are stored as grayscale PNG with the label as the value.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let (w, h, data) = decode_gray(&read_file(path)?).map_err(|m| IoError::format(path, m))?;
    Ok(LabelMap::new(w, h, data)?)
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let (w, h) = labels.dims();
    write_file(path, &encode_gray(w, h, labels.labels()))
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let data: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_gray(mask.width(), mask.height(), &data)
}

/// Any nonzero value is set.
pub fn decode_mask(bytes: &[u8]) -> std::result::Result<Mask, String> {
    let (w, h, data) = decode_gray(bytes)?;
    Mask::from_bits(w, h, data.into_iter().map(|v| v != 0).collect()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_byte_survives_decode_then_encode() {
        for b in 0..=255u8 {
            assert_eq!(encode_u8(decode_u8(b)), b);
        }
    }

    #[test]
    fn transfer_endpoints() {
        assert_eq!(encode_u8(0.0), 0);
        assert_eq!(encode_u8(1.0), 255);
        assert_eq!(encode_u8(-3.0), 0);
        assert_eq!(decode_u8(255), 1.0);
        assert!((linear_to_srgb(0.5) - 0.735_356_983_052_449_4).abs() < 1e-12);
    }

    #[test]
    fn rgb_roundtrip_is_stable_after_quantization() {
        let img = RgbImage::from_fn(7, 5, |x, y| [x as f64 / 6.0, y as f64 / 4.0, 0.3]);
        let once = decode_rgb(&encode_rgb(&img)).unwrap();
        let twice = decode_rgb(&encode_rgb(&once)).unwrap();
        assert_eq!(once, twice);
        assert_eq!(encode_rgb(&once), encode_rgb(&img));
    }

    #[test]
    fn mask_roundtrip() {
        let m = Mask::from_fn(9, 4, |x, y| (x * y) % 3 == 1);
        assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
    }
}
