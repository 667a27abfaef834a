//! 8-bit PNG images and masks.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{quantize_u8, Image, Plane};

/// Decoded 8-bit pixels with their channel count.
struct Raw {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode(bytes: &[u8], source: &str) -> Result<Raw> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png(format!("{source}: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{source}: image too large")))?;
    let mut data = vec![0; size];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| Error::Png(format!("{source}: {e}")))?;
    data.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png(format!("{source}: unexpanded palette"))),
    };
    Ok(Raw {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data,
    })
}

fn read_raw(path: &Path) -> Result<Raw> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Any 8- or 16-bit PNG as RGB in [0, 1]; alpha is dropped.
pub fn decode_image(bytes: &[u8], source: &str) -> Result<Image> {
    let raw = decode(bytes, source)?;
    Ok(raw_to_image(&raw))
}

fn raw_to_image(raw: &Raw) -> Image {
    let mut data = Vec::with_capacity(raw.width * raw.height * 3);
    for px in raw.data.chunks_exact(raw.channels) {
        let rgb = if raw.channels >= 3 {
            [px[0], px[1], px[2]]
        } else {
            [px[0]; 3]
        };
        data.extend(rgb.iter().map(|&v| v as f64 / 255.0));
    }
    Image {
        width: raw.width,
        height: raw.height,
        data,
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    Ok(raw_to_image(&read_raw(path)?))
}

/// Greyscale mask thresholded at 128 into {0, 1}.
pub fn read_mask(path: &Path) -> Result<Plane> {
    let raw = read_raw(path)?;
    let data = raw
        .data
        .chunks_exact(raw.channels)
        .map(|px| if px[0] >= 128 { 1.0 } else { 0.0 })
        .collect();
    Plane::from_data(raw.width, raw.height, data)
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    let data: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    encode(img.width, img.height, png::ColorType::Rgb, &data)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_image(img)?).map_err(|e| Error::io(path, e))
}

pub fn write_mask(path: &Path, mask: &Plane) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    let bytes = encode(mask.width, mask.height, png::ColorType::Grayscale, &data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
