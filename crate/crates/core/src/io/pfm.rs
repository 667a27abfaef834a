//! Greyscale PFM depth maps.
//!
//! The header scale's sign selects byte order (negative: little-endian) and
//! rows are stored bottom to top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Plane;

pub fn decode_pfm(bytes: &[u8], source: &str) -> Result<Plane> {
    // three whitespace-terminated header tokens, then a single whitespace byte
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(source, 1, "truncated PFM header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::parse(source, 1, "non-ascii header"))?);
    }
    match tokens[0] {
        "Pf" => {}
        "PF" => return Err(Error::Unsupported(format!("{source}: colour PFM where a depth map is expected"))),
        other => return Err(Error::parse(source, 1, format!("bad PFM magic '{other}'"))),
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| Error::parse(source, 2, "bad width"))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| Error::parse(source, 2, "bad height"))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::parse(source, 3, "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(source, 3, "scale must be non-zero"));
    }
    pos += 1;
    let n = width * height;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 4 * n {
        return Err(Error::Unsupported(format!(
            "{source}: expected {} data bytes, found {}",
            4 * n,
            body.len()
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; n];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (k / width, k % width);
        data[(height - 1 - row) * width + col] = v as f64;
    }
    Plane::from_data(width, height, data)
}

/// Encode as little-endian greyscale PFM; values are stored as `f32`.
pub fn encode_pfm(depth: &Plane) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for row in (0..depth.height).rev() {
        for col in 0..depth.width {
            out.extend_from_slice(&(depth.data[row * depth.width + col] as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(path: &Path) -> Result<Plane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, &path.display().to_string())
}

pub fn write_pfm(path: &Path, depth: &Plane) -> Result<()> {
    fs::write(path, encode_pfm(depth)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_fixture() {
        let mut le = b"Pf\n1 1\n-1.0\n".to_vec();
        le.extend_from_slice(&3.5f32.to_le_bytes());
        assert_eq!(decode_pfm(&le, "le").unwrap().data, vec![3.5]);
        let mut be = b"Pf\n1 1\n1.0\n".to_vec();
        be.extend_from_slice(&3.5f32.to_be_bytes());
        assert_eq!(decode_pfm(&be, "be").unwrap().data, vec![3.5]);
    }

    #[test]
    fn rows_are_bottom_up() {
        let mut bytes = b"Pf\n2 2\n-1\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let p = decode_pfm(&bytes, "m").unwrap();
        assert_eq!(p.data, vec![3.0, 4.0, 1.0, 2.0]);
        let enc = encode_pfm(&p);
        assert_eq!(enc[enc.len() - 16..], bytes[bytes.len() - 16..]);
    }

    #[test]
    fn rejects_colour_and_truncation() {
        let mut colour = b"PF\n1 1\n-1.0\n".to_vec();
        colour.extend_from_slice(&[0; 12]);
        assert!(matches!(decode_pfm(&colour, "c"), Err(Error::Unsupported(_))));
        let short = b"Pf\n2 2\n-1.0\n\0\0\0\0".to_vec();
        assert!(decode_pfm(&short, "s").is_err());
    }
}
