//! Image files: PFM for radiance, binary PPM (P6) for LDR frames.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hdr::{LdrFrame, RadianceFrame};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Splits `count` whitespace-separated ASCII header tokens off the front of
/// `bytes`; returns them and the offset just past the single whitespace byte
/// that terminates the last token.
fn header_tokens<'a>(bytes: &'a [u8], count: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(Error::format(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::format(path, "header is not ASCII"))?;
        tokens.push(tok);
    }
    Ok((tokens, pos + 1))
}

fn parse_dim(tok: &str, what: &str, path: &Path) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, format!("invalid {what} {tok:?}"))),
    }
}

/// `PF\n{w} {h}\n-1.0\n` followed by little-endian RGB f32 rows, bottom row first.
pub fn encode_pfm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(crate::error::shape_err!("PFM stores 3 channels, got {c}"));
    }
    let mut buf = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..3 {
                buf.extend_from_slice(&d[ch * plane + y * w + x].as_f32().to_le_bytes());
            }
        }
    }
    Ok(buf)
}

/// Parses a colour PFM of either endianness into `[3, H, W]`.
pub fn decode_pfm<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let (tok, start) = header_tokens(bytes, 4, path)?;
    match tok[0] {
        "PF" => {}
        "Pf" => return Err(Error::format(path, "grayscale PFM (Pf) is not supported")),
        other => return Err(Error::format(path, format!("bad PFM magic {other:?}"))),
    }
    let w = parse_dim(tok[1], "width", path)?;
    let h = parse_dim(tok[2], "height", path)?;
    let scale: f64 = tok[3]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::format(path, format!("invalid PFM scale {:?}", tok[3])))?;
    let little = scale < 0.0;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(12))
        .ok_or_else(|| Error::format(path, "PFM dimensions overflow"))?;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < need {
        return Err(Error::format(path, "truncated PFM payload"));
    }
    if payload.len() > need {
        return Err(Error::format(path, "trailing bytes after PFM payload"));
    }
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (pix, ch) = (i / 3, i % 3);
        let (row, x) = (pix / w, pix % w);
        let y = h - 1 - row;
        data[ch * plane + y * w + x] = T::of(v as f64);
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_pfm<T: Scalar>(frame: &RadianceFrame<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(&frame.image)?).map_err(|e| Error::io(path, e))
}

/// Reads a PFM; the white point is the image maximum (1 for a black image).
pub fn read_pfm<T: Scalar>(path: impl AsRef<Path>) -> Result<RadianceFrame<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let image = decode_pfm(&bytes, path)?;
    RadianceFrame::with_max_white_point(image).map_err(|e| Error::format(path, e.to_string()))
}

/// Sample depth of a PPM file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Binary P6; samples are `round(v · maxval)`, 16-bit samples big-endian.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>, depth: BitDepth) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(crate::error::shape_err!("PPM stores 3 channels, got {c}"));
    }
    let maxval = depth.maxval();
    let mut buf = format!("P6\n{w} {h}\n{maxval}\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for p in 0..plane {
        for ch in 0..3 {
            let v = d[ch * plane + p].as_f64().clamp(0.0, 1.0);
            let q = (v * maxval as f64).round() as u32;
            match depth {
                BitDepth::Eight => buf.push(q as u8),
                BitDepth::Sixteen => buf.extend_from_slice(&(q as u16).to_be_bytes()),
            }
        }
    }
    Ok(buf)
}

pub fn decode_ppm<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Tensor<T>, BitDepth)> {
    let (tok, start) = header_tokens(bytes, 4, path)?;
    match tok[0] {
        "P6" => {}
        "P5" | "P2" | "P3" => {
            return Err(Error::format(path, format!("unsupported PNM format {}", tok[0])))
        }
        other => return Err(Error::format(path, format!("bad PPM magic {other:?}"))),
    }
    let w = parse_dim(tok[1], "width", path)?;
    let h = parse_dim(tok[2], "height", path)?;
    let depth = match tok[3] {
        "255" => BitDepth::Eight,
        "65535" => BitDepth::Sixteen,
        other => return Err(Error::format(path, format!("unsupported maxval {other}"))),
    };
    let bps = if depth == BitDepth::Eight { 1 } else { 2 };
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3 * bps))
        .ok_or_else(|| Error::format(path, "PPM dimensions overflow"))?;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() < need {
        return Err(Error::format(path, "truncated PPM payload"));
    }
    if payload.len() > need {
        return Err(Error::format(path, "trailing bytes after PPM payload"));
    }
    let plane = h * w;
    let maxval = depth.maxval() as f64;
    let mut data = vec![T::zero(); 3 * plane];
    for i in 0..3 * plane {
        let q = match depth {
            BitDepth::Eight => payload[i] as u32,
            BitDepth::Sixteen => u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as u32,
        };
        let (p, ch) = (i / 3, i % 3);
        data[ch * plane + p] = T::of(q as f64 / maxval);
    }
    Ok((Tensor::new(vec![3, h, w], data)?, depth))
}

pub fn write_ppm<T: Scalar>(frame: &LdrFrame<T>, depth: BitDepth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(&frame.image, depth)?).map_err(|e| Error::io(path, e))
}

/// Reads a P6 file as an LDR frame with the given exposure and index.
pub fn read_ppm<T: Scalar>(path: impl AsRef<Path>, exposure: T, frame_index: usize) -> Result<LdrFrame<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (image, _) = decode_ppm(&bytes, path)?;
    LdrFrame::new(image, exposure, frame_index)
}
