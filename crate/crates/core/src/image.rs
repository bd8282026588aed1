//! Raster images and binary netpbm (P5/P6) readers and writers.
//!
//! Pixels are stored as `f64` in [0, 1]; quantization to bytes happens only
//! at the file boundary (`round(clamp(v) * 255)`), so a byte-derived image
//! written back out is bit-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved row-major raster, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape("image", "data length does not match dimensions"));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn set_rgb8(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        for c in 0..self.channels.min(3) {
            self.set(x, y, c, rgb[c] as f64 / 255.0);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * channels {
            return Err(Error::shape("image", "byte length does not match dimensions"));
        }
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image { width, height, channels, data })
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ── PPM (P6) ─────────────────────────────────────────────────────────

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::InvalidInput("PPM requires 3 channels".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (magic, w, h, maxval, data) = parse_pnm(bytes)?;
    if magic != *b"P6" {
        return Err(Error::Format("not a P6 PPM".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", maxval)));
    }
    let expected = w * h * 3;
    if data.len() < expected {
        return Err(Error::Format("PPM pixel data truncated".into()));
    }
    Image::from_bytes(w, h, 3, &data[..expected])
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let bytes = encode_ppm(img)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

// ── PGM (P5) ─────────────────────────────────────────────────────────

/// Single-channel byte raster, used for masks and heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (magic, w, h, maxval, data) = parse_pnm(bytes)?;
    if magic != *b"P5" {
        return Err(Error::Format("not a P5 PGM".into()));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", maxval)));
    }
    let expected = w * h;
    if data.len() < expected {
        return Err(Error::Format("PGM pixel data truncated".into()));
    }
    Ok(GrayImage { width: w, height: h, pixels: data[..expected].to_vec() })
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_pgm(&bytes)
}

// ── Shared header parsing ────────────────────────────────────────────

/// Parse a binary netpbm header: magic, three decimal fields separated by
/// whitespace/comments, then a single whitespace byte before pixel data.
fn parse_pnm(bytes: &[u8]) -> Result<([u8; 2], usize, usize, usize, &[u8])> {
    if bytes.len() < 2 {
        return Err(Error::Format("truncated header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed netpbm header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format("non-utf8 header".into()))?;
        *field = text.parse::<usize>().map_err(|_| Error::Format("bad header number".into()))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator before pixel data".into()));
    }
    pos += 1;
    Ok((magic, fields[0], fields[1], fields[2], &bytes[pos..]))
}
