//! In-memory images and binary netpbm (PGM/PPM) I/O.
//!
//! Pixels are floats in `[0, 1]`, row-major, channel-interleaved. On disk the
//! supported formats are binary PGM (`P5`, grayscale) and binary PPM (`P6`,
//! RGB) with single-byte samples; values map to `[0, 1]` by dividing by the
//! header maxval and are written back with maxval 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Builds an image, checking the buffer length, channel count and that
    /// every pixel lies in `[0, 1]`.
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::parameter(
                "channels",
                format!("must be 1 or 3, got {channels}"),
            ));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::shape(
                "Image::new",
                format!(
                    "{width}x{height}x{channels} = {}",
                    width * height * channels
                ),
                format!("buffer of {}", pixels.len()),
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::parameter(
                "pixels",
                format!("all values must lie in [0,1], found {bad}"),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Constant-valued image.
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Image::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Reads a binary PGM (`P5`) or PPM (`P6`) file.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_netpbm(&bytes).map_err(|msg| Error::format(path, msg))
}

/// Writes `image` as binary PGM when grayscale, binary PPM when RGB.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(image.pixels.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", image.width, image.height).expect("vec write");
    for &v in &image.pixels {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_netpbm(bytes: &[u8]) -> std::result::Result<Image, String> {
    if bytes.len() < 2 {
        return Err("file too short for a netpbm header".into());
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(format!(
                "bad magic {:?}: only binary P5/P6 are supported",
                String::from_utf8_lossy(other)
            ))
        }
    };
    let mut pos = 2;
    let width = read_header_int(bytes, &mut pos)?;
    let height = read_header_int(bytes, &mut pos)?;
    let maxval = read_header_int(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported (need 1..=255)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(format!(
            "raster truncated: expected {expected} bytes, found {}",
            raster.len()
        ));
    }
    let pixels = raster[..expected]
        .iter()
        .map(|&b| b as f32 / maxval as f32)
        .collect();
    Image::new(width, height, channels, pixels).map_err(|e| e.to_string())
}

/// Next ASCII integer in the header, skipping whitespace and `#` comments.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(b) => return Err(format!("unexpected header byte {:?}", *b as char)),
            None => return Err("truncated header".into()),
        }
    }
    let mut value = 0usize;
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or("header integer overflow")?;
            *pos += 1;
        } else {
            break;
        }
    }
    Ok(value)
}
