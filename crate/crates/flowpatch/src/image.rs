//! Image container and file I/O.
//!
//! Pixels are `f64` in `[0, 1]`, row-major, interleaved channels. PNG is the
//! primary format (8-bit grayscale or RGB); binary PPM (P6) is accepted as a
//! fallback input. Files are sniffed by magic bytes, not extension.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if c != 1 && c != 3 {
            return Err(Error::UnsupportedFormat(format!("{c} channels")));
        }
        if data.len() != h * w * c {
            return Err(Error::DimensionMismatch(format!(
                "{h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    /// Luma conversion with the usual BT.601 weights; grayscale images pass
    /// through unchanged.
    pub fn to_grayscale(&self) -> Image {
        if self.c == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.h * self.w);
        for px in self.data.chunks(3) {
            data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
        }
        Image { h: self.h, w: self.w, c: 1, data }
    }

    /// Bilinear resize. Convenience for arbitrary-size inputs; the editing
    /// model itself runs at a fixed resolution.
    pub fn resize_bilinear(&self, nh: usize, nw: usize) -> Image {
        let mut out = Image::zeros(nh, nw, self.c);
        let sy = self.h as f64 / nh as f64;
        let sx = self.w as f64 / nw as f64;
        for y in 0..nh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, self.h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = fy - y0 as f64;
            for x in 0..nw {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, self.w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = fx - x0 as f64;
                for ch in 0..self.c {
                    let top = self.get(y0, x0, ch) * (1.0 - wx) + self.get(y0, x1, ch) * wx;
                    let bot = self.get(y1, x0, ch) * (1.0 - wx) + self.get(y1, x1, ch) * wx;
                    out.set(y, x, ch, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }
}

/// Load a PNG (8-bit grayscale or RGB; alpha is dropped) or a binary PPM.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes);
    }
    if !bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        return Err(Error::UnsupportedFormat(
            "not a PNG or binary PPM file".into(),
        ));
    }
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let (h, w) = (decoded.height() as usize, decoded.width() as usize);
    match decoded {
        DynamicImage::ImageLuma8(img) => {
            let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
            Image::new(h, w, 1, data)
        }
        DynamicImage::ImageLumaA8(img) => {
            let data = img
                .into_raw()
                .chunks(2)
                .map(|px| px[0] as f64 / 255.0)
                .collect();
            Image::new(h, w, 1, data)
        }
        DynamicImage::ImageRgb8(img) => {
            let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
            Image::new(h, w, 3, data)
        }
        DynamicImage::ImageRgba8(img) => {
            let mut data = Vec::with_capacity(h * w * 3);
            for px in img.into_raw().chunks(4) {
                data.extend(px[..3].iter().map(|&b| b as f64 / 255.0));
            }
            Image::new(h, w, 3, data)
        }
        other => Err(Error::UnsupportedFormat(format!(
            "{:?} pixels (only 8-bit grayscale/RGB supported)",
            other.color()
        ))),
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 2; // after "P6"
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and `#` comment lines between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::UnsupportedFormat("truncated PPM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedFormat("bad PPM header".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = h * w * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::UnsupportedFormat("truncated PPM raster".into()))?;
    let data = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    Image::new(h, w, 3, data)
}

/// Save as 8-bit PNG; values are clamped to `[0, 1]` and rounded to the
/// nearest of 256 levels, so a save/load round trip moves each channel by at
/// most `1/255`.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = if img.c == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let file = fs::File::create(path.as_ref())?;
    let enc = image::codecs::png::PngEncoder::new(std::io::BufWriter::new(file));
    enc.write_image(&bytes, img.w as u32, img.h as u32, color)
        .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("flowpatch-imgio-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn png_round_trip_stays_within_one_level() {
        let img = Image::new(
            5,
            4,
            3,
            (0..60).map(|i| (i as f64 * 0.31) % 1.0).collect(),
        )
        .unwrap();
        let path = tmp("rt.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (5, 4, 3));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn grayscale_uses_luma_weights_and_passes_single_channel_through() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        let g = img.to_grayscale();
        assert!((g.get(0, 0, 0) - (0.299 + 0.587 * 0.5 + 0.114 * 0.25)).abs() < 1e-12);
        let gray = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(gray.to_grayscale(), gray);
    }

    #[test]
    fn ppm_p6_is_accepted_as_input() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let path = tmp("in.ppm");
        std::fs::write(&path, &bytes).unwrap();
        let img = load_png(&path).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 2), 1.0);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        // Minimal 1x1 16-bit grayscale PNG, written with the same encoder.
        let path = tmp("deep.png");
        let file = std::fs::File::create(&path).unwrap();
        let enc = image::codecs::png::PngEncoder::new(file);
        enc.write_image(&[0x12, 0x34], 1, 1, ExtendedColorType::L16)
            .unwrap();
        assert!(matches!(
            load_png(&path),
            Err(Error::UnsupportedFormat(_))
        ));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_png("/nonexistent/nope.png"),
            Err(Error::Io(_))
        ));
    }
}
