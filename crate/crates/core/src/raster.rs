//! RGB float images and binary PPM (P6) encoding.

use std::fs;
use std::path::Path;

use base64::Engine;
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("malformed PPM: {0}")]
    Malformed(String),
    #[error("image io: {0}")]
    Io(#[from] std::io::Error),
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
}

/// `height x width x 3` image with channel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, RasterError> {
        // Header: magic, width, height, maxval separated by whitespace; comments allowed.
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(RasterError::Malformed("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(RasterError::Malformed(format!("unsupported magic {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| RasterError::Malformed(format!("bad header field {s:?}")));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(RasterError::Malformed(format!("unsupported maxval {maxval}")));
        }
        let data = bytes.get(i + 1..).ok_or_else(|| RasterError::Malformed("missing pixel data".into()))?;
        if data.len() < w * h * 3 {
            return Err(RasterError::Malformed(format!("expected {} pixel bytes, found {}", w * h * 3, data.len())));
        }
        let pixels = data[..w * h * 3].iter().map(|&b| b as f32 / maxval as f32).collect();
        Ok(Self { width: w, height: h, pixels })
    }

    pub fn to_base64_ppm(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(self.to_ppm())
    }

    pub fn from_base64_ppm(s: &str) -> Result<Self, RasterError> {
        Self::from_ppm(&base64::engine::general_purpose::STANDARD.decode(s.trim())?)
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), RasterError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self, RasterError> {
        Self::from_ppm(&fs::read(path)?)
    }

    /// Quantizes through 8 bits, matching what a PPM round trip yields.
    pub fn quantized(&self) -> Self {
        let pixels = self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Self { pixels, ..*self }
    }

    /// Draws a one-pixel rectangle outline for a normalized box.
    pub fn draw_box(&mut self, b: &BBox, rgb: [f32; 3]) {
        let clip = b.clipped();
        let to_px = |v: f32, n: usize| ((v * n as f32).floor() as isize).clamp(0, n as isize - 1) as usize;
        let (x0, x1) = (to_px(clip.x0(), self.width), to_px(clip.x1(), self.width));
        let (y0, y1) = (to_px(clip.y0(), self.height), to_px(clip.y1(), self.height));
        for x in x0..=x1 {
            self.set(x, y0, rgb);
            self.set(x, y1, rgb);
        }
        for y in y0..=y1 {
            self.set(x0, y, rgb);
            self.set(x1, y, rgb);
        }
    }
}
