//! Linear RGB images and binary PPM (P6, 8-bit) I/O.
//!
//! Values are stored and written without any sRGB transfer curve: a byte
//! `b` maps to `b / 255`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lie::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major, row 0 at the top.
    pub pixels: Vec<Vec3>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, Vec3::zeros())
    }

    pub fn filled(width: u32, height: u32, value: Vec3) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Vec3>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize);
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn pixel(&self, index: u32) -> Vec3 {
        self.pixels[index as usize]
    }

    pub fn clamp(&mut self) {
        for p in &mut self.pixels {
            *p = p.map(|v| v.clamp(0.0, 1.0));
        }
    }

    pub fn grayscale(&self) -> Image {
        let pixels = self
            .pixels
            .iter()
            .map(|p| Vec3::repeat(0.299 * p.x + 0.587 * p.y + 0.114 * p.z))
            .collect();
        Image::from_pixels(self.width, self.height, pixels)
    }

    /// `a * self + (1 - a) * other`, pixelwise.
    pub fn blend(&self, other: &Image, a: f64) -> Image {
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(p, q)| p * a + q * (1.0 - a))
            .collect();
        Image::from_pixels(self.width, self.height, pixels)
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(p, q)| (p - q).norm_squared())
            .sum();
        sum / (3 * self.pixels.len()) as f64
    }

    pub fn psnr(&self, other: &Image) -> f64 {
        -10.0 * self.mse(other).log10()
    }

    fn quantize(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend(p.iter().map(|&v| Self::quantize(v)));
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
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
            if start == pos {
                return Err(Error::MalformedImage("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::MalformedImage(format!("unsupported magic {:?}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<u32>()
                .map_err(|_| Error::MalformedImage(format!("bad header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::MalformedImage(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width as usize * height as usize;
        let raster = bytes.get(pos..pos + 3 * n).ok_or_else(|| {
            Error::MalformedImage(format!("raster shorter than {width}x{height}"))
        })?;
        let pixels = raster
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
            .collect();
        Ok(Image::from_pixels(width, height, pixels))
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    /// The image as it reads back from an 8-bit PPM.
    pub fn quantized(&self) -> Image {
        let pixels = self
            .pixels
            .iter()
            .map(|p| p.map(|v| Self::quantize(v) as f64 / 255.0))
            .collect();
        Image::from_pixels(self.width, self.height, pixels)
    }
}
