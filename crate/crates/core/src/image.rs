//! Multi-channel floating-point images and frame output.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::neural::rng;

/// Row-major `height x width x channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::dims(
                "image buffer length",
                width * height * channels,
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// First `n` channels as a new image.
    pub fn leading_channels(&self, n: usize) -> Result<Image> {
        if n > self.channels {
            return Err(Error::dims("image channels", n, self.channels));
        }
        let mut out = Image::new(self.width, self.height, n);
        for (dst, src) in out.data.chunks_exact_mut(n).zip(self.data.chunks_exact(self.channels)) {
            dst.copy_from_slice(&src[..n]);
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Binary P6 PPM of the first three channels, clamped to `[0, 1]`.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.channels < 3 {
            return Err(Error::dims("PPM channels", 3, self.channels));
        }
        let mut out = Vec::with_capacity(self.width * self.height * 3 + 20);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        for px in self.data.chunks_exact(self.channels) {
            for &v in &px[..3] {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a binary P6 PPM with maxval 255.
    pub fn read_ppm(path: &Path) -> Result<Image> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Invalid(format!("{}: truncated PPM header", path.display())));
            }
            let line = line.split('#').next().unwrap_or("");
            tokens.extend(line.split_whitespace().map(str::to_string));
        }
        if tokens[0] != "P6" {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "P6".into(),
            });
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Invalid(format!("{}: bad PPM header field {s}", path.display())))
        };
        let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(Error::Invalid(format!(
                "{}: only maxval 255 is supported",
                path.display()
            )));
        }
        let mut bytes = vec![0u8; w * h * 3];
        reader.read_exact(&mut bytes).map_err(|_| Error::Truncated {
            name: path.display().to_string(),
            needed: w * h * 3,
            available: 0,
        })?;
        Ok(Image {
            width: w,
            height: h,
            channels: 3,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// Raw little-endian f32 dump plus a `<path>.json` shape header.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
        let header = serde_json::json!({
            "dtype": "f32",
            "layout": "hwc",
            "shape": [self.height, self.width, self.channels],
        });
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }
}

/// Foreground mask of a background-removed portrait (any channel above `1e-3`).
pub fn portrait_mask(image: &Image) -> Vec<bool> {
    image
        .data
        .chunks_exact(image.channels)
        .map(|px| px.iter().any(|&v| v > 1e-3))
        .collect()
}

/// Synthetic background-removed portrait: a textured head disc centred in
/// the frame over a shoulder band across the lower part of the image.
pub fn synthetic_portrait(width: usize, height: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let noise: Vec<f32> = (0..64).map(|_| r.gen_range(-0.08f32..0.08)).collect();
    let (cx, cy) = (width as f32 * 0.5, height as f32 * 0.5);
    let radius = 0.3 * width.min(height) as f32;
    Image::from_fn(width, height, 3, |x, y, c| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
        let n = noise[(x / 4 * 7 + y / 4 * 13 + c) % noise.len()];
        if d <= radius {
            let skin = [0.85, 0.65, 0.55][c];
            (skin * (1.0 - 0.3 * d / radius) + n).clamp(0.0, 1.0)
        } else if py >= 0.62 * height as f32 && (px - cx).abs() <= 0.48 * width as f32 {
            let cloth = [0.2, 0.3, 0.6][c];
            (cloth + n).clamp(0.0, 1.0)
        } else {
            0.0
        }
    })
}
