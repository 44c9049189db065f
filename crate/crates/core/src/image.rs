//! Dense image tensors with values in `[0, 1]`, plus PNG decoding helpers.

use std::path::Path;

use image::{DynamicImage, GrayImage, Luma};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// ITU-R BT.601 luma weights.
pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

/// Row-major `height × width × channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image dimensions must be positive");
        ImageTensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::Config(format!(
                "{} values do not form a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::Config("pixel values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut img = Self::filled(height, width, channels, T::zero());
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(y, x, c, clamp01(f(y, x, c)));
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn mean(&self) -> T {
        let sum = self.data.iter().fold(T::zero(), |acc, &v| acc + v);
        sum / T::of(self.data.len() as f64)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Collapses to one channel with BT.601 weights (identity for grayscale).
    pub fn to_grayscale(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let (wr, wg, wb) = (T::of(LUMA_R), T::of(LUMA_G), T::of(LUMA_B));
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| clamp01(wr * px[0] + wg * px[1] + wb * px[2]))
            .collect();
        ImageTensor {
            channels: 1,
            data,
            ..*self
        }
    }

    pub fn from_gray8(img: &GrayImage) -> Self {
        let data = img
            .as_raw()
            .iter()
            .map(|&v| T::of(v as f64 / 255.0))
            .collect();
        ImageTensor {
            height: img.height() as usize,
            width: img.width() as usize,
            channels: 1,
            data,
        }
    }

    /// Quantizes the first channel to an 8-bit grayscale image.
    pub fn to_gray8(&self) -> GrayImage {
        let mut out = GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = (self.get(y, x, 0).as_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
                out.put_pixel(x as u32, y as u32, Luma([v]));
            }
        }
        out
    }

    /// Decodes a PNG and converts it to a single grayscale channel.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_gray8(&load_gray8(path)?))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Decodes an image file to 8-bit grayscale using BT.601 luma for colour input.
pub fn load_gray8(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gray8(&bytes).map_err(|message| Error::Image {
        path: path.to_path_buf(),
        message,
    })
}

pub fn decode_gray8(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    Ok(dynamic_to_gray(&img))
}

fn dynamic_to_gray(img: &DynamicImage) -> GrayImage {
    match img {
        DynamicImage::ImageLuma8(g) => g.clone(),
        other => {
            let rgb = other.to_rgb8();
            GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
                let p = rgb.get_pixel(x, y).0;
                let l = LUMA_R * p[0] as f64 + LUMA_G * p[1] as f64 + LUMA_B * p[2] as f64;
                Luma([l.round().clamp(0.0, 255.0) as u8])
            })
        }
    }
}
