//! Planar RGB raster with values nominally in `[0, 1]`.
//!
//! Stored channel-major (`[3, H, W]`) so it can be fed to the convolution
//! primitives without reshuffling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.dims3("Image::from_tensor")?;
        if c != 3 {
            return Err(Error::shape("Image::from_tensor", "channels", 3, c));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("Image::from_tensor", "empty image"));
        }
        Ok(Self { tensor })
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![3, height, width], data)?)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let n = height * width;
        let tensor = Tensor::from_fn(&[3, height, width], |i| rgb[i / n]);
        Self { tensor }
    }

    /// Interleaved 8-bit RGB, `v / 255`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape("Image::from_rgb8", "byte count", height * width * 3, bytes.len()));
        }
        let n = height * width;
        let tensor = Tensor::from_fn(&[3, height, width], |i| {
            let (c, p) = (i / n, i % n);
            bytes[p * 3 + c] as f64 / 255.0
        });
        Self::from_tensor(tensor)
    }

    /// Interleaved 8-bit RGB with clamping and half-up rounding.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.pixel_count();
        let d = self.tensor.data();
        let mut out = vec![0u8; n * 3];
        for p in 0..n {
            for c in 0..3 {
                out[p * 3 + c] = quantize8(d[c * n + p]);
            }
        }
        out
    }

    /// Round-trips through 8-bit storage.
    pub fn quantized(&self) -> Image {
        Image {
            tensor: self.tensor.map(|v| quantize8(v) as f64 / 255.0),
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn pixel_count(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.tensor.data()[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn clamped(&self) -> Image {
        Image {
            tensor: self.tensor.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.tensor.check_same_shape(&other.tensor, "Image::mean_abs_diff")?;
        let n = self.tensor.len() as f64;
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.tensor.check_same_shape(&other.tensor, "Image::max_abs_diff")?;
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Mirrors the image left-to-right.
    pub fn flipped_horizontal(&self) -> Image {
        let (h, w) = (self.height(), self.width());
        let d = self.data();
        let tensor = Tensor::from_fn(&[3, h, w], |i| {
            let x = i % w;
            d[i - x + (w - 1 - x)]
        });
        Image { tensor }
    }

    /// Loads an 8-bit RGB PNG or PPM. Images with an alpha channel, grayscale
    /// or 16-bit samples are rejected.
    pub fn load(path: &Path) -> Result<Image> {
        let err = |message: String| Error::Image {
            path: path.to_path_buf(),
            message,
        };
        let decoded = image::open(path).map_err(|e| err(e.to_string()))?;
        let rgb = match decoded {
            image::DynamicImage::ImageRgb8(buf) => buf,
            other => return Err(err(format!("expected 8-bit RGB, found {:?}", other.color()))),
        };
        let (w, h) = rgb.dimensions();
        Image::from_rgb8(h as usize, w as usize, rgb.as_raw())
    }

    /// Saves as 8-bit RGB; the format follows the extension (`.png`, `.ppm`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Half-up rounding of `v * 255` after clamping to `[0, 1]`.
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}
