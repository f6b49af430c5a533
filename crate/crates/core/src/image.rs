//! RGB image tensors in `[-1, 1]` and their 8-bit PNG form.

use std::io::Cursor;
use std::path::Path;

use facemark_tensor::Tensor;
use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};

/// `3×H×W` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    /// Wraps a `[3, H, W]` (or `[1, 3, H, W]`) tensor, checking the value range.
    pub fn new(t: Tensor) -> Result<Self> {
        let t = if t.rank() == 4 && t.shape()[0] == 1 {
            let s = t.shape()[1..].to_vec();
            t.reshape(&s)
        } else {
            t
        };
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "expected a 3×H×W image, got {:?}",
                t.shape()
            )));
        }
        if !t.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
            return Err(Error::Shape("image values outside [-1, 1]".into()));
        }
        Ok(Self { data: t })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = height * width;
        Self {
            data: Tensor::from_fn(&[3, height, width], |i| rgb[i / plane]),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    /// `[1, 3, H, W]` copy for feeding a network.
    pub fn to_batch(&self) -> Tensor {
        let s = self.data.shape();
        self.data.clone().reshape(&[1, s[0], s[1], s[2]])
    }

    /// Stacks images into `[N, 3, H, W]`.
    pub fn batch(images: &[&ImageTensor]) -> Tensor {
        let items: Vec<Tensor> = images.iter().map(|i| i.to_batch()).collect();
        Tensor::stack_batch(&items)
    }

    /// Item `n` of an `[N, 3, H, W]` batch.
    pub fn from_batch(t: &Tensor, n: usize) -> Result<Self> {
        Self::new(t.batch_item(n))
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let d = self.data.data();
        [d[y * w + x], d[h * w + y * w + x], d[2 * h * w + y * w + x]]
    }

    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::Shape(format!(
                "image {:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        Ok(self
            .data
            .data()
            .iter()
            .zip(other.data.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.numel() as f64)
    }

    /// 8-bit quantization `(v + 1) · 127.5`.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let q = |v: f64| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb([q(p[0]), q(p[1]), q(p[2])])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = h * w;
        let data = Tensor::from_fn(&[3, h, w], |i| {
            let c = i / plane;
            let y = (i % plane) / w;
            let x = i % w;
            img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0
        });
        Self { data }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: "<memory>".into(),
                message: e.to_string(),
            })?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| {
            Error::Image {
                path: "<memory>".into(),
                message: e.to_string(),
            }
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 1 {
            return Ok(self.clone());
        }
        if self.height() % factor != 0 || self.width() % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} not divisible by {factor}",
                self.height(),
                self.width()
            )));
        }
        let pooled = facemark_tensor::conv::avg_pool(&self.to_batch(), factor);
        Self::new(pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_quantization_round_trips_8bit_values() {
        let img = ImageTensor::new(Tensor::from_fn(&[3, 4, 5], |i| {
            (i % 256) as f64 / 127.5 - 1.0
        }))
        .unwrap();
        let back = ImageTensor::decode_png(&img.png_bytes().unwrap()).unwrap();
        assert!(back.mean_abs_diff(&img).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageTensor::new(Tensor::full(&[3, 2, 2], 1.5)).is_err());
        assert!(ImageTensor::new(Tensor::full(&[4, 2, 2], 0.0)).is_err());
    }

    #[test]
    fn extremes_quantize_to_0_and_255() {
        let img = ImageTensor::filled(1, 2, [-1.0, 1.0, 0.0]);
        let rgb = img.to_rgb8();
        assert_eq!(rgb.get_pixel(0, 0).0, [0, 255, 128]);
    }
}
