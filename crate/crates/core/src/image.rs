use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `H x W x C` pixel grid with values in `[0, 1]`; `C` is 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![height, width, channels], data)?)
    }

    /// Wraps an `[H, W, C]` tensor, rejecting values outside `[0, 1]`.
    pub fn from_tensor(pixels: Tensor) -> Result<Self> {
        let (_, _, c) = pixels.hwc("Image")?;
        if c != 1 && c != 3 {
            return Err(Error::shape("Image", format!("channels must be 1 or 3, got {c}")));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("Image", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Wraps an `[H, W, C]` tensor after clamping every value into `[0, 1]`.
    pub fn from_tensor_clamped(pixels: Tensor) -> Result<Self> {
        pixels.ensure_finite("Image")?;
        Self::from_tensor(pixels.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::from_tensor(Tensor::full(&[height, width, channels], value)?)
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    pub fn data(&self) -> &[f64] {
        self.pixels.data()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels.at(&[y, x, c])
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.pixels.shape() == other.pixels.shape()
    }

    /// Replicates a single channel into three; RGB images pass through.
    pub fn to_rgb(&self) -> Image {
        if self.channels() == 3 {
            return self.clone();
        }
        let data = self.data().iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            pixels: Tensor::from_raw(vec![self.height(), self.width(), 3], data),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height() || left + width > self.width() {
            return Err(Error::invalid(
                "crop",
                format!(
                    "window {height}x{width} at ({top}, {left}) exceeds {}x{}",
                    self.height(),
                    self.width()
                ),
            ));
        }
        let c = self.channels();
        let w = self.width();
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * w + left) * c;
            data.extend_from_slice(&self.data()[start..start + width * c]);
        }
        Ok(Image {
            pixels: Tensor::from_raw(vec![height, width, c], data),
        })
    }

    /// Per-channel minimum and maximum.
    pub fn channel_range(&self) -> Vec<(f64, f64)> {
        let c = self.channels();
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); c];
        for px in self.data().chunks_exact(c) {
            for (r, &v) in out.iter_mut().zip(px) {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.1, 0.2]).is_err());
        let clamped = Image::from_tensor_clamped(Tensor::new(vec![1, 2, 1], vec![-0.5, 1.5]).unwrap()).unwrap();
        assert_eq!(clamped.data(), &[0.0, 1.0]);
    }

    #[test]
    fn crop_and_rgb() {
        let img = Image::new(2, 3, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let c = img.crop(1, 1, 1, 2).unwrap();
        assert_eq!(c.data(), &[0.4, 0.5]);
        assert!(img.crop(1, 2, 1, 2).is_err());
        assert_eq!(img.to_rgb().channels(), 3);
        assert_eq!(img.to_rgb().get(1, 2, 2), 0.5);
    }
}
