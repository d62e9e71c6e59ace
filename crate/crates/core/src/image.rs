//! `C×H×W` images with values in `[0, 1]`.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image height and width must be divisible by 4, got {height}×{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "expected {} pixel values for {channels}×{height}×{width}, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks equally shaped images into a `(B, C, H, W)` tensor.
    pub fn stack(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack an empty image list".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(images.len() * first.len());
        for im in images {
            if im.shape() != shape {
                return Err(Error::InvalidArgument(format!(
                    "cannot stack {:?} with {:?}",
                    im.shape(),
                    shape
                )));
            }
            data.extend_from_slice(&im.data);
        }
        let t = Tensor::from_vec(data, (images.len(), shape.0, shape.1, shape.2), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits a `(B, C, H, W)` tensor into images. Values are clamped into `[0, 1]` to
    /// absorb dtype rounding at the range boundaries.
    pub fn unstack(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        flat.chunks_exact(c * h * w)
            .take(b)
            .map(|chunk| {
                let data = chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                ImageTensor::new(c, h, w, data)
            })
            .collect()
    }

    /// Mean squared error over all `C·H·W` elements.
    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Interleaved `H×W×C` layout used by raster image buffers.
    pub fn to_hwc(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out[(y * self.width + x) * self.channels + c] = self.get(c, y, x);
                }
            }
        }
        out
    }

    pub fn from_hwc(channels: usize, height: usize, width: usize, hwc: &[f32]) -> Result<Self> {
        if hwc.len() != channels * height * width {
            return Err(Error::InvalidArgument("interleaved buffer has the wrong length".into()));
        }
        let mut data = vec![0.0; hwc.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data[(c * height + y) * width + x] = hwc[(y * width + x) * channels + c].clamp(0.0, 1.0);
                }
            }
        }
        Self::new(channels, height, width, data)
    }
}
