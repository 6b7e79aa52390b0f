//! Per-view dense maps: features, depth and class labels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class-map value for pixels without a label.
pub const IGNORE_CLASS: u8 = 255;

/// `height x width x channels` feature image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// 2x2 average pooling (odd trailing rows/columns are dropped).
    pub fn avg_pool2(&self) -> Result<Self> {
        let (h, w) = (self.height / 2, self.width / 2);
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "cannot pool a {}x{} map",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = vec![0.0; h * w * c];
        for r in 0..h {
            for q in 0..w {
                let dst = &mut data[(r * w + q) * c..(r * w + q + 1) * c];
                for (dr, dq) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    for (d, s) in dst.iter_mut().zip(self.pixel(2 * r + dr, 2 * q + dq)) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
        Self::new(h, w, c, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width, self.channels], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, c] => Self::new(h, w, c, t.data().to_vec()),
            s => Err(Error::Data(format!("feature map must be rank 3, got {s:?}"))),
        }
    }
}

/// `height x width` z-depth image in metres; non-positive entries are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Nearest-pixel lookup for a pixel position given in an image of
    /// `image_width x image_height`. `None` when outside the map.
    pub fn sample_nearest(&self, px: [f64; 2], image_width: usize, image_height: usize) -> Option<f64> {
        let u = px[0] * self.width as f64 / image_width as f64;
        let v = px[1] * self.height as f64 / image_height as f64;
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (c, r) = (u.floor() as usize, v.floor() as usize);
        (c < self.width && r < self.height).then(|| self.at(r, c))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w] => Self::new(h, w, t.data().to_vec()),
            s => Err(Error::Data(format!("depth map must be rank 2, got {s:?}"))),
        }
    }
}

/// `height x width` class labels; [`IGNORE_CLASS`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.height, self.width],
            self.data.iter().map(|&c| f64::from(c)).collect(),
        )
        .unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w] => {
                let data = t
                    .data()
                    .iter()
                    .map(|&v| {
                        if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                            Ok(v as u8)
                        } else {
                            Err(Error::Data(format!("invalid class label {v}")))
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok(Self {
                    height: h,
                    width: w,
                    data,
                })
            }
            s => Err(Error::Data(format!("class map must be rank 2, got {s:?}"))),
        }
    }
}
