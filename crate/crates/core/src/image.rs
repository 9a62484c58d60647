use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Three-channel planar (CHW) image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "{} values do not form a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::filled(height, width, 0.0);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    img.set(c, y, x, f(c, y, x));
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &Image) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "image 3x{}x{} vs 3x{}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn hadamard(&self, other: &Image) -> Result<Image> {
        self.check_shape(other)?;
        Ok(Image {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
            ..*self
        })
    }

    /// `[0, 1] -> [-1, 1]` via `2x - 1`.
    pub fn encode(&self) -> Image {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// Inverse of [`encode`](Self::encode).
    pub fn decode(&self) -> Image {
        self.map(|v| (v + 1.0) / 2.0)
    }

    pub fn channel_means(&self) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        for (c, o) in out.iter_mut().enumerate() {
            let ch = self.channel(c);
            *o = ch.iter().sum::<f64>() / ch.len() as f64;
        }
        out
    }

    pub fn rmse(&self, other: &Image) -> Result<f64> {
        self.check_shape(other)?;
        let se: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((se / self.data.len() as f64).sqrt())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![CHANNELS as u64, self.height as u64, self.width as u64],
            self.data.clone(),
        )
        .expect("image buffer matches its dims")
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[3, h, w] => Image::new(h as usize, w as usize, t.data),
            d => Err(Error::format(format!("expected 3xHxW tensor, got dims {d:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor(Tensor::load(path)?)
    }
}
