use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type Rgb = [u8; 3];

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DataLength {
                shape: vec![height, width, 3],
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn get(&self, y: usize, x: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// `[1, 3, H, W]` with values `v / 127.5 - 1`.
    pub fn to_tensor<E: Scalar>(&self) -> Tensor<E> {
        let plane = self.width * self.height;
        let mut out = vec![E::ZERO; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = E::from_f64(self.data[p * 3 + c] as f64 / 127.5 - 1.0);
            }
        }
        Tensor::new(&[1, 3, self.height, self.width], out).expect("length matches")
    }

    /// Inverse of [`RgbImage::to_tensor`]: `round((x + 1)·127.5)`, clamped.
    pub fn from_tensor<E: Scalar>(t: &Tensor<E>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(Error::Invalid(format!("expected a [1, 3, H, W] image tensor, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        let d = t.data();
        let mut data = vec![0u8; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                let v = libm::round((d[c * plane + p].to_f64() + 1.0) * 127.5);
                data[p * 3 + c] = if v.is_nan() { 0 } else { v.clamp(0.0, 255.0) as u8 };
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Euclidean RGB distance.
pub fn rgb_distance(a: Rgb, b: Rgb) -> f64 {
    let d: f64 = (0..3).map(|c| {
        let v = a[c] as f64 - b[c] as f64;
        v * v
    }).sum();
    libm::sqrt(d)
}

/// Largest per-channel difference.
pub fn linf(a: Rgb, b: Rgb) -> u8 {
    (0..3).map(|c| a[c].abs_diff(b[c])).max().unwrap_or(0)
}
