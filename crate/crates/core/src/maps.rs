//! Single-channel H×W maps: binary masks, real planes, saliency predictions.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// H×W mask whose values are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(
                "mask",
                format!("{height}×{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid("mask", format!("value {v} is not binary")));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    /// Binarizes a real map at 0.5.
    pub fn threshold(plane: &Plane) -> Self {
        BinaryMask {
            height: plane.height,
            width: plane.width,
            data: plane.data.iter().map(|&v| (v >= 0.5) as u8).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len().max(1) as f64
    }

    pub fn complement(&self) -> Self {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// `true` when every pixel set here is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// 1×1×H×W tensor of 0/1 values.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_fn([1, 1, self.height, self.width], |i| E::from_f64(self.data[i] as f64))
    }
}

/// Real-valued H×W map.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(
                "plane",
                format!("{height}×{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize, value: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Plane {
            height,
            width,
            data,
        }
    }

    /// Takes plane `(n, c)` of a rank-4 tensor.
    pub fn from_tensor<E: Element>(t: &Tensor<E>, n: usize, c: usize) -> Result<Self> {
        let (tn, tc, h, w) = t.dims4()?;
        if n >= tn || c >= tc {
            return Err(Error::invalid("plane", format!("({n}, {c}) outside {:?}", t.shape())));
        }
        Ok(Plane {
            height: h,
            width: w,
            data: t.plane(n, c).iter().map(|v| v.as_f64()).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// 1×1×H×W tensor.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_fn([1, 1, self.height, self.width], |i| E::from_f64(self.data[i]))
    }
}

/// Prediction map with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap(Plane);

impl SaliencyMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(&v) = plane.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("saliency", format!("value {v} outside [0, 1]")));
        }
        Ok(SaliencyMap(plane))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(Plane::from_fn(height, width, f))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    /// Byte value `round(255·v)` used by file output and thresholding.
    pub fn quantized(&self) -> Vec<u8> {
        self.0.data.iter().map(|&v| quantize(v)).collect()
    }

    /// The map as it reads back from an 8-bit file: every value snapped to
    /// `byte / 255`.
    pub fn snapped(&self) -> SaliencyMap {
        SaliencyMap(self.0.map(|v| quantize(v) as f64 / 255.0))
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
