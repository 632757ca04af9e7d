//! Binary morphology, Gaussian smoothing, and the contour weight map.
//!
//! The weight map is `gauss(k · (dilate(y) − erode(y))) + 1`: the morphological
//! gradient of the mask marks a band around every 0/1 transition, the blur
//! softens it, and the `+1` keeps every pixel in the loss.
//!
//! Border rules are complementary: dilation treats out-of-image pixels as 0,
//! erosion treats them as 1. Objects touching the frame therefore get no
//! phantom band along the image edge.

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, Plane};

/// Full square structuring element of odd side length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    size: usize,
}

impl StructuringElement {
    pub fn square(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid("structuring element", format!("size {size} must be odd")));
        }
        Ok(StructuringElement { size })
    }

    pub fn size(self) -> usize {
        self.size
    }

    pub fn radius(self) -> usize {
        self.size / 2
    }
}

/// 1-D sliding-window reduction over rows then columns. A square window of
/// ones is separable for both max and min; clipping the window to the image
/// realizes the border rule, since 0 never raises a max and 1 never lowers a
/// min of binary values.
fn separable(m: &BinaryMask, r: usize, reduce: fn(u8, u8) -> u8, init: u8) -> BinaryMask {
    let (h, w) = m.dims();
    let src = m.data();
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = src[y * w + lo..=y * w + hi].iter().fold(init, |a, &b| reduce(a, b));
        }
    }
    BinaryMask::from_fn(h, w, |y, x| {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        (lo..=hi).fold(init, |a, yy| reduce(a, rows[yy * w + x])) == 1
    })
}

pub fn dilate(m: &BinaryMask, s: StructuringElement) -> BinaryMask {
    if m.data().is_empty() {
        return m.clone();
    }
    separable(m, s.radius(), u8::max, 0)
}

pub fn erode(m: &BinaryMask, s: StructuringElement) -> BinaryMask {
    if m.data().is_empty() {
        return m.clone();
    }
    separable(m, s.radius(), u8::min, 1)
}

/// `dilate(m) − erode(m)`: 1 on the band around transitions.
pub fn gradient_band(m: &BinaryMask, s: StructuringElement) -> BinaryMask {
    let d = dilate(m, s);
    let e = erode(m, s);
    let (h, w) = m.dims();
    let data = d.data().iter().zip(e.data()).map(|(&a, &b)| a - b).collect();
    BinaryMask::new(h, w, data).expect("erosion is contained in dilation")
}

/// 1-D Gaussian taps `exp(−d²/2σ²)` normalized to sum 1.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Normalized `size × size` Gaussian kernel, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    check_gauss(size, sigma)?;
    let t = gaussian_taps(size, sigma);
    Ok(t.iter().flat_map(|&a| t.iter().map(move |&b| a * b)).collect())
}

fn check_gauss(size: usize, sigma: f64) -> Result<()> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid("gaussian_blur", format!("size {size} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("gaussian_blur", format!("sigma {sigma} must be positive")));
    }
    Ok(())
}

/// Zero-padded convolution with a normalized Gaussian. The 2-D kernel is the
/// outer product of the normalized 1-D taps, so it runs as two passes.
pub fn gaussian_blur(x: &Plane, size: usize, sigma: f64) -> Result<Plane> {
    check_gauss(size, sigma)?;
    let taps = gaussian_taps(size, sigma);
    let r = size / 2;
    let (h, w) = x.dims();
    let src = x.data();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                if let Some(sx) = (xx + t).checked_sub(r).filter(|&v| v < w) {
                    acc += k * src[y * w + sx];
                }
            }
            rows[y * w + xx] = acc;
        }
    }
    Ok(Plane::from_fn(h, w, |y, xx| {
        let mut acc = 0.0;
        for (t, &k) in taps.iter().enumerate() {
            if let Some(sy) = (y + t).checked_sub(r).filter(|&v| v < h) {
                acc += k * rows[sy * w + xx];
            }
        }
        acc
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightMapConfig {
    pub k: f64,
    pub se_size: usize,
    pub gauss_size: usize,
    pub gauss_sigma: f64,
}

impl Default for WeightMapConfig {
    fn default() -> Self {
        WeightMapConfig {
            k: 5.0,
            se_size: 5,
            gauss_size: 5,
            gauss_sigma: 1.0,
        }
    }
}

impl WeightMapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::invalid("weight map", format!("k = {} must be positive", self.k)));
        }
        StructuringElement::square(self.se_size)?;
        check_gauss(self.gauss_size, self.gauss_sigma)
    }

    /// Pixels farther than this (Chebyshev) from any transition get weight 1.
    pub fn reach(&self) -> usize {
        self.se_size / 2 + self.gauss_size / 2
    }
}

/// Per-pixel loss weights, every value in `[1, k + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap(Plane);

impl WeightMap {
    /// Wraps a plane, rejecting values below 1.
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(index) = plane.data().iter().position(|v| !(*v >= 1.0)) {
            return Err(Error::CorruptWeightMap {
                index,
                value: plane.data()[index],
            });
        }
        Ok(WeightMap(plane))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        WeightMap(Plane::full(height, width, 1.0))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

pub fn contour_weight_map(y: &BinaryMask, cfg: &WeightMapConfig) -> Result<WeightMap> {
    cfg.validate()?;
    let band = gradient_band(y, StructuringElement::square(cfg.se_size)?);
    let scaled = band.to_plane().map(|v| cfg.k * v);
    let blurred = gaussian_blur(&scaled, cfg.gauss_size, cfg.gauss_sigma)?;
    Ok(WeightMap(blurred.map(|v| v + 1.0)))
}
