//! Synthetic salient-object scenes.
//!
//! Each scene is a textured gradient background with one to three filled
//! shapes (ellipses, convex polygons, annuli) in a contrasting color. Shapes
//! are rasterized with 4×4 supersampling: the coverage fraction blends the
//! colors and the mask keeps pixels with coverage ≥ 0.5.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::maps::BinaryMask;
use crate::params::stream;
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;
const MIN_SHAPE: f64 = 0.02;
const MAX_SHAPE: f64 = 0.40;
const MAX_FOREGROUND: f64 = 0.80;
const ATTEMPTS: usize = 200;

#[derive(Clone, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    /// Counter-clockwise vertices.
    Polygon(Vec<(f64, f64)>),
    Annulus { cx: f64, cy: f64, outer: f64, inner: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Polygon(ref pts) => pts.iter().zip(pts.iter().cycle().skip(1)).all(|(a, b)| {
                (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
            }),
            Shape::Annulus { cx, cy, outer, inner } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            }
        }
    }

    /// Fraction of each pixel's 4×4 subsamples inside the shape.
    fn coverage(&self, size: usize) -> Vec<f64> {
        let n = SUPERSAMPLE;
        let mut out = vec![0.0; size * size];
        for py in 0..size {
            for px in 0..size {
                let mut hits = 0;
                for sy in 0..n {
                    for sx in 0..n {
                        let x = px as f64 + (sx as f64 + 0.5) / n as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / n as f64;
                        hits += self.contains(x, y) as usize;
                    }
                }
                out[py * size + px] = hits as f64 / (n * n) as f64;
            }
        }
        out
    }
}

fn random_shape(rng: &mut ChaCha8Rng, size: usize, touch_edge: bool) -> Shape {
    let s = size as f64;
    // radius scale drawn so the area lands roughly in the allowed range
    let r = s * rng.gen_range(0.09..0.34);
    let (cx, cy) = if touch_edge {
        let along = rng.gen_range(0.2 * s..0.8 * s);
        let depth = rng.gen_range(0.0..0.6) * r;
        match rng.gen_range(0..4) {
            0 => (depth, along),
            1 => (s - depth, along),
            2 => (along, depth),
            _ => (along, s - depth),
        }
    } else {
        (rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(0.2 * s..0.8 * s))
    };
    match rng.gen_range(0..3) {
        0 => Shape::Ellipse {
            cx,
            cy,
            rx: r,
            ry: r * rng.gen_range(0.45..1.0),
            angle: rng.gen_range(0.0..PI),
        },
        1 => {
            let k = rng.gen_range(3..=7);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..TAU)).collect();
            angles.sort_by(f64::total_cmp);
            let stretch = rng.gen_range(0.6..1.0);
            Shape::Polygon(
                angles
                    .into_iter()
                    .map(|a| (cx + r * 1.2 * a.cos(), cy + r * 1.2 * stretch * a.sin()))
                    .collect(),
            )
        }
        _ => Shape::Annulus {
            cx,
            cy,
            outer: r * 1.1,
            inner: r * 1.1 * rng.gen_range(0.35..0.65),
        },
    }
}

/// Smooth noise: a coarse random lattice, bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / size as f64 * cells as f64;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / size as f64 * cells as f64;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let at = |j: usize, i: usize| lattice[j * (cells + 1) + i];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Color at distance `contrast` from `base`, moving each channel in
/// whichever direction stays inside `[0, 1]`.
fn contrasting(rng: &mut ChaCha8Rng, base: [f64; 3], contrast: f64) -> [f64; 3] {
    let mut dir = [0.0; 3];
    for d in &mut dir {
        *d = rng.gen_range(0.3..1.0);
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = [0.0; 3];
    for c in 0..3 {
        let step = contrast * dir[c] / norm * 3f64.sqrt();
        out[c] = if base[c] + step <= 1.0 && (base[c] - step < 0.0 || rng.gen_bool(0.5)) {
            base[c] + step
        } else {
            (base[c] - step).max(0.0)
        };
    }
    out
}

fn scene(rng: &mut ChaCha8Rng, size: usize) -> Option<Sample> {
    let plane = size * size;
    let count = rng.gen_range(1..=3);
    let mut alpha = vec![0.0f64; plane];
    for _ in 0..count {
        let touch = rng.gen_bool(0.3);
        let cov = (0..ATTEMPTS).find_map(|_| {
            let c = random_shape(rng, size, touch).coverage(size);
            let area = c.iter().filter(|&&v| v >= 0.5).count() as f64 / plane as f64;
            (MIN_SHAPE..=MAX_SHAPE).contains(&area).then_some(c)
        })?;
        alpha.iter_mut().zip(&cov).for_each(|(a, &c)| *a = a.max(c));
    }
    let mask = BinaryMask::new(size, size, alpha.iter().map(|&a| (a >= 0.5) as u8).collect())
        .expect("binary");
    let fraction = mask.foreground_fraction();
    if !(MIN_SHAPE..=MAX_FOREGROUND).contains(&fraction) {
        return None;
    }

    let contrast = rng.gen_range(0.2..0.8);
    let bg0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let drift = rng.gen_range(0.05..0.25);
    let bg1 = contrasting(rng, bg0, drift);
    let fg = contrasting(rng, bg0, contrast);
    let theta = rng.gen_range(0.0..TAU);
    let (gs, gc) = theta.sin_cos();
    let noise = value_noise(rng, size, 4);
    let texture = value_noise(rng, size, 8);
    let mut image = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let t = ((x as f64 / size as f64 - 0.5) * gc + (y as f64 / size as f64 - 0.5) * gs + 0.5)
                .clamp(0.0, 1.0);
            for c in 0..3 {
                let bg = bg0[c] * (1.0 - t) + bg1[c] * t + 0.08 * noise[p];
                let fgc = fg[c] + 0.04 * texture[p];
                let v = bg * (1.0 - alpha[p]) + fgc * alpha[p];
                image[c * plane + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    Some(Sample {
        image: Tensor::new([3, size, size], image).expect("image shape"),
        mask,
    })
}

/// Scene `index` of the dataset with `seed`; independent of every other index.
pub fn generate_one(seed: u64, index: u64, size: usize) -> Result<Sample> {
    let mut rng = stream(seed, &format!("sample.{index}"));
    (0..ATTEMPTS)
        .find_map(|_| scene(&mut rng, size))
        .ok_or_else(|| Error::Dataset(format!("could not place shapes on a {size}×{size} canvas")))
}

/// Generates `spec.count` scenes at `spec.base_size`, in parallel.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count as u64)
        .into_par_iter()
        .map(|i| generate_one(spec.seed, i, spec.base_size))
        .collect()
}
