//! Resize → flip → crop augmentation.

use rand::Rng;

use super::Sample;
use crate::maps::BinaryMask;
use crate::ops::resample::bilinear_taps;
use crate::tensor::Tensor;

/// Bilinear resize of a C×H×W image.
pub fn resize_image(image: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let &[c, h, w] = image.shape() else {
        panic!("resize_image: expected C×H×W, got {:?}", image.shape());
    };
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let top = wx0 * p[y0 * w + x0] + wx1 * p[y0 * w + x1];
                let bottom = wx0 * p[y1 * w + x0] + wx1 * p[y1 * w + x1];
                out.push(wy0 * top + wy1 * bottom);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("resize shape")
}

/// Nearest-neighbour resize; keeps the mask binary.
pub fn resize_mask(m: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (h, w) = m.dims();
    let pick = |o: usize, input: usize, output: usize| (((o as f64 + 0.5) * input as f64 / output as f64) as usize).min(input - 1);
    BinaryMask::from_fn(out_h, out_w, |y, x| m.get(pick(y, h, out_h), pick(x, w, out_w)))
}

pub fn flip(s: &Sample) -> Sample {
    let &[c, h, w] = s.image.shape() else { unreachable!("sample image is 3×H×W") };
    let d = s.image.data();
    let image = Tensor::from_fn([c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    });
    let mask = BinaryMask::from_fn(h, w, |y, x| s.mask.get(y, w - 1 - x));
    Sample { image, mask }
}

pub fn crop(s: &Sample, y0: usize, x0: usize, size: usize) -> Sample {
    let &[c, h, w] = s.image.shape() else { unreachable!("sample image is 3×H×W") };
    assert!(y0 + size <= h && x0 + size <= w, "crop outside image");
    let d = s.image.data();
    let image = Tensor::from_fn([c, size, size], |i| {
        let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
        d[(ch * h + y0 + y) * w + x0 + x]
    });
    let mask = BinaryMask::from_fn(size, size, |y, x| s.mask.get(y0 + y, x0 + x));
    Sample { image, mask }
}

/// Random choices of one training augmentation, drawn in this order: flip,
/// crop row, crop column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub y0: usize,
    pub x0: usize,
}

impl AugmentPlan {
    pub fn draw(rng: &mut impl Rng, base_size: usize, crop_size: usize) -> Self {
        let slack = base_size - crop_size;
        AugmentPlan {
            flip: rng.gen_bool(0.5),
            y0: rng.gen_range(0..=slack),
            x0: rng.gen_range(0..=slack),
        }
    }

    pub fn apply(&self, s: &Sample, base_size: usize, crop_size: usize) -> Sample {
        let resized = Sample {
            image: resize_image(&s.image, base_size, base_size),
            mask: resize_mask(&s.mask, base_size, base_size),
        };
        let flipped = if self.flip { flip(&resized) } else { resized };
        crop(&flipped, self.y0, self.x0, crop_size)
    }
}

/// Training: resize to `base_size`, random horizontal flip, random
/// `crop_size` crop. Evaluation: resize straight to `crop_size`.
pub fn augment(
    s: &Sample,
    train: bool,
    rng: &mut impl Rng,
    base_size: usize,
    crop_size: usize,
) -> Sample {
    if train {
        AugmentPlan::draw(rng, base_size, crop_size).apply(s, base_size, crop_size)
    } else {
        Sample {
            image: resize_image(&s.image, crop_size, crop_size),
            mask: resize_mask(&s.mask, crop_size, crop_size),
        }
    }
}
