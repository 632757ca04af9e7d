//! Straight-line reference implementations shared by the integration tests.
//! Deliberately naive: nested loops, no im2col, no shared code with the
//! library kernels.
#![allow(dead_code)]

use contour_saliency::Tensor;

pub fn idx(shape: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

/// Stride-1 same-padded cross-correlation.
pub fn conv_same(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, ci, k, _) = w.dims4().unwrap();
    assert_eq!(c, ci);
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros([n, o, h, wd]);
    let shape = out.shape().to_vec();
    for s in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - r;
                                let ix = xx as isize + kx as isize - r;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(s, ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out.data_mut()[idx(&shape, s, oc, y, xx)] = acc;
                }
            }
        }
    }
    out
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

fn bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = (i as f64 * input as f64 / output as f64).floor() as usize;
    let hi = ((i + 1) as f64 * input as f64 / output as f64).ceil() as usize;
    (lo, hi)
}

fn pool(x: &Tensor<f64>, oh: usize, ow: usize, max: bool) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let shape = out.shape().to_vec();
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, y1) = bounds(oy, h, oh);
                    let (x0, x1) = bounds(ox, w, ow);
                    let vals: Vec<f64> = (y0..y1)
                        .flat_map(|y| (x0..x1).map(move |xx| (y, xx)))
                        .map(|(y, xx)| x.at4(s, ch, y, xx))
                        .collect();
                    let v = if max {
                        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    };
                    out.data_mut()[idx(&shape, s, ch, oy, ox)] = v;
                }
            }
        }
    }
    out
}

pub fn max_pool(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    pool(x, oh, ow, true)
}

pub fn avg_pool(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    pool(x, oh, ow, false)
}

/// Half-pixel bilinear resampling, evaluated per output pixel.
pub fn upsample(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    let coord = |o: usize, input: usize, output: usize| {
        let src = ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let shape = out.shape().to_vec();
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = coord(oy, h, oh);
                let fy = fy.min(1.0);
                for ox in 0..ow {
                    let (x0, x1, fx) = coord(ox, w, ow);
                    let fx = fx.min(1.0);
                    let v = (1.0 - fy) * ((1.0 - fx) * x.at4(s, ch, y0, x0) + fx * x.at4(s, ch, y0, x1))
                        + fy * ((1.0 - fx) * x.at4(s, ch, y1, x0) + fx * x.at4(s, ch, y1, x1));
                    out.data_mut()[idx(&shape, s, ch, oy, ox)] = v;
                }
            }
        }
    }
    out
}

pub fn concat(xs: &[&Tensor<f64>]) -> Tensor<f64> {
    let (n, _, h, w) = xs[0].dims4().unwrap();
    let total: usize = xs.iter().map(|t| t.shape()[1]).sum();
    let mut data = Vec::new();
    for s in 0..n {
        for t in xs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[s * c * h * w..(s + 1) * c * h * w]);
        }
    }
    Tensor::new([n, total, h, w], data).unwrap()
}

/// relu(mean over channels of the per-plane standardized input) + λ.
pub fn attention(f: &Tensor<f64>, lambda: f64, eps: f64) -> Tensor<f64> {
    let (n, c, h, w) = f.dims4().unwrap();
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for s in 0..n {
        let mut acc = vec![0.0; h * w];
        for ch in 0..c {
            let plane = f.plane(s, ch);
            let mean = plane.iter().sum::<f64>() / hw;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
            for (a, v) in acc.iter_mut().zip(plane) {
                *a += (v - mean) / (var + eps).sqrt();
            }
        }
        for (i, a) in acc.iter().enumerate() {
            out.data_mut()[s * h * w + i] = (a / c as f64).max(0.0) + lambda;
        }
    }
    out
}

/// Multiplies every channel of `x` by the single-channel `a`.
pub fn broadcast(a: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4().unwrap();
    Tensor::from_fn([n, c, h, w], |i| {
        let s = i / (c * h * w);
        a.data()[s * h * w + i % (h * w)] * x.data()[i]
    })
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

pub fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} > {tol:e}");
}
