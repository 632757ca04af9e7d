//! Cross-correlation: im2col and a dense matrix product, with a register-blocked
//! path for stride-1 "same" layers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use super::direct::{self, Same};
use crate::tensor::{gemm, with_scratch, Element, Layout, Tensor};

/// Zero padding applied on every side of the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2`, which keeps the spatial size at stride 1.
    Same,
    Explicit(usize),
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(
        x: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (&[n, c_in, h, w], &[c_out, wc_in, kh, kw]) = (x, weight) else {
            return Err(Error::shape("conv2d", x, weight));
        };
        if wc_in != c_in {
            return Err(Error::shape("conv2d", x, weight));
        }
        if bias != [c_out] {
            return Err(Error::shape("conv2d", weight, bias));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}×{kw} must have odd spatial dims"),
            ));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Explicit(p) => (p, p),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {h}×{w}"),
            ));
        }
        let oh = (h + 2 * pad_h - kh) / stride + 1;
        let ow = (w + 2 * pad_w - kw) / stride + 1;
        Ok(ConvGeometry {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 stride-1 unpadded convolution reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.oh, self.ow]
    }

    /// Source row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&v| v < len)
    }
}

/// Output columns `[lo, hi)` whose source column `o·stride + k − pad` lies
/// inside `[0, len)`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    // o·stride + k ≥ pad  and  o·stride + k − pad < len
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<E: Element>(x: &[E], g: &ConvGeometry, cols: &mut [E]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kx, g.stride, g.pad_w, g.w, g.ow);
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_h, g.h) else {
                        out_row.fill(E::zero());
                        continue;
                    };
                    let in_row = &src[iy * g.w..(iy + 1) * g.w];
                    out_row[..lo].fill(E::zero());
                    out_row[hi..].fill(E::zero());
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad_w;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&in_row[first..first + hi - lo]);
                        } else {
                            for (i, v) in out_row[lo..hi].iter_mut().enumerate() {
                                *v = in_row[first + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(cols: &[E], g: &ConvGeometry, dx: &mut [E]) {
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kx, g.stride, g.pad_w, g.w, g.ow);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad_w;
                for oy in 0..g.oh {
                    let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_h, g.h) else {
                        continue;
                    };
                    let in_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let grad_row = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        in_row[first..first + hi - lo]
                            .iter_mut()
                            .zip(grad_row)
                            .for_each(|(d, &v)| *d += v);
                    } else {
                        for (i, &v) in grad_row.iter().enumerate() {
                            in_row[first + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// How a single sample is convolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Strategy {
    /// 1×1 stride-1: the input already is the column matrix.
    Pointwise,
    /// Stride-1, odd kernel, output grid equal to the input grid.
    Direct,
    Im2col,
}



impl ConvGeometry {
    fn strategy(&self) -> Strategy {
        if self.is_pointwise() {
            Strategy::Pointwise
        } else if self.stride == 1
            && self.kh % 2 == 1
            && self.kw % 2 == 1
            && self.oh == self.h
            && self.ow == self.w
        {
            Strategy::Direct
        } else {
            Strategy::Im2col
        }
    }
}

fn forward_sample<E: Element>(
    xs: &[E],
    weight: &[E],
    packed: Option<&[E]>,
    bias: &[E],
    g: &ConvGeometry,
    dst: &mut [E],
) {
    let plane = g.out_plane();
    let patch = g.patch();
    for (c, row) in dst.chunks_mut(plane).enumerate() {
        row.fill(bias[c]);
    }
    match g.strategy() {
        Strategy::Pointwise => gemm(
            g.c_out,
            patch,
            plane,
            weight,
            Layout::Normal(patch),
            xs,
            Layout::Normal(plane),
            E::one(),
            dst,
        ),
        Strategy::Direct => {
            direct::accumulate(xs, packed.expect("packed weights"), &Same::forward(g), dst)
        }
        Strategy::Im2col => with_scratch(patch * plane, |cols| {
            im2col(xs, g, cols);
            gemm(
                g.c_out,
                patch,
                plane,
                weight,
                Layout::Normal(patch),
                cols,
                Layout::Normal(plane),
                E::one(),
                dst,
            );
        }),
    }
}

type ParamGrads<E> = (Option<Vec<E>>, Option<Vec<E>>);

fn backward_sample<E: Element>(
    xs: &[E],
    weight: &[E],
    packed: Option<&[E]>,
    ds: &[E],
    g: &ConvGeometry,
    dx: Option<&mut [E]>,
    need_dparams: bool,
) -> ParamGrads<E> {
    let plane = g.out_plane();
    let patch = g.patch();
    let strategy = g.strategy();
    let pointwise = strategy == Strategy::Pointwise;
    let db = need_dparams.then(|| ds.chunks(plane).map(|r| r.iter().copied().sum()).collect());

    let dw = need_dparams.then(|| {
        let mut dw = vec![E::zero(); g.c_out * patch];
        let mut product = |cols: &[E]| {
            gemm(
                g.c_out,
                plane,
                patch,
                ds,
                Layout::Normal(plane),
                cols,
                Layout::Transposed(plane),
                E::zero(),
                &mut dw,
            )
        };
        if pointwise {
            product(xs);
        } else if strategy == Strategy::Direct && g.kh == 3 && g.kw == 3 {
            dw = direct::weight_grad_3x3(xs, ds, &Same::forward(g));
        } else {
            with_scratch(patch * plane, |cols| {
                im2col(xs, g, cols);
                product(cols);
            });
        }
        dw
    });

    if let Some(dx) = dx {
        if pointwise {
            gemm(
                patch,
                g.c_out,
                plane,
                weight,
                Layout::Transposed(patch),
                ds,
                Layout::Normal(plane),
                E::zero(),
                dx,
            );
        } else if strategy == Strategy::Direct {
            let packed = packed.expect("packed weights");
            direct::accumulate(ds, packed, &Same::transposed(g), dx);
        } else {
            with_scratch(patch * plane, |dcols| {
                gemm(
                    patch,
                    g.c_out,
                    plane,
                    weight,
                    Layout::Transposed(patch),
                    ds,
                    Layout::Normal(plane),
                    E::zero(),
                    dcols,
                );
                col2im(dcols, g, dx);
            });
        }
    }
    (dw, db)
}

pub(crate) fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    g: &ConvGeometry,
) -> Tensor<E> {
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.out_plane();
    let packed = (g.strategy() == Strategy::Direct)
        .then(|| direct::pack_weights(weight.data(), &Same::forward(g), false));
    let mut out = vec![E::zero(); g.n * out_sample];
    out.par_chunks_mut(out_sample.max(1))
        .enumerate()
        .for_each(|(n, dst)| {
            let xs = &x.data()[n * in_sample..(n + 1) * in_sample];
            forward_sample(xs, weight.data(), packed.as_deref(), bias.data(), g, dst);
        });
    Tensor::new(g.output_shape(), out).expect("conv output shape")
}

pub(crate) struct ConvGrads<E> {
    pub dx: Option<Tensor<E>>,
    pub dweight: Option<Tensor<E>>,
    pub dbias: Option<Tensor<E>>,
}

pub(crate) fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    dout: &Tensor<E>,
    g: &ConvGeometry,
    need_dx: bool,
    need_dparams: bool,
) -> ConvGrads<E> {
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.out_plane();
    let packed = (need_dx && g.strategy() == Strategy::Direct)
        .then(|| direct::pack_weights(weight.data(), &Same::transposed(g), true));

    // Input gradients land in disjoint slices of one buffer. Parameter
    // partials are reduced below in sample order so the result does not
    // depend on how rayon schedules the work.
    let mut dx = need_dx.then(|| vec![E::zero(); g.n * in_sample]);
    let sample = |n: usize, d: Option<&mut [E]>| {
        backward_sample(
            &x.data()[n * in_sample..(n + 1) * in_sample],
            weight.data(),
            packed.as_deref(),
            &dout.data()[n * out_sample..(n + 1) * out_sample],
            g,
            d,
            need_dparams,
        )
    };
    let partials: Vec<ParamGrads<E>> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(in_sample.max(1))
            .enumerate()
            .map(|(n, d)| sample(n, Some(d)))
            .collect(),
        None => (0..g.n).into_par_iter().map(|n| sample(n, None)).collect(),
    };

    let mut dweight = need_dparams.then(|| vec![E::zero(); weight.numel()]);
    let mut dbias = need_dparams.then(|| vec![E::zero(); g.c_out]);
    for (pw, pb) in partials {
        if let (Some(acc), Some(p)) = (dweight.as_mut(), pw) {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
        if let (Some(acc), Some(p)) = (dbias.as_mut(), pb) {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d).expect("dx shape")),
        dweight: dweight.map(|d| Tensor::new(weight.shape(), d).expect("dw shape")),
        dbias: dbias.map(|d| Tensor::new([g.c_out], d).expect("db shape")),
    }
}
