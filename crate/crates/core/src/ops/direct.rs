//! Register-blocked stride-1 "same" convolution.
//!
//! im2col multiplies a `patch × plane` column matrix that is rebuilt for every
//! sample; with narrow layers that copy dominates. Here the input is padded
//! once and each 8-wide strip of output pixels for 8 output channels is held
//! in a fixed accumulator block while the taps stream past. Each output
//! element is accumulated in a fixed order, so every instruction set yields
//! the same bits.

use super::conv::ConvGeometry;
use crate::tensor::{with_scratch, Element};

const LANES: usize = 8;
const BLOCK: usize = 8;

/// Geometry of a stride-1 convolution whose output grid equals its input grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Same {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Same {
    pub fn forward(g: &ConvGeometry) -> Self {
        Same { c_in: g.c_in, c_out: g.c_out, h: g.h, w: g.w, kh: g.kh, kw: g.kw }
    }

    /// The input gradient is a "same" convolution of the output gradient with
    /// the flipped, channel-transposed kernel.
    pub fn transposed(g: &ConvGeometry) -> Self {
        Same { c_in: g.c_out, c_out: g.c_in, ..Self::forward(g) }
    }

    fn padded_width(&self) -> usize {
        self.w.next_multiple_of(LANES) + self.kw - 1
    }

    fn padded_height(&self) -> usize {
        self.h + self.kh - 1
    }
}

/// Lays weights out as `[c_out block][c_in][tap][BLOCK]`, zero-filling the
/// spare channels of the last block. `flip` reads the kernel of the
/// transposed convolution.
pub(crate) fn pack_weights<E: Element>(weight: &[E], s: &Same, flip: bool) -> Vec<E> {
    let cop = s.c_out.next_multiple_of(BLOCK);
    let taps = s.kh * s.kw;
    let mut packed = vec![E::zero(); s.c_in * taps * cop];
    for co in 0..s.c_out {
        let (cb, c) = (co / BLOCK, co % BLOCK);
        for ci in 0..s.c_in {
            for t in 0..taps {
                packed[((cb * s.c_in + ci) * taps + t) * BLOCK + c] = if flip {
                    // the stored kernel is [ci][co] from this side
                    weight[(ci * s.c_out + co) * taps + (taps - 1 - t)]
                } else {
                    weight[(co * s.c_in + ci) * taps + t]
                };
            }
        }
    }
    packed
}

/// `dst += conv(src, packed)` over one sample.
pub(crate) fn accumulate<E: Element>(src: &[E], packed: &[E], s: &Same, dst: &mut [E]) {
    let (hp, wp) = (s.padded_height(), s.padded_width());
    let (ph, pw) = ((s.kh - 1) / 2, (s.kw - 1) / 2);
    with_scratch(s.c_in * hp * wp, |pad: &mut [E]| {
        pad.fill(E::zero());
        for ci in 0..s.c_in {
            for y in 0..s.h {
                let at = (ci * hp + y + ph) * wp + pw;
                pad[at..at + s.w].copy_from_slice(&src[(ci * s.h + y) * s.w..][..s.w]);
            }
        }
        run(pad, packed, s, dst);
    });
}

fn run<E: Element>(pad: &[E], packed: &[E], s: &Same, dst: &mut [E]) {
    #[cfg(target_arch = "x86_64")]
    if let (Some(pad), Some(packed), Some(dst)) = (f32s(pad), f32s(packed), f32s_mut(dst)) {
        if std::is_x86_feature_detected!("avx") {
            // SAFETY: the feature was just detected on this CPU.
            return unsafe { avx::forward(pad, packed, s, dst) };
        }
    }
    body(pad, packed, s, dst)
}

fn body<E: Element>(pad: &[E], packed: &[E], s: &Same, dst: &mut [E]) {
    let (hp, wp) = (s.padded_height(), s.padded_width());
    let taps = s.kh * s.kw;
    let plane = s.h * s.w;
    for (b, weights) in packed.chunks_exact(s.c_in * taps * BLOCK).enumerate() {
        let cb = b * BLOCK;
        let width = BLOCK.min(s.c_out - cb);
        for y in 0..s.h {
            for x0 in (0..s.w).step_by(LANES) {
                let mut acc = [[E::zero(); LANES]; BLOCK];
                for ci in 0..s.c_in {
                    for ky in 0..s.kh {
                        let row = &pad[(ci * hp + y + ky) * wp + x0..];
                        for kx in 0..s.kw {
                            let t = ((ci * s.kh + ky) * s.kw + kx) * BLOCK;
                            let wv = &weights[t..t + BLOCK];
                            for (a, &w) in acc.iter_mut().zip(wv) {
                                for (a, &v) in a.iter_mut().zip(&row[kx..kx + LANES]) {
                                    *a += w * v;
                                }
                            }
                        }
                    }
                }
                let len = LANES.min(s.w - x0);
                for (c, a) in acc.iter().enumerate().take(width) {
                    let out = &mut dst[(cb + c) * plane + y * s.w + x0..][..len];
                    for (o, &v) in out.iter_mut().zip(a) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Views a generic slice as `f32` when that is what it holds.
#[cfg(target_arch = "x86_64")]
fn f32s<E: Element>(v: &[E]) -> Option<&[f32]> {
    (std::any::TypeId::of::<E>() == std::any::TypeId::of::<f32>())
        // SAFETY: E is f32.
        .then(|| unsafe { std::slice::from_raw_parts(v.as_ptr().cast(), v.len()) })
}

#[cfg(target_arch = "x86_64")]
fn f32s_mut<E: Element>(v: &mut [E]) -> Option<&mut [f32]> {
    (std::any::TypeId::of::<E>() == std::any::TypeId::of::<f32>())
        // SAFETY: E is f32.
        .then(|| unsafe { std::slice::from_raw_parts_mut(v.as_mut_ptr().cast(), v.len()) })
}

/// Hand-vectorized `f32` kernels. Multiplies and adds stay separate
/// instructions, so every lane matches the portable code bit for bit.
#[cfg(target_arch = "x86_64")]
mod avx {
    use super::{Same, BLOCK, LANES};
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx")]
    pub(super) unsafe fn forward(pad: &[f32], packed: &[f32], s: &Same, dst: &mut [f32]) {
        let (hp, wp) = (s.padded_height(), s.padded_width());
        let taps = s.kh * s.kw;
        let plane = s.h * s.w;
        let block_len = s.c_in * taps * BLOCK;
        assert_eq!(pad.len(), s.c_in * hp * wp);
        assert_eq!(packed.len() % block_len.max(1), 0);
        assert_eq!(dst.len(), s.c_out * plane);
        for (b, weights) in packed.chunks_exact(block_len).enumerate() {
            let cb = b * BLOCK;
            let width = BLOCK.min(s.c_out - cb);
            for y in 0..s.h {
                for x0 in (0..s.w).step_by(LANES) {
                    let mut acc = [_mm256_setzero_ps(); BLOCK];
                    let mut w = weights.as_ptr();
                    for ci in 0..s.c_in {
                        for ky in 0..s.kh {
                            // row start + kx + LANES never passes the padded row
                            let row = pad.as_ptr().add((ci * hp + y + ky) * wp + x0);
                            for kx in 0..s.kw {
                                let v = _mm256_loadu_ps(row.add(kx));
                                for (c, a) in acc.iter_mut().enumerate() {
                                    let wc = _mm256_broadcast_ss(&*w.add(c));
                                    *a = _mm256_add_ps(*a, _mm256_mul_ps(wc, v));
                                }
                                w = w.add(BLOCK);
                            }
                        }
                    }
                    let len = LANES.min(s.w - x0);
                    let mut lanes = [0f32; LANES];
                    for (c, a) in acc.iter().enumerate().take(width) {
                        _mm256_storeu_ps(lanes.as_mut_ptr(), *a);
                        let out = &mut dst[(cb + c) * plane + y * s.w + x0..][..len];
                        for (o, &v) in out.iter_mut().zip(&lanes) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }

    #[target_feature(enable = "avx")]
    pub(super) unsafe fn weight_grad_3x3(pad: &[f32], dt: &[f32], s: &Same, dw: &mut [f32]) {
        let (hp, wp) = (s.padded_height(), s.padded_width());
        let cop = s.c_out.next_multiple_of(BLOCK);
        assert_eq!(pad.len(), s.c_in * hp * wp);
        assert_eq!(dt.len(), s.h * s.w * cop);
        assert_eq!(dw.len(), s.c_out * s.c_in * 9);
        for cb in (0..cop).step_by(BLOCK) {
            let width = BLOCK.min(s.c_out - cb);
            for ci in 0..s.c_in {
                let mut acc = [_mm256_setzero_ps(); 9];
                for y in 0..s.h {
                    let rows = [0, 1, 2].map(|ky| pad.as_ptr().add((ci * hp + y + ky) * wp));
                    let mut d = dt.as_ptr().add(y * s.w * cop + cb);
                    for x in 0..s.w {
                        let dv = _mm256_loadu_ps(d);
                        for (t, a) in acc.iter_mut().enumerate() {
                            let v = _mm256_broadcast_ss(&*rows[t / 3].add(x + t % 3));
                            *a = _mm256_add_ps(*a, _mm256_mul_ps(dv, v));
                        }
                        d = d.add(cop);
                    }
                }
                let mut lanes = [0f32; BLOCK];
                for (t, a) in acc.iter().enumerate() {
                    _mm256_storeu_ps(lanes.as_mut_ptr(), *a);
                    for (c, &v) in lanes.iter().enumerate().take(width) {
                        dw[((cb + c) * s.c_in + ci) * 9 + t] = v;
                    }
                }
            }
        }
    }
}

/// Weight gradient of a 3×3 "same" convolution for one sample, as
/// `[c_out][c_in][9]`. Output channels sit in the vector lanes and every
/// weight sums its pixels in raster order.
pub(crate) fn weight_grad_3x3<E: Element>(src: &[E], ds: &[E], s: &Same) -> Vec<E> {
    debug_assert!(s.kh == 3 && s.kw == 3);
    let (hp, wp) = (s.padded_height(), s.padded_width());
    let cop = s.c_out.next_multiple_of(BLOCK);
    let plane = s.h * s.w;
    // gradient transposed to [pixel][c_out], spare channels zero
    let mut dt = vec![E::zero(); plane * cop];
    for co in 0..s.c_out {
        for (p, &v) in ds[co * plane..(co + 1) * plane].iter().enumerate() {
            dt[p * cop + co] = v;
        }
    }
    let mut dw = vec![E::zero(); s.c_out * s.c_in * 9];
    with_scratch(s.c_in * hp * wp, |pad: &mut [E]| {
        pad.fill(E::zero());
        for ci in 0..s.c_in {
            for y in 0..s.h {
                let at = (ci * hp + y + 1) * wp + 1;
                pad[at..at + s.w].copy_from_slice(&src[(ci * s.h + y) * s.w..][..s.w]);
            }
        }
        run_dw(pad, &dt, s, &mut dw);
    });
    dw
}

fn run_dw<E: Element>(pad: &[E], dt: &[E], s: &Same, dw: &mut [E]) {
    #[cfg(target_arch = "x86_64")]
    if let (Some(pad), Some(dt), Some(dw)) = (f32s(pad), f32s(dt), f32s_mut(dw)) {
        if std::is_x86_feature_detected!("avx") {
            // SAFETY: the feature was just detected on this CPU.
            return unsafe { avx::weight_grad_3x3(pad, dt, s, dw) };
        }
    }
    dw_body(pad, dt, s, dw)
}

fn dw_body<E: Element>(pad: &[E], dt: &[E], s: &Same, dw: &mut [E]) {
    let (hp, wp) = (s.padded_height(), s.padded_width());
    let cop = s.c_out.next_multiple_of(BLOCK);
    for cb in (0..cop).step_by(BLOCK) {
        let width = BLOCK.min(s.c_out - cb);
        for ci in 0..s.c_in {
            let mut acc = [[E::zero(); BLOCK]; 9];
            for y in 0..s.h {
                let rows = [0, 1, 2].map(|ky| &pad[(ci * hp + y + ky) * wp..][..wp]);
                for x in 0..s.w {
                    let at = (y * s.w + x) * cop + cb;
                    let d: &[E; BLOCK] = dt[at..at + BLOCK].try_into().unwrap();
                    for (t, a) in acc.iter_mut().enumerate() {
                        let v = rows[t / 3][x + t % 3];
                        for c in 0..BLOCK {
                            a[c] += d[c] * v;
                        }
                    }
                }
            }
            for c in 0..width {
                for (t, a) in acc.iter().enumerate() {
                    dw[((cb + c) * s.c_in + ci) * 9 + t] = a[c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes() -> Vec<Same> {
        [[3, 11, 9, 13, 3, 3], [5, 8, 8, 8, 5, 5], [2, 3, 6, 17, 1, 3], [9, 16, 5, 21, 3, 3]]
            .map(|[c_in, c_out, h, w, kh, kw]| Same { c_in, c_out, h, w, kh, kw })
            .to_vec()
    }

    fn noise(len: usize, salt: usize) -> Vec<f32> {
        (0..len).map(|i| (((i * 7919 + salt) % 1009) as f32 / 97.0).sin()).collect()
    }

    // whichever path `run` takes on this machine must agree with the portable loops
    #[test]
    fn dispatched_kernels_match_portable_loops_exactly() {
        for s in shapes() {
            let (hp, wp) = (s.padded_height(), s.padded_width());
            let mut pad = noise(s.c_in * hp * wp, 1);
            // keep the halo zero as `accumulate` would
            for (i, v) in pad.iter_mut().enumerate() {
                let (y, x) = ((i / wp) % hp, i % wp);
                let (ph, pw) = ((s.kh - 1) / 2, (s.kw - 1) / 2);
                if y < ph || y >= ph + s.h || x < pw || x >= pw + s.w {
                    *v = 0.0;
                }
            }
            let weight = noise(s.c_out * s.c_in * s.kh * s.kw, 2);
            let packed = pack_weights(&weight, &s, false);
            let mut fast = noise(s.c_out * s.h * s.w, 3);
            let mut slow = fast.clone();
            run(&pad, &packed, &s, &mut fast);
            body(&pad, &packed, &s, &mut slow);
            assert_eq!(fast, slow, "{s:?}");

            if s.kh == 3 && s.kw == 3 {
                let cop = s.c_out.next_multiple_of(BLOCK);
                let mut dt = noise(s.h * s.w * cop, 4);
                for (i, v) in dt.iter_mut().enumerate() {
                    if i % cop >= s.c_out {
                        *v = 0.0;
                    }
                }
                let mut fast = vec![0.0; s.c_out * s.c_in * 9];
                let mut slow = fast.clone();
                run_dw(&pad, &dt, &s, &mut fast);
                dw_body(&pad, &dt, &s, &mut slow);
                assert_eq!(fast, slow, "{s:?}");
            }
        }
    }
}
