//! Bilinear resampling with half-pixel (align_corners = false) centers.

use crate::tensor::{Element, Tensor};

/// Interpolation taps along one axis: `(i0, i1, w0, w1)` per output index.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = (src - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn upsample_forward<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Tensor<E> {
    let (n, c, h, w) = x.dims4().expect("checked");
    if (out_h, out_w) == (h, w) {
        return x.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx: Vec<_> = bilinear_taps(w, out_w)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, E::from_f64(wa), E::from_f64(wb)))
        .collect();
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            let (wy0, wy1) = (E::from_f64(wy0), E::from_f64(wy1));
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for &(x0, x1, wx0, wx1) in &tx {
                let top = wx0 * r0[x0] + wx1 * r0[x1];
                let bottom = wx0 * r1[x0] + wx1 * r1[x1];
                out.push(wy0 * top + wy1 * bottom);
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out).expect("upsample shape")
}

/// Transpose of the interpolation matrix applied to `dout`.
pub(crate) fn upsample_backward<E: Element>(input_shape: &[usize], dout: &Tensor<E>) -> Tensor<E> {
    let &[n, c, h, w] = input_shape else {
        unreachable!("checked on forward")
    };
    let (_, _, out_h, out_w) = dout.dims4().expect("upsample grad");
    if (out_h, out_w) == (h, w) {
        return dout.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx: Vec<_> = bilinear_taps(w, out_w)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, E::from_f64(wa), E::from_f64(wb)))
        .collect();
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    let g = dout.data();
    for plane in 0..n * c {
        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
        let src = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (E::from_f64(wy0), E::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = src[oy * out_w + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_taps_follow_half_pixel_centers() {
        // 2 → 4: centers at -0.25 (clamped to 0), 0.25, 0.75, 1.25
        let taps = bilinear_taps(2, 4);
        assert_eq!(taps[0], (0, 1, 1.0, 0.0));
        assert_eq!(taps[1], (0, 1, 0.75, 0.25));
        assert_eq!(taps[2], (0, 1, 0.25, 0.75));
        assert_eq!(taps[3], (1, 1, 0.75, 0.25));
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 5], |i| i as f64 * 0.3);
        assert_eq!(upsample_forward(&x, 3, 5), x);
    }
}
