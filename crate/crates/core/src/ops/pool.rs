//! Adaptive max and average pooling to a target grid.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Half-open input range covered by output cell `i` when `input` cells are
/// partitioned into `output` near-equal windows.
pub fn window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

pub(crate) fn check_target(
    op: &'static str,
    shape: &[usize],
    out_h: usize,
    out_w: usize,
) -> Result<(usize, usize, usize, usize)> {
    let &[n, c, h, w] = shape else {
        return Err(Error::invalid(op, format!("expected N×C×H×W, got {shape:?}")));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(op, "output dims must be positive"));
    }
    if out_h > h || out_w > w {
        return Err(Error::invalid(
            op,
            format!("output {out_h}×{out_w} exceeds input {h}×{w}"),
        ));
    }
    Ok((n, c, h, w))
}

/// Returns pooled values and the flat input index of each window maximum.
/// Ties resolve to the first index in row-major order.
pub(crate) fn max_pool_forward<E: Element>(
    x: &Tensor<E>,
    out_h: usize,
    out_w: usize,
) -> (Tensor<E>, Vec<usize>) {
    let (n, c, h, w) = x.dims4().expect("checked");
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..out_h {
            let (y0, y1) = window(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = window(ox, w, out_w);
                let mut best = base + y0 * w + x0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let idx = base + yy * w + xx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    (
        Tensor::new([n, c, out_h, out_w], out).expect("pool shape"),
        argmax,
    )
}

pub(crate) fn max_pool_backward<E: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    dout: &Tensor<E>,
) -> Tensor<E> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        d[idx] += g;
    }
    dx
}

pub(crate) fn avg_pool_forward<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Tensor<E> {
    let (n, c, h, w) = x.dims4().expect("checked");
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..out_h {
            let (y0, y1) = window(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = window(ox, w, out_w);
                let mut acc = E::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += data[base + yy * w + xx];
                    }
                }
                out.push(acc / E::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out).expect("pool shape")
}

pub(crate) fn avg_pool_backward<E: Element>(input_shape: &[usize], dout: &Tensor<E>) -> Tensor<E> {
    let &[n, c, h, w] = input_shape else {
        unreachable!("checked on forward")
    };
    let (_, _, out_h, out_w) = dout.dims4().expect("pool grad");
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    let g = dout.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..out_h {
            let (y0, y1) = window(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = window(ox, w, out_w);
                let share = g[(plane * out_h + oy) * out_w + ox]
                    / E::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        d[base + yy * w + xx] += share;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_input_without_gaps() {
        for input in 1..20 {
            for output in 1..=input {
                let mut prev_end = 0;
                for i in 0..output {
                    let (s, e) = window(i, input, output);
                    assert!(s <= prev_end && e > s && e <= input);
                    prev_end = e;
                }
                assert_eq!(prev_end, input);
            }
        }
    }

    #[test]
    fn max_pool_ties_pick_first_index() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let (y, arg) = max_pool_forward(&x, 1, 1);
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![0]);
    }
}
