//! im2col-based convolution primitives used by the graph ops.
//!
//! Three primitives cover both convolution and transposed convolution:
//! forward, backward-data and backward-weight. A transposed convolution's
//! forward pass is exactly `conv_bwd_data`, and its backward passes reuse
//! `conv_fwd` / `conv_bwd_weight` with the argument roles swapped.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayViewMut3, Axis};

pub(crate) fn conv_out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(in_dim + 2 * pad >= k, "kernel larger than padded input");
    (in_dim + 2 * pad - k) / stride + 1
}

/// Valid output-coordinate range `[lo, hi)` such that
/// `o * stride + koff - pad` stays inside `[0, in_dim)`.
fn valid_range(in_dim: usize, out_dim: usize, stride: usize, pad: usize, koff: usize) -> (usize, usize) {
    let lo = if koff >= pad { 0 } else { (pad - koff).div_ceil(stride) };
    // o * stride + koff - pad <= in_dim - 1
    let hi = if in_dim + pad > koff {
        (((in_dim + pad - koff - 1) / stride) + 1).min(out_dim)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one sample into a `(Ci * k * k, Ho * Wo)` matrix.
fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (ci, h, w) = x.dim();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::zeros((ci * k * k, ho * wo));
    for c in 0..ci {
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(h, ho, stride, pad, ki);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(w, wo, stride, pad, kj);
                let row = (c * k + ki) * k + kj;
                let mut cols_row = cols.row_mut(row);
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride + ki - pad;
                    for ow in ow_lo..ow_hi {
                        let iw = ow * stride + kj - pad;
                        cols_row[oh * wo + ow] = x[[c, ih, iw]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the columns of a `(Ci * k * k, Ho * Wo)` matrix back into an
/// image; the adjoint of [`im2col`].
fn col2im_add(cols: &Array2<f64>, k: usize, stride: usize, pad: usize, mut out: ArrayViewMut3<f64>) {
    let (ci, h, w) = out.dim();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    for c in 0..ci {
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(h, ho, stride, pad, ki);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(w, wo, stride, pad, kj);
                let row = (c * k + ki) * k + kj;
                let cols_row = cols.row(row);
                for oh in oh_lo..oh_hi {
                    let ih = oh * stride + ki - pad;
                    for ow in ow_lo..ow_hi {
                        let iw = ow * stride + kj - pad;
                        out[[c, ih, iw]] += cols_row[oh * wo + ow];
                    }
                }
            }
        }
    }
}

/// `y[n, co] = sum_ci w[co, ci] * x[n, ci] (+ b[co])` over sliding windows.
pub(crate) fn conv_fwd(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, ci, h, win) = x.dim();
    let (co, wci, kh, kw) = w.dim();
    assert_eq!(ci, wci, "conv channel mismatch");
    assert_eq!(kh, kw, "only square kernels supported");
    let k = kh;
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(win, k, stride, pad);
    let w2d = w.view().into_shape_with_order((co, ci * k * k)).expect("contiguous weights");

    let mut out = Array4::zeros((n, co, ho, wo));
    for i in 0..n {
        let cols = im2col(x.index_axis(Axis(0), i), k, stride, pad);
        let mut y = w2d.dot(&cols); // (co, ho*wo)
        if let Some(b) = b {
            for (mut row, &bias) in y.rows_mut().into_iter().zip(b.iter()) {
                row += bias;
            }
        }
        out.index_axis_mut(Axis(0), i)
            .into_shape_with_order((co, ho * wo))
            .expect("contiguous output")
            .assign(&y);
    }
    out
}

/// Gradient of `conv_fwd` with respect to its input. `in_hw` is the spatial
/// size of the original input (not always inferable from `g` alone).
pub(crate) fn conv_bwd_data(
    g: &Array4<f64>,
    w: &Array4<f64>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Array4<f64> {
    let (n, co, ho, wo) = g.dim();
    let (wco, ci, kh, kw) = w.dim();
    assert_eq!(co, wco, "conv channel mismatch");
    assert_eq!(kh, kw);
    let k = kh;
    let (h, win) = in_hw;
    assert_eq!(conv_out_dim(h, k, stride, pad), ho);
    assert_eq!(conv_out_dim(win, k, stride, pad), wo);
    let w2d = w.view().into_shape_with_order((co, ci * k * k)).expect("contiguous weights");

    let mut dx = Array4::zeros((n, ci, h, win));
    for i in 0..n {
        let g2d = g
            .index_axis(Axis(0), i)
            .into_shape_with_order((co, ho * wo))
            .expect("contiguous grad");
        let dcols = w2d.t().dot(&g2d); // (ci*k*k, ho*wo)
        col2im_add(&dcols, k, stride, pad, dx.index_axis_mut(Axis(0), i));
    }
    dx
}

/// Gradient of `conv_fwd` with respect to the weights and bias.
pub(crate) fn conv_bwd_weight(
    x: &Array4<f64>,
    g: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array1<f64>) {
    let (n, ci, _, _) = x.dim();
    let (gn, co, ho, wo) = g.dim();
    assert_eq!(n, gn);

    let mut dw2d = Array2::zeros((co, ci * k * k));
    for i in 0..n {
        let cols = im2col(x.index_axis(Axis(0), i), k, stride, pad);
        let g2d = g
            .index_axis(Axis(0), i)
            .into_shape_with_order((co, ho * wo))
            .expect("contiguous grad");
        dw2d += &g2d.dot(&cols.t());
    }
    let dw = dw2d.into_shape_with_order((co, ci, k, k)).expect("weight grad shape");
    let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    (dw, db)
}

/// Output spatial size of a transposed convolution.
pub(crate) fn conv_transpose_out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_dim - 1) * stride + k - 2 * pad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_fwd_matches_direct_computation() {
        // 1 sample, 1 channel, 4x4 input, 3x3 kernel, stride 1, pad 1
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let w = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| ((i * 3 + j) as f64) * 0.1);
        let b = array![0.5];
        let y = conv_fwd(&x, &w, Some(&b), 1, 1);
        assert_eq!(y.dim(), (1, 1, 4, 4));

        // direct sum at output (1, 1)
        let mut expect = 0.5;
        for ki in 0..3 {
            for kj in 0..3 {
                let ih = 1 + ki as isize - 1;
                let iw = 1 + kj as isize - 1;
                if (0..4).contains(&ih) && (0..4).contains(&iw) {
                    expect += x[[0, 0, ih as usize, iw as usize]] * w[[0, 0, ki, kj]];
                }
            }
        }
        assert!((y[[0, 0, 1, 1]] - expect).abs() < 1e-12);
    }

    #[test]
    fn strided_conv_shapes() {
        let x = Array4::zeros((2, 3, 8, 8));
        let w = Array4::zeros((5, 3, 3, 3));
        let y = conv_fwd(&x, &w, None, 2, 1);
        assert_eq!(y.dim(), (2, 5, 4, 4));
    }

    #[test]
    fn bwd_data_is_adjoint_of_fwd() {
        // <conv(x), g> == <x, conv_bwd_data(g)> for linear (bias-free) conv
        let x = Array4::from_shape_fn((1, 2, 5, 5), |(_, c, i, j)| ((c * 25 + i * 5 + j) as f64).sin());
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(o, c, i, j)| ((o * 18 + c * 9 + i * 3 + j) as f64).cos());
        let y = conv_fwd(&x, &w, None, 2, 1);
        let g = Array4::from_shape_fn(y.dim(), |(_, c, i, j)| ((c * 9 + i * 3 + j) as f64 * 0.7).sin());
        let dx = conv_bwd_data(&g, &w, 2, 1, (5, 5));
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
