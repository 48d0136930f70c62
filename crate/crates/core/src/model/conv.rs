//! Stride-1 2-D convolution over NHWC tensors, lowered to a matrix product.
//!
//! Kernels are laid out `[k, k, in_channels, out_channels]`, matching the
//! column order produced by [`im2col`] (`ky`, `kx`, channel).

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

pub(crate) fn out_size(input: usize, kernel: usize, pad: usize) -> usize {
    input + 2 * pad + 1 - kernel
}

/// Unfolds every `k x k` window of `input` into one row.
pub(crate) fn im2col(input: ArrayView4<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (n, h, w, c) = input.dim();
    let ho = out_size(h, k, pad);
    let wo = out_size(w, k, pad);
    let row_len = k * k * c;
    let mut cols = vec![0.0; n * ho * wo * row_len];
    let owned;
    let src = match input.as_slice() {
        Some(s) => s,
        None => {
            owned = input.as_standard_layout().into_owned();
            owned.as_slice().expect("standard layout")
        }
    };
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * row_len;
                // Valid kx range for this output column.
                let kx_lo = pad.saturating_sub(ox);
                let kx_hi = (w + pad - ox).min(k);
                if kx_lo >= kx_hi {
                    continue;
                }
                let span = (kx_hi - kx_lo) * c;
                for ky in 0..k {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let ix = ox + kx_lo - pad;
                    let s = ((b * h + iy) * w + ix) * c;
                    let d = row + (ky * k + kx_lo) * c;
                    cols[d..d + span].copy_from_slice(&src[s..s + span]);
                }
            }
        }
    }
    Array2::from_shape_vec((n * ho * wo, row_len), cols).expect("im2col shape")
}

/// Folds column gradients back onto the input grid (adjoint of [`im2col`]).
pub(crate) fn col2im(
    cols: ArrayView2<f64>,
    shape: (usize, usize, usize, usize),
    k: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, h, w, c) = shape;
    let ho = out_size(h, k, pad);
    let wo = out_size(w, k, pad);
    let row_len = k * k * c;
    let mut out = vec![0.0; n * h * w * c];
    let owned;
    let src = match cols.as_slice() {
        Some(s) => s,
        None => {
            owned = cols.as_standard_layout().into_owned();
            owned.as_slice().expect("standard layout")
        }
    };
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * row_len;
                let kx_lo = pad.saturating_sub(ox);
                let kx_hi = (w + pad - ox).min(k);
                if kx_lo >= kx_hi {
                    continue;
                }
                let span = (kx_hi - kx_lo) * c;
                for ky in 0..k {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let ix = ox + kx_lo - pad;
                    let d = ((b * h + iy) * w + ix) * c;
                    let s = row + (ky * k + kx_lo) * c;
                    for (o, v) in out[d..d + span].iter_mut().zip(&src[s..s + span]) {
                        *o += v;
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, h, w, c), out).expect("col2im shape")
}

/// Forward pass. Returns the output and the unfolded input needed by [`backward`].
pub(crate) fn forward(
    input: ArrayView4<f64>,
    weight: ArrayView4<f64>,
    pad: usize,
) -> (Array4<f64>, Array2<f64>) {
    let (n, h, w, _) = input.dim();
    let (k, _, cin, cout) = weight.dim();
    let cols = im2col(input, k, pad);
    let w2 = weight
        .into_shape_with_order((k * k * cin, cout))
        .expect("kernel is contiguous");
    let out = cols.dot(&w2);
    let ho = out_size(h, k, pad);
    let wo = out_size(w, k, pad);
    let out = out
        .into_shape_with_order((n, ho, wo, cout))
        .expect("conv output shape");
    (out, cols)
}

/// Backward pass. Returns `(d_input, d_weight)`; `d_input` is skipped when
/// `need_input_grad` is false.
pub(crate) fn backward(
    d_out: ArrayView4<f64>,
    cols: &Array2<f64>,
    weight: ArrayView4<f64>,
    in_shape: (usize, usize, usize, usize),
    pad: usize,
    need_input_grad: bool,
) -> (Option<Array4<f64>>, Array2<f64>) {
    let (n, ho, wo, cout) = d_out.dim();
    let (k, _, cin, _) = weight.dim();
    let d_out = d_out.as_standard_layout();
    let d2 = d_out
        .view()
        .into_shape_with_order((n * ho * wo, cout))
        .expect("grad shape");
    let d_weight = cols.t().dot(&d2);
    let d_input = need_input_grad.then(|| {
        let w2 = weight
            .into_shape_with_order((k * k * cin, cout))
            .expect("kernel is contiguous");
        let d_cols = d2.dot(&w2.t());
        col2im(d_cols.view(), in_shape, k, pad)
    });
    (d_input, d_weight)
}
