//! Dense, convolution and transposed-convolution kernels (NCHW, f64).
//!
//! Convolutions are lowered to GEMM through an im2col gather so the heavy
//! lifting happens in matrixmultiply. Backward passes recompute the gather
//! instead of caching it; the gather is cheap next to the GEMM and this keeps
//! batched probe evaluation memory-flat.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

/// Output spatial side for a strided convolution.
pub fn conv_out_side(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial side for a strided transposed convolution.
pub fn conv_transpose_out_side(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Gather conv patches: x (N,C,H,W) -> cols (N*OH*OW, C*KH*KW).
fn im2col(x: &ArrayView4<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((n * oh * ow, c * kh * kw));
    let x_slice = x.as_slice().expect("input must be standard layout");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let mut col_base = 0;
                for ci in 0..c {
                    let plane = &x_slice[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            col_base += kw;
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[[row, col_base + kx]] = plane[iy * w + ix as usize];
                            }
                        }
                        col_base += kw;
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the adjoint of im2col: cols (N*OH*OW, C*KH*KW) -> x (N,C,H,W).
fn col2im_accumulate(
    cols: &ArrayView2<f64>,
    dims: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = dims;
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(w, kw, stride, pad);
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let x_slice = x.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let mut col_base = 0;
                for ci in 0..c {
                    let plane_off = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            col_base += kw;
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x_slice[plane_off + iy * w + ix as usize] +=
                                    cols[[row, col_base + kx]];
                            }
                        }
                        col_base += kw;
                    }
                }
            }
        }
    }
    x
}

/// (N*OH*OW, OC) row-major matrix -> (N, OC, OH, OW).
fn rows_to_nchw(rows: &Array2<f64>, n: usize, oc: usize, oh: usize, ow: usize) -> Array4<f64> {
    let mut y = Array4::<f64>::zeros((n, oc, oh, ow));
    let y_slice = y.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for co in 0..oc {
                    y_slice[((ni * oc + co) * oh + oy) * ow + ox] = rows[[row, co]];
                }
            }
        }
    }
    y
}

/// (N, OC, OH, OW) -> (N*OH*OW, OC).
fn nchw_to_rows(y: &ArrayView4<f64>) -> Array2<f64> {
    let (n, oc, oh, ow) = y.dim();
    let mut rows = Array2::<f64>::zeros((n * oh * ow, oc));
    let y_slice = y.as_slice().expect("standard layout");
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for co in 0..oc {
                    rows[[row, co]] = y_slice[((ni * oc + co) * oh + oy) * ow + ox];
                }
            }
        }
    }
    rows
}

/// Convolution forward. x (N,C,H,W), w (OC,C,KH,KW), b (OC) -> (N,OC,OH,OW).
pub fn conv2d(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, _, h, wd) = x.dim();
    let (oc, c, kh, kw) = w.dim();
    debug_assert_eq!(x.dim().1, c);
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .to_shape((oc, c * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let mut rows = cols.dot(&wmat.t());
    if let Some(b) = b {
        for mut r in rows.rows_mut() {
            r += b;
        }
    }
    rows_to_nchw(&rows, n, oc, oh, ow)
}

/// Convolution backward. Returns (grad_x, grad_w, grad_b).
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    grad_y: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (oc, c, kh, kw) = w.dim();
    let gmat = nchw_to_rows(grad_y);
    let cols = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .to_shape((oc, c * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let grad_wmat = gmat.t().dot(&cols);
    let grad_w = grad_wmat
        .into_shape_with_order((oc, c, kh, kw))
        .expect("grad reshape");
    let grad_cols = gmat.dot(&wmat);
    let grad_x = col2im_accumulate(&grad_cols.view(), x.dim(), kh, kw, stride, pad);
    let grad_b = grad_y
        .sum_axis(Axis(3))
        .sum_axis(Axis(2))
        .sum_axis(Axis(0));
    (grad_x, grad_w, grad_b)
}

/// Transposed convolution forward. x (N,C,H,W), w (C,OC,KH,KW), b (OC).
/// Output (N,OC,(H-1)s+KH-2p,(W-1)s+KW-2p); adjoint of a stride-s conv.
pub fn conv2d_transpose(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, wd) = x.dim();
    let (wc, oc, kh, kw) = w.dim();
    debug_assert_eq!(c, wc);
    let oh = conv_transpose_out_side(h, kh, stride, pad);
    let ow = conv_transpose_out_side(wd, kw, stride, pad);
    let xmat = nchw_to_rows(x); // (N*H*W, C)
    let wmat = w
        .to_shape((c, oc * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let cols = xmat.dot(&wmat); // (N*H*W, OC*KH*KW)
    let mut y = Array4::<f64>::zeros((n, oc, oh, ow));
    let y_slice = y.as_slice_mut().expect("standard layout");
    for ni in 0..n {
        for iy in 0..h {
            for ix in 0..wd {
                let row = (ni * h + iy) * wd + ix;
                let mut col = 0;
                for co in 0..oc {
                    let plane_off = (ni * oc + co) * oh * ow;
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            col += kw;
                            continue;
                        }
                        let oy = oy as usize;
                        for kx in 0..kw {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox >= 0 && ox < ow as isize {
                                y_slice[plane_off + oy * ow + ox as usize] += cols[[row, col + kx]];
                            }
                        }
                        col += kw;
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for ni in 0..n {
            for co in 0..oc {
                let bval = b[co];
                let off = (ni * oc + co) * oh * ow;
                for v in &mut y_slice[off..off + oh * ow] {
                    *v += bval;
                }
            }
        }
    }
    y
}

/// Transposed convolution backward. Returns (grad_x, grad_w, grad_b).
pub fn conv2d_transpose_backward(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    grad_y: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c, h, wd) = x.dim();
    let (_, oc, kh, kw) = w.dim();
    let (gn, goc, oh, ow) = grad_y.dim();
    debug_assert_eq!((gn, goc), (n, oc));
    // Adjoint of the scatter-add is a gather over the output gradient.
    let mut gcols = Array2::<f64>::zeros((n * h * wd, oc * kh * kw));
    let g_slice = grad_y.as_slice().expect("standard layout");
    for ni in 0..n {
        for iy in 0..h {
            for ix in 0..wd {
                let row = (ni * h + iy) * wd + ix;
                let mut col = 0;
                for co in 0..oc {
                    let plane_off = (ni * oc + co) * oh * ow;
                    for ky in 0..kh {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            col += kw;
                            continue;
                        }
                        let oy = oy as usize;
                        for kx in 0..kw {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox >= 0 && ox < ow as isize {
                                gcols[[row, col + kx]] = g_slice[plane_off + oy * ow + ox as usize];
                            }
                        }
                        col += kw;
                    }
                }
            }
        }
    }
    let wmat = w
        .to_shape((c, oc * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let grad_xmat = gcols.dot(&wmat.t()); // (N*H*W, C)
    let mut grad_x = Array4::<f64>::zeros((n, c, h, wd));
    {
        let gx = grad_x.as_slice_mut().expect("standard layout");
        for ni in 0..n {
            for iy in 0..h {
                for ix in 0..wd {
                    let row = (ni * h + iy) * wd + ix;
                    for ci in 0..c {
                        gx[((ni * c + ci) * h + iy) * wd + ix] = grad_xmat[[row, ci]];
                    }
                }
            }
        }
    }
    let xmat = nchw_to_rows(x);
    let grad_wmat = xmat.t().dot(&gcols); // (C, OC*KH*KW)
    let grad_w = grad_wmat
        .into_shape_with_order((c, oc, kh, kw))
        .expect("grad reshape");
    let grad_b = grad_y
        .sum_axis(Axis(3))
        .sum_axis(Axis(2))
        .sum_axis(Axis(0));
    (grad_x, grad_w, grad_b)
}

/// Dense forward: x (N,I) * w (I,O) + b.
pub fn dense(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: Option<&ArrayView1<f64>>) -> Array2<f64> {
    let mut y = x.dot(w);
    if let Some(b) = b {
        for mut r in y.rows_mut() {
            r += b;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;
    use rand::Rng;

    fn rand4(rng: &mut impl Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as the oracle for the GEMM path.
    fn conv2d_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (oc, _, kh, kw) = w.dim();
        let oh = conv_out_side(h, kh, stride, pad);
        let ow = conv_out_side(wd, kw, stride, pad);
        let mut y = Array4::<f64>::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for co in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[ni, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = crate::rng::child_rng(21, "ops-test", &[0]);
        let x = rand4(&mut rng, (2, 3, 8, 8));
        let w = rand4(&mut rng, (5, 3, 4, 4));
        let b = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let fast = conv2d(&x.view(), &w.view(), Some(&b.view()), 2, 1);
        let slow = conv2d_naive(&x, &w, &b, 2, 1);
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with shared (flipped-role) weights.
        let mut rng = crate::rng::child_rng(22, "ops-test", &[1]);
        let x = rand4(&mut rng, (2, 4, 8, 8));
        let w = rand4(&mut rng, (3, 4, 4, 4)); // conv weights (OC=3, C=4)
        let y = conv2d(&x.view(), &w.view(), None, 2, 1);
        let g = rand4(&mut rng, y.dim());
        // conv_transpose weight layout is (C_in=3, OC=4, KH, KW) = w as-is.
        let gt = conv2d_transpose(&g.view(), &w.view(), None, 2, 1);
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &gt).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn conv_transpose_grows_spatial_size() {
        let mut rng = crate::rng::child_rng(23, "ops-test", &[2]);
        let x = rand4(&mut rng, (1, 4, 4, 4));
        let w = rand4(&mut rng, (4, 2, 4, 4));
        let y = conv2d_transpose(&x.view(), &w.view(), None, 2, 1);
        assert_eq!(y.dim(), (1, 2, 8, 8));
        let w3 = rand4(&mut rng, (4, 2, 3, 3));
        let y3 = conv2d_transpose(&x.view(), &w3.view(), None, 1, 1);
        assert_eq!(y3.dim(), (1, 2, 4, 4));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = crate::rng::child_rng(24, "ops-test", &[3]);
        let x = rand4(&mut rng, (1, 2, 6, 6));
        let w = rand4(&mut rng, (3, 2, 4, 4));
        let cot = rand4(&mut rng, (1, 3, 3, 3));
        let (gx, gw, gb) = conv2d_backward(&x.view(), &w.view(), &cot.view(), 2, 1);
        let step = 1e-6;
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| -> f64 {
            (&conv2d(&x.view(), &w.view(), Some(&b.view()), 2, 1) * &cot).sum()
        };
        let b = Array1::zeros(3);
        // Spot-check a handful of coordinates in each tensor.
        for &(i, j) in &[(0usize, 0usize), (1, 7), (0, 20)] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i * 30 + j] += step;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i * 30 + j] -= step;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * step);
            assert_abs_diff_eq!(gx.as_slice().unwrap()[i * 30 + j], fd, epsilon = 1e-6);
        }
        for idx in [0usize, 13, 31] {
            let mut wp = w.clone();
            wp.as_slice_mut().unwrap()[idx] += step;
            let mut wm = w.clone();
            wm.as_slice_mut().unwrap()[idx] -= step;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * step);
            assert_abs_diff_eq!(gw.as_slice().unwrap()[idx], fd, epsilon = 1e-6);
        }
        for i in 0..3 {
            let mut bp = b.clone();
            bp[i] += step;
            let mut bm = b.clone();
            bm[i] -= step;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * step);
            assert_abs_diff_eq!(gb[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn conv_transpose_backward_matches_finite_differences() {
        let mut rng = crate::rng::child_rng(25, "ops-test", &[4]);
        let x = rand4(&mut rng, (1, 3, 3, 3));
        let w = rand4(&mut rng, (3, 2, 4, 4));
        let cot = rand4(&mut rng, (1, 2, 6, 6));
        let (gx, gw, gb) = conv2d_transpose_backward(&x.view(), &w.view(), &cot.view(), 2, 1);
        let step = 1e-6;
        let b = Array1::zeros(2);
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| -> f64 {
            (&conv2d_transpose(&x.view(), &w.view(), Some(&b.view()), 2, 1) * &cot).sum()
        };
        for idx in [0usize, 11, 26] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += step;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= step;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * step);
            assert_abs_diff_eq!(gx.as_slice().unwrap()[idx], fd, epsilon = 1e-6);
        }
        for idx in [0usize, 17, 47] {
            let mut wp = w.clone();
            wp.as_slice_mut().unwrap()[idx] += step;
            let mut wm = w.clone();
            wm.as_slice_mut().unwrap()[idx] -= step;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * step);
            assert_abs_diff_eq!(gw.as_slice().unwrap()[idx], fd, epsilon = 1e-6);
        }
        for i in 0..2 {
            let mut bp = b.clone();
            bp[i] += step;
            let mut bm = b.clone();
            bm[i] -= step;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * step);
            assert_abs_diff_eq!(gb[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn dense_with_bias() {
        let x = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let w = ndarray::array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
        let b = ndarray::array![0.5, -0.5, 0.0];
        let y = dense(&x.view(), &w.view(), Some(&b.view()));
        assert_abs_diff_eq!(y, ndarray::array![[1.5, 1.5, 3.0], [3.5, 3.5, 7.0]], epsilon = 1e-12);
    }
}
