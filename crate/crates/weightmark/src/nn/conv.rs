//! Convolution primitives: im2col/col2im plus forward and backward passes for
//! 1d convolution, 1d transposed convolution, and 2d convolution.
//!
//! Transposed convolution is implemented as the exact adjoint of convolution
//! with the same weight tensor, so its three backward formulas reuse the same
//! two gather/scatter kernels.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

pub fn conv_out_len(l: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let span = dilation * (k - 1) + 1;
    assert!(l + 2 * pad >= span, "input of length {l} too short for kernel span {span} with pad {pad}");
    (l + 2 * pad - span) / stride + 1
}

pub fn convtr_out_len(l: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let full = (l - 1) * stride + dilation * (k - 1) + 1;
    assert!(full > 2 * pad, "padding {pad} swallows the whole output of length {full}");
    full - 2 * pad
}

/// Gather sliding windows of `x` into a `(C*K, L_out)` matrix.
pub fn im2col_1d(x: ArrayView2<f32>, k: usize, stride: usize, pad: usize, dilation: usize) -> Array2<f32> {
    let (c, l) = x.dim();
    let l_out = conv_out_len(l, k, stride, pad, dilation);
    let mut cols = Array2::zeros((c * k, l_out));
    for ci in 0..c {
        for ki in 0..k {
            let row = ci * k + ki;
            let offset = (ki * dilation) as isize - pad as isize;
            for t in 0..l_out {
                let src = (t * stride) as isize + offset;
                if src >= 0 && (src as usize) < l {
                    cols[[row, t]] = x[[ci, src as usize]];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_1d`]: scatter-add columns back into a `(C, L)` signal.
pub fn col2im_1d(cols: ArrayView2<f32>, c: usize, l: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Array2<f32> {
    let l_out = cols.dim().1;
    let mut x = Array2::zeros((c, l));
    for ci in 0..c {
        for ki in 0..k {
            let row = ci * k + ki;
            let offset = (ki * dilation) as isize - pad as isize;
            for t in 0..l_out {
                let dst = (t * stride) as isize + offset;
                if dst >= 0 && (dst as usize) < l {
                    x[[ci, dst as usize]] += cols[[row, t]];
                }
            }
        }
    }
    x
}

/// Cross-correlation of `(B, C_in, L)` input with `(C_out, C_in, K)` weight.
pub fn conv1d_forward(
    x: ArrayView3<f32>,
    w: ArrayView3<f32>,
    bias: Option<ArrayView1<f32>>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array3<f32> {
    let (bsz, c_in, l) = x.dim();
    let (c_out, wc_in, k) = w.dim();
    assert_eq!(c_in, wc_in, "channel mismatch");
    let l_out = conv_out_len(l, k, stride, pad, dilation);
    let w_mat = w.to_shape((c_out, c_in * k)).unwrap();
    let mut y = Array3::zeros((bsz, c_out, l_out));
    for b in 0..bsz {
        let cols = im2col_1d(x.index_axis(Axis(0), b), k, stride, pad, dilation);
        let mut yb = w_mat.dot(&cols);
        if let Some(bias) = bias {
            for co in 0..c_out {
                let bv = bias[co];
                yb.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
        y.index_axis_mut(Axis(0), b).assign(&yb);
    }
    y
}

/// Gradients of [`conv1d_forward`] with respect to input, weight, and bias.
pub fn conv1d_backward(
    x: ArrayView3<f32>,
    w: ArrayView3<f32>,
    dy: ArrayView3<f32>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> (Array3<f32>, Array3<f32>, Array1<f32>) {
    let (bsz, c_in, l) = x.dim();
    let (c_out, _, k) = w.dim();
    let w_mat = w.to_shape((c_out, c_in * k)).unwrap();
    let mut dx = Array3::zeros((bsz, c_in, l));
    let mut dw_mat = Array2::<f32>::zeros((c_out, c_in * k));
    let mut db = Array1::<f32>::zeros(c_out);
    for b in 0..bsz {
        let dyb = dy.index_axis(Axis(0), b);
        let cols = im2col_1d(x.index_axis(Axis(0), b), k, stride, pad, dilation);
        dw_mat += &dyb.dot(&cols.t());
        let dcols = w_mat.t().dot(&dyb);
        dx.index_axis_mut(Axis(0), b)
            .assign(&col2im_1d(dcols.view(), c_in, l, k, stride, pad, dilation));
        db += &dyb.sum_axis(Axis(1));
    }
    let dw = dw_mat.into_shape_with_order((c_out, c_in, k)).unwrap();
    (dx, dw, db)
}

/// Transposed convolution of `(B, C_in, L)` input with `(C_in, C_out, K)`
/// weight: the adjoint of [`conv1d_forward`] in its input argument.
pub fn convtr1d_forward(
    x: ArrayView3<f32>,
    w: ArrayView3<f32>,
    bias: Option<ArrayView1<f32>>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array3<f32> {
    let (bsz, c_in, l) = x.dim();
    let (wc_in, c_out, k) = w.dim();
    assert_eq!(c_in, wc_in, "channel mismatch");
    let l_out = convtr_out_len(l, k, stride, pad, dilation);
    let w_mat = w.to_shape((c_in, c_out * k)).unwrap();
    let mut y = Array3::zeros((bsz, c_out, l_out));
    for b in 0..bsz {
        let cols = w_mat.t().dot(&x.index_axis(Axis(0), b));
        let mut yb = col2im_1d(cols.view(), c_out, l_out, k, stride, pad, dilation);
        if let Some(bias) = bias {
            for co in 0..c_out {
                let bv = bias[co];
                yb.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
        y.index_axis_mut(Axis(0), b).assign(&yb);
    }
    y
}

/// Gradients of [`convtr1d_forward`] with respect to input, weight, and bias.
pub fn convtr1d_backward(
    x: ArrayView3<f32>,
    w: ArrayView3<f32>,
    dy: ArrayView3<f32>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> (Array3<f32>, Array3<f32>, Array1<f32>) {
    let (bsz, c_in, l) = x.dim();
    let (_, c_out, k) = w.dim();
    let w_mat = w.to_shape((c_in, c_out * k)).unwrap();
    let mut dx = Array3::zeros((bsz, c_in, l));
    let mut dw_mat = Array2::<f32>::zeros((c_in, c_out * k));
    let mut db = Array1::<f32>::zeros(c_out);
    for b in 0..bsz {
        let dyb = dy.index_axis(Axis(0), b);
        let dcols = im2col_1d(dyb, k, stride, pad, dilation);
        dx.index_axis_mut(Axis(0), b).assign(&w_mat.dot(&dcols));
        dw_mat += &x.index_axis(Axis(0), b).dot(&dcols.t());
        db += &dyb.sum_axis(Axis(1));
    }
    let dw = dw_mat.into_shape_with_order((c_in, c_out, k)).unwrap();
    (dx, dw, db)
}

fn im2col_2d(
    x: ArrayView3<f32>,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let h_out = conv_out_len(h, kh, sh, ph, 1);
    let w_out = conv_out_len(w, kw, sw, pw, 1);
    let mut cols = Array2::zeros((c * kh * kw, h_out * w_out));
    for ci in 0..c {
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = (ci * kh + khi) * kw + kwi;
                for ho in 0..h_out {
                    let src_h = (ho * sh + khi) as isize - ph as isize;
                    if src_h < 0 || src_h as usize >= h {
                        continue;
                    }
                    for wo in 0..w_out {
                        let src_w = (wo * sw + kwi) as isize - pw as isize;
                        if src_w >= 0 && (src_w as usize) < w {
                            cols[[row, ho * w_out + wo]] = x[[ci, src_h as usize, src_w as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_2d(
    cols: ArrayView2<f32>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
) -> Array3<f32> {
    let h_out = conv_out_len(h, kh, sh, ph, 1);
    let w_out = conv_out_len(w, kw, sw, pw, 1);
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = (ci * kh + khi) * kw + kwi;
                for ho in 0..h_out {
                    let dst_h = (ho * sh + khi) as isize - ph as isize;
                    if dst_h < 0 || dst_h as usize >= h {
                        continue;
                    }
                    for wo in 0..w_out {
                        let dst_w = (wo * sw + kwi) as isize - pw as isize;
                        if dst_w >= 0 && (dst_w as usize) < w {
                            x[[ci, dst_h as usize, dst_w as usize]] += cols[[row, ho * w_out + wo]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation of `(B, C_in, H, W)` input with `(C_out, C_in, KH, KW)`
/// weight.
pub fn conv2d_forward(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    bias: Option<ArrayView1<f32>>,
    strides: (usize, usize),
    pads: (usize, usize),
) -> Array4<f32> {
    let (bsz, c_in, h, wi) = x.dim();
    let (c_out, wc_in, kh, kw) = w.dim();
    assert_eq!(c_in, wc_in, "channel mismatch");
    let h_out = conv_out_len(h, kh, strides.0, pads.0, 1);
    let w_out = conv_out_len(wi, kw, strides.1, pads.1, 1);
    let w_mat = w.to_shape((c_out, c_in * kh * kw)).unwrap();
    let mut y = Array4::zeros((bsz, c_out, h_out, w_out));
    for b in 0..bsz {
        let cols = im2col_2d(x.index_axis(Axis(0), b), kh, kw, strides.0, strides.1, pads.0, pads.1);
        let mut yb = w_mat.dot(&cols);
        if let Some(bias) = bias {
            for co in 0..c_out {
                let bv = bias[co];
                yb.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
        y.index_axis_mut(Axis(0), b)
            .assign(&yb.into_shape_with_order((c_out, h_out, w_out)).unwrap());
    }
    y
}

/// Gradients of [`conv2d_forward`] with respect to input, weight, and bias.
pub fn conv2d_backward(
    x: ArrayView4<f32>,
    w: ArrayView4<f32>,
    dy: ArrayView4<f32>,
    strides: (usize, usize),
    pads: (usize, usize),
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (bsz, c_in, h, wi) = x.dim();
    let (c_out, _, kh, kw) = w.dim();
    let (_, _, h_out, w_out) = dy.dim();
    let w_mat = w.to_shape((c_out, c_in * kh * kw)).unwrap();
    let mut dx = Array4::zeros((bsz, c_in, h, wi));
    let mut dw_mat = Array2::<f32>::zeros((c_out, c_in * kh * kw));
    let mut db = Array1::<f32>::zeros(c_out);
    for b in 0..bsz {
        let dyb = dy.index_axis(Axis(0), b);
        let dyb_mat = dyb.to_shape((c_out, h_out * w_out)).unwrap();
        let cols = im2col_2d(x.index_axis(Axis(0), b), kh, kw, strides.0, strides.1, pads.0, pads.1);
        dw_mat += &dyb_mat.dot(&cols.t());
        let dcols = w_mat.t().dot(&dyb_mat);
        dx.index_axis_mut(Axis(0), b).assign(&col2im_2d(
            dcols.view(),
            c_in,
            h,
            wi,
            kh,
            kw,
            strides.0,
            strides.1,
            pads.0,
            pads.1,
        ));
        db += &dyb_mat.sum_axis(Axis(1));
    }
    let dw = dw_mat.into_shape_with_order((c_out, c_in, kh, kw)).unwrap();
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use ndarray::{Array1, Array3, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f32> {
        init::normal(rng, &[d.0, d.1, d.2], 0.0, 1.0)
            .into_dimensionality()
            .unwrap()
    }

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f32> {
        init::normal(rng, &[d.0, d.1, d.2, d.3], 0.0, 1.0)
            .into_dimensionality()
            .unwrap()
    }

    fn naive_conv1d(
        x: &Array3<f32>,
        w: &Array3<f32>,
        bias: &Array1<f32>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Array3<f32> {
        let (bsz, c_in, l) = x.dim();
        let (c_out, _, k) = w.dim();
        let l_out = conv_out_len(l, k, stride, pad, dilation);
        let mut y = Array3::zeros((bsz, c_out, l_out));
        for b in 0..bsz {
            for co in 0..c_out {
                for t in 0..l_out {
                    let mut acc = bias[co] as f64;
                    for ci in 0..c_in {
                        for ki in 0..k {
                            let src = (t * stride + ki * dilation) as isize - pad as isize;
                            if src >= 0 && (src as usize) < l {
                                acc += x[[b, ci, src as usize]] as f64 * w[[co, ci, ki]] as f64;
                            }
                        }
                    }
                    y[[b, co, t]] = acc as f32;
                }
            }
        }
        y
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = 1.0f32.max(x.abs()).max(y.abs());
            assert!((x - y).abs() / scale < tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv1d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, dilation) in &[(1, 0, 1), (1, 3, 1), (2, 2, 1), (1, 6, 3), (4, 2, 1)] {
            let x = rand3(&mut rng, (2, 3, 25));
            let w = rand3(&mut rng, (4, 3, 5));
            let b: Array1<f32> = init::normal(&mut rng, &[4], 0.0, 1.0).into_dimensionality().unwrap();
            let got = conv1d_forward(x.view(), w.view(), Some(b.view()), stride, pad, dilation);
            let want = naive_conv1d(&x, &w, &b, stride, pad, dilation);
            assert_close(got.as_slice().unwrap(), want.as_slice().unwrap(), 1e-5);
        }
    }

    #[test]
    fn conv1d_backward_matches_naive_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (stride, pad, dilation) = (2, 2, 1);
        let x = rand3(&mut rng, (2, 3, 17));
        let w = rand3(&mut rng, (4, 3, 5));
        let l_out = conv_out_len(17, 5, stride, pad, dilation);
        let dy = rand3(&mut rng, (2, 4, l_out));

        let (dx, dw, db) = conv1d_backward(x.view(), w.view(), dy.view(), stride, pad, dilation);

        // Independent oracle: scatter each output gradient straight through
        // the cross-correlation definition.
        let mut dx2 = Array3::<f32>::zeros(x.dim());
        let mut dw2 = Array3::<f32>::zeros(w.dim());
        let mut db2 = Array1::<f32>::zeros(4);
        for b in 0..2 {
            for co in 0..4 {
                for t in 0..l_out {
                    let g = dy[[b, co, t]];
                    db2[co] += g;
                    for ci in 0..3 {
                        for ki in 0..5 {
                            let src = (t * stride + ki * dilation) as isize - pad as isize;
                            if src >= 0 && (src as usize) < 17 {
                                dx2[[b, ci, src as usize]] += g * w[[co, ci, ki]];
                                dw2[[co, ci, ki]] += g * x[[b, ci, src as usize]];
                            }
                        }
                    }
                }
            }
        }
        assert_close(dx.as_slice().unwrap(), dx2.as_slice().unwrap(), 1e-4);
        assert_close(dw.as_slice().unwrap(), dw2.as_slice().unwrap(), 1e-4);
        assert_close(db.as_slice().unwrap(), db2.as_slice().unwrap(), 1e-4);
    }

    #[test]
    fn convtr1d_is_adjoint_of_conv1d() {
        // <convtr(x), z> == <x, conv(z)> for the shared weight tensor; this
        // pins both the geometry and the no-kernel-flip convention.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(stride, pad) in &[(1, 0), (4, 2), (2, 3), (3, 1)] {
            let (c_in, c_out, k, l) = (3, 5, 8, 11);
            if pad * 2 >= (l - 1) * stride + k {
                continue;
            }
            let x = rand3(&mut rng, (2, c_in, l));
            let w = rand3(&mut rng, (c_in, c_out, k));
            let l_out = convtr_out_len(l, k, stride, pad, 1);
            let z = rand3(&mut rng, (2, c_out, l_out));

            let up = convtr1d_forward(x.view(), w.view(), None, stride, pad, 1);
            let down = conv1d_forward(z.view(), w.view(), None, stride, pad, 1);
            assert_eq!(down.dim(), x.dim());

            let lhs: f64 = up.iter().zip(z.iter()).map(|(a, b)| *a as f64 * *b as f64).sum();
            let rhs: f64 = x.iter().zip(down.iter()).map(|(a, b)| *a as f64 * *b as f64).sum();
            let scale = lhs.abs().max(1.0);
            assert!((lhs - rhs).abs() / scale < 1e-4, "stride {stride} pad {pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn convtr1d_upsamples_by_exact_stride_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for &u in &[2usize, 4, 8] {
            let x = rand3(&mut rng, (1, 2, 9));
            let w = rand3(&mut rng, (2, 3, 2 * u));
            let y = convtr1d_forward(x.view(), w.view(), None, u, u / 2, 1);
            assert_eq!(y.dim(), (1, 3, 9 * u));
        }
    }

    #[test]
    fn convtr1d_backward_matches_naive_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (stride, pad) = (4, 2);
        let (c_in, c_out, k, l) = (3, 2, 8, 7);
        let x = rand3(&mut rng, (2, c_in, l));
        let w = rand3(&mut rng, (c_in, c_out, k));
        let l_out = convtr_out_len(l, k, stride, pad, 1);
        let dy = rand3(&mut rng, (2, c_out, l_out));

        let (dx, dw, db) = convtr1d_backward(x.view(), w.view(), dy.view(), stride, pad, 1);

        // Forward: y[b, co, t*stride + ki - pad] += x[b, ci, t] * w[ci, co, ki].
        let mut dx2 = Array3::<f32>::zeros(x.dim());
        let mut dw2 = Array3::<f32>::zeros(w.dim());
        let mut db2 = Array1::<f32>::zeros(c_out);
        for b in 0..2 {
            for ci in 0..c_in {
                for co in 0..c_out {
                    for t in 0..l {
                        for ki in 0..k {
                            let dst = (t * stride + ki) as isize - pad as isize;
                            if dst >= 0 && (dst as usize) < l_out {
                                let g = dy[[b, co, dst as usize]];
                                dx2[[b, ci, t]] += g * w[[ci, co, ki]];
                                dw2[[ci, co, ki]] += g * x[[b, ci, t]];
                            }
                        }
                    }
                }
            }
        }
        for co in 0..c_out {
            for b in 0..2 {
                for t in 0..l_out {
                    db2[co] += dy[[b, co, t]];
                }
            }
        }
        assert_close(dx.as_slice().unwrap(), dx2.as_slice().unwrap(), 1e-4);
        assert_close(dw.as_slice().unwrap(), dw2.as_slice().unwrap(), 1e-4);
        assert_close(db.as_slice().unwrap(), db2.as_slice().unwrap(), 1e-4);
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for &(strides, pads) in &[((1, 1), (1, 1)), ((3, 1), (2, 0)), ((2, 2), (0, 0))] {
            let x = rand4(&mut rng, (2, 3, 11, 7));
            let w = rand4(&mut rng, (4, 3, 5, 3));
            let bias: Array1<f32> = init::normal(&mut rng, &[4], 0.0, 1.0).into_dimensionality().unwrap();
            if 11 + 2 * pads.0 < 5 || 7 + 2 * pads.1 < 3 {
                continue;
            }
            let got = conv2d_forward(x.view(), w.view(), Some(bias.view()), strides, pads);

            let (h_out, w_out) = (
                conv_out_len(11, 5, strides.0, pads.0, 1),
                conv_out_len(7, 3, strides.1, pads.1, 1),
            );
            let mut want = Array4::<f32>::zeros((2, 4, h_out, w_out));
            for b in 0..2 {
                for co in 0..4 {
                    for ho in 0..h_out {
                        for wo in 0..w_out {
                            let mut acc = bias[co] as f64;
                            for ci in 0..3 {
                                for khi in 0..5 {
                                    for kwi in 0..3 {
                                        let sh = (ho * strides.0 + khi) as isize - pads.0 as isize;
                                        let sw = (wo * strides.1 + kwi) as isize - pads.1 as isize;
                                        if sh >= 0 && (sh as usize) < 11 && sw >= 0 && (sw as usize) < 7 {
                                            acc += x[[b, ci, sh as usize, sw as usize]] as f64
                                                * w[[co, ci, khi, kwi]] as f64;
                                        }
                                    }
                                }
                            }
                            want[[b, co, ho, wo]] = acc as f32;
                        }
                    }
                }
            }
            assert_close(got.as_slice().unwrap(), want.as_slice().unwrap(), 1e-5);
        }
    }

    #[test]
    fn conv2d_backward_agrees_with_dot_product_probe() {
        // <dy, conv(x+h*e)> - <dy, conv(x)> ~= h * dx[e] for every basis
        // direction at once via a random probe.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let strides = (3, 1);
        let pads = (2, 0);
        let x = rand4(&mut rng, (1, 2, 13, 3));
        let w = rand4(&mut rng, (3, 2, 5, 1));
        let y = conv2d_forward(x.view(), w.view(), None, strides, pads);
        let dy = rand4(&mut rng, (1, 3, y.dim().2, y.dim().3));
        let (dx, dw, db) = conv2d_backward(x.view(), w.view(), dy.view(), strides, pads);
        assert_eq!(db.len(), 3);

        let probe_x = rand4(&mut rng, x.dim());
        let probe_w = rand4(&mut rng, w.dim());
        let h = 1e-3f32;

        let xp = &x + &probe_x.mapv(|v| v * h);
        let y2 = conv2d_forward(xp.view(), w.view(), None, strides, pads);
        let fd: f64 = y2.iter().zip(y.iter()).zip(dy.iter()).map(|((a, b), g)| ((a - b) * g) as f64).sum();
        let an: f64 = dx.iter().zip(probe_x.iter()).map(|(a, b)| (a * b * h) as f64).sum();
        assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-2, "dx probe: {fd} vs {an}");

        let wp = &w + &probe_w.mapv(|v| v * h);
        let y3 = conv2d_forward(x.view(), wp.view(), None, strides, pads);
        let fd_w: f64 = y3.iter().zip(y.iter()).zip(dy.iter()).map(|((a, b), g)| ((a - b) * g) as f64).sum();
        let an_w: f64 = dw.iter().zip(probe_w.iter()).map(|(a, b)| (a * b * h) as f64).sum();
        assert!((fd_w - an_w).abs() / an_w.abs().max(1e-6) < 1e-2, "dw probe: {fd_w} vs {an_w}");
    }
}
