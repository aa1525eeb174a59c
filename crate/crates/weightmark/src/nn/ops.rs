//! Elementwise activations, pooling, and padding with manual backward passes.

use ndarray::{Array, Array3, ArrayView3, Dimension};

pub fn leaky_relu<D: Dimension>(x: &Array<f32, D>, slope: f32) -> Array<f32, D> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward<D: Dimension>(x: &Array<f32, D>, dy: &Array<f32, D>, slope: f32) -> Array<f32, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|g, &v| {
        if v < 0.0 {
            *g *= slope;
        }
    });
    dx
}

pub fn tanh<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(f32::tanh)
}

/// Backward through tanh given the forward output `y`.
pub fn tanh_backward<D: Dimension>(y: &Array<f32, D>, dy: &Array<f32, D>) -> Array<f32, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|g, &v| *g *= 1.0 - v * v);
    dx
}

pub fn sigmoid<D: Dimension>(x: &Array<f32, D>) -> Array<f32, D> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Mirror the signal interior outward: `left` and `right` must be < L.
pub fn reflect_pad_1d(x: ArrayView3<f32>, left: usize, right: usize) -> Array3<f32> {
    let (bsz, c, l) = x.dim();
    assert!(left < l && right < l, "reflect pad ({left}, {right}) needs input longer than the pad");
    let mut y = Array3::zeros((bsz, c, left + l + right));
    for b in 0..bsz {
        for ci in 0..c {
            for i in 0..left {
                y[[b, ci, i]] = x[[b, ci, left - i]];
            }
            for i in 0..l {
                y[[b, ci, left + i]] = x[[b, ci, i]];
            }
            for i in 0..right {
                y[[b, ci, left + l + i]] = x[[b, ci, l - 2 - i]];
            }
        }
    }
    y
}

/// Adjoint of [`reflect_pad_1d`]: fold padded-region gradients back onto their
/// mirror sources.
pub fn reflect_pad_1d_backward(dy: ArrayView3<f32>, left: usize, right: usize) -> Array3<f32> {
    let (bsz, c, padded) = dy.dim();
    let l = padded - left - right;
    let mut dx = Array3::zeros((bsz, c, l));
    for b in 0..bsz {
        for ci in 0..c {
            for i in 0..left {
                dx[[b, ci, left - i]] += dy[[b, ci, i]];
            }
            for i in 0..l {
                dx[[b, ci, i]] += dy[[b, ci, left + i]];
            }
            for i in 0..right {
                dx[[b, ci, l - 2 - i]] += dy[[b, ci, left + l + i]];
            }
        }
    }
    dx
}

/// Average pooling over windows of `k` with stride `s` and zero padding `p`;
/// the divisor is always `k`, padding included.
pub fn avg_pool1d(x: ArrayView3<f32>, k: usize, s: usize, p: usize) -> Array3<f32> {
    let (bsz, c, l) = x.dim();
    let l_out = (l + 2 * p - k) / s + 1;
    let mut y = Array3::zeros((bsz, c, l_out));
    let inv = 1.0 / k as f32;
    for b in 0..bsz {
        for ci in 0..c {
            for t in 0..l_out {
                let mut acc = 0.0f32;
                for ki in 0..k {
                    let src = (t * s + ki) as isize - p as isize;
                    if src >= 0 && (src as usize) < l {
                        acc += x[[b, ci, src as usize]];
                    }
                }
                y[[b, ci, t]] = acc * inv;
            }
        }
    }
    y
}

pub fn avg_pool1d_backward(dy: ArrayView3<f32>, l: usize, k: usize, s: usize, p: usize) -> Array3<f32> {
    let (bsz, c, l_out) = dy.dim();
    let mut dx = Array3::zeros((bsz, c, l));
    let inv = 1.0 / k as f32;
    for b in 0..bsz {
        for ci in 0..c {
            for t in 0..l_out {
                let g = dy[[b, ci, t]] * inv;
                for ki in 0..k {
                    let src = (t * s + ki) as isize - p as isize;
                    if src >= 0 && (src as usize) < l {
                        dx[[b, ci, src as usize]] += g;
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
    use ndarray::arr3;

    #[test]
    fn reflect_pad_mirrors_without_repeating_edges() {
        let x = arr3(&[[[1.0f32, 2.0, 3.0, 4.0]]]);
        let y = reflect_pad_1d(x.view(), 2, 3);
        let want = [3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(y.as_slice().unwrap(), &want);
    }

    #[test]
    fn reflect_pad_backward_is_adjoint() {
        let x = arr3(&[[[0.5f32, -1.0, 2.0, 0.25, 3.0]]]);
        let dy_len = 2 + 5 + 2;
        let dy = Array3::from_shape_fn((1, 1, dy_len), |(_, _, i)| (i as f32 + 1.0) * 0.1);
        let y = reflect_pad_1d(x.view(), 2, 2);
        let dx = reflect_pad_1d_backward(dy.view(), 2, 2);
        let lhs: f32 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn avg_pool_downsample_geometry() {
        let x = Array3::from_shape_fn((1, 1, 16), |(_, _, i)| i as f32);
        let y = avg_pool1d(x.view(), 4, 2, 2);
        assert_eq!(y.dim().2, (16 + 2 * 2 - 4) / 2 + 1);
        // First window sees two zero pads then x[0], x[1].
        assert!((y[[0, 0, 0]] - (0.0 + 0.0 + 0.0 + 1.0) / 4.0).abs() < 1e-6);
    }

    #[test]
    fn avg_pool_backward_is_adjoint() {
        let x = Array3::from_shape_fn((2, 3, 10), |(b, c, i)| (b * 31 + c * 7 + i) as f32 * 0.05);
        let y = avg_pool1d(x.view(), 4, 2, 2);
        let dy = Array3::from_shape_fn(y.dim(), |(b, c, i)| ((b + c + i) % 5) as f32 - 2.0);
        let dx = avg_pool1d_backward(dy.view(), 10, 4, 2, 2);
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn leaky_relu_gradient_uses_input_sign() {
        let x = arr3(&[[[-2.0f32, 0.0, 3.0]]]);
        let dy = arr3(&[[[1.0f32, 1.0, 1.0]]]);
        let dx = leaky_relu_backward(&x, &dy, 0.1);
        assert_eq!(dx.as_slice().unwrap(), &[0.1, 1.0, 1.0]);
    }
}
