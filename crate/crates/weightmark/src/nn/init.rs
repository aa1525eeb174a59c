//! Seeded weight initializers.

use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(shape.to_vec())
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], mean: f32, std: f32) -> ArrayD<f32> {
    let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || dist.sample(rng))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> ArrayD<f32> {
    let dist = Uniform::new(lo, hi).expect("lo must be below hi");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || dist.sample(rng))
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual default for
/// linear and convolutional weights.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    uniform(rng, shape, -bound, bound)
}

/// Matrix with orthonormal rows, `rows <= cols`.
///
/// Gram-Schmidt over Gaussian draws; re-draws a row in the measure-zero event
/// it falls in the span of the previous ones.
pub fn orthogonal_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f32> {
    assert!(rows <= cols, "cannot fit {rows} orthonormal rows in dimension {cols}");
    let dist = Normal::new(0.0f64, 1.0).unwrap();
    let mut out = Array2::<f32>::zeros((rows, cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for r in 0..rows {
        loop {
            let mut v: Vec<f64> = (0..cols).map(|_| dist.sample(rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for vi in &mut v {
                    *vi /= norm;
                }
                for (c, vi) in v.iter().enumerate() {
                    out[[r, c]] = *vi as f32;
                }
                basis.push(v);
                break;
            }
        }
    }
    out
}
