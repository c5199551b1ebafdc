use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor;

/// Xavier/Glorot uniform matrix of shape `fan_in × fan_out`.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}

pub fn ones(shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().fill(1.0);
    t
}

/// Standard deviation used for embedding tables.
pub const EMBEDDING_STD: f64 = 0.02;
