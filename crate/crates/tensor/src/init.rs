//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Shape, Tensor};

pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data)
}

/// He-normal for a `[cout, cin, kh, kw]` kernel.
pub fn kaiming<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    normal(shape, (2.0 / fan_in).sqrt(), rng)
}
