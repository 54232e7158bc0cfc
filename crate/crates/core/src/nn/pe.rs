use crate::error::{invalid, Result};
use crate::numerics::{Scalar, Tensor};

/// Interleaved sinusoidal encoding: column `2i` holds
/// `sin(pos / 10000^(2i/d))`, column `2i+1` the matching cosine.
pub fn sinusoidal_pe<T: Scalar>(length: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 2 != 0 {
        return invalid(format!("sinusoidal encoding needs an even width, got {d}"));
    }
    let mut data = Vec::with_capacity(length * d);
    for pos in 0..length {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Tensor::matrix(length, d, data)
}

/// Sinusoidal features of continuous time values (one row per value).
pub fn time_features<T: Scalar>(times: &[f64], d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 2 != 0 {
        return invalid(format!("time features need an even width, got {d}"));
    }
    let mut data = Vec::with_capacity(times.len() * d);
    for &t in times {
        for i in 0..d / 2 {
            let freq = 1000f64.powf(-(i as f64) / (d / 2) as f64);
            let angle = 1000.0 * t * freq;
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Tensor::matrix(times.len(), d, data)
}
