//! Scalar and vector helpers shared by the graph ops, the losses and the
//! evaluation code.

use crate::error::{Error, Result};

/// Norm guard added to each vector norm when cosine distance is used inside a loss.
pub const NORM_GUARD: f64 = 1e-12;

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `d(x, y) = 0.5 - x.y / (2 |x| |y|)`, in `[0, 1]`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "cosine distance of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(cosine_from_parts(dot(x, y), nx, ny))
}

/// Cosine distance with [`NORM_GUARD`] added to both norms; defined everywhere.
pub fn guarded_cosine_distance(x: &[f64], y: &[f64]) -> f64 {
    cosine_from_parts(dot(x, y), norm(x) + NORM_GUARD, norm(y) + NORM_GUARD)
}

fn cosine_from_parts(dot: f64, nx: f64, ny: f64) -> f64 {
    (0.5 - dot / (2.0 * nx * ny)).clamp(0.0, 1.0)
}

pub fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}
