//! Slice helpers for the small dense vectors used throughout the crate.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[inline]
pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[inline]
pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Row-major square matrix times vector.
pub fn mat_vec(m: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// `aᵀ M b` for a row-major square `M`.
pub fn bilinear(m: &[f64], n: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        if a[i] == 0.0 {
            continue;
        }
        acc += a[i] * dot(&m[i * n..(i + 1) * n], b);
    }
    acc
}
