//! 1-D signal helpers shared by keyframe extraction and beat detection.

use crate::error::{Error, Result};

/// Normalized Gaussian taps on `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|w| w / total).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

pub fn gaussian_smooth(values: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(sigma)?;
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let radius = (kernel.len() / 2) as isize;
    let n = values.len();
    Ok((0..n as isize)
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * values[reflect_index(t + j as isize - radius, n)])
                .sum()
        })
        .collect())
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Indices with `v[t] > v[t-1]` and `v[t] >= v[t+1]`; a plateau resolves
/// to its earliest frame. Endpoints are never peaks.
pub fn peak_indices(values: &[f64]) -> Vec<usize> {
    if values.len() < 3 {
        return Vec::new();
    }
    (1..values.len() - 1)
        .filter(|&t| values[t] > values[t - 1] && values[t] >= values[t + 1])
        .collect()
}

/// Strict local minima, endpoints excluded.
pub fn strict_minima(values: &[f64]) -> Vec<usize> {
    if values.len() < 3 {
        return Vec::new();
    }
    (1..values.len() - 1)
        .filter(|&t| values[t] < values[t - 1] && values[t] < values[t + 1])
        .collect()
}
