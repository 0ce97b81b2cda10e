//! Deterministic speech features: log-mel filterbank energies followed by a
//! frozen random projection.
//!
//! Framing matches [`prosody`](crate::prosody) so both modules report the
//! same number of frames for a clip.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_io::AudioClip;
use crate::par;
use crate::prosody::frame_count;
use crate::tensor::Matrix;

pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub f_max: f64,
    pub proj_seed: u64,
    pub out_dim: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            n_mels: 80,
            frame_len: 400,
            hop: 320,
            fft_size: 512,
            f_max: 8000.0,
            proj_seed: 0x5eed,
            out_dim: 512,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.n_mels == 0 || self.hop == 0 || self.frame_len == 0 || self.out_dim == 0 {
            return Err(Error::config("frontend sizes must be >= 1"));
        }
        if self.fft_size < self.frame_len {
            return Err(Error::config(format!(
                "fft_size {} is shorter than frame_len {}",
                self.fft_size, self.frame_len
            )));
        }
        if !(self.f_max > 0.0 && self.f_max <= sample_rate / 2.0) {
            return Err(Error::config(format!(
                "mel upper edge {} Hz must lie in (0, {}] Hz",
                self.f_max,
                sample_rate / 2.0
            )));
        }
        Ok(())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// `n_mels x (fft_size/2 + 1)` triangular filters with edges equally spaced
/// on the mel scale between 0 Hz and `f_max`. Peak weight is 1.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: f64, f_max: f64) -> Matrix {
    let n_bins = fft_size / 2 + 1;
    let top = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    Matrix::from_fn(n_mels, n_bins, |m, k| {
        let f = k as f64 * sample_rate / fft_size as f64;
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

fn power_spectrum(frame: &[f64], window: &[f64], fft: &Arc<dyn Fft<f64>>) -> Vec<f64> {
    let n = fft.len();
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (b, (x, w)) in buf.iter_mut().zip(frame.iter().zip(window)) {
        b.re = x * w;
    }
    fft.process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// `N' x n_mels` log-mel energies; a clip shorter than one frame gives a
/// `0 x n_mels` matrix.
pub fn frontend_features(a: &AudioClip, cfg: &FrontendConfig) -> Result<Matrix> {
    let sr = a.sample_rate() as f64;
    cfg.validate(sr)?;
    let n = frame_count(a.len(), cfg.frame_len, cfg.hop);
    let window = hann(cfg.frame_len);
    let bank = mel_filterbank(cfg.n_mels, cfg.fft_size, sr, cfg.f_max);
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let s = a.samples();
    let rows = par::map_range(n, |i| {
        let spec = power_spectrum(&s[i * cfg.hop..i * cfg.hop + cfg.frame_len], &window, &fft);
        (0..cfg.n_mels)
            .map(|m| {
                let e: f64 = bank.row(m).iter().zip(&spec).map(|(w, p)| w * p).sum();
                (e + LOG_FLOOR).ln()
            })
            .collect::<Vec<f64>>()
    });
    let mut out = Matrix::zeros(n, cfg.n_mels);
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}

/// The frozen `d_in x out_dim` matrix used by [`fixed_projection`].
///
/// Entries are uniform in `+-sqrt(3 / d_in)`, which keeps the output variance
/// equal to the input variance for white input.
pub fn projection_matrix(d_in: usize, out_dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::random_uniform(d_in, out_dim, (3.0 / d_in.max(1) as f64).sqrt(), &mut rng)
}

pub fn fixed_projection(x: &Matrix, seed: u64, out_dim: usize) -> Matrix {
    x.matmul(&projection_matrix(x.cols(), out_dim, seed))
}

/// Log-mel features followed by the frozen projection: `N' x out_dim`.
pub fn encode_frontend(a: &AudioClip, cfg: &FrontendConfig) -> Result<Matrix> {
    let f = frontend_features(a, cfg)?;
    Ok(fixed_projection(&f, cfg.proj_seed, cfg.out_dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prosody::{frame_energy, tone};
    use rand::Rng;

    #[test]
    fn silence_is_the_log_floor() {
        let a = AudioClip::new(16000, vec![0.0; 16000]).unwrap();
        let f = frontend_features(&a, &FrontendConfig::default()).unwrap();
        assert_eq!(f.shape(), (49, 80));
        assert!(f.as_slice().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn short_clip_has_no_frames() {
        let a = AudioClip::new(16000, vec![0.1; 399]).unwrap();
        assert_eq!(frontend_features(&a, &FrontendConfig::default()).unwrap().shape(), (0, 80));
    }

    #[test]
    fn one_kilohertz_lands_in_the_nearest_filter() {
        // Filter centers from the HTK mel formula written out independently.
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let centers: Vec<f64> = (1..=80)
            .map(|i| 700.0 * (10f64.powf(top * i as f64 / 81.0 / 2595.0) - 1.0))
            .collect();
        let nearest = (0..80)
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();

        let f = frontend_features(&tone(1000.0, 1.0, 0.5), &FrontendConfig::default()).unwrap();
        let means: Vec<f64> = (0..80).map(|m| f.column(m).iter().sum::<f64>() / f.rows() as f64).collect();
        let best = (0..80).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        assert_eq!(best, nearest);
    }

    #[test]
    fn frame_count_matches_prosody() {
        let cfg = FrontendConfig::default();
        for n in [400, 719, 720, 721, 16000, 12345] {
            let a = AudioClip::new(16000, vec![0.01; n]).unwrap();
            assert_eq!(
                frontend_features(&a, &cfg).unwrap().rows(),
                frame_energy(&a, 400, 320).len()
            );
        }
    }

    #[test]
    fn filterbank_rows_are_triangles() {
        let bank = mel_filterbank(80, 512, 16000.0, 8000.0);
        for m in 0..80 {
            let row = bank.row(m);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(row[..peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn projection_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::random_normal(200, 80, 1.0, &mut rng);
        let a = fixed_projection(&x, 7, 512);
        let b = fixed_projection(&x, 7, 512);
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(fixed_projection(&Matrix::zeros(3, 80), 7, 512).max_abs() == 0.0);

        let var = |m: &Matrix| {
            let mean = m.mean();
            m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64
        };
        let ratio = var(&a) / var(&x);
        assert!((0.5..2.0).contains(&ratio), "{ratio}");
        assert_ne!(fixed_projection(&x, 8, 512).as_slice(), a.as_slice());
    }

    #[test]
    fn deterministic_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = AudioClip::new(16000, (0..8000).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let cfg = FrontendConfig::default();
        assert_eq!(encode_frontend(&a, &cfg).unwrap(), encode_frontend(&a, &cfg).unwrap());
    }
}
