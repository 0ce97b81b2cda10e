//! Frame-level f0 and energy with per-utterance normalization.
//!
//! Frames are `frame_len` samples long and `hop` samples apart with no
//! padding, so a clip of `N` samples has `floor((N - frame_len) / hop) + 1`
//! frames. The defaults (400 / 320 at 16 kHz) give a 50 Hz feature rate,
//! the same grid the speech frontend uses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_io::AudioClip;
use crate::par;
use crate::tensor::Matrix;

const RMS_FLOOR: f64 = 1e-4;
const DEGENERATE_STD: f64 = 1e-8;
/// A candidate lag is accepted if it reaches this fraction of the best
/// normalized autocorrelation; the shortest such lag wins.
const PEAK_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProsodyConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub voicing_threshold: f64,
}

impl Default for ProsodyConfig {
    fn default() -> Self {
        ProsodyConfig {
            frame_len: 400,
            hop: 320,
            f_min: 60.0,
            f_max: 400.0,
            voicing_threshold: 0.3,
        }
    }
}

impl ProsodyConfig {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.frame_len == 0 || self.hop == 0 {
            return Err(Error::config("frame_len and hop must be >= 1"));
        }
        let nyquist = sample_rate / 2.0;
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max < nyquist) {
            return Err(Error::config(format!(
                "f0 band [{}, {}] Hz must lie inside (0, {nyquist}) Hz",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProsodySeq {
    /// Hz, 0 for unvoiced frames.
    pub f0: Vec<f64>,
    pub energy: Vec<f64>,
    /// N' x 2 z-scores, columns `[f0, energy]`.
    pub normalized: Matrix,
}

impl ProsodySeq {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }
}

pub fn frame_count(n_samples: usize, frame_len: usize, hop: usize) -> usize {
    if n_samples < frame_len || frame_len == 0 || hop == 0 {
        0
    } else {
        (n_samples - frame_len) / hop + 1
    }
}

fn rms(frame: &[f64]) -> f64 {
    (frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64).sqrt()
}

/// Per-frame RMS amplitude.
pub fn frame_energy(a: &AudioClip, frame_len: usize, hop: usize) -> Vec<f64> {
    let n = frame_count(a.len(), frame_len, hop);
    let s = a.samples();
    (0..n)
        .map(|i| rms(&s[i * hop..i * hop + frame_len]))
        .collect()
}

fn normalized_autocorrelation(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len();
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n - lag {
        let (x, y) = (frame[i], frame[i + lag]);
        xy += x * y;
        xx += x * x;
        yy += y * y;
    }
    let denom = (xx * yy).sqrt();
    if denom > 0.0 {
        xy / denom
    } else {
        0.0
    }
}

fn frame_f0(frame: &[f64], sr: f64, cfg: &ProsodyConfig) -> f64 {
    if rms(frame) < RMS_FLOOR {
        return 0.0;
    }
    let lag_min = ((sr / cfg.f_max).floor() as usize).max(1);
    let lag_max = ((sr / cfg.f_min).ceil() as usize).min(frame.len().saturating_sub(2));
    if lag_min + 1 > lag_max {
        return 0.0;
    }
    // r[i] holds the lag lag_min - 1 + i so every lag in range has neighbours.
    let lo = lag_min - 1;
    let r: Vec<f64> = (lo..=lag_max + 1)
        .map(|lag| {
            if lag == 0 {
                1.0
            } else {
                normalized_autocorrelation(frame, lag)
            }
        })
        .collect();
    let at = |lag: usize| r[lag - lo];

    let best = (lag_min..=lag_max).map(at).fold(f64::NEG_INFINITY, f64::max);
    if best < cfg.voicing_threshold {
        return 0.0;
    }
    let peak = (lag_min..=lag_max)
        .find(|&lag| {
            at(lag) >= PEAK_FRACTION * best && at(lag) >= at(lag - 1) && at(lag) >= at(lag + 1)
        })
        .unwrap_or_else(|| {
            (lag_min..=lag_max)
                .max_by(|&a, &b| at(a).total_cmp(&at(b)))
                .unwrap_or(lag_min)
        });

    let (y0, y1, y2) = (at(peak - 1), at(peak), at(peak + 1));
    let curvature = y0 - 2.0 * y1 + y2;
    let shift = if curvature < 0.0 {
        (0.5 * (y0 - y2) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    (sr / (peak as f64 + shift)).clamp(cfg.f_min, cfg.f_max)
}

/// Autocorrelation pitch tracker with parabolic peak refinement.
pub fn estimate_f0(a: &AudioClip, cfg: &ProsodyConfig) -> Result<Vec<f64>> {
    let sr = f64::from(a.sample_rate());
    cfg.validate(sr)?;
    let n = frame_count(a.len(), cfg.frame_len, cfg.hop);
    let s = a.samples();
    Ok(par::map_range(n, |i| {
        frame_f0(&s[i * cfg.hop..i * cfg.hop + cfg.frame_len], sr, cfg)
    }))
}

fn z_scores(values: &[f64], mask: impl Fn(usize) -> bool) -> Vec<f64> {
    let picked: Vec<f64> = (0..values.len())
        .filter(|&i| mask(i))
        .map(|i| values[i])
        .collect();
    let (mean, std) = crate::signal::mean_std(&picked);
    (0..values.len())
        .map(|i| {
            if !mask(i) || std < DEGENERATE_STD {
                0.0
            } else {
                (values[i] - mean) / std
            }
        })
        .collect()
}

/// Energy is z-scored over all frames; f0 over voiced frames only, with
/// unvoiced positions left at 0. Columns with std below 1e-8 become zeros.
pub fn normalize_per_utterance(f0: &[f64], energy: &[f64]) -> Result<Matrix> {
    if f0.len() != energy.len() {
        return Err(Error::dim(format!(
            "f0 has {} frames but energy has {}",
            f0.len(),
            energy.len()
        )));
    }
    let f0_z = z_scores(f0, |i| f0[i] > 0.0);
    let e_z = z_scores(energy, |_| true);
    Ok(Matrix::from_fn(f0.len(), 2, |r, c| {
        if c == 0 {
            f0_z[r]
        } else {
            e_z[r]
        }
    }))
}

pub fn extract_prosody(a: &AudioClip, cfg: &ProsodyConfig) -> Result<ProsodySeq> {
    let f0 = estimate_f0(a, cfg)?;
    let energy = frame_energy(a, cfg.frame_len, cfg.hop);
    let normalized = normalize_per_utterance(&f0, &energy)?;
    Ok(ProsodySeq {
        f0,
        energy,
        normalized,
    })
}

/// `frame,f0_hz,energy,f0_norm,energy_norm`
pub fn format_prosody_csv(p: &ProsodySeq) -> String {
    let mut out = String::from("frame,f0_hz,energy,f0_norm,energy_norm\n");
    for i in 0..p.len() {
        out.push_str(&format!(
            "{i},{},{},{},{}\n",
            p.f0[i],
            p.energy[i],
            p.normalized[(i, 0)],
            p.normalized[(i, 1)]
        ));
    }
    out
}

#[cfg(test)]
pub(crate) fn tone(freq: f64, seconds: f64, amplitude: f64) -> AudioClip {
    let n = (seconds * 16000.0) as usize;
    AudioClip::new(
        16000,
        (0..n)
            .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect(),
    )
    .unwrap()
}
