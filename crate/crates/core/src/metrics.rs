//! Diversity and beat alignment of generated motion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kel::{select_keyframes, KeyframePolicy, VariationSeries};
use crate::motion_io::{AudioClip, MotionSequence};
use crate::par;
use crate::prosody::frame_energy;
use crate::signal::{gaussian_smooth, mean_std, strict_minima};

/// Onset peaks must exceed `mean + ONSET_ALPHA * std` of the smoothed onset curve.
const ONSET_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeatConfig {
    /// Tolerance of [`beat_align`] in frames.
    pub sigma: f64,
    /// Smoothing of the motion speed and audio onset curves, in frames.
    pub motion_smoothing_sigma: f64,
}

impl Default for BeatConfig {
    fn default() -> Self {
        BeatConfig {
            sigma: 3.0,
            motion_smoothing_sigma: 2.0,
        }
    }
}

impl BeatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma > 0.0 && self.motion_smoothing_sigma > 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!("beat sigmas must be > 0, got {self:?}")))
        }
    }
}

/// Mean over the 9 head-pose dimensions of the temporal standard deviation,
/// averaged over sequences.
pub fn diversity(sequences: &[MotionSequence]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::config("diversity needs at least one sequence"));
    }
    let per_seq = par::map(sequences, |m| {
        let h = m.head_pose();
        let stds: f64 = (0..h.cols()).map(|c| mean_std(&h.column(c)).1).sum();
        stds / h.cols() as f64
    });
    Ok(per_seq.iter().sum::<f64>() / sequences.len() as f64)
}

/// Strict local minima of a speed curve after Gaussian smoothing.
pub fn speed_minima(speed: &[f64], smoothing_sigma: f64) -> Result<Vec<usize>> {
    Ok(strict_minima(&gaussian_smooth(speed, smoothing_sigma)?))
}

/// Frames where the smoothed head-pose speed has a strict local minimum.
///
/// Speed at frame `t >= 1` is the Euclidean norm of the head-pose change from
/// `t - 1`; frame 0 repeats frame 1.
pub fn motion_beats(m: &MotionSequence, cfg: &BeatConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let h = m.head_pose();
    let t_len = h.rows();
    if t_len < 3 {
        return Ok(Vec::new());
    }
    let mut speed: Vec<f64> = (0..t_len)
        .map(|t| {
            if t == 0 {
                0.0
            } else {
                h.row(t)
                    .iter()
                    .zip(h.row(t - 1))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            }
        })
        .collect();
    speed[0] = speed[1];
    speed_minima(&speed, cfg.motion_smoothing_sigma)
}

/// Onset peaks of the audio, indexed at the motion frame rate `fps`.
///
/// Energy is the RMS of consecutive non-overlapping windows of
/// `sample_rate / fps` samples; onset strength is its positive first
/// difference.
pub fn audio_beats(a: &AudioClip, fps: f64, cfg: &BeatConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if !(fps > 0.0) {
        return Err(Error::config(format!("frame rate must be > 0, got {fps}")));
    }
    let hop = (a.sample_rate() as f64 / fps).round().max(1.0) as usize;
    let energy = frame_energy(a, hop, hop);
    let onset: Vec<f64> = (0..energy.len())
        .map(|t| if t == 0 { 0.0 } else { (energy[t] - energy[t - 1]).max(0.0) })
        .collect();
    let policy = KeyframePolicy {
        gaussian_sigma: cfg.motion_smoothing_sigma,
        threshold_alpha: ONSET_ALPHA,
        min_separation: 0,
    };
    Ok(select_keyframes(&VariationSeries::new(onset)?, &policy)?.indices())
}

/// Mean over motion beats of `exp(-d^2 / (2 sigma^2))`, `d` the distance to
/// the nearest audio beat. 0 when either list is empty.
pub fn beat_align(motion: &[usize], audio: &[usize], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("beat sigma must be > 0, got {sigma}")));
    }
    if motion.is_empty() || audio.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = motion
        .iter()
        .map(|&t| {
            let d = audio.iter().map(|&s| t.abs_diff(s)).min().unwrap() as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / motion.len() as f64)
}
