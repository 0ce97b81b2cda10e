//! Ground-truth keyframe extraction from motion coefficients.
//!
//! The head-pose variation at frame `t` is the geodesic angle between the
//! consecutive rotations plus the Euclidean step of the neck/camera
//! parameters; the expression variation is the Euclidean step of the
//! expression row. Both series are Gaussian-smoothed and keyframes are the
//! local maxima above `mean + alpha * std` of the smoothed series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_io::{decompose_pose, KeyframeSeq, MotionSequence, PoseDecomposition};
use crate::par::Execution;
use crate::rotation::relative_rotation_angle;
use crate::signal;
use crate::tensor::Matrix;

/// Per-frame motion variation; `values[0]` is always 0.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationSeries {
    values: Vec<f64>,
}

impl VariationSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Range(
                "variation values must be finite and non-negative".into(),
            ));
        }
        Ok(VariationSeries { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframePolicy {
    pub gaussian_sigma: f64,
    pub threshold_alpha: f64,
    /// 0 disables non-maximum suppression.
    pub min_separation: usize,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        KeyframePolicy {
            gaussian_sigma: 2.0,
            threshold_alpha: 0.5,
            min_separation: 0,
        }
    }
}

impl KeyframePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma > 0.0) {
            return Err(Error::config(format!(
                "gaussian_sigma must be > 0, got {}",
                self.gaussian_sigma
            )));
        }
        if !(self.threshold_alpha.is_finite() && self.threshold_alpha >= 0.0) {
            return Err(Error::config(format!(
                "threshold_alpha must be >= 0, got {}",
                self.threshold_alpha
            )));
        }
        Ok(())
    }
}

fn row_distance(m: &Matrix, t: usize) -> f64 {
    m.row(t)
        .iter()
        .zip(m.row(t - 1))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

pub fn pose_variation(d: &PoseDecomposition) -> VariationSeries {
    let t_len = d.rotation.rows();
    let mut values = vec![0.0; t_len];
    for t in 1..t_len {
        let r = |i: usize| [d.rotation[(i, 0)], d.rotation[(i, 1)], d.rotation[(i, 2)]];
        values[t] = relative_rotation_angle(r(t), r(t - 1)) + row_distance(&d.combined_nc, t);
    }
    VariationSeries { values }
}

pub fn expression_variation(m: &MotionSequence) -> VariationSeries {
    let e = m.expression();
    let mut values = vec![0.0; e.rows()];
    for (t, v) in values.iter_mut().enumerate().skip(1) {
        *v = row_distance(e, t);
    }
    VariationSeries { values }
}

pub fn gaussian_smooth(v: &VariationSeries, sigma: f64) -> Result<VariationSeries> {
    Ok(VariationSeries {
        values: signal::gaussian_smooth(&v.values, sigma)?,
    })
}

/// `mean + alpha * std` (population std) of an already-smoothed series.
pub fn keyframe_threshold(smoothed: &[f64], alpha: f64) -> f64 {
    let (mean, std) = signal::mean_std(smoothed);
    mean + alpha * std
}

/// Intermediate values of [`select_keyframes`], kept for plotting.
#[derive(Clone, Debug)]
pub struct KeyframeAnalysis {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub threshold: f64,
    pub keyframes: KeyframeSeq,
}

pub fn analyze(v: &VariationSeries, policy: &KeyframePolicy) -> Result<KeyframeAnalysis> {
    policy.validate()?;
    let smoothed = signal::gaussian_smooth(&v.values, policy.gaussian_sigma)?;
    let threshold = keyframe_threshold(&smoothed, policy.threshold_alpha);
    let t_len = smoothed.len();

    let mut peaks: Vec<usize> = signal::peak_indices(&smoothed)
        .into_iter()
        .filter(|&t| smoothed[t] > threshold)
        .collect();

    if policy.min_separation > 0 && peaks.len() > 1 {
        // Highest first; equal heights keep the earlier frame.
        peaks.sort_by(|&a, &b| smoothed[b].total_cmp(&smoothed[a]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::with_capacity(peaks.len());
        for p in peaks {
            if kept.iter().all(|&k| k.abs_diff(p) > policy.min_separation) {
                kept.push(p);
            }
        }
        kept.sort_unstable();
        peaks = kept;
    }

    Ok(KeyframeAnalysis {
        raw: v.values.clone(),
        smoothed,
        threshold,
        keyframes: KeyframeSeq::from_indices(t_len, &peaks),
    })
}

/// Series shorter than 3 frames yield no keyframes.
pub fn select_keyframes(v: &VariationSeries, policy: &KeyframePolicy) -> Result<KeyframeSeq> {
    Ok(analyze(v, policy)?.keyframes)
}

/// Head-pose and expression keyframe targets `(k_h, k_e)`.
pub fn extract_targets(
    m: &MotionSequence,
    policy: &KeyframePolicy,
) -> Result<(KeyframeSeq, KeyframeSeq)> {
    let head = select_keyframes(&pose_variation(&decompose_pose(m)), policy)?;
    let expr = select_keyframes(&expression_variation(m), policy)?;
    Ok((head, expr))
}

pub fn extract_targets_batch(
    exec: Execution,
    sequences: &[MotionSequence],
    policy: &KeyframePolicy,
) -> Result<Vec<(KeyframeSeq, KeyframeSeq)>> {
    policy.validate()?;
    exec.map(sequences, |m| extract_targets(m, policy))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion_io::{EXPRESSION_DIM, HEAD_POSE_DIM};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(v: &[f64]) -> VariationSeries {
        VariationSeries::new(v.to_vec()).unwrap()
    }

    fn random_motion(rng: &mut ChaCha8Rng, t: usize) -> MotionSequence {
        MotionSequence::new(
            25.0,
            Matrix::random_normal(t, HEAD_POSE_DIM, 0.3, rng),
            Matrix::random_normal(t, EXPRESSION_DIM, 0.3, rng),
        )
        .unwrap()
    }

    #[test]
    fn constant_pose_has_no_variation() {
        let mut head = Matrix::zeros(10, 9);
        for t in 0..10 {
            head.row_mut(t)
                .copy_from_slice(&[0.2, -0.1, 0.3, 1., 2., 3., 4., 5., 6.]);
        }
        let m = MotionSequence::new(25.0, head, Matrix::zeros(10, 50)).unwrap();
        let v = pose_variation(&decompose_pose(&m));
        assert!(v.values().iter().all(|&x| x == 0.0));
        assert!(expression_variation(&m).values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn neck_step_is_its_euclidean_size() {
        let mut head = Matrix::zeros(10, 9);
        for t in 4..10 {
            head[(t, 4)] = 3.0;
        }
        let m = MotionSequence::new(25.0, head, Matrix::zeros(10, 50)).unwrap();
        let v = pose_variation(&decompose_pose(&m));
        for (t, &x) in v.values().iter().enumerate() {
            assert_eq!(x, if t == 4 { 3.0 } else { 0.0 });
        }
    }

    #[test]
    fn expression_step() {
        let mut e = Matrix::zeros(8, 50);
        for t in 3..8 {
            e[(t, 17)] = 2.0;
        }
        let m = MotionSequence::new(25.0, Matrix::zeros(8, 9), e).unwrap();
        let v = expression_variation(&m);
        assert_eq!(v.values()[3], 2.0);
        assert_eq!(v.values().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn variation_matches_frame_by_frame_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_motion(&mut rng, 16);
        let h = m.head_pose();
        let v = pose_variation(&decompose_pose(&m));
        for t in 1..16 {
            let rot = |i: usize| [h[(i, 0)], h[(i, 1)], h[(i, 2)]];
            let theta = relative_rotation_angle(rot(t), rot(t - 1));
            let dc: f64 = (3..9)
                .map(|j| (h[(t, j)] - h[(t - 1, j)]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((v.values()[t] - (theta + dc)).abs() < 1e-12);
        }
        let ve = expression_variation(&m);
        for t in 1..16 {
            let d: f64 = (0..50)
                .map(|j| (m.expression()[(t, j)] - m.expression()[(t - 1, j)]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((ve.values()[t] - d).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_threshold_example() {
        let v = series(&[0., 0., 5., 0., 0., 8., 0.]);
        let policy = KeyframePolicy {
            gaussian_sigma: 0.1,
            ..Default::default()
        };
        let a = analyze(&v, &policy).unwrap();
        // mean 13/7, population std sqrt(64.857/7)
        let mean: f64 = 13.0 / 7.0;
        let std = ((5.0 * mean * mean + (5.0 - mean).powi(2) + (8.0 - mean).powi(2)) / 7.0).sqrt();
        assert!((a.threshold - (mean + 0.5 * std)).abs() < 1e-9);
        assert_eq!(a.keyframes.indices(), vec![2, 5]);
    }

    #[test]
    fn constant_and_short_series_have_no_keyframes() {
        let p = KeyframePolicy::default();
        assert_eq!(select_keyframes(&series(&[1.0; 12]), &p).unwrap().count(), 0);
        assert_eq!(select_keyframes(&series(&[0.0, 5.0]), &p).unwrap().count(), 0);
        assert_eq!(select_keyframes(&series(&[]), &p).unwrap().len(), 0);
    }

    #[test]
    fn bad_policy_is_rejected() {
        let p = KeyframePolicy {
            gaussian_sigma: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            select_keyframes(&series(&[0.0; 5]), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn min_separation_keeps_the_highest_peak() {
        let v = series(&[0., 4., 0., 6., 0., 0., 0., 0., 5., 0.]);
        let mut p = KeyframePolicy {
            gaussian_sigma: 0.1,
            threshold_alpha: 0.0,
            min_separation: 0,
        };
        assert_eq!(select_keyframes(&v, &p).unwrap().indices(), vec![1, 3, 8]);
        p.min_separation = 2;
        assert_eq!(select_keyframes(&v, &p).unwrap().indices(), vec![3, 8]);
        p.min_separation = 5;
        assert_eq!(select_keyframes(&v, &p).unwrap().indices(), vec![3]);
    }

    /// Applies the selection rule literally, index by index.
    fn brute_force(v: &[f64], policy: &KeyframePolicy) -> Vec<u8> {
        let n = v.len();
        let radius = (3.0 * policy.gaussian_sigma).ceil() as i64;
        let mut w = Vec::new();
        for i in -radius..=radius {
            w.push((-(i * i) as f64 / (2.0 * policy.gaussian_sigma.powi(2))).exp());
        }
        let z: f64 = w.iter().sum();
        let mut s = vec![0.0; n];
        for t in 0..n as i64 {
            for i in -radius..=radius {
                let mut j = t + i;
                while j < 0 || j >= n as i64 {
                    j = if j < 0 { -j - 1 } else { 2 * n as i64 - j - 1 };
                }
                s[t as usize] += w[(i + radius) as usize] / z * v[j as usize];
            }
        }
        let mean = s.iter().sum::<f64>() / n as f64;
        let std = (s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let tau = mean + policy.threshold_alpha * std;
        let mut out = vec![0u8; n];
        for t in 1..n.saturating_sub(1) {
            if s[t] > s[t - 1] && s[t] >= s[t + 1] && s[t] > tau {
                out[t] = 1;
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..200 {
            let n = 3 + i % 60;
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let p = KeyframePolicy {
                gaussian_sigma: rng.random_range(0.3..4.0),
                threshold_alpha: rng.random_range(0.0..1.5),
                min_separation: 0,
            };
            assert_eq!(
                select_keyframes(&series(&v), &p).unwrap().flags(),
                brute_force(&v, &p).as_slice()
            );
        }
    }

    #[test]
    fn turn_and_smile_are_found() {
        let t_len = 40;
        let mut head = Matrix::zeros(t_len, 9);
        let mut expr = Matrix::zeros(t_len, 50);
        for t in 12..t_len {
            head[(t, 1)] = 0.6; // yaw turn at frame 12
        }
        for t in 27..t_len {
            for j in 0..5 {
                expr[(t, j)] = 1.0; // smile onset at frame 27
            }
        }
        let m = MotionSequence::new(25.0, head, expr).unwrap();
        let (kh, ke) = extract_targets(&m, &KeyframePolicy::default()).unwrap();
        assert_eq!(kh.indices(), vec![12]);
        assert_eq!(ke.indices(), vec![27]);
    }

    #[test]
    fn extract_targets_is_the_stage_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = KeyframePolicy::default();
        for _ in 0..50 {
            let m = random_motion(&mut rng, 30);
            let (kh, ke) = extract_targets(&m, &p).unwrap();
            let d = decompose_pose(&m);
            assert_eq!(kh, select_keyframes(&pose_variation(&d), &p).unwrap());
            assert_eq!(ke, select_keyframes(&expression_variation(&m), &p).unwrap());
        }
        let zero = MotionSequence::zeros(20, 25.0).unwrap();
        let (kh, ke) = extract_targets(&zero, &p).unwrap();
        assert_eq!(kh.count() + ke.count(), 0);
    }

    #[test]
    fn batch_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let seqs: Vec<_> = (0..16).map(|_| random_motion(&mut rng, 40)).collect();
        let p = KeyframePolicy::default();
        assert_eq!(
            extract_targets_batch(Execution::Sequential, &seqs, &p).unwrap(),
            extract_targets_batch(Execution::Parallel, &seqs, &p).unwrap()
        );
    }

    #[test]
    fn smoothing_preserves_mass_of_interior_content() {
        let mut v = vec![0.0; 40];
        for (i, x) in v.iter_mut().enumerate().take(30).skip(10) {
            *x = (i as f64 * 0.37).sin().abs();
        }
        let s = gaussian_smooth(&series(&v), 2.0).unwrap();
        assert!((s.values().iter().sum::<f64>() - v.iter().sum::<f64>()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn selection_invariants(
            v in proptest::collection::vec(0.0..10.0f64, 3..80),
            exp in -8i32..8,
            sigma in 0.2..3.0f64,
        ) {
            let p = KeyframePolicy { gaussian_sigma: sigma, ..Default::default() };
            let k = select_keyframes(&series(&v), &p).unwrap();
            let n = v.len();
            prop_assert_eq!(k.flags()[0], 0);
            prop_assert_eq!(k.flags()[n - 1], 0);
            prop_assert!(k.count() <= (n - 1) / 2);
            // Power-of-two scaling is exact in floating point.
            let c = 2f64.powi(exp);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(select_keyframes(&series(&scaled), &p).unwrap(), k);
        }

        #[test]
        fn variation_ignores_constant_offsets(
            seed in 0u64..1000,
            off in proptest::collection::vec(-3.0..3.0f64, 59),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_motion(&mut rng, 12);
            let shift = |mat: &Matrix, o: &[f64]| {
                Matrix::from_fn(mat.rows(), mat.cols(), |r, c| mat[(r, c)] + o[c])
            };
            // Offsets only on neck/camera and expression; rotation offsets are
            // not a group action on axis-angle vectors.
            let mut head_off = vec![0.0; 9];
            head_off[3..].copy_from_slice(&off[3..9]);
            let shifted = MotionSequence::new(
                25.0,
                shift(m.head_pose(), &head_off),
                shift(m.expression(), &off[9..]),
            ).unwrap();
            let a = pose_variation(&decompose_pose(&m));
            let b = pose_variation(&decompose_pose(&shifted));
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let a = expression_variation(&m);
            let b = expression_variation(&shifted);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
