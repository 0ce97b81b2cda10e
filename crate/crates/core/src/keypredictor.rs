//! Autoregressive keyframe predictor.
//!
//! A pre-norm transformer decoder reads, at frame `t`, the projected speech
//! feature of `t`, a positional encoding and an embedding of the flag at
//! `t - 1` (a start symbol at `t = 0`). Self-attention is causal and each
//! layer cross-attends to the embedded transcript. A sigmoid head gives the
//! keyframe probability of every frame.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    positional_encoding, AdamW, AdamWConfig, Attention, Embedding, FeedForward, LayerNorm, Linear,
    Masking, ParamStore, Tape, Var,
};
use crate::motion_io::{KeyframeSeq, TranscriptTokens};
use crate::par;
use crate::tensor::Matrix;

pub const PROB_EPS: f64 = 1e-7;
const START_FLAG: usize = 2;
const WEIGHT_RANGE: (f64, f64) = (0.1, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyPredictorConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Width of the speech features the predictor reads.
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for KeyPredictorConfig {
    fn default() -> Self {
        KeyPredictorConfig {
            layers: 6,
            heads: 8,
            dim: 512,
            feature_dim: 512,
            vocab_size: 256,
            seed: 23,
        }
    }
}

impl KeyPredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.feature_dim == 0 || self.vocab_size == 0 {
            return Err(Error::config("predictor widths and vocabulary must be >= 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Inverse-frequency weights `(w0, w1)` clamped to `[0.1, 10]`.
pub fn class_weights(targets: &KeyframeSeq) -> (f64, f64) {
    let t = targets.len() as f64;
    let pos = targets.count();
    let neg = targets.len() - pos;
    let clamp = |w: f64| w.clamp(WEIGHT_RANGE.0, WEIGHT_RANGE.1);
    (
        clamp(t / (2.0 * neg.max(1) as f64)),
        clamp(t / (2.0 * pos.max(1) as f64)),
    )
}

fn check_lengths(n_probs: usize, targets: &KeyframeSeq) -> Result<()> {
    if n_probs != targets.len() {
        return Err(Error::dim(format!(
            "{} probabilities for {} keyframe targets",
            n_probs,
            targets.len()
        )));
    }
    Ok(())
}

/// `-sum_t (w1 k_t ln p_t + w0 (1 - k_t) ln(1 - p_t))` with `p` clamped to
/// `[1e-7, 1 - 1e-7]`. `probs` is `T x 1`.
pub fn weighted_bce(tape: &mut Tape, probs: Var, targets: &KeyframeSeq, w0: f64, w1: f64) -> Result<Var> {
    let (n, c) = tape.shape(probs);
    if c != 1 {
        return Err(Error::dim(format!("probabilities must be a column, got {n}x{c}")));
    }
    check_lengths(n, targets)?;
    let k = targets.as_f64();
    let pos = tape.constant(Matrix::column_vector(&k.iter().map(|&k| w1 * k).collect::<Vec<_>>()));
    let neg = tape.constant(Matrix::column_vector(&k.iter().map(|&k| w0 * (1.0 - k)).collect::<Vec<_>>()));
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.ln(p);
    let flipped = tape.scale(p, -1.0);
    let one_minus = tape.add_scalar(flipped, 1.0);
    let log_q = tape.ln(one_minus);
    let a = tape.mul(pos, log_p);
    let b = tape.mul(neg, log_q);
    let both = tape.add(a, b);
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0))
}

/// [`weighted_bce`] on plain values.
pub fn weighted_bce_value(probs: &[f64], targets: &KeyframeSeq, w0: f64, w1: f64) -> Result<f64> {
    let mut tape = Tape::detached();
    let p = tape.constant(Matrix::column_vector(probs));
    let l = weighted_bce(&mut tape, p, targets, w0, w1)?;
    Ok(tape.value(l).item())
}

/// `2 tp / (2 tp + fp + fn)`; 1 when neither sequence has a keyframe.
pub fn f1_score(predicted: &[u8], target: &[u8]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(target) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn threshold(probs: &[f64]) -> KeyframeSeq {
    KeyframeSeq::new(probs.iter().map(|&p| u8::from(p > 0.5)).collect()).expect("flags are binary")
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    cross_attn: Attention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

/// Layer layout; parameter values live in [`KeyPredictor::store`].
#[derive(Clone, Debug)]
pub struct KeyNet {
    pub config: KeyPredictorConfig,
    input: Linear,
    flags: Embedding,
    text: Embedding,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct KeyPredictor {
    pub net: KeyNet,
    pub store: ParamStore,
}

/// How previous flags are chosen when decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding<'a> {
    /// Ground-truth previous flags.
    TeacherForced(&'a KeyframeSeq),
    /// Each step feeds back its own prediction thresholded at 0.5.
    FreeRunning,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub flags: KeyframeSeq,
}

impl KeyPredictor {
    pub fn new(config: KeyPredictorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let input = Linear::new(&mut store, "input", config.feature_dim, d, &mut rng);
        let flags = Embedding::new(&mut store, "flags", 3, d, &mut rng);
        let text = Embedding::new(&mut store, "text", config.vocab_size, d, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("layer{i}");
            layers.push(DecoderLayer {
                self_norm: LayerNorm::new(&mut store, &format!("{p}.self_norm"), d),
                self_attn: Attention::new(&mut store, &format!("{p}.self_attn"), d, config.heads, &mut rng)?,
                cross_norm: LayerNorm::new(&mut store, &format!("{p}.cross_norm"), d),
                cross_attn: Attention::new(&mut store, &format!("{p}.cross_attn"), d, config.heads, &mut rng)?,
                ffn_norm: LayerNorm::new(&mut store, &format!("{p}.ffn_norm"), d),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, &mut rng),
            });
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", d);
        let head = Linear::new(&mut store, "head", d, 1, &mut rng);
        let net = KeyNet {
            config,
            input,
            flags,
            text,
            layers,
            final_norm,
            head,
        };
        Ok(KeyPredictor { net, store })
    }

    pub fn config(&self) -> &KeyPredictorConfig {
        &self.net.config
    }

    fn probs_for(&self, features: &Matrix, previous: &[usize], text: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let f = tape.constant(features.clone());
        let p = self.net.probabilities(&mut tape, f, previous, text)?;
        Ok(tape.value(p).as_slice().to_vec())
    }

    /// Per-frame probabilities and thresholded flags. Empty features give
    /// empty outputs.
    pub fn predict(&self, features: &Matrix, text: &TranscriptTokens, mode: Decoding) -> Result<Prediction> {
        self.net.check_inputs(features, text)?;
        let t_len = features.rows();
        if t_len == 0 {
            return Ok(Prediction {
                probs: Vec::new(),
                flags: KeyframeSeq::zeros(0),
            });
        }
        let probs = match mode {
            Decoding::TeacherForced(targets) => {
                check_lengths(t_len, targets)?;
                self.probs_for(features, &previous_flags(targets.flags()), text.tokens())?
            }
            Decoding::FreeRunning => {
                let mut flags: Vec<u8> = Vec::with_capacity(t_len);
                let mut probs = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let prefix = features.slice_rows(0, t + 1);
                    let prev: Vec<usize> = std::iter::once(START_FLAG)
                        .chain(flags.iter().map(|&f| f as usize))
                        .collect();
                    let p = self.probs_for(&prefix, &prev, text.tokens())?[t];
                    flags.push(u8::from(p > 0.5));
                    probs.push(p);
                }
                probs
            }
        };
        let flags = threshold(&probs);
        Ok(Prediction { probs, flags })
    }
}

impl KeyNet {
    fn check_inputs(&self, features: &Matrix, text: &TranscriptTokens) -> Result<()> {
        if features.cols() != self.config.feature_dim {
            return Err(Error::dim(format!(
                "predictor expects {}-wide features, got {}",
                self.config.feature_dim,
                features.cols()
            )));
        }
        if let Some(&bad) = text.tokens().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Range(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Keyframe probabilities `T x 1` given the previous flag of every frame.
    pub fn probabilities(
        &self,
        tape: &mut Tape,
        features: Var,
        previous: &[usize],
        text: &[usize],
    ) -> Result<Var> {
        let (t_len, _) = tape.shape(features);
        if previous.len() != t_len {
            return Err(Error::dim(format!(
                "{} previous flags for {t_len} frames",
                previous.len()
            )));
        }
        let d = self.config.dim;
        let x = self.input.forward(tape, features)?;
        let f = self.flags.forward(tape, previous)?;
        let x = tape.add(x, f);
        let pos = tape.constant(positional_encoding(t_len, d));
        let mut x = tape.add(x, pos);

        let memory = if text.is_empty() {
            None
        } else {
            let e = self.text.forward(tape, text)?;
            let p = tape.constant(positional_encoding(text.len(), d));
            Some(tape.add(e, p))
        };
        for layer in &self.layers {
            let h = layer.self_norm.forward(tape, x)?;
            let a = layer.self_attn.forward(tape, h, h, Masking::Causal)?;
            x = tape.add(x, a);
            if let Some(m) = memory {
                let h = layer.cross_norm.forward(tape, x)?;
                let a = layer.cross_attn.forward(tape, h, m, Masking::None)?;
                x = tape.add(x, a);
            }
            let h = layer.ffn_norm.forward(tape, x)?;
            let h = layer.ffn.inner(tape, h)?;
            x = tape.add(x, h);
        }
        let x = self.final_norm.forward(tape, x)?;
        let logits = self.head.forward(tape, x)?;
        let p = tape.sigmoid(logits);
        Ok(tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }

    /// Teacher-forced weighted BCE of one sample, with per-sample class weights.
    pub fn sample_loss(&self, tape: &mut Tape, sample: &KeySample) -> Result<Var> {
        self.check_inputs(&sample.features, &sample.text)?;
        check_lengths(sample.features.rows(), &sample.targets)?;
        let f = tape.constant(sample.features.clone());
        let p = self.probabilities(tape, f, &previous_flags(sample.targets.flags()), sample.text.tokens())?;
        let (w0, w1) = class_weights(&sample.targets);
        weighted_bce(tape, p, &sample.targets, w0, w1)
    }
}

/// Flag fed at each frame: start symbol, then the flag of the frame before.
fn previous_flags(flags: &[u8]) -> Vec<usize> {
    std::iter::once(START_FLAG)
        .chain(flags.iter().take(flags.len().saturating_sub(1)).map(|&f| f as usize))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeySample {
    /// `T x feature_dim`
    pub features: Matrix,
    pub text: TranscriptTokens,
    pub targets: KeyframeSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100_000,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Indices of one minibatch: everything when the batch covers the dataset,
/// otherwise a seeded draw without replacement in ascending order.
pub(crate) fn batch_indices(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    if batch_size >= n {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, batch_size).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Mean of per-sample gradients accumulated into `store`, computed on one tape
/// per sample and summed in sample order.
pub(crate) fn accumulate_mean_grads<S, F>(store: &mut ParamStore, samples: &[S], loss: F) -> Result<f64>
where
    S: Sync,
    F: Fn(&mut Tape, &S) -> Result<Var> + Sync,
{
    let shared: &ParamStore = store;
    let results = par::map(samples, |s| -> Result<(f64, Vec<Option<Matrix>>)> {
        let mut tape = Tape::new(shared);
        let l = loss(&mut tape, s)?;
        let value = tape.value(l).item();
        Ok((value, tape.backward(l).into_param_grads()))
    });
    store.zero_grad();
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for r in results {
        let (value, grads) = r?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value}")));
        }
        total += value;
        store.accumulate(&grads, scale);
    }
    Ok(total * scale)
}

/// Minimizes the mean teacher-forced weighted BCE. Returns the loss before
/// every update.
pub fn train_keypredictor(model: &mut KeyPredictor, data: &[KeySample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::config("keyframe predictor needs at least one training sample"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    cfg.optimizer.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&KeySample> = batch_indices(data.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let net = &model.net;
        let loss = accumulate_mean_grads(&mut model.store, &batch, |tape, s| net.sample_loss(tape, s));
        let loss = loss?;
        log::debug!("keyframe predictor step {step}: loss {loss:.6}");
        curve.push(loss);
        opt.step(&mut model.store);
    }
    Ok(curve)
}

/// Micro-averaged F1 over a set of predictions.
pub fn f1_over(pairs: &[(KeyframeSeq, KeyframeSeq)]) -> f64 {
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for (p, t) in pairs {
        pred.extend_from_slice(p.flags());
        target.extend_from_slice(t.flags());
    }
    f1_score(&pred, &target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::grad_check;

    fn small() -> KeyPredictorConfig {
        KeyPredictorConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            feature_dim: 5,
            vocab_size: 11,
            seed: 3,
        }
    }

    #[test]
    fn class_weight_cases() {
        assert_eq!(class_weights(&KeyframeSeq::new(vec![1, 0, 1, 0]).unwrap()), (1.0, 1.0));
        let k = KeyframeSeq::from_indices(100, &(0..10).map(|i| i * 10).collect::<Vec<_>>());
        let (w0, w1) = class_weights(&k);
        assert_eq!(w1, 5.0);
        assert!((w0 - 100.0 / 180.0).abs() < 1e-12);
        assert_eq!(class_weights(&KeyframeSeq::zeros(100)), (0.5, 10.0));
    }

    #[test]
    fn bce_cases() {
        let k = KeyframeSeq::new(vec![1]).unwrap();
        assert!((weighted_bce_value(&[0.5], &k, 1.0, 2.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);

        let k = KeyframeSeq::new(vec![1, 0, 0, 1]).unwrap();
        let perfect = weighted_bce_value(&[1.0, 0.0, 0.0, 1.0], &k, 0.7, 3.0).unwrap();
        assert!(perfect <= 4.0 * 3.0 * 1.2e-7);

        let p: [f64; 4] = [0.2, 0.9, 0.4, 0.6];
        let standard: f64 = -p
            .iter()
            .zip(k.as_f64())
            .map(|(&p, k)| k * p.ln() + (1.0 - k) * (1.0 - p).ln())
            .sum::<f64>();
        assert!((weighted_bce_value(&p, &k, 1.0, 1.0).unwrap() - standard).abs() < 1e-12);
        let base = weighted_bce_value(&p, &k, 0.3, 1.7).unwrap();
        assert!((weighted_bce_value(&p, &k, 0.9, 5.1).unwrap() - 3.0 * base).abs() < 1e-12);
        assert!(matches!(weighted_bce_value(&p[..3], &k, 1.0, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn bce_gradient_wrt_logits() {
        let mut store = ParamStore::new();
        let logits = store.add("logits", Matrix::column_vector(&[-1.3, 0.2, 2.1, -0.4, 0.9]));
        let k = KeyframeSeq::new(vec![0, 1, 1, 0, 0]).unwrap();
        let err = grad_check(
            &store,
            |t| {
                let z = t.param(logits);
                let p = t.sigmoid(z);
                weighted_bce(t, p, &k, 0.6, 2.5)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_score(&[1, 0, 1], &[1, 0, 1]), 1.0);
        assert_eq!(f1_score(&[0, 0], &[0, 0]), 1.0);
        assert_eq!(f1_score(&[1, 1, 0, 0], &[1, 0, 1, 0]), 0.5);
        assert_eq!(f1_score(&[0, 0], &[1, 1]), 0.0);
    }

    fn random_sample(t: usize, cfg: &KeyPredictorConfig, rng: &mut ChaCha8Rng) -> KeySample {
        let flags: Vec<u8> = (0..t).map(|_| u8::from(rng.random_bool(0.25))).collect();
        KeySample {
            features: Matrix::random_normal(t, cfg.feature_dim, 1.0, rng),
            text: TranscriptTokens::new((0..4).map(|_| rng.random_range(0..cfg.vocab_size)).collect(), cfg.vocab_size).unwrap(),
            targets: KeyframeSeq::new(flags).unwrap(),
        }
    }

    #[test]
    fn predictions_are_causal() {
        let cfg = small();
        let m = KeyPredictor::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sample(10, &cfg, &mut rng);
        let base = m.predict(&s.features, &s.text, Decoding::FreeRunning).unwrap();
        let tf = m.predict(&s.features, &s.text, Decoding::TeacherForced(&s.targets)).unwrap();
        for t in [3, 6, 9] {
            let mut changed = s.features.clone();
            for r in t..10 {
                changed.row_mut(r).fill(5.0);
            }
            let p = m.predict(&changed, &s.text, Decoding::FreeRunning).unwrap();
            assert_eq!(p.probs[..t], base.probs[..t]);
            let q = m.predict(&changed, &s.text, Decoding::TeacherForced(&s.targets)).unwrap();
            assert_eq!(q.probs[..t], tf.probs[..t]);
        }
        assert!(base.probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn free_running_equals_teacher_forcing_on_its_own_flags() {
        let cfg = small();
        let m = KeyPredictor::new(cfg.clone()).unwrap();
        let s = random_sample(8, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let free = m.predict(&s.features, &s.text, Decoding::FreeRunning).unwrap();
        let forced = m.predict(&s.features, &s.text, Decoding::TeacherForced(&free.flags)).unwrap();
        for (a, b) in free.probs.iter().zip(&forced.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_transcript_and_empty_features() {
        let cfg = small();
        let m = KeyPredictor::new(cfg.clone()).unwrap();
        let f = Matrix::random_normal(6, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let p = m.predict(&f, &TranscriptTokens::empty(11), Decoding::FreeRunning).unwrap();
        assert_eq!(p.probs.len(), 6);
        let e = m.predict(&Matrix::zeros(0, 5), &TranscriptTokens::empty(11), Decoding::FreeRunning).unwrap();
        assert!(e.probs.is_empty() && e.flags.is_empty());
    }

    #[test]
    fn sample_loss_passes_grad_check() {
        let cfg = KeyPredictorConfig {
            layers: 1,
            dim: 4,
            feature_dim: 3,
            vocab_size: 5,
            ..small()
        };
        let m = KeyPredictor::new(cfg.clone()).unwrap();
        let s = random_sample(5, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let err = grad_check(&m.store, |t| m.net.sample_loss(t, &s), 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<KeySample> = (0..3).map(|_| random_sample(12, &cfg, &mut rng)).collect();
        let tc = TrainConfig {
            steps: 60,
            batch_size: 2,
            optimizer: AdamWConfig {
                learning_rate: 3e-3,
                warmup_steps: 5,
                ..Default::default()
            },
            seed: 9,
        };
        let mut a = KeyPredictor::new(cfg.clone()).unwrap();
        let ca = train_keypredictor(&mut a, &data, &tc).unwrap();
        let mut b = KeyPredictor::new(cfg).unwrap();
        let cb = train_keypredictor(&mut b, &data, &tc).unwrap();
        assert_eq!(ca, cb);
        assert!(ca.iter().all(|l| l.is_finite()));
        assert!(ca.last().unwrap() < &ca[0]);
        assert!(matches!(train_keypredictor(&mut a, &[], &tc), Err(Error::Config(_))));
    }
}
