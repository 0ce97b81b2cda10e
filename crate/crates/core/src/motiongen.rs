//! Dual-path diffusion generator for head-pose and expression coefficients.
//!
//! Each path has its own denoiser that predicts the clean sequence `x0` from
//! a noised `x_t`, the diffusion step and a condition bundle (speech features,
//! keyframe flags, transcript). The transcript embedding table is shared by
//! both paths. Sampling runs a deterministic x0-feedback loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::hann;
use crate::keypredictor::batch_indices;
use crate::kernels::{
    positional_encoding, sinusoidal, AdamW, AdamWConfig, Attention, Embedding, FeedForward,
    LayerNorm, Linear, Masking, ParamStore, Tape, Var,
};
use crate::motion_io::{KeyframeSeq, TranscriptTokens, EXPRESSION_DIM, HEAD_POSE_DIM};
use crate::par;
use crate::tensor::Matrix;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Head,
    Expression,
}

impl Path {
    pub fn channels(self) -> usize {
        match self {
            Path::Head => HEAD_POSE_DIM,
            Path::Expression => EXPRESSION_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Path::Head => "head",
            Path::Expression => "expression",
        }
    }
}

/// Cumulative signal levels `alpha_bar[t]` for `t = 0..steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset 0.008 and per-step noise clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("diffusion needs at least one step"));
        }
        let f = |t: f64| {
            let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alphas_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for i in 0..steps {
            let beta = (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(MAX_BETA);
            prod *= 1.0 - beta;
            alphas_bar.push(prod);
        }
        Ok(NoiseSchedule { alphas_bar })
    }

    pub fn from_alphas_bar(alphas_bar: Vec<f64>) -> Result<Self> {
        let ok = !alphas_bar.is_empty()
            && alphas_bar.iter().all(|&a| a > 0.0 && a <= 1.0)
            && alphas_bar.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::config("alpha_bar must be strictly decreasing in (0, 1]"));
        }
        Ok(NoiseSchedule { alphas_bar })
    }

    pub fn steps(&self) -> usize {
        self.alphas_bar.len()
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar.get(t).copied().ok_or_else(|| {
            Error::Range(format!("diffusion step {t} outside 0..{}", self.alphas_bar.len()))
        })
    }

    /// `alpha_bar` of the step before `t`; 1 before the first step.
    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }
}

/// `sqrt(a) x0 + sqrt(1 - a) noise` with `a = alpha_bar[t]`.
pub fn q_sample(x0: &Matrix, t: usize, noise: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    let a = sched.alpha_bar(t)?;
    if x0.shape() != noise.shape() {
        return Err(Error::dim(format!(
            "noise {:?} does not match signal {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.zip_map(noise, |x, n| sa * x + sn * n))
}

/// One sampler update from step `t` to `t - 1` given the clean estimate.
pub fn ddim_step(x_t: &Matrix, x0_hat: &Matrix, t: usize, sched: &NoiseSchedule) -> Result<Matrix> {
    let a = sched.alpha_bar(t)?;
    let a_prev = sched.alpha_bar_prev(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let (spa, spn) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    Ok(x_t.zip_map(x0_hat, |x, x0| {
        let eps = (x - sa * x0) / sn;
        spa * x0 + spn * eps
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mr: f64,
    pub lambda_bce: f64,
    pub lambda_diff: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mr: 0.3,
            lambda_bce: 0.5,
            lambda_diff: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_mr, self.lambda_bce, self.lambda_diff, self.lambda1, self.lambda2];
        if all.iter().all(|&w| w >= 0.0) {
            Ok(())
        } else {
            Err(Error::config(format!("loss weights must be >= 0, got {self:?}")))
        }
    }

    /// `l_mr mr + l_bce bce + l_diff (l1 rec + l2 vel)`
    pub fn combine(&self, rec: f64, vel: f64, mr: f64, bce: f64) -> f64 {
        self.lambda_mr * mr + self.lambda_bce * bce + self.lambda_diff * (self.lambda1 * rec + self.lambda2 * vel)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub vel: f64,
    pub mr: f64,
    pub bce: f64,
    pub total: f64,
}

fn check_same(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ in shape",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean squared error over frames and channels.
pub fn loss_rec(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same(tape, pred, target)?;
    let d = tape.sub(pred, target);
    let s = tape.square(d);
    Ok(tape.mean(s))
}

/// Mean squared error of first differences; 0 for fewer than two frames.
pub fn loss_vel(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same(tape, pred, target)?;
    let t_len = tape.shape(pred).0;
    if t_len < 2 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    // Difference operator as a (T-1) x T matrix.
    let diff = tape.constant(Matrix::from_fn(t_len - 1, t_len, |i, j| {
        if j == i + 1 {
            1.0
        } else if j == i {
            -1.0
        } else {
            0.0
        }
    }));
    let e = tape.sub(pred, target);
    let de = tape.matmul(diff, e);
    let s = tape.square(de);
    Ok(tape.mean(s))
}

/// Default `(window, hop)` pairs in frames.
pub fn default_resolutions() -> Vec<(usize, usize)> {
    vec![(8, 2), (16, 4), (32, 8)]
}

/// One-sided DFT basis: `(cos, sin)`, each `window x (window/2 + 1)`.
fn dft_basis(window: usize) -> (Matrix, Matrix) {
    let bins = window / 2 + 1;
    let angle = |j: usize, k: usize| 2.0 * std::f64::consts::PI * ((j * k) % window) as f64 / window as f64;
    (
        Matrix::from_fn(window, bins, |j, k| angle(j, k).cos()),
        Matrix::from_fn(window, bins, |j, k| angle(j, k).sin()),
    )
}

/// STFT magnitudes of every channel of `x` (`T x C`): periodic Hann window,
/// reflect padding of `window/2`, output row `c * n_frames + f`, one column
/// per frequency bin.
pub fn stft_mag(tape: &mut Tape, x: Var, window: usize, hop: usize) -> Var {
    let w = hann(window);
    let frames = tape.frames(x, &w, hop);
    let (cos, sin) = dft_basis(window);
    let (cv, sv) = (tape.constant(cos), tape.constant(sin));
    let re = tape.matmul(frames, cv);
    let im = tape.matmul(frames, sv);
    tape.hypot(re, im)
}

/// [`stft_mag`] of a single series.
pub fn stft_magnitude(x: &[f64], window: usize, hop: usize) -> Matrix {
    let mut tape = Tape::detached();
    let v = tape.constant(Matrix::column_vector(x));
    let m = stft_mag(&mut tape, v, window, hop);
    tape.value(m).clone()
}

pub struct MrStft {
    pub loss: Var,
    /// Every resolution was longer than the sequence, so the loss is 0.
    pub all_skipped: bool,
}

/// Sum over resolutions of the mean absolute magnitude difference over
/// channels, frames and bins. Resolutions with `window > T` are skipped.
pub fn loss_mr_stft(tape: &mut Tape, pred: Var, target: Var, resolutions: &[(usize, usize)]) -> Result<MrStft> {
    check_same(tape, pred, target)?;
    let t_len = tape.shape(pred).0;
    let mut terms = Vec::new();
    for &(window, hop) in resolutions {
        if window == 0 || hop == 0 {
            return Err(Error::config(format!("invalid STFT resolution ({window}, {hop})")));
        }
        if window > t_len {
            continue;
        }
        let a = stft_mag(tape, pred, window, hop);
        let b = stft_mag(tape, target, window, hop);
        let d = tape.sub(a, b);
        let d = tape.abs(d);
        terms.push(tape.mean(d));
    }
    let all_skipped = terms.is_empty();
    if all_skipped {
        log::warn!("sequence of {t_len} frames is shorter than every STFT window; spectral loss is 0");
        return Ok(MrStft {
            loss: tape.constant(Matrix::scalar(0.0)),
            all_skipped,
        });
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    Ok(MrStft { loss, all_skipped })
}

/// Weighted sum of the reconstruction, velocity and spectral losses plus the
/// keyframe BCE, which enters as a constant. Returns the total and its parts.
pub fn total_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    bce: f64,
    weights: &LossWeights,
    resolutions: &[(usize, usize)],
) -> Result<(Var, LossParts)> {
    let rec = loss_rec(tape, pred, target)?;
    let vel = loss_vel(tape, pred, target)?;
    let mr = loss_mr_stft(tape, pred, target, resolutions)?.loss;
    let a = tape.scale(mr, weights.lambda_mr);
    let a = tape.add_scalar(a, weights.lambda_bce * bce);
    let r = tape.scale(rec, weights.lambda1);
    let v = tape.scale(vel, weights.lambda2);
    let diff = tape.add(r, v);
    let diff = tape.scale(diff, weights.lambda_diff);
    let total = tape.add(a, diff);
    let parts = LossParts {
        rec: tape.value(rec).item(),
        vel: tape.value(vel).item(),
        mr: tape.value(mr).item(),
        bce,
        total: tape.value(total).item(),
    };
    Ok((total, parts))
}

/// Conditions for one path of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// `T x speech_dim`
    pub speech: Matrix,
    pub keyframes: KeyframeSeq,
    pub text: TranscriptTokens,
}

impl ConditionBundle {
    pub fn new(speech: Matrix, keyframes: KeyframeSeq, text: TranscriptTokens) -> Result<Self> {
        if speech.rows() != keyframes.len() {
            return Err(Error::dim(format!(
                "{} speech frames but {} keyframe flags",
                speech.rows(),
                keyframes.len()
            )));
        }
        Ok(ConditionBundle { speech, keyframes, text })
    }

    pub fn frames(&self) -> usize {
        self.speech.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub speech_dim: usize,
    pub vocab_size: usize,
    pub diffusion_steps: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            dim: 512,
            layers: 2,
            heads: 8,
            speech_dim: 512,
            vocab_size: 256,
            diffusion_steps: 50,
            seed: 29,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.speech_dim == 0 || self.vocab_size == 0 || self.diffusion_steps == 0 {
            return Err(Error::config("generator sizes must be >= 1"));
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

#[derive(Clone, Debug)]
struct DenoiserLayer {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    cross_attn: Attention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    channels: usize,
    input: Linear,
    step: Linear,
    condition: Linear,
    flags: Embedding,
    layers: Vec<DenoiserLayer>,
    final_norm: LayerNorm,
    output: Linear,
}

impl Denoiser {
    fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.dim;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("{name}.layer{i}");
            layers.push(DenoiserLayer {
                self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d),
                self_attn: Attention::new(store, &format!("{p}.self_attn"), d, cfg.heads, rng)?,
                cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d),
                cross_attn: Attention::new(store, &format!("{p}.cross_attn"), d, cfg.heads, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, rng),
            });
        }
        Ok(Denoiser {
            channels,
            input: Linear::new(store, &format!("{name}.input"), channels, d, rng),
            step: Linear::new(store, &format!("{name}.step"), d, d, rng),
            condition: Linear::new(store, &format!("{name}.condition"), cfg.speech_dim, d, rng),
            flags: Embedding::new(store, &format!("{name}.flags"), 2, d, rng),
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
            output: Linear::new(store, &format!("{name}.output"), d, channels, rng),
        })
    }
}

/// Layer layout of both paths; parameter values live in
/// [`MotionGenerator::store`].
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    text: Embedding,
    head: Denoiser,
    expression: Denoiser,
}

#[derive(Clone, Debug)]
pub struct MotionGenerator {
    pub net: GeneratorNet,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
}

impl MotionGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let text = Embedding::new(&mut store, "text", config.vocab_size, config.dim, &mut rng);
        let head = Denoiser::new(&mut store, "head", HEAD_POSE_DIM, &config, &mut rng)?;
        let expression = Denoiser::new(&mut store, "expression", EXPRESSION_DIM, &config, &mut rng)?;
        let schedule = NoiseSchedule::cosine(config.diffusion_steps)?;
        Ok(MotionGenerator {
            net: GeneratorNet {
                config,
                text,
                head,
                expression,
            },
            store,
            schedule,
        })
    }

    /// Clean-sequence estimate for `x_t` at `step`.
    pub fn predict_x0(&self, path: Path, x_t: &Matrix, step: usize, cond: &ConditionBundle) -> Result<Matrix> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(x_t.clone());
        let y = self.net.denoise(&mut tape, path, x, step, cond)?;
        Ok(tape.value(y).clone())
    }

    /// Runs the sampler from seeded unit noise down to step 0.
    pub fn sample_path(&self, path: Path, cond: &ConditionBundle, seed: u64) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Matrix::random_normal(cond.frames(), path.channels(), 1.0, &mut rng);
        for t in (0..self.schedule.steps()).rev() {
            let x0 = self.predict_x0(path, &x, t, cond)?;
            x = ddim_step(&x, &x0, t, &self.schedule)?;
        }
        Ok(x)
    }
}

impl GeneratorNet {
    fn denoiser(&self, path: Path) -> &Denoiser {
        match path {
            Path::Head => &self.head,
            Path::Expression => &self.expression,
        }
    }

    /// `x0` estimate (`T x C`) for `x_t` (`T x C`).
    pub fn denoise(&self, tape: &mut Tape, path: Path, x_t: Var, step: usize, cond: &ConditionBundle) -> Result<Var> {
        let net = self.denoiser(path);
        let d = self.config.dim;
        let (t_len, c) = tape.shape(x_t);
        if c != net.channels {
            return Err(Error::dim(format!(
                "{} path expects {} channels, got {c}",
                path.name(),
                net.channels
            )));
        }
        if cond.frames() != t_len || cond.keyframes.len() != t_len {
            return Err(Error::dim(format!(
                "conditions cover {} frames but the sequence has {t_len}",
                cond.frames()
            )));
        }
        if cond.speech.cols() != self.config.speech_dim {
            return Err(Error::dim(format!(
                "speech features are {} wide, generator expects {}",
                cond.speech.cols(),
                self.config.speech_dim
            )));
        }
        let pos = tape.constant(positional_encoding(t_len, d));

        let h = net.input.forward(tape, x_t)?;
        let step_code = tape.constant(Matrix::row_vector(&sinusoidal(step as f64, d)));
        let step_emb = net.step.forward(tape, step_code)?;
        let h = tape.add_row(h, step_emb);
        let mut h = tape.add(h, pos);

        let speech = tape.constant(cond.speech.clone());
        let tokens = net.condition.forward(tape, speech)?;
        let flag_ids: Vec<usize> = cond.keyframes.flags().iter().map(|&f| f as usize).collect();
        let flags = net.flags.forward(tape, &flag_ids)?;
        let tokens = tape.add(tokens, flags);
        let mut memory = tape.add(tokens, pos);
        if !cond.text.is_empty() {
            let e = self.text.forward(tape, cond.text.tokens())?;
            let p = tape.constant(positional_encoding(cond.text.len(), d));
            let e = tape.add(e, p);
            memory = tape.concat_rows(&[memory, e]);
        }

        for layer in &net.layers {
            let n = layer.self_norm.forward(tape, h)?;
            let a = layer.self_attn.forward(tape, n, n, Masking::None)?;
            h = tape.add(h, a);
            let n = layer.cross_norm.forward(tape, h)?;
            let a = layer.cross_attn.forward(tape, n, memory, Masking::None)?;
            h = tape.add(h, a);
            let n = layer.ffn_norm.forward(tape, h)?;
            let f = layer.ffn.inner(tape, n)?;
            h = tape.add(h, f);
        }
        let h = net.final_norm.forward(tape, h)?;
        net.output.forward(tape, h)
    }
}

/// Target sequence and conditions for one path of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    /// `T x C`
    pub x0: Matrix,
    pub cond: ConditionBundle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub resolutions: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            steps: 100_000,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            resolutions: default_resolutions(),
            seed: 0,
        }
    }
}

/// One path's training data and the constant keyframe BCE reported with it.
pub struct PathJob<'a> {
    pub path: Path,
    pub samples: &'a [PathSample],
    pub bce: f64,
}

struct WorkItem<'a> {
    path: Path,
    sample: &'a PathSample,
    step: usize,
    noise: Matrix,
    bce: f64,
}

/// Trains the given paths together: every optimizer step draws one minibatch
/// of clip indices, a diffusion step and noise per (clip, path), and
/// descends the sum of the paths' mean total losses. All jobs must hold the
/// same number of clips. Returns the mean loss parts per path per step.
pub fn train_generator(gen: &mut MotionGenerator, jobs: &[PathJob], cfg: &GeneratorTrainConfig) -> Result<Vec<Vec<LossParts>>> {
    let n = jobs.first().map_or(0, |j| j.samples.len());
    if n == 0 {
        return Err(Error::config("generator needs at least one training clip"));
    }
    if jobs.iter().any(|j| j.samples.len() != n) {
        return Err(Error::config("every path needs the same number of clips"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    cfg.optimizer.validate()?;
    cfg.weights.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer.clone(), &gen.store);
    let mut curves: Vec<Vec<LossParts>> = vec![Vec::with_capacity(cfg.steps); jobs.len()];
    let n_steps = gen.schedule.steps();

    for step in 0..cfg.steps {
        let batch = batch_indices(n, cfg.batch_size, &mut rng);
        let mut items = Vec::with_capacity(batch.len() * jobs.len());
        for job in jobs {
            for &i in &batch {
                let sample = &job.samples[i];
                let t = rng.random_range(0..n_steps);
                let noise = Matrix::random_normal(sample.x0.rows(), sample.x0.cols(), 1.0, &mut rng);
                items.push(WorkItem {
                    path: job.path,
                    sample,
                    step: t,
                    noise,
                    bce: job.bce,
                });
            }
        }
        let net = &gen.net;
        let store = &gen.store;
        let sched = &gen.schedule;
        let results = par::map(&items, |w| -> Result<(LossParts, Vec<Option<Matrix>>)> {
            let x_t = q_sample(&w.sample.x0, w.step, &w.noise, sched)?;
            let mut tape = Tape::new(store);
            let xv = tape.constant(x_t);
            let pred = net.denoise(&mut tape, w.path, xv, w.step, &w.sample.cond)?;
            let target = tape.constant(w.sample.x0.clone());
            let (total, parts) = total_loss(&mut tape, pred, target, w.bce, &cfg.weights, &cfg.resolutions)?;
            Ok((parts, tape.backward(total).into_param_grads()))
        });
        gen.store.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut sums = vec![LossParts::default(); jobs.len()];
        for (k, r) in results.into_iter().enumerate() {
            let (parts, grads) = r?;
            if !parts.total.is_finite() {
                return Err(Error::Numeric(format!("generator loss became {} at step {step}", parts.total)));
            }
            let s = &mut sums[k / batch.len()];
            s.rec += parts.rec * scale;
            s.vel += parts.vel * scale;
            s.mr += parts.mr * scale;
            s.bce += parts.bce * scale;
            s.total += parts.total * scale;
            gen.store.accumulate(&grads, scale);
        }
        log::debug!("generator step {step}: {sums:?}");
        for (curve, s) in curves.iter_mut().zip(sums) {
            curve.push(s);
        }
        opt.step(&mut gen.store);
    }
    Ok(curves)
}

/// Trains a single path; see [`train_generator`].
pub fn train_path(
    gen: &mut MotionGenerator,
    path: Path,
    samples: &[PathSample],
    bce: f64,
    cfg: &GeneratorTrainConfig,
) -> Result<Vec<LossParts>> {
    let mut curves = train_generator(gen, &[PathJob { path, samples, bce }], cfg)?;
    Ok(curves.remove(0))
}
