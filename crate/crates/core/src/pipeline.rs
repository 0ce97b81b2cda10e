//! End-to-end orchestration: speech encoding, keyframe targets, training,
//! sampling and evaluation, with every artifact written to a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{KeyframeSource, RunConfig};
use crate::dpse::{speech_inputs, Dpse};
use crate::error::{Error, Result};
use crate::kel::{analyze, expression_variation, pose_variation, KeyframeAnalysis};
use crate::kernels::Checkpoint;
use crate::keypredictor::{
    class_weights, train_keypredictor, weighted_bce_value, Decoding, KeyPredictor, KeySample,
};
use crate::metrics::{audio_beats, beat_align, diversity, motion_beats, BeatConfig};
use crate::motion_io::{
    decompose_pose, format_keyframe_csv, format_matrix_csv, format_motion_csv, read_motion_csv,
    read_tokens, read_wav, AudioClip, KeyframeSeq, MotionSequence, TranscriptTokens,
};
use crate::motiongen::{
    train_generator, ConditionBundle, LossParts, MotionGenerator, Path as MotionPath, PathJob,
    PathSample,
};
use crate::prosody::{extract_prosody, format_prosody_csv, ProsodySeq};
use crate::svg;
use crate::tensor::Matrix;

/// Audio must cover the motion to within this many frames.
pub const ALIGNMENT_TOLERANCE_FRAMES: f64 = 1.0;

/// Errors when the audio length, in motion frames, is more than one frame
/// away from the motion length.
pub fn check_alignment(audio: &AudioClip, motion: &MotionSequence) -> Result<()> {
    let audio_frames = audio.duration_seconds() * motion.frame_rate();
    if (audio_frames - motion.frames() as f64).abs() > ALIGNMENT_TOLERANCE_FRAMES {
        return Err(Error::Alignment {
            audio_frames,
            motion_frames: motion.frames(),
        });
    }
    Ok(())
}

/// Motion frames spanned by `audio` at `fps`, at least 1.
pub fn frames_for(audio: &AudioClip, fps: f64) -> usize {
    ((audio.duration_seconds() * fps).round() as usize).max(1)
}

/// Prosody and the two speech streams of one clip on a `T`-frame grid.
#[derive(Clone, Debug)]
pub struct SpeechStreams {
    pub prosody: ProsodySeq,
    /// `T x D`
    pub head: Matrix,
    /// `T x D`
    pub expression: Matrix,
}

pub fn encode_speech(audio: &AudioClip, cfg: &RunConfig, frames: usize) -> Result<SpeechStreams> {
    let prosody = extract_prosody(audio, &cfg.prosody)?;
    let (features, normalized) = speech_inputs(audio, &cfg.frontend, &cfg.prosody)?;
    let (head, expression) = Dpse::new(cfg.dpse.clone())?.encode(&features, &normalized, frames)?;
    Ok(SpeechStreams {
        prosody,
        head,
        expression,
    })
}

/// Ground-truth keyframe analyses `(head, expression)` of a motion sequence.
pub fn keyframe_targets(m: &MotionSequence, cfg: &RunConfig) -> Result<(KeyframeAnalysis, KeyframeAnalysis)> {
    let head = analyze(&pose_variation(&decompose_pose(m)), &cfg.keyframes)?;
    let expression = analyze(&expression_variation(m), &cfg.keyframes)?;
    Ok((head, expression))
}

/// One aligned training clip with everything derived from it.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub audio: AudioClip,
    pub motion: MotionSequence,
    pub tokens: TranscriptTokens,
    pub speech: SpeechStreams,
    pub head_targets: KeyframeAnalysis,
    pub expression_targets: KeyframeAnalysis,
}

pub fn prepare_clip(
    audio: AudioClip,
    motion: MotionSequence,
    tokens: TranscriptTokens,
    cfg: &RunConfig,
) -> Result<PreparedClip> {
    check_alignment(&audio, &motion)?;
    let speech = encode_speech(&audio, cfg, motion.frames())?;
    let (head_targets, expression_targets) = keyframe_targets(&motion, cfg)?;
    Ok(PreparedClip {
        audio,
        motion,
        tokens,
        speech,
        head_targets,
        expression_targets,
    })
}

/// Keyframe predictors and the motion generator.
#[derive(Clone, Debug)]
pub struct Models {
    pub head_predictor: KeyPredictor,
    pub expression_predictor: KeyPredictor,
    pub generator: MotionGenerator,
}

const HEAD_PREDICTOR: &str = "head_predictor";
const EXPRESSION_PREDICTOR: &str = "expression_predictor";
const GENERATOR: &str = "generator";

impl Models {
    /// Freshly initialized models. The expression predictor's seed is the
    /// head predictor's plus one so the two start apart.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut expr_cfg = cfg.keypredictor.clone();
        expr_cfg.seed = expr_cfg.seed.wrapping_add(1);
        Ok(Models {
            head_predictor: KeyPredictor::new(cfg.keypredictor.clone())?,
            expression_predictor: KeyPredictor::new(expr_cfg)?,
            generator: MotionGenerator::new(cfg.generator.clone())?,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push_store(HEAD_PREDICTOR, &self.head_predictor.store);
        c.push_store(EXPRESSION_PREDICTOR, &self.expression_predictor.store);
        c.push_store(GENERATOR, &self.generator.store);
        c
    }

    pub fn from_checkpoint(cfg: &RunConfig, c: &Checkpoint) -> Result<Self> {
        let mut m = Models::new(cfg)?;
        c.load_into(HEAD_PREDICTOR, &mut m.head_predictor.store)?;
        c.load_into(EXPRESSION_PREDICTOR, &mut m.expression_predictor.store)?;
        c.load_into(GENERATOR, &mut m.generator.store)?;
        Ok(m)
    }
}

/// Loss curves of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub head_predictor: Vec<f64>,
    pub expression_predictor: Vec<f64>,
    /// Per step: head path, expression path.
    pub generator: Vec<[LossParts; 2]>,
    /// Teacher-forced weighted BCE of the trained predictors `(head, expression)`.
    pub keyframe_bce: (f64, f64),
}

impl TrainReport {
    /// Mean over both paths of the last generator step; zeros before any step.
    pub fn final_losses(&self) -> LossParts {
        let Some([h, e]) = self.generator.last() else {
            return LossParts::default();
        };
        LossParts {
            rec: 0.5 * (h.rec + e.rec),
            vel: 0.5 * (h.vel + e.vel),
            mr: 0.5 * (h.mr + e.mr),
            bce: 0.5 * (h.bce + e.bce),
            total: 0.5 * (h.total + e.total),
        }
    }

    /// `step,head_predictor,expression_predictor,<path>_<part>...`; missing
    /// entries are left empty.
    pub fn to_csv(&self) -> String {
        let parts = ["rec", "vel", "mr", "bce", "total"];
        let mut out = String::from("step,head_predictor,expression_predictor");
        for path in ["head", "expression"] {
            for p in parts {
                out.push_str(&format!(",{path}_{p}"));
            }
        }
        out.push('\n');
        let n = self
            .head_predictor
            .len()
            .max(self.expression_predictor.len())
            .max(self.generator.len());
        let cell = |v: Option<&f64>| v.map_or(String::new(), |x| x.to_string());
        for i in 0..n {
            out.push_str(&format!(
                "{i},{},{}",
                cell(self.head_predictor.get(i)),
                cell(self.expression_predictor.get(i))
            ));
            match self.generator.get(i) {
                Some(pair) => {
                    for l in pair {
                        out.push_str(&format!(",{},{},{},{},{}", l.rec, l.vel, l.mr, l.bce, l.total));
                    }
                }
                None => out.push_str(&",".repeat(2 * parts.len())),
            }
            out.push('\n');
        }
        out
    }
}

fn mean_keyframe_bce(model: &KeyPredictor, samples: &[KeySample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let p = model.predict(&s.features, &s.text, Decoding::TeacherForced(&s.targets))?;
        let (w0, w1) = class_weights(&s.targets);
        total += weighted_bce_value(&p.probs, &s.targets, w0, w1)?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains both keyframe predictors, then both generator paths jointly on
/// ground-truth keyframes.
pub fn train_models(clips: &[PreparedClip], cfg: &RunConfig) -> Result<(Models, TrainReport)> {
    if clips.is_empty() {
        return Err(Error::config("training needs at least one clip"));
    }
    let mut models = Models::new(cfg)?;
    let key_samples = |head: bool| -> Vec<KeySample> {
        clips
            .iter()
            .map(|c| KeySample {
                features: if head { c.speech.head.clone() } else { c.speech.expression.clone() },
                text: c.tokens.clone(),
                targets: if head {
                    c.head_targets.keyframes.clone()
                } else {
                    c.expression_targets.keyframes.clone()
                },
            })
            .collect()
    };
    let head_samples = key_samples(true);
    let expr_samples = key_samples(false);

    let mut expr_train = cfg.keypredictor_training.clone();
    expr_train.seed = expr_train.seed.wrapping_add(1);
    let head_curve = train_keypredictor(&mut models.head_predictor, &head_samples, &cfg.keypredictor_training)?;
    let expr_curve = train_keypredictor(&mut models.expression_predictor, &expr_samples, &expr_train)?;
    let keyframe_bce = (
        mean_keyframe_bce(&models.head_predictor, &head_samples)?,
        mean_keyframe_bce(&models.expression_predictor, &expr_samples)?,
    );

    let mut head_paths = Vec::with_capacity(clips.len());
    let mut expr_paths = Vec::with_capacity(clips.len());
    for c in clips {
        head_paths.push(PathSample {
            x0: c.motion.head_pose().clone(),
            cond: ConditionBundle::new(c.speech.head.clone(), c.head_targets.keyframes.clone(), c.tokens.clone())?,
        });
        expr_paths.push(PathSample {
            x0: c.motion.expression().clone(),
            cond: ConditionBundle::new(
                c.speech.expression.clone(),
                c.expression_targets.keyframes.clone(),
                c.tokens.clone(),
            )?,
        });
    }
    let jobs = [
        PathJob {
            path: MotionPath::Head,
            samples: &head_paths,
            bce: keyframe_bce.0,
        },
        PathJob {
            path: MotionPath::Expression,
            samples: &expr_paths,
            bce: keyframe_bce.1,
        },
    ];
    let curves = train_generator(&mut models.generator, &jobs, &cfg.generator_training)?;
    let generator = curves[0].iter().zip(&curves[1]).map(|(&h, &e)| [h, e]).collect();

    Ok((
        models,
        TrainReport {
            head_predictor: head_curve,
            expression_predictor: expr_curve,
            generator,
            keyframe_bce,
        },
    ))
}

/// Free-running keyframe predictions `(head, expression)`.
pub fn predict_keyframes(
    models: &Models,
    speech: &SpeechStreams,
    tokens: &TranscriptTokens,
) -> Result<(KeyframeSeq, KeyframeSeq)> {
    let h = models.head_predictor.predict(&speech.head, tokens, Decoding::FreeRunning)?;
    let e = models.expression_predictor.predict(&speech.expression, tokens, Decoding::FreeRunning)?;
    Ok((h.flags, e.flags))
}

/// `frame,probability`
pub fn format_probability_csv(probs: &[f64]) -> String {
    let mut out = String::from("frame,probability\n");
    for (i, p) in probs.iter().enumerate() {
        out.push_str(&format!("{i},{p}\n"));
    }
    out
}

/// Samples both paths and assembles a motion sequence at `fps`. The
/// expression path uses `sampling_seed + 1`.
pub fn sample_motion(
    models: &Models,
    speech: &SpeechStreams,
    tokens: &TranscriptTokens,
    keyframes: (KeyframeSeq, KeyframeSeq),
    fps: f64,
    cfg: &RunConfig,
) -> Result<MotionSequence> {
    let head_cond = ConditionBundle::new(speech.head.clone(), keyframes.0, tokens.clone())?;
    let expr_cond = ConditionBundle::new(speech.expression.clone(), keyframes.1, tokens.clone())?;
    let g = &models.generator;
    let head = g.sample_path(MotionPath::Head, &head_cond, cfg.sampling_seed)?;
    let expression = g.sample_path(MotionPath::Expression, &expr_cond, cfg.sampling_seed.wrapping_add(1))?;
    MotionSequence::new(fps, head, expression)
}

/// Diversity and mean Beat Align of a set of motions against their audio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionScores {
    pub diversity: f64,
    pub beat_align: f64,
}

pub fn score_motions(motions: &[MotionSequence], audio: &[AudioClip], beats: &BeatConfig) -> Result<MotionScores> {
    if motions.len() != audio.len() {
        return Err(Error::config(format!(
            "{} motion sequences but {} audio clips",
            motions.len(),
            audio.len()
        )));
    }
    let diversity = diversity(motions)?;
    let mut align = 0.0;
    for (m, a) in motions.iter().zip(audio) {
        let mb = motion_beats(m, beats)?;
        let ab = audio_beats(a, m.frame_rate(), beats)?;
        align += beat_align(&mb, &ab, beats.sigma)?;
    }
    Ok(MotionScores {
        diversity,
        beat_align: align / motions.len() as f64,
    })
}

/// Contents of `metrics.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub diversity: f64,
    pub beat_align: f64,
    pub losses: LossParts,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

/// `manifest.json`: the effective configuration and a hash of every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn entry(&self, file: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|e| e.file == file)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into a directory and records their hashes.
pub struct RunDir {
    root: PathBuf,
    files: Vec<ManifestEntry>,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir {
            root,
            files: Vec::new(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn write(&mut self, file: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(file);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        log::info!("wrote {}", path.display());
        self.files.retain(|e| e.file != file);
        self.files.push(ManifestEntry {
            file: file.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len(),
        });
        Ok(path)
    }

    /// Writes `manifest.json` listing everything written so far.
    pub fn finish(self, config: &RunConfig) -> Result<Manifest> {
        let manifest = Manifest {
            config: config.to_toml(),
            files: self.files,
        };
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialize") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub const METRICS_FILE: &str = "metrics.json";
pub const SAMPLED_MOTION_FILE: &str = "sampled_motion.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HEAD_KEYFRAMES_FILE: &str = "keyframes_head.csv";
pub const EXPRESSION_KEYFRAMES_FILE: &str = "keyframes_expression.csv";

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub run_dir: PathBuf,
    pub metrics: MetricsReport,
    pub manifest: Manifest,
    pub sampled: MotionSequence,
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::config(format!("no {what} path given")))
}

/// Runs every stage on the clip named in `cfg.paths` and fills the run
/// directory. `cfg` is recorded verbatim in the manifest; stage seeds are
/// derived from it with [`RunConfig::seeded`].
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let run_dir = required(&cfg.paths.run_dir, "run directory")?.to_path_buf();
    let audio = read_wav(required(&cfg.paths.audio, "audio")?)?;
    let motion = read_motion_csv(required(&cfg.paths.motion, "motion")?)?;
    let tokens = read_tokens(required(&cfg.paths.tokens, "tokens")?, cfg.keypredictor.vocab_size)?;
    let eff = cfg.seeded();
    let fps = motion.frame_rate();

    let mut out = RunDir::create(&run_dir)?;
    out.write("config.toml", &cfg.to_toml())?;

    let clip = prepare_clip(audio, motion, tokens, &eff)?;
    out.write("prosody.csv", &format_prosody_csv(&clip.speech.prosody))?;
    out.write("speech_head.csv", &format_matrix_csv("f", &clip.speech.head))?;
    out.write("speech_expression.csv", &format_matrix_csv("f", &clip.speech.expression))?;
    out.write(HEAD_KEYFRAMES_FILE, &format_keyframe_csv(&clip.head_targets.keyframes))?;
    out.write(EXPRESSION_KEYFRAMES_FILE, &format_keyframe_csv(&clip.expression_targets.keyframes))?;
    if eff.mode.plots {
        out.write("keyframes.svg", &svg::keyframe_plot(&clip.head_targets, &clip.expression_targets))?;
    }

    let clips = [clip];
    let (models, report) = train_models(&clips, &eff)?;
    let clip = &clips[0];
    out.write(CHECKPOINT_FILE, &models.checkpoint().to_json())?;
    out.write("losses.csv", &report.to_csv())?;
    if eff.mode.plots {
        let rec: Vec<f64> = report.generator.iter().map(|p| 0.5 * (p[0].rec + p[1].rec)).collect();
        out.write(
            "losses.svg",
            &svg::curve_plot(&[
                ("head keyframe predictor", &report.head_predictor),
                ("expression keyframe predictor", &report.expression_predictor),
                ("generator reconstruction", &rec),
            ]),
        )?;
    }

    let predicted = predict_keyframes(&models, &clip.speech, &clip.tokens)?;
    out.write("predicted_keyframes_head.csv", &format_keyframe_csv(&predicted.0))?;
    out.write("predicted_keyframes_expression.csv", &format_keyframe_csv(&predicted.1))?;
    let conditioning = match eff.mode.keyframes {
        KeyframeSource::Predicted => predicted,
        KeyframeSource::Reference => (
            clip.head_targets.keyframes.clone(),
            clip.expression_targets.keyframes.clone(),
        ),
    };
    let sampled = sample_motion(&models, &clip.speech, &clip.tokens, conditioning, fps, &eff)?;
    out.write(SAMPLED_MOTION_FILE, &format_motion_csv(&sampled))?;

    let scores = score_motions(std::slice::from_ref(&sampled), std::slice::from_ref(&clip.audio), &eff.beats)?;
    let metrics = MetricsReport {
        diversity: scores.diversity,
        beat_align: scores.beat_align,
        losses: report.final_losses(),
    };
    out.write(METRICS_FILE, &metrics.to_json())?;
    let manifest = out.finish(cfg)?;
    Ok(PipelineOutcome {
        run_dir,
        metrics,
        manifest,
        sampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion_io::SAMPLE_RATE;

    fn clip(seconds: f64) -> AudioClip {
        AudioClip::new(SAMPLE_RATE, vec![0.0; (seconds * SAMPLE_RATE as f64) as usize]).unwrap()
    }

    #[test]
    fn alignment_window() {
        let m = MotionSequence::zeros(12, 25.0).unwrap();
        check_alignment(&clip(0.5), &m).unwrap();
        check_alignment(&clip(0.52), &m).unwrap();
        let err = check_alignment(&clip(0.6), &m).unwrap_err();
        assert!(matches!(err, Error::Alignment { motion_frames: 12, .. }));
        let msg = err.to_string();
        assert!(msg.contains("15.00") && msg.contains("12"), "{msg}");
    }

    #[test]
    fn frames_for_rounds() {
        assert_eq!(frames_for(&clip(0.5), 25.0), 13);
        assert_eq!(frames_for(&clip(0.48), 25.0), 12);
        assert_eq!(frames_for(&clip(0.0), 25.0), 1);
    }

    #[test]
    fn final_losses_average_paths() {
        let a = LossParts {
            rec: 1.0,
            vel: 2.0,
            mr: 3.0,
            bce: 4.0,
            total: 5.0,
        };
        let b = LossParts {
            rec: 3.0,
            ..LossParts::default()
        };
        let r = TrainReport {
            generator: vec![[b, b], [a, b]],
            ..TrainReport::default()
        };
        let f = r.final_losses();
        assert_eq!((f.rec, f.vel, f.total), (2.0, 1.0, 2.5));
        assert_eq!(TrainReport::default().final_losses(), LossParts::default());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().all(|l| l.split(',').count() == 13));
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
