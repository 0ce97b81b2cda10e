//! Run configuration: every stage's settings in one strict TOML document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpse::DpseConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::kel::KeyframePolicy;
use crate::keypredictor::{KeyPredictorConfig, TrainConfig};
use crate::metrics::BeatConfig;
use crate::motion_io::SAMPLE_RATE;
use crate::motiongen::{GeneratorConfig, GeneratorTrainConfig};
use crate::prosody::ProsodyConfig;

/// Input and output locations. Empty paths are filled from the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub audio: Option<PathBuf>,
    pub motion: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

/// Which keyframes condition the generator at sampling time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeSource {
    /// Free-running output of the trained predictors.
    #[default]
    Predicted,
    /// Targets extracted from the reference motion.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeConfig {
    pub keyframes: KeyframeSource,
    /// Write SVG plots next to the keyframe CSVs.
    pub plots: bool,
}

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig {
            keyframes: KeyframeSource::Predicted,
            plots: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Added to every stage seed; 0 leaves the stage defaults untouched.
    pub seed: u64,
    /// Seed of the sampler's initial noise.
    pub sampling_seed: u64,
    pub frontend: FrontendConfig,
    pub prosody: ProsodyConfig,
    pub keyframes: KeyframePolicy,
    pub dpse: DpseConfig,
    pub keypredictor: KeyPredictorConfig,
    pub keypredictor_training: TrainConfig,
    pub generator: GeneratorConfig,
    pub generator_training: GeneratorTrainConfig,
    pub beats: BeatConfig,
    pub paths: PathsConfig,
    pub mode: ModeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks every stage and the widths that connect them.
    pub fn validate(&self) -> Result<()> {
        let sr = SAMPLE_RATE as f64;
        self.frontend.validate(sr)?;
        self.prosody.validate(sr)?;
        self.keyframes.validate()?;
        self.dpse.validate()?;
        self.keypredictor.validate()?;
        self.generator.validate()?;
        self.generator_training.weights.validate()?;
        self.keypredictor_training.optimizer.validate()?;
        self.generator_training.optimizer.validate()?;
        self.beats.validate()?;
        let links = [
            ("frontend.out_dim", self.frontend.out_dim, "dpse.input_dim", self.dpse.input_dim),
            ("dpse.dim", self.dpse.dim, "keypredictor.feature_dim", self.keypredictor.feature_dim),
            ("dpse.dim", self.dpse.dim, "generator.speech_dim", self.generator.speech_dim),
            (
                "keypredictor.vocab_size",
                self.keypredictor.vocab_size,
                "generator.vocab_size",
                self.generator.vocab_size,
            ),
            ("frontend.frame_len", self.frontend.frame_len, "prosody.frame_len", self.prosody.frame_len),
            ("frontend.hop", self.frontend.hop, "prosody.hop", self.prosody.hop),
        ];
        for (a, va, b, vb) in links {
            if va != vb {
                return Err(Error::config(format!("{a} = {va} must equal {b} = {vb}")));
            }
        }
        let feature_rate = sr / self.frontend.hop as f64;
        if (self.dpse.feature_rate - feature_rate).abs() > 1e-9 {
            return Err(Error::config(format!(
                "dpse.feature_rate = {} must equal sample rate / hop = {feature_rate}",
                self.dpse.feature_rate
            )));
        }
        Ok(())
    }

    /// The configuration with [`RunConfig::seed`] folded into every stage seed.
    pub fn seeded(&self) -> RunConfig {
        let mut c = self.clone();
        let s = self.seed;
        c.frontend.proj_seed = c.frontend.proj_seed.wrapping_add(s);
        c.dpse.seed = c.dpse.seed.wrapping_add(s);
        c.keypredictor.seed = c.keypredictor.seed.wrapping_add(s);
        c.keypredictor_training.seed = c.keypredictor_training.seed.wrapping_add(s);
        c.generator.seed = c.generator.seed.wrapping_add(s);
        c.generator_training.seed = c.generator_training.seed.wrapping_add(s);
        c.sampling_seed = c.sampling_seed.wrapping_add(s);
        c.seed = 0;
        c
    }
}
