use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use keymotion::config::{KeyframeSource, RunConfig};
use keymotion::frontend::frontend_features;
use keymotion::kernels::Checkpoint;
use keymotion::keypredictor::Decoding;
use keymotion::motion_io::{
    format_keyframe_csv, format_matrix_csv, format_motion_csv, read_matrix_csv,
    read_motion_csv, read_tokens, read_wav,
};
use keymotion::pipeline::{
    check_alignment, encode_speech, format_probability_csv, frames_for, keyframe_targets,
    predict_keyframes, prepare_clip, run_pipeline, sample_motion, score_motions, train_models,
    Models, RunDir, CHECKPOINT_FILE, EXPRESSION_KEYFRAMES_FILE, HEAD_KEYFRAMES_FILE,
};
use keymotion::prosody::{extract_prosody, format_prosody_csv};
use keymotion::svg::keyframe_plot;
use keymotion::Error;

/// Exit code for bad arguments or configuration.
const EXIT_USAGE: u8 = 1;
/// Exit code for unreadable, malformed or inconsistent data.
const EXIT_DATA: u8 = 2;
/// Exit code for training or evaluation that produced non-finite values.
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "keymotion", version, about = "Keyframe-aware speech-driven head and expression motion")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Added to every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stream {
    Head,
    Expression,
}

#[derive(Args, Debug)]
struct OutDir {
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ground-truth keyframes of a motion CSV.
    ExtractKeyframes {
        #[arg(long)]
        motion: PathBuf,
        #[command(flatten)]
        out: OutDir,
        /// Also write keyframes.svg with the variation curves.
        #[arg(long)]
        plot: bool,
    },
    /// Per-frame f0 and energy of a WAV file.
    Prosody {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Log-mel frontend features of a WAV file.
    Features {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Head-pose and expression speech streams on the motion frame grid.
    Encode {
        #[arg(long)]
        audio: PathBuf,
        /// Motion frames; defaults to the audio duration at --fps.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = keymotion::motion_io::DEFAULT_FPS)]
        fps: f64,
        #[command(flatten)]
        out: OutDir,
    },
    /// Keyframe probabilities from an encoded speech stream.
    PredictKeyframes {
        /// Speech stream CSV written by `encode`.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        stream: Stream,
        #[command(flatten)]
        out: OutDir,
    },
    /// Trains the keyframe predictors and the generator on one clip.
    Train {
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long)]
        motion: Option<PathBuf>,
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Samples motion for an audio clip from a trained checkpoint.
    Sample {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference motion; required when keyframes come from the reference.
        #[arg(long)]
        motion: Option<PathBuf>,
        #[arg(long, default_value_t = keymotion::motion_io::DEFAULT_FPS)]
        fps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diversity and Beat Align of generated and reference motion, as JSON.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        generated: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        reference: Vec<PathBuf>,
        /// One clip per generated sequence, in the same order.
        #[arg(long, num_args = 1.., required = true)]
        audio: Vec<PathBuf>,
    },
    /// Every stage on one clip, with a manifest of the run directory.
    Pipeline {
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long)]
        motion: Option<PathBuf>,
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn need(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf, Error> {
    p.clone()
        .ok_or_else(|| Error::Config(format!("{flag} is required (flag or [paths] in the config)")))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::ExtractKeyframes { motion, out, plot } => {
            cfg.validate()?;
            let m = read_motion_csv(&motion)?;
            let (head, expr) = keyframe_targets(&m, &cfg)?;
            let mut dir = RunDir::create(&out.out_dir)?;
            dir.write(HEAD_KEYFRAMES_FILE, &format_keyframe_csv(&head.keyframes))?;
            dir.write(EXPRESSION_KEYFRAMES_FILE, &format_keyframe_csv(&expr.keyframes))?;
            if plot {
                dir.write("keyframes.svg", &keyframe_plot(&head, &expr))?;
            }
        }
        Command::Prosody { audio, out } => {
            let p = extract_prosody(&read_wav(&audio)?, &cfg.prosody)?;
            write(&out, &format_prosody_csv(&p))?;
        }
        Command::Features { audio, out } => {
            let f = frontend_features(&read_wav(&audio)?, &cfg.frontend)?;
            write(&out, &format_matrix_csv("mel", &f))?;
        }
        Command::Encode {
            audio,
            frames,
            fps,
            out,
        } => {
            cfg.validate()?;
            let eff = cfg.seeded();
            let a = read_wav(&audio)?;
            let t = frames.unwrap_or_else(|| frames_for(&a, fps));
            let s = encode_speech(&a, &eff, t)?;
            let mut dir = RunDir::create(&out.out_dir)?;
            dir.write("speech_head.csv", &format_matrix_csv("f", &s.head))?;
            dir.write("speech_expression.csv", &format_matrix_csv("f", &s.expression))?;
        }
        Command::PredictKeyframes {
            features,
            tokens,
            checkpoint,
            stream,
            out,
        } => {
            cfg.validate()?;
            let eff = cfg.seeded();
            let models = Models::from_checkpoint(&eff, &Checkpoint::load(&checkpoint)?)?;
            let f = read_matrix_csv(&features)?;
            let text = read_tokens(&tokens, eff.keypredictor.vocab_size)?;
            let model = match stream {
                Stream::Head => &models.head_predictor,
                Stream::Expression => &models.expression_predictor,
            };
            let p = model.predict(&f, &text, Decoding::FreeRunning)?;
            let mut dir = RunDir::create(&out.out_dir)?;
            dir.write("probabilities.csv", &format_probability_csv(&p.probs))?;
            dir.write("keyframes.csv", &format_keyframe_csv(&p.flags))?;
        }
        Command::Train {
            audio,
            motion,
            tokens,
            out,
        } => {
            override_path(&mut cfg.paths.audio, &audio);
            override_path(&mut cfg.paths.motion, &motion);
            override_path(&mut cfg.paths.tokens, &tokens);
            cfg.validate()?;
            let eff = cfg.seeded();
            let clip = prepare_clip(
                read_wav(need(&cfg.paths.audio, "--audio")?)?,
                read_motion_csv(need(&cfg.paths.motion, "--motion")?)?,
                read_tokens(need(&cfg.paths.tokens, "--tokens")?, eff.keypredictor.vocab_size)?,
                &eff,
            )?;
            let (models, report) = train_models(std::slice::from_ref(&clip), &eff)?;
            let mut dir = RunDir::create(&out.out_dir)?;
            dir.write(CHECKPOINT_FILE, &models.checkpoint().to_json())?;
            dir.write("losses.csv", &report.to_csv())?;
            dir.write("config.toml", &cfg.to_toml())?;
            dir.finish(&cfg)?;
        }
        Command::Sample {
            audio,
            tokens,
            checkpoint,
            motion,
            fps,
            out,
        } => {
            cfg.validate()?;
            let eff = cfg.seeded();
            let a = read_wav(&audio)?;
            let reference = motion.as_ref().map(read_motion_csv).transpose()?;
            let (t, fps) = match &reference {
                Some(m) => {
                    check_alignment(&a, m)?;
                    (m.frames(), m.frame_rate())
                }
                None => (frames_for(&a, fps), fps),
            };
            let models = Models::from_checkpoint(&eff, &Checkpoint::load(&checkpoint)?)?;
            let text = read_tokens(&tokens, eff.keypredictor.vocab_size)?;
            let speech = encode_speech(&a, &eff, t)?;
            let keyframes = match (eff.mode.keyframes, &reference) {
                (KeyframeSource::Predicted, _) => predict_keyframes(&models, &speech, &text)?,
                (KeyframeSource::Reference, Some(m)) => {
                    let (h, e) = keyframe_targets(m, &eff)?;
                    (h.keyframes, e.keyframes)
                }
                (KeyframeSource::Reference, None) => {
                    return Err(Error::Config("reference keyframes need --motion".into()));
                }
            };
            let sampled = sample_motion(&models, &speech, &text, keyframes, fps, &eff)?;
            write(&out, &format_motion_csv(&sampled))?;
        }
        Command::Evaluate {
            generated,
            reference,
            audio,
        } => {
            let clips = audio.iter().map(read_wav).collect::<Result<Vec<_>, _>>()?;
            let gen = generated.iter().map(read_motion_csv).collect::<Result<Vec<_>, _>>()?;
            let mut report = serde_json::Map::new();
            report.insert("generated".into(), serde_json::to_value(score_motions(&gen, &clips, &cfg.beats)?).expect("scores serialize"));
            if !reference.is_empty() {
                let refs = reference.iter().map(read_motion_csv).collect::<Result<Vec<_>, _>>()?;
                report.insert("reference".into(), serde_json::to_value(score_motions(&refs, &clips, &cfg.beats)?).expect("scores serialize"));
            }
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Pipeline {
            audio,
            motion,
            tokens,
            run_dir,
        } => {
            override_path(&mut cfg.paths.audio, &audio);
            override_path(&mut cfg.paths.motion, &motion);
            override_path(&mut cfg.paths.tokens, &tokens);
            override_path(&mut cfg.paths.run_dir, &run_dir);
            let outcome = run_pipeline(&cfg)?;
            println!("{}", outcome.metrics.to_json().trim_end());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
