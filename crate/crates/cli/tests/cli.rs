use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use keymotion::config::RunConfig;
use keymotion::kel::{extract_targets, KeyframePolicy};
use keymotion::motion_io::{
    format_keyframe_csv, read_keyframe_csv, read_matrix_csv, read_motion_csv, write_motion_csv,
    write_tokens, write_wav, AudioClip, MotionSequence, TranscriptTokens, SAMPLE_RATE,
};
use keymotion::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn keymotion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keymotion"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Inputs {
    audio: PathBuf,
    motion: PathBuf,
    tokens: PathBuf,
}

fn write_inputs(dir: &Path) -> Inputs {
    let n = SAMPLE_RATE as usize / 2;
    let samples = (0..n)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 180.0 * i as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    let audio = dir.join("clip.wav");
    write_wav(&audio, &AudioClip::new(SAMPLE_RATE, samples).unwrap()).unwrap();
    let motion = dir.join("motion.csv");
    let head = Matrix::from_fn(12, 9, |t, c| 0.1 * ((t as f64) * 0.9 + c as f64).sin());
    let expr = Matrix::from_fn(12, 50, |t, c| 0.05 * ((t as f64) * 0.4 + c as f64).cos());
    write_motion_csv(&motion, &MotionSequence::new(25.0, head, expr).unwrap()).unwrap();
    let tokens = dir.join("tokens.txt");
    write_tokens(&tokens, &TranscriptTokens::new(vec![2, 7, 1], 16).unwrap()).unwrap();
    Inputs { audio, motion, tokens }
}

#[test]
fn extract_keyframes_zero_motion() {
    let dir = tempfile::tempdir().unwrap();
    let motion = dir.path().join("zeros.csv");
    write_motion_csv(&motion, &MotionSequence::zeros(20, 25.0).unwrap()).unwrap();
    let out = dir.path().join("out");
    let o = keymotion(&["extract-keyframes", "--motion", s(&motion), "--out-dir", s(&out), "--plot"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["keyframes_head.csv", "keyframes_expression.csv"] {
        let k = read_keyframe_csv(out.join(f)).unwrap();
        assert_eq!(k.len(), 20);
        assert_eq!(k.count(), 0);
    }
    assert!(fs::read_to_string(out.join("keyframes.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn extract_keyframes_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = MotionSequence::new(
        25.0,
        Matrix::random_normal(64, 9, 0.3, &mut rng),
        Matrix::random_normal(64, 50, 0.3, &mut rng),
    )
    .unwrap();
    let motion = dir.path().join("m.csv");
    write_motion_csv(&motion, &m).unwrap();
    let out = dir.path().join("out");
    let o = keymotion(&["extract-keyframes", "--motion", s(&motion), "--out-dir", s(&out)]);
    assert!(o.status.success());
    let reread = read_motion_csv(&motion).unwrap();
    let (h, e) = extract_targets(&reread, &KeyframePolicy::default()).unwrap();
    assert_eq!(fs::read_to_string(out.join("keyframes_head.csv")).unwrap(), format_keyframe_csv(&h));
    assert_eq!(fs::read_to_string(out.join("keyframes_expression.csv")).unwrap(), format_keyframe_csv(&e));
    assert!(!out.join("keyframes.svg").exists());
}

#[test]
fn missing_input_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.csv");
    let o = keymotion(&["extract-keyframes", "--motion", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.csv"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(keymotion(&[]).status.code(), Some(1));
    assert_eq!(keymotion(&["extract-keyframes"]).status.code(), Some(1));
    assert_eq!(keymotion(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[keyframes]\nthreshhold_alpha = 1.0\n").unwrap();
    let motion = dir.path().join("m.csv");
    write_motion_csv(&motion, &MotionSequence::zeros(5, 25.0).unwrap()).unwrap();
    let o = keymotion(&["extract-keyframes", "--config", s(&cfg), "--motion", s(&motion), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("threshhold_alpha"));
}

#[test]
fn prosody_and_features_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let p = dir.path().join("prosody.csv");
    assert!(keymotion(&["prosody", "--audio", s(&inputs.audio), "--out", s(&p)]).status.success());
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("frame,f0_hz,energy,f0_norm,energy_norm\n"));
    assert_eq!(text.lines().count(), 1 + 24);

    let f = dir.path().join("features.csv");
    assert!(keymotion(&["features", "--audio", s(&inputs.audio), "--out", s(&f)]).status.success());
    let m = read_matrix_csv(&f).unwrap();
    assert_eq!((m.rows(), m.cols()), (24, 80));
}

#[test]
fn train_sample_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let cfg = toy_config();
    let train_dir = dir.path().join("train");
    let o = keymotion(&[
        "train", "--config", s(&cfg), "--audio", s(&inputs.audio), "--motion", s(&inputs.motion),
        "--tokens", s(&inputs.tokens), "--out-dir", s(&train_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = train_dir.join("checkpoint.json");
    assert!(train_dir.join("manifest.json").exists());

    let sampled = dir.path().join("sampled.csv");
    let o = keymotion(&[
        "sample", "--config", s(&cfg), "--audio", s(&inputs.audio), "--tokens", s(&inputs.tokens),
        "--checkpoint", s(&ckpt), "--out", s(&sampled),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_motion_csv(&sampled).unwrap();
    assert_eq!(m.frames(), 13);

    let enc = dir.path().join("enc");
    let o = keymotion(&["encode", "--config", s(&cfg), "--audio", s(&inputs.audio), "--frames", "12", "--out-dir", s(&enc)]);
    assert!(o.status.success());
    let pred = dir.path().join("pred");
    let o = keymotion(&[
        "predict-keyframes", "--config", s(&cfg), "--features", s(&enc.join("speech_head.csv")),
        "--tokens", s(&inputs.tokens), "--checkpoint", s(&ckpt), "--stream", "head", "--out-dir", s(&pred),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_keyframe_csv(pred.join("keyframes.csv")).unwrap().len(), 12);
    let probs = fs::read_to_string(pred.join("probabilities.csv")).unwrap();
    assert_eq!(probs.lines().count(), 13);

    // A checkpoint does not fit a model of another width.
    let o = keymotion(&[
        "predict-keyframes", "--features", s(&enc.join("speech_head.csv")), "--tokens", s(&inputs.tokens),
        "--checkpoint", s(&ckpt), "--stream", "head", "--out-dir", s(&pred),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = keymotion(&[
        "evaluate", "--generated", s(&sampled), "--reference", s(&inputs.motion), "--audio", s(&inputs.audio),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for side in ["generated", "reference"] {
        let b = report[side]["beat_align"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&b));
        assert!(report[side]["diversity"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn pipeline_reruns_are_identical_and_config_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let cfg = toy_config();
    let run = |name: &str| {
        let run_dir = dir.path().join(name);
        let o = keymotion(&[
            "pipeline", "--config", s(&cfg), "--seed", "4", "--audio", s(&inputs.audio),
            "--motion", s(&inputs.motion), "--tokens", s(&inputs.tokens), "--run-dir", s(&run_dir),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        run_dir
    };
    let a = run("a");
    let b = run("b");
    for f in ["metrics.json", "keyframes_head.csv", "keyframes_expression.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let echoed = RunConfig::from_toml(&fs::read_to_string(a.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.seed, 4);
    assert_eq!(echoed.paths.run_dir.as_deref(), Some(a.as_path()));
}

#[test]
fn misaligned_pipeline_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    write_motion_csv(&inputs.motion, &MotionSequence::zeros(40, 25.0).unwrap()).unwrap();
    let o = keymotion(&[
        "pipeline", "--config", s(&toy_config()), "--audio", s(&inputs.audio), "--motion", s(&inputs.motion),
        "--tokens", s(&inputs.tokens), "--run-dir", s(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("12.50") && err.contains("40"), "{err}");
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = write_inputs(dir.path());
    let mut cfg = RunConfig::load(toy_config()).unwrap();
    cfg.keypredictor_training.optimizer.learning_rate = 1e300;
    cfg.keypredictor_training.optimizer.warmup_steps = 0;
    let path = dir.path().join("diverge.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let o = keymotion(&[
        "train", "--config", s(&path), "--audio", s(&inputs.audio), "--motion", s(&inputs.motion),
        "--tokens", s(&inputs.tokens), "--out-dir", s(&dir.path().join("t")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
