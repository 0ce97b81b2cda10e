//! Motion, audio, transcript and keyframe data model with file I/O.
//!
//! Motion CSV layout:
//!
//! ```text
//! # fps=25
//! frame,h0,...,h8,e0,...,e49
//! 0,0.01,...
//! ```
//!
//! The `# fps=` comment is optional (default 25). Frame indices must form a
//! contiguous run; rows may appear in any order and are sorted on read.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const HEAD_POSE_DIM: usize = 9;
pub const EXPRESSION_DIM: usize = 50;
pub const SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frame_rate: f64,
    head_pose: Matrix,
    expression: Matrix,
}

impl MotionSequence {
    pub fn new(frame_rate: f64, head_pose: Matrix, expression: Matrix) -> Result<Self> {
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::config(format!(
                "frame rate must be positive, got {frame_rate}"
            )));
        }
        if head_pose.cols() != HEAD_POSE_DIM || expression.cols() != EXPRESSION_DIM {
            return Err(Error::dim(format!(
                "head pose must be Tx{HEAD_POSE_DIM} and expression Tx{EXPRESSION_DIM}, got {}x{} and {}x{}",
                head_pose.rows(),
                head_pose.cols(),
                expression.rows(),
                expression.cols()
            )));
        }
        if head_pose.rows() != expression.rows() || head_pose.rows() == 0 {
            return Err(Error::Structure(format!(
                "head pose has {} frames and expression has {}; both must be equal and at least 1",
                head_pose.rows(),
                expression.rows()
            )));
        }
        if !head_pose.is_finite() || !expression.is_finite() {
            return Err(Error::Numeric("motion coefficients must be finite".into()));
        }
        Ok(MotionSequence {
            frame_rate,
            head_pose,
            expression,
        })
    }

    pub fn zeros(frames: usize, frame_rate: f64) -> Result<Self> {
        Self::new(
            frame_rate,
            Matrix::zeros(frames, HEAD_POSE_DIM),
            Matrix::zeros(frames, EXPRESSION_DIM),
        )
    }

    pub fn frames(&self) -> usize {
        self.head_pose.rows()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn head_pose(&self) -> &Matrix {
        &self.head_pose
    }

    pub fn expression(&self) -> &Matrix {
        &self.expression
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / self.frame_rate
    }
}

/// Head pose split into its rotation, neck and camera parts.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseDecomposition {
    pub rotation: Matrix,
    pub neck: Matrix,
    pub camera: Matrix,
    /// `[neck, camera]`, T x 6.
    pub combined_nc: Matrix,
}

/// Columns 0-2 are the axis-angle rotation, 3-5 the neck, 6-8 the camera.
pub fn decompose_pose(m: &MotionSequence) -> PoseDecomposition {
    let h = m.head_pose();
    PoseDecomposition {
        rotation: h.slice_cols(0, 3),
        neck: h.slice_cols(3, 6),
        camera: h.slice_cols(6, 9),
        combined_nc: h.slice_cols(3, 9),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    sample_rate: u32,
    samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedFormat(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        if let Some(bad) = samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(Error::Range(format!("audio sample {bad} outside [-1, 1]")));
        }
        Ok(AudioClip {
            sample_rate,
            samples,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptTokens {
    tokens: Vec<usize>,
    vocab_size: usize,
}

impl TranscriptTokens {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Range(format!(
                "token id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(TranscriptTokens { tokens, vocab_size })
    }

    pub fn empty(vocab_size: usize) -> Self {
        TranscriptTokens {
            tokens: Vec::new(),
            vocab_size,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KeyframeSeq {
    flags: Vec<u8>,
}

impl KeyframeSeq {
    pub fn new(flags: Vec<u8>) -> Result<Self> {
        if let Some(bad) = flags.iter().find(|&&f| f > 1) {
            return Err(Error::Range(format!("keyframe flag {bad} is not 0 or 1")));
        }
        Ok(KeyframeSeq { flags })
    }

    pub fn zeros(len: usize) -> Self {
        KeyframeSeq {
            flags: vec![0; len],
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut flags = vec![0; len];
        for &i in indices {
            flags[i] = 1;
        }
        KeyframeSeq { flags }
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.flags.iter().map(|&f| f64::from(f)).collect()
    }
}

fn motion_header() -> Vec<String> {
    std::iter::once("frame".to_string())
        .chain((0..HEAD_POSE_DIM).map(|i| format!("h{i}")))
        .chain((0..EXPRESSION_DIM).map(|i| format!("e{i}")))
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_fps(text: &str) -> Result<f64> {
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("fps=") {
                return v
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|f| f.is_finite() && *f > 0.0)
                    .ok_or_else(|| Error::Format(format!("invalid fps comment `{line}`")));
            }
        }
    }
    Ok(DEFAULT_FPS)
}

pub fn read_motion_csv(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let path = path.as_ref();
    let text = read_text(path)?;
    parse_motion_csv(&text)
}

pub fn parse_motion_csv(text: &str) -> Result<MotionSequence> {
    let fps = parse_fps(text)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let expected = motion_header();
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != expected {
        if let Some(missing) = expected.iter().find(|c| !header.contains(c)) {
            return Err(Error::Format(format!("header is missing column `{missing}`")));
        }
        return Err(Error::Format(format!(
            "header must be exactly `frame,h0..h8,e0..e49`, got {} columns",
            header.len()
        )));
    }

    let mut rows: Vec<(i64, Vec<f64>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Format(format!("data row {row}: {e}")))?;
        if record.len() != expected.len() {
            return Err(Error::Format(format!(
                "data row {row} has {} cells, expected {}",
                record.len(),
                expected.len()
            )));
        }
        let frame = record[0].parse::<i64>().map_err(|e| Error::Parse {
            row,
            column: "frame".into(),
            message: format!("`{}`: {e}", &record[0]),
        })?;
        let mut values = Vec::with_capacity(expected.len() - 1);
        for (col, cell) in record.iter().enumerate().skip(1) {
            let v = cell.parse::<f64>().map_err(|e| Error::Parse {
                row,
                column: expected[col].clone(),
                message: format!("`{cell}`: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: expected[col].clone(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(v);
        }
        rows.push((frame, values));
    }
    if rows.is_empty() {
        return Err(Error::Structure("motion file has no frames".into()));
    }
    rows.sort_by_key(|(f, _)| *f);
    for w in rows.windows(2) {
        if w[1].0 != w[0].0 + 1 {
            return Err(Error::Structure(format!(
                "frame indices are not contiguous: {} is followed by {}",
                w[0].0, w[1].0
            )));
        }
    }

    let t = rows.len();
    let mut head = Matrix::zeros(t, HEAD_POSE_DIM);
    let mut expr = Matrix::zeros(t, EXPRESSION_DIM);
    for (r, (_, values)) in rows.iter().enumerate() {
        head.row_mut(r).copy_from_slice(&values[..HEAD_POSE_DIM]);
        expr.row_mut(r).copy_from_slice(&values[HEAD_POSE_DIM..]);
    }
    MotionSequence::new(fps, head, expr)
}

pub fn format_motion_csv(m: &MotionSequence) -> String {
    let mut out = String::new();
    out.push_str(&format!("# fps={}\n", m.frame_rate()));
    out.push_str(&motion_header().join(","));
    out.push('\n');
    for t in 0..m.frames() {
        out.push_str(&t.to_string());
        for v in m.head_pose().row(t).iter().chain(m.expression().row(t)) {
            out.push(',');
            // `{}` prints the shortest representation that round-trips.
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_motion_csv(path: impl AsRef<Path>, m: &MotionSequence) -> Result<()> {
    write_text(path.as_ref(), &format_motion_csv(m))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedFormat(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            spec.sample_rate
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat(format!(
            "{}-bit {:?} samples, expected 16-bit PCM",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| f64::from(v) / 32768.0)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    AudioClip::new(spec.sample_rate, samples)
}

/// Quantizes to int16 by `round(s * 32768)`, saturating at the int16 range.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in clip.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// One integer token id per line; blank lines are ignored.
pub fn read_tokens(path: impl AsRef<Path>, vocab_size: usize) -> Result<TranscriptTokens> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let t = line.parse::<usize>().map_err(|e| Error::Parse {
            row: i + 1,
            column: "token".into(),
            message: format!("`{line}`: {e}"),
        })?;
        tokens.push(t);
    }
    TranscriptTokens::new(tokens, vocab_size)
}

pub fn write_tokens(path: impl AsRef<Path>, tokens: &TranscriptTokens) -> Result<()> {
    let mut text = String::new();
    for t in tokens.tokens() {
        text.push_str(&format!("{t}\n"));
    }
    write_text(path.as_ref(), &text)
}

pub fn format_keyframe_csv(k: &KeyframeSeq) -> String {
    let mut out = String::from("frame,flag\n");
    for (t, f) in k.flags().iter().enumerate() {
        out.push_str(&format!("{t},{f}\n"));
    }
    out
}

pub fn write_keyframe_csv(path: impl AsRef<Path>, k: &KeyframeSeq) -> Result<()> {
    write_text(path.as_ref(), &format_keyframe_csv(k))
}

pub fn read_keyframe_csv(path: impl AsRef<Path>) -> Result<KeyframeSeq> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let table = parse_numeric_csv(&text)?;
    if table.header != ["frame", "flag"] {
        return Err(Error::Format("keyframe header must be `frame,flag`".into()));
    }
    let mut flags = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        if row[0] != i as f64 {
            return Err(Error::Structure(format!(
                "keyframe row {} has frame {}, expected {i}",
                i + 1,
                row[0]
            )));
        }
        if row[1] != 0.0 && row[1] != 1.0 {
            return Err(Error::Parse {
                row: i + 1,
                column: "flag".into(),
                message: format!("flag {} is not 0 or 1", row[1]),
            });
        }
        flags.push(row[1] as u8);
    }
    KeyframeSeq::new(flags)
}

/// Writes `frame,<prefix>0,<prefix>1,...` rows for a feature matrix.
pub fn format_matrix_csv(prefix: &str, m: &Matrix) -> String {
    let mut out = String::from("frame");
    for c in 0..m.cols() {
        out.push_str(&format!(",{prefix}{c}"));
    }
    out.push('\n');
    for r in 0..m.rows() {
        out.push_str(&r.to_string());
        for v in m.row(r) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: impl AsRef<Path>, prefix: &str, m: &Matrix) -> Result<()> {
    write_text(path.as_ref(), &format_matrix_csv(prefix, m))
}

/// Reads a feature CSV written by [`write_matrix_csv`], dropping the frame column.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let table = parse_numeric_csv(&text)?;
    if table.header.first().map(String::as_str) != Some("frame") {
        return Err(Error::Format("first column must be `frame`".into()));
    }
    let cols = table.header.len() - 1;
    let mut m = Matrix::zeros(table.rows.len(), cols);
    for (r, row) in table.rows.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&row[1..]);
    }
    Ok(m)
}

struct NumericTable {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn parse_numeric_csv(text: &str) -> Result<NumericTable> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("data row {}: {e}", i + 1)))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().map_err(|e| Error::Parse {
                    row: i + 1,
                    column: header.get(c).cloned().unwrap_or_default(),
                    message: format!("`{cell}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(NumericTable { header, rows })
}
