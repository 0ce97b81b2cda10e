use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(
        "alignment error: audio spans {audio_frames:.2} motion frames but motion has {motion_frames} frames"
    )]
    Alignment {
        audio_frames: f64,
        motion_frames: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
