use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSONL at line {line}: {detail}")]
    Jsonl { line: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint hash mismatch: file is corrupt")]
    CheckpointHash,

    #[error("checkpoint truncated: expected {expected} more bytes for {section}")]
    CheckpointTruncated { section: &'static str, expected: usize },

    #[error("checkpoint holds variant {found}, expected {expected}")]
    CheckpointVariant { found: String, expected: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
