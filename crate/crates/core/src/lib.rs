//! Streaming attention-based speech recognition at desk scale: masked and
//! dual-stream self-attention encoders, CTC, triggered-attention decoding and
//! latency analysis, trained on synthetic corpora.

pub mod attention;
pub mod ctc;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod streaming;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("query row {0} has no visible key")]
    MaskedRow(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{labels} labels need at least {needed} frames, got {frames}")]
    CtcInfeasible { frames: usize, labels: usize, needed: usize },
    #[error("beam exhausted at frame {frame}; best partial hypothesis {prefix:?}")]
    BeamExhausted {
        frame: usize,
        prefix: Vec<usize>,
        triggers: Vec<usize>,
    },
    #[error("training diverged at epoch {epoch}, step {step}; parameters restored to the last good state")]
    Diverged { epoch: usize, step: u64 },
    #[error("session already finalized")]
    SessionFinalized,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
