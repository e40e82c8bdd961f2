//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("utterance too short: {got} samples, need at least {min} for one frame")]
    UtteranceTooShort { got: usize, min: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown word '{0}' (not in lexicon)")]
    UnknownWord(String),

    #[error("clean signal has zero power")]
    ZeroPower,

    #[error("utterance has {frames} frames but transcript needs {states} states")]
    TooFewFrames { frames: usize, states: usize },

    #[error("LDA needs at least {need} distinct classes, observed {got}")]
    TooFewClasses { need: usize, got: usize },

    #[error("no decode path")]
    NoDecodePath,

    #[error("posterior row {row} sums to {sum}, not stochastic")]
    NonStochasticRow { row: usize, sum: f64 },

    #[error("instance is missing a required {0} label")]
    MissingLabel(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
