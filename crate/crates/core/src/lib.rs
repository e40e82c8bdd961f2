//! Desk-scale audio-visual speech recognition workbench.
//!
//! The pipeline, end to end:
//!
//! 1. [`synthdata`] generates a small GRID-like audio-visual corpus with
//!    known transcripts and exact phone timings, plus babble noise mixed
//!    at controlled SNR.
//! 2. [`features`] turns media into frame features: 40-dim log mel
//!    filterbank for audio, 100-dim zigzag DCT for video, normalized,
//!    rate-matched, fused to 140 dims and spliced to 1540.
//! 3. [`gmmhmm`] bootstraps monophone GMM/HMM models per modality
//!    (flat start, EM, LDA, Gaussian splitting) and force-aligns to
//!    produce the two frame-label streams.
//! 4. [`mtlnet`] trains the shared-trunk network with two softmax heads
//!    (acoustic and visual states) under a weighted two-task
//!    cross-entropy objective, with modality-suppressed input variants
//!    and a new-bob learning-rate schedule. The single-task baseline is
//!    the same network with the auxiliary weight at zero.
//! 5. [`decoder`] compiles grammar + lexicon + HMM topology into a
//!    search graph and runs exact Viterbi over scaled log-likelihoods.
//! 6. [`evalharness`] scores WER and drives the noise x modality x model
//!    experiment grid.
//!
//! Heavy loops fan out over rayon when the `parallel` feature (default)
//! is enabled; see [`parallel`]. Results are bit-identical either way.

pub mod decoder;
pub mod error;
pub mod evalharness;
pub mod features;
pub mod gmmhmm;
pub mod io;
pub mod mtlnet;
pub mod parallel;
pub mod synthdata;

pub use error::{Error, Result};
