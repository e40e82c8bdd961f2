//! Forced alignment and state priors.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

use super::{emission_logliks, HmmSet};

/// Which feature stream produced an alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Acoustic,
    Visual,
}

/// Per-frame global state labels for one utterance.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub utt_id: String,
    pub labels: Vec<usize>,
    pub modality: Modality,
}

/// Viterbi assignment of frames to the transcript's state chain.
///
/// Returns the alignment (global state ids, one per frame) and the best
/// path's log score, including transition and final-exit terms.
pub fn forced_align(
    model: &HmmSet,
    feats: &Array2<f64>,
    chain: &[usize],
    utt_id: &str,
    modality: Modality,
) -> Result<(Alignment, f64)> {
    let t = feats.nrows();
    let s = chain.len();
    if s == 0 {
        return Err(Error::Invalid("empty state chain".into()));
    }
    if t < s {
        return Err(Error::TooFewFrames { frames: t, states: s });
    }
    let loglik = emission_logliks(model, chain, feats.view());

    let mut delta = Array2::from_elem((t, s), f64::NEG_INFINITY);
    let mut back = Array2::from_elem((t, s), 0usize);
    delta[[0, 0]] = loglik[[0, 0]];
    for ti in 1..t {
        for j in 0..s {
            let stay = delta[[ti - 1, j]] + model.log_self(chain[j]);
            let enter = if j > 0 {
                delta[[ti - 1, j - 1]] + model.log_next(chain[j - 1])
            } else {
                f64::NEG_INFINITY
            };
            // Ties prefer the lower predecessor state (stay).
            if stay >= enter {
                delta[[ti, j]] = stay + loglik[[ti, j]];
                back[[ti, j]] = j;
            } else {
                delta[[ti, j]] = enter + loglik[[ti, j]];
                back[[ti, j]] = j - 1;
            }
        }
    }
    let score = delta[[t - 1, s - 1]] + model.log_next(chain[s - 1]);
    if score == f64::NEG_INFINITY {
        return Err(Error::NoDecodePath);
    }

    let mut labels = vec![0usize; t];
    let mut j = s - 1;
    for ti in (0..t).rev() {
        labels[ti] = chain[j];
        if ti > 0 {
            j = back[[ti, j]];
        }
    }
    Ok((
        Alignment { utt_id: utt_id.to_string(), labels, modality },
        score,
    ))
}

/// Relative state frequencies over a set of alignments, floored at 1e-8
/// and renormalized.
pub fn state_priors(alignments: &[Alignment], num_states: usize) -> Result<Array1<f64>> {
    if alignments.is_empty() {
        return Err(Error::Invalid("state priors need at least one alignment".into()));
    }
    let mut counts = Array1::<f64>::zeros(num_states);
    let mut total = 0.0f64;
    for a in alignments {
        for &s in &a.labels {
            counts[s] += 1.0;
            total += 1.0;
        }
    }
    let mut priors = counts.mapv(|c| (c / total).max(1e-8));
    let sum = priors.sum();
    priors /= sum;
    Ok(priors)
}
