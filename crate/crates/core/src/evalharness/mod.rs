//! Word-error-rate scoring, the noise x modality x model experiment
//! grid, and trend rules over the results.

pub mod experiment;
pub mod trend;

pub use experiment::{
    bootstrap_modality, fused_features_from_media, mean_results, parse_reference_csv,
    run_experiment, snr_label, utterance_fused_features, BootstrapOutput, CellResult,
    ExperimentConfig, ExperimentOutput, GmmBootstrapConfig, ModelSpec, ResultsTable,
    TABLE1_REFERENCE_CSV,
};
pub use trend::{default_rules, trend_check, Rule, RuleOutcome};

use crate::error::{Error, Result};

/// Alignment counts from scoring one hypothesis against its reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerResult {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub wer_pct: f64,
}

impl WerResult {
    pub fn total_edits(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Pools several per-utterance results into corpus-level counts.
    pub fn pool<'a>(parts: impl IntoIterator<Item = &'a WerResult>) -> WerResult {
        let mut s = 0;
        let mut d = 0;
        let mut i = 0;
        let mut n = 0;
        for p in parts {
            s += p.substitutions;
            d += p.deletions;
            i += p.insertions;
            n += p.ref_len;
        }
        WerResult {
            substitutions: s,
            deletions: d,
            insertions: i,
            ref_len: n,
            wer_pct: 100.0 * (s + d + i) as f64 / n as f64,
        }
    }
}

/// Minimum-edit-distance word scoring with unit costs.
///
/// Among minimal alignments, ties prefer fewer insertions, then fewer
/// deletions (lexicographic on `(edits, insertions, deletions)`).
pub fn wer(reference: &[String], hypothesis: &[String]) -> Result<WerResult> {
    if reference.is_empty() {
        return Err(Error::Invalid("WER needs a non-empty reference".into()));
    }
    let m = reference.len();
    let n = hypothesis.len();
    // cost[(i, j)] = best (edits, insertions, deletions) aligning
    // reference[..i] with hypothesis[..j].
    let mut cost = vec![(0usize, 0usize, 0usize); (m + 1) * (n + 1)];
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    for i in 1..=m {
        cost[idx(i, 0)] = (i, 0, i); // deletions only
    }
    for j in 1..=n {
        cost[idx(0, j)] = (j, j, 0); // insertions only
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = if reference[i - 1] == hypothesis[j - 1] { 0 } else { 1 };
            let diag = cost[idx(i - 1, j - 1)];
            let diag = (diag.0 + sub, diag.1, diag.2);
            let del = cost[idx(i - 1, j)];
            let del = (del.0 + 1, del.1, del.2 + 1);
            let ins = cost[idx(i, j - 1)];
            let ins = (ins.0 + 1, ins.1 + 1, ins.2);
            cost[idx(i, j)] = diag.min(del).min(ins);
        }
    }
    let (edits, insertions, deletions) = cost[idx(m, n)];
    let substitutions = edits - insertions - deletions;
    Ok(WerResult {
        substitutions,
        deletions,
        insertions,
        ref_len: m,
        wer_pct: 100.0 * edits as f64 / m as f64,
    })
}

/// Percent change of a WER relative to a baseline: `100*(base-new)/base`.
pub fn relative_improvement(baseline_wer: f64, new_wer: f64) -> Result<f64> {
    if baseline_wer <= 0.0 {
        return Err(Error::Invalid(format!(
            "relative improvement needs a positive baseline, got {baseline_wer}"
        )));
    }
    Ok(100.0 * (baseline_wer - new_wer) / baseline_wer)
}
