//! Ordering assertions over a results table.

use crate::error::{Error, Result};

use super::experiment::ResultsTable;

/// One declarative ordering rule.
#[derive(Debug, Clone)]
pub enum Rule {
    /// Both-modalities decoding strictly beats audio-only at one SNR,
    /// for one model. Margin: `wer(audio-only) - wer(av)`.
    AvBeatsAudioOnly { snr: String, model: String },
    /// `better`'s mean WER over the listed `(snr, video)` cells is no
    /// worse than `baseline`'s. Margin: `mean(baseline) - mean(better)`.
    ModelNoWorse {
        better: String,
        baseline: String,
        cells: Vec<(String, String)>,
    },
}

impl Rule {
    pub fn name(&self) -> String {
        match self {
            Rule::AvBeatsAudioOnly { snr, model } => {
                format!("av_beats_audio_only_{snr}_{model}")
            }
            Rule::ModelNoWorse { better, baseline, .. } => {
                format!("{better}_no_worse_than_{baseline}_noisy")
            }
        }
    }
}

/// Result of evaluating one rule; positive margins pass.
#[derive(Debug, Clone)]
pub struct RuleOutcome {
    pub name: String,
    pub pass: bool,
    pub margin: f64,
}

impl RuleOutcome {
    pub fn report_line(&self) -> String {
        format!(
            "RULE {} {} margin={:.4}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.margin
        )
    }
}

/// The default rule set: at -3 dB every model must gain from video, and
/// the lambda=0.3 model must be no worse than the baseline on the noisy
/// conditions (-3 dB and 0 dB, video on and off).
pub fn default_rules(models: &[String], baseline: &str, better: &str) -> Vec<Rule> {
    let mut rules: Vec<Rule> = models
        .iter()
        .map(|m| Rule::AvBeatsAudioOnly { snr: "-3dB".into(), model: m.clone() })
        .collect();
    rules.push(Rule::ModelNoWorse {
        better: better.to_string(),
        baseline: baseline.to_string(),
        cells: vec![
            ("-3dB".into(), "OFF".into()),
            ("-3dB".into(), "ON".into()),
            ("0dB".into(), "OFF".into()),
            ("0dB".into(), "ON".into()),
        ],
    });
    rules
}

/// Evaluates every rule; errors if a required cell is missing.
pub fn trend_check(table: &ResultsTable, rules: &[Rule]) -> Result<Vec<RuleOutcome>> {
    let cell = |snr: &str, video: &str, model: &str| -> Result<f64> {
        table.wer_pct(snr, video, model).ok_or_else(|| {
            Error::Invalid(format!("results table is missing cell ({snr}, {video}, {model})"))
        })
    };
    rules
        .iter()
        .map(|rule| {
            let (pass, margin) = match rule {
                Rule::AvBeatsAudioOnly { snr, model } => {
                    let av = cell(snr, "ON", model)?;
                    let audio_only = cell(snr, "OFF", model)?;
                    let margin = audio_only - av;
                    (margin > 0.0, margin)
                }
                Rule::ModelNoWorse { better, baseline, cells } => {
                    let mut b_sum = 0.0;
                    let mut base_sum = 0.0;
                    for (snr, video) in cells {
                        b_sum += cell(snr, video, better)?;
                        base_sum += cell(snr, video, baseline)?;
                    }
                    let margin = (base_sum - b_sum) / cells.len() as f64;
                    (margin >= 0.0, margin)
                }
            };
            Ok(RuleOutcome { name: rule.name(), pass, margin })
        })
        .collect()
}

/// The `RULE <name> PASS|FAIL margin=<value>` report, one line per rule.
pub fn report_text(outcomes: &[RuleOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        out.push_str(&o.report_line());
        out.push('\n');
    }
    out
}
