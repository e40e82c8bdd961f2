//! Run configuration: flat key-value sections in a TOML file.
//!
//! Unknown keys are rejected. Every field has a documented default, so
//! an empty file (or no `--config`) is a valid run. The `MTLAVSR_WORKDIR`
//! environment variable overrides `[paths] work_dir`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use mtlavsr_core::evalharness::{GmmBootstrapConfig, ModelSpec};
use mtlavsr_core::mtlnet::{Activation, TrainConfig};
use mtlavsr_core::synthdata::{Grammar, Lexicon, VoiceParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Number of utterances to synthesize.
    pub size: usize,
    /// Master seed for corpus content and the split.
    pub seed: u64,
    /// Grammar file path; empty selects the built-in six-slot grammar.
    pub grammar: String,
    /// Lexicon file path; empty selects the built-in inventory.
    pub lexicon: String,
    /// Nominal utterance length, seconds.
    pub target_duration_s: f64,
    /// Uniform length jitter, seconds.
    pub duration_jitter_s: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            size: 2000,
            seed: 42,
            grammar: String::new(),
            lexicon: String::new(),
            target_duration_s: 3.0,
            duration_jitter_s: 0.15,
        }
    }
}

/// The feature pipeline has no tunable knobs: 25 ms / 10 ms filterbank
/// frames, 40 mels over 20-7600 Hz, 100 zigzag DCT coefficients, +-5
/// splice. The section exists so configs can state that explicitly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmSection {
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub target_components: usize,
    pub lda_context: usize,
    pub lda_dim: usize,
}

impl Default for GmmSection {
    fn default() -> Self {
        let d = GmmBootstrapConfig::default();
        Self {
            stage1_iterations: d.stage1_iterations,
            stage2_iterations: d.stage2_iterations,
            target_components: d.target_components,
            lda_context: d.lda_context,
            lda_dim: d.lda_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnnSection {
    /// Auxiliary-task weights; one model per value, plus the baseline.
    pub lambdas: Vec<f64>,
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    /// `sigmoid`, `relu`, or `tanh`.
    pub activation: String,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub halve_threshold_pct: f64,
    pub stop_threshold_pct: f64,
    pub max_epochs: usize,
}

impl Default for DnnSection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.1, 0.3],
            hidden_layers: 4,
            hidden_dim: 1500,
            activation: "sigmoid".into(),
            batch_size: 256,
            initial_lr: 0.008,
            halve_threshold_pct: 0.5,
            stop_threshold_pct: 0.1,
            max_epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub acoustic_scale: f64,
    /// Beam width; 0 disables pruning (exact search).
    pub beam: f64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { acoustic_scale: 1.0, beam: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Noisy test SNRs in dB; clean and video-only rows are always added.
    pub snrs_db: Vec<f64>,
    pub babble_sources: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { snrs_db: vec![-3.0, 0.0, 10.0], babble_sources: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub work_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { work_dir: "work".into() }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub features: FeaturesSection,
    pub gmmhmm: GmmSection,
    pub dnn: DnnSection,
    pub decode: DecodeSection,
    pub experiment: ExperimentSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Loads and validates a config file; `None` gives pure defaults.
    /// `seed_override` comes from the global `--seed` flag.
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> anyhow::Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config file {}", p.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("invalid config file {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = seed_override {
            cfg.corpus.seed = seed;
        }
        if let Ok(dir) = std::env::var("MTLAVSR_WORKDIR") {
            if !dir.is_empty() {
                cfg.paths.work_dir = dir;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.corpus.size < 10 {
            bail!("corpus.size must be at least 10");
        }
        Activation::from_name(&self.dnn.activation)
            .map_err(|e| anyhow::anyhow!("dnn.activation: {e}"))?;
        self.train_config(0.0)
            .validate()
            .map_err(|e| anyhow::anyhow!("dnn section: {e}"))?;
        if self.decode.beam < 0.0 {
            bail!("decode.beam must be non-negative");
        }
        if self.experiment.babble_sources == 0 {
            bail!("experiment.babble_sources must be at least 1");
        }
        // Resolve grammar/lexicon up front so a bad path is a config
        // error that names the file.
        let grammar = self.grammar()?;
        let lexicon = self.lexicon()?;
        lexicon.check_covers(&grammar)?;
        Ok(())
    }

    /// Canonical serialized form: defaults materialized, sections in
    /// declaration order.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn work_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.work_dir)
    }

    pub fn grammar(&self) -> anyhow::Result<Grammar> {
        if self.corpus.grammar.is_empty() {
            Ok(Grammar::default_grid())
        } else {
            let text = std::fs::read_to_string(&self.corpus.grammar)
                .with_context(|| format!("cannot read grammar file {}", self.corpus.grammar))?;
            Ok(Grammar::parse(&text, &self.corpus.grammar)?)
        }
    }

    pub fn lexicon(&self) -> anyhow::Result<Lexicon> {
        if self.corpus.lexicon.is_empty() {
            Ok(Lexicon::default_grid())
        } else {
            let text = std::fs::read_to_string(&self.corpus.lexicon)
                .with_context(|| format!("cannot read lexicon file {}", self.corpus.lexicon))?;
            Ok(Lexicon::parse(&text, &self.corpus.lexicon)?)
        }
    }

    pub fn voice(&self) -> VoiceParams {
        VoiceParams {
            target_duration_s: self.corpus.target_duration_s,
            duration_jitter_s: self.corpus.duration_jitter_s,
            ..VoiceParams::default()
        }
    }

    pub fn gmm_config(&self) -> GmmBootstrapConfig {
        GmmBootstrapConfig {
            stage1_iterations: self.gmmhmm.stage1_iterations,
            stage2_iterations: self.gmmhmm.stage2_iterations,
            target_components: self.gmmhmm.target_components,
            lda_context: self.gmmhmm.lda_context,
            lda_dim: self.gmmhmm.lda_dim,
        }
    }

    pub fn train_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            batch_size: self.dnn.batch_size,
            initial_lr: self.dnn.initial_lr,
            halve_threshold_pct: self.dnn.halve_threshold_pct,
            stop_threshold_pct: self.dnn.stop_threshold_pct,
            seed: self.corpus.seed,
            hidden_layers: self.dnn.hidden_layers,
            hidden_dim: self.dnn.hidden_dim,
            activation: Activation::from_name(&self.dnn.activation)
                .expect("validated activation"),
            max_epochs: self.dnn.max_epochs,
        }
    }

    /// Model columns: the baseline plus one model per configured lambda.
    pub fn models(&self) -> Vec<ModelSpec> {
        let mut models = vec![ModelSpec::stl()];
        for &l in &self.dnn.lambdas {
            models.push(ModelSpec::mtl(l));
        }
        models
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_canonically() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.canonical_toml(), text);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig =
            toml::from_str("[corpus]\nsize = 50\nseed = 7\n\n[dnn]\nhidden_dim = 64\n").unwrap();
        assert_eq!(cfg.corpus.size, 50);
        assert_eq!(cfg.corpus.seed, 7);
        assert_eq!(cfg.dnn.hidden_dim, 64);
        assert_eq!(cfg.dnn.batch_size, 256);
        assert_eq!(cfg.dnn.initial_lr, 0.008);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[corpus]\nsizee = 50\n");
        assert!(err.is_err());
        let err = toml::from_str::<RunConfig>("[nonsense]\nx = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn models_include_baseline_and_lambdas() {
        let cfg = RunConfig::default();
        let models = cfg.models();
        assert_eq!(models[0].name, "stl");
        assert_eq!(models[0].lambda, 0.0);
        assert_eq!(models[1].name, "mtl0.1");
        assert_eq!(models[2].name, "mtl0.3");
    }
}
