//! The full experiment: corpus synthesis, features, GMM/HMM bootstrap
//! per modality, network training per model, and the noise x modality
//! decode grid, all in memory.
//!
//! Stage functions are public so the command-line front end can run them
//! one at a time against on-disk artifacts; [`run_experiment`] chains
//! them directly.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{s, Array2};

use crate::decoder::{compile_graph, decode_utterance};
use crate::error::{Error, Result};
use crate::features::{
    compute_filterbank, dct_visual_sequence, fuse, interpolate_video, mean_variance_normalize,
    splice, NUM_MELS,
};
use crate::gmmhmm::{
    em_iterate, estimate_lda_from, flat_start, forced_align, split_gaussians, state_priors,
    transcript_states, Alignment, HmmSet, LdaAccumulator, LdaTransform, Modality,
};
use crate::mtlnet::{
    train_network, EpochRecord, FrameDataset, MtlNetwork, NetDims, TrainConfig, Variant,
};
use crate::parallel;
use crate::synthdata::{
    build_corpus, derive_seed, mix_at_snr, synth_babble, synth_utterance, Grammar, Lexicon,
    SynthUtterance, VoiceParams,
};

use super::{wer, WerResult};

/// The published comparison table shipped for report-format tests and
/// trend-rule checks. Never an acceptance target for synthetic runs.
pub const TABLE1_REFERENCE_CSV: &str = include_str!("../../data/table1_reference.csv");

/// One model column of the experiment.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub lambda: f64,
}

impl ModelSpec {
    /// The single-task baseline: auxiliary weight zero.
    pub fn stl() -> Self {
        Self { name: "stl".into(), lambda: 0.0 }
    }

    pub fn mtl(lambda: f64) -> Self {
        Self { name: format!("mtl{lambda}"), lambda }
    }
}

/// Bootstrap recipe knobs.
#[derive(Debug, Clone)]
pub struct GmmBootstrapConfig {
    /// EM iterations on base features before the projection.
    pub stage1_iterations: usize,
    /// EM iterations on projected features (with mixture growth).
    pub stage2_iterations: usize,
    /// Final Gaussians per state.
    pub target_components: usize,
    /// Context frames per side for the projection's input splice.
    pub lda_context: usize,
    /// Projected feature dimension.
    pub lda_dim: usize,
}

impl Default for GmmBootstrapConfig {
    fn default() -> Self {
        Self {
            stage1_iterations: 5,
            stage2_iterations: 5,
            target_components: 4,
            lda_context: 4,
            lda_dim: 40,
        }
    }
}

/// Everything one experiment run needs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub corpus_size: usize,
    pub seed: u64,
    pub voice: VoiceParams,
    pub grammar: Grammar,
    pub lexicon: Lexicon,
    pub models: Vec<ModelSpec>,
    /// Noisy test SNRs in dB; clean and video-only rows are always added.
    pub snrs_db: Vec<f64>,
    pub babble_sources: usize,
    pub train: TrainConfig,
    pub gmm: GmmBootstrapConfig,
    pub acoustic_scale: f64,
}

impl ExperimentConfig {
    /// Desk-scale defaults: built-in grammar/lexicon, three models, the
    /// standard noise grid.
    pub fn desk_default(corpus_size: usize, seed: u64) -> Self {
        Self {
            corpus_size,
            seed,
            voice: VoiceParams::default(),
            grammar: Grammar::default_grid(),
            lexicon: Lexicon::default_grid(),
            models: vec![ModelSpec::stl(), ModelSpec::mtl(0.1), ModelSpec::mtl(0.3)],
            snrs_db: vec![-3.0, 0.0, 10.0],
            babble_sources: 6,
            train: TrainConfig { seed, ..TrainConfig::default() },
            gmm: GmmBootstrapConfig::default(),
            acoustic_scale: 1.0,
        }
    }
}

/// One scored grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub snr: String,
    pub video: String,
    pub model: String,
    pub wer_pct: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

/// Ordered collection of scored cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub cells: Vec<CellResult>,
}

impl ResultsTable {
    pub fn wer_pct(&self, snr: &str, video: &str, model: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.snr == snr && c.video == video && c.model == model)
            .map(|c| c.wer_pct)
    }

    /// Distinct `(snr, video)` rows in first-appearance order.
    pub fn grid_rows(&self) -> Vec<(String, String)> {
        let mut rows = Vec::new();
        for c in &self.cells {
            let key = (c.snr.clone(), c.video.clone());
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        rows
    }

    pub fn model_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.cells {
            if !names.contains(&c.model) {
                names.push(c.model.clone());
            }
        }
        names
    }

    /// `snr,video,model,wer_pct,subs,dels,ins,ref_len` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr,video,model,wer_pct,subs,dels,ins,ref_len\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.4},{},{},{},{}\n",
                c.snr,
                c.video,
                c.model,
                c.wer_pct,
                c.substitutions,
                c.deletions,
                c.insertions,
                c.ref_len
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "snr,video,model,wer_pct,subs,dels,ins,ref_len" {
            return Err(Error::Parse {
                path: "<results csv>".into(),
                msg: format!("unexpected header '{header}'"),
            });
        }
        let mut cells = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse {
                    path: "<results csv>".into(),
                    msg: format!("line {}: expected 8 fields, got {}", ln + 2, f.len()),
                });
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    path: "<results csv>".into(),
                    msg: format!("line {}: bad number '{s}'", ln + 2),
                })
            };
            cells.push(CellResult {
                snr: f[0].to_string(),
                video: f[1].to_string(),
                model: f[2].to_string(),
                wer_pct: num(f[3])?,
                substitutions: num(f[4])? as usize,
                deletions: num(f[5])? as usize,
                insertions: num(f[6])? as usize,
                ref_len: num(f[7])? as usize,
            });
        }
        Ok(Self { cells })
    }
}

/// Parses the wide published-table format: `snr,video,<model>,...` with
/// one WER column per model. Counts are not part of that table.
pub fn parse_reference_csv(text: &str) -> Result<ResultsTable> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: "<reference csv>".into(),
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "snr" || cols[1] != "video" {
        return Err(Error::Parse {
            path: "<reference csv>".into(),
            msg: format!("unexpected header '{header}'"),
        });
    }
    let models: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut cells = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 2 + models.len() {
            return Err(Error::Parse {
                path: "<reference csv>".into(),
                msg: format!("line {}: expected {} fields", ln + 2, 2 + models.len()),
            });
        }
        for (m, model) in models.iter().enumerate() {
            let wer_pct: f64 = f[2 + m].parse().map_err(|_| Error::Parse {
                path: "<reference csv>".into(),
                msg: format!("line {}: bad number '{}'", ln + 2, f[2 + m]),
            })?;
            cells.push(CellResult {
                snr: f[0].to_string(),
                video: f[1].to_string(),
                model: model.clone(),
                wer_pct,
                substitutions: 0,
                deletions: 0,
                insertions: 0,
                ref_len: 0,
            });
        }
    }
    Ok(ResultsTable { cells })
}

/// Cell-wise mean of several result tables (same grid and models).
pub fn mean_results(tables: &[ResultsTable]) -> Result<ResultsTable> {
    let first = tables.first().ok_or_else(|| Error::Invalid("no tables to average".into()))?;
    let mut cells = Vec::with_capacity(first.cells.len());
    for cell in &first.cells {
        let mut wer_sum = 0.0;
        let mut s = 0;
        let mut d = 0;
        let mut i = 0;
        let mut n = 0;
        for t in tables {
            let c = t
                .cells
                .iter()
                .find(|c| c.snr == cell.snr && c.video == cell.video && c.model == cell.model)
                .ok_or_else(|| {
                    Error::Invalid(format!(
                        "table missing cell ({}, {}, {})",
                        cell.snr, cell.video, cell.model
                    ))
                })?;
            wer_sum += c.wer_pct;
            s += c.substitutions;
            d += c.deletions;
            i += c.insertions;
            n += c.ref_len;
        }
        cells.push(CellResult {
            snr: cell.snr.clone(),
            video: cell.video.clone(),
            model: cell.model.clone(),
            wer_pct: wer_sum / tables.len() as f64,
            substitutions: s,
            deletions: d,
            insertions: i,
            ref_len: n,
        });
    }
    Ok(ResultsTable { cells })
}

/// Label for an SNR row, e.g. `-3dB`.
pub fn snr_label(db: f64) -> String {
    if db == db.trunc() {
        format!("{}dB", db as i64)
    } else {
        format!("{db}dB")
    }
}

/// Fused, normalized `T x 140` features from raw media: filterbank and
/// per-utterance normalization on audio, rate-matched DCT and
/// normalization on video, then concatenation.
pub fn fused_features_from_media(
    waveform: &crate::features::Waveform,
    video: &crate::features::VideoStream,
) -> Result<Array2<f64>> {
    let audio = mean_variance_normalize(&compute_filterbank(waveform)?)?;
    let frames = interpolate_video(video, audio.nrows())?;
    let visual = mean_variance_normalize(&dct_visual_sequence(&frames)?)?;
    fuse(&audio, &visual)
}

/// Fused, normalized `T x 140` features for one utterance.
pub fn utterance_fused_features(utt: &SynthUtterance) -> Result<Array2<f64>> {
    fused_features_from_media(&utt.waveform, &utt.video)
}

/// Output of one modality's bootstrap.
pub struct BootstrapOutput {
    /// Final model over projected features.
    pub model: HmmSet,
    pub lda: LdaTransform,
    /// Final alignments, one per utterance, in input order.
    pub alignments: Vec<Alignment>,
    /// Dataset log likelihood before each EM update, both stages.
    pub log_likelihoods: Vec<f64>,
}

/// Flat start -> EM -> align -> supervised projection -> retrain with
/// mixture growth -> final align, all on one feature stream.
pub fn bootstrap_modality<F>(
    phones: Vec<String>,
    base_dim: usize,
    n_utts: usize,
    get_base: F,
    utt_ids: &[String],
    cfg: &GmmBootstrapConfig,
    modality: Modality,
) -> Result<BootstrapOutput>
where
    F: Fn(usize) -> (Array2<f64>, Vec<usize>) + Sync + Send,
{
    let mut lls = Vec::new();
    let mut model = flat_start(phones.clone(), base_dim, n_utts, &get_base)?;
    for _ in 0..cfg.stage1_iterations {
        let (next, stats) = em_iterate(&model, n_utts, &get_base)?;
        lls.push(stats.total_log_likelihood);
        model = next;
    }

    let stage1_aligns: Vec<Result<Alignment>> = parallel::map_range(n_utts, |u| {
        let (feats, chain) = get_base(u);
        forced_align(&model, &feats, &chain, &utt_ids[u], modality).map(|(a, _)| a)
    });
    let mut labels: Vec<Vec<usize>> = Vec::with_capacity(n_utts);
    for a in stage1_aligns {
        labels.push(a?.labels);
    }

    let accs: Vec<Result<LdaAccumulator>> = parallel::map_range(n_utts, |u| {
        let (feats, _) = get_base(u);
        let spliced = splice(&feats, cfg.lda_context, cfg.lda_context);
        let mut acc = LdaAccumulator::new(spliced.ncols());
        acc.add(spliced.view(), &labels[u])?;
        Ok(acc)
    });
    let mut lda_acc = LdaAccumulator::new((2 * cfg.lda_context + 1) * base_dim);
    for a in accs {
        lda_acc.merge(&a?);
    }
    let lda = estimate_lda_from(&lda_acc, cfg.lda_dim)?;

    let get_projected = |u: usize| {
        let (feats, chain) = get_base(u);
        let spliced = splice(&feats, cfg.lda_context, cfg.lda_context);
        (lda.apply(spliced.view()), chain)
    };

    let mut model2 = flat_start(phones, cfg.lda_dim, n_utts, &get_projected)?;
    let mut components = 1usize;
    for i in 1..=cfg.stage2_iterations {
        let (next, stats) = em_iterate(&model2, n_utts, &get_projected)?;
        lls.push(stats.total_log_likelihood);
        model2 = next;
        if components < cfg.target_components && i < cfg.stage2_iterations {
            components = (components * 2).min(cfg.target_components);
            model2 = split_gaussians(&model2, components)?;
        }
    }

    let final_aligns: Vec<Result<Alignment>> = parallel::map_range(n_utts, |u| {
        let (feats, chain) = get_projected(u);
        forced_align(&model2, &feats, &chain, &utt_ids[u], modality).map(|(a, _)| a)
    });
    let mut alignments = Vec::with_capacity(n_utts);
    for a in final_aligns {
        alignments.push(a?);
    }

    Ok(BootstrapOutput { model: model2, lda, alignments, log_likelihoods: lls })
}

/// Results plus per-model training history.
pub struct ExperimentOutput {
    pub results: ResultsTable,
    pub training: BTreeMap<String, Vec<EpochRecord>>,
    /// Final outputs per model for reuse (checkpointing, inspection).
    pub networks: BTreeMap<String, MtlNetwork>,
}

/// Runs the whole pipeline for every model in the grid and scores every
/// `(snr, video)` cell on the shared test set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.lexicon.check_covers(&cfg.grammar)?;
    cfg.train.validate()?;
    let t_start = Instant::now();

    let (specs, split) = build_corpus(&cfg.grammar, cfg.corpus_size, cfg.seed)?;
    let mut id_to_idx = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        id_to_idx.insert(s.id.clone(), i);
    }
    let traincv_ids: Vec<String> =
        split.train.iter().chain(&split.cv).cloned().collect();
    let traincv_idx: Vec<usize> = traincv_ids.iter().map(|id| id_to_idx[id]).collect();
    let test_idx: Vec<usize> = split.test.iter().map(|id| id_to_idx[id]).collect();
    let n_train = split.train.len();
    let n_traincv = traincv_idx.len();

    // Features for the train+cv portion, compact storage.
    let feats: Vec<Result<(Array2<f32>, Vec<usize>)>> =
        parallel::map_slice(&traincv_idx, |&i| {
            let spec = &specs[i];
            let utt =
                synth_utterance(&spec.id, &spec.words, &cfg.lexicon, &cfg.voice, spec.seed)?;
            let fused = utterance_fused_features(&utt)?;
            let chain = transcript_states(&cfg.lexicon, &spec.words)?;
            Ok((fused.mapv(|v| v as f32), chain))
        });
    let mut fused: Vec<Array2<f32>> = Vec::with_capacity(n_traincv);
    let mut chains: Vec<Vec<usize>> = Vec::with_capacity(n_traincv);
    for f in feats {
        let (m, c) = f?;
        fused.push(m);
        chains.push(c);
    }
    log::info!(
        "features: {} train+cv utterances in {:.1}s",
        n_traincv,
        t_start.elapsed().as_secs_f64()
    );

    // Per-modality bootstrap on the base feature columns.
    let phones: Vec<String> =
        (0..cfg.lexicon.phone_count()).map(|i| cfg.lexicon.phone_name(i).to_string()).collect();
    let t_gmm = Instant::now();
    let acoustic = bootstrap_modality(
        phones.clone(),
        NUM_MELS,
        n_traincv,
        |u| (fused[u].slice(s![.., ..NUM_MELS]).mapv(|v| v as f64), chains[u].clone()),
        &traincv_ids,
        &cfg.gmm,
        Modality::Acoustic,
    )?;
    let visual = bootstrap_modality(
        phones,
        fused[0].ncols() - NUM_MELS,
        n_traincv,
        |u| (fused[u].slice(s![.., NUM_MELS..]).mapv(|v| v as f64), chains[u].clone()),
        &traincv_ids,
        &cfg.gmm,
        Modality::Visual,
    )?;
    log::info!("bootstrap: both modalities in {:.1}s", t_gmm.elapsed().as_secs_f64());

    let num_states = acoustic.model.num_states();
    let priors = state_priors(&acoustic.alignments[..n_train.max(1)], num_states)?;
    let graph = compile_graph(&cfg.grammar, &cfg.lexicon, &acoustic.model)?;

    // Datasets: move the fused matrices into the train and cv stores.
    let mut train_ds = FrameDataset::new();
    let mut cv_ds = FrameDataset::new();
    for (pos, matrix) in fused.into_iter().enumerate() {
        let target = if pos < n_train { &mut train_ds } else { &mut cv_ds };
        target.push_utterance(
            matrix,
            &acoustic.alignments[pos].labels,
            &visual.alignments[pos].labels,
        )?;
    }

    // Test media: clean waveforms and clean fused features. Video frames
    // are dropped as soon as their features exist.
    struct TestUtt {
        id: String,
        words: Vec<String>,
        waveform: crate::features::Waveform,
    }
    let test_prep: Vec<Result<(TestUtt, Array2<f32>)>> =
        parallel::map_slice(&test_idx, |&i| {
            let spec = &specs[i];
            let utt =
                synth_utterance(&spec.id, &spec.words, &cfg.lexicon, &cfg.voice, spec.seed)?;
            let fused = utterance_fused_features(&utt)?.mapv(|v| v as f32);
            Ok((
                TestUtt { id: utt.id, words: utt.words, waveform: utt.waveform },
                fused,
            ))
        });
    let mut test_utts = Vec::with_capacity(test_idx.len());
    let mut test_clean_fused = Vec::with_capacity(test_idx.len());
    for t in test_prep {
        let (u, f) = t?;
        test_utts.push(u);
        test_clean_fused.push(f);
    }

    // Noisy fused features per SNR, shared across models.
    let t_noise = Instant::now();
    let mut noisy_fused: Vec<Vec<Array2<f32>>> = Vec::with_capacity(cfg.snrs_db.len());
    for &snr in &cfg.snrs_db {
        let per_utt: Vec<Result<Array2<f32>>> = parallel::map_range(test_utts.len(), |u| {
            let utt = &test_utts[u];
            let babble = synth_babble(
                cfg.babble_sources,
                utt.waveform.len(),
                &cfg.grammar,
                &cfg.lexicon,
                &cfg.voice,
                derive_seed(cfg.seed, &format!("babble-{}", utt.id)),
            )?;
            let noisy = mix_at_snr(&utt.waveform, &babble, snr)?;
            let audio = mean_variance_normalize(&compute_filterbank(&noisy)?)?;
            let visual_block =
                test_clean_fused[u].slice(s![.., NUM_MELS..]).mapv(|v| v as f64);
            Ok(fuse(&audio, &visual_block)?.mapv(|v| v as f32))
        });
        let mut rows = Vec::with_capacity(test_utts.len());
        for r in per_utt {
            rows.push(r?);
        }
        noisy_fused.push(rows);
    }
    log::info!("test noise conditions in {:.1}s", t_noise.elapsed().as_secs_f64());

    // Grid rows in published-table order.
    let mut grid: Vec<(String, String, Option<usize>, Variant)> = Vec::new();
    for (si, &snr) in cfg.snrs_db.iter().enumerate() {
        grid.push((snr_label(snr), "OFF".into(), Some(si), Variant::AudioOnly));
        grid.push((snr_label(snr), "ON".into(), Some(si), Variant::AudioVisual));
    }
    grid.push(("clean".into(), "OFF".into(), None, Variant::AudioOnly));
    grid.push(("clean".into(), "ON".into(), None, Variant::AudioVisual));
    grid.push(("OFF".into(), "ON".into(), None, Variant::VideoOnly));

    let dims = NetDims::new(
        crate::features::SPLICED_DIM,
        cfg.train.hidden_dim,
        cfg.train.hidden_layers,
        num_states,
        visual.model.num_states(),
    );

    let mut results = Vec::new();
    let mut training = BTreeMap::new();
    let mut networks = BTreeMap::new();
    for model_spec in &cfg.models {
        let t_model = Instant::now();
        let train_cfg = TrainConfig { lambda: model_spec.lambda, ..cfg.train.clone() };
        let (net, records) = train_network(&train_ds, &cv_ds, &dims, &train_cfg)?;
        log::info!(
            "model {}: trained {} epochs in {:.1}s",
            model_spec.name,
            records.len(),
            t_model.elapsed().as_secs_f64()
        );
        training.insert(model_spec.name.clone(), records);

        for (snr, video, snr_idx, variant) in &grid {
            let cell_wers: Vec<Result<WerResult>> =
                parallel::map_range(test_utts.len(), |u| {
                    let fused_f32 = match snr_idx {
                        Some(si) => &noisy_fused[*si][u],
                        None => &test_clean_fused[u],
                    };
                    let fused = fused_f32.mapv(|v| v as f64);
                    let hyp = decode_utterance(
                        &net,
                        &graph,
                        priors.view(),
                        &fused,
                        *variant,
                        cfg.acoustic_scale,
                    )?;
                    wer(&test_utts[u].words, &hyp.words)
                });
            let mut parts = Vec::with_capacity(test_utts.len());
            for w in cell_wers {
                parts.push(w.map_err(|e| {
                    Error::Invalid(format!(
                        "cell ({snr}, {video}, {}): {e}",
                        model_spec.name
                    ))
                })?);
            }
            let pooled = WerResult::pool(parts.iter());
            results.push(CellResult {
                snr: snr.clone(),
                video: video.clone(),
                model: model_spec.name.clone(),
                wer_pct: pooled.wer_pct,
                substitutions: pooled.substitutions,
                deletions: pooled.deletions,
                insertions: pooled.insertions,
                ref_len: pooled.ref_len,
            });
        }
        networks.insert(model_spec.name.clone(), net);
    }
    log::info!("experiment done in {:.1}s", t_start.elapsed().as_secs_f64());

    Ok(ExperimentOutput { results: ResultsTable { cells: results }, training, networks })
}
