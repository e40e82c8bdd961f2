//! Stage implementations over the on-disk work tree:
//! `work/{corpus,gmm,align,dnn,decode,results}`.
//!
//! Every stage runs through the manifest: it is skipped when its
//! fingerprint and outputs are intact, and `--force` reruns it. Stages
//! read upstream artifacts only from disk, so a work tree survives
//! interruption and resumes where it stopped.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use ndarray::{s, Array2};

use mtlavsr_core::decoder::{compile_graph, decode_utterance};
use mtlavsr_core::evalharness::{
    bootstrap_modality, fused_features_from_media, mean_results, snr_label,
    trend_check, CellResult, ModelSpec, ResultsTable,
};
use mtlavsr_core::features::NUM_MELS;
use mtlavsr_core::features::splice;
use mtlavsr_core::gmmhmm::{
    forced_align, state_priors, transcript_states, Alignment, Modality,
};
use mtlavsr_core::io::{
    read_alignments, read_checkpoint, read_hmm, read_hypotheses, read_lda, read_manifest,
    read_priors, read_video, read_wav, write_alignments, write_checkpoint, write_hmm,
    write_hypotheses, write_lda, write_manifest, write_priors, write_text, write_training_log,
    write_video, write_wav, ManifestEntry,
};
use mtlavsr_core::mtlnet::{train_network, FrameDataset, NetDims, Variant};
use mtlavsr_core::parallel;
use mtlavsr_core::synthdata::{
    build_corpus, derive_seed, mix_at_snr, synth_babble, synth_utterance,
};
use mtlavsr_core::evalharness::trend::report_text;

use crate::config::RunConfig;
use crate::manifest::{fingerprint, sha256_hex, Manifest};

pub struct StageCtx {
    pub cfg: RunConfig,
    pub work: PathBuf,
    pub force: bool,
}

impl StageCtx {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        let work = cfg.work_dir();
        Self { cfg, work, force }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.work.join(name)
    }

    fn config_slice(&self, sections: &[&str]) -> String {
        // Fingerprint input: the canonical text of the named sections.
        let full = self.cfg.canonical_toml();
        let mut out = String::new();
        let mut keep = false;
        for line in full.lines() {
            if line.starts_with('[') {
                keep = sections.iter().any(|s| line == format!("[{s}]"));
            }
            if keep {
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }
}

/// Runs `body` unless the manifest says the stage is fresh. Returns true
/// when the stage actually executed.
fn run_stage(
    ctx: &StageCtx,
    stage: &str,
    fp: String,
    body: impl FnOnce() -> anyhow::Result<Vec<PathBuf>>,
) -> anyhow::Result<bool> {
    let mut manifest = Manifest::load(&ctx.work)?;
    if !ctx.force && manifest.is_fresh(&ctx.work, stage, &fp) {
        log::info!("stage {stage}: up to date, skipping");
        return Ok(false);
    }
    let t0 = Instant::now();
    let outputs = body().with_context(|| format!("stage '{stage}' failed"))?;
    let wall = t0.elapsed().as_secs_f64();
    manifest.record(stage, fp, &ctx.work, &outputs, wall)?;
    manifest.save(&ctx.work)?;
    let record = &manifest.stages[stage];
    log::info!("stage {stage}: done in {wall:.1}s");
    for (path, hash) in &record.outputs {
        log::info!("  artifact {path} sha256={}", &hash[..16]);
    }
    Ok(true)
}

fn upstream_outputs<'m>(
    manifest: &'m Manifest,
    stage: &str,
    needed_by: &str,
) -> anyhow::Result<&'m BTreeMap<String, String>> {
    manifest.stage_outputs(stage).ok_or_else(|| {
        anyhow::anyhow!("missing artifacts from stage '{stage}'; run it before '{needed_by}'")
    })
}

// --- corpus loading helpers ---

struct Corpus {
    entries: Vec<ManifestEntry>,
    train: Vec<String>,
    cv: Vec<String>,
    test: Vec<String>,
}

impl Corpus {
    fn entry(&self, id: &str) -> anyhow::Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.utt_id == id)
            .ok_or_else(|| anyhow::anyhow!("utterance '{id}' missing from corpus manifest"))
    }

    fn traincv_ids(&self) -> Vec<String> {
        self.train.iter().chain(&self.cv).cloned().collect()
    }
}

fn read_corpus(ctx: &StageCtx, needed_by: &str) -> anyhow::Result<Corpus> {
    let dir = ctx.dir("corpus");
    let manifest_path = dir.join("corpus.tsv");
    let split_path = dir.join("split.tsv");
    if !manifest_path.exists() || !split_path.exists() {
        bail!("missing artifacts from stage 'synth'; run it before '{needed_by}'");
    }
    let entries = read_manifest(&manifest_path)?;
    let mut train = Vec::new();
    let mut cv = Vec::new();
    let mut test = Vec::new();
    for (ln, line) in std::fs::read_to_string(&split_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, set) = line
            .split_once('\t')
            .ok_or_else(|| anyhow::anyhow!("split.tsv line {}: expected two fields", ln + 1))?;
        match set {
            "train" => train.push(id.to_string()),
            "cv" => cv.push(id.to_string()),
            "test" => test.push(id.to_string()),
            other => bail!("split.tsv line {}: unknown set '{other}'", ln + 1),
        }
    }
    Ok(Corpus { entries, train, cv, test })
}

/// Reads media from disk and recomputes fused features for the given ids.
fn load_fused(ctx: &StageCtx, corpus: &Corpus, ids: &[String]) -> anyhow::Result<Vec<Array2<f32>>> {
    let entries: anyhow::Result<Vec<&ManifestEntry>> =
        ids.iter().map(|id| corpus.entry(id)).collect();
    let entries = entries?;
    let results: Vec<anyhow::Result<Array2<f32>>> = parallel::map_slice(&entries, |e| {
        let wav = read_wav(&ctx.work.join(&e.wav_path))?;
        let video = read_video(&ctx.work.join(&e.video_path))?;
        Ok(fused_features_from_media(&wav, &video)?.mapv(|v| v as f32))
    });
    results.into_iter().collect()
}

// --- synth ---

pub fn cmd_synth(ctx: &StageCtx) -> anyhow::Result<()> {
    let fp = fingerprint(&ctx.config_slice(&["corpus"]), &[]);
    run_stage(ctx, "synth", fp, || {
        let grammar = ctx.cfg.grammar()?;
        let lexicon = ctx.cfg.lexicon()?;
        lexicon.check_covers(&grammar)?;
        let voice = ctx.cfg.voice();
        let dir = ctx.dir("corpus");
        std::fs::create_dir_all(dir.join("media"))?;
        let (specs, split) = build_corpus(&grammar, ctx.cfg.corpus.size, ctx.cfg.corpus.seed)?;

        let rows: Vec<anyhow::Result<(ManifestEntry, String)>> =
            parallel::map_slice(&specs, |spec| {
                let utt = synth_utterance(&spec.id, &spec.words, &lexicon, &voice, spec.seed)?;
                let wav_rel = format!("corpus/media/{}.wav", spec.id);
                let vid_rel = format!("corpus/media/{}.vid", spec.id);
                write_wav(&ctx.work.join(&wav_rel), &utt.waveform)?;
                write_video(&ctx.work.join(&vid_rel), &utt.video)?;
                let wav_hash = sha256_hex(&std::fs::read(ctx.work.join(&wav_rel))?);
                let vid_hash = sha256_hex(&std::fs::read(ctx.work.join(&vid_rel))?);
                Ok((
                    ManifestEntry {
                        utt_id: spec.id.clone(),
                        wav_path: wav_rel,
                        video_path: vid_rel,
                        words: spec.words.clone(),
                    },
                    format!("{} {} {}", spec.id, wav_hash, vid_hash),
                ))
            });
        let mut entries = Vec::with_capacity(specs.len());
        let mut media_lines = Vec::with_capacity(specs.len());
        for r in rows {
            let (e, line) = r?;
            entries.push(e);
            media_lines.push(line);
        }
        write_manifest(&dir.join("corpus.tsv"), &entries)?;
        let mut split_text = String::new();
        for (ids, set) in [(&split.train, "train"), (&split.cv, "cv"), (&split.test, "test")] {
            for id in ids {
                split_text.push_str(&format!("{id}\t{set}\n"));
            }
        }
        write_text(&dir.join("split.tsv"), &split_text)?;
        write_text(&dir.join("media.sha256"), &(media_lines.join("\n") + "\n"))?;
        Ok(vec![
            dir.join("corpus.tsv"),
            dir.join("split.tsv"),
            dir.join("media.sha256"),
        ])
    })?;
    Ok(())
}

// --- train-gmm ---

pub fn cmd_train_gmm(ctx: &StageCtx) -> anyhow::Result<()> {
    let manifest = Manifest::load(&ctx.work)?;
    let synth_out = upstream_outputs(&manifest, "synth", "train-gmm")?;
    let fp = fingerprint(&ctx.config_slice(&["corpus", "gmmhmm"]), &[synth_out]);
    run_stage(ctx, "train-gmm", fp, || {
        let corpus = read_corpus(ctx, "train-gmm")?;
        let lexicon = ctx.cfg.lexicon()?;
        let ids = corpus.traincv_ids();
        let fused = load_fused(ctx, &corpus, &ids)?;
        let chains: anyhow::Result<Vec<Vec<usize>>> = ids
            .iter()
            .map(|id| Ok(transcript_states(&lexicon, &corpus.entry(id)?.words)?))
            .collect();
        let chains = chains?;
        let phones: Vec<String> =
            (0..lexicon.phone_count()).map(|i| lexicon.phone_name(i).to_string()).collect();
        let gmm_cfg = ctx.cfg.gmm_config();
        let dir = ctx.dir("gmm");
        std::fs::create_dir_all(&dir)?;

        let acoustic = bootstrap_modality(
            phones.clone(),
            NUM_MELS,
            ids.len(),
            |u| (fused[u].slice(s![.., ..NUM_MELS]).mapv(|v| v as f64), chains[u].clone()),
            &ids,
            &gmm_cfg,
            Modality::Acoustic,
        )?;
        let visual = bootstrap_modality(
            phones,
            fused[0].ncols() - NUM_MELS,
            ids.len(),
            |u| (fused[u].slice(s![.., NUM_MELS..]).mapv(|v| v as f64), chains[u].clone()),
            &ids,
            &gmm_cfg,
            Modality::Visual,
        )?;
        write_hmm(&dir.join("acoustic.hmm"), &acoustic.model)?;
        write_lda(&dir.join("acoustic.lda"), &acoustic.lda)?;
        write_hmm(&dir.join("visual.hmm"), &visual.model)?;
        write_lda(&dir.join("visual.lda"), &visual.lda)?;
        Ok(vec![
            dir.join("acoustic.hmm"),
            dir.join("acoustic.lda"),
            dir.join("visual.hmm"),
            dir.join("visual.lda"),
        ])
    })?;
    Ok(())
}

// --- align ---

pub fn cmd_align(ctx: &StageCtx) -> anyhow::Result<()> {
    let manifest = Manifest::load(&ctx.work)?;
    let synth_out = upstream_outputs(&manifest, "synth", "align")?;
    let gmm_out = upstream_outputs(&manifest, "train-gmm", "align")?;
    let fp = fingerprint(&ctx.config_slice(&["corpus", "gmmhmm"]), &[synth_out, gmm_out]);
    run_stage(ctx, "align", fp, || {
        let corpus = read_corpus(ctx, "align")?;
        let lexicon = ctx.cfg.lexicon()?;
        let ids = corpus.traincv_ids();
        let fused = load_fused(ctx, &corpus, &ids)?;
        let chains: anyhow::Result<Vec<Vec<usize>>> = ids
            .iter()
            .map(|id| Ok(transcript_states(&lexicon, &corpus.entry(id)?.words)?))
            .collect();
        let chains = chains?;
        let gmm_cfg = ctx.cfg.gmm_config();
        let gmm_dir = ctx.dir("gmm");
        let dir = ctx.dir("align");
        std::fs::create_dir_all(&dir)?;

        let mut outputs = Vec::new();
        let mut acoustic_alignments = Vec::new();
        for (stream, modality) in [("acoustic", Modality::Acoustic), ("visual", Modality::Visual)]
        {
            let model = read_hmm(&gmm_dir.join(format!("{stream}.hmm")))?;
            let lda = read_lda(&gmm_dir.join(format!("{stream}.lda")))?;
            let cols = match modality {
                Modality::Acoustic => s![.., ..NUM_MELS],
                Modality::Visual => s![.., NUM_MELS..],
            };
            let aligned: Vec<anyhow::Result<Alignment>> =
                parallel::map_range(ids.len(), |u| {
                    let base = fused[u].slice(cols).mapv(|v| v as f64);
                    let projected = lda.apply(
                        splice(&base, gmm_cfg.lda_context, gmm_cfg.lda_context).view(),
                    );
                    let (a, _) =
                        forced_align(&model, &projected, &chains[u], &ids[u], modality)?;
                    Ok(a)
                });
            let aligned: anyhow::Result<Vec<Alignment>> = aligned.into_iter().collect();
            let aligned = aligned?;
            let path = dir.join(format!("{stream}.ali"));
            write_alignments(&path, &aligned)?;
            outputs.push(path);
            if modality == Modality::Acoustic {
                acoustic_alignments = aligned;
            }
        }
        let n_train = corpus.train.len();
        let model = read_hmm(&gmm_dir.join("acoustic.hmm"))?;
        let priors = state_priors(&acoustic_alignments[..n_train], model.num_states())?;
        let priors_path = dir.join("priors.txt");
        write_priors(&priors_path, &priors)?;
        outputs.push(priors_path);
        Ok(outputs)
    })?;
    Ok(())
}

// --- train-dnn ---

pub fn cmd_train_dnn(ctx: &StageCtx, models: &[ModelSpec]) -> anyhow::Result<()> {
    let manifest = Manifest::load(&ctx.work)?;
    let synth_out = upstream_outputs(&manifest, "synth", "train-dnn")?;
    let align_out = upstream_outputs(&manifest, "align", "train-dnn")?;

    // Check freshness of every requested model before paying for data prep.
    let mut stale = Vec::new();
    for m in models {
        let fp = fingerprint(
            &format!("{}\nmodel={} lambda={}", ctx.config_slice(&["corpus", "dnn"]), m.name, m.lambda),
            &[synth_out, align_out],
        );
        let manifest = Manifest::load(&ctx.work)?;
        if ctx.force || !manifest.is_fresh(&ctx.work, &format!("train-dnn:{}", m.name), &fp) {
            stale.push((m.clone(), fp));
        } else {
            log::info!("stage train-dnn:{}: up to date, skipping", m.name);
        }
    }
    if stale.is_empty() {
        return Ok(());
    }

    let corpus = read_corpus(ctx, "train-dnn")?;
    let align_dir = ctx.dir("align");
    let acoustic = read_alignments(&align_dir.join("acoustic.ali"), Modality::Acoustic)?;
    let visual = read_alignments(&align_dir.join("visual.ali"), Modality::Visual)?;
    let by_id = |alignments: &[Alignment], id: &str| -> anyhow::Result<Vec<usize>> {
        alignments
            .iter()
            .find(|a| a.utt_id == id)
            .map(|a| a.labels.clone())
            .ok_or_else(|| anyhow::anyhow!("no alignment for utterance '{id}'"))
    };

    let ids = corpus.traincv_ids();
    let fused = load_fused(ctx, &corpus, &ids)?;
    let n_train = corpus.train.len();
    let mut train_ds = FrameDataset::new();
    let mut cv_ds = FrameDataset::new();
    for (pos, matrix) in fused.into_iter().enumerate() {
        let id = &ids[pos];
        let target = if pos < n_train { &mut train_ds } else { &mut cv_ds };
        target.push_utterance(matrix, &by_id(&acoustic, id)?, &by_id(&visual, id)?)?;
    }

    let gmm_dir = ctx.dir("gmm");
    let k_a = read_hmm(&gmm_dir.join("acoustic.hmm"))?.num_states();
    let k_v = read_hmm(&gmm_dir.join("visual.hmm"))?.num_states();
    let dims = NetDims::new(
        mtlavsr_core::features::SPLICED_DIM,
        ctx.cfg.dnn.hidden_dim,
        ctx.cfg.dnn.hidden_layers,
        k_a,
        k_v,
    );
    let dir = ctx.dir("dnn");
    std::fs::create_dir_all(&dir)?;

    for (model, fp) in stale {
        let stage = format!("train-dnn:{}", model.name);
        run_stage(ctx, &stage, fp, || {
            let train_cfg = ctx.cfg.train_config(model.lambda);
            let (net, records) = train_network(&train_ds, &cv_ds, &dims, &train_cfg)?;
            let net_path = dir.join(format!("{}.net", model.name));
            let log_path = dir.join(format!("{}.log", model.name));
            write_checkpoint(&net_path, &net)?;
            write_training_log(&log_path, &records)?;
            Ok(vec![net_path, log_path])
        })?;
    }
    Ok(())
}

// --- decode ---

/// The grid rows in published-table order:
/// `(snr label, video label, snr, test variant)`.
fn grid_rows(snrs: &[f64]) -> Vec<(String, String, Option<f64>, Variant)> {
    let mut rows = Vec::new();
    for &snr in snrs {
        rows.push((snr_label(snr), "OFF".into(), Some(snr), Variant::AudioOnly));
        rows.push((snr_label(snr), "ON".into(), Some(snr), Variant::AudioVisual));
    }
    rows.push(("clean".into(), "OFF".into(), None, Variant::AudioOnly));
    rows.push(("clean".into(), "ON".into(), None, Variant::AudioVisual));
    rows.push(("OFF".into(), "ON".into(), None, Variant::VideoOnly));
    rows
}

pub fn cmd_decode(ctx: &StageCtx, only_model: Option<&str>) -> anyhow::Result<()> {
    let manifest = Manifest::load(&ctx.work)?;
    let synth_out = upstream_outputs(&manifest, "synth", "decode")?;
    let gmm_out = upstream_outputs(&manifest, "train-gmm", "decode")?;
    let align_out = upstream_outputs(&manifest, "align", "decode")?;
    let models: Vec<ModelSpec> = ctx
        .cfg
        .models()
        .into_iter()
        .filter(|m| only_model.map_or(true, |n| m.name == n))
        .collect();
    if models.is_empty() {
        bail!("no model matches '{}'", only_model.unwrap_or("<none>"));
    }
    let mut dnn_outs = Vec::new();
    for m in &models {
        dnn_outs.push(
            upstream_outputs(&manifest, &format!("train-dnn:{}", m.name), "decode")?.clone(),
        );
    }
    let upstream: Vec<&BTreeMap<String, String>> = std::iter::once(synth_out)
        .chain(std::iter::once(gmm_out))
        .chain(std::iter::once(align_out))
        .chain(dnn_outs.iter())
        .collect();
    let fp = fingerprint(
        &format!(
            "{}\nmodels={:?}",
            ctx.config_slice(&["corpus", "decode", "experiment"]),
            models.iter().map(|m| m.name.clone()).collect::<Vec<_>>()
        ),
        &upstream,
    );
    run_stage(ctx, "decode", fp, || {
        let corpus = read_corpus(ctx, "decode")?;
        let grammar = ctx.cfg.grammar()?;
        let lexicon = ctx.cfg.lexicon()?;
        let voice = ctx.cfg.voice();
        let gmm_dir = ctx.dir("gmm");
        let acoustic_model = read_hmm(&gmm_dir.join("acoustic.hmm"))?;
        let graph = compile_graph(&grammar, &lexicon, &acoustic_model)?;
        let priors = read_priors(&ctx.dir("align").join("priors.txt"))?;

        // Clean test media and features.
        let test_entries: anyhow::Result<Vec<&ManifestEntry>> =
            corpus.test.iter().map(|id| corpus.entry(id)).collect();
        let test_entries = test_entries?;
        let prep: Vec<anyhow::Result<(mtlavsr_core::features::Waveform, Array2<f32>)>> =
            parallel::map_slice(&test_entries, |e| {
                let wav = read_wav(&ctx.work.join(&e.wav_path))?;
                let video = read_video(&ctx.work.join(&e.video_path))?;
                let fused = fused_features_from_media(&wav, &video)?.mapv(|v| v as f32);
                Ok((wav, fused))
            });
        let mut clean_wavs = Vec::new();
        let mut clean_fused = Vec::new();
        for p in prep {
            let (w, f) = p?;
            clean_wavs.push(w);
            clean_fused.push(f);
        }

        // Noisy fused features per SNR (shared across models).
        let mut noisy_fused: BTreeMap<String, Vec<Array2<f32>>> = BTreeMap::new();
        for &snr in &ctx.cfg.experiment.snrs_db {
            let per_utt: Vec<anyhow::Result<Array2<f32>>> =
                parallel::map_range(test_entries.len(), |u| {
                    let babble = synth_babble(
                        ctx.cfg.experiment.babble_sources,
                        clean_wavs[u].len(),
                        &grammar,
                        &lexicon,
                        &voice,
                        derive_seed(
                            ctx.cfg.corpus.seed,
                            &format!("babble-{}", test_entries[u].utt_id),
                        ),
                    )?;
                    let noisy = mix_at_snr(&clean_wavs[u], &babble, snr)?;
                    let audio = mtlavsr_core::features::mean_variance_normalize(
                        &mtlavsr_core::features::compute_filterbank(&noisy)?,
                    )?;
                    let visual = clean_fused[u].slice(s![.., NUM_MELS..]).mapv(|v| v as f64);
                    Ok(mtlavsr_core::features::fuse(&audio, &visual)?.mapv(|v| v as f32))
                });
            let collected: anyhow::Result<Vec<Array2<f32>>> = per_utt.into_iter().collect();
            noisy_fused.insert(snr_label(snr), collected?);
        }

        let dir = ctx.dir("decode");
        let mut outputs = Vec::new();
        for model in &models {
            let net = read_checkpoint(&ctx.dir("dnn").join(format!("{}.net", model.name)))?;
            let model_dir = dir.join(&model.name);
            std::fs::create_dir_all(&model_dir)?;
            for (snr, video, snr_db, variant) in grid_rows(&ctx.cfg.experiment.snrs_db) {
                let hyps: Vec<anyhow::Result<(String, Vec<String>)>> =
                    parallel::map_range(test_entries.len(), |u| {
                        let fused_f32 = match snr_db {
                            Some(_) => &noisy_fused[&snr][u],
                            None => &clean_fused[u],
                        };
                        let fused = fused_f32.mapv(|v| v as f64);
                        let hyp = decode_utterance(
                            &net,
                            &graph,
                            priors.view(),
                            &fused,
                            variant,
                            ctx.cfg.decode.acoustic_scale,
                        )?;
                        Ok((test_entries[u].utt_id.clone(), hyp.words))
                    });
                let hyps: anyhow::Result<Vec<(String, Vec<String>)>> =
                    hyps.into_iter().collect();
                let path = model_dir.join(format!("{snr}_{video}.hyp"));
                write_hypotheses(&path, &hyps?)?;
                outputs.push(path);
            }
        }
        Ok(outputs)
    })?;
    Ok(())
}

// --- score ---

pub fn cmd_score(ctx: &StageCtx) -> anyhow::Result<()> {
    let manifest = Manifest::load(&ctx.work)?;
    let synth_out = upstream_outputs(&manifest, "synth", "score")?;
    let decode_out = upstream_outputs(&manifest, "decode", "score")?;
    let fp = fingerprint(&ctx.config_slice(&["corpus", "experiment"]), &[synth_out, decode_out]);
    run_stage(ctx, "score", fp, || {
        let corpus = read_corpus(ctx, "score")?;
        let table = score_from_artifacts(ctx, &corpus)?;
        let dir = ctx.dir("results");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("results.csv");
        write_text(&path, &table.to_csv())?;
        Ok(vec![path])
    })?;
    Ok(())
}

fn score_from_artifacts(ctx: &StageCtx, corpus: &Corpus) -> anyhow::Result<ResultsTable> {
    let mut cells = Vec::new();
    for model in ctx.cfg.models() {
        let model_dir = ctx.dir("decode").join(&model.name);
        for (snr, video, _, _) in grid_rows(&ctx.cfg.experiment.snrs_db) {
            let path = model_dir.join(format!("{snr}_{video}.hyp"));
            if !path.exists() {
                bail!("missing artifacts from stage 'decode'; run it before 'score'");
            }
            let hyps = read_hypotheses(&path)?;
            let mut parts = Vec::new();
            for (utt_id, words) in &hyps {
                let reference = &corpus.entry(utt_id)?.words;
                parts.push(mtlavsr_core::evalharness::wer(reference, words)?);
            }
            let pooled = mtlavsr_core::evalharness::WerResult::pool(parts.iter());
            cells.push(CellResult {
                snr: snr.clone(),
                video: video.clone(),
                model: model.name.clone(),
                wer_pct: pooled.wer_pct,
                substitutions: pooled.substitutions,
                deletions: pooled.deletions,
                insertions: pooled.insertions,
                ref_len: pooled.ref_len,
            });
        }
    }
    Ok(ResultsTable { cells })
}

// --- experiment ---

pub fn cmd_experiment(ctx: &StageCtx, seeds: u64) -> anyhow::Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let results_dir = ctx.dir("results");
    std::fs::create_dir_all(&results_dir)?;

    let mut tables = Vec::new();
    for k in 0..seeds {
        let seed = ctx.cfg.corpus.seed + k;
        let sub_ctx = if seeds == 1 {
            StageCtx { cfg: ctx.cfg.clone(), work: ctx.work.clone(), force: ctx.force }
        } else {
            let mut cfg = ctx.cfg.clone();
            cfg.corpus.seed = seed;
            let work = ctx.work.join("seeds").join(seed.to_string());
            cfg.paths.work_dir = work.to_string_lossy().to_string();
            StageCtx { cfg, work, force: ctx.force }
        };
        log::info!("experiment: seed {seed}");
        run_pipeline(&sub_ctx)?;
        let table = ResultsTable::parse_csv(&std::fs::read_to_string(
            sub_ctx.dir("results").join("results.csv"),
        )?)?;
        if seeds > 1 {
            write_text(
                &results_dir.join(format!("results_seed{seed}.csv")),
                &table.to_csv(),
            )?;
        }
        tables.push(table);
    }

    let final_table = if seeds == 1 {
        tables.pop().unwrap()
    } else {
        let mean = mean_results(&tables)?;
        write_text(&results_dir.join("results_mean.csv"), &mean.to_csv())?;
        mean
    };

    let rules = configured_rules(&ctx.cfg);
    let outcomes = trend_check(&final_table, &rules)?;
    let report = report_text(&outcomes);
    write_text(&results_dir.join("trend.txt"), &report)?;
    print!("{report}");
    Ok(())
}

/// The default rule set adapted to the configured grid: video gain at
/// the harshest SNR for every model, and the strongest auxiliary model
/// no worse than the baseline on the noisy (<= 0 dB, else all) rows.
fn configured_rules(cfg: &RunConfig) -> Vec<mtlavsr_core::evalharness::Rule> {
    use mtlavsr_core::evalharness::Rule;
    let mut rules = Vec::new();
    let harshest = cfg
        .experiment
        .snrs_db
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if harshest.is_finite() {
        for m in cfg.models() {
            rules.push(Rule::AvBeatsAudioOnly {
                snr: snr_label(harshest),
                model: m.name.clone(),
            });
        }
    }
    let better = cfg
        .models()
        .into_iter()
        .filter(|m| m.lambda > 0.0)
        .max_by(|a, b| a.lambda.total_cmp(&b.lambda));
    if let Some(better) = better {
        let mut noisy: Vec<f64> =
            cfg.experiment.snrs_db.iter().cloned().filter(|&s| s <= 0.0).collect();
        if noisy.is_empty() {
            noisy = cfg.experiment.snrs_db.clone();
        }
        let mut cells = Vec::new();
        for snr in noisy {
            cells.push((snr_label(snr), "OFF".to_string()));
            cells.push((snr_label(snr), "ON".to_string()));
        }
        if !cells.is_empty() {
            rules.push(Rule::ModelNoWorse {
                better: better.name,
                baseline: "stl".into(),
                cells,
            });
        }
    }
    rules
}

/// synth -> train-gmm -> align -> train-dnn -> decode -> score.
pub fn run_pipeline(ctx: &StageCtx) -> anyhow::Result<()> {
    cmd_synth(ctx)?;
    cmd_train_gmm(ctx)?;
    cmd_align(ctx)?;
    cmd_train_dnn(ctx, &ctx.cfg.models())?;
    cmd_decode(ctx, None)?;
    cmd_score(ctx)?;
    Ok(())
}
