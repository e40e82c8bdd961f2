//! Synthetic GRID-like audio-visual corpus.
//!
//! Utterances follow a fixed six-slot sentence grammar. Audio renders each
//! phone as a sum of three phone-specific "formant" sinusoids with a
//! raised-cosine envelope plus low-level noise; video renders a filled
//! mouth ellipse whose vertical aperture tracks the phone's viseme class
//! at 25 fps. Ground-truth phone boundaries tile the waveform exactly, so
//! every downstream stage can be checked against known timings.
//!
//! All randomness flows through per-utterance seeds derived from
//! `(master seed, utterance id)`; synthesis order never changes output.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::LogNormal;

use crate::error::{Error, Result};
use crate::features::{Waveform, VideoStream, SAMPLE_RATE, VIDEO_FPS, VIDEO_SIZE};

const GRAMMAR_DEFAULT: &str = include_str!("../data/grammar_default.txt");
const LEXICON_DEFAULT: &str = include_str!("../data/lexicon_default.txt");

/// Minimum phone length in samples (3 frame shifts; keeps every phone
/// alignable against its 3-state HMM).
const MIN_PHONE_SAMPLES: usize = 481;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent stream seed from a master seed and a tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()))
}

/// One position in the sentence frame and the words allowed there.
#[derive(Debug, Clone)]
pub struct Slot {
    pub name: String,
    pub words: Vec<String>,
}

/// Ordered word slots; every sentence draws one word per slot.
#[derive(Debug, Clone)]
pub struct Grammar {
    slots: Vec<Slot>,
}

impl Grammar {
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::Invalid("grammar has no slots".into()));
        }
        for slot in &slots {
            if slot.words.is_empty() {
                return Err(Error::Invalid(format!("slot '{}' is empty", slot.name)));
            }
            let unique: BTreeSet<_> = slot.words.iter().collect();
            if unique.len() != slot.words.len() {
                return Err(Error::Invalid(format!(
                    "slot '{}' has duplicate words",
                    slot.name
                )));
            }
        }
        Ok(Self { slots })
    }

    /// Parses the `slot <name> <word>...` text format.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut slots = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("slot") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::Parse {
                            path: origin.into(),
                            msg: format!("line {}: slot without a name", lineno + 1),
                        })?
                        .to_string();
                    let words: Vec<String> = parts.map(str::to_string).collect();
                    slots.push(Slot { name, words });
                }
                Some(other) => {
                    return Err(Error::Parse {
                        path: origin.into(),
                        msg: format!("line {}: unknown directive '{other}'", lineno + 1),
                    })
                }
                None => unreachable!(),
            }
        }
        Self::new(slots)
    }

    /// The built-in six-slot grammar.
    pub fn default_grid() -> Self {
        Self::parse(GRAMMAR_DEFAULT, "<builtin grammar>").expect("builtin grammar parses")
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// All words across all slots, de-duplicated, sorted.
    pub fn vocabulary(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self
            .slots
            .iter()
            .flat_map(|s| s.words.iter().map(String::as_str))
            .collect();
        set.into_iter().collect()
    }

    /// Whether a word sequence is one of the sentences this grammar accepts.
    pub fn accepts(&self, words: &[String]) -> bool {
        words.len() == self.slots.len()
            && words
                .iter()
                .zip(&self.slots)
                .all(|(w, s)| s.words.iter().any(|sw| sw == w))
    }
}

/// Pronunciation dictionary: phone inventory, per-phone viseme class, and
/// word-to-phone-sequence entries.
#[derive(Debug, Clone)]
pub struct Lexicon {
    phones: Vec<String>,
    visemes: Vec<u8>,
    entries: BTreeMap<String, Vec<usize>>,
}

impl Lexicon {
    /// Parses the `phone <name> <viseme>` / `word <name> <phone>...` format.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |lineno: usize, msg: String| Error::Parse {
            path: origin.into(),
            msg: format!("line {}: {msg}", lineno + 1),
        };
        let mut phones: Vec<String> = Vec::new();
        let mut visemes: Vec<u8> = Vec::new();
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[0] {
                "phone" => {
                    if parts.len() != 3 {
                        return Err(err(lineno, "expected `phone <name> <viseme>`".into()));
                    }
                    if phones.iter().any(|p| p == parts[1]) {
                        return Err(err(lineno, format!("duplicate phone '{}'", parts[1])));
                    }
                    let viseme: u8 = parts[2]
                        .parse()
                        .map_err(|_| err(lineno, format!("bad viseme id '{}'", parts[2])))?;
                    phones.push(parts[1].to_string());
                    visemes.push(viseme);
                }
                "word" => {
                    if parts.len() < 3 {
                        return Err(err(lineno, "expected `word <name> <phone>...`".into()));
                    }
                    let mut ids = Vec::with_capacity(parts.len() - 2);
                    for p in &parts[2..] {
                        let id = phones
                            .iter()
                            .position(|ph| ph == p)
                            .ok_or_else(|| err(lineno, format!("undefined phone '{p}'")))?;
                        ids.push(id);
                    }
                    entries.insert(parts[1].to_string(), ids);
                }
                other => return Err(err(lineno, format!("unknown directive '{other}'"))),
            }
        }
        if phones.is_empty() {
            return Err(Error::Parse {
                path: origin.into(),
                msg: "no phones defined".into(),
            });
        }
        Ok(Self { phones, visemes, entries })
    }

    /// The built-in inventory covering the default grammar.
    pub fn default_grid() -> Self {
        Self::parse(LEXICON_DEFAULT, "<builtin lexicon>").expect("builtin lexicon parses")
    }

    pub fn phone_count(&self) -> usize {
        self.phones.len()
    }

    pub fn phone_name(&self, id: usize) -> &str {
        &self.phones[id]
    }

    pub fn phone_id(&self, name: &str) -> Option<usize> {
        self.phones.iter().position(|p| p == name)
    }

    /// Viseme class of a phone.
    pub fn viseme(&self, phone: usize) -> u8 {
        self.visemes[phone]
    }

    pub fn viseme_count(&self) -> usize {
        self.visemes.iter().copied().max().unwrap_or(0) as usize + 1
    }

    pub fn pronunciation(&self, word: &str) -> Result<&[usize]> {
        self.entries
            .get(word)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Errors if any grammar word lacks a pronunciation.
    pub fn check_covers(&self, grammar: &Grammar) -> Result<()> {
        for slot in grammar.slots() {
            for w in &slot.words {
                self.pronunciation(w)?;
            }
        }
        Ok(())
    }
}

/// Ground-truth phone segment, sample-exact: `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhoneSegment {
    pub phone: usize,
    pub start: usize,
    pub end: usize,
}

/// One synthesized utterance with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub id: String,
    pub words: Vec<String>,
    pub waveform: Waveform,
    pub video: VideoStream,
    pub phone_timing: Vec<PhoneSegment>,
}

/// Knobs for the synthetic voice and camera.
#[derive(Debug, Clone)]
pub struct VoiceParams {
    /// Nominal utterance length, seconds.
    pub target_duration_s: f64,
    /// Uniform jitter applied to the target length, seconds.
    pub duration_jitter_s: f64,
    /// Default mean phone duration, seconds (log-normal draw).
    pub phone_mean_dur_s: f64,
    /// Log-space standard deviation of phone durations.
    pub phone_dur_sigma: f64,
    /// Per-phone mean duration overrides.
    pub phone_dur_means: BTreeMap<String, f64>,
    /// Per-phone formant overrides, Hz.
    pub formant_overrides: BTreeMap<String, [f64; 3]>,
    /// Additive white noise level on audio samples.
    pub noise_level: f64,
    /// Additive pixel noise level on video frames.
    pub video_noise: f64,
}

impl Default for VoiceParams {
    fn default() -> Self {
        Self {
            target_duration_s: 3.0,
            duration_jitter_s: 0.15,
            phone_mean_dur_s: 0.12,
            phone_dur_sigma: 0.25,
            phone_dur_means: BTreeMap::new(),
            formant_overrides: BTreeMap::new(),
            noise_level: 0.01,
            video_noise: 0.02,
        }
    }
}

/// Formant frequencies for a phone: configured override, or a fixed
/// injective mapping from the phone's inventory index.
pub fn phone_formants(lexicon: &Lexicon, phone: usize, voice: &VoiceParams) -> [f64; 3] {
    if let Some(f) = voice.formant_overrides.get(lexicon.phone_name(phone)) {
        return *f;
    }
    let i = phone as u64;
    [
        280.0 + 53.0 * ((i * 5 + 1) % 17) as f64,
        1000.0 + 97.0 * ((i * 7 + 2) % 19) as f64,
        2900.0 + 131.0 * ((i * 11 + 3) % 23) as f64,
    ]
}

/// Mouth aperture (vertical semi-axis, pixels) for a viseme class.
fn viseme_aperture(viseme: u8) -> f64 {
    4.0 + 1.7 * viseme as f64
}

/// Draws one word per slot, uniformly, in slot order.
pub fn sample_sentence(grammar: &Grammar, seed: u64) -> Vec<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    grammar
        .slots()
        .iter()
        .map(|slot| slot.words[rng.random_range(0..slot.words.len())].clone())
        .collect()
}

/// Renders one utterance: audio, video, and exact phone timing.
pub fn synth_utterance(
    id: &str,
    words: &[String],
    lexicon: &Lexicon,
    voice: &VoiceParams,
    seed: u64,
) -> Result<SynthUtterance> {
    let mut phone_seq = Vec::new();
    for w in words {
        phone_seq.extend_from_slice(lexicon.pronunciation(w)?);
    }
    if phone_seq.is_empty() {
        return Err(Error::Invalid("empty transcript".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Target length, then per-phone raw durations rescaled to tile it.
    let target_s = voice.target_duration_s
        + if voice.duration_jitter_s > 0.0 {
            rng.random_range(-voice.duration_jitter_s..=voice.duration_jitter_s)
        } else {
            0.0
        };
    let total = (target_s * SAMPLE_RATE as f64).round() as usize;
    if total < phone_seq.len() * MIN_PHONE_SAMPLES {
        return Err(Error::Invalid(format!(
            "target duration {target_s:.2}s too short for {} phones",
            phone_seq.len()
        )));
    }

    let mut raw = Vec::with_capacity(phone_seq.len());
    for &p in &phone_seq {
        let mean = *voice
            .phone_dur_means
            .get(lexicon.phone_name(p))
            .unwrap_or(&voice.phone_mean_dur_s);
        let dur = if voice.phone_dur_sigma > 0.0 {
            let mu = mean.ln() - voice.phone_dur_sigma * voice.phone_dur_sigma / 2.0;
            let dist = LogNormal::new(mu, voice.phone_dur_sigma)
                .map_err(|e| Error::Invalid(format!("bad duration distribution: {e}")))?;
            dist.sample(&mut rng)
        } else {
            mean
        };
        raw.push(dur.max(0.04));
    }
    let raw_total: f64 = raw.iter().sum();

    let n = phone_seq.len();
    let mut bounds = vec![0usize; n + 1];
    let mut acc = 0.0;
    for i in 0..n {
        acc += raw[i];
        bounds[i + 1] = ((acc / raw_total) * total as f64).round() as usize;
    }
    bounds[n] = total;
    for i in 1..=n {
        bounds[i] = bounds[i].max(bounds[i - 1] + MIN_PHONE_SAMPLES);
    }
    bounds[n] = total;
    for i in (1..n).rev() {
        bounds[i] = bounds[i].min(bounds[i + 1] - MIN_PHONE_SAMPLES);
    }
    debug_assert!((1..=n).all(|i| bounds[i] >= bounds[i - 1] + MIN_PHONE_SAMPLES));

    let phone_timing: Vec<PhoneSegment> = (0..n)
        .map(|i| PhoneSegment {
            phone: phone_seq[i],
            start: bounds[i],
            end: bounds[i + 1],
        })
        .collect();

    // Audio: per-phone sinusoid stack with a raised-cosine onset/offset.
    let mut samples = vec![0.0f64; total];
    let amps = [0.5, 0.3, 0.2];
    let ramp = 160usize;
    for seg in &phone_timing {
        let formants = phone_formants(lexicon, seg.phone, voice);
        let len = seg.end - seg.start;
        let edge = ramp.min(len / 2);
        let mut partials = [(0.0f64, 0.0f64, 0.0f64); 3];
        for (j, p) in partials.iter_mut().enumerate() {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = amps[j] * (1.0 + rng.random_range(-0.1..0.1));
            let omega = std::f64::consts::TAU * formants[j] / SAMPLE_RATE as f64;
            *p = (phase, amp, omega);
        }
        for t in 0..len {
            let env = if edge == 0 {
                1.0
            } else if t < edge {
                0.5 - 0.5 * (std::f64::consts::PI * t as f64 / edge as f64).cos()
            } else if t >= len - edge {
                0.5 - 0.5 * (std::f64::consts::PI * (len - 1 - t) as f64 / edge as f64).cos()
            } else {
                1.0
            };
            let mut v = 0.0;
            for &(phase, amp, omega) in &partials {
                v += amp * (phase + omega * t as f64).sin();
            }
            samples[seg.start + t] = env * v;
        }
    }
    if voice.noise_level > 0.0 {
        for s in samples.iter_mut() {
            *s += voice.noise_level * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    let waveform = Waveform::new(samples, SAMPLE_RATE)?;

    // Video: mouth ellipse, aperture = overlap-weighted viseme aperture
    // over each 40 ms frame window.
    let samples_per_frame = (SAMPLE_RATE as f64 / VIDEO_FPS) as usize;
    let n_frames = (total / samples_per_frame).max(2);
    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let w_start = f * samples_per_frame;
        let w_end = if f + 1 == n_frames {
            total
        } else {
            (f + 1) * samples_per_frame
        };
        let mut aperture = 0.0;
        let mut weight = 0.0;
        for seg in &phone_timing {
            let lo = seg.start.max(w_start);
            let hi = seg.end.min(w_end);
            if hi > lo {
                let w = (hi - lo) as f64;
                aperture += w * viseme_aperture(lexicon.viseme(seg.phone));
                weight += w;
            }
        }
        let aperture = aperture / weight.max(1.0);
        frames.push(render_mouth(aperture, voice.video_noise, &mut rng));
    }
    let video = VideoStream::new(frames, VIDEO_FPS)?;

    Ok(SynthUtterance {
        id: id.to_string(),
        words: words.to_vec(),
        waveform,
        video,
        phone_timing,
    })
}

fn render_mouth(aperture: f64, noise: f64, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let c = (VIDEO_SIZE as f64 - 1.0) / 2.0;
    let a = 20.0;
    let b = aperture.max(1.0);
    let mut frame = Array2::zeros((VIDEO_SIZE, VIDEO_SIZE));
    for r in 0..VIDEO_SIZE {
        for col in 0..VIDEO_SIZE {
            let dx = (col as f64 - c) / a;
            let dy = (r as f64 - c) / b;
            let d = dx * dx + dy * dy;
            let base = if d <= 0.85 {
                0.85
            } else if d >= 1.15 {
                0.12
            } else {
                0.85 - (d - 0.85) / 0.30 * 0.73
            };
            let v = if noise > 0.0 {
                base + noise * rng.sample::<f64, _>(rand_distr::StandardNormal)
            } else {
                base
            };
            frame[[r, col]] = v.clamp(0.0, 1.0);
        }
    }
    frame
}

/// Multi-talker babble: the sum of `n_sources` independent synthetic
/// utterances, looped/trimmed to `duration` samples, normalized to unit
/// RMS.
pub fn synth_babble(
    n_sources: usize,
    duration: usize,
    grammar: &Grammar,
    lexicon: &Lexicon,
    voice: &VoiceParams,
    seed: u64,
) -> Result<Waveform> {
    if n_sources == 0 {
        return Err(Error::Invalid("babble needs at least one source".into()));
    }
    if duration == 0 {
        return Err(Error::Invalid("babble duration is zero".into()));
    }
    let mut mix = vec![0.0f64; duration];
    for src in 0..n_sources {
        let src_seed = derive_seed(seed, &format!("babble-src-{src}"));
        let words = sample_sentence(grammar, derive_seed(src_seed, "sentence"));
        let utt = synth_utterance(
            &format!("babble-{src}"),
            &words,
            lexicon,
            voice,
            derive_seed(src_seed, "media"),
        )?;
        let s = utt.waveform.samples();
        for (i, m) in mix.iter_mut().enumerate() {
            *m += s[i % s.len()];
        }
    }
    let rms = (mix.iter().map(|v| v * v).sum::<f64>() / duration as f64).sqrt();
    if rms == 0.0 {
        return Err(Error::ZeroPower);
    }
    for v in mix.iter_mut() {
        *v /= rms;
    }
    Waveform::new(mix, SAMPLE_RATE)
}

/// Adds `noise` to `clean`, scaled so the clean-to-noise power ratio is
/// `snr_db`: `10*log10(P_clean / P_noise_scaled) = snr_db`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.len() != noise.len() {
        return Err(Error::Shape(format!(
            "mix: clean has {} samples, noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(Error::ZeroPower);
    }
    let p_noise = noise.power();
    if p_noise == 0.0 {
        return Err(Error::Invalid("noise signal has zero power".into()));
    }
    let scale = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(c, n)| c + scale * n)
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

/// SNR implied by a clean signal and the mixture built from it, dB.
pub fn measured_snr_db(clean: &Waveform, mixed: &Waveform) -> f64 {
    let p_clean = clean.power();
    let p_noise = clean
        .samples()
        .iter()
        .zip(mixed.samples())
        .map(|(c, m)| (m - c) * (m - c))
        .sum::<f64>()
        / clean.len() as f64;
    10.0 * (p_clean / p_noise).log10()
}

/// Corpus membership by utterance id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub cv: Vec<String>,
    pub test: Vec<String>,
}

/// Recipe for one utterance: everything needed to synthesize it lazily.
#[derive(Debug, Clone)]
pub struct UtteranceSpec {
    pub id: String,
    pub words: Vec<String>,
    pub seed: u64,
}

/// Sentence plans and a deterministic split for `size` utterances.
///
/// Test takes 10% of the corpus; cross-validation takes 10% of the
/// remaining train portion.
pub fn build_corpus(
    grammar: &Grammar,
    size: usize,
    seed: u64,
) -> Result<(Vec<UtteranceSpec>, CorpusSplit)> {
    if size < 10 {
        return Err(Error::Invalid(format!(
            "corpus size must be at least 10, got {size}"
        )));
    }
    let specs: Vec<UtteranceSpec> = (0..size)
        .map(|i| {
            let id = format!("utt{i:06}");
            let utt_seed = derive_seed(seed, &id);
            let words = sample_sentence(grammar, derive_seed(utt_seed, "sentence"));
            UtteranceSpec { id, words, seed: derive_seed(utt_seed, "media") }
        })
        .collect();

    let mut order: Vec<usize> = (0..size).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "split"));
    order.shuffle(&mut rng);

    let n_test = ((size as f64 * 0.10).round() as usize).max(1);
    let rest = size - n_test;
    let n_cv = ((rest as f64 * 0.10).round() as usize).max(1);

    let mut test: Vec<String> = order[..n_test].iter().map(|&i| specs[i].id.clone()).collect();
    let mut cv: Vec<String> = order[n_test..n_test + n_cv]
        .iter()
        .map(|&i| specs[i].id.clone())
        .collect();
    let mut train: Vec<String> = order[n_test + n_cv..]
        .iter()
        .map(|&i| specs[i].id.clone())
        .collect();
    test.sort();
    cv.sort();
    train.sort();

    Ok((specs, CorpusSplit { train, cv, test }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::compute_filterbank;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_lexicon_covers_default_grammar() {
        let g = Grammar::default_grid();
        let l = Lexicon::default_grid();
        assert_eq!(g.slots().len(), 6);
        l.check_covers(&g).unwrap();
        assert_eq!(g.vocabulary().len(), 51);
        assert_eq!(l.viseme_count(), 8);
    }

    #[test]
    fn sample_sentence_one_word_per_slot() {
        let g = Grammar::default_grid();
        let s = sample_sentence(&g, 42);
        assert_eq!(s.len(), 6);
        assert!(g.accepts(&s));
        assert_eq!(s, sample_sentence(&g, 42));
        assert_ne!(s, sample_sentence(&g, 43));
    }

    #[test]
    fn sample_sentence_singleton_slots() {
        let g = Grammar::new(vec![
            Slot { name: "a".into(), words: vec!["x".into()] },
            Slot { name: "b".into(), words: vec!["y".into()] },
        ])
        .unwrap();
        assert_eq!(sample_sentence(&g, 7), vec!["x".to_string(), "y".to_string()]);
    }

    #[test]
    fn utterance_timing_tiles_waveform() {
        let g = Grammar::default_grid();
        let l = Lexicon::default_grid();
        let words = sample_sentence(&g, 1);
        let u = synth_utterance("t0", &words, &l, &VoiceParams::default(), 99).unwrap();
        assert_eq!(u.phone_timing[0].start, 0);
        assert_eq!(u.phone_timing.last().unwrap().end, u.waveform.len());
        for pair in u.phone_timing.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
        let dur = u.waveform.len() as f64 / SAMPLE_RATE as f64;
        assert!((dur - 3.0).abs() <= 0.15 + 1e-9, "duration {dur}");
        let expect_frames = u.waveform.len() / 640;
        assert_eq!(u.video.len(), expect_frames);
    }

    #[test]
    fn utterance_is_deterministic() {
        let l = Lexicon::default_grid();
        let words = vec!["bin".to_string(), "blue".to_string()];
        let v = VoiceParams { target_duration_s: 1.0, ..VoiceParams::default() };
        let a = synth_utterance("d", &words, &l, &v, 5).unwrap();
        let b = synth_utterance("d", &words, &l, &v, 5).unwrap();
        assert_eq!(a.waveform.samples(), b.waveform.samples());
        assert_eq!(a.video.frames(), b.video.frames());
        assert_eq!(a.phone_timing, b.phone_timing);
    }

    #[test]
    fn single_phone_fixed_duration_spans_everything() {
        let l = Lexicon::default_grid();
        let v = VoiceParams {
            target_duration_s: 0.5,
            duration_jitter_s: 0.0,
            phone_dur_sigma: 0.0,
            ..VoiceParams::default()
        };
        let u = synth_utterance("s", &["e".to_string()], &l, &v, 3).unwrap();
        assert_eq!(u.phone_timing.len(), 1);
        assert_eq!(u.phone_timing[0].start, 0);
        assert_eq!(u.phone_timing[0].end, u.waveform.len());
        assert_eq!(u.waveform.len(), 8000);
    }

    #[test]
    fn unknown_word_is_an_error() {
        let l = Lexicon::default_grid();
        let e = synth_utterance(
            "u",
            &["wizard".to_string()],
            &l,
            &VoiceParams::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(e, Error::UnknownWord(w) if w == "wizard"));
    }

    #[test]
    fn disjoint_formants_separate_in_filterbank() {
        let l = Lexicon::default_grid();
        let mut v = VoiceParams {
            target_duration_s: 2.0,
            duration_jitter_s: 0.0,
            phone_dur_sigma: 0.0,
            noise_level: 0.0,
            ..VoiceParams::default()
        };
        v.formant_overrides
            .insert("iy".into(), [400.0, 450.0, 500.0]);
        v.formant_overrides
            .insert("ow".into(), [3200.0, 3400.0, 3600.0]);
        // "e" = iy, "o" = ow: two single-phone words, one second each.
        let u = synth_utterance(
            "f",
            &["e".to_string(), "o".to_string()],
            &l,
            &v,
            11,
        )
        .unwrap();
        let feats = compute_filterbank(&u.waveform).unwrap();
        let boundary_frame = u.phone_timing[0].end / 160;
        let dominant = |lo: usize, hi: usize| -> usize {
            let mut totals = vec![0.0; 40];
            for t in lo..hi {
                for d in 0..40 {
                    totals[d] += feats[[t, d]].exp();
                }
            }
            totals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        // Skip frames straddling the boundary.
        let first = dominant(2, boundary_frame.saturating_sub(3));
        let second = dominant(boundary_frame + 3, feats.nrows() - 2);
        assert_ne!(first, second);
        assert!(second > first, "higher formants must map to higher mel bins");
    }

    #[test]
    fn babble_has_unit_rms() {
        let g = Grammar::default_grid();
        let l = Lexicon::default_grid();
        let v = VoiceParams { target_duration_s: 1.0, ..VoiceParams::default() };
        for n in [1, 6] {
            let b = synth_babble(n, 16_000, &g, &l, &v, 17).unwrap();
            let rms = b.power().sqrt();
            assert_abs_diff_eq!(rms, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn babble_is_spectrally_flatter_than_single_sources() {
        use rustfft::{num_complex::Complex, FftPlanner};
        let flatness = |w: &Waveform| -> f64 {
            let n = 8192usize;
            let mut planner = FftPlanner::new();
            let fft = planner.plan_fft_forward(n);
            let mut buf: Vec<Complex<f64>> = w.samples()[..n]
                .iter()
                .map(|&s| Complex::new(s, 0.0))
                .collect();
            fft.process(&mut buf);
            let powers: Vec<f64> =
                buf[..n / 2].iter().map(|c| c.norm_sqr().max(1e-12)).collect();
            let log_mean = powers.iter().map(|p| p.ln()).sum::<f64>() / powers.len() as f64;
            let mean = powers.iter().sum::<f64>() / powers.len() as f64;
            log_mean.exp() / mean
        };
        let g = Grammar::default_grid();
        let l = Lexicon::default_grid();
        let v = VoiceParams { target_duration_s: 1.0, ..VoiceParams::default() };
        let babble = synth_babble(6, 16_000, &g, &l, &v, 23).unwrap();
        let babble_flatness = flatness(&babble);
        for src in 0..6 {
            let src_seed = derive_seed(23, &format!("babble-src-{src}"));
            let words = sample_sentence(&g, derive_seed(src_seed, "sentence"));
            let utt =
                synth_utterance("s", &words, &l, &v, derive_seed(src_seed, "media")).unwrap();
            assert!(babble_flatness > flatness(&utt.waveform));
        }
    }

    #[test]
    fn mix_at_snr_zero_db_matches_powers() {
        let l = Lexicon::default_grid();
        let g = Grammar::default_grid();
        let v = VoiceParams { target_duration_s: 1.0, ..VoiceParams::default() };
        let clean =
            synth_utterance("c", &["bin".to_string()], &l, &v, 1).unwrap().waveform;
        let noise = synth_babble(6, clean.len(), &g, &l, &v, 2).unwrap();
        let mixed = mix_at_snr(&clean, &noise, 0.0).unwrap();
        let p_noise_scaled = clean
            .samples()
            .iter()
            .zip(mixed.samples())
            .map(|(c, m)| (m - c) * (m - c))
            .sum::<f64>()
            / clean.len() as f64;
        let rel = (p_noise_scaled - clean.power()).abs() / clean.power();
        assert!(rel < 1e-9, "relative power error {rel}");
    }

    #[test]
    fn mix_at_snr_minus_three_db_power_ratio() {
        let l = Lexicon::default_grid();
        let g = Grammar::default_grid();
        let v = VoiceParams { target_duration_s: 1.0, ..VoiceParams::default() };
        let clean =
            synth_utterance("c", &["two".to_string()], &l, &v, 4).unwrap().waveform;
        let noise = synth_babble(6, clean.len(), &g, &l, &v, 5).unwrap();
        let mixed = mix_at_snr(&clean, &noise, -3.0).unwrap();
        let p_noise_scaled = clean
            .samples()
            .iter()
            .zip(mixed.samples())
            .map(|(c, m)| (m - c) * (m - c))
            .sum::<f64>()
            / clean.len() as f64;
        let ratio = p_noise_scaled / clean.power();
        assert_abs_diff_eq!(ratio, 10f64.powf(0.3), epsilon = 1e-6);
        assert_abs_diff_eq!(measured_snr_db(&clean, &mixed), -3.0, epsilon = 0.01);
    }

    #[test]
    fn mix_rejects_zero_power_clean() {
        let clean = Waveform::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        let noise = Waveform::new(vec![0.1; 100], SAMPLE_RATE).unwrap();
        assert!(matches!(mix_at_snr(&clean, &noise, 0.0), Err(Error::ZeroPower)));
    }

    #[test]
    fn corpus_split_sizes_and_disjointness() {
        let g = Grammar::default_grid();
        let (specs, split) = build_corpus(&g, 100, 7).unwrap();
        assert_eq!(specs.len(), 100);
        assert_eq!(split.train.len(), 81);
        assert_eq!(split.cv.len(), 9);
        assert_eq!(split.test.len(), 10);
        let mut all: Vec<&String> =
            split.train.iter().chain(&split.cv).chain(&split.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);

        let (_, split2) = build_corpus(&g, 100, 7).unwrap();
        assert_eq!(split, split2);
    }

    #[test]
    fn corpus_too_small_rejected() {
        let g = Grammar::default_grid();
        assert!(build_corpus(&g, 9, 1).is_err());
    }
}
