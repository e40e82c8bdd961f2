//! On-disk formats.
//!
//! - WAV: PCM16 little-endian mono at 16 kHz; samples map to [-1, 1] by
//!   1/32768 on read.
//! - `FMAT` feature archive: magic `FMAT`, u32 row count, u32 column
//!   count, then row-major f32 little-endian values.
//! - `VID0` raw video: magic `VID0`, u32 frame count, u32 width, u32
//!   height, then u8 intensities frame by frame, row-major.
//! - Corpus manifest: `utt_id<TAB>wav<TAB>video<TAB>transcript` lines.
//! - Alignments: `utt_id id id ...` per line, integer global state ids.
//! - `HMM0` model file: version, dimension, phone names, then per state
//!   transition log-probabilities and GMM parameters as f64 LE
//!   (weight, means, variances per component).
//! - `NET0` checkpoint: version, activation, dims header, then all
//!   parameters as f64 LE, trunk -> acoustic head -> visual head (per
//!   layer: row-major weights, then bias).
//! - Training log: `epoch<TAB>lr<TAB>train_ce<TAB>cv_acc` lines.
//! - Hypotheses: `utt_id<TAB>word word ...` lines.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::features::{VideoStream, Waveform, SAMPLE_RATE, VIDEO_FPS};
use crate::gmmhmm::{Alignment, Gmm, HmmSet, Modality, STATES_PER_PHONE};
use crate::mtlnet::{Activation, EpochRecord, Layer, MtlNetwork};

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), msg: msg.into() }
}

// --- binary reader helpers ---

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(parse_err(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expect {
            return Err(parse_err(
                self.path,
                format!("bad magic {:?}, expected {:?}", got, expect),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(parse_err(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

// --- WAV ---

/// Writes mono PCM16 at the fixed sample rate.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.len() as u32;
    let byte_rate = SAMPLE_RATE * 2;
    let data_len = n * 2;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in w.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads mono PCM16; samples scale to [-1, 1] by 1/32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(b"RIFF")?;
    r.u32()?;
    if r.take(4)? != b"WAVE" {
        return Err(parse_err(path, "not a WAVE file"));
    }
    let mut samples = None;
    let mut rate = 0u32;
    let mut channels = 0u16;
    let mut bits = 0u16;
    while r.pos + 8 <= buf.len() {
        let id: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u32()? as usize;
        let body = r.take(len.min(buf.len() - r.pos))?;
        match &id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(parse_err(path, "short fmt chunk"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 {
                    return Err(parse_err(path, "only PCM supported"));
                }
            }
            b"data" => {
                let mut v = Vec::with_capacity(body.len() / 2);
                for pair in body.chunks_exact(2) {
                    let s = i16::from_le_bytes(pair.try_into().unwrap());
                    v.push(s as f64 / 32768.0);
                }
                samples = Some(v);
            }
            _ => {}
        }
        if len % 2 == 1 && r.pos < buf.len() {
            r.take(1)?; // chunk padding
        }
    }
    if channels != 1 || bits != 16 {
        return Err(parse_err(path, format!("need 16-bit mono, got {bits}-bit x{channels}")));
    }
    if rate != SAMPLE_RATE {
        return Err(parse_err(path, format!("sample rate {rate}, need {SAMPLE_RATE}")));
    }
    Waveform::new(samples.ok_or_else(|| parse_err(path, "no data chunk"))?, SAMPLE_RATE)
}

// --- FMAT ---

pub fn fmat_bytes(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.len() * 4);
    out.extend_from_slice(b"FMAT");
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_fmat(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, fmat_bytes(m))?;
    Ok(())
}

pub fn read_fmat(path: &Path) -> Result<Array2<f64>> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(b"FMAT")?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(r.f32()? as f64);
    }
    r.done()?;
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| parse_err(path, format!("bad shape: {e}")))
}

// --- VID0 ---

pub fn write_video(path: &Path, v: &VideoStream) -> Result<()> {
    let size = crate::features::VIDEO_SIZE;
    let mut out = Vec::with_capacity(16 + v.len() * size * size);
    out.extend_from_slice(b"VID0");
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.extend_from_slice(&(size as u32).to_le_bytes());
    for frame in v.frames() {
        for &p in frame.iter() {
            out.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<VideoStream> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(b"VID0")?;
    let count = r.u32()? as usize;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    if width != crate::features::VIDEO_SIZE || height != crate::features::VIDEO_SIZE {
        return Err(parse_err(path, format!("unsupported frame size {width}x{height}")));
    }
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let bytes = r.take(width * height)?;
        let frame = Array2::from_shape_fn((height, width), |(row, col)| {
            bytes[row * width + col] as f64 / 255.0
        });
        frames.push(frame);
    }
    r.done()?;
    VideoStream::new(frames, VIDEO_FPS)
}

// --- corpus manifest ---

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub wav_path: String,
    pub video_path: String,
    pub words: Vec<String>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.utt_id,
            e.wav_path,
            e.video_path,
            e.words.join(" ")
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(path, format!("line {}: expected 4 tab fields", ln + 1)));
        }
        entries.push(ManifestEntry {
            utt_id: f[0].to_string(),
            wav_path: f[1].to_string(),
            video_path: f[2].to_string(),
            words: f[3].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(entries)
}

// --- alignments ---

pub fn write_alignments(path: &Path, alignments: &[Alignment]) -> Result<()> {
    let mut out = String::new();
    for a in alignments {
        out.push_str(&a.utt_id);
        for &s in &a.labels {
            out.push(' ');
            out.push_str(&s.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_alignments(path: &Path, modality: Modality) -> Result<Vec<Alignment>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let utt_id = parts.next().unwrap().to_string();
        let labels: std::result::Result<Vec<usize>, _> =
            parts.map(str::parse::<usize>).collect();
        let labels =
            labels.map_err(|e| parse_err(path, format!("line {}: {e}", ln + 1)))?;
        out.push(Alignment { utt_id, labels, modality });
    }
    Ok(out)
}

// --- HMM model file ---

const HMM_VERSION: u32 = 1;

pub fn hmm_bytes(model: &HmmSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"HMM0");
    out.extend_from_slice(&HMM_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(model.phones().len() as u32).to_le_bytes());
    for p in model.phones() {
        out.extend_from_slice(&(p.len() as u32).to_le_bytes());
        out.extend_from_slice(p.as_bytes());
    }
    for s in 0..model.num_states() {
        out.extend_from_slice(&model.log_self(s).to_le_bytes());
        out.extend_from_slice(&model.log_next(s).to_le_bytes());
        let g = model.emission(s);
        out.extend_from_slice(&(g.num_components() as u32).to_le_bytes());
        for k in 0..g.num_components() {
            out.extend_from_slice(&g.weights[k].to_le_bytes());
            for d in 0..g.dim() {
                out.extend_from_slice(&g.means[[k, d]].to_le_bytes());
            }
            for d in 0..g.dim() {
                out.extend_from_slice(&g.vars[[k, d]].to_le_bytes());
            }
        }
    }
    out
}

pub fn write_hmm(path: &Path, model: &HmmSet) -> Result<()> {
    fs::write(path, hmm_bytes(model))?;
    Ok(())
}

pub fn read_hmm(path: &Path) -> Result<HmmSet> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(b"HMM0")?;
    let version = r.u32()?;
    if version != HMM_VERSION {
        return Err(parse_err(path, format!("unsupported version {version}")));
    }
    let dim = r.u32()? as usize;
    let n_phones = r.u32()? as usize;
    let mut phones = Vec::with_capacity(n_phones);
    for _ in 0..n_phones {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| parse_err(path, "phone name is not UTF-8"))?;
        phones.push(name.to_string());
    }
    let n_states = n_phones * STATES_PER_PHONE;
    let mut log_self = Vec::with_capacity(n_states);
    let mut log_next = Vec::with_capacity(n_states);
    let mut emissions = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        log_self.push(r.f64()?);
        log_next.push(r.f64()?);
        let k = r.u32()? as usize;
        let mut weights = Vec::with_capacity(k);
        let mut means = Array2::zeros((k, dim));
        let mut vars = Array2::zeros((k, dim));
        for ki in 0..k {
            weights.push(r.f64()?);
            for d in 0..dim {
                means[[ki, d]] = r.f64()?;
            }
            for d in 0..dim {
                vars[[ki, d]] = r.f64()?;
            }
        }
        emissions.push(Gmm { weights, means, vars });
    }
    r.done()?;
    HmmSet::from_parts(phones, dim, log_self, log_next, emissions)
}

// --- network checkpoint ---

const NET_VERSION: u32 = 1;

pub fn checkpoint_bytes(net: &MtlNetwork) -> Vec<u8> {
    let dims = net.dims();
    let mut out = Vec::new();
    out.extend_from_slice(b"NET0");
    out.extend_from_slice(&NET_VERSION.to_le_bytes());
    out.push(match net.activation {
        Activation::Sigmoid => 0,
        Activation::Relu => 1,
        Activation::Tanh => 2,
    });
    out.extend_from_slice(&(dims.input as u32).to_le_bytes());
    out.extend_from_slice(&(dims.hidden.len() as u32).to_le_bytes());
    for &h in &dims.hidden {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    out.extend_from_slice(&(dims.acoustic_states as u32).to_le_bytes());
    out.extend_from_slice(&(dims.visual_states as u32).to_le_bytes());
    out.extend_from_slice(&net.parameter_bytes());
    out
}

pub fn write_checkpoint(path: &Path, net: &MtlNetwork) -> Result<()> {
    fs::write(path, checkpoint_bytes(net))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<MtlNetwork> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(b"NET0")?;
    let version = r.u32()?;
    if version != NET_VERSION {
        return Err(parse_err(path, format!("unsupported version {version}")));
    }
    let activation = match r.take(1)?[0] {
        0 => Activation::Sigmoid,
        1 => Activation::Relu,
        2 => Activation::Tanh,
        other => return Err(parse_err(path, format!("unknown activation code {other}"))),
    };
    let input = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(r.u32()? as usize);
    }
    let k_a = r.u32()? as usize;
    let k_v = r.u32()? as usize;

    let read_layer = |r: &mut Reader, fan_in: usize, fan_out: usize| -> Result<Layer> {
        let mut weights = Array2::zeros((fan_in, fan_out));
        for i in 0..fan_in {
            for j in 0..fan_out {
                weights[[i, j]] = r.f64()?;
            }
        }
        let mut bias = Array1::zeros(fan_out);
        for j in 0..fan_out {
            bias[j] = r.f64()?;
        }
        Ok(Layer { weights, bias })
    };

    let mut trunk = Vec::with_capacity(n_hidden);
    let mut prev = input;
    for &h in &hidden {
        trunk.push(read_layer(&mut r, prev, h)?);
        prev = h;
    }
    let head_a = read_layer(&mut r, prev, k_a)?;
    let head_v = read_layer(&mut r, prev, k_v)?;
    r.done()?;
    Ok(MtlNetwork { trunk, activation, head_a, head_v })
}

// --- training log ---

pub fn training_log_text(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.epoch, r.learning_rate, r.train_cross_entropy, r.cv_accuracy_pct
        ));
    }
    out
}

pub fn write_training_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, training_log_text(records))?;
    Ok(())
}

// --- hypotheses ---

pub fn write_hypotheses(path: &Path, hyps: &[(String, Vec<String>)]) -> Result<()> {
    let mut out = String::new();
    for (utt_id, words) in hyps {
        out.push_str(&format!("{}\t{}\n", utt_id, words.join(" ")));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, "expected utt_id<TAB>words"))?;
        out.push((id.to_string(), rest.split_whitespace().map(str::to_string).collect()));
    }
    Ok(out)
}

// --- state priors ---

pub fn write_priors(path: &Path, priors: &Array1<f64>) -> Result<()> {
    let mut out = String::new();
    for &p in priors.iter() {
        out.push_str(&format!("{p}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_priors(path: &Path) -> Result<Array1<f64>> {
    let text = fs::read_to_string(path)?;
    let values: std::result::Result<Vec<f64>, _> =
        text.lines().filter(|l| !l.trim().is_empty()).map(str::parse::<f64>).collect();
    Ok(Array1::from_vec(values.map_err(|e| parse_err(path, e.to_string()))?))
}

// --- LDA transform ---

pub fn write_lda(path: &Path, lda: &crate::gmmhmm::LdaTransform) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"LDA0");
    out.extend_from_slice(&(lda.output_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(lda.input_dim() as u32).to_le_bytes());
    for &v in lda.matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in lda.input_mean.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &lda.eigenvalues {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_lda(path: &Path) -> Result<crate::gmmhmm::LdaTransform> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(b"LDA0")?;
    let out_dim = r.u32()? as usize;
    let in_dim = r.u32()? as usize;
    let mut matrix = Array2::zeros((out_dim, in_dim));
    for i in 0..out_dim {
        for j in 0..in_dim {
            matrix[[i, j]] = r.f64()?;
        }
    }
    let mut input_mean = Array1::zeros(in_dim);
    for j in 0..in_dim {
        input_mean[j] = r.f64()?;
    }
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for _ in 0..out_dim {
        eigenvalues.push(r.f64()?);
    }
    r.done()?;
    Ok(crate::gmmhmm::LdaTransform { matrix, input_mean, eigenvalues })
}

/// Convenience: read a whole file's bytes (for hashing).
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Convenience: atomic-ish text write (straight to path; callers own
/// staging semantics).
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
