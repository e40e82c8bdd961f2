//! Deterministic signal-to-feature pipeline.
//!
//! Audio: 25 ms Hamming-windowed frames every 10 ms, 512-point FFT,
//! 40 triangular mel filters spanning 20 Hz - 7600 Hz, natural log with
//! the energy floored at 1e-10. Video: per-frame orthonormal 2-D DCT-II
//! of the 64x64 ROI, first 100 coefficients in zigzag order. Both
//! streams are per-utterance mean/variance normalized, the video stream
//! is rate-matched to the audio frames by pixel-wise linear
//! interpolation, and the fused 140-dim frames are spliced with +-5
//! context frames into 1540-dim network inputs.
//!
//! Everything here is a pure function of its inputs.

use ndarray::{Array1, Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Fixed audio sample rate, Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis frame length in samples (25 ms at 16 kHz).
pub const FRAME_LEN: usize = 400;
/// Frame shift in samples (10 ms at 16 kHz).
pub const FRAME_SHIFT: usize = 160;
/// FFT size used for the power spectrum.
pub const FFT_SIZE: usize = 512;
/// Number of mel filters / audio feature dimensions.
pub const NUM_MELS: usize = 40;
/// Lower edge of the mel filterbank, Hz.
pub const MEL_LOW_HZ: f64 = 20.0;
/// Upper edge of the mel filterbank, Hz.
pub const MEL_HIGH_HZ: f64 = 7600.0;
/// Floor applied to filterbank energies before the log.
pub const ENERGY_FLOOR: f64 = 1e-10;
/// Side length of a video ROI frame.
pub const VIDEO_SIZE: usize = 64;
/// Number of retained DCT coefficients per video frame.
pub const NUM_DCT: usize = 100;
/// Source video frame rate, Hz.
pub const VIDEO_FPS: f64 = 25.0;
/// Fused audio+video frame dimension.
pub const FUSED_DIM: usize = NUM_MELS + NUM_DCT;
/// Context frames on each side when splicing network inputs.
pub const SPLICE_CONTEXT: usize = 5;
/// Spliced network input dimension: 11 x 140.
pub const SPLICED_DIM: usize = (2 * SPLICE_CONTEXT + 1) * FUSED_DIM;
/// Variance floor for mean/variance normalization.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Mono audio at the fixed 16 kHz rate, samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Wraps samples, enforcing the fixed rate and finiteness.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Invalid(format!(
                "sample rate {sample_rate} != required {SAMPLE_RATE}"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid("waveform contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

/// A sequence of 64x64 grayscale ROI frames, intensities in [0, 1].
#[derive(Debug, Clone)]
pub struct VideoStream {
    frames: Vec<Array2<f64>>,
    frame_rate: f64,
}

impl VideoStream {
    pub fn new(frames: Vec<Array2<f64>>, frame_rate: f64) -> Result<Self> {
        for (i, f) in frames.iter().enumerate() {
            check_video_frame(f).map_err(|e| Error::Invalid(format!("frame {i}: {e}")))?;
        }
        if !(frame_rate > 0.0) {
            return Err(Error::Invalid(format!("bad frame rate {frame_rate}")));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[Array2<f64>] {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn check_video_frame(f: &Array2<f64>) -> Result<()> {
    if f.dim() != (VIDEO_SIZE, VIDEO_SIZE) {
        return Err(Error::Shape(format!(
            "video frame is {:?}, expected {VIDEO_SIZE}x{VIDEO_SIZE}",
            f.dim()
        )));
    }
    if f.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Invalid("pixel intensity outside [0, 1]".into()));
    }
    Ok(())
}

/// Number of analysis frames a waveform of `len` samples yields, if any.
pub fn frame_count(len: usize) -> Option<usize> {
    if len < FRAME_LEN {
        None
    } else {
        Some((len - FRAME_LEN) / FRAME_SHIFT + 1)
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the 40 mel filters.
pub fn mel_center_frequencies() -> [f64; NUM_MELS] {
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    let step = (hi - lo) / (NUM_MELS + 1) as f64;
    let mut centers = [0.0; NUM_MELS];
    for (i, c) in centers.iter_mut().enumerate() {
        *c = mel_to_hz(lo + step * (i + 1) as f64);
    }
    centers
}

/// Dense filterbank weight matrix, `NUM_MELS x (FFT_SIZE/2 + 1)`.
///
/// Triangles peak at 1 and are placed on a uniform mel grid between
/// [`MEL_LOW_HZ`] and [`MEL_HIGH_HZ`].
fn mel_filterbank() -> Array2<f64> {
    let n_bins = FFT_SIZE / 2 + 1;
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    let step = (hi - lo) / (NUM_MELS + 1) as f64;
    let edge = |i: usize| mel_to_hz(lo + step * i as f64);

    let mut fb = Array2::zeros((NUM_MELS, n_bins));
    for m in 0..NUM_MELS {
        let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
        for k in 0..n_bins {
            let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
            let w = if f <= l || f >= r {
                0.0
            } else if f <= c {
                (f - l) / (c - l)
            } else {
                (r - f) / (r - c)
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

fn hamming_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Log mel filterbank features, one 40-dim row per 10 ms frame.
///
/// Errors with [`Error::UtteranceTooShort`] when the waveform holds less
/// than one full 25 ms frame.
pub fn compute_filterbank(w: &Waveform) -> Result<Array2<f64>> {
    let t = frame_count(w.len()).ok_or(Error::UtteranceTooShort {
        got: w.len(),
        min: FRAME_LEN,
    })?;
    let window = hamming_window(FRAME_LEN);
    let n_bins = FFT_SIZE / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    // Power spectra for all frames, then one GEMM against the filterbank.
    let mut power = Array2::zeros((t, n_bins));
    let samples = w.samples();
    for ti in 0..t {
        let start = ti * FRAME_SHIFT;
        for i in 0..FRAME_LEN {
            buf[i] = Complex::new(samples[start + i] * window[i], 0.0);
        }
        for b in buf.iter_mut().skip(FRAME_LEN) {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..n_bins {
            power[[ti, k]] = buf[k].norm_sqr();
        }
    }

    let energies = power.dot(&mel_filterbank().t());
    Ok(energies.mapv(|e| e.max(ENERGY_FLOOR).ln()))
}

/// Orthonormal 1-D DCT-II basis, `rows x n`: row k is the k-th basis vector.
fn dct_basis(rows: usize, n: usize) -> Array2<f64> {
    let mut c = Array2::zeros((rows, n));
    for k in 0..rows {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for j in 0..n {
            c[[k, j]] =
                scale * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

/// Zigzag scan order over an `n x n` block, starting at the DC corner.
pub fn zigzag_indices(n: usize, count: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    for d in 0..(2 * n - 1) {
        // Walk each anti-diagonal, alternating direction.
        let range: Vec<usize> = if d % 2 == 0 {
            (0..=d.min(n - 1)).rev().collect()
        } else {
            (0..=d.min(n - 1)).collect()
        };
        for i in range {
            let j = d - i;
            if j < n {
                out.push((i, j));
                if out.len() == count {
                    return out;
                }
            }
        }
    }
    out
}

/// Full orthonormal 2-D DCT-II of a 64x64 frame.
pub fn dct2(frame: &Array2<f64>) -> Result<Array2<f64>> {
    check_video_frame_shape(frame)?;
    let c = dct_basis(VIDEO_SIZE, VIDEO_SIZE);
    Ok(c.dot(frame).dot(&c.t()))
}

fn check_video_frame_shape(frame: &Array2<f64>) -> Result<()> {
    if frame.dim() != (VIDEO_SIZE, VIDEO_SIZE) {
        return Err(Error::Shape(format!(
            "expected {VIDEO_SIZE}x{VIDEO_SIZE} frame, got {:?}",
            frame.dim()
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite pixel".into()));
    }
    Ok(())
}

/// Largest row/column index touched by the first [`NUM_DCT`] zigzag entries.
fn zigzag_extent() -> usize {
    zigzag_indices(VIDEO_SIZE, NUM_DCT)
        .iter()
        .map(|&(i, j)| i.max(j))
        .max()
        .unwrap()
        + 1
}

/// First 100 coefficients of the orthonormal 2-D DCT-II, zigzag order.
///
/// Only the low-frequency corner of the transform is computed; the values
/// are identical to indexing the full [`dct2`] output.
pub fn dct_visual(frame: &Array2<f64>) -> Result<Array1<f64>> {
    check_video_frame_shape(frame)?;
    let extent = zigzag_extent();
    let c = dct_basis(extent, VIDEO_SIZE);
    let corner = c.dot(frame).dot(&c.t());
    let idx = zigzag_indices(VIDEO_SIZE, NUM_DCT);
    Ok(Array1::from_iter(idx.iter().map(|&(i, j)| corner[[i, j]])))
}

/// Visual feature matrix for a frame sequence: one 100-dim DCT row each.
pub fn dct_visual_sequence(frames: &[Array2<f64>]) -> Result<Array2<f64>> {
    let extent = zigzag_extent();
    let c = dct_basis(extent, VIDEO_SIZE);
    let idx = zigzag_indices(VIDEO_SIZE, NUM_DCT);
    let mut out = Array2::zeros((frames.len(), NUM_DCT));
    for (t, frame) in frames.iter().enumerate() {
        check_video_frame_shape(frame)?;
        let corner = c.dot(frame).dot(&c.t());
        for (d, &(i, j)) in idx.iter().enumerate() {
            out[[t, d]] = corner[[i, j]];
        }
    }
    Ok(out)
}

/// Per-utterance, per-dimension normalization to zero mean and unit
/// (population) variance. Dimensions whose variance falls below
/// [`VARIANCE_FLOOR`] come out all zero.
pub fn mean_variance_normalize(m: &Array2<f64>) -> Result<Array2<f64>> {
    let t = m.nrows();
    if t < 2 {
        return Err(Error::Invalid(format!(
            "normalization needs at least 2 frames, got {t}"
        )));
    }
    let mean = m.mean_axis(Axis(0)).unwrap();
    let mut out = m - &mean;
    for mut col in out.columns_mut() {
        let var = col.iter().map(|v| v * v).sum::<f64>() / t as f64;
        if var < VARIANCE_FLOOR {
            col.fill(0.0);
        } else {
            let inv = 1.0 / var.sqrt();
            col.mapv_inplace(|v| v * inv);
        }
    }
    Ok(out)
}

/// Rate-matches a video stream to `target` frames by pixel-wise linear
/// interpolation on the normalized [0, 1] time axis. The first and last
/// output frames equal the first and last input frames exactly.
pub fn interpolate_video(v: &VideoStream, target: usize) -> Result<Vec<Array2<f64>>> {
    let s = v.len();
    if s < 2 {
        return Err(Error::Invalid(format!(
            "interpolation needs at least 2 source frames, got {s}"
        )));
    }
    if target < 2 {
        return Err(Error::Invalid(format!(
            "interpolation target must be at least 2, got {target}"
        )));
    }
    let frames = v.frames();
    let mut out = Vec::with_capacity(target);
    for j in 0..target {
        let pos = j as f64 * (s - 1) as f64 / (target - 1) as f64;
        let i0 = (pos.floor() as usize).min(s - 2);
        let frac = pos - i0 as f64;
        if frac == 0.0 {
            out.push(frames[i0].clone());
        } else {
            out.push(&frames[i0] * (1.0 - frac) + &frames[i0 + 1] * frac);
        }
    }
    Ok(out)
}

/// Row-wise concatenation of audio (left) and visual (right) features.
pub fn fuse(audio: &Array2<f64>, video: &Array2<f64>) -> Result<Array2<f64>> {
    if audio.nrows() != video.nrows() {
        return Err(Error::Shape(format!(
            "fuse: {} audio frames vs {} video frames",
            audio.nrows(),
            video.nrows()
        )));
    }
    let (t, da, dv) = (audio.nrows(), audio.ncols(), video.ncols());
    let mut out = Array2::zeros((t, da + dv));
    out.slice_mut(ndarray::s![.., ..da]).assign(audio);
    out.slice_mut(ndarray::s![.., da..]).assign(video);
    Ok(out)
}

/// Splices each frame with `left` and `right` context frames,
/// replicating the first/last frame at the edges. A `T x D` input
/// becomes `T x (left+1+right)*D`.
pub fn splice(m: &Array2<f64>, left: usize, right: usize) -> Array2<f64> {
    let (t, d) = m.dim();
    let width = left + 1 + right;
    let mut out = Array2::zeros((t, width * d));
    for ti in 0..t {
        for (block, off) in (-(left as isize)..=(right as isize)).enumerate() {
            let src = (ti as isize + off).clamp(0, t as isize - 1) as usize;
            out.slice_mut(ndarray::s![ti, block * d..(block + 1) * d])
                .assign(&m.row(src));
        }
    }
    out
}
