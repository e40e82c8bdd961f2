//! Training-instance construction with modality suppression.
//!
//! Every fused frame yields three instances: both modalities present,
//! visual block suppressed (audio-only), and audio block suppressed
//! (video-only). Suppression replaces a block of the 140-dim frame with
//! a small constant *before* splicing, so every context copy of the
//! frame is suppressed too. The video-only instance carries both labels
//! and feeds both heads in a single forward pass.
//!
//! [`FrameDataset`] stores fused frames once (f32) and materializes
//! spliced instance rows on demand, row-for-row identical to
//! [`make_instances`].

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::features::{splice, FUSED_DIM, NUM_MELS, SPLICE_CONTEXT, SPLICED_DIM};

/// Replacement value for a suppressed feature block.
pub const SUPPRESSION_EPSILON: f64 = 1e-5;

/// Which modality block of a fused frame to blank out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuppressTarget {
    /// Dims 0..40 (the filterbank block).
    Audio,
    /// Dims 40..140 (the DCT block).
    Visual,
}

/// Input condition of one training instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    AudioVisual,
    AudioOnly,
    VideoOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::AudioVisual, Variant::AudioOnly, Variant::VideoOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AudioVisual => "av",
            Variant::AudioOnly => "audio-only",
            Variant::VideoOnly => "video-only",
        }
    }
}

/// One spliced input row with its labels.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub input: Array1<f64>,
    pub variant: Variant,
    pub acoustic_label: Option<usize>,
    pub visual_label: Option<usize>,
}

/// Replaces one modality block of a 140-dim frame with `epsilon`.
pub fn suppress(frame: &mut [f64], target: SuppressTarget, epsilon: f64) {
    debug_assert_eq!(frame.len(), FUSED_DIM);
    let range = match target {
        SuppressTarget::Audio => 0..NUM_MELS,
        SuppressTarget::Visual => NUM_MELS..FUSED_DIM,
    };
    for v in &mut frame[range] {
        *v = epsilon;
    }
}

/// Suppresses every frame of a `T x 140` matrix.
pub fn suppress_matrix(m: &Array2<f64>, target: SuppressTarget, epsilon: f64) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        suppress(row.as_slice_mut().expect("contiguous row"), target, epsilon);
    }
    out
}

/// Builds the three per-frame instances for one utterance.
///
/// `fused` is the `T x 140` mean/variance-normalized fused matrix;
/// `acoustic` and `visual` are the per-frame state labels from the two
/// bootstrap models.
pub fn make_instances(
    fused: &Array2<f64>,
    acoustic: &[usize],
    visual: &[usize],
) -> Result<Vec<TrainingInstance>> {
    let t = fused.nrows();
    if fused.ncols() != FUSED_DIM {
        return Err(Error::Shape(format!(
            "make_instances: fused dim {} != {FUSED_DIM}",
            fused.ncols()
        )));
    }
    if acoustic.len() != t || visual.len() != t {
        return Err(Error::Shape(format!(
            "make_instances: {t} frames vs {} acoustic / {} visual labels",
            acoustic.len(),
            visual.len()
        )));
    }
    let spliced_av = splice(fused, SPLICE_CONTEXT, SPLICE_CONTEXT);
    let spliced_audio = splice(
        &suppress_matrix(fused, SuppressTarget::Visual, SUPPRESSION_EPSILON),
        SPLICE_CONTEXT,
        SPLICE_CONTEXT,
    );
    let spliced_video = splice(
        &suppress_matrix(fused, SuppressTarget::Audio, SUPPRESSION_EPSILON),
        SPLICE_CONTEXT,
        SPLICE_CONTEXT,
    );
    let mut out = Vec::with_capacity(3 * t);
    for ti in 0..t {
        out.push(TrainingInstance {
            input: spliced_av.row(ti).to_owned(),
            variant: Variant::AudioVisual,
            acoustic_label: Some(acoustic[ti]),
            visual_label: None,
        });
        out.push(TrainingInstance {
            input: spliced_audio.row(ti).to_owned(),
            variant: Variant::AudioOnly,
            acoustic_label: Some(acoustic[ti]),
            visual_label: None,
        });
        out.push(TrainingInstance {
            input: spliced_video.row(ti).to_owned(),
            variant: Variant::VideoOnly,
            acoustic_label: Some(acoustic[ti]),
            visual_label: Some(visual[ti]),
        });
    }
    Ok(out)
}

/// A materialized minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub variants: Vec<Variant>,
    pub acoustic_labels: Vec<Option<usize>>,
    pub visual_labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

/// Anything that can hand out instances by index in a fixed order.
pub trait InstanceSource: Sync {
    fn len(&self) -> usize;
    /// Materializes the given instances, in the given order.
    fn materialize(&self, ids: &[usize]) -> Batch;
}

impl InstanceSource for [TrainingInstance] {
    fn len(&self) -> usize {
        self.len()
    }

    fn materialize(&self, ids: &[usize]) -> Batch {
        let dim = self.first().map_or(0, |i| i.input.len());
        let mut inputs = Array2::zeros((ids.len(), dim));
        let mut variants = Vec::with_capacity(ids.len());
        let mut acoustic = Vec::with_capacity(ids.len());
        let mut visual = Vec::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            let inst = &self[id];
            inputs.row_mut(row).assign(&inst.input);
            variants.push(inst.variant);
            acoustic.push(inst.acoustic_label);
            visual.push(inst.visual_label);
        }
        Batch { inputs, variants, acoustic_labels: acoustic, visual_labels: visual }
    }
}

struct StoredUtterance {
    /// `T x 140` fused features, compact storage.
    fused: Array2<f32>,
    acoustic: Vec<u32>,
    visual: Vec<u32>,
}

/// Compact corpus-level instance store.
///
/// Keeps one f32 copy of each utterance's fused matrix and an index of
/// `(utterance, frame, variant)` triples; spliced 1540-dim rows are
/// gathered per batch. Row values match [`make_instances`] run on the
/// f32-rounded fused matrix exactly.
pub struct FrameDataset {
    utts: Vec<StoredUtterance>,
    index: Vec<(u32, u32, Variant)>,
}

impl FrameDataset {
    pub fn new() -> Self {
        Self { utts: Vec::new(), index: Vec::new() }
    }

    /// Appends one utterance's frames and indexes its 3T instances.
    pub fn push_utterance(
        &mut self,
        fused: Array2<f32>,
        acoustic: &[usize],
        visual: &[usize],
    ) -> Result<()> {
        let t = fused.nrows();
        if fused.ncols() != FUSED_DIM {
            return Err(Error::Shape(format!(
                "push_utterance: fused dim {} != {FUSED_DIM}",
                fused.ncols()
            )));
        }
        if acoustic.len() != t || visual.len() != t {
            return Err(Error::Shape(format!(
                "push_utterance: {t} frames vs {} acoustic / {} visual labels",
                acoustic.len(),
                visual.len()
            )));
        }
        let u = self.utts.len() as u32;
        for ti in 0..t {
            for v in Variant::ALL {
                self.index.push((u, ti as u32, v));
            }
        }
        self.utts.push(StoredUtterance {
            fused,
            acoustic: acoustic.iter().map(|&l| l as u32).collect(),
            visual: visual.iter().map(|&l| l as u32).collect(),
        });
        Ok(())
    }

    pub fn num_utterances(&self) -> usize {
        self.utts.len()
    }

    fn gather_row(&self, out: &mut [f64], utt: usize, frame: usize, variant: Variant) {
        let stored = &self.utts[utt];
        let t = stored.fused.nrows() as isize;
        for (block, off) in (-(SPLICE_CONTEXT as isize)..=(SPLICE_CONTEXT as isize)).enumerate() {
            let src = (frame as isize + off).clamp(0, t - 1) as usize;
            let dst = &mut out[block * FUSED_DIM..(block + 1) * FUSED_DIM];
            let row = stored.fused.row(src);
            match variant {
                Variant::AudioVisual => {
                    for (d, v) in dst.iter_mut().enumerate() {
                        *v = row[d] as f64;
                    }
                }
                Variant::AudioOnly => {
                    for (d, v) in dst.iter_mut().enumerate().take(NUM_MELS) {
                        *v = row[d] as f64;
                    }
                    for v in dst[NUM_MELS..].iter_mut() {
                        *v = SUPPRESSION_EPSILON;
                    }
                }
                Variant::VideoOnly => {
                    for v in dst[..NUM_MELS].iter_mut() {
                        *v = SUPPRESSION_EPSILON;
                    }
                    for (d, v) in dst.iter_mut().enumerate().skip(NUM_MELS) {
                        *v = row[d] as f64;
                    }
                }
            }
        }
    }
}

impl Default for FrameDataset {
    fn default() -> Self {
        Self::new()
    }
}

impl InstanceSource for FrameDataset {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn materialize(&self, ids: &[usize]) -> Batch {
        let mut inputs = Array2::zeros((ids.len(), SPLICED_DIM));
        let mut variants = Vec::with_capacity(ids.len());
        let mut acoustic = Vec::with_capacity(ids.len());
        let mut visual = Vec::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            let (u, f, variant) = self.index[id];
            let (u, f) = (u as usize, f as usize);
            self.gather_row(
                inputs.row_mut(row).as_slice_mut().expect("contiguous row"),
                u,
                f,
                variant,
            );
            variants.push(variant);
            acoustic.push(Some(self.utts[u].acoustic[f] as usize));
            visual.push(match variant {
                Variant::VideoOnly => Some(self.utts[u].visual[f] as usize),
                _ => None,
            });
        }
        Batch { inputs, variants, acoustic_labels: acoustic, visual_labels: visual }
    }
}
