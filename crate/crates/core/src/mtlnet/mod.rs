//! Shared-trunk network with two softmax heads.
//!
//! A stack of fully-connected hidden layers feeds an acoustic-state head
//! and a visual-state head. Training minimizes the primary cross-entropy
//! plus a weighted auxiliary cross-entropy; the single-task baseline is
//! the identical network with the auxiliary weight at zero, so the two
//! share every code path. Inputs are modality-suppressed fused-feature
//! splices built by [`instances`]; the epoch loop and the learning-rate
//! schedule live in [`train`].

pub mod instances;
pub mod train;

pub use instances::{
    make_instances, suppress, suppress_matrix, Batch, FrameDataset, InstanceSource,
    SuppressTarget, TrainingInstance, Variant, SUPPRESSION_EPSILON,
};
pub use train::{
    backward, frame_accuracy, mtl_loss, newbob_step, sgd_epoch, train_network, EpochRecord,
    Gradients, LayerGrad, TrainConfig,
};

use ndarray::{Array1, Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// Fully-connected layer: `in_dim x out_dim` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `x W + b` for a batch of rows.
    pub fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

/// Network shape: input width, hidden widths, and the two label-set sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub acoustic_states: usize,
    pub visual_states: usize,
}

impl NetDims {
    /// `hidden_layers` equal-width hidden layers.
    pub fn new(
        input: usize,
        hidden_dim: usize,
        hidden_layers: usize,
        acoustic_states: usize,
        visual_states: usize,
    ) -> Self {
        Self {
            input,
            hidden: vec![hidden_dim; hidden_layers],
            acoustic_states,
            visual_states,
        }
    }
}

/// The two-head network.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlNetwork {
    pub trunk: Vec<Layer>,
    pub activation: Activation,
    pub head_a: Layer,
    pub head_v: Layer,
}

impl MtlNetwork {
    pub fn input_dim(&self) -> usize {
        self.trunk.first().map_or(self.head_a.in_dim(), Layer::in_dim)
    }

    pub fn acoustic_states(&self) -> usize {
        self.head_a.out_dim()
    }

    pub fn visual_states(&self) -> usize {
        self.head_v.out_dim()
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            input: self.input_dim(),
            hidden: self.trunk.iter().map(Layer::out_dim).collect(),
            acoustic_states: self.acoustic_states(),
            visual_states: self.visual_states(),
        }
    }

    /// All parameters in a fixed order (trunk, head_a, head_v), little
    /// endian. Bit-identical byte strings mean bit-identical networks.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let push_layer = |l: &Layer, out: &mut Vec<u8>| {
            for v in l.weights.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in l.bias.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for l in &self.trunk {
            push_layer(l, &mut out);
        }
        push_layer(&self.head_a, &mut out);
        push_layer(&self.head_v, &mut out);
        out
    }

    /// Bytes of the trunk and acoustic head only (the deployed portion).
    pub fn primary_parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in self.trunk.iter().chain(std::iter::once(&self.head_a)) {
            for v in l.weights.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in l.bias.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Glorot-uniform initialization: weights in +-sqrt(6/(fan_in+fan_out)),
/// biases zero. Deterministic per seed.
pub fn init_network(dims: &NetDims, activation: Activation, seed: u64) -> MtlNetwork {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let init_layer = |fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Layer {
            weights: Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.random_range(-bound..bound)
            }),
            bias: Array1::zeros(fan_out),
        }
    };
    let mut trunk = Vec::with_capacity(dims.hidden.len());
    let mut prev = dims.input;
    for &h in &dims.hidden {
        trunk.push(init_layer(prev, h, &mut rng));
        prev = h;
    }
    let head_a = init_layer(prev, dims.acoustic_states, &mut rng);
    let head_v = init_layer(prev, dims.visual_states, &mut rng);
    MtlNetwork { trunk, activation, head_a, head_v }
}

/// Forward-pass cache: post-activation trunk outputs and both head
/// posteriors.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Trunk outputs, one `B x width` matrix per hidden layer.
    pub hidden: Vec<Array2<f64>>,
    /// Acoustic-head posteriors, rows sum to 1.
    pub p_a: Array2<f64>,
    /// Visual-head posteriors, rows sum to 1.
    pub p_v: Array2<f64>,
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    logits
}

/// Shared trunk once, then both heads.
pub fn forward(net: &MtlNetwork, batch: ArrayView2<f64>) -> Result<Forward> {
    if batch.ncols() != net.input_dim() {
        return Err(Error::Shape(format!(
            "forward: input dim {} != network input {}",
            batch.ncols(),
            net.input_dim()
        )));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("forward: non-finite input".into()));
    }
    let mut hidden = Vec::with_capacity(net.trunk.len());
    let mut current = batch.to_owned();
    for layer in &net.trunk {
        let mut z = layer.affine(current.view());
        z.mapv_inplace(|v| net.activation.apply(v));
        hidden.push(z);
        current = hidden.last().unwrap().clone();
    }
    let top = hidden.last().map(|h| h.view()).unwrap_or(batch);
    let p_a = softmax_rows(net.head_a.affine(top));
    let p_v = softmax_rows(net.head_v.affine(top));
    Ok(Forward { hidden, p_a, p_v })
}
