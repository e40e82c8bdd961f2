//! Bootstrap GMM/HMM models and the frame-label streams they produce.
//!
//! Each phone is a 3-state left-to-right HMM (self-loop + forward
//! transition per state) with a diagonal-covariance GMM emission per
//! state. Global state ids are `phone_id * 3 + position`, contiguous
//! over the whole inventory; they double as the class labels for both
//! network heads. The same code trains the acoustic model (on audio
//! features) and the visual model (on DCT features): nothing but the
//! feature stream differs.
//!
//! The training recipe lives in [`em`]: flat start, expectation-
//! maximization in the log domain, mixture growth by splitting, and
//! forced alignment ([`align`]) plus a supervised linear projection
//! ([`lda`]).

pub mod align;
pub mod em;
pub mod lda;

pub use align::{forced_align, state_priors, Alignment, Modality};
pub use em::{em_iterate, flat_start, split_gaussians, EmStats};
pub use lda::{estimate_lda, estimate_lda_from, LdaAccumulator, LdaTransform};

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::synthdata::Lexicon;

/// Left-to-right states per phone.
pub const STATES_PER_PHONE: usize = 3;
/// Floor applied to every Gaussian variance.
pub const VAR_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.8378770664093453;

/// Numerically stable log(exp(a) + exp(b)).
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone)]
pub struct Gmm {
    /// Mixture weights, a simplex.
    pub weights: Vec<f64>,
    /// Component means, `K x D`.
    pub means: Array2<f64>,
    /// Component variances, `K x D`, each at least [`VAR_FLOOR`].
    pub vars: Array2<f64>,
}

impl Gmm {
    /// A unit Gaussian, the flat-start default for unseen states.
    pub fn unit(dim: usize) -> Self {
        Self {
            weights: vec![1.0],
            means: Array2::zeros((1, dim)),
            vars: Array2::ones((1, dim)),
        }
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Log density of one frame under one component.
    pub fn component_log_density(&self, k: usize, x: ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.dim() {
            let var = self.vars[[k, d]];
            let diff = x[d] - self.means[[k, d]];
            acc += LN_2PI + var.ln() + diff * diff / var;
        }
        -0.5 * acc
    }

    /// Log density of one frame under the mixture.
    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let mut total = f64::NEG_INFINITY;
        for k in 0..self.num_components() {
            if self.weights[k] > 0.0 {
                total = log_add(total, self.weights[k].ln() + self.component_log_density(k, x));
            }
        }
        total
    }
}

/// The full monophone model set for one modality.
#[derive(Debug, Clone)]
pub struct HmmSet {
    phones: Vec<String>,
    dim: usize,
    /// Per global state: log self-loop probability.
    log_self: Vec<f64>,
    /// Per global state: log forward/exit probability.
    log_next: Vec<f64>,
    emissions: Vec<Gmm>,
}

impl HmmSet {
    /// Uniform-transition model with unit-Gaussian emissions.
    pub fn uniform(phones: Vec<String>, dim: usize) -> Self {
        let n = phones.len() * STATES_PER_PHONE;
        Self {
            phones,
            dim,
            log_self: vec![0.5f64.ln(); n],
            log_next: vec![0.5f64.ln(); n],
            emissions: (0..n).map(|_| Gmm::unit(dim)).collect(),
        }
    }

    pub fn from_parts(
        phones: Vec<String>,
        dim: usize,
        log_self: Vec<f64>,
        log_next: Vec<f64>,
        emissions: Vec<Gmm>,
    ) -> Result<Self> {
        let n = phones.len() * STATES_PER_PHONE;
        if log_self.len() != n || log_next.len() != n || emissions.len() != n {
            return Err(Error::Shape(format!(
                "model with {} phones needs {n} states, got {}/{}/{}",
                phones.len(),
                log_self.len(),
                log_next.len(),
                emissions.len()
            )));
        }
        for (s, (&a, &b)) in log_self.iter().zip(&log_next).enumerate() {
            let sum = a.exp() + b.exp();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::Invalid(format!(
                    "state {s}: outgoing probabilities sum to {sum}"
                )));
            }
        }
        if emissions.iter().any(|g| g.dim() != dim) {
            return Err(Error::Shape("emission dimension mismatch".into()));
        }
        Ok(Self { phones, dim, log_self, log_next, emissions })
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_states(&self) -> usize {
        self.phones.len() * STATES_PER_PHONE
    }

    /// Global id of `(phone, position)`.
    pub fn state_of(phone: usize, position: usize) -> usize {
        phone * STATES_PER_PHONE + position
    }

    /// `(phone, position)` of a global state id.
    pub fn phone_position(state: usize) -> (usize, usize) {
        (state / STATES_PER_PHONE, state % STATES_PER_PHONE)
    }

    pub fn log_self(&self, state: usize) -> f64 {
        self.log_self[state]
    }

    pub fn log_next(&self, state: usize) -> f64 {
        self.log_next[state]
    }

    pub fn emission(&self, state: usize) -> &Gmm {
        &self.emissions[state]
    }

    pub(crate) fn emission_mut(&mut self, state: usize) -> &mut Gmm {
        &mut self.emissions[state]
    }

    pub(crate) fn set_transitions(&mut self, state: usize, log_self: f64, log_next: f64) {
        self.log_self[state] = log_self;
        self.log_next[state] = log_next;
    }

    /// Serializes all parameters in a fixed order, for hashing and tests.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in 0..self.num_states() {
            out.extend_from_slice(&self.log_self[s].to_le_bytes());
            out.extend_from_slice(&self.log_next[s].to_le_bytes());
            let g = &self.emissions[s];
            for k in 0..g.num_components() {
                out.extend_from_slice(&g.weights[k].to_le_bytes());
                for d in 0..g.dim() {
                    out.extend_from_slice(&g.means[[k, d]].to_le_bytes());
                    out.extend_from_slice(&g.vars[[k, d]].to_le_bytes());
                }
            }
        }
        out
    }
}

/// Global state chain for a transcript: three states per phone, in order.
pub fn transcript_states(lexicon: &Lexicon, words: &[String]) -> Result<Vec<usize>> {
    let mut chain = Vec::new();
    for word in words {
        for &phone in lexicon.pronunciation(word)? {
            for pos in 0..STATES_PER_PHONE {
                chain.push(HmmSet::state_of(phone, pos));
            }
        }
    }
    Ok(chain)
}

/// Per-frame log emission likelihoods for a state chain: `T x S`.
///
/// Expands the diagonal Gaussians into quadratic/linear/constant parts so
/// the frame loop becomes two matrix products.
pub fn emission_logliks(model: &HmmSet, chain: &[usize], feats: ArrayView2<f64>) -> Array2<f64> {
    let t = feats.nrows();
    let d = feats.ncols();
    debug_assert_eq!(d, model.dim());

    // Flatten (chain position, component) pairs.
    let mut owners: Vec<(usize, f64)> = Vec::new(); // (chain pos, log weight)
    let mut quad = Vec::new();
    let mut lin = Vec::new();
    let mut consts = Vec::new();
    for (pos, &state) in chain.iter().enumerate() {
        let g = model.emission(state);
        for k in 0..g.num_components() {
            if g.weights[k] <= 0.0 {
                continue;
            }
            let mut c = 0.0;
            let mut qrow = Vec::with_capacity(d);
            let mut lrow = Vec::with_capacity(d);
            for dim in 0..d {
                let var = g.vars[[k, dim]];
                let mean = g.means[[k, dim]];
                qrow.push(-0.5 / var);
                lrow.push(mean / var);
                c += LN_2PI + var.ln() + mean * mean / var;
            }
            owners.push((pos, g.weights[k].ln()));
            quad.extend_from_slice(&qrow);
            lin.extend_from_slice(&lrow);
            consts.push(-0.5 * c);
        }
    }
    let m = owners.len();
    let quad = Array2::from_shape_vec((m, d), quad).unwrap();
    let lin = Array2::from_shape_vec((m, d), lin).unwrap();

    let squared = feats.mapv(|v| v * v);
    let comp_ll = squared.dot(&quad.t()) + feats.dot(&lin.t());

    let mut out = Array2::from_elem((t, chain.len()), f64::NEG_INFINITY);
    for ti in 0..t {
        for (ci, &(pos, log_w)) in owners.iter().enumerate() {
            let ll = comp_ll[[ti, ci]] + consts[ci] + log_w;
            out[[ti, pos]] = log_add(out[[ti, pos]], ll);
        }
    }
    out
}

/// Per-(chain position, component) log likelihoods, for E-step posteriors.
/// Returns the `T x M` matrix plus the `(chain pos, log weight)` owner of
/// each flattened component column.
pub(crate) fn component_logliks(
    model: &HmmSet,
    chain: &[usize],
    feats: ArrayView2<f64>,
) -> (Array2<f64>, Vec<(usize, usize)>) {
    let t = feats.nrows();
    let d = feats.ncols();
    let mut owners: Vec<(usize, usize)> = Vec::new(); // (chain pos, component)
    let mut log_w = Vec::new();
    let mut quad = Vec::new();
    let mut lin = Vec::new();
    let mut consts = Vec::new();
    for (pos, &state) in chain.iter().enumerate() {
        let g = model.emission(state);
        for k in 0..g.num_components() {
            if g.weights[k] <= 0.0 {
                continue;
            }
            let mut c = 0.0;
            for dim in 0..d {
                let var = g.vars[[k, dim]];
                let mean = g.means[[k, dim]];
                quad.push(-0.5 / var);
                lin.push(mean / var);
                c += LN_2PI + var.ln() + mean * mean / var;
            }
            owners.push((pos, k));
            log_w.push(g.weights[k].ln());
            consts.push(-0.5 * c);
        }
    }
    let m = owners.len();
    let quad = Array2::from_shape_vec((m, d), quad).unwrap();
    let lin = Array2::from_shape_vec((m, d), lin).unwrap();
    let squared = feats.mapv(|v| v * v);
    let mut comp_ll = squared.dot(&quad.t()) + feats.dot(&lin.t());
    for ti in 0..t {
        for ci in 0..m {
            comp_ll[[ti, ci]] += consts[ci] + log_w[ci];
        }
    }
    (comp_ll, owners)
}

/// State-level logliks derived from component-level ones.
pub(crate) fn state_from_components(
    comp_ll: &Array2<f64>,
    owners: &[(usize, usize)],
    chain_len: usize,
) -> Array2<f64> {
    let t = comp_ll.nrows();
    let mut out = Array2::from_elem((t, chain_len), f64::NEG_INFINITY);
    for ti in 0..t {
        for (ci, &(pos, _)) in owners.iter().enumerate() {
            out[[ti, pos]] = log_add(out[[ti, pos]], comp_ll[[ti, ci]]);
        }
    }
    out
}

/// Log-domain forward pass over a left-to-right chain. Returns the alpha
/// matrix and the total log likelihood (including the final exit
/// transition out of the last state).
pub fn forward(
    model: &HmmSet,
    chain: &[usize],
    loglik: &Array2<f64>,
) -> Result<(Array2<f64>, f64)> {
    let t = loglik.nrows();
    let s = chain.len();
    if t < s {
        return Err(Error::TooFewFrames { frames: t, states: s });
    }
    let mut alpha = Array2::from_elem((t, s), f64::NEG_INFINITY);
    alpha[[0, 0]] = loglik[[0, 0]];
    for ti in 1..t {
        // Only states reachable at time ti and able to finish in time matter,
        // but the full band is cheap at these sizes.
        for j in 0..s {
            let stay = alpha[[ti - 1, j]] + model.log_self(chain[j]);
            let enter = if j > 0 {
                alpha[[ti - 1, j - 1]] + model.log_next(chain[j - 1])
            } else {
                f64::NEG_INFINITY
            };
            alpha[[ti, j]] = log_add(stay, enter) + loglik[[ti, j]];
        }
    }
    let total = alpha[[t - 1, s - 1]] + model.log_next(chain[s - 1]);
    if total == f64::NEG_INFINITY {
        return Err(Error::NoDecodePath);
    }
    Ok((alpha, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn state_indexing_roundtrip() {
        for phone in 0..27 {
            for pos in 0..STATES_PER_PHONE {
                let s = HmmSet::state_of(phone, pos);
                assert_eq!(HmmSet::phone_position(s), (phone, pos));
            }
        }
    }

    #[test]
    fn transitions_sum_to_one() {
        let m = HmmSet::uniform(vec!["a".into(), "b".into()], 4);
        for s in 0..m.num_states() {
            assert_abs_diff_eq!(
                m.log_self(s).exp() + m.log_next(s).exp(),
                1.0,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn gmm_log_density_matches_direct_formula() {
        let g = Gmm {
            weights: vec![0.25, 0.75],
            means: array![[0.0, 1.0], [2.0, -1.0]],
            vars: array![[1.0, 0.5], [2.0, 1.5]],
        };
        let x = array![0.3, 0.4];
        let direct = {
            let mut sum = 0.0;
            for k in 0..2 {
                let mut comp = 1.0;
                for d in 0..2 {
                    let var = g.vars[[k, d]];
                    let diff = x[d] - g.means[[k, d]];
                    comp *= (-0.5 * diff * diff / var).exp()
                        / (std::f64::consts::TAU * var).sqrt();
                }
                sum += g.weights[k] * comp;
            }
            sum.ln()
        };
        assert_abs_diff_eq!(g.log_density(x.view()), direct, epsilon = 1e-12);
    }

    #[test]
    fn emission_logliks_match_per_frame_eval() {
        let mut m = HmmSet::uniform(vec!["p".into()], 3);
        *m.emission_mut(0) = Gmm {
            weights: vec![0.6, 0.4],
            means: array![[0.1, -0.2, 0.3], [1.0, 0.5, -0.5]],
            vars: array![[0.8, 1.1, 0.9], [1.4, 0.7, 1.2]],
        };
        let chain = vec![0usize, 1, 2];
        let feats = array![[0.4, 0.2, -0.1], [1.2, 0.0, 0.5], [-0.3, 0.9, 0.1]];
        let fast = emission_logliks(&m, &chain, feats.view());
        for t in 0..3 {
            for (pos, &state) in chain.iter().enumerate() {
                let slow = m.emission(state).log_density(feats.row(t));
                assert_abs_diff_eq!(fast[[t, pos]], slow, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.0), -1.0);
        assert_eq!(log_add(-1.0, f64::NEG_INFINITY), -1.0);
        assert_abs_diff_eq!(log_add(0.0, 0.0), 2f64.ln(), epsilon = 1e-15);
    }
}
