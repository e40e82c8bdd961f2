//! Flat start, log-domain EM, and mixture growth.
//!
//! Utterances are addressed by index through an accessor closure so
//! callers can keep features in compact storage and materialize one
//! utterance at a time. The E-step runs utterance-parallel; accumulators
//! merge in utterance order, so parameters are bit-reproducible for any
//! thread count.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::parallel;

use super::{
    component_logliks, forward, state_from_components, Gmm, HmmSet, STATES_PER_PHONE, VAR_FLOOR,
};

/// Per-iteration bookkeeping from [`em_iterate`].
#[derive(Debug, Clone, Copy)]
pub struct EmStats {
    /// Total log likelihood of the dataset under the *input* model.
    pub total_log_likelihood: f64,
    pub utterances_used: usize,
    pub utterances_skipped: usize,
}

/// One utterance as the EM code consumes it: features and the global
/// state chain its transcript expands to.
pub type UtteranceData = (Array2<f64>, Vec<usize>);

/// Builds an initial single-Gaussian model by partitioning each
/// utterance's frames uniformly across its chain states.
///
/// Utterances with fewer frames than states are skipped with a warning.
pub fn flat_start<F>(phones: Vec<String>, dim: usize, n_utts: usize, get: F) -> Result<HmmSet>
where
    F: Fn(usize) -> UtteranceData + Sync + Send,
{
    if n_utts == 0 {
        return Err(Error::Invalid("flat start on an empty dataset".into()));
    }
    let n_states = phones.len() * STATES_PER_PHONE;

    struct Acc {
        count: Vec<f64>,
        sum: Array2<f64>,
        sumsq: Array2<f64>,
        skipped: usize,
    }

    let accs = parallel::map_range(n_utts, |u| {
        let (feats, chain) = get(u);
        let mut acc = Acc {
            count: vec![0.0; n_states],
            sum: Array2::zeros((n_states, dim)),
            sumsq: Array2::zeros((n_states, dim)),
            skipped: 0,
        };
        let t = feats.nrows();
        let s = chain.len();
        if t < s {
            acc.skipped = 1;
            return acc;
        }
        for (j, &state) in chain.iter().enumerate() {
            let lo = j * t / s;
            let hi = (j + 1) * t / s;
            for ti in lo..hi {
                acc.count[state] += 1.0;
                for d in 0..dim {
                    let v = feats[[ti, d]];
                    acc.sum[[state, d]] += v;
                    acc.sumsq[[state, d]] += v * v;
                }
            }
        }
        acc
    });

    let mut count = vec![0.0; n_states];
    let mut sum = Array2::zeros((n_states, dim));
    let mut sumsq = Array2::zeros((n_states, dim));
    let mut skipped = 0;
    for acc in accs {
        for s in 0..n_states {
            count[s] += acc.count[s];
        }
        sum += &acc.sum;
        sumsq += &acc.sumsq;
        skipped += acc.skipped;
    }
    if skipped > 0 {
        log::warn!("flat start skipped {skipped} utterances with more states than frames");
    }
    if skipped == n_utts {
        return Err(Error::Invalid("flat start: every utterance was skipped".into()));
    }

    let mut model = HmmSet::uniform(phones, dim);
    for s in 0..n_states {
        if count[s] > 0.0 {
            let mut mean = Array1::zeros(dim);
            let mut var = Array1::zeros(dim);
            for d in 0..dim {
                let m = sum[[s, d]] / count[s];
                mean[d] = m;
                var[d] = (sumsq[[s, d]] / count[s] - m * m).max(VAR_FLOOR);
            }
            *model.emission_mut(s) = Gmm {
                weights: vec![1.0],
                means: mean.insert_axis(ndarray::Axis(0)),
                vars: var.insert_axis(ndarray::Axis(0)),
            };
        }
    }
    Ok(model)
}

/// State occupancy posteriors (probability domain, `T x S`) and the total
/// log likelihood for one utterance under the model.
pub fn state_posteriors(
    model: &HmmSet,
    chain: &[usize],
    feats: &Array2<f64>,
) -> Result<(Array2<f64>, f64)> {
    let (comp_ll, owners) = component_logliks(model, chain, feats.view());
    let state_ll = state_from_components(&comp_ll, &owners, chain.len());
    let (alpha, total) = forward(model, chain, &state_ll)?;
    let beta = backward(model, chain, &state_ll);
    let mut gamma = Array2::zeros(alpha.dim());
    for ((t, j), g) in gamma.indexed_iter_mut() {
        *g = (alpha[[t, j]] + beta[[t, j]] - total).exp();
    }
    Ok((gamma, total))
}

fn backward(model: &HmmSet, chain: &[usize], state_ll: &Array2<f64>) -> Array2<f64> {
    let t = state_ll.nrows();
    let s = chain.len();
    let mut beta = Array2::from_elem((t, s), f64::NEG_INFINITY);
    beta[[t - 1, s - 1]] = model.log_next(chain[s - 1]);
    for ti in (0..t - 1).rev() {
        for j in 0..s {
            let stay = model.log_self(chain[j]) + state_ll[[ti + 1, j]] + beta[[ti + 1, j]];
            let advance = if j + 1 < s {
                model.log_next(chain[j]) + state_ll[[ti + 1, j + 1]] + beta[[ti + 1, j + 1]]
            } else {
                f64::NEG_INFINITY
            };
            beta[[ti, j]] = super::log_add(stay, advance);
        }
    }
    beta
}

struct EmAccumulator {
    trans_self: Vec<f64>,
    trans_next: Vec<f64>,
    /// Per state: per component occupancy.
    occ: Vec<Vec<f64>>,
    /// Per state: `K x D` weighted feature sums.
    sum: Vec<Array2<f64>>,
    sumsq: Vec<Array2<f64>>,
    total_ll: f64,
    used: usize,
    skipped: usize,
}

impl EmAccumulator {
    fn new(model: &HmmSet) -> Self {
        let n = model.num_states();
        let d = model.dim();
        Self {
            trans_self: vec![0.0; n],
            trans_next: vec![0.0; n],
            occ: (0..n).map(|s| vec![0.0; model.emission(s).num_components()]).collect(),
            sum: (0..n)
                .map(|s| Array2::zeros((model.emission(s).num_components(), d)))
                .collect(),
            sumsq: (0..n)
                .map(|s| Array2::zeros((model.emission(s).num_components(), d)))
                .collect(),
            total_ll: 0.0,
            used: 0,
            skipped: 0,
        }
    }

    fn merge(&mut self, other: &EmAccumulator) {
        for s in 0..self.trans_self.len() {
            self.trans_self[s] += other.trans_self[s];
            self.trans_next[s] += other.trans_next[s];
            for k in 0..self.occ[s].len() {
                self.occ[s][k] += other.occ[s][k];
            }
            self.sum[s] += &other.sum[s];
            self.sumsq[s] += &other.sumsq[s];
        }
        self.total_ll += other.total_ll;
        self.used += other.used;
        self.skipped += other.skipped;
    }
}

/// One EM iteration: a forward-backward E-step over every utterance, then
/// the M-step. Returns the updated model and the dataset log likelihood
/// under the input model. States with no occupancy keep their previous
/// parameters.
pub fn em_iterate<F>(
    model: &HmmSet,
    n_utts: usize,
    get: F,
) -> Result<(HmmSet, EmStats)>
where
    F: Fn(usize) -> UtteranceData + Sync + Send,
{
    if n_utts == 0 {
        return Err(Error::Invalid("EM on an empty dataset".into()));
    }
    let accs = parallel::map_range(n_utts, |u| {
        let (feats, chain) = get(u);
        let mut acc = EmAccumulator::new(model);
        match accumulate_utterance(model, &chain, &feats, &mut acc) {
            Ok(()) => acc.used = 1,
            Err(_) => acc.skipped = 1,
        }
        acc
    });

    let mut total = EmAccumulator::new(model);
    for acc in &accs {
        total.merge(acc);
    }
    if total.skipped > 0 {
        log::warn!("EM skipped {} unalignable utterances", total.skipped);
    }
    if total.used == 0 {
        return Err(Error::Invalid("EM: every utterance was skipped".into()));
    }

    let mut new_model = model.clone();
    for s in 0..model.num_states() {
        let c_self = total.trans_self[s];
        let c_next = total.trans_next[s];
        if c_self + c_next > 0.0 {
            let p_self = c_self / (c_self + c_next);
            new_model.set_transitions(s, p_self.ln(), (1.0 - p_self).ln());
        }
        let state_occ: f64 = total.occ[s].iter().sum();
        if state_occ <= 1e-8 {
            continue;
        }
        let old = model.emission(s);
        let k_count = old.num_components();
        let d = model.dim();
        let mut weights = Vec::with_capacity(k_count);
        let mut means = old.means.clone();
        let mut vars = old.vars.clone();
        for k in 0..k_count {
            let occ = total.occ[s][k];
            weights.push(occ / state_occ);
            if occ > 1e-8 {
                for dim in 0..d {
                    let mean = total.sum[s][[k, dim]] / occ;
                    means[[k, dim]] = mean;
                    vars[[k, dim]] =
                        (total.sumsq[s][[k, dim]] / occ - mean * mean).max(VAR_FLOOR);
                }
            }
        }
        *new_model.emission_mut(s) = Gmm { weights, means, vars };
    }

    Ok((
        new_model,
        EmStats {
            total_log_likelihood: total.total_ll,
            utterances_used: total.used,
            utterances_skipped: total.skipped,
        },
    ))
}

fn accumulate_utterance(
    model: &HmmSet,
    chain: &[usize],
    feats: &Array2<f64>,
    acc: &mut EmAccumulator,
) -> Result<()> {
    let t = feats.nrows();
    let s = chain.len();
    let (comp_ll, owners) = component_logliks(model, chain, feats.view());
    let state_ll = state_from_components(&comp_ll, &owners, s);
    let (alpha, total) = forward(model, chain, &state_ll)?;
    let beta = backward(model, chain, &state_ll);

    // Transition posteriors.
    for ti in 0..t - 1 {
        for j in 0..s {
            let stay = alpha[[ti, j]]
                + model.log_self(chain[j])
                + state_ll[[ti + 1, j]]
                + beta[[ti + 1, j]]
                - total;
            if stay > f64::NEG_INFINITY {
                acc.trans_self[chain[j]] += stay.exp();
            }
            if j + 1 < s {
                let advance = alpha[[ti, j]]
                    + model.log_next(chain[j])
                    + state_ll[[ti + 1, j + 1]]
                    + beta[[ti + 1, j + 1]]
                    - total;
                if advance > f64::NEG_INFINITY {
                    acc.trans_next[chain[j]] += advance.exp();
                }
            }
        }
    }
    // The path always exits the final chain state.
    acc.trans_next[chain[s - 1]] += 1.0;

    // Component occupancy posteriors: T x M, then two GEMMs.
    let m = owners.len();
    let mut w = Array2::zeros((t, m));
    for ti in 0..t {
        for (ci, &(pos, _)) in owners.iter().enumerate() {
            let lg = alpha[[ti, pos]] + beta[[ti, pos]] - total + comp_ll[[ti, ci]]
                - state_ll[[ti, pos]];
            if lg > f64::NEG_INFINITY {
                w[[ti, ci]] = lg.exp();
            }
        }
    }
    let squared = feats.mapv(|v| v * v);
    let sums = feats.t().dot(&w); // D x M
    let sqsums = squared.t().dot(&w);
    for (ci, &(pos, k)) in owners.iter().enumerate() {
        let state = chain[pos];
        let occ: f64 = w.column(ci).sum();
        acc.occ[state][k] += occ;
        for d in 0..model.dim() {
            acc.sum[state][[k, d]] += sums[[d, ci]];
            acc.sumsq[state][[k, d]] += sqsums[[d, ci]];
        }
    }
    acc.total_ll += total;
    Ok(())
}

/// Grows each state's mixture to `target_k` components by repeatedly
/// splitting the largest-weight component: weights halve, means move
/// +-0.1 sigma, variances copy.
pub fn split_gaussians(model: &HmmSet, target_k: usize) -> Result<HmmSet> {
    let mut out = model.clone();
    for s in 0..model.num_states() {
        let g = out.emission_mut(s);
        if g.num_components() > target_k {
            return Err(Error::Invalid(format!(
                "state {s} already has {} components > target {target_k}",
                g.num_components()
            )));
        }
        while g.num_components() < target_k {
            let k = g
                .weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let d = g.dim();
            let mut means = Array2::zeros((g.num_components() + 1, d));
            let mut vars = Array2::zeros((g.num_components() + 1, d));
            means.slice_mut(ndarray::s![..g.num_components(), ..]).assign(&g.means);
            vars.slice_mut(ndarray::s![..g.num_components(), ..]).assign(&g.vars);
            for dim in 0..d {
                let sigma = g.vars[[k, dim]].sqrt();
                means[[k, dim]] = g.means[[k, dim]] + 0.1 * sigma;
                means[[g.num_components(), dim]] = g.means[[k, dim]] - 0.1 * sigma;
                vars[[g.num_components(), dim]] = g.vars[[k, dim]];
            }
            let half = g.weights[k] / 2.0;
            g.weights[k] = half;
            g.weights.push(half);
            g.means = means;
            g.vars = vars;
        }
    }
    Ok(out)
}
