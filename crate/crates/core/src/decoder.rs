//! Grammar-constrained Viterbi decoding.
//!
//! The search graph is compiled directly from the slot grammar, the
//! lexicon, and the trained HMM topology: slot boundaries chain word
//! models in sentence order, each word expands to its phones' 3-state
//! chains, word-entry arcs carry the uniform language-model weight
//! `-ln(slot size)`, and exit arcs (epsilon, word-emitting) carry the
//! final state's exit probability. Network posteriors become scaled
//! log-likelihoods by dividing out the state priors; decoding is exact
//! Viterbi over the full graph, with an optional beam for comparison.
//!
//! Arcs are canonicalized at compile time, so scores, tie-breaks, and
//! outputs never depend on build order.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::features::{splice, SPLICE_CONTEXT};
use crate::gmmhmm::HmmSet;
use crate::mtlnet::{
    forward, suppress_matrix, MtlNetwork, SuppressTarget, Variant, SUPPRESSION_EPSILON,
};
use crate::synthdata::{Grammar, Lexicon};

/// Floor for posteriors before the logarithm.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// One transition of the search graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub src: u32,
    pub dst: u32,
    /// Emitting state id, or `None` for an epsilon arc.
    pub state: Option<u32>,
    /// Word produced when this arc is crossed.
    pub word: Option<u32>,
    pub weight: f64,
}

/// Compiled grammar + lexicon + HMM search graph.
#[derive(Debug, Clone)]
pub struct DecodeGraph {
    num_nodes: u32,
    start: u32,
    finals: Vec<u32>,
    words: Vec<String>,
    emitting: Vec<Arc>,
    epsilon: Vec<Arc>,
    num_states: usize,
}

impl DecodeGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes as usize
    }

    pub fn num_emitting_arcs(&self) -> usize {
        self.emitting.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Fewest frames any complete path consumes.
    pub fn min_frames(&self) -> usize {
        let n = self.num_nodes as usize;
        let mut dist = vec![usize::MAX; n];
        dist[self.start as usize] = 0;
        for _ in 0..n {
            let mut changed = false;
            for arc in self.emitting.iter().chain(&self.epsilon) {
                let d = dist[arc.src as usize];
                if d == usize::MAX {
                    continue;
                }
                let step = usize::from(arc.state.is_some());
                if d + step < dist[arc.dst as usize] {
                    dist[arc.dst as usize] = d + step;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        self.finals
            .iter()
            .map(|&f| dist[f as usize])
            .min()
            .unwrap_or(usize::MAX)
    }

    /// Debug dump: one `src dst state word weight` line per arc.
    pub fn to_debug_text(&self) -> String {
        let mut out = String::new();
        for arc in self.emitting.iter().chain(&self.epsilon) {
            let state = arc.state.map_or("-".to_string(), |s| s.to_string());
            let word = arc
                .word
                .map_or("-".to_string(), |w| self.words[w as usize].clone());
            out.push_str(&format!(
                "{} {} {} {} {:.6}\n",
                arc.src, arc.dst, state, word, arc.weight
            ));
        }
        out
    }
}

/// Expands the slot grammar through the lexicon into HMM state chains
/// with the trained model's transition weights.
pub fn compile_graph(grammar: &Grammar, lexicon: &Lexicon, hmm: &HmmSet) -> Result<DecodeGraph> {
    let mut words = Vec::new();
    let mut emitting = Vec::new();
    let mut epsilon = Vec::new();

    let mut next_node = 0u32;
    let mut alloc = || {
        let n = next_node;
        next_node += 1;
        n
    };

    let start = alloc();
    let mut boundary = start;
    for slot in grammar.slots() {
        let lm_weight = -(slot.words.len() as f64).ln();
        let mut slot_exits: Vec<Arc> = Vec::new();
        for word in &slot.words {
            let phones = lexicon.pronunciation(word)?;
            let word_idx = words.len() as u32;
            words.push(word.clone());

            let mut chain = Vec::new();
            for &p in phones {
                for pos in 0..crate::gmmhmm::STATES_PER_PHONE {
                    chain.push(HmmSet::state_of(p, pos));
                }
            }
            let nodes: Vec<u32> = chain.iter().map(|_| alloc()).collect();
            emitting.push(Arc {
                src: boundary,
                dst: nodes[0],
                state: Some(chain[0] as u32),
                word: None,
                weight: lm_weight,
            });
            for (i, &node) in nodes.iter().enumerate() {
                emitting.push(Arc {
                    src: node,
                    dst: node,
                    state: Some(chain[i] as u32),
                    word: None,
                    weight: hmm.log_self(chain[i]),
                });
                if i + 1 < nodes.len() {
                    emitting.push(Arc {
                        src: node,
                        dst: nodes[i + 1],
                        state: Some(chain[i + 1] as u32),
                        word: None,
                        weight: hmm.log_next(chain[i]),
                    });
                }
            }
            slot_exits.push(Arc {
                src: *nodes.last().unwrap(),
                dst: u32::MAX, // patched to the slot's exit boundary below
                state: None,
                word: Some(word_idx),
                weight: hmm.log_next(*chain.last().unwrap()),
            });
        }
        let next_boundary = alloc();
        for mut arc in slot_exits {
            arc.dst = next_boundary;
            epsilon.push(arc);
        }
        boundary = next_boundary;
    }

    // Canonical arc order, so behavior never depends on build order.
    let key = |a: &Arc| {
        (
            a.src,
            a.dst,
            a.state.map_or(-1i64, |s| s as i64),
            a.word.map_or(-1i64, |w| w as i64),
        )
    };
    emitting.sort_by(|a, b| key(a).cmp(&key(b)).then(a.weight.total_cmp(&b.weight)));
    epsilon.sort_by(|a, b| key(a).cmp(&key(b)).then(a.weight.total_cmp(&b.weight)));

    Ok(DecodeGraph {
        num_nodes: next_node,
        start,
        finals: vec![boundary],
        words,
        emitting,
        epsilon,
        num_states: hmm.num_states(),
    })
}

/// Converts posteriors to scaled log-likelihoods:
/// `scale * (log P[t][k] - log prior[k])` with `P` floored at 1e-12.
pub fn posteriors_to_loglik(
    posteriors: ArrayView2<f64>,
    priors: ArrayView1<f64>,
    acoustic_scale: f64,
) -> Result<Array2<f64>> {
    if posteriors.ncols() != priors.len() {
        return Err(Error::Shape(format!(
            "posteriors have {} states, priors {}",
            posteriors.ncols(),
            priors.len()
        )));
    }
    if priors.iter().any(|&p| p <= 0.0) {
        return Err(Error::Invalid("priors must be strictly positive".into()));
    }
    for (r, row) in posteriors.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::NonStochasticRow { row: r, sum });
        }
    }
    let log_priors = priors.mapv(f64::ln);
    let mut out = posteriors.mapv(|p| p.max(POSTERIOR_FLOOR).ln());
    for mut row in out.rows_mut() {
        row -= &log_priors;
    }
    Ok(out * acoustic_scale)
}

/// A decoded word sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    pub score: f64,
    /// Inclusive frame span per word.
    pub word_boundaries: Vec<(usize, usize)>,
}

/// Exact Viterbi over `T` emitting steps with per-step epsilon closure.
pub fn viterbi(graph: &DecodeGraph, logliks: &Array2<f64>) -> Result<Hypothesis> {
    viterbi_with_beam(graph, logliks, None)
}

/// Viterbi with an optional beam: nodes scoring more than `beam` below
/// the per-frame best are pruned. `None` is exact.
pub fn viterbi_with_beam(
    graph: &DecodeGraph,
    logliks: &Array2<f64>,
    beam: Option<f64>,
) -> Result<Hypothesis> {
    let t_max = logliks.nrows();
    if logliks.ncols() != graph.num_states {
        return Err(Error::Shape(format!(
            "loglik matrix has {} states, graph expects {}",
            logliks.ncols(),
            graph.num_states
        )));
    }
    if t_max < graph.min_frames() {
        return Err(Error::NoDecodePath);
    }
    let n = graph.num_nodes();

    let mut score = vec![f64::NEG_INFINITY; n];
    score[graph.start as usize] = 0.0;
    let mut eps_bp: Vec<Vec<Option<u32>>> = Vec::with_capacity(t_max + 1);
    let mut emit_bp: Vec<Vec<Option<u32>>> = Vec::with_capacity(t_max);

    eps_bp.push(close_epsilon(graph, &mut score)?);

    let mut next = vec![f64::NEG_INFINITY; n];
    for t in 0..t_max {
        next.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        let mut bp: Vec<Option<u32>> = vec![None; n];
        for (idx, arc) in graph.emitting.iter().enumerate() {
            let s = score[arc.src as usize];
            if s == f64::NEG_INFINITY {
                continue;
            }
            let state = arc.state.expect("emitting arc") as usize;
            let cand = s + arc.weight + logliks[[t, state]];
            if cand > next[arc.dst as usize] {
                next[arc.dst as usize] = cand;
                bp[arc.dst as usize] = Some(idx as u32);
            }
        }
        if let Some(b) = beam {
            let best = next.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in next.iter_mut() {
                if *v < best - b {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        std::mem::swap(&mut score, &mut next);
        emit_bp.push(bp);
        eps_bp.push(close_epsilon(graph, &mut score)?);
    }

    let mut best: Option<(f64, u32)> = None;
    for &f in &graph.finals {
        let s = score[f as usize];
        if s > f64::NEG_INFINITY && best.is_none_or(|(b, _)| s > b) {
            best = Some((s, f));
        }
    }
    let (best_score, mut node) = best.ok_or(Error::NoDecodePath)?;

    // Backtrace: per layer, unwind epsilon arcs, then one emitting arc.
    let mut rev_words: Vec<(u32, usize)> = Vec::new(); // (word, end frame)
    for t in (0..=t_max).rev() {
        while let Some(arc_idx) = eps_bp[t][node as usize] {
            let arc = &graph.epsilon[arc_idx as usize];
            if let Some(w) = arc.word {
                rev_words.push((w, t.saturating_sub(1)));
            }
            node = arc.src;
        }
        if t > 0 {
            let arc_idx = emit_bp[t - 1][node as usize].expect("broken backtrace");
            let arc = &graph.emitting[arc_idx as usize];
            if let Some(w) = arc.word {
                rev_words.push((w, t - 1));
            }
            node = arc.src;
        }
    }

    rev_words.reverse();
    let mut words = Vec::with_capacity(rev_words.len());
    let mut word_boundaries = Vec::with_capacity(rev_words.len());
    let mut start_frame = 0usize;
    for (w, end_frame) in rev_words {
        words.push(graph.words[w as usize].clone());
        word_boundaries.push((start_frame, end_frame));
        start_frame = end_frame + 1;
    }
    Ok(Hypothesis { words, score: best_score, word_boundaries })
}

/// Relaxes epsilon arcs to a fixed point, recording backpointers.
fn close_epsilon(graph: &DecodeGraph, score: &mut [f64]) -> Result<Vec<Option<u32>>> {
    let mut bp: Vec<Option<u32>> = vec![None; score.len()];
    for pass in 0..=graph.epsilon.len() {
        let mut changed = false;
        for (idx, arc) in graph.epsilon.iter().enumerate() {
            let s = score[arc.src as usize];
            if s == f64::NEG_INFINITY {
                continue;
            }
            let cand = s + arc.weight;
            if cand > score[arc.dst as usize] {
                score[arc.dst as usize] = cand;
                bp[arc.dst as usize] = Some(idx as u32);
                changed = true;
            }
        }
        if !changed {
            return Ok(bp);
        }
        if pass == graph.epsilon.len() {
            return Err(Error::Invalid("epsilon cycle in decode graph".into()));
        }
    }
    Ok(bp)
}

/// Full test-time decode of one utterance from its fused features.
///
/// Applies the test-condition suppression to the 140-dim frames, splices,
/// runs the network, and decodes from the acoustic head only.
pub fn decode_utterance(
    net: &MtlNetwork,
    graph: &DecodeGraph,
    priors: ArrayView1<f64>,
    fused: &Array2<f64>,
    test_modality: Variant,
    acoustic_scale: f64,
) -> Result<Hypothesis> {
    let conditioned = match test_modality {
        Variant::AudioVisual => fused.clone(),
        Variant::AudioOnly => suppress_matrix(fused, SuppressTarget::Visual, SUPPRESSION_EPSILON),
        Variant::VideoOnly => suppress_matrix(fused, SuppressTarget::Audio, SUPPRESSION_EPSILON),
    };
    let spliced = splice(&conditioned, SPLICE_CONTEXT, SPLICE_CONTEXT);
    let out = forward(net, spliced.view())?;
    let logliks = posteriors_to_loglik(out.p_a.view(), priors, acoustic_scale)?;
    viterbi(graph, &logliks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::Slot;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn tiny_lexicon() -> Lexicon {
        Lexicon::parse(
            "phone aa 0\nphone bb 1\nword go aa\nword stop aa bb\nword wait bb\n",
            "<test>",
        )
        .unwrap()
    }

    fn single_word_grammar() -> Grammar {
        Grammar::new(vec![Slot { name: "only".into(), words: vec!["go".into()] }]).unwrap()
    }

    fn random_hmm(rng: &mut ChaCha20Rng, phones: Vec<String>) -> HmmSet {
        let mut hmm = HmmSet::uniform(phones, 1);
        for s in 0..hmm.num_states() {
            let p: f64 = rng.random_range(0.2..0.8);
            hmm.set_transitions(s, p.ln(), (1.0 - p).ln());
        }
        hmm
    }

    #[test]
    fn one_phone_word_graph_shape() {
        let lex = tiny_lexicon();
        let grammar = single_word_grammar();
        let hmm = HmmSet::uniform(vec!["aa".into(), "bb".into()], 1);
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        // Start boundary, three chain nodes, final boundary.
        assert_eq!(g.num_nodes(), 5);
        // Entry + 3 self loops + 2 forwards.
        assert_eq!(g.num_emitting_arcs(), 6);
        // One word-output (epsilon exit) arc.
        assert_eq!(g.epsilon.len(), 1);
        assert!(g.epsilon[0].word.is_some());
        assert_eq!(g.min_frames(), 3);
    }

    #[test]
    fn word_entry_probabilities_sum_to_one() {
        let lex = tiny_lexicon();
        let grammar = Grammar::new(vec![
            Slot {
                name: "a".into(),
                words: vec!["go".into(), "stop".into(), "wait".into()],
            },
            Slot { name: "b".into(), words: vec!["go".into(), "wait".into()] },
        ])
        .unwrap();
        let hmm = HmmSet::uniform(vec!["aa".into(), "bb".into()], 1);
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        let boundaries: std::collections::BTreeSet<u32> =
            std::iter::once(0u32).chain(g.epsilon.iter().map(|a| a.dst)).collect();
        for b in boundaries {
            if b == g.finals[0] {
                continue;
            }
            let total: f64 = g
                .emitting
                .iter()
                .filter(|a| a.src == b)
                .map(|a| a.weight.exp())
                .sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn missing_lexicon_entry_is_an_error() {
        let lex = tiny_lexicon();
        let grammar = Grammar::new(vec![Slot {
            name: "a".into(),
            words: vec!["missing".into()],
        }])
        .unwrap();
        let hmm = HmmSet::uniform(vec!["aa".into()], 1);
        assert!(matches!(
            compile_graph(&grammar, &lex, &hmm),
            Err(Error::UnknownWord(w)) if w == "missing"
        ));
    }

    #[test]
    fn posteriors_to_loglik_cases() {
        let uniform = Array2::from_elem((3, 4), 0.25);
        let priors = Array1::from_elem(4, 0.25);
        let out = posteriors_to_loglik(uniform.view(), priors.view(), 1.0).unwrap();
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-12);
        }
        let scaled = posteriors_to_loglik(uniform.view(), priors.view(), 0.0).unwrap();
        assert!(scaled.iter().all(|&v| v == 0.0));

        let p = ndarray::array![[0.5, 0.5]];
        let pri = ndarray::array![0.25, 0.75];
        let ll = posteriors_to_loglik(p.view(), pri.view(), 1.0).unwrap();
        assert_abs_diff_eq!(ll[[0, 0]], 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        let p = Array2::from_elem((2, 3), 0.5);
        let priors = Array1::from_elem(3, 1.0 / 3.0);
        assert!(matches!(
            posteriors_to_loglik(p.view(), priors.view(), 1.0),
            Err(Error::NonStochasticRow { row: 0, .. })
        ));
    }

    #[test]
    fn single_word_grammar_always_decodes_it() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let lex = tiny_lexicon();
        let grammar = single_word_grammar();
        let hmm = random_hmm(&mut rng, vec!["aa".into(), "bb".into()]);
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        for t in [3usize, 5, 9] {
            let ll = Array2::from_shape_fn((t, hmm.num_states()), |_| {
                rng.random::<f64>() * 4.0 - 2.0
            });
            let hyp = viterbi(&g, &ll).unwrap();
            assert_eq!(hyp.words, vec!["go".to_string()]);
            assert_eq!(hyp.word_boundaries, vec![(0, t - 1)]);
        }
    }

    #[test]
    fn too_short_input_has_no_path() {
        let lex = tiny_lexicon();
        let grammar = single_word_grammar();
        let hmm = HmmSet::uniform(vec!["aa".into(), "bb".into()], 1);
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        let ll = Array2::zeros((2, hmm.num_states()));
        assert!(matches!(viterbi(&g, &ll), Err(Error::NoDecodePath)));
    }

    /// Brute force oracle: walk every path with exactly `T` emitting arcs.
    fn brute_force(graph: &DecodeGraph, logliks: &Array2<f64>) -> Option<(f64, Vec<String>)> {
        struct Ctx<'a> {
            graph: &'a DecodeGraph,
            logliks: &'a Array2<f64>,
            best: Option<(f64, Vec<u32>)>,
        }
        fn go(ctx: &mut Ctx, node: u32, t: usize, score: f64, words: &mut Vec<u32>) {
            let t_max = ctx.logliks.nrows();
            if t == t_max && ctx.graph.finals.contains(&node) {
                if ctx.best.as_ref().is_none_or(|(b, _)| score > *b) {
                    ctx.best = Some((score, words.clone()));
                }
            }
            if t < t_max {
                for arc in &ctx.graph.emitting {
                    if arc.src == node {
                        let state = arc.state.unwrap() as usize;
                        if let Some(w) = arc.word {
                            words.push(w);
                        }
                        go(
                            ctx,
                            arc.dst,
                            t + 1,
                            score + arc.weight + ctx.logliks[[t, state]],
                            words,
                        );
                        if arc.word.is_some() {
                            words.pop();
                        }
                    }
                }
            }
            for arc in &ctx.graph.epsilon {
                if arc.src == node {
                    if let Some(w) = arc.word {
                        words.push(w);
                    }
                    go(ctx, arc.dst, t, score + arc.weight, words);
                    if arc.word.is_some() {
                        words.pop();
                    }
                }
            }
        }
        let mut ctx = Ctx { graph, logliks, best: None };
        let mut words = Vec::new();
        go(&mut ctx, graph.start, 0, 0.0, &mut words);
        ctx.best
            .map(|(s, ws)| (s, ws.iter().map(|&w| graph.words[w as usize].clone()).collect()))
    }

    #[test]
    fn viterbi_matches_exhaustive_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let lex = tiny_lexicon();
        for trial in 0..200 {
            let grammar = if rng.random::<bool>() {
                Grammar::new(vec![Slot {
                    name: "a".into(),
                    words: vec!["go".into(), "stop".into()],
                }])
                .unwrap()
            } else {
                Grammar::new(vec![
                    Slot { name: "a".into(), words: vec!["go".into(), "wait".into()] },
                    Slot { name: "b".into(), words: vec!["wait".into()] },
                ])
                .unwrap()
            };
            let hmm = random_hmm(&mut rng, vec!["aa".into(), "bb".into()]);
            let g = compile_graph(&grammar, &lex, &hmm).unwrap();
            let t = rng.random_range(g.min_frames()..=8);
            let ll = Array2::from_shape_fn((t, hmm.num_states()), |_| {
                rng.random::<f64>() * 4.0 - 2.0
            });
            let hyp = viterbi(&g, &ll).unwrap();
            let (brute_score, brute_words) = brute_force(&g, &ll).unwrap();
            assert_abs_diff_eq!(hyp.score, brute_score, epsilon = 1e-9);
            assert_eq!(hyp.words, brute_words, "trial {trial}");
        }
    }

    #[test]
    fn loglik_shift_moves_score_not_words() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let lex = tiny_lexicon();
        let grammar = Grammar::new(vec![Slot {
            name: "a".into(),
            words: vec!["go".into(), "stop".into(), "wait".into()],
        }])
        .unwrap();
        let hmm = random_hmm(&mut rng, vec!["aa".into(), "bb".into()]);
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        let t = 7;
        let ll = Array2::from_shape_fn((t, hmm.num_states()), |_| rng.random::<f64>());
        let base = viterbi(&g, &ll).unwrap();
        let c = 3.25;
        let shifted = viterbi(&g, &(&ll + c)).unwrap();
        assert_eq!(base.words, shifted.words);
        assert_abs_diff_eq!(shifted.score, base.score + t as f64 * c, epsilon = 1e-9);
    }

    #[test]
    fn word_listing_order_does_not_change_decodes() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let lex = tiny_lexicon();
        let grammar1 = Grammar::new(vec![Slot {
            name: "a".into(),
            words: vec!["stop".into(), "go".into(), "wait".into()],
        }])
        .unwrap();
        let grammar2 = Grammar::new(vec![Slot {
            name: "a".into(),
            words: vec!["go".into(), "wait".into(), "stop".into()],
        }])
        .unwrap();
        let hmm = random_hmm(&mut rng, vec!["aa".into(), "bb".into()]);
        let g1 = compile_graph(&grammar1, &lex, &hmm).unwrap();
        let g2 = compile_graph(&grammar2, &lex, &hmm).unwrap();
        for _ in 0..20 {
            let t = rng.random_range(3..8usize);
            let ll = Array2::from_shape_fn((t, hmm.num_states()), |_| {
                rng.random::<f64>() * 2.0 - 1.0
            });
            let h1 = viterbi(&g1, &ll).unwrap();
            let h2 = viterbi(&g2, &ll).unwrap();
            assert_eq!(h1.words, h2.words);
            assert_abs_diff_eq!(h1.score, h2.score, epsilon = 1e-9);
        }
    }

    #[test]
    fn wide_beam_equals_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let lex = tiny_lexicon();
        let grammar = Grammar::new(vec![
            Slot { name: "a".into(), words: vec!["go".into(), "stop".into()] },
            Slot { name: "b".into(), words: vec!["wait".into(), "go".into()] },
        ])
        .unwrap();
        let hmm = random_hmm(&mut rng, vec!["aa".into(), "bb".into()]);
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        for _ in 0..20 {
            let t = rng.random_range(g.min_frames()..12);
            let ll = Array2::from_shape_fn((t, hmm.num_states()), |_| {
                rng.random::<f64>() * 4.0 - 2.0
            });
            let exact = viterbi(&g, &ll).unwrap();
            let beamed = viterbi_with_beam(&g, &ll, Some(1e9)).unwrap();
            assert_eq!(exact, beamed);
        }
    }

    #[test]
    fn viterbi_bounded_by_forward_logsumexp() {
        // Independent forward pass in the log-sum semiring.
        fn forward_score(graph: &DecodeGraph, ll: &Array2<f64>) -> f64 {
            let n = graph.num_nodes();
            let logadd = crate::gmmhmm::log_add;
            let close = |score: &mut Vec<f64>| {
                for _ in 0..=graph.epsilon.len() {
                    let mut changed = false;
                    for arc in &graph.epsilon {
                        let s = score[arc.src as usize];
                        if s == f64::NEG_INFINITY {
                            continue;
                        }
                        let cand = s + arc.weight;
                        let cur = score[arc.dst as usize];
                        let merged = logadd(cur, cand);
                        if (merged - cur).abs() > 1e-12 || cur == f64::NEG_INFINITY {
                            if merged != cur {
                                score[arc.dst as usize] = merged;
                                changed = true;
                            }
                        }
                    }
                    if !changed {
                        break;
                    }
                }
            };
            let mut score = vec![f64::NEG_INFINITY; n];
            score[graph.start as usize] = 0.0;
            close(&mut score);
            for t in 0..ll.nrows() {
                let mut next = vec![f64::NEG_INFINITY; n];
                for arc in &graph.emitting {
                    let s = score[arc.src as usize];
                    if s == f64::NEG_INFINITY {
                        continue;
                    }
                    let state = arc.state.unwrap() as usize;
                    next[arc.dst as usize] =
                        logadd(next[arc.dst as usize], s + arc.weight + ll[[t, state]]);
                }
                score = next;
                close(&mut score);
            }
            graph
                .finals
                .iter()
                .fold(f64::NEG_INFINITY, |acc, &f| logadd(acc, score[f as usize]))
        }

        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let lex = tiny_lexicon();
        let grammar = Grammar::new(vec![Slot {
            name: "a".into(),
            words: vec!["go".into(), "stop".into()],
        }])
        .unwrap();
        let hmm = random_hmm(&mut rng, vec!["aa".into(), "bb".into()]);
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        for _ in 0..30 {
            let t = rng.random_range(g.min_frames()..10);
            let ll = Array2::from_shape_fn((t, hmm.num_states()), |_| {
                rng.random::<f64>() * 2.0 - 1.0
            });
            let hyp = viterbi(&g, &ll).unwrap();
            let fwd = forward_score(&g, &ll);
            assert!(hyp.score <= fwd + 1e-10, "{} > {}", hyp.score, fwd);
        }
    }

    #[test]
    fn default_grammar_paths_emit_six_words() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let lex = Lexicon::default_grid();
        let grammar = Grammar::default_grid();
        let hmm = random_hmm(
            &mut rng,
            (0..lex.phone_count()).map(|i| lex.phone_name(i).to_string()).collect(),
        );
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        let t = 200;
        let ll = Array2::from_shape_fn((t, hmm.num_states()), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        });
        let hyp = viterbi(&g, &ll).unwrap();
        assert_eq!(hyp.words.len(), 6);
        assert!(grammar.accepts(&hyp.words));
        assert_eq!(hyp.word_boundaries[0].0, 0);
        assert_eq!(hyp.word_boundaries[5].1, t - 1);
        for i in 1..6 {
            assert_eq!(hyp.word_boundaries[i].0, hyp.word_boundaries[i - 1].1 + 1);
        }
    }

    #[test]
    fn identical_inputs_decode_identically() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let lex = tiny_lexicon();
        let grammar = Grammar::new(vec![Slot {
            name: "a".into(),
            words: vec!["go".into(), "stop".into()],
        }])
        .unwrap();
        let hmm = random_hmm(&mut rng, vec!["aa".into(), "bb".into()]);
        let g = compile_graph(&grammar, &lex, &hmm).unwrap();
        let ll = Array2::from_shape_fn((8, hmm.num_states()), |_| rng.random::<f64>());
        assert_eq!(viterbi(&g, &ll).unwrap(), viterbi(&g, &ll).unwrap());
    }
}
