//! Topic-model core: softmax-linked topic/word distributions, the corpus
//! log-likelihood given assignments, stochastic topic resampling, and a
//! standalone collapsed-Gibbs LDA used to seed the LDAFirst baseline.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::rng::rng_from_seed;
use crate::textprep::{ItemDocument, Vocabulary};

/// Per-document, per-position topic assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicState {
    pub z: Vec<Vec<usize>>,
    pub k: usize,
}

impl TopicState {
    /// Uniform random assignments, one per word position.
    pub fn uniform_random(docs: &[ItemDocument], k: usize, seed: u64) -> TopicState {
        assert!(k >= 1);
        let mut rng = rng_from_seed(seed);
        let z = docs
            .iter()
            .map(|d| (0..d.words.len()).map(|_| rng.random_range(0..k)).collect())
            .collect();
        TopicState { z, k }
    }

    pub fn matches_corpus(&self, docs: &[ItemDocument]) -> bool {
        self.z.len() == docs.len()
            && self
                .z
                .iter()
                .zip(docs)
                .all(|(zs, d)| zs.len() == d.words.len() && zs.iter().all(|&t| t < self.k))
    }
}

/// Row-stochastic document-topic and topic-word matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicDistributions {
    /// M x K document-topic rows.
    pub theta: Array2<f64>,
    /// K x V topic-word rows.
    pub phi: Array2<f64>,
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = scores.dim();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = scores.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out[[r, c]] = e;
            sum += e;
        }
        for c in 0..cols {
            out[[r, c]] /= sum;
        }
    }
    out
}

/// Document-topic rows from the first `k` item-factor columns:
/// theta[i][t] = exp(kappa q[i][t]) / sum_t' exp(kappa q[i][t']).
///
/// Stabilized by subtracting the row maximum before exponentiating, so rows
/// stay stochastic for scores far beyond the bare-exp overflow point.
pub fn theta_from_q(q: &Array2<f64>, kappa: f64, k: usize) -> Result<Array2<f64>> {
    if !kappa.is_finite() {
        return Err(Error::NonFinite { block: "kappa" });
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { block: "q" });
    }
    if q.ncols() < k || k == 0 {
        return Err(Error::ShapeMismatch(format!(
            "need at least {k} factor columns, Q has {}",
            q.ncols()
        )));
    }
    let mut scores = Array2::zeros((q.nrows(), k));
    for i in 0..q.nrows() {
        for t in 0..k {
            scores[[i, t]] = kappa * q[[i, t]];
        }
    }
    Ok(softmax_rows(&scores))
}

/// Topic-word rows as the row-wise softmax of the natural parameters.
pub fn phi_from_psi(psi: &Array2<f64>) -> Result<Array2<f64>> {
    if psi.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { block: "psi" });
    }
    Ok(softmax_rows(psi))
}

/// Both distributions derived from the current parameters.
pub fn distributions_from_params(params: &ParamSet) -> Result<TopicDistributions> {
    Ok(TopicDistributions {
        theta: theta_from_q(&params.q, params.kappa, params.k())?,
        phi: phi_from_psi(&params.psi)?,
    })
}

/// Log-likelihood of the corpus given assignments:
/// sum over documents and positions of log(theta[d][z] * phi[z][w]).
pub fn corpus_log_likelihood(
    docs: &[ItemDocument],
    dists: &TopicDistributions,
    state: &TopicState,
) -> f64 {
    let mut total = 0.0;
    for (d, doc) in docs.iter().enumerate() {
        let zs = &state.z[d];
        for (j, &w) in doc.words.iter().enumerate() {
            let z = zs[j];
            total += (dists.theta[[d, z]] * dists.phi[[z, w]]).ln();
        }
    }
    total
}

/// Draw one topic per word position with weight theta[d][k] * phi[k][w],
/// iterating documents and positions in index order; returns the new state
/// and the log-likelihood of the drawn assignment.
pub fn sample_topics_traced(
    docs: &[ItemDocument],
    dists: &TopicDistributions,
    seed: u64,
) -> (TopicState, f64) {
    let k = dists.theta.ncols();
    let mut rng = rng_from_seed(seed);
    let mut log_lik = 0.0;
    let mut weights = vec![0.0; k];
    let z = docs
        .iter()
        .enumerate()
        .map(|(d, doc)| {
            doc.words
                .iter()
                .map(|&w| {
                    let mut total = 0.0;
                    for t in 0..k {
                        weights[t] = dists.theta[[d, t]] * dists.phi[[t, w]];
                        total += weights[t];
                    }
                    assert!(
                        total > 0.0,
                        "all-zero topic weights for word {w} in document {d}"
                    );
                    let u = rng.random::<f64>() * total;
                    let mut cum = 0.0;
                    let mut chosen = None;
                    let mut last_positive = 0;
                    for (t, &wt) in weights.iter().enumerate() {
                        if wt > 0.0 {
                            last_positive = t;
                        }
                        cum += wt;
                        if u < cum {
                            chosen = Some(t);
                            break;
                        }
                    }
                    let t = chosen.unwrap_or(last_positive);
                    log_lik += (dists.theta[[d, t]] * dists.phi[[t, w]]).ln();
                    t
                })
                .collect()
        })
        .collect();
    (TopicState { z, k }, log_lik)
}

/// [`sample_topics_traced`] without the likelihood.
pub fn sample_topics(docs: &[ItemDocument], dists: &TopicDistributions, seed: u64) -> TopicState {
    sample_topics_traced(docs, dists, seed).0
}

struct GibbsCounts {
    doc_topic: Array2<f64>,
    topic_word: Array2<f64>,
    topic_total: Vec<f64>,
}

fn count_from_state(docs: &[ItemDocument], state: &TopicState, k: usize, v: usize) -> GibbsCounts {
    let mut doc_topic = Array2::zeros((docs.len(), k));
    let mut topic_word = Array2::zeros((k, v));
    let mut topic_total = vec![0.0; k];
    for (d, doc) in docs.iter().enumerate() {
        for (j, &w) in doc.words.iter().enumerate() {
            let t = state.z[d][j];
            doc_topic[[d, t]] += 1.0;
            topic_word[[t, w]] += 1.0;
            topic_total[t] += 1.0;
        }
    }
    GibbsCounts {
        doc_topic,
        topic_word,
        topic_total,
    }
}

/// Collapsed-Gibbs LDA: sweeps reassign every word position from the
/// count-based conditional; estimates are the smoothed posterior means
/// theta[d][t] = (n_dt + gamma) / (N_d + K gamma) and
/// phi[t][w] = (n_tw + nu) / (n_t + V nu).
pub fn fit_lda_gibbs(
    docs: &[ItemDocument],
    k: usize,
    v: usize,
    gamma: f64,
    nu: f64,
    n_sweeps: usize,
    seed: u64,
) -> Result<(TopicDistributions, TopicState)> {
    if k < 1 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if v < 1 {
        return Err(Error::InvalidArgument("V must be >= 1".into()));
    }
    if gamma <= 0.0 || nu <= 0.0 {
        return Err(Error::InvalidArgument(
            "Dirichlet parameters must be positive".into(),
        ));
    }
    if let Some(w) = docs.iter().flat_map(|d| d.words.iter()).find(|&&w| w >= v) {
        return Err(Error::ShapeMismatch(format!(
            "word index {w} outside vocabulary of size {v}"
        )));
    }
    let mut state = TopicState::uniform_random(docs, k, seed);
    let mut counts = count_from_state(docs, &state, k, v);
    let mut rng = rng_from_seed(crate::rng::derive_seed(seed, "gibbs.sweeps"));
    let mut weights = vec![0.0; k];
    let v_nu = v as f64 * nu;
    for _sweep in 0..n_sweeps {
        for d in 0..docs.len() {
            for j in 0..docs[d].words.len() {
                let w = docs[d].words[j];
                let old = state.z[d][j];
                counts.doc_topic[[d, old]] -= 1.0;
                counts.topic_word[[old, w]] -= 1.0;
                counts.topic_total[old] -= 1.0;
                let mut total = 0.0;
                for t in 0..k {
                    let wt = (counts.doc_topic[[d, t]] + gamma)
                        * (counts.topic_word[[t, w]] + nu)
                        / (counts.topic_total[t] + v_nu);
                    weights[t] = wt;
                    total += wt;
                }
                let u = rng.random::<f64>() * total;
                let mut cum = 0.0;
                let mut chosen = k - 1;
                for (t, &wt) in weights.iter().enumerate() {
                    cum += wt;
                    if u < cum {
                        chosen = t;
                        break;
                    }
                }
                state.z[d][j] = chosen;
                counts.doc_topic[[d, chosen]] += 1.0;
                counts.topic_word[[chosen, w]] += 1.0;
                counts.topic_total[chosen] += 1.0;
            }
        }
        #[cfg(debug_assertions)]
        {
            let fresh = count_from_state(docs, &state, k, v);
            debug_assert_eq!(fresh.doc_topic, counts.doc_topic, "doc-topic cache drifted");
            debug_assert_eq!(fresh.topic_word, counts.topic_word, "topic-word cache drifted");
        }
    }
    let mut theta = Array2::zeros((docs.len(), k));
    for (d, doc) in docs.iter().enumerate() {
        let n_d = doc.words.len() as f64;
        let denom = n_d + k as f64 * gamma;
        for t in 0..k {
            theta[[d, t]] = (counts.doc_topic[[d, t]] + gamma) / denom;
        }
    }
    let mut phi = Array2::zeros((k, v));
    for t in 0..k {
        let denom = counts.topic_total[t] + v_nu;
        for w in 0..v {
            phi[[t, w]] = (counts.topic_word[[t, w]] + nu) / denom;
        }
    }
    Ok((TopicDistributions { theta, phi }, state))
}

/// Top `n` words per topic by phi mass.
pub fn top_words(
    dists: &TopicDistributions,
    vocab: &Vocabulary,
    n: usize,
) -> Vec<Vec<(String, f64)>> {
    (0..dists.phi.nrows())
        .map(|t| {
            let mut row: Vec<(String, f64)> = (0..dists.phi.ncols())
                .map(|w| (vocab.token(w).to_string(), dists.phi[[t, w]]))
                .collect();
            row.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            row.truncate(n);
            row
        })
        .collect()
}

/// Write the per-topic top-10 word table as CSV.
pub fn write_topic_csv(dists: &TopicDistributions, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "topic,rank,word,phi").map_err(|e| Error::io(path, e))?;
    for (t, words) in top_words(dists, vocab, 10).into_iter().enumerate() {
        for (rank, (word, phi)) in words.into_iter().enumerate() {
            writeln!(w, "{t},{},{word},{phi}", rank + 1).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn doc(item: usize, words: &[usize]) -> ItemDocument {
        ItemDocument {
            item,
            words: words.to_vec(),
            source_review_count: 1,
        }
    }

    #[test]
    fn theta_kappa_zero_is_exactly_uniform() {
        let q = array![[3.0, -2.0, 0.5], [100.0, -7.0, 0.0]];
        let theta = theta_from_q(&q, 0.0, 3).unwrap();
        for i in 0..2 {
            for t in 0..3 {
                assert_eq!(theta[[i, t]], 1.0 / 3.0);
            }
        }
    }

    #[test]
    fn theta_hand_evaluated_softmax() {
        let q = array![[1.0, 0.0]];
        let theta = theta_from_q(&q, 1.0, 2).unwrap();
        assert!((theta[[0, 0]] - 0.731_058_578_6).abs() < 1e-9);
        assert!((theta[[0, 1]] - 0.268_941_421_4).abs() < 1e-9);
    }

    #[test]
    fn theta_large_kappa_concentrates_on_argmax() {
        let q = array![[5.0, 0.0]];
        let theta = theta_from_q(&q, 100.0, 2).unwrap();
        assert!(theta[[0, 0]] >= 1.0 - 1e-9);
    }

    #[test]
    fn theta_uses_only_the_first_k_columns() {
        let base = array![[0.4, -0.3]];
        let extended = array![[0.4, -0.3, 9.9, -9.9]];
        let a = theta_from_q(&base, 1.7, 2).unwrap();
        let b = theta_from_q(&extended, 1.7, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn theta_rejects_non_finite_inputs() {
        let q = array![[f64::NAN, 0.0]];
        assert!(theta_from_q(&q, 1.0, 2).is_err());
        let q = array![[1.0, 0.0]];
        assert!(theta_from_q(&q, f64::INFINITY, 2).is_err());
    }

    #[test]
    fn phi_symmetric_row() {
        let psi = Array2::zeros((1, 4));
        let phi = phi_from_psi(&psi).unwrap();
        for w in 0..4 {
            assert_eq!(phi[[0, w]], 0.25);
        }
    }

    #[test]
    fn phi_hand_evaluated() {
        let psi = array![[2.0f64.ln(), 0.0]];
        let phi = phi_from_psi(&psi).unwrap();
        assert!((phi[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
        assert!((phi[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn phi_is_shift_invariant() {
        let psi = array![[0.3, -1.2, 4.0]];
        let shifted = array![[0.3 + 7.5, -1.2 + 7.5, 4.0 + 7.5]];
        let a = phi_from_psi(&psi).unwrap();
        let b = phi_from_psi(&shifted).unwrap();
        for w in 0..3 {
            assert!((a[[0, w]] - b[[0, w]]).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic_up_to_1e3(
            entries in proptest::collection::vec(-1000.0f64..1000.0, 6),
            kappa in -1000.0f64..1000.0,
        ) {
            let q = Array2::from_shape_vec((2, 3), entries).unwrap();
            let theta = theta_from_q(&q, kappa, 3).unwrap();
            let phi = phi_from_psi(&q).unwrap();
            for m in [&theta, &phi] {
                for row in m.rows() {
                    let sum: f64 = row.iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-9);
                    prop_assert!(row.iter().all(|&x| x >= 0.0));
                }
            }
        }

        #[test]
        fn theta_is_monotone_in_q(
            a in -50.0f64..50.0,
            b in -50.0f64..50.0,
            kappa in 0.001f64..20.0,
        ) {
            prop_assume!((a - b).abs() > 1e-9);
            let q = Array2::from_shape_vec((1, 2), vec![a, b]).unwrap();
            let theta = theta_from_q(&q, kappa, 2).unwrap();
            if a > b {
                prop_assert!(theta[[0, 0]] > theta[[0, 1]]);
            } else {
                prop_assert!(theta[[0, 1]] > theta[[0, 0]]);
            }
        }
    }

    #[test]
    fn log_likelihood_empty_corpus_is_zero() {
        let dists = TopicDistributions {
            theta: Array2::zeros((0, 2)),
            phi: Array2::from_elem((2, 3), 1.0 / 3.0),
        };
        let state = TopicState { z: vec![], k: 2 };
        assert_eq!(corpus_log_likelihood(&[], &dists, &state), 0.0);
    }

    #[test]
    fn log_likelihood_single_term() {
        let dists = TopicDistributions {
            theta: array![[0.5, 0.5]],
            phi: array![[0.2, 0.8], [0.6, 0.4]],
        };
        let docs = vec![doc(0, &[0])];
        let state = TopicState { z: vec![vec![0]], k: 2 };
        let got = corpus_log_likelihood(&docs, &dists, &state);
        assert!((got - (0.1f64).ln()).abs() < 1e-12);
        assert!(got <= 0.0);
    }

    #[test]
    fn log_likelihood_doubles_when_corpus_doubles() {
        let dists = TopicDistributions {
            theta: array![[0.7, 0.3], [0.7, 0.3]],
            phi: array![[0.2, 0.8], [0.6, 0.4]],
        };
        let one = vec![doc(0, &[1, 0])];
        let two = vec![doc(0, &[1, 0]), doc(1, &[1, 0])];
        let s1 = TopicState { z: vec![vec![0, 1]], k: 2 };
        let s2 = TopicState { z: vec![vec![0, 1], vec![0, 1]], k: 2 };
        let a = corpus_log_likelihood(&one, &dists, &s1);
        let b = corpus_log_likelihood(&two, &dists, &s2);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn sampling_with_one_topic_assigns_zero() {
        let dists = TopicDistributions {
            theta: array![[1.0]],
            phi: array![[0.5, 0.5]],
        };
        let docs = vec![doc(0, &[0, 1, 1])];
        let state = sample_topics(&docs, &dists, 4);
        assert_eq!(state.z, vec![vec![0, 0, 0]]);
    }

    #[test]
    fn sampling_frequency_tracks_weights() {
        // theta = (0.9, 0.1), phi equal across topics: P(topic 0) = 0.9.
        let n = 100_000usize;
        let dists = TopicDistributions {
            theta: array![[0.9, 0.1]],
            phi: array![[0.5, 0.5], [0.5, 0.5]],
        };
        let docs = vec![doc(0, &vec![0; n])];
        let state = sample_topics(&docs, &dists, 11);
        let zeros = state.z[0].iter().filter(|&&t| t == 0).count() as f64;
        let freq = zeros / n as f64;
        let sigma = (0.9f64 * 0.1 / n as f64).sqrt();
        assert!(
            (freq - 0.9).abs() <= 3.0 * sigma,
            "freq {freq}, sigma {sigma}"
        );
    }

    #[test]
    fn zero_weight_topic_is_never_drawn() {
        let dists = TopicDistributions {
            theta: array![[0.4, 0.3, 0.3]],
            phi: array![[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]],
        };
        // Word 0 has phi[2][0] = 0, so topic 2 must never appear for it.
        let docs = vec![doc(0, &vec![0; 5000])];
        let state = sample_topics(&docs, &dists, 8);
        assert!(state.z[0].iter().all(|&t| t != 2));
    }

    #[test]
    fn sampling_is_reproducible() {
        let dists = TopicDistributions {
            theta: array![[0.6, 0.4]],
            phi: array![[0.3, 0.7], [0.9, 0.1]],
        };
        let docs = vec![doc(0, &[0, 1, 0, 1, 1])];
        assert_eq!(sample_topics(&docs, &dists, 99), sample_topics(&docs, &dists, 99));
    }

    #[test]
    fn traced_likelihood_matches_recomputation() {
        let dists = TopicDistributions {
            theta: array![[0.6, 0.4], [0.2, 0.8]],
            phi: array![[0.3, 0.7], [0.9, 0.1]],
        };
        let docs = vec![doc(0, &[0, 1, 1]), doc(1, &[1, 0])];
        let (state, inc) = sample_topics_traced(&docs, &dists, 5);
        let full = corpus_log_likelihood(&docs, &dists, &state);
        assert!((inc - full).abs() < 1e-8);
    }

    fn disjoint_corpus() -> (Vec<ItemDocument>, Vec<usize>) {
        // Docs 0..20 use words 0..10, docs 20..40 use words 10..20.
        let mut rng = rng_from_seed(7);
        let mut docs = Vec::new();
        let mut truth = Vec::new();
        for d in 0..40 {
            let group = usize::from(d >= 20);
            let words: Vec<usize> = (0..30)
                .map(|_| rng.random_range(0..10) + group * 10)
                .collect();
            docs.push(doc(d, &words));
            truth.push(group);
        }
        (docs, truth)
    }

    #[test]
    fn gibbs_recovers_disjoint_vocabularies() {
        let (docs, truth) = disjoint_corpus();
        let (dists, _) = fit_lda_gibbs(&docs, 2, 20, 0.1, 0.1, 200, 12).unwrap();
        // Label topics by where group-0 documents put their mass.
        let topic_of_group0 = if dists.theta[[0, 0]] > dists.theta[[0, 1]] { 0 } else { 1 };
        for (d, &g) in truth.iter().enumerate() {
            let expected_topic = if g == 0 { topic_of_group0 } else { 1 - topic_of_group0 };
            assert!(
                dists.theta[[d, expected_topic]] >= 0.9,
                "doc {d}: theta = {:?}",
                dists.theta.row(d)
            );
        }
    }

    #[test]
    fn gibbs_zero_sweeps_returns_smoothed_initial_counts() {
        let docs = vec![doc(0, &[0, 1, 2]), doc(1, &[2, 2])];
        let (dists, state) = fit_lda_gibbs(&docs, 2, 3, 0.1, 0.1, 0, 3).unwrap();
        // Recompute the smoothed estimates from the returned assignments.
        for (d, d_doc) in docs.iter().enumerate() {
            let mut n = [0.0; 2];
            for &t in &state.z[d] {
                n[t] += 1.0;
            }
            let denom = d_doc.words.len() as f64 + 2.0 * 0.1;
            for t in 0..2 {
                assert!((dists.theta[[d, t]] - (n[t] + 0.1) / denom).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gibbs_single_topic_degenerates_to_word_frequencies() {
        let docs = vec![doc(0, &[0, 0, 1]), doc(1, &[2])];
        let (dists, _) = fit_lda_gibbs(&docs, 1, 3, 0.1, 0.1, 5, 1).unwrap();
        for d in 0..2 {
            assert_eq!(dists.theta[[d, 0]], 1.0);
        }
        // phi = (count + nu) / (total + V nu) with counts {2, 1, 1} over 4 words.
        let denom = 4.0 + 3.0 * 0.1;
        assert!((dists.phi[[0, 0]] - 2.1 / denom).abs() < 1e-12);
        assert!((dists.phi[[0, 1]] - 1.1 / denom).abs() < 1e-12);
        assert!((dists.phi[[0, 2]] - 1.1 / denom).abs() < 1e-12);
    }

    #[test]
    fn gibbs_theta_rows_are_stochastic_even_for_empty_documents() {
        let docs = vec![doc(0, &[]), doc(1, &[0, 1])];
        let (dists, _) = fit_lda_gibbs(&docs, 2, 2, 0.1, 0.1, 10, 5).unwrap();
        let sum: f64 = dists.theta.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(dists.theta[[0, 0]], 0.5);
    }

    #[test]
    fn top_words_ranks_by_mass() {
        let vocab_tokens = ["alpha", "beta", "gamma"];
        let docs: Vec<Vec<String>> = vec![vocab_tokens.iter().map(|s| s.to_string()).collect()];
        let vocab = crate::textprep::build_vocabulary(docs.iter().map(|d| d.as_slice()), 3);
        let dists = TopicDistributions {
            theta: array![[1.0]],
            phi: array![[0.2, 0.5, 0.3]],
        };
        let tops = top_words(&dists, &vocab, 2);
        assert_eq!(tops[0][0].0, "beta");
        assert_eq!(tops[0].len(), 2);
    }
}
