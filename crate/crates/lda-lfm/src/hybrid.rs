//! The joint rating/topic model: its objective, analytic gradients, the
//! two-step fitting loop (one Adam update, then topic resampling), the
//! extra-latent-feature extension, and the LDAFirst baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Ratings;
use crate::lfm::{
    accumulate_rating_gradient, add_reg_gradient, reg_value, sum_squared_error, validation_mse,
    FitTrace, LfmFitConfig, QReg, TraceRow,
};
use crate::optim::{adam_step, init_params, AdamState, ParamSet};
use crate::rng::derive_seed;
use crate::textprep::ItemDocument;
use crate::topicmodel::{
    corpus_log_likelihood, distributions_from_params, fit_lda_gibbs, sample_topics, TopicState,
};

/// Hyperparameters of the joint model and its fitting loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Topic count, which is also the linked factor count.
    pub k: usize,
    /// Extra factor columns that drive ratings but stay out of the topic
    /// model. Users and items always get the same number.
    pub k_star: usize,
    pub lambda: f64,
    pub mu: f64,
    pub n_iter: usize,
    pub seed: u64,
    pub lr: f64,
    /// Adam updates per outer iteration (step 1); the loop default is one.
    pub inner_steps: usize,
    /// Dirichlet document-topic smoothing for the Gibbs initializer.
    pub gamma: f64,
    /// Dirichlet topic-word smoothing for the Gibbs initializer.
    pub nu: f64,
    /// Gibbs sweeps when seeding the LDAFirst baseline.
    pub gibbs_sweeps: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            k: 5,
            k_star: 0,
            lambda: 0.01,
            mu: 1.0,
            n_iter: 35,
            seed: 42,
            lr: 0.01,
            inner_steps: 1,
            gamma: 0.1,
            nu: 0.1,
            gibbs_sweeps: 200,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if self.lambda < 0.0 || self.mu < 0.0 {
            return Err(Error::InvalidArgument(
                "lambda and mu must be >= 0".into(),
            ));
        }
        if self.n_iter < 1 {
            return Err(Error::InvalidArgument("n_iter must be >= 1".into()));
        }
        if self.inner_steps < 1 {
            return Err(Error::InvalidArgument("inner_steps must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be > 0".into()));
        }
        Ok(())
    }

    /// Total factor columns, `k + k_star`.
    pub fn total_factors(&self) -> usize {
        self.k + self.k_star
    }
}

/// Abort threshold for the unnormalized objective.
const DIVERGENCE_CAP: f64 = 1e12;

fn check_shapes(params: &ParamSet, train: &Ratings, docs: &[ItemDocument]) -> Result<()> {
    if params.n_users() != train.n_users || params.n_items() != train.n_items {
        return Err(Error::ShapeMismatch(format!(
            "parameters are {}x{} users/items, ratings are {}x{}",
            params.n_users(),
            params.n_items(),
            train.n_users,
            train.n_items
        )));
    }
    if docs.len() != params.n_items() {
        return Err(Error::ShapeMismatch(format!(
            "{} documents for {} items",
            docs.len(),
            params.n_items()
        )));
    }
    if let Some(w) = docs
        .iter()
        .flat_map(|d| d.words.iter())
        .find(|&&w| w >= params.v())
    {
        return Err(Error::ShapeMismatch(format!(
            "word index {w} outside vocabulary of size {}",
            params.v()
        )));
    }
    Ok(())
}

/// Joint objective: unnormalized squared rating error, plus an L2 term that
/// leaves the first k item-factor columns to the topic likelihood (the extra
/// columns are still penalized), minus mu times the corpus log-likelihood.
pub fn joint_objective(
    params: &ParamSet,
    train: &Ratings,
    docs: &[ItemDocument],
    state: &TopicState,
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    check_shapes(params, train, docs)?;
    if lambda < 0.0 || mu < 0.0 {
        return Err(Error::InvalidArgument("lambda and mu must be >= 0".into()));
    }
    if !state.matches_corpus(docs) || state.k != params.k() {
        return Err(Error::ShapeMismatch(
            "topic state does not match the corpus".into(),
        ));
    }
    let mut total = sum_squared_error(params, train) + reg_value(params, lambda, QReg::ExtraOnly);
    if mu > 0.0 {
        let dists = distributions_from_params(params)?;
        total -= mu * corpus_log_likelihood(docs, &dists, state);
    }
    Ok(total)
}

/// Exact gradient of [`joint_objective`] with respect to every block.
///
/// The topic term touches alpha-free blocks only through the softmax links:
/// the first k columns of each q row, the psi rows, and kappa. The extra
/// `k_star` columns receive rating and L2 contributions only.
pub fn joint_gradient(
    params: &ParamSet,
    train: &Ratings,
    docs: &[ItemDocument],
    state: &TopicState,
    lambda: f64,
    mu: f64,
) -> Result<ParamSet> {
    check_shapes(params, train, docs)?;
    if !state.matches_corpus(docs) || state.k != params.k() {
        return Err(Error::ShapeMismatch(
            "topic state does not match the corpus".into(),
        ));
    }
    let mut g = params.zeros_like();
    accumulate_rating_gradient(params, train, &mut g, 1.0);
    add_reg_gradient(&mut g, params, lambda, QReg::ExtraOnly);
    if mu > 0.0 {
        let dists = distributions_from_params(params)?;
        let k = params.k();
        let v = params.v();

        // Per-document topic counts n_dk and per-topic word counts m_kw.
        let mut topic_word = vec![0.0f64; k * v];
        let mut topic_total = vec![0.0f64; k];
        for (d, docu) in docs.iter().enumerate() {
            if docu.words.is_empty() {
                continue;
            }
            let mut doc_topic = vec![0.0f64; k];
            for (j, &w) in docu.words.iter().enumerate() {
                let z = state.z[d][j];
                doc_topic[z] += 1.0;
                topic_word[z * v + w] += 1.0;
                topic_total[z] += 1.0;
            }
            let n_d = docu.words.len() as f64;

            // d(-mu * sum_j log theta[d][z_j]) / d q[d][t]
            //   = -mu * kappa * (n_dt - N_d * theta[d][t])  for t < k.
            for t in 0..k {
                g.q[[d, t]] -=
                    mu * params.kappa * (doc_topic[t] - n_d * dists.theta[[d, t]]);
            }

            // d(...) / d kappa = -mu * sum_j (q[d][z_j] - sum_t theta[d][t] q[d][t]).
            let mut expected_q = 0.0;
            for t in 0..k {
                expected_q += dists.theta[[d, t]] * params.q[[d, t]];
            }
            let mut kappa_term = 0.0;
            for t in 0..k {
                kappa_term += doc_topic[t] * params.q[[d, t]];
            }
            g.kappa -= mu * (kappa_term - n_d * expected_q);
        }

        // d(-mu * sum log phi[z][w]) / d psi[t][w] = -mu * (m_tw - c_t * phi[t][w]).
        for t in 0..k {
            let c_t = topic_total[t];
            for w in 0..v {
                g.psi[[t, w]] -= mu * (topic_word[t * v + w] - c_t * dists.phi[[t, w]]);
            }
        }
    }
    if let Some(block) = g.non_finite_block() {
        return Err(Error::NonFinite { block });
    }
    Ok(g)
}

/// A fitted joint model: final parameters, final topic assignments, and the
/// per-iteration trace.
#[derive(Debug, Clone)]
pub struct HybridFit {
    pub params: ParamSet,
    pub state: TopicState,
    pub trace: FitTrace,
}

/// Two-step stochastic fitting: per outer iteration, (1) `inner_steps`
/// full-batch Adam updates of all parameters at fixed assignments, then (2)
/// a fresh draw of every word's topic from the updated distributions.
/// Returns the final-iteration model.
pub fn fit_lda_lfm(
    cfg: &HybridConfig,
    train: &Ratings,
    val: &Ratings,
    docs: &[ItemDocument],
    v: usize,
) -> Result<HybridFit> {
    cfg.validate()?;
    let mut params = init_params(train, cfg.k, cfg.k_star, v, derive_seed(cfg.seed, "init"))?;
    check_shapes(&params, train, docs)?;
    let mut state = TopicState::uniform_random(docs, cfg.k, derive_seed(cfg.seed, "topics.init"));
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut trace = FitTrace::default();
    for iteration in 1..=cfg.n_iter {
        for _ in 0..cfg.inner_steps {
            let grads = joint_gradient(&params, train, docs, &state, cfg.lambda, cfg.mu)?;
            adam_step(&mut params, &grads, &mut adam)?;
        }
        let dists = distributions_from_params(&params)?;
        state = sample_topics(docs, &dists, derive_seed(cfg.seed, &format!("topics.resample.{iteration}")));
        let train_objective = joint_objective(&params, train, docs, &state, cfg.lambda, cfg.mu)?;
        if !train_objective.is_finite() || train_objective > DIVERGENCE_CAP {
            return Err(Error::Diverged {
                iteration,
                value: train_objective,
            });
        }
        trace.rows.push(TraceRow {
            iteration,
            train_objective,
            val_mse: validation_mse(&params, val),
        });
    }
    Ok(HybridFit {
        params,
        state,
        trace,
    })
}

/// LDAFirst baseline: estimate document-topic mixes with collapsed Gibbs,
/// freeze them in as the item factors, and train only alpha, the biases,
/// and the user factors on the standard objective. `k_star` is forced to 0.
pub fn fit_ldafirst(
    cfg: &HybridConfig,
    train: &Ratings,
    val: &Ratings,
    docs: &[ItemDocument],
    v: usize,
) -> Result<(ParamSet, FitTrace)> {
    cfg.validate()?;
    if docs.len() != train.n_items {
        return Err(Error::ShapeMismatch(format!(
            "{} documents for {} items",
            docs.len(),
            train.n_items
        )));
    }
    let (dists, _) = fit_lda_gibbs(
        docs,
        cfg.k,
        v,
        cfg.gamma,
        cfg.nu,
        cfg.gibbs_sweeps,
        derive_seed(cfg.seed, "gibbs"),
    )?;
    let lfm_cfg = LfmFitConfig {
        k: cfg.k,
        k_star: 0,
        lambda: cfg.lambda,
        n_iter: cfg.n_iter,
        seed: cfg.seed,
        lr: cfg.lr,
        v,
        include_q_norm: true,
        normalize: true,
    };
    crate::lfm::fit_lfm_frozen_q(train, val, &lfm_cfg, dists.theta)
}
