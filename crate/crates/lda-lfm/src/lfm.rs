//! Pure rating models: the global-offset predictor, the bias-only baseline,
//! and the regularized latent factor model trained with full-batch Adam.

use ndarray::Array1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::mse;
use crate::ingest::Ratings;
use crate::optim::{adam_step, init_params, AdamState, ParamSet};

/// Global mean plus per-user/per-item mean deviations from it.
#[derive(Debug, Clone)]
pub struct RatingStats {
    pub alpha: f64,
    pub r_bar_user: Array1<f64>,
    pub r_bar_item: Array1<f64>,
}

/// Compute offset/baseline statistics from the train set.
pub fn rating_stats(train: &Ratings) -> Result<RatingStats> {
    if train.entries.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let alpha = train.mean_rating();
    let mut user_sum = vec![0.0; train.n_users];
    let mut user_cnt = vec![0usize; train.n_users];
    let mut item_sum = vec![0.0; train.n_items];
    let mut item_cnt = vec![0usize; train.n_items];
    for e in &train.entries {
        user_sum[e.user] += e.rating - alpha;
        user_cnt[e.user] += 1;
        item_sum[e.item] += e.rating - alpha;
        item_cnt[e.item] += 1;
    }
    // Index spaces are built from train, so every id has at least one rating.
    let r_bar_user = Array1::from_iter(
        user_sum
            .iter()
            .zip(&user_cnt)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }),
    );
    let r_bar_item = Array1::from_iter(
        item_sum
            .iter()
            .zip(&item_cnt)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }),
    );
    Ok(RatingStats {
        alpha,
        r_bar_user,
        r_bar_item,
    })
}

/// The offset model predicts the global train mean for every pair.
pub fn offset_predict(stats: &RatingStats) -> f64 {
    stats.alpha
}

/// Baseline rating model: alpha + mean user deviation + mean item deviation.
pub fn baseline_predict(stats: &RatingStats, user: usize, item: usize) -> Result<f64> {
    if user >= stats.r_bar_user.len() {
        return Err(Error::InvalidId {
            kind: "user",
            id: user,
            len: stats.r_bar_user.len(),
        });
    }
    if item >= stats.r_bar_item.len() {
        return Err(Error::InvalidId {
            kind: "item",
            id: item,
            len: stats.r_bar_item.len(),
        });
    }
    Ok(stats.alpha + stats.r_bar_user[user] + stats.r_bar_item[item])
}

/// Sequential dot product; fixed order keeps runs bit-reproducible.
#[inline]
pub(crate) fn dot_rows(params: &ParamSet, user: usize, item: usize) -> f64 {
    let p = params.p.row(user);
    let q = params.q.row(item);
    let mut acc = 0.0;
    for f in 0..params.n_factors() {
        acc += q[f] * p[f];
    }
    acc
}

#[inline]
pub(crate) fn predict_unchecked(params: &ParamSet, user: usize, item: usize) -> f64 {
    params.alpha + params.b_item[item] + params.b_user[user] + dot_rows(params, user, item)
}

/// Predicted rating alpha + b_i + b_u + q_i . p_u over all factor columns.
/// Not clipped to [1, 5].
pub fn predict_rating(params: &ParamSet, user: usize, item: usize) -> Result<f64> {
    if user >= params.n_users() {
        return Err(Error::InvalidId {
            kind: "user",
            id: user,
            len: params.n_users(),
        });
    }
    if item >= params.n_items() {
        return Err(Error::InvalidId {
            kind: "item",
            id: item,
            len: params.n_items(),
        });
    }
    Ok(predict_unchecked(params, user, item))
}

/// Predictions over a rating list, in list order.
pub fn predict_all(params: &ParamSet, data: &Ratings) -> Vec<f64> {
    data.entries
        .iter()
        .map(|e| predict_unchecked(params, e.user, e.item))
        .collect()
}

/// Which factor columns the L2 term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum QReg {
    /// All of Q (the standalone latent factor model).
    Full,
    /// Only the extra columns `[k, k+k_star)` (the joint model, where the
    /// topic likelihood regularizes the first k columns).
    ExtraOnly,
    /// No Q term at all.
    None,
}

fn sum_sq(iter: impl Iterator<Item = f64>) -> f64 {
    iter.fold(0.0, |acc, x| acc + x * x)
}

/// lambda * (|P|^2 + |b_item|^2 + |b_user|^2 + selected Q columns).
pub(crate) fn reg_value(params: &ParamSet, lambda: f64, q_mode: QReg) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut total = sum_sq(params.p.iter().copied())
        + sum_sq(params.b_item.iter().copied())
        + sum_sq(params.b_user.iter().copied());
    total += match q_mode {
        QReg::Full => sum_sq(params.q.iter().copied()),
        QReg::ExtraOnly => {
            let k = params.k();
            let mut acc = 0.0;
            for row in params.q.rows() {
                for f in k..params.n_factors() {
                    acc += row[f] * row[f];
                }
            }
            acc
        }
        QReg::None => 0.0,
    };
    lambda * total
}

/// Add the gradient of [`reg_value`] into `g`.
pub(crate) fn add_reg_gradient(g: &mut ParamSet, params: &ParamSet, lambda: f64, q_mode: QReg) {
    if lambda == 0.0 {
        return;
    }
    let two_lambda = 2.0 * lambda;
    for (gx, x) in g.b_user.iter_mut().zip(params.b_user.iter()) {
        *gx += two_lambda * x;
    }
    for (gx, x) in g.b_item.iter_mut().zip(params.b_item.iter()) {
        *gx += two_lambda * x;
    }
    for (gx, x) in g.p.iter_mut().zip(params.p.iter()) {
        *gx += two_lambda * x;
    }
    match q_mode {
        QReg::Full => {
            for (gx, x) in g.q.iter_mut().zip(params.q.iter()) {
                *gx += two_lambda * x;
            }
        }
        QReg::ExtraOnly => {
            let k = params.k();
            let nf = params.n_factors();
            for item in 0..params.n_items() {
                for f in k..nf {
                    g.q[[item, f]] += two_lambda * params.q[[item, f]];
                }
            }
        }
        QReg::None => {}
    }
}

/// Add `scale * d/dTheta sum (r - r_hat)^2` into `g`.
///
/// Both the standalone and the joint objective route their rating term
/// through here, so a mu = 0 joint fit and a q-norm-free LFM fit perform
/// literally the same arithmetic.
pub(crate) fn accumulate_rating_gradient(
    params: &ParamSet,
    train: &Ratings,
    g: &mut ParamSet,
    scale: f64,
) {
    let nf = params.n_factors();
    for e in &train.entries {
        let err = predict_unchecked(params, e.user, e.item) - e.rating;
        let c = 2.0 * scale * err;
        g.alpha += c;
        g.b_user[e.user] += c;
        g.b_item[e.item] += c;
        for f in 0..nf {
            g.p[[e.user, f]] += c * params.q[[e.item, f]];
            g.q[[e.item, f]] += c * params.p[[e.user, f]];
        }
    }
}

pub(crate) fn sum_squared_error(params: &ParamSet, train: &Ratings) -> f64 {
    train.entries.iter().fold(0.0, |acc, e| {
        let err = e.rating - predict_unchecked(params, e.user, e.item);
        acc + err * err
    })
}

/// Mean squared error plus L2 term: (1/|T|) sum (r - r_hat)^2 + lambda *
/// (|Q|^2 + |P|^2 + |b_item|^2 + |b_user|^2).
pub fn lfm_objective(params: &ParamSet, train: &Ratings, lambda: f64) -> Result<f64> {
    lfm_objective_with(params, train, lambda, QReg::Full, true)
}

pub(crate) fn lfm_objective_with(
    params: &ParamSet,
    train: &Ratings,
    lambda: f64,
    q_mode: QReg,
    normalize: bool,
) -> Result<f64> {
    if train.entries.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be >= 0".into()));
    }
    let sse = sum_squared_error(params, train);
    let loss = if normalize {
        sse / train.entries.len() as f64
    } else {
        sse
    };
    Ok(loss + reg_value(params, lambda, q_mode))
}

pub(crate) fn lfm_gradient_with(
    params: &ParamSet,
    train: &Ratings,
    lambda: f64,
    q_mode: QReg,
    normalize: bool,
) -> ParamSet {
    let mut g = params.zeros_like();
    let scale = if normalize {
        1.0 / train.entries.len() as f64
    } else {
        1.0
    };
    accumulate_rating_gradient(params, train, &mut g, scale);
    add_reg_gradient(&mut g, params, lambda, q_mode);
    g
}

/// Analytic gradient of [`lfm_objective`].
pub fn lfm_gradient(params: &ParamSet, train: &Ratings, lambda: f64) -> ParamSet {
    lfm_gradient_with(params, train, lambda, QReg::Full, true)
}

/// One row of a per-iteration training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub train_objective: f64,
    pub val_mse: f64,
}

/// Per-iteration train objective and validation MSE.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
}

impl FitTrace {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,train_objective,val_mse")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.iteration, r.train_objective, r.val_mse)?;
        }
        Ok(())
    }
}

/// Knobs for [`fit_lfm`]; defaults reproduce the standard model.
#[derive(Debug, Clone)]
pub struct LfmFitConfig {
    pub k: usize,
    pub k_star: usize,
    pub lambda: f64,
    pub n_iter: usize,
    pub seed: u64,
    pub lr: f64,
    /// Width of the (unused) psi block; lets a pure rating fit share its
    /// initialization stream with a joint fit of the same shape.
    pub v: usize,
    /// Include |Q|^2 in the regularizer (the standard objective does).
    pub include_q_norm: bool,
    /// Divide the squared error by |T| (the standard objective does).
    pub normalize: bool,
}

impl Default for LfmFitConfig {
    fn default() -> Self {
        LfmFitConfig {
            k: 5,
            k_star: 0,
            lambda: 0.01,
            n_iter: 35,
            seed: 42,
            lr: 0.01,
            v: 1,
            include_q_norm: true,
            normalize: true,
        }
    }
}

fn q_mode_of(cfg: &LfmFitConfig) -> QReg {
    if cfg.include_q_norm {
        QReg::Full
    } else {
        QReg::None
    }
}

/// Full-batch Adam on the latent factor objective; returns the
/// final-iteration parameters and the per-iteration trace.
pub fn fit_lfm(train: &Ratings, val: &Ratings, cfg: &LfmFitConfig) -> Result<(ParamSet, FitTrace)> {
    if cfg.n_iter < 1 {
        return Err(Error::InvalidArgument("n_iter must be >= 1".into()));
    }
    let q_mode = q_mode_of(cfg);
    let mut params = init_params(
        train,
        cfg.k,
        cfg.k_star,
        cfg.v,
        crate::rng::derive_seed(cfg.seed, "init"),
    )?;
    let mut state = AdamState::new(&params, cfg.lr);
    let mut trace = FitTrace::default();
    for iteration in 1..=cfg.n_iter {
        let grads = lfm_gradient_with(&params, train, cfg.lambda, q_mode, cfg.normalize);
        adam_step(&mut params, &grads, &mut state)?;
        let train_objective =
            lfm_objective_with(&params, train, cfg.lambda, q_mode, cfg.normalize)?;
        if !train_objective.is_finite() {
            return Err(Error::Diverged {
                iteration,
                value: train_objective,
            });
        }
        let val_mse = validation_mse(&params, val);
        trace.rows.push(TraceRow {
            iteration,
            train_objective,
            val_mse,
        });
    }
    Ok((params, trace))
}

/// LFM variant with the item-factor rows frozen at given values; trains
/// alpha, biases and user factors only.
pub(crate) fn fit_lfm_frozen_q(
    train: &Ratings,
    val: &Ratings,
    cfg: &LfmFitConfig,
    frozen_q: ndarray::Array2<f64>,
) -> Result<(ParamSet, FitTrace)> {
    if cfg.n_iter < 1 {
        return Err(Error::InvalidArgument("n_iter must be >= 1".into()));
    }
    let mut params = init_params(
        train,
        cfg.k,
        cfg.k_star,
        cfg.v,
        crate::rng::derive_seed(cfg.seed, "init"),
    )?;
    if frozen_q.dim() != params.q.dim() {
        return Err(Error::ShapeMismatch(format!(
            "frozen Q is {:?}, expected {:?}",
            frozen_q.dim(),
            params.q.dim()
        )));
    }
    params.q = frozen_q;
    let mut state = AdamState::new(&params, cfg.lr);
    let mut trace = FitTrace::default();
    for iteration in 1..=cfg.n_iter {
        let mut grads = lfm_gradient_with(&params, train, cfg.lambda, q_mode_of(cfg), cfg.normalize);
        grads.q.fill(0.0); // freeze: zero gradient keeps Adam from moving Q
        adam_step(&mut params, &grads, &mut state)?;
        let train_objective =
            lfm_objective_with(&params, train, cfg.lambda, q_mode_of(cfg), cfg.normalize)?;
        if !train_objective.is_finite() {
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
    Ok((params, trace))
}

pub(crate) fn validation_mse(params: &ParamSet, val: &Ratings) -> f64 {
    if val.entries.is_empty() {
        return f64::NAN;
    }
    let preds = predict_all(params, val);
    let truths: Vec<f64> = val.entries.iter().map(|e| e.rating).collect();
    mse(&preds, &truths).expect("equal lengths by construction")
}
