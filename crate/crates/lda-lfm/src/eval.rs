//! Evaluation: the MSE metric, (lambda, mu) grid search, and the multi-model
//! experiment runner that scores every requested model on a dataset.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{fit_lda_lfm, fit_ldafirst, HybridConfig};
use crate::ingest::{
    deduplicate, k_core_filter, parse_reviews_file, split_dataset, write_split, Ratings,
};
use crate::lfm::{
    baseline_predict, fit_lfm, offset_predict, predict_all, rating_stats, FitTrace, LfmFitConfig,
};
use crate::optim::{Checkpoint, ParamSet, CHECKPOINT_VERSION};
use crate::rng::derive_seed;
use crate::textprep::{prepare_corpus, write_documents, write_vocabulary, ItemDocument};

/// Mean squared error between predictions and ground truth.
pub fn mse(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("empty prediction list".into()));
    }
    let sum: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// The five models the experiment runner knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Offset,
    Baseline,
    Lfm,
    LdaFirst,
    LdaLfm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Offset,
        ModelKind::Baseline,
        ModelKind::Lfm,
        ModelKind::LdaFirst,
        ModelKind::LdaLfm,
    ];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ModelKind::Offset => "offset",
            ModelKind::Baseline => "baseline",
            ModelKind::Lfm => "lfm",
            ModelKind::LdaFirst => "ldafirst",
            ModelKind::LdaLfm => "lda_lfm",
        };
        f.write_str(name)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offset" => Ok(ModelKind::Offset),
            "baseline" => Ok(ModelKind::Baseline),
            "lfm" => Ok(ModelKind::Lfm),
            "ldafirst" => Ok(ModelKind::LdaFirst),
            "lda_lfm" => Ok(ModelKind::LdaLfm),
            other => Err(Error::InvalidArgument(format!(
                "unknown model `{other}` (expected offset|baseline|lfm|ldafirst|lda_lfm)"
            ))),
        }
    }
}

/// The (lambda, mu) grid to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambdas: vec![0.0, 0.001, 0.01, 1.0, 10.0],
            mus: vec![1.0, 10.0, 100.0, 1000.0, 10000.0],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.mus.is_empty() {
            return Err(Error::InvalidArgument("grid lists must be non-empty".into()));
        }
        if self
            .lambdas
            .iter()
            .chain(&self.mus)
            .any(|&x| x < 0.0 || !x.is_finite())
        {
            return Err(Error::InvalidArgument(
                "grid values must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.lambdas
            .iter()
            .flat_map(|&l| self.mus.iter().map(move |&m| (l, m)))
            .collect()
    }
}

/// One evaluated grid cell.
#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub lambda: f64,
    pub mu: f64,
    pub val_mse: Option<f64>,
    pub error: Option<String>,
}

/// Winner plus the full table.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: HybridConfig,
    pub best_val_mse: f64,
    pub rows: Vec<GridRow>,
}

/// Fit every (lambda, mu) pair with the shared seed and pick the smallest
/// validation MSE; ties go to the smaller lambda, then the smaller mu.
/// Cells run in parallel; each failure is recorded, and the search errors
/// only when every cell failed.
pub fn grid_search<F>(grid: &GridSpec, base: &HybridConfig, fit: F) -> Result<GridOutcome>
where
    F: Fn(&HybridConfig) -> Result<f64> + Sync,
{
    grid.validate()?;
    let cells = grid.cells();
    let rows: Vec<GridRow> = cells
        .par_iter()
        .map(|&(lambda, mu)| {
            let cfg = HybridConfig {
                lambda,
                mu,
                ..base.clone()
            };
            match fit(&cfg) {
                Ok(val_mse) => GridRow {
                    lambda,
                    mu,
                    val_mse: Some(val_mse),
                    error: None,
                },
                Err(e) => GridRow {
                    lambda,
                    mu,
                    val_mse: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut winner: Option<(f64, f64, f64)> = None; // (mse, lambda, mu)
    for r in &rows {
        if let Some(v) = r.val_mse {
            let cand = (v, r.lambda, r.mu);
            let better = match winner {
                None => true,
                Some(w) => cand < w,
            };
            if better {
                winner = Some(cand);
            }
        }
    }
    match winner {
        Some((best_val_mse, lambda, mu)) => Ok(GridOutcome {
            best: HybridConfig {
                lambda,
                mu,
                ..base.clone()
            },
            best_val_mse,
            rows,
        }),
        None => Err(Error::AllCellsFailed {
            count: rows.len(),
            first: rows
                .first()
                .and_then(|r| r.error.clone())
                .unwrap_or_else(|| "empty grid".into()),
        }),
    }
}

/// How [`run_experiment`] prepares data and fits models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub hybrid: HybridConfig,
    pub k_core: usize,
    pub vocab_size: usize,
    /// When set, lambda (and mu, for the joint model) come from a grid
    /// search on validation MSE instead of the base config.
    pub grid: Option<GridSpec>,
    pub dataset_name: String,
    /// Clip predictions into [1, 5] before scoring. Off by default: the
    /// metric is computed on raw predictions.
    pub clip: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hybrid: HybridConfig::default(),
            k_core: 5,
            vocab_size: 5000,
            grid: None,
            dataset_name: "dataset".into(),
            clip: false,
        }
    }
}

/// One scored model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub model: ModelKind,
    pub config: HybridConfig,
    pub mse_val: Option<f64>,
    pub mse_test: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
    pub error: Option<String>,
}

fn clip_predictions(preds: &mut [f64], enabled: bool) {
    if enabled {
        for p in preds {
            *p = p.clamp(1.0, 5.0);
        }
    }
}

pub(crate) fn score(params: &ParamSet, data: &Ratings, clip: bool) -> Result<f64> {
    let mut preds = predict_all(params, data);
    clip_predictions(&mut preds, clip);
    let truths: Vec<f64> = data.entries.iter().map(|e| e.rating).collect();
    mse(&preds, &truths)
}

/// Fit one model with the given config; never reads the test partition.
pub fn fit_model(
    model: ModelKind,
    hybrid: &HybridConfig,
    train: &Ratings,
    val: &Ratings,
    docs: &[ItemDocument],
    v: usize,
) -> Result<(ParamSet, Option<Vec<Vec<usize>>>, FitTrace)> {
    match model {
        ModelKind::Offset => {
            let stats = rating_stats(train)?;
            let mut params = ParamSet::zeros(train.n_users, train.n_items, hybrid.k, 0, v.max(1));
            params.alpha = offset_predict(&stats);
            Ok((params, None, FitTrace::default()))
        }
        ModelKind::Baseline => {
            let stats = rating_stats(train)?;
            let mut params = ParamSet::zeros(train.n_users, train.n_items, hybrid.k, 0, v.max(1));
            params.alpha = stats.alpha;
            params.b_user.assign(&stats.r_bar_user);
            params.b_item.assign(&stats.r_bar_item);
            // Sanity: the factor form reproduces baseline_predict.
            debug_assert!({
                let a = baseline_predict(&stats, 0, 0).unwrap();
                let b = crate::lfm::predict_rating(&params, 0, 0).unwrap();
                (a - b).abs() < 1e-12
            });
            Ok((params, None, FitTrace::default()))
        }
        ModelKind::Lfm => {
            let cfg = LfmFitConfig {
                k: hybrid.k,
                k_star: hybrid.k_star,
                lambda: hybrid.lambda,
                n_iter: hybrid.n_iter,
                seed: hybrid.seed,
                lr: hybrid.lr,
                v: v.max(1),
                include_q_norm: true,
                normalize: true,
            };
            let (params, trace) = fit_lfm(train, val, &cfg)?;
            Ok((params, None, trace))
        }
        ModelKind::LdaFirst => {
            let (params, trace) = fit_ldafirst(hybrid, train, val, docs, v.max(1))?;
            Ok((params, None, trace))
        }
        ModelKind::LdaLfm => {
            let fit = fit_lda_lfm(hybrid, train, val, docs, v.max(1))?;
            Ok((fit.params, Some(fit.state.z), fit.trace))
        }
    }
}

/// Resolve a model's (lambda, mu) by grid search on validation MSE when the
/// experiment asks for it; otherwise the base config stands. The offset and
/// baseline models have nothing to tune, and mu is meaningless outside the
/// joint model, so only lambda is swept for lfm/ldafirst.
pub fn resolve_config(
    model: ModelKind,
    cfg: &ExperimentConfig,
    train: &Ratings,
    val: &Ratings,
    docs: &[ItemDocument],
    v: usize,
) -> Result<HybridConfig> {
    let base = cfg.hybrid.clone();
    let grid = match (&cfg.grid, model) {
        (None, _) | (_, ModelKind::Offset) | (_, ModelKind::Baseline) => {
            return Ok(match model {
                ModelKind::Offset | ModelKind::Baseline => HybridConfig {
                    lambda: 0.0,
                    mu: 0.0,
                    ..base
                },
                _ => base,
            });
        }
        (Some(grid), ModelKind::LdaLfm) => grid.clone(),
        (Some(grid), _) => GridSpec {
            lambdas: grid.lambdas.clone(),
            mus: vec![0.0],
        },
    };
    let outcome = grid_search(&grid, &base, |c| {
        let (params, _, _) = fit_model(model, c, train, val, docs, v)?;
        score(&params, val, cfg.clip)
    })?;
    Ok(outcome.best)
}

/// Resolve, fit, and score one model; returns
/// (params, topic state, trace, val MSE, test MSE, resolved config).
pub fn fit_and_score(
    model: ModelKind,
    cfg: &ExperimentConfig,
    train: &Ratings,
    val: &Ratings,
    test: &Ratings,
    docs: &[ItemDocument],
    v: usize,
) -> Result<(ParamSet, Option<Vec<Vec<usize>>>, FitTrace, f64, f64, HybridConfig)> {
    let resolved = resolve_config(model, cfg, train, val, docs, v)?;
    let (params, topic_state, trace) = fit_model(model, &resolved, train, val, docs, v)?;
    let mse_val = score(&params, val, cfg.clip)?;
    let mse_test = score(&params, test, cfg.clip)?;
    Ok((params, topic_state, trace, mse_val, mse_test, resolved))
}

/// Ingest a raw review file, prepare splits and corpus, fit every requested
/// model, score on test, and persist the results table and checkpoints.
/// Per-model failures land in the table; the run continues.
pub fn run_experiment(
    dataset: &Path,
    models: &[ModelKind],
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<ExperimentResult>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (raw, report) = parse_reviews_file(dataset)?;
    if !report.errors.is_empty() {
        log::warn!("{} malformed lines skipped", report.errors.len());
    }
    let data = k_core_filter(deduplicate(raw), cfg.k_core);
    let split = split_dataset(&data, derive_seed(cfg.hybrid.seed, "split"))?;
    write_split(&split, out_dir)?;
    let (vocab, docs) = prepare_corpus(&split.train, &split.item_index, cfg.vocab_size);
    write_vocabulary(&vocab, &out_dir.join(crate::textprep::VOCAB_FILE))?;
    write_documents(&docs, &out_dir.join(crate::textprep::DOCS_FILE))?;

    let train = split.train_ratings();
    let val = split.validation_ratings();
    let test = split.test_ratings();
    let v = vocab.size().max(1);

    let mut results = Vec::new();
    for &model in models {
        let started = Instant::now();
        match fit_and_score(model, cfg, &train, &val, &test, &docs, v) {
            Ok((params, topic_state, trace, mse_val, mse_test, resolved)) => {
                let ck = Checkpoint {
                    format_version: CHECKPOINT_VERSION,
                    model: model.to_string(),
                    k: params.k(),
                    k_star: params.k_star(),
                    v: params.v(),
                    n_users: params.n_users(),
                    n_items: params.n_items(),
                    lambda: resolved.lambda,
                    mu: resolved.mu,
                    seed: resolved.seed,
                    params,
                    topic_state,
                };
                ck.save(&out_dir.join(format!("checkpoint_{model}.json")))?;
                if !trace.rows.is_empty() {
                    let path = out_dir.join(format!("trace_{model}.csv"));
                    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                    trace
                        .write_csv(BufWriter::new(file))
                        .map_err(|e| Error::io(&path, e))?;
                }
                results.push(ExperimentResult {
                    dataset: cfg.dataset_name.clone(),
                    model,
                    config: resolved,
                    mse_val: Some(mse_val),
                    mse_test: Some(mse_test),
                    wall_time_s: started.elapsed().as_secs_f64(),
                    seed: cfg.hybrid.seed,
                    error: None,
                });
            }
            Err(e) => {
                log::error!("model {model} failed: {e}");
                results.push(ExperimentResult {
                    dataset: cfg.dataset_name.clone(),
                    model,
                    config: cfg.hybrid.clone(),
                    mse_val: None,
                    mse_test: None,
                    wall_time_s: started.elapsed().as_secs_f64(),
                    seed: cfg.hybrid.seed,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    write_results_csv(&results, &out_dir.join("results.csv"))?;
    write_results_json(&results, &out_dir.join("results.json"))?;
    Ok(results)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Results table, one row per (dataset, model).
pub fn write_results_csv(results: &[ExperimentResult], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "dataset,model,K,K_star,lambda,mu,seed,mse_val,mse_test,wall_time_s"
    )
    .map_err(|e| Error::io(path, e))?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.dataset,
            r.model,
            r.config.k,
            r.config.k_star,
            r.config.lambda,
            r.config.mu,
            r.seed,
            fmt_opt(r.mse_val),
            fmt_opt(r.mse_test),
            r.wall_time_s
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// JSON mirror of the results table, full configs included.
pub fn write_results_json(results: &[ExperimentResult], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), results)?;
    Ok(())
}

/// Gnuplot-friendly `k_star mse_test` data, one block per dataset.
pub fn write_kstar_dat(results: &[ExperimentResult], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# dataset k_star mse_test").map_err(|e| Error::io(path, e))?;
    let mut datasets: Vec<&str> = results.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    for ds in datasets {
        let mut rows: Vec<(usize, f64)> = results
            .iter()
            .filter(|r| r.dataset == ds && r.model == ModelKind::LdaLfm)
            .filter_map(|r| r.mse_test.map(|m| (r.config.k_star, m)))
            .collect();
        rows.sort_unstable_by_key(|&(ks, _)| ks);
        if rows.is_empty() {
            continue;
        }
        writeln!(w, "# {ds}").map_err(|e| Error::io(path, e))?;
        for (ks, m) in rows {
            writeln!(w, "{ks} {m}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_identity_is_zero() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_computed() {
        assert_eq!(mse(&[3.0, 5.0], &[4.0, 4.0]).unwrap(), 1.0);
    }

    #[test]
    fn mse_of_constant_predictor_is_variance() {
        let truths = [1.0, 2.0, 3.0, 6.0];
        let mean = truths.iter().sum::<f64>() / truths.len() as f64;
        let preds = vec![mean; truths.len()];
        let var = truths.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / truths.len() as f64;
        assert!((mse(&preds, &truths).unwrap() - var).abs() < 1e-12);
    }

    #[test]
    fn mse_rejects_bad_lengths() {
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn mse_permutation_invariant_and_quadratic(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
            c in 0.1f64..4.0,
        ) {
            let preds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let truths: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let base = mse(&preds, &truths).unwrap();

            let mut rev_p = preds.clone();
            let mut rev_t = truths.clone();
            rev_p.reverse();
            rev_t.reverse();
            prop_assert!((mse(&rev_p, &rev_t).unwrap() - base).abs() < 1e-12);

            // Scale every error by c: MSE scales by c^2.
            let scaled: Vec<f64> = preds
                .iter()
                .zip(&truths)
                .map(|(p, t)| t + c * (p - t))
                .collect();
            let got = mse(&scaled, &truths).unwrap();
            prop_assert!((got - c * c * base).abs() < 1e-9 * (1.0 + base));
        }
    }

    #[test]
    fn grid_single_cell_wins() {
        let grid = GridSpec {
            lambdas: vec![0.5],
            mus: vec![2.0],
        };
        let out = grid_search(&grid, &HybridConfig::default(), |_| Ok(1.25)).unwrap();
        assert_eq!(out.best.lambda, 0.5);
        assert_eq!(out.best.mu, 2.0);
        assert_eq!(out.rows.len(), 1);
    }

    #[test]
    fn grid_rigged_cell_wins() {
        let grid = GridSpec {
            lambdas: vec![0.0, 1.0],
            mus: vec![1.0, 10.0],
        };
        let out = grid_search(&grid, &HybridConfig::default(), |c| {
            if c.lambda == 1.0 && c.mu == 10.0 {
                Ok(0.0)
            } else {
                Ok(5.0)
            }
        })
        .unwrap();
        assert_eq!((out.best.lambda, out.best.mu), (1.0, 10.0));
        assert_eq!(out.best_val_mse, 0.0);
    }

    #[test]
    fn default_grid_has_25_cells() {
        let grid = GridSpec::default();
        let out = grid_search(&grid, &HybridConfig::default(), |c| Ok(c.lambda + c.mu)).unwrap();
        assert_eq!(out.rows.len(), 25);
        // Winner's MSE equals the table minimum.
        let min = out
            .rows
            .iter()
            .filter_map(|r| r.val_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_mse, min);
    }

    #[test]
    fn grid_ties_break_to_smaller_lambda_then_mu() {
        let grid = GridSpec {
            lambdas: vec![0.0, 0.001],
            mus: vec![1.0, 10.0],
        };
        let out = grid_search(&grid, &HybridConfig::default(), |_| Ok(3.0)).unwrap();
        assert_eq!((out.best.lambda, out.best.mu), (0.0, 1.0));
    }

    #[test]
    fn grid_errors_only_when_every_cell_fails() {
        let grid = GridSpec {
            lambdas: vec![0.0, 1.0],
            mus: vec![1.0],
        };
        let out = grid_search(&grid, &HybridConfig::default(), |c| {
            if c.lambda == 0.0 {
                Err(Error::Diverged {
                    iteration: 3,
                    value: f64::INFINITY,
                })
            } else {
                Ok(2.0)
            }
        })
        .unwrap();
        assert_eq!(out.best.lambda, 1.0);
        assert_eq!(out.rows.iter().filter(|r| r.error.is_some()).count(), 1);

        let err = grid_search(&grid, &HybridConfig::default(), |_| {
            Err::<f64, _>(Error::EmptyTrainSet)
        })
        .unwrap_err();
        assert!(matches!(err, Error::AllCellsFailed { count: 2, .. }));
    }
}
