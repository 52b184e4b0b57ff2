//! Command-line pipeline: `prepare`, `train`, `evaluate`, `gridsearch`, and
//! `report`. Every command that writes artifacts also writes a
//! `manifest.json` recording the resolved configuration, the seed, and the
//! input paths, so an output directory can be reproduced from its manifest.
//!
//! Settings resolve in three layers: built-in defaults, then an optional
//! TOML config file (`--config`), then flags. Flags win.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    fit_model, grid_search, mse, score, write_kstar_dat, ExperimentResult, GridSpec, ModelKind,
};
use crate::hybrid::HybridConfig;
use crate::ingest::{deduplicate, k_core_filter, parse_reviews_file, read_split, split_dataset,
    write_split, DatasetSplit};
use crate::lfm::predict_all;
use crate::optim::{Checkpoint, CHECKPOINT_VERSION, KAPPA_INIT};
use crate::rng::derive_seed;
use crate::textprep::{prepare_corpus, read_documents, read_vocabulary, write_documents,
    write_vocabulary, ItemDocument, Vocabulary, DOCS_FILE, VOCAB_FILE};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_K_STAR: usize = 0;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_MU: f64 = 1.0;
pub const DEFAULT_ITERS: usize = 35;
pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_NU: f64 = 0.1;
pub const DEFAULT_VOCAB_SIZE: usize = 5000;
pub const DEFAULT_K_CORE: usize = 5;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "lda-lfm", version, about = "Review-aware rating prediction pipeline")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

/// Flag overrides shared by train and gridsearch.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Topic/factor count.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Extra factor columns outside the topic model.
    #[arg(long = "K-star")]
    pub k_star: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Outer iterations of the fitting loop.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse raw reviews, dedup, k-core filter, split, and build the corpus.
    Prepare {
        /// Raw JSON-lines review file.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "k-core")]
        k_core: Option<usize>,
        #[arg(long = "vocab-size")]
        vocab_size: Option<usize>,
    },
    /// Fit one model on a prepared directory.
    Train {
        /// Directory written by `prepare`.
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// offset | baseline | lfm | ldafirst | lda_lfm
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint on the prepared validation and test partitions.
    Evaluate {
        checkpoint: PathBuf,
        prepared: PathBuf,
        /// Also print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Directory for report.json and its manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the (lambda, mu) grid, selecting by validation MSE.
    Gridsearch {
        prepared: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// lfm | ldafirst | lda_lfm (offset/baseline have nothing to tune)
        #[arg(long)]
        model: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Merge result tables and render the model comparison.
    Report {
        /// results.csv files, or directories containing them.
        inputs: Vec<PathBuf>,
        /// Write the merged table here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        /// Write a gnuplot data file of MSE-vs-K* curves.
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
}

/// Keys accepted in the TOML config file; all optional.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub k_star: Option<usize>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub iters: Option<usize>,
    pub lr: Option<f64>,
    pub vocab_size: Option<usize>,
    pub k_core: Option<usize>,
    pub model: Option<String>,
    pub lambda_grid: Option<Vec<f64>>,
    pub mu_grid: Option<Vec<f64>>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let mut text = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Everything a run resolved to; embedded in each manifest so any default
/// can be asserted after the fact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedProtocol {
    pub k: usize,
    pub k_star: usize,
    pub lambda: f64,
    pub mu: f64,
    pub n_iter: usize,
    pub lr: f64,
    pub gamma: f64,
    pub nu: f64,
    pub kappa_init: f64,
    pub vocab_size: usize,
    pub k_core: usize,
    pub lambda_grid: Vec<f64>,
    pub mu_grid: Vec<f64>,
    pub model: Option<String>,
}

/// Written alongside every output directory. Output entries are file names
/// relative to the directory, so two runs into different directories with
/// the same inputs produce byte-identical manifests.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_file: Option<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub protocol: ResolvedProtocol,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

struct Resolved {
    hybrid: HybridConfig,
    vocab_size: usize,
    k_core: usize,
    model: Option<ModelKind>,
    lambda_grid: Vec<f64>,
    mu_grid: Vec<f64>,
}

fn resolve(file: &FileConfig, over: &Overrides, model_flag: Option<&str>) -> Result<Resolved> {
    let k = over.k.or(file.k).unwrap_or(DEFAULT_K);
    if k < 1 {
        return Err(Error::InvalidArgument("--K must be >= 1".into()));
    }
    let n_iter = over.iters.or(file.iters).unwrap_or(DEFAULT_ITERS);
    if n_iter < 1 {
        return Err(Error::InvalidArgument("--iters must be >= 1".into()));
    }
    let lambda = over.lambda.or(file.lambda).unwrap_or(DEFAULT_LAMBDA);
    let mu = over.mu.or(file.mu).unwrap_or(DEFAULT_MU);
    if lambda < 0.0 || mu < 0.0 {
        return Err(Error::InvalidArgument(
            "--lambda and --mu must be >= 0".into(),
        ));
    }
    let model = match model_flag.or(file.model.as_deref()) {
        Some(name) => Some(name.parse::<ModelKind>()?),
        None => None,
    };
    let defaults = GridSpec::default();
    Ok(Resolved {
        hybrid: HybridConfig {
            k,
            k_star: over.k_star.or(file.k_star).unwrap_or(DEFAULT_K_STAR),
            lambda,
            mu,
            n_iter,
            seed: over.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            lr: over.lr.or(file.lr).unwrap_or(DEFAULT_LR),
            inner_steps: 1,
            gamma: DEFAULT_GAMMA,
            nu: DEFAULT_NU,
            gibbs_sweeps: 200,
        },
        vocab_size: file.vocab_size.unwrap_or(DEFAULT_VOCAB_SIZE),
        k_core: file.k_core.unwrap_or(DEFAULT_K_CORE),
        model,
        lambda_grid: file.lambda_grid.clone().unwrap_or(defaults.lambdas),
        mu_grid: file.mu_grid.clone().unwrap_or(defaults.mus),
    })
}

fn protocol_of(r: &Resolved) -> ResolvedProtocol {
    ResolvedProtocol {
        k: r.hybrid.k,
        k_star: r.hybrid.k_star,
        lambda: r.hybrid.lambda,
        mu: r.hybrid.mu,
        n_iter: r.hybrid.n_iter,
        lr: r.hybrid.lr,
        gamma: r.hybrid.gamma,
        nu: r.hybrid.nu,
        kappa_init: KAPPA_INIT,
        vocab_size: r.vocab_size,
        k_core: r.k_core,
        lambda_grid: r.lambda_grid.clone(),
        mu_grid: r.mu_grid.clone(),
        model: r.model.map(|m| m.to_string()),
    }
}

/// A prepared directory loaded back into memory.
pub struct PreparedDataset {
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub docs: Vec<ItemDocument>,
    pub dataset_name: String,
}

pub fn load_prepared(dir: &Path) -> Result<PreparedDataset> {
    let split = read_split(dir)?;
    let vocab = read_vocabulary(&dir.join(VOCAB_FILE))?;
    let docs = read_documents(&dir.join(DOCS_FILE))?;
    if docs.len() != split.n_items() {
        return Err(Error::Incompatible(format!(
            "{} documents for {} items in {}",
            docs.len(),
            split.n_items(),
            dir.display()
        )));
    }
    let dataset_name = RunManifest::load(dir)
        .ok()
        .and_then(|m| m.inputs.first().cloned())
        .map(|p| {
            Path::new(&p)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(p)
        })
        .unwrap_or_else(|| "dataset".to_string());
    Ok(PreparedDataset {
        split,
        vocab,
        docs,
        dataset_name,
    })
}

fn cmd_prepare(
    input: &Path,
    out: &Path,
    resolved: &Resolved,
    config_file: Option<&Path>,
) -> Result<()> {
    if !input.exists() {
        return Err(Error::io(
            input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (raw, report) = parse_reviews_file(input)?;
    if !report.errors.is_empty() {
        log::warn!(
            "{}: skipped {} malformed lines (first at line {})",
            input.display(),
            report.errors.len(),
            report.errors[0].line
        );
    }
    let data = k_core_filter(deduplicate(raw), resolved.k_core);
    let split = split_dataset(&data, derive_seed(resolved.hybrid.seed, "split"))?;
    write_split(&split, out)?;
    let (vocab, docs) = prepare_corpus(&split.train, &split.item_index, resolved.vocab_size);
    write_vocabulary(&vocab, &out.join(VOCAB_FILE))?;
    write_documents(&docs, &out.join(DOCS_FILE))?;
    RunManifest {
        command: "prepare".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: resolved.hybrid.seed,
        config_file: config_file.map(|p| p.display().to_string()),
        inputs: vec![input.display().to_string()],
        outputs: vec![
            crate::ingest::TRAIN_FILE.into(),
            crate::ingest::VALIDATION_FILE.into(),
            crate::ingest::TEST_FILE.into(),
            crate::ingest::INDEX_FILE.into(),
            VOCAB_FILE.into(),
            DOCS_FILE.into(),
        ],
        protocol: protocol_of(resolved),
    }
    .write(out)?;
    println!(
        "prepared {}: {} train / {} validation / {} test interactions, {} items, vocabulary {}",
        out.display(),
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        split.n_items(),
        vocab.size()
    );
    Ok(())
}

fn cmd_train(
    prepared: &Path,
    out: &Path,
    resolved: &Resolved,
    config_file: Option<&Path>,
) -> Result<()> {
    let model = resolved.model.unwrap_or(ModelKind::LdaLfm);
    let data = load_prepared(prepared)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let train = data.split.train_ratings();
    let val = data.split.validation_ratings();
    let v = data.vocab.size().max(1);
    let (params, topic_state, trace) =
        fit_model(model, &resolved.hybrid, &train, &val, &data.docs, v)?;
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model: model.to_string(),
        k: params.k(),
        k_star: params.k_star(),
        v: params.v(),
        n_users: params.n_users(),
        n_items: params.n_items(),
        lambda: resolved.hybrid.lambda,
        mu: resolved.hybrid.mu,
        seed: resolved.hybrid.seed,
        params,
        topic_state,
    };
    ck.save(&out.join("checkpoint.json"))?;
    let mut outputs = vec!["checkpoint.json".to_string()];
    if !trace.rows.is_empty() {
        let path = out.join("trace.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        trace
            .write_csv(BufWriter::new(file))
            .map_err(|e| Error::io(&path, e))?;
        outputs.push("trace.csv".into());
    }
    RunManifest {
        command: "train".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: resolved.hybrid.seed,
        config_file: config_file.map(|p| p.display().to_string()),
        inputs: vec![prepared.display().to_string()],
        outputs,
        protocol: ResolvedProtocol {
            model: Some(model.to_string()),
            ..protocol_of(resolved)
        },
    }
    .write(out)?;
    match trace.rows.last() {
        Some(last) => println!(
            "trained {model}: final train objective {:.6}, validation MSE {:.6}",
            last.train_objective, last.val_mse
        ),
        None => println!("trained {model} (closed form)"),
    }
    Ok(())
}

/// The evaluate report, mirroring the results-table fields.
#[derive(Debug, Serialize)]
pub struct EvaluateReport {
    pub dataset: String,
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K_star")]
    pub k_star: usize,
    pub lambda: f64,
    pub mu: f64,
    pub seed: u64,
    pub mse_val: Option<f64>,
    pub mse_test: f64,
    pub wall_time_s: f64,
}

fn cmd_evaluate(
    checkpoint: &Path,
    prepared: &Path,
    json: bool,
    out: Option<&Path>,
    config_file: Option<&Path>,
) -> Result<()> {
    let started = Instant::now();
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_prepared(prepared)?;
    let v = data.vocab.size().max(1);
    if ck.v != v || ck.n_users != data.split.n_users() || ck.n_items != data.split.n_items() {
        return Err(Error::Incompatible(format!(
            "checkpoint (K={}, K*={}, V={}, {} users, {} items) does not match prepared data \
             (V={}, {} users, {} items)",
            ck.k,
            ck.k_star,
            ck.v,
            ck.n_users,
            ck.n_items,
            v,
            data.split.n_users(),
            data.split.n_items()
        )));
    }
    let val = data.split.validation_ratings();
    let test = data.split.test_ratings();
    if test.entries.is_empty() {
        return Err(Error::InvalidArgument("test partition is empty".into()));
    }
    let preds = predict_all(&ck.params, &test);
    let truths: Vec<f64> = test.entries.iter().map(|e| e.rating).collect();
    let mse_test = mse(&preds, &truths)?;
    let mse_val = if val.entries.is_empty() {
        None
    } else {
        Some(score(&ck.params, &val, false)?)
    };
    let report = EvaluateReport {
        dataset: data.dataset_name.clone(),
        model: ck.model.clone(),
        k: ck.k,
        k_star: ck.k_star,
        lambda: ck.lambda,
        mu: ck.mu,
        seed: ck.seed,
        mse_val,
        mse_test,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    println!("model {}: test MSE {:.6}", report.model, report.mse_test);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &report)?;
        RunManifest {
            command: "evaluate".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: ck.seed,
            config_file: config_file.map(|p| p.display().to_string()),
            inputs: vec![
                checkpoint.display().to_string(),
                prepared.display().to_string(),
            ],
            outputs: vec!["report.json".into()],
            protocol: ResolvedProtocol {
                k: ck.k,
                k_star: ck.k_star,
                lambda: ck.lambda,
                mu: ck.mu,
                n_iter: 0,
                lr: 0.0,
                gamma: DEFAULT_GAMMA,
                nu: DEFAULT_NU,
                kappa_init: KAPPA_INIT,
                vocab_size: ck.v,
                k_core: 0,
                lambda_grid: vec![],
                mu_grid: vec![],
                model: Some(ck.model.clone()),
            },
        }
        .write(dir)?;
    }
    Ok(())
}

fn cmd_gridsearch(
    prepared: &Path,
    out: &Path,
    resolved: &Resolved,
    config_file: Option<&Path>,
) -> Result<()> {
    let model = resolved.model.unwrap_or(ModelKind::LdaLfm);
    if matches!(model, ModelKind::Offset | ModelKind::Baseline) {
        return Err(Error::InvalidArgument(format!(
            "model {model} has no hyperparameters to search"
        )));
    }
    let data = load_prepared(prepared)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let train = data.split.train_ratings();
    let val = data.split.validation_ratings();
    if val.entries.is_empty() {
        return Err(Error::InvalidArgument(
            "validation partition is empty; cannot select a model".into(),
        ));
    }
    let v = data.vocab.size().max(1);
    let grid = match model {
        ModelKind::LdaLfm => GridSpec {
            lambdas: resolved.lambda_grid.clone(),
            mus: resolved.mu_grid.clone(),
        },
        _ => GridSpec {
            lambdas: resolved.lambda_grid.clone(),
            mus: vec![0.0],
        },
    };
    let outcome = grid_search(&grid, &resolved.hybrid, |c| {
        let (params, _, _) = fit_model(model, c, &train, &val, &data.docs, v)?;
        score(&params, &val, false)
    })?;

    let path = out.join("results.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "dataset,model,K,K_star,lambda,mu,seed,mse_val,mse_test,wall_time_s")
        .map_err(|e| Error::io(&path, e))?;
    for row in &outcome.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},,",
            data.dataset_name,
            model,
            resolved.hybrid.k,
            resolved.hybrid.k_star,
            row.lambda,
            row.mu,
            resolved.hybrid.seed,
            row.val_mse.map(|v| v.to_string()).unwrap_or_default()
        )
        .map_err(|e| Error::io(&path, e))?;
    }
    drop(w);
    let best_path = out.join("best.json");
    let file = File::create(&best_path).map_err(|e| Error::io(&best_path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &outcome.best)?;
    RunManifest {
        command: "gridsearch".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: resolved.hybrid.seed,
        config_file: config_file.map(|p| p.display().to_string()),
        inputs: vec![prepared.display().to_string()],
        outputs: vec!["results.csv".into(), "best.json".into()],
        protocol: ResolvedProtocol {
            model: Some(model.to_string()),
            ..protocol_of(resolved)
        },
    }
    .write(out)?;
    println!(
        "grid over {} cells: best lambda {} mu {} (validation MSE {:.6})",
        outcome.rows.len(),
        outcome.best.lambda,
        outcome.best.mu,
        outcome.best_val_mse
    );
    Ok(())
}

/// One parsed results-table row.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K_star")]
    pub k_star: usize,
    pub lambda: f64,
    pub mu: f64,
    pub seed: u64,
    pub mse_val: Option<f64>,
    pub mse_test: Option<f64>,
    pub wall_time_s: Option<f64>,
}

fn read_result_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let row: ReportRow = rec.map_err(|e| Error::format(path, e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

fn collect_result_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let entries = std::fs::read_dir(input).map_err(|e| Error::io(input, e))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.ends_with(".csv") && n.starts_with("results"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else if input.exists() {
            files.push(input.clone());
        } else {
            return Err(Error::io(
                input,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            ));
        }
    }
    Ok(files)
}

/// Improvement of `model` over `reference` in percent, the convention used
/// in the comparison table.
pub fn improvement_pct(reference: f64, model: f64) -> f64 {
    (reference - model) / reference * 100.0
}

fn cmd_report(
    inputs: &[PathBuf],
    out: Option<&Path>,
    json: bool,
    gnuplot: Option<&Path>,
) -> Result<()> {
    let files = collect_result_files(inputs)?;
    let mut rows: Vec<ReportRow> = Vec::new();
    for f in &files {
        rows.extend(read_result_rows(f)?);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no result rows found under {} input(s)",
            inputs.len()
        )));
    }
    rows.sort_by(|a, b| a.dataset.cmp(&b.dataset).then_with(|| a.model.cmp(&b.model)));

    println!("{:<16} {:<10} {:>3} {:>3} {:>9} {:>9} {:>10} {:>10}",
        "dataset", "model", "K", "K*", "lambda", "mu", "mse_val", "mse_test");
    for r in &rows {
        println!(
            "{:<16} {:<10} {:>3} {:>3} {:>9} {:>9} {:>10} {:>10}",
            r.dataset,
            r.model,
            r.k,
            r.k_star,
            r.lambda,
            r.mu,
            r.mse_val.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.mse_test.map(|v| format!("{v:.4}")).unwrap_or_default(),
        );
    }

    // Per-dataset improvement of the joint model over lfm and ldafirst.
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    let lookup = |ds: &str, model: &str| -> Option<f64> {
        rows.iter()
            .find(|r| r.dataset == ds && r.model == model)
            .and_then(|r| r.mse_test)
    };
    for ds in &datasets {
        if let (Some(joint), Some(lfm_mse), Some(ldafirst_mse)) = (
            lookup(ds, "lda_lfm"),
            lookup(ds, "lfm"),
            lookup(ds, "ldafirst"),
        ) {
            println!(
                "{ds}: improvement over lfm {:+.2}%, over ldafirst {:+.2}%",
                improvement_pct(lfm_mse, joint),
                improvement_pct(ldafirst_mse, joint)
            );
        }
    }

    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    }
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "dataset,model,K,K_star,lambda,mu,seed,mse_val,mse_test,wall_time_s")
            .map_err(|e| Error::io(path, e))?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.dataset,
                r.model,
                r.k,
                r.k_star,
                r.lambda,
                r.mu,
                r.seed,
                r.mse_val.map(|v| v.to_string()).unwrap_or_default(),
                r.mse_test.map(|v| v.to_string()).unwrap_or_default(),
                r.wall_time_s.map(|v| v.to_string()).unwrap_or_default(),
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    if let Some(path) = gnuplot {
        let results: Vec<ExperimentResult> = rows
            .iter()
            .filter(|r| r.model == "lda_lfm")
            .map(|r| ExperimentResult {
                dataset: r.dataset.clone(),
                model: ModelKind::LdaLfm,
                config: HybridConfig {
                    k: r.k,
                    k_star: r.k_star,
                    lambda: r.lambda,
                    mu: r.mu,
                    seed: r.seed,
                    ..HybridConfig::default()
                },
                mse_val: r.mse_val,
                mse_test: r.mse_test,
                wall_time_s: r.wall_time_s.unwrap_or(0.0),
                seed: r.seed,
                error: None,
            })
            .collect();
        write_kstar_dat(&results, path)?;
    }
    Ok(())
}

/// Run a parsed command line; errors bubble to the binary, which exits
/// nonzero.
pub fn run(cli: Cli) -> Result<()> {
    let file_cfg = FileConfig::load(cli.config.as_deref())?;
    let config_file = cli.config.as_deref();
    match &cli.command {
        Command::Prepare {
            input,
            out,
            seed,
            k_core,
            vocab_size,
        } => {
            let over = Overrides {
                seed: *seed,
                ..Overrides::default()
            };
            let mut resolved = resolve(&file_cfg, &over, None)?;
            if let Some(k_core) = k_core {
                if *k_core < 1 {
                    return Err(Error::InvalidArgument("--k-core must be >= 1".into()));
                }
                resolved.k_core = *k_core;
            }
            if let Some(v) = vocab_size {
                if *v < 1 {
                    return Err(Error::InvalidArgument("--vocab-size must be >= 1".into()));
                }
                resolved.vocab_size = *v;
            }
            cmd_prepare(input, out, &resolved, config_file)
        }
        Command::Train {
            prepared,
            out,
            model,
            overrides,
        } => {
            let resolved = resolve(&file_cfg, overrides, model.as_deref())?;
            cmd_train(prepared, out, &resolved, config_file)
        }
        Command::Evaluate {
            checkpoint,
            prepared,
            json,
            out,
        } => cmd_evaluate(checkpoint, prepared, *json, out.as_deref(), config_file),
        Command::Gridsearch {
            prepared,
            out,
            model,
            overrides,
        } => {
            let resolved = resolve(&file_cfg, overrides, model.as_deref())?;
            cmd_gridsearch(prepared, out, &resolved, config_file)
        }
        Command::Report {
            inputs,
            out,
            json,
            gnuplot,
        } => cmd_report(inputs, out.as_deref(), *json, gnuplot.as_deref()),
    }
}

/// Parse arguments (the way the binary does) and run; handy for tests.
pub fn run_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    run(cli)
}

/// Map file names to SHA-256-free content for determinism checks in tests:
/// returns (relative name -> bytes) for every file in a directory.
pub fn dir_contents(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut map = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            map.insert(name, bytes);
        }
    }
    Ok(map)
}
