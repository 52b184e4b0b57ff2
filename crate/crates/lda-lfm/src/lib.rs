//! A hybrid recommender that models sparse star ratings with a biased
//! latent factor model while tying the item factors to an LDA topic model
//! over the items' review text, so the two sides regularize each other.
//!
//! The crate covers the full pipeline:
//!
//! - [`ingest`]: JSON-lines review parsing, dedup, k-core filtering, and
//!   seeded 80/10/10 splitting with cold-start pruning.
//! - [`textprep`]: the cleaning pipeline, vocabulary, and per-item corpus.
//! - [`optim`]: the trainable parameter set, Adam, and a finite-difference
//!   gradient oracle.
//! - [`lfm`]: the offset, bias-baseline, and latent factor rating models.
//! - [`topicmodel`]: softmax-linked topic distributions, corpus likelihood,
//!   topic resampling, and a collapsed-Gibbs LDA.
//! - [`hybrid`]: the joint objective/gradients, the two-step fitting loop,
//!   extra latent features, and the LDAFirst baseline.
//! - [`eval`]: the MSE metric, (lambda, mu) grid search, and the experiment
//!   runner.
//! - [`cli`]: the `prepare`/`train`/`evaluate`/`gridsearch`/`report`
//!   subcommands behind the `lda-lfm` binary.
//!
//! Start with the runnable examples: each one drives a major capability
//! end to end (`cargo run -p lda-lfm --example train_lda_lfm`).

pub mod cli;
pub mod error;
pub mod eval;
pub mod hybrid;
pub mod ingest;
pub mod lfm;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod textprep;
pub mod topicmodel;

pub use error::{Error, Result};
pub use eval::{mse, ExperimentConfig, ExperimentResult, GridSpec, ModelKind};
pub use hybrid::{fit_lda_lfm, fit_ldafirst, HybridConfig, HybridFit};
pub use ingest::{DatasetSplit, DenseRating, Interaction, Ratings};
pub use lfm::{fit_lfm, predict_rating, LfmFitConfig};
pub use optim::{Checkpoint, ParamSet};
pub use textprep::{ItemDocument, Vocabulary};
pub use topicmodel::{TopicDistributions, TopicState};
