//! Fit the joint rating/topic model on a planted synthetic instance and
//! compare its test error to the global-offset predictor and to the
//! generating model's own noise floor.
//!
//!     cargo run --release -p lda-lfm --example train_lda_lfm

use lda_lfm::eval::mse;
use lda_lfm::hybrid::{fit_lda_lfm, HybridConfig};
use lda_lfm::lfm::{offset_predict, predict_all, rating_stats};
use lda_lfm::synth::{generate, planted_test_mse, PlantedSpec};

fn main() {
    let spec = PlantedSpec::default();
    let data = generate(&spec);
    println!(
        "planted instance: {} users, {} items, {} train ratings, {} documents",
        spec.n_users,
        spec.n_items,
        data.train.entries.len(),
        data.docs.len()
    );

    let cfg = HybridConfig {
        k: spec.k,
        lambda: 0.01,
        mu: 1.0,
        n_iter: 600,
        seed: 11,
        ..HybridConfig::default()
    };
    let fit = fit_lda_lfm(&cfg, &data.train, &data.validation, &data.docs, spec.v)
        .expect("training should converge");

    println!("\nlast iterations:");
    for row in fit.trace.rows.iter().rev().take(5).rev() {
        println!(
            "  iter {:>4}: objective {:>12.3}, val MSE {:.4}",
            row.iteration, row.train_objective, row.val_mse
        );
    }

    let truths: Vec<f64> = data.test.entries.iter().map(|e| e.rating).collect();
    let preds = predict_all(&fit.params, &data.test);
    let joint_mse = mse(&preds, &truths).unwrap();

    let stats = rating_stats(&data.train).unwrap();
    let offset = vec![offset_predict(&stats); truths.len()];
    let offset_mse = mse(&offset, &truths).unwrap();

    println!("\ntest MSE:");
    println!("  planted noise floor  {:.4}", planted_test_mse(&data));
    println!("  offset baseline      {offset_mse:.4}");
    println!("  joint model          {joint_mse:.4}");
    println!("\nlearned kappa: {:.4}", fit.params.kappa);
}
