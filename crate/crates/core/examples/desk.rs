//! Trains one head on the synthetic dataset and reports test accuracy.
//!
//! `cargo run --release --example desk -- meta 20 50`

use std::time::Instant;

use rcn_core::backbone::BackboneConfig;
use rcn_core::episodes::{generate_synthetic, Split, SyntheticSpec};
use rcn_core::explainer::HeadKind;
use rcn_core::matcher::SimilarityMetric;
use rcn_core::model::{ModelConfig, RcnModel};
use rcn_core::trainer::{evaluate, train, RcnScorer, TrainConfig};

fn main() -> rcn_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let head: HeadKind = args.get(1).map_or("meta", String::as_str).parse()?;
    let iterations: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let per_iter: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(50);
    let queries: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(15);
    let data = generate_synthetic(&SyntheticSpec::default())?;
    let bb = BackboneConfig::preset("conv4-32", data.image_size)?;
    let model = RcnModel::new(ModelConfig::new(bb, head, SimilarityMetric::default()), 0)?;
    let cfg = TrainConfig {
        iterations,
        episodes_per_iteration: per_iter,
        train_queries: queries,
        val_episodes: 200,
        ..Default::default()
    };
    let t = Instant::now();
    let out = train(model, &data, &cfg, None)?;
    for r in &out.log {
        println!(
            "{} loss {:.3} val {:.2} lr {:.1e} t {:.0}s",
            r.iteration,
            r.train_loss,
            r.val_accuracy.unwrap_or(0.0),
            r.learning_rate,
            r.elapsed_secs
        );
    }
    let scorer = RcnScorer::new(&out.model, &data, Split::Test)?;
    let report = evaluate(&scorer, &data, Split::Test, 600, 5, 1, 15, 7)?;
    println!(
        "{head}: test {report} after {:.0}s",
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
