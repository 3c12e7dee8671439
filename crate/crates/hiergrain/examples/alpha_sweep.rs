//! Sweep the level-weight decay rate and watch how shifting loss mass
//! between coarse and fine levels moves the fine-level metrics.
//!
//! Run with `cargo run --example alpha_sweep`.

use hiergrain::data::{self, DatasetSpec, Split};
use hiergrain::hierarchy::LabelTree;
use hiergrain::model::ModelConfig;
use hiergrain::objective::{level_weight, LossConfig};
use hiergrain::train::{fit, TrainConfig};

fn main() -> hiergrain::Result<()> {
    // Weights follow exp(alpha * (h - depth)): always 1 at the finest
    // level, geometrically damped toward the root.
    println!("level weights for a depth-3 tree:");
    for &alpha in &[0.0, 0.5, 1.0, 2.0] {
        let w: Vec<String> = (1..=3)
            .map(|h| format!("{:.3}", level_weight(alpha, h, 3)))
            .collect();
        println!("  alpha {alpha:.1}: [{}]", w.join(", "));
    }

    let tree = LabelTree::parse(
        "a/x\n\
         a/y\n\
         a/z\n\
         b/x\n\
         b/y\n\
         b/z\n",
    )?;
    let spec = DatasetSpec {
        tree: tree.clone(),
        dim: 8,
        per_leaf: 40,
        level_spread: vec![0.7, 1.0],
        noise: 1.3,
        seed: 4,
        fractions: [0.6, 0.2, 0.2],
    };
    let ds = data::generate(&spec)?;
    let model_cfg = ModelConfig {
        input_dim: ds.dim(),
        hidden1: 24,
        hidden2: 24,
        feature_dim: 24,
    };
    let train_cfg = TrainConfig {
        epochs: 15,
        batch_size: 16,
        ..TrainConfig::default()
    };

    println!("\nalpha sweep on a small two-level problem (seed 0):");
    for &alpha in &[0.0, 0.25, 0.5, 1.0, 2.0] {
        let loss = LossConfig {
            alpha,
            ..LossConfig::default()
        };
        let (_, ckpt) = fit(&tree, &ds, model_cfg, &loss, &train_cfg, 0)?;
        let mut session = ckpt.restore(&tree)?;
        let report = session.evaluate(&ds, Split::Test)?;
        let levels = &report.rule("augmented").expect("rule present").levels;
        let (coarse, fine) = (&levels[0], &levels[1]);
        println!(
            "  alpha {alpha:.2}: coarse top1 {:.3}, fine top1 {:.3}, severity {}",
            coarse.top1,
            fine.top1,
            fine.mistake_severity
                .map(|s| format!("{s:.3}"))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(())
}
