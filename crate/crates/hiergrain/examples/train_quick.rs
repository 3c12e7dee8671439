//! Train a small chained model end to end with the library API: build a
//! dataset, fit with cosine-scheduled SGD, inspect the selected epoch,
//! and evaluate the checkpointed weights on the test split.
//!
//! Run with `cargo run --example train_quick`.

use hiergrain::data::{self, DatasetSpec, Split};
use hiergrain::hierarchy::LabelTree;
use hiergrain::model::ModelConfig;
use hiergrain::objective::LossConfig;
use hiergrain::train::{fit, TrainConfig};

fn main() -> hiergrain::Result<()> {
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
        level_spread: vec![5.0, 1.2],
        noise: 1.4,
        seed: 9,
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
        epochs: 20,
        batch_size: 16,
        ..TrainConfig::default()
    };

    let (record, checkpoint) = fit(&tree, &ds, model_cfg, &LossConfig::default(), &train_cfg, 0)?;
    for e in (0..record.train_loss.len()).step_by(4) {
        let v = &record.validation[e];
        println!(
            "epoch {e:2}: loss {:.4}, val top1 {:?}, lr {:.4}/{:.4}",
            record.train_loss[e],
            v.top1.iter().map(|t| (t * 100.0).round() / 100.0).collect::<Vec<_>>(),
            record.encoder_lr[e],
            record.head_lr[e]
        );
    }
    println!(
        "selected epoch {} by {} with score {:.4}",
        record.best_epoch,
        record.selection.as_str(),
        record.best_score
    );

    // The checkpoint holds the best epoch's parameters and normalization
    // statistics; restoring it rebuilds a session that reproduces that
    // epoch's predictions.
    let mut session = checkpoint.restore(&tree)?;
    let report = session.evaluate(&ds, Split::Test)?;
    for rule in &report.rules {
        let fine = rule.levels.last().expect("fine level present");
        println!(
            "test {}: top1 {:.3}, mistake severity {:?}",
            rule.rule, fine.top1, fine.mistake_severity
        );
    }
    Ok(())
}
