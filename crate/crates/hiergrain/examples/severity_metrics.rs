//! Compute the hierarchy-aware metrics on hand-made predictions and
//! show the identity tying them together: mean top-1 tree distance
//! equals mistake severity times the error rate.
//!
//! Run with `cargo run --example severity_metrics`.

use hiergrain::hierarchy::LabelTree;
use hiergrain::metrics::{hier_dist_at_k, histogram_csv, mistake_histogram, mistake_severity, top1};

fn main() -> hiergrain::Result<()> {
    let tree = LabelTree::parse(
        "a/x\n\
         a/y\n\
         b/x\n\
         b/y\n",
    )?;
    let d = tree.distance_matrix(2)?;

    // Four samples, all with true class 0: one exact hit, one sibling
    // miss (distance 1), two cross-parent misses (distance 2).
    let truths = vec![0, 0, 0, 0];
    let preds = vec![0, 1, 2, 3];
    let rankings: Vec<Vec<usize>> = preds
        .iter()
        .map(|&p| {
            let mut order = vec![p];
            order.extend((0..4).filter(|&j| j != p));
            order
        })
        .collect();
    let topk = |k: usize| -> Vec<Vec<usize>> {
        rankings.iter().map(|r| r[..k].to_vec()).collect()
    };

    let acc = top1(&preds, &truths)?;
    let sev = mistake_severity(&preds, &truths, &d)?.expect("there are mistakes");
    let h1 = hier_dist_at_k(&topk(1), &truths, &d, 1)?;
    println!("top1 {acc}, mistake severity {sev:.4}, hier dist @1 {h1:.4}");

    // severity averages distance over mistakes only, hier dist @1 over
    // all samples, so h@1 = severity * (1 - top1).
    assert!((h1 - sev * (1.0 - acc)).abs() < 1e-12, "identity must hold");
    println!("identity: {sev:.4} * (1 - {acc}) = {:.4}", sev * (1.0 - acc));

    // hier dist @k averages the distance over each sample's k best
    // guesses; every list must hold exactly k distinct classes.
    for k in [1, 2, 4] {
        println!("hier dist @{k} = {:.4}", hier_dist_at_k(&topk(k), &truths, &d, k)?);
    }

    // The histogram shares out the mistakes by distance; mass sums to 1.
    let hist = mistake_histogram(&preds, &truths, &d)?;
    print!("\nmistake histogram:\n{}", histogram_csv(&hist));
    Ok(())
}
