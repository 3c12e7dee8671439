//! Show how the cost-aware soft targets move mass from the true class
//! toward hierarchy-near classes as the smoothing knobs change.
//!
//! Run with `cargo run --example label_smoothing`.

use hiergrain::cost::{effective_delta, random_raw_delta, smooth_labels_from};
use hiergrain::hierarchy::LabelTree;

fn main() -> hiergrain::Result<()> {
    let tree = LabelTree::parse(
        "a/x\n\
         a/y\n\
         b/x\n\
         b/y\n\
         c/x\n\
         c/y\n",
    )?;
    let d = tree.distance_matrix(2)?;

    // The learned matrix enters through its normalized form: diagonal
    // zeroed, rows scaled to unit length. Here a random draw stands in
    // for a trained one.
    let raw = random_raw_delta(d.size(), 0.3, 42);
    let delta_hat = effective_delta(&raw)?;

    let y = 0;
    println!("true class: {} (index {y})", tree.path_name(2, y)?);
    println!("tree distances from it: {:?}\n", (0..d.size()).map(|j| d.get(y, j)).collect::<Vec<_>>());

    // epsilon interpolates between the hard one-hot target and the
    // softmax of the true class's effective-cost row; gamma is the
    // temperature of that softmax.
    for &(epsilon, gamma) in &[(0.0, 0.7), (0.3, 0.7), (0.3, 2.0), (1.0, 0.7)] {
        let t = smooth_labels_from(y, &delta_hat, &d, 0.5, epsilon, gamma)?;
        let shown: Vec<String> = t.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "epsilon {epsilon:.1} gamma {gamma:.1}: [{}] (sum {:.3})",
            shown.join(", "),
            t.iter().sum::<f64>()
        );
    }

    // At epsilon 0 the target is exactly one-hot regardless of the other
    // knobs; mass otherwise leaks mostly to the sibling leaf.
    let hard = smooth_labels_from(y, &delta_hat, &d, 0.5, 0.0, 0.7)?;
    assert_eq!(hard[y], 1.0, "epsilon 0 must keep the one-hot target");
    assert!(hard.iter().skip(1).all(|&v| v == 0.0));
    Ok(())
}
