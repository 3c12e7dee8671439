//! Compare the three decision rules on a hand-built posterior: plain
//! argmax, minimum conditional risk over tree distance, and the
//! augmented rule that folds in a learned difference matrix.
//!
//! Run with `cargo run --example decision_rules`.

use hiergrain::cost::{augmented_decide, crm_decide, effective_cost_from, effective_delta, random_raw_delta};
use hiergrain::hierarchy::LabelTree;
use hiergrain::metrics::rank_descending;

fn main() -> hiergrain::Result<()> {
    let tree = LabelTree::parse(
        "a/x\n\
         a/y\n\
         b/x\n\
         b/y\n",
    )?;
    let d = tree.distance_matrix(2)?;

    // The model slightly prefers class 2, but classes 0 and 1 are
    // siblings whose combined mass dominates; risk-aware rules hedge
    // toward them while argmax follows the single largest entry.
    let p = [0.30, 0.28, 0.32, 0.10];
    let argmax = rank_descending(&p)[0];
    let crm = crm_decide(&p, &d)?;
    println!("posterior {p:?}");
    println!("argmax picks {argmax} ({})", tree.path_name(2, argmax)?);
    println!("crm    picks {crm} ({})", tree.path_name(2, crm)?);

    for k in 0..4 {
        let risk: f64 = (0..4).map(|j| d.get(k, j) as f64 * p[j]).sum();
        println!("  expected distance if predicting {k}: {risk:.3}");
    }

    // The augmented rule scores with beta * delta_hat - D instead of -D,
    // so a learned matrix can overrule pure tree distance. With beta 0 it
    // must agree with conditional risk minimization exactly.
    let delta_hat = effective_delta(&random_raw_delta(4, 0.5, 3))?;
    let dt0 = effective_cost_from(&delta_hat, 0.0, &d)?;
    assert_eq!(augmented_decide(&p, &dt0)?, crm, "beta 0 must reduce to crm");

    let dt = effective_cost_from(&delta_hat, 4.0, &d)?;
    println!(
        "augmented (beta 4) picks {}",
        augmented_decide(&p, &dt)?
    );

    // Ties break toward the smallest class index in every rule.
    let uniform = [0.25; 4];
    assert_eq!(crm_decide(&uniform, &d)?, 0);
    println!("uniform posterior: crm breaks the tie to class 0");
    Ok(())
}
