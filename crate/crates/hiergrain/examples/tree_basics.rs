//! Parse a label tree, walk its levels, and print the tree-distance
//! matrices that every metric and decision rule consumes.
//!
//! Run with `cargo run --example tree_basics`.

use hiergrain::hierarchy::LabelTree;

fn main() -> hiergrain::Result<()> {
    // Leaves are slash-separated root-to-leaf paths, one per line. Order
    // and duplicates of inner names do not matter; leaf paths must be
    // unique and equally deep.
    let tree = LabelTree::parse(
        "vehicle/car/sedan\n\
         vehicle/car/coupe\n\
         vehicle/truck/pickup\n\
         vehicle/truck/semi\n\
         animal/dog/beagle\n\
         animal/dog/husky\n\
         animal/cat/siamese\n\
         animal/cat/tabby\n",
    )?;

    println!("depth {} levels {:?}", tree.depth(), tree.level_sizes());
    println!("fingerprint {}", tree.fingerprint());

    // Level 1 is the coarsest; the finest level indexes the leaves.
    for level in 1..=tree.depth() {
        let names: Vec<&str> = (0..tree.level_size(level)?)
            .map(|c| tree.name(level, c))
            .collect::<hiergrain::Result<_>>()?;
        println!("level {level}: {}", names.join(" "));
    }

    // Distance is the height of the lowest common ancestor, so siblings
    // sit at 1 and classes sharing only the root at the full depth.
    let fine = tree.distance_matrix(tree.depth())?;
    println!(
        "\ndistance(sedan, coupe) = {}",
        fine.get(0, 1)
    );
    println!("distance(sedan, pickup) = {}", fine.get(0, 2));
    println!("distance(sedan, beagle) = {}", fine.get(0, 4));

    println!("\nfine-level distance matrix:");
    print!("{}", fine.to_csv());

    // The canonical text is sorted and newline-terminated; reparsing it
    // reproduces the same fingerprint, which is how artifacts are matched
    // to the tree they were built from.
    let reparsed = LabelTree::parse(&tree.canonical_text())?;
    assert_eq!(reparsed.fingerprint(), tree.fingerprint());
    println!("\ncanonical text reparses to the same fingerprint");
    Ok(())
}
