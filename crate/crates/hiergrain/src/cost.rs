//! Learnable inter-class difference matrices, cost-aware decision rules, and
//! distance-based label smoothing.
//!
//! Each level `h` carries a raw learnable matrix Δ of shape `C^h x C^h`. The
//! raw matrix is unconstrained; every forward pass derives the effective form
//! Δ̂ = row_l2_normalize(zero_diagonal(Δ)) and the effective cost
//! `Dt = β·Δ̂ − D`, where `D` is the tree's LCA distance matrix. Decisions,
//! smoothing, and the auxiliary loss all consume these derived forms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Init, LrGroup, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::hierarchy::DistanceMatrix;

/// How the raw per-level matrices start out.
///
/// `Zeros` makes the effective matrix zero, so training starts exactly at the
/// pure LCA-cost method. Note the zero matrix is a stationary point of the
/// row normalizer (all-zero rows get zero gradient), so zero-initialized
/// matrices stay zero under gradient training; `Uniform` provides a nonzero
/// starting point when learned structure is wanted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaInit {
    Zeros,
    Uniform { scale: f64 },
}

/// Per-level raw matrices plus the shared hyperparameters.
///
/// `beta` weights the learned matrix inside the effective cost, `epsilon` is
/// the smoothing factor in `[0,1]`, `gamma` the smoothing temperature.
/// The raw matrices are excluded from weight decay: after row normalization
/// only their direction matters, and decay would drag rows toward the
/// degenerate all-zero case.
#[derive(Debug, Clone)]
pub struct DeltaBank {
    deltas: Vec<ParamId>,
    pub beta: f64,
    pub epsilon: f64,
    pub gamma: f64,
}

impl DeltaBank {
    pub fn new(
        store: &mut ParamStore,
        level_sizes: &[usize],
        beta: f64,
        epsilon: f64,
        gamma: f64,
        init: DeltaInit,
    ) -> Result<Self> {
        validate_hyper(beta, epsilon, gamma)?;
        let deltas = level_sizes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let init = match init {
                    DeltaInit::Zeros => Init::Zeros,
                    DeltaInit::Uniform { scale } => Init::UniformSymmetric { bound: scale },
                };
                store.add(format!("delta{}", i + 1), vec![c, c], LrGroup::Head, false, init)
            })
            .collect();
        Ok(DeltaBank {
            deltas,
            beta,
            epsilon,
            gamma,
        })
    }

    pub fn levels(&self) -> usize {
        self.deltas.len()
    }

    /// Raw matrix parameter for a 1-based level.
    pub fn delta_param(&self, level: usize) -> Result<ParamId> {
        if level < 1 || level > self.deltas.len() {
            return Err(Error::IndexOutOfRange {
                what: "level",
                index: level,
                bound: self.deltas.len(),
            });
        }
        Ok(self.deltas[level - 1])
    }

    /// Effective matrix Δ̂ for a level, outside any graph.
    pub fn effective(&self, store: &ParamStore, level: usize) -> Result<Tensor> {
        effective_delta(store.value(self.delta_param(level)?))
    }

    /// Effective cost `β·Δ̂ − D` for a level, outside any graph.
    pub fn effective_cost(
        &self,
        store: &ParamStore,
        level: usize,
        d: &DistanceMatrix,
    ) -> Result<Tensor> {
        effective_cost_from(&self.effective(store, level)?, self.beta, d)
    }

    /// Differentiable effective cost node for a level.
    pub fn effective_cost_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        d: &DistanceMatrix,
    ) -> Result<NodeId> {
        let raw = g.leaf(store, self.delta_param(level)?)?;
        let eff = effective_delta_node(g, raw)?;
        let c = g.value(eff).shape()[0];
        if d.size() != c {
            return Err(Error::ShapeMismatch {
                op: "effective_cost",
                detail: format!("distance matrix is {0}x{0}, delta is {c}x{c}", d.size()),
            });
        }
        let scaled = g.scale(eff, self.beta)?;
        let neg_d = {
            let mut t = d.to_tensor();
            for v in t.data_mut() {
                *v = -*v;
            }
            t
        };
        g.add_const(scaled, &neg_d)
    }

    /// Smoothed target distribution for true class `y` at a level, outside
    /// any graph.
    pub fn smooth_labels(
        &self,
        store: &ParamStore,
        level: usize,
        y: usize,
        d: &DistanceMatrix,
    ) -> Result<Vec<f64>> {
        smooth_labels_from(
            y,
            &self.effective(store, level)?,
            d,
            self.beta,
            self.epsilon,
            self.gamma,
        )
    }
}

pub(crate) fn validate_hyper(beta: f64, epsilon: f64, gamma: f64) -> Result<()> {
    if !beta.is_finite() {
        return Err(Error::InvalidHyperparameter {
            name: "beta",
            detail: format!("must be finite, got {beta}"),
        });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidHyperparameter {
            name: "epsilon",
            detail: format!("must be in [0, 1], got {epsilon}"),
        });
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidHyperparameter {
            name: "gamma",
            detail: format!("must be positive, got {gamma}"),
        });
    }
    Ok(())
}

/// Zeroes the diagonal, then L2-normalizes each row (all-zero rows pass
/// through unchanged).
pub fn effective_delta(raw: &Tensor) -> Result<Tensor> {
    let (rows, cols) = raw.dims2("effective_delta")?;
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    let mut out = raw.clone();
    for i in 0..rows {
        out.set2(i, i, 0.0);
        let norm = (0..cols).map(|j| out.get2(i, j).powi(2)).sum::<f64>().sqrt();
        if norm != 0.0 {
            for j in 0..cols {
                out.set2(i, j, out.get2(i, j) / norm);
            }
        }
    }
    Ok(out)
}

/// Graph version of [`effective_delta`], differentiable w.r.t. the raw
/// off-diagonal entries.
pub fn effective_delta_node(g: &mut Graph, raw: NodeId) -> Result<NodeId> {
    let masked = g.zero_diagonal(raw)?;
    g.row_l2_normalize(masked)
}

/// `β·Δ̂ − D` from an already-effective matrix.
pub fn effective_cost_from(effective: &Tensor, beta: f64, d: &DistanceMatrix) -> Result<Tensor> {
    let (rows, cols) = effective.dims2("effective_cost")?;
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if d.size() != rows {
        return Err(Error::ShapeMismatch {
            op: "effective_cost",
            detail: format!("distance matrix is {0}x{0}, delta is {rows}x{rows}", d.size()),
        });
    }
    let mut out = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        for j in 0..cols {
            out.set2(i, j, beta * effective.get2(i, j) - d.get(i, j) as f64);
        }
    }
    Ok(out)
}

fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution {
            detail: "empty vector".to_string(),
        });
    }
    if let Some(neg) = p.iter().find(|&&v| v < 0.0) {
        return Err(Error::InvalidDistribution {
            detail: format!("negative entry {neg}"),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution {
            detail: format!("sums to {sum}"),
        });
    }
    Ok(())
}

/// Risk-minimizing decision: `argmin_k sum_j D[k,j] * p[j]`, ties to the
/// smallest class index.
pub fn crm_decide(p: &[f64], d: &DistanceMatrix) -> Result<usize> {
    Ok(crm_rank(p, d)?[0])
}

/// All classes ordered by ascending expected distance, ties by class index.
pub fn crm_rank(p: &[f64], d: &DistanceMatrix) -> Result<Vec<usize>> {
    validate_distribution(p)?;
    if p.len() != d.size() {
        return Err(Error::LengthMismatch {
            left_name: "probabilities",
            left: p.len(),
            right_name: "distance matrix",
            right: d.size(),
        });
    }
    let risks: Vec<f64> = (0..d.size())
        .map(|k| (0..d.size()).map(|j| d.get(k, j) as f64 * p[j]).sum())
        .collect();
    Ok(rank_ascending(&risks))
}

/// Augmented decision: `argmax_k sum_j Dt[k,j] * p[j]`, ties to the smallest
/// class index. With `β = 0` (`Dt = −D`) this equals [`crm_decide`].
pub fn augmented_decide(p: &[f64], dt: &Tensor) -> Result<usize> {
    Ok(augmented_rank(p, dt)?[0])
}

/// All classes ordered by descending augmented score, ties by class index.
pub fn augmented_rank(p: &[f64], dt: &Tensor) -> Result<Vec<usize>> {
    validate_distribution(p)?;
    let (rows, cols) = dt.dims2("augmented_rank")?;
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if p.len() != cols {
        return Err(Error::LengthMismatch {
            left_name: "probabilities",
            left: p.len(),
            right_name: "effective cost",
            right: cols,
        });
    }
    let scores: Vec<f64> = (0..rows)
        .map(|k| (0..cols).map(|j| dt.get2(k, j) * p[j]).sum())
        .collect();
    let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
    Ok(rank_ascending(&negated))
}

/// Indices ordered by ascending value; equal values keep index order.
fn rank_ascending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order
}

/// `(1−ε)·onehot(y) + ε·softmax(γ·(β·Δ̂_y − D_y))` from an already-effective
/// matrix.
pub fn smooth_labels_from(
    y: usize,
    effective: &Tensor,
    d: &DistanceMatrix,
    beta: f64,
    epsilon: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    validate_hyper(beta, epsilon, gamma)?;
    let (rows, cols) = effective.dims2("smooth_labels")?;
    if rows != cols || d.size() != rows {
        return Err(Error::ShapeMismatch {
            op: "smooth_labels",
            detail: format!("delta {rows}x{cols}, distances {0}x{0}", d.size()),
        });
    }
    if y >= rows {
        return Err(Error::IndexOutOfRange {
            what: "class",
            index: y,
            bound: rows,
        });
    }
    if epsilon == 0.0 {
        // Exact one-hot, bypassing the softmax entirely.
        let mut out = vec![0.0; cols];
        out[y] = 1.0;
        return Ok(out);
    }
    let scores: Vec<f64> = (0..cols)
        .map(|j| gamma * (beta * effective.get2(y, j) - d.get(y, j) as f64))
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let mut out: Vec<f64> = exp.into_iter().map(|e| epsilon * e / sum).collect();
    out[y] += 1.0 - epsilon;
    Ok(out)
}

/// Batch of smoothed targets as a differentiable node.
///
/// `dt` is the effective-cost node for the level; gradient flows into the
/// underlying raw matrix through the gathered soft term.
pub fn smooth_labels_node(
    g: &mut Graph,
    dt: NodeId,
    labels: &[usize],
    epsilon: f64,
    gamma: f64,
) -> Result<NodeId> {
    let (rows, cols) = g.value(dt).dims2("smooth_labels")?;
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidHyperparameter {
            name: "epsilon",
            detail: format!("must be in [0, 1], got {epsilon}"),
        });
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidHyperparameter {
            name: "gamma",
            detail: format!("must be positive, got {gamma}"),
        });
    }
    let mut onehot = Tensor::zeros(vec![labels.len(), cols]);
    for (b, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: y,
                bound: cols,
            });
        }
        onehot.set2(b, y, 1.0 - epsilon);
    }
    let picked = g.gather_rows(dt, labels.to_vec())?;
    let scaled = g.scale(picked, gamma)?;
    let soft = g.softmax(scaled)?;
    let weighted = g.scale(soft, epsilon)?;
    g.add_const(weighted, &onehot)
}

/// Auxiliary loss: mean cross-entropy between the smoothed targets and
/// `softmax(Dt · p)`.
///
/// Gradient reaches the logits through `p`, and the raw matrix through both
/// `dt` and (when the targets were built by [`smooth_labels_node`]) the
/// targets themselves.
pub fn cost_loss_node(
    g: &mut Graph,
    ytilde: NodeId,
    dt: NodeId,
    probs: NodeId,
) -> Result<NodeId> {
    let inner = g.matvec_rows(dt, probs)?;
    g.soft_cross_entropy(ytilde, inner)
}

/// Seeded random raw matrix, for demos and gradient tests.
pub fn random_raw_delta(c: usize, scale: f64, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * c).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![c, c], data).expect("consistent dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::hierarchy::LabelTree;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn balanced() -> LabelTree {
        LabelTree::parse("p/a\np/b\nq/c\nq/d").unwrap()
    }

    #[test]
    fn test_effective_delta_masks_and_normalizes() {
        let raw = Tensor::new(vec![2, 2], vec![5.0, 3.0, 4.0, 7.0]).unwrap();
        let eff = effective_delta(&raw).unwrap();
        assert_eq!(eff.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn test_effective_delta_zero_matrix() {
        let eff = effective_delta(&Tensor::zeros(vec![3, 3])).unwrap();
        assert!(eff.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_effective_delta_three_four_five_row() {
        let raw = Tensor::new(
            vec![3, 3],
            vec![9.0, 3.0, 4.0, 0.0, 1.0, 0.0, 2.0, 0.0, 5.0],
        )
        .unwrap();
        let eff = effective_delta(&raw).unwrap();
        assert_eq!(eff.row(0), vec![0.0, 0.6, 0.8]);
    }

    #[test]
    fn test_effective_delta_rejects_non_square() {
        assert!(matches!(
            effective_delta(&Tensor::zeros(vec![2, 3])).unwrap_err(),
            Error::NotSquare { rows: 2, cols: 3 }
        ));
    }

    #[test]
    fn test_crm_uniform_cost_reduces_to_argmax() {
        let tree = LabelTree::parse("r/a\nr/b\nr/c").unwrap();
        // All off-diagonal distances are 1, so risk(k) = 1 - p_k.
        let d = tree.distance_matrix(2).unwrap();
        let p = [0.2, 0.5, 0.3];
        assert_eq!(crm_decide(&p, &d).unwrap(), 1);
    }

    #[test]
    fn test_crm_overrides_argmax() {
        // Distances [[0,2,2],[2,0,1],[2,1,0]]: classes 1 and 2 are siblings,
        // class 0 sits alone. Mass on the sibling pair pulls the decision to
        // class 1 even though class 0 has the single largest probability.
        let tree = LabelTree::parse("s/only\nt/m1\nt/m2").unwrap();
        let d = tree.distance_matrix(2).unwrap();
        assert_eq!(d.get(0, 1), 2);
        assert_eq!(d.get(1, 2), 1);
        let p = [0.4, 0.35, 0.25];
        assert_eq!(crm_decide(&p, &d).unwrap(), 1);
    }

    #[test]
    fn test_crm_onehot_with_zero_diagonal_returns_that_class() {
        let d = balanced().distance_matrix(2).unwrap();
        let p = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(crm_decide(&p, &d).unwrap(), 2);
    }

    #[test]
    fn test_decision_rules_reject_bad_distributions() {
        let d = balanced().distance_matrix(2).unwrap();
        assert!(matches!(
            crm_decide(&[0.5, 0.5, 0.5, -0.5], &d).unwrap_err(),
            Error::InvalidDistribution { .. }
        ));
        assert!(matches!(
            crm_decide(&[0.5, 0.4, 0.4, 0.4], &d).unwrap_err(),
            Error::InvalidDistribution { .. }
        ));
        let dt = effective_cost_from(&Tensor::zeros(vec![4, 4]), 0.0, &d).unwrap();
        assert!(matches!(
            augmented_decide(&[2.0, -1.0, 0.0, 0.0], &dt).unwrap_err(),
            Error::InvalidDistribution { .. }
        ));
    }

    #[test]
    fn test_augmented_equals_crm_at_beta_zero() {
        let tree = LabelTree::parse("a/p/x1\na/p/x2\na/q/y1\nb/r/z1\nb/r/z2\nb/s/w1").unwrap();
        let d = tree.distance_matrix(3).unwrap();
        let dt = effective_cost_from(&Tensor::zeros(vec![6, 6]), 0.0, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.into_iter().map(|v| v / sum).collect();
            assert_eq!(
                crm_decide(&p, &d).unwrap(),
                augmented_decide(&p, &dt).unwrap()
            );
        }
    }

    #[test]
    fn test_augmented_tie_breaks_to_class_zero() {
        // Identical rows make every class score equal for any p.
        let row = vec![0.4, -1.0, 0.2];
        let dt = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let p = [1.0 / 3.0; 3];
        assert_eq!(augmented_decide(&p, &dt).unwrap(), 0);
    }

    #[test]
    fn test_augmented_shift_moves_decision_toward_rewarded_class() {
        // Start from pure -D, then reward row 3 for mass on class 0.
        let d = balanced().distance_matrix(2).unwrap();
        let mut eff = Tensor::zeros(vec![4, 4]);
        eff.set2(3, 0, 1.0);
        let p = [0.6, 0.2, 0.1, 0.1];
        let plain = effective_cost_from(&Tensor::zeros(vec![4, 4]), 0.0, &d).unwrap();
        assert_eq!(augmented_decide(&p, &plain).unwrap(), 0);
        // Brute-force confirmation at beta large enough to flip.
        let dt = effective_cost_from(&eff, 4.0, &d).unwrap();
        let scores: Vec<f64> = (0..4)
            .map(|k| (0..4).map(|j| dt.get2(k, j) * p[j]).sum())
            .collect();
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, 3);
        assert_eq!(augmented_decide(&p, &dt).unwrap(), 3);
    }

    #[test]
    fn test_smooth_labels_epsilon_zero_is_exact_onehot() {
        let d = balanced().distance_matrix(2).unwrap();
        let eff = effective_delta(&random_raw_delta(4, 1.0, 7)).unwrap();
        let y = smooth_labels_from(2, &eff, &d, 0.5, 0.0, 0.7).unwrap();
        assert_eq!(y, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn test_smooth_labels_full_smoothing_beta_zero_is_distance_softmax() {
        let d = balanced().distance_matrix(2).unwrap();
        let eff = effective_delta(&random_raw_delta(4, 1.0, 8)).unwrap();
        let gamma = 0.9;
        let got = smooth_labels_from(1, &eff, &d, 0.0, 1.0, gamma).unwrap();
        let scores: Vec<f64> = (0..4).map(|j| -gamma * d.get(1, j) as f64).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        for (a, e) in got.iter().zip(exp.iter().map(|v| v / sum)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn test_smooth_labels_two_class_value() {
        let tree = LabelTree::parse("r/a\nr/b").unwrap();
        let d = tree.distance_matrix(2).unwrap();
        let eff = Tensor::zeros(vec![2, 2]);
        let got = smooth_labels_from(0, &eff, &d, 0.0, 1.0, 1.0).unwrap();
        let denom = 1.0 + (-1.0f64).exp();
        assert_relative_eq!(got[0], 1.0 / denom, epsilon = 1e-5);
        assert_relative_eq!(got[0], 0.73106, epsilon = 1e-5);
        assert_relative_eq!(got[1], 0.26894, epsilon = 1e-5);
    }

    #[test]
    fn test_smooth_labels_rejects_bad_hyperparameters() {
        let d = balanced().distance_matrix(2).unwrap();
        let eff = Tensor::zeros(vec![4, 4]);
        assert!(matches!(
            smooth_labels_from(0, &eff, &d, 0.0, 1.5, 1.0).unwrap_err(),
            Error::InvalidHyperparameter { name: "epsilon", .. }
        ));
        assert!(matches!(
            smooth_labels_from(0, &eff, &d, 0.0, 0.5, 0.0).unwrap_err(),
            Error::InvalidHyperparameter { name: "gamma", .. }
        ));
        let mut store = ParamStore::new();
        assert!(matches!(
            DeltaBank::new(&mut store, &[2, 4], 0.5, -0.1, 0.7, DeltaInit::Zeros).unwrap_err(),
            Error::InvalidHyperparameter { name: "epsilon", .. }
        ));
    }

    #[test]
    fn test_smooth_labels_node_matches_scalar_path() {
        let tree = LabelTree::parse("a/x\na/y\nb/z\nb/w\nc/v\nc/u").unwrap();
        let d = tree.distance_matrix(2).unwrap();
        let (beta, epsilon, gamma) = (0.8, 0.3, 0.7);
        let mut store = ParamStore::new();
        let bank = DeltaBank::new(
            &mut store,
            &[3, 6],
            beta,
            epsilon,
            gamma,
            DeltaInit::Uniform { scale: 0.5 },
        )
        .unwrap();
        crate::model::init_parameters(&mut store, 21);
        let labels = vec![4usize, 0, 4, 2];
        let mut g = Graph::new();
        let dt = bank.effective_cost_node(&mut g, &store, 2, &d).unwrap();
        let node = smooth_labels_node(&mut g, dt, &labels, epsilon, gamma).unwrap();
        for (b, &y) in labels.iter().enumerate() {
            let expected = bank.smooth_labels(&store, 2, y, &d).unwrap();
            for (j, e) in expected.iter().enumerate() {
                assert!((g.value(node).get2(b, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_cost_loss_zero_cost_is_log_c() {
        // Dt = 0 makes the inner softmax uniform, so the loss is ln C for
        // any valid target distribution.
        let mut g = Graph::new();
        let dt = g.input(Tensor::zeros(vec![3, 3])).unwrap();
        let probs = g
            .input(Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let ytilde = g
            .input(Tensor::new(vec![2, 3], vec![0.1, 0.6, 0.3, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let loss = cost_loss_node(&mut g, ytilde, dt, probs).unwrap();
        assert_relative_eq!(
            g.value(loss).scalar_value().unwrap(),
            3f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn test_cost_loss_symmetric_two_class_is_log_two() {
        let tree = LabelTree::parse("r/a\nr/b").unwrap();
        let d = tree.distance_matrix(2).unwrap();
        let dt_t = effective_cost_from(&Tensor::zeros(vec![2, 2]), 0.0, &d).unwrap();
        let mut g = Graph::new();
        let dt = g.input(dt_t).unwrap();
        let probs = g
            .input(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap())
            .unwrap();
        let ytilde = g
            .input(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let loss = cost_loss_node(&mut g, ytilde, dt, probs).unwrap();
        assert_relative_eq!(
            g.value(loss).scalar_value().unwrap(),
            2f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn test_cost_loss_gradients_match_finite_differences() {
        let tree = LabelTree::parse("a/x\na/y\nb/z\nb/w").unwrap();
        let d = tree.distance_matrix(2).unwrap();
        for seed in 0..5 {
            let mut store = ParamStore::new();
            let bank = DeltaBank::new(
                &mut store,
                &[2, 4],
                0.6,
                0.3,
                0.7,
                DeltaInit::Uniform { scale: 0.8 },
            )
            .unwrap();
            let logits = store.add(
                "logits",
                vec![3, 4],
                LrGroup::Head,
                true,
                Init::UniformSymmetric { bound: 1.0 },
            );
            crate::model::init_parameters(&mut store, 100 + seed);
            let labels = vec![1usize, 3, 0];
            let report = grad_check(
                &mut store,
                |g, s| {
                    let z = g.leaf(s, logits)?;
                    let probs = g.softmax(z)?;
                    let dt = bank.effective_cost_node(g, s, 2, &d)?;
                    let ytilde = smooth_labels_node(g, dt, &labels, bank.epsilon, bank.gamma)?;
                    cost_loss_node(g, ytilde, dt, probs)
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst);
        }
    }

    proptest! {
        /// Effective matrices always have an exactly-zero diagonal and unit
        /// (or zero) row norms.
        #[test]
        fn test_effective_delta_invariants(
            data in proptest::collection::vec(-10.0f64..10.0, 16)
        ) {
            let raw = Tensor::new(vec![4, 4], data).unwrap();
            let eff = effective_delta(&raw).unwrap();
            for i in 0..4 {
                prop_assert_eq!(eff.get2(i, i), 0.0);
                let norm: f64 = (0..4).map(|j| eff.get2(i, j).powi(2)).sum::<f64>().sqrt();
                prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-12);
            }
        }

        /// Smoothed labels are distributions for any hyperparameters in range.
        #[test]
        fn test_smooth_labels_is_distribution(
            data in proptest::collection::vec(-5.0f64..5.0, 16),
            beta in -3.0f64..3.0,
            epsilon in 0.0f64..=1.0,
            gamma in 0.05f64..4.0,
            y in 0usize..4,
        ) {
            let d = balanced().distance_matrix(2).unwrap();
            let eff = effective_delta(&Tensor::new(vec![4, 4], data).unwrap()).unwrap();
            let out = smooth_labels_from(y, &eff, &d, beta, epsilon, gamma).unwrap();
            let sum: f64 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "sum {}", sum);
            prop_assert!(out.iter().all(|&v| v >= 0.0));
        }

        /// Adding a constant to every cost entry shifts all class scores
        /// equally, so the augmented decision is unchanged.
        #[test]
        fn test_augmented_invariant_under_uniform_shift(
            data in proptest::collection::vec(-4.0f64..4.0, 16),
            shift in -10.0f64..10.0,
            raw_p in proptest::collection::vec(0.01f64..1.0, 4),
        ) {
            let dt = Tensor::new(vec![4, 4], data).unwrap();
            let sum: f64 = raw_p.iter().sum();
            let p: Vec<f64> = raw_p.iter().map(|v| v / sum).collect();
            let mut shifted = dt.clone();
            for v in shifted.data_mut() {
                *v += shift;
            }
            prop_assert_eq!(
                augmented_decide(&p, &dt).unwrap(),
                augmented_decide(&p, &shifted).unwrap()
            );
        }
    }
}
