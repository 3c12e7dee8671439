//! Finite-difference verification of recorded gradients.

use super::graph::{Graph, NodeId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Worst-coordinate detail from a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with a floor on the denominator.
///
/// The floor keeps finite-difference noise on near-zero gradients from
/// producing spurious failures; genuinely wrong backward rules produce
/// discrepancies on the scale of the gradients themselves, far above it.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares the recorded backward pass of `f` against central finite
/// differences over every coordinate of every parameter in `store`.
///
/// `f` must build a fresh scalar-valued forward pass each call; it is invoked
/// once for the analytic gradients and twice per coordinate for the numeric
/// ones. Parameter values are restored exactly after each probe.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    graph.backward(loss, store)?;

    let ids: Vec<_> = store.ids().collect();
    let mut analytic: Vec<Tensor> = Vec::with_capacity(ids.len());
    for &id in &ids {
        let g = store.grad(id);
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: store.name(id).to_string(),
            });
        }
        analytic.push(g.clone());
    }

    let mut checked = 0;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (slot, &id) in ids.iter().enumerate() {
        for k in 0..store.value(id).len() {
            let original = store.value(id).data()[k];

            store.value_mut(id).data_mut()[k] = original + FD_STEP;
            let up = eval_scalar(store, &mut f)?;
            store.value_mut(id).data_mut()[k] = original - FD_STEP;
            let down = eval_scalar(store, &mut f)?;
            store.value_mut(id).data_mut()[k] = original;

            let numeric = (up - down) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: store.name(id).to_string(),
                });
            }
            let a = analytic[slot].data()[k];
            let err = rel_err(a, numeric);
            checked += 1;
            if err > max_rel {
                max_rel = err;
                worst = Some(GradCheckEntry {
                    param: store.name(id).to_string(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err: max_rel,
        worst,
        tol,
        passed: max_rel <= tol,
    })
}

fn eval_scalar<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, store)?;
    graph.value(loss).scalar_value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::{Init, LrGroup, Mode};
    use crate::diffcore::BnState;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Random probability rows for cross-entropy targets.
    fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            data.extend(raw.into_iter().map(|v| v / sum));
        }
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn test_affine_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let w = store.add("w", vec![3, 2], LrGroup::Head, true, Init::Zeros);
            let b = store.add("b", vec![2], LrGroup::Head, true, Init::Zeros);
            store.set_value(w, random_tensor(&mut rng, vec![3, 2])).unwrap();
            store.set_value(b, random_tensor(&mut rng, vec![2])).unwrap();
            let x = random_tensor(&mut rng, vec![2, 3]);
            let r = random_tensor(&mut rng, vec![2, 2]);
            let report = grad_check(
                &mut store,
                |g, s| {
                    let xv = g.input(x.clone())?;
                    let wl = g.leaf(s, w)?;
                    let bl = g.leaf(s, b)?;
                    let y = g.affine(xv, wl, bl)?;
                    let y = g.mul_const(y, &r)?;
                    g.sum(y)
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn test_batchnorm_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            let x = store.add("x", vec![4, 3], LrGroup::Head, true, Init::Zeros);
            let gamma = store.add("gamma", vec![3], LrGroup::Head, false, Init::Zeros);
            let beta = store.add("beta", vec![3], LrGroup::Head, false, Init::Zeros);
            store.set_value(x, random_tensor(&mut rng, vec![4, 3])).unwrap();
            store
                .set_value(gamma, random_tensor(&mut rng, vec![3]))
                .unwrap();
            store
                .set_value(beta, random_tensor(&mut rng, vec![3]))
                .unwrap();
            let r = random_tensor(&mut rng, vec![4, 3]);
            let train = seed % 2 == 0;
            let mut state = BnState::new(3);
            if !train {
                // Non-trivial running stats so eval mode is exercised.
                state.mean = vec![0.2, -0.1, 0.4];
                state.var = vec![1.5, 0.7, 2.0];
            }
            let report = grad_check(
                &mut store,
                |g, s| {
                    let xl = g.leaf(s, x)?;
                    let ga = g.leaf(s, gamma)?;
                    let be = g.leaf(s, beta)?;
                    let mode = if train { Mode::Train } else { Mode::Eval };
                    let y = g.batchnorm1d(xl, ga, be, &mut state, mode)?;
                    let y = g.mul_const(y, &r)?;
                    g.sum(y)
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn test_elu_softmax_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut store = ParamStore::new();
            let x = store.add("x", vec![3, 4], LrGroup::Head, true, Init::Zeros);
            store.set_value(x, random_tensor(&mut rng, vec![3, 4])).unwrap();
            let r = random_tensor(&mut rng, vec![3, 4]);
            let report = grad_check(
                &mut store,
                |g, s| {
                    let xl = g.leaf(s, x)?;
                    let y = g.elu(xl)?;
                    let y = g.softmax(y)?;
                    let y = g.mul_const(y, &r)?;
                    g.sum(y)
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn test_cross_entropy_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut store = ParamStore::new();
            let z = store.add("z", vec![3, 4], LrGroup::Head, true, Init::Zeros);
            store.set_value(z, random_tensor(&mut rng, vec![3, 4])).unwrap();
            let t = random_probs(&mut rng, 3, 4);
            let report = grad_check(
                &mut store,
                |g, s| {
                    let zl = g.leaf(s, z)?;
                    let tv = g.input(t.clone())?;
                    g.soft_cross_entropy(tv, zl)
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn test_cross_entropy_target_gradients_match_finite_differences() {
        // Targets built from a softmax of a parameter: checks the gradient
        // path through the targets argument.
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let mut store = ParamStore::new();
            let z = store.add("z", vec![2, 3], LrGroup::Head, true, Init::Zeros);
            let t = store.add("t", vec![2, 3], LrGroup::Head, true, Init::Zeros);
            store.set_value(z, random_tensor(&mut rng, vec![2, 3])).unwrap();
            store.set_value(t, random_tensor(&mut rng, vec![2, 3])).unwrap();
            let report = grad_check(
                &mut store,
                |g, s| {
                    let zl = g.leaf(s, z)?;
                    let tl = g.leaf(s, t)?;
                    let tp = g.softmax(tl)?;
                    g.soft_cross_entropy(tp, zl)
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn test_matvec_and_normalize_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let mut store = ParamStore::new();
            let m = store.add("m", vec![3, 3], LrGroup::Head, false, Init::Zeros);
            store.set_value(m, random_tensor(&mut rng, vec![3, 3])).unwrap();
            let p = random_probs(&mut rng, 2, 3);
            let r = random_tensor(&mut rng, vec![2, 3]);
            let report = grad_check(
                &mut store,
                |g, s| {
                    let ml = g.leaf(s, m)?;
                    let masked = g.zero_diagonal(ml)?;
                    let unit = g.row_l2_normalize(masked)?;
                    let pv = g.input(p.clone())?;
                    let y = g.matvec_rows(unit, pv)?;
                    let y = g.mul_const(y, &r)?;
                    g.sum(y)
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn test_gather_scale_add_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let mut store = ParamStore::new();
            let m = store.add("m", vec![3, 2], LrGroup::Head, false, Init::Zeros);
            store.set_value(m, random_tensor(&mut rng, vec![3, 2])).unwrap();
            let c = random_tensor(&mut rng, vec![4, 2]);
            let r = random_tensor(&mut rng, vec![4, 2]);
            let report = grad_check(
                &mut store,
                |g, s| {
                    let ml = g.leaf(s, m)?;
                    let picked = g.gather_rows(ml, vec![2, 0, 2, 1])?;
                    let scaled = g.scale(picked, 0.7)?;
                    let shifted = g.add_const(scaled, &c)?;
                    let weighted = g.mul_const(shifted, &r)?;
                    let again = g.gather_rows(ml, vec![1, 1, 0, 2])?;
                    let both = g.add(weighted, again)?;
                    g.sum(both)
                },
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {:?}", report.worst);
        }
    }

    #[test]
    fn test_grad_check_catches_missing_dependency() {
        // The loss truly depends on p twice, but one use enters as a plain
        // input, invisible to the backward pass. The finite-difference probe
        // sees the full dependency and must flag the mismatch.
        let mut store = ParamStore::new();
        let p = store.add("p", vec![2], LrGroup::Head, true, Init::Zeros);
        store
            .set_value(p, Tensor::new(vec![2], vec![0.3, -0.8]).unwrap())
            .unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let tracked = g.leaf(s, p)?;
                let leaked = g.input(s.value(p).clone())?;
                let both = g.add(tracked, leaked)?;
                g.sum(both)
            },
            1e-4,
        )
        .unwrap();
        assert!(!report.passed, "leaked dependency must fail the check");
    }

    #[test]
    fn test_grad_check_zero_row_guard_has_zero_gradient() {
        // The normalizer is discontinuous at an all-zero row, so the numeric
        // probe is only meaningful when that row cannot move the loss: weight
        // it by zero and confirm the whole check passes, then assert the
        // recorded gradient for the zero row is exactly zero.
        let mut store = ParamStore::new();
        let m = store.add("m", vec![2, 2], LrGroup::Head, false, Init::Zeros);
        store
            .set_value(m, Tensor::new(vec![2, 2], vec![0.6, -0.2, 0.0, 0.0]).unwrap())
            .unwrap();
        let r = Tensor::new(vec![2, 2], vec![0.3, 0.9, 0.0, 0.0]).unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let ml = g.leaf(s, m)?;
                let unit = g.row_l2_normalize(ml)?;
                let y = g.mul_const(unit, &r)?;
                g.sum(y)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst);

        store.zero_grads();
        let weights = Tensor::new(vec![2, 2], vec![0.3, 0.9, 0.5, -0.4]).unwrap();
        let mut g = Graph::new();
        let ml = g.leaf(&store, m).unwrap();
        let unit = g.row_l2_normalize(ml).unwrap();
        let y = g.mul_const(unit, &weights).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        let grad = store.grad(m);
        assert_eq!(grad.get2(1, 0), 0.0);
        assert_eq!(grad.get2(1, 1), 0.0);
        assert_ne!(grad.get2(0, 0), 0.0);
    }
}
