//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] records forward operations in topological order together with
//! whatever activations the backward pass needs. [`Graph::backward`] walks the
//! tape once in reverse, accumulating gradients into the graph nodes and,
//! through [`Leaf`](Graph::leaf) nodes, into a [`ParamStore`].
//!
//! Reduction order is fixed by the recorded order, so forward and backward are
//! bit-deterministic for identical inputs. Every forward op scans its output
//! for NaN/Inf and fails instead of propagating poison.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to variances before the inverse square root.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic blended into the running statistic.
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode: training updates batch-norm running statistics and
/// normalizes by batch statistics; evaluation uses the stored running values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        BnState {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrGroup {
    /// Encoder layers (low learning rate).
    Encoder,
    /// Heads, transform blocks, and distance matrices (high learning rate).
    Head,
}

/// How a parameter is filled by [`ParamStore::initialize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformFanIn { fan_in: usize },
    /// Uniform on `[-bound, bound]`.
    UniformSymmetric { bound: f64 },
    Zeros,
    Ones,
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
    requires_update: bool,
    decay: bool,
    group: LrGroup,
    init: Init,
}

/// Ordered collection of named trainable parameters.
///
/// Creation order is the initialization and update order, which keeps runs
/// with the same construction sequence and seed bit-identical.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter filled with zeros until initialized.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        group: LrGroup,
        decay: bool,
        init: Init,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name:?}"
        );
        let value = Tensor::zeros(shape.clone());
        let grad = Tensor::zeros(shape);
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            requires_update: true,
            decay,
            group,
            init,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Fills every parameter from its [`Init`] spec, in creation order.
    pub fn initialize(&mut self, rng: &mut ChaCha8Rng) {
        for entry in &mut self.entries {
            match entry.init {
                Init::UniformFanIn { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in entry.value.data_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                Init::UniformSymmetric { bound } => {
                    for v in entry.value.data_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                Init::Zeros => entry.value.data_mut().fill(0.0),
                Init::Ones => entry.value.data_mut().fill(1.0),
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replaces a parameter value; the shape must match.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.entries[id.0].value;
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                detail: format!(
                    "parameter {:?} has shape {:?}, got {:?}",
                    self.entries[id.0].name,
                    current.shape(),
                    value.shape()
                ),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn group(&self, id: ParamId) -> LrGroup {
        self.entries[id.0].group
    }

    pub fn decay(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn requires_update(&self, id: ParamId) -> bool {
        self.entries[id.0].requires_update
    }

    pub fn set_requires_update(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].requires_update = flag;
    }

    /// Mutable value alongside its gradient, for optimizer updates.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let entry = &mut self.entries[id.0];
        (&mut entry.value, &entry.grad)
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.data_mut().fill(0.0);
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.entries[id.0].grad.add_assign(g);
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// One recorded forward op with the state its backward rule needs.
enum Rec {
    Input,
    Leaf {
        param: ParamId,
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mu: Vec<f64>,
        istd: Vec<f64>,
        train: bool,
    },
    Elu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    SoftCrossEntropy {
        targets: NodeId,
        logits: NodeId,
        log_probs: Tensor,
    },
    MatvecRows {
        m: NodeId,
        p: NodeId,
    },
    RowL2Normalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    ZeroDiagonal {
        x: NodeId,
    },
    GatherRows {
        m: NodeId,
        rows: Vec<usize>,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddConst {
        x: NodeId,
    },
    MulConst {
        x: NodeId,
        weights: Tensor,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
}

/// Recorded forward computation, consumed by one backward pass.
#[derive(Default)]
pub struct Graph {
    recs: Vec<Rec>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    leaf_cache: HashMap<ParamId, NodeId>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Value computed at a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient accumulated at a node by [`backward`](Graph::backward).
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    fn push(&mut self, rec: Rec, value: Tensor, op: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.recs.push(rec);
        Ok(NodeId(self.recs.len() - 1))
    }

    /// Records a constant (non-parameter) input.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Rec::Input, value, "input")
    }

    /// Records a read of a parameter. Repeated reads of the same parameter
    /// return the same node, so gradients from all uses accumulate together.
    pub fn leaf(&mut self, store: &ParamStore, param: ParamId) -> Result<NodeId> {
        if let Some(&id) = self.leaf_cache.get(&param) {
            return Ok(id);
        }
        let id = self.push(Rec::Leaf { param }, store.value(param).clone(), "leaf")?;
        self.leaf_cache.insert(param, id);
        Ok(id)
    }

    /// `y = x W + b` for `x: [B x n]`, `W: [n x m]`, `b: [m]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, n) = self.values[x.0].dims2("affine")?;
        let (wn, m) = self.values[w.0].dims2("affine")?;
        let bv = &self.values[b.0];
        if wn != n || bv.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "affine",
                detail: format!(
                    "x {:?} W {:?} b {:?}",
                    self.values[x.0].shape(),
                    self.values[w.0].shape(),
                    bv.shape()
                ),
            });
        }
        let xv = self.values[x.0].data();
        let wv = self.values[w.0].data();
        let bd = bv.data();
        let mut out = vec![0.0; batch * m];
        for r in 0..batch {
            for j in 0..m {
                let mut acc = bd[j];
                for i in 0..n {
                    acc += xv[r * n + i] * wv[i * m + j];
                }
                out[r * m + j] = acc;
            }
        }
        self.push(
            Rec::Affine { x, w, b },
            Tensor::new(vec![batch, m], out)?,
            "affine",
        )
    }

    /// Batch normalization over rows of `x: [B x n]`.
    ///
    /// Training mode normalizes by the biased batch variance and folds the
    /// unbiased variance into `state` with momentum [`BN_MOMENTUM`];
    /// evaluation mode normalizes by the stored running statistics.
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<NodeId> {
        let (batch, n) = self.values[x.0].dims2("batchnorm1d")?;
        if self.values[gamma.0].shape() != [n] || self.values[beta.0].shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d",
                detail: format!(
                    "x {:?} gamma {:?} beta {:?}",
                    self.values[x.0].shape(),
                    self.values[gamma.0].shape(),
                    self.values[beta.0].shape()
                ),
            });
        }
        if state.mean.len() != n || state.var.len() != n {
            return Err(Error::ShapeMismatch {
                op: "batchnorm1d",
                detail: format!("running stats of width {}, input width {n}", state.mean.len()),
            });
        }
        let train = mode == Mode::Train;
        if train && batch < 2 {
            return Err(Error::DegenerateBatch { rows: batch });
        }
        let xv = self.values[x.0].data();
        let (mu, istd) = if train {
            let mut mu = vec![0.0; n];
            for r in 0..batch {
                for f in 0..n {
                    mu[f] += xv[r * n + f];
                }
            }
            for v in &mut mu {
                *v /= batch as f64;
            }
            let mut var = vec![0.0; n];
            for r in 0..batch {
                for f in 0..n {
                    let d = xv[r * n + f] - mu[f];
                    var[f] += d * d;
                }
            }
            for v in &mut var {
                *v /= batch as f64;
            }
            let unbias = batch as f64 / (batch as f64 - 1.0);
            for f in 0..n {
                state.mean[f] = (1.0 - BN_MOMENTUM) * state.mean[f] + BN_MOMENTUM * mu[f];
                state.var[f] = (1.0 - BN_MOMENTUM) * state.var[f] + BN_MOMENTUM * var[f] * unbias;
            }
            let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mu, istd)
        } else {
            let istd: Vec<f64> = state
                .var
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            (state.mean.clone(), istd)
        };
        let gv = self.values[gamma.0].data();
        let bv = self.values[beta.0].data();
        let mut out = vec![0.0; batch * n];
        for r in 0..batch {
            for f in 0..n {
                out[r * n + f] = gv[f] * (xv[r * n + f] - mu[f]) * istd[f] + bv[f];
            }
        }
        self.push(
            Rec::BatchNorm {
                x,
                gamma,
                beta,
                mu,
                istd,
                train,
            },
            Tensor::new(vec![batch, n], out)?,
            "batchnorm1d",
        )
    }

    /// Elementwise `x if x > 0 else exp(x) - 1`.
    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = &self.values[x.0];
        let out: Vec<f64> = value
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let shape = value.shape().to_vec();
        self.push(Rec::Elu { x }, Tensor::new(shape, out)?, "elu")
    }

    /// Row-wise softmax of `z: [B x C]` with max-subtraction stabilization.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (batch, c) = self.values[x.0].dims2("softmax")?;
        let zv = self.values[x.0].data();
        let mut out = vec![0.0; batch * c];
        for r in 0..batch {
            let row = &zv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - max).exp();
                out[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[r * c + j] /= sum;
            }
        }
        self.push(
            Rec::Softmax { x },
            Tensor::new(vec![batch, c], out)?,
            "softmax",
        )
    }

    /// Mean over the batch of `-sum_c targets * log_softmax(logits)`.
    ///
    /// Each target row must be a probability distribution: entries
    /// non-negative, row sum within 1e-6 of 1. Gradients flow into both the
    /// logits and the targets, so differentiable targets (smoothed labels)
    /// contribute their own gradient path.
    pub fn soft_cross_entropy(&mut self, targets: NodeId, logits: NodeId) -> Result<NodeId> {
        let (batch, c) = self.values[logits.0].dims2("soft_cross_entropy")?;
        if self.values[targets.0].shape() != [batch, c] {
            return Err(Error::ShapeMismatch {
                op: "soft_cross_entropy",
                detail: format!(
                    "targets {:?} vs logits {:?}",
                    self.values[targets.0].shape(),
                    self.values[logits.0].shape()
                ),
            });
        }
        let tv = self.values[targets.0].data();
        for r in 0..batch {
            let row = &tv[r * c..(r + 1) * c];
            if let Some(neg) = row.iter().find(|&&t| t < 0.0) {
                return Err(Error::InvalidTarget {
                    row: r,
                    detail: format!("negative entry {neg}"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidTarget {
                    row: r,
                    detail: format!("row sums to {sum}"),
                });
            }
        }
        let zv = self.values[logits.0].data();
        let mut log_probs = vec![0.0; batch * c];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &zv[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let ls = row[j] - lse;
                log_probs[r * c + j] = ls;
                loss -= tv[r * c + j] * ls;
            }
        }
        loss /= batch as f64;
        self.push(
            Rec::SoftCrossEntropy {
                targets,
                logits,
                log_probs: Tensor::new(vec![batch, c], log_probs)?,
            },
            Tensor::scalar(loss),
            "soft_cross_entropy",
        )
    }

    /// Applies `M: [k x c]` to every row of `p: [B x c]`:
    /// `out[b, i] = sum_j M[i, j] * p[b, j]`.
    pub fn matvec_rows(&mut self, m: NodeId, p: NodeId) -> Result<NodeId> {
        let (k, c) = self.values[m.0].dims2("matvec_rows")?;
        let (batch, pc) = self.values[p.0].dims2("matvec_rows")?;
        if pc != c {
            return Err(Error::ShapeMismatch {
                op: "matvec_rows",
                detail: format!("M {:?} vs p {:?}", [k, c], [batch, pc]),
            });
        }
        let mv = self.values[m.0].data();
        let pv = self.values[p.0].data();
        let mut out = vec![0.0; batch * k];
        for b in 0..batch {
            for i in 0..k {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += mv[i * c + j] * pv[b * c + j];
                }
                out[b * k + i] = acc;
            }
        }
        self.push(
            Rec::MatvecRows { m, p },
            Tensor::new(vec![batch, k], out)?,
            "matvec_rows",
        )
    }

    /// Divides each row by its L2 norm. All-zero rows pass through unchanged
    /// and receive zero gradient.
    pub fn row_l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.values[x.0].dims2("row_l2_normalize")?;
        let xv = self.values[x.0].data();
        let mut norms = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            for j in 0..cols {
                out[r * cols + j] = if norm == 0.0 { row[j] } else { row[j] / norm };
            }
        }
        self.push(
            Rec::RowL2Normalize { x, norms },
            Tensor::new(vec![rows, cols], out)?,
            "row_l2_normalize",
        )
    }

    /// Copies a square matrix with its diagonal forced to zero.
    pub fn zero_diagonal(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.values[x.0].dims2("zero_diagonal")?;
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        let mut out = self.values[x.0].data().to_vec();
        for i in 0..rows {
            out[i * cols + i] = 0.0;
        }
        self.push(
            Rec::ZeroDiagonal { x },
            Tensor::new(vec![rows, cols], out)?,
            "zero_diagonal",
        )
    }

    /// Stacks `M[rows[i], :]` into a new `[rows.len() x c]` tensor. Repeated
    /// indices are allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, m: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.values[m.0].dims2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: bad,
                bound: r,
            });
        }
        let mv = self.values[m.0].data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&mv[i * c..(i + 1) * c]);
        }
        let n = rows.len();
        self.push(
            Rec::GatherRows { m, rows },
            Tensor::new(vec![n, c], out)?,
            "gather_rows",
        )
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let value = &self.values[x.0];
        let out: Vec<f64> = value.data().iter().map(|&v| c * v).collect();
        let shape = value.shape().to_vec();
        self.push(Rec::Scale { x, c }, Tensor::new(shape, out)?, "scale")
    }

    /// Adds a constant tensor (no gradient flows into the constant).
    pub fn add_const(&mut self, x: NodeId, t: &Tensor) -> Result<NodeId> {
        let value = &self.values[x.0];
        if value.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_const",
                detail: format!("{:?} vs {:?}", value.shape(), t.shape()),
            });
        }
        let out: Vec<f64> = value.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
        let shape = value.shape().to_vec();
        self.push(Rec::AddConst { x }, Tensor::new(shape, out)?, "add_const")
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: NodeId, t: &Tensor) -> Result<NodeId> {
        let value = &self.values[x.0];
        if value.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                detail: format!("{:?} vs {:?}", value.shape(), t.shape()),
            });
        }
        let out: Vec<f64> = value.data().iter().zip(t.data()).map(|(a, b)| a * b).collect();
        let shape = value.shape().to_vec();
        self.push(
            Rec::MulConst {
                x,
                weights: t.clone(),
            },
            Tensor::new(shape, out)?,
            "mul_const",
        )
    }

    /// Elementwise sum of two nodes of identical shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Rec::Add { a, b }, Tensor::new(shape, out)?, "add")
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.values[x.0].data().iter().sum();
        self.push(Rec::Sum { x }, Tensor::scalar(total), "sum")
    }

    /// Runs the backward pass from a scalar loss node, accumulating parameter
    /// gradients into `store`. A graph can only be consumed once.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        self.consumed = true;
        if self.values[loss.0].len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.values[loss.0].shape()
                ),
            });
        }
        self.grads[loss.0].data_mut()[0] = 1.0;

        for i in (0..self.recs.len()).rev() {
            let g = std::mem::take(&mut self.grads[i]);
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let gd = g.data();
            match &self.recs[i] {
                Rec::Input => {}
                Rec::Leaf { param } => store.accumulate_grad(*param, &g),
                Rec::Affine { x, w, b } => {
                    let (batch, n) = self.values[x.0].dims2("affine")?;
                    let m = self.values[b.0].len();
                    let xv = self.values[x.0].data();
                    let wv = self.values[w.0].data();
                    {
                        let dx = self.grads[x.0].data_mut();
                        for r in 0..batch {
                            for ii in 0..n {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += gd[r * m + j] * wv[ii * m + j];
                                }
                                dx[r * n + ii] += acc;
                            }
                        }
                    }
                    {
                        let dw = self.grads[w.0].data_mut();
                        for ii in 0..n {
                            for j in 0..m {
                                let mut acc = 0.0;
                                for r in 0..batch {
                                    acc += xv[r * n + ii] * gd[r * m + j];
                                }
                                dw[ii * m + j] += acc;
                            }
                        }
                    }
                    {
                        let db = self.grads[b.0].data_mut();
                        for j in 0..m {
                            let mut acc = 0.0;
                            for r in 0..batch {
                                acc += gd[r * m + j];
                            }
                            db[j] += acc;
                        }
                    }
                }
                Rec::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mu,
                    istd,
                    train,
                } => {
                    let (batch, n) = self.values[x.0].dims2("batchnorm1d")?;
                    let xv = self.values[x.0].data();
                    let gv = self.values[gamma.0].data();
                    let bf = batch as f64;
                    let mut xhat = vec![0.0; batch * n];
                    for r in 0..batch {
                        for f in 0..n {
                            xhat[r * n + f] = (xv[r * n + f] - mu[f]) * istd[f];
                        }
                    }
                    {
                        let dgamma = self.grads[gamma.0].data_mut();
                        for f in 0..n {
                            let mut acc = 0.0;
                            for r in 0..batch {
                                acc += gd[r * n + f] * xhat[r * n + f];
                            }
                            dgamma[f] += acc;
                        }
                    }
                    {
                        let dbeta = self.grads[beta.0].data_mut();
                        for f in 0..n {
                            let mut acc = 0.0;
                            for r in 0..batch {
                                acc += gd[r * n + f];
                            }
                            dbeta[f] += acc;
                        }
                    }
                    let dx = self.grads[x.0].data_mut();
                    if *train {
                        // Batch statistics depend on x, so the mean and
                        // variance terms feed back into every row.
                        for f in 0..n {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for r in 0..batch {
                                let dxh = gd[r * n + f] * gv[f];
                                s1 += dxh;
                                s2 += dxh * xhat[r * n + f];
                            }
                            for r in 0..batch {
                                let dxh = gd[r * n + f] * gv[f];
                                dx[r * n + f] +=
                                    istd[f] / bf * (bf * dxh - s1 - xhat[r * n + f] * s2);
                            }
                        }
                    } else {
                        for r in 0..batch {
                            for f in 0..n {
                                dx[r * n + f] += gd[r * n + f] * gv[f] * istd[f];
                            }
                        }
                    }
                }
                Rec::Elu { x } => {
                    let xv = self.values[x.0].data();
                    let dx = self.grads[x.0].data_mut();
                    for (k, &v) in xv.iter().enumerate() {
                        dx[k] += gd[k] * if v > 0.0 { 1.0 } else { v.exp() };
                    }
                }
                Rec::Softmax { x } => {
                    let (batch, c) = self.values[i].dims2("softmax")?;
                    let yv = self.values[i].data();
                    let dx = self.grads[x.0].data_mut();
                    for r in 0..batch {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gd[r * c + j] * yv[r * c + j];
                        }
                        for j in 0..c {
                            dx[r * c + j] += yv[r * c + j] * (gd[r * c + j] - dot);
                        }
                    }
                }
                Rec::SoftCrossEntropy {
                    targets,
                    logits,
                    log_probs,
                } => {
                    let (batch, c) = log_probs.dims2("soft_cross_entropy")?;
                    let g0 = gd[0];
                    let tv = self.values[targets.0].data();
                    let ls = log_probs.data();
                    let bf = batch as f64;
                    {
                        let dz = self.grads[logits.0].data_mut();
                        for r in 0..batch {
                            // Row mass is 1 up to validation tolerance; using
                            // the exact sum keeps gradients consistent with
                            // the forward value.
                            let mut mass = 0.0;
                            for j in 0..c {
                                mass += tv[r * c + j];
                            }
                            for j in 0..c {
                                let p = ls[r * c + j].exp();
                                dz[r * c + j] += g0 / bf * (p * mass - tv[r * c + j]);
                            }
                        }
                    }
                    {
                        let dt = self.grads[targets.0].data_mut();
                        for k in 0..batch * c {
                            dt[k] -= g0 / bf * ls[k];
                        }
                    }
                }
                Rec::MatvecRows { m, p } => {
                    let (k, c) = self.values[m.0].dims2("matvec_rows")?;
                    let (batch, _) = self.values[p.0].dims2("matvec_rows")?;
                    let mv = self.values[m.0].data();
                    let pv = self.values[p.0].data();
                    {
                        let dm = self.grads[m.0].data_mut();
                        for ii in 0..k {
                            for j in 0..c {
                                let mut acc = 0.0;
                                for b in 0..batch {
                                    acc += gd[b * k + ii] * pv[b * c + j];
                                }
                                dm[ii * c + j] += acc;
                            }
                        }
                    }
                    {
                        let dp = self.grads[p.0].data_mut();
                        for b in 0..batch {
                            for j in 0..c {
                                let mut acc = 0.0;
                                for ii in 0..k {
                                    acc += gd[b * k + ii] * mv[ii * c + j];
                                }
                                dp[b * c + j] += acc;
                            }
                        }
                    }
                }
                Rec::RowL2Normalize { x, norms } => {
                    let (rows, cols) = self.values[i].dims2("row_l2_normalize")?;
                    let yv = self.values[i].data();
                    let dx = self.grads[x.0].data_mut();
                    for r in 0..rows {
                        let norm = norms[r];
                        if norm == 0.0 {
                            continue;
                        }
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += gd[r * cols + j] * yv[r * cols + j];
                        }
                        for j in 0..cols {
                            dx[r * cols + j] +=
                                (gd[r * cols + j] - dot * yv[r * cols + j]) / norm;
                        }
                    }
                }
                Rec::ZeroDiagonal { x } => {
                    let (rows, cols) = self.values[i].dims2("zero_diagonal")?;
                    let dx = self.grads[x.0].data_mut();
                    for r in 0..rows {
                        for j in 0..cols {
                            if r != j {
                                dx[r * cols + j] += gd[r * cols + j];
                            }
                        }
                    }
                }
                Rec::GatherRows { m, rows } => {
                    let (_, c) = self.values[m.0].dims2("gather_rows")?;
                    let dm = self.grads[m.0].data_mut();
                    for (out_row, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            dm[src * c + j] += gd[out_row * c + j];
                        }
                    }
                }
                Rec::Scale { x, c } => {
                    let dx = self.grads[x.0].data_mut();
                    for (k, &gv) in gd.iter().enumerate() {
                        dx[k] += c * gv;
                    }
                }
                Rec::AddConst { x } => {
                    self.grads[x.0].add_assign(&g);
                }
                Rec::MulConst { x, weights } => {
                    let dx = self.grads[x.0].data_mut();
                    for (k, &gv) in gd.iter().enumerate() {
                        dx[k] += gv * weights.data()[k];
                    }
                }
                Rec::Add { a, b } => {
                    self.grads[a.0].add_assign(&g);
                    self.grads[b.0].add_assign(&g);
                }
                Rec::Sum { x } => {
                    let g0 = gd[0];
                    let dx = self.grads[x.0].data_mut();
                    for v in dx.iter_mut() {
                        *v += g0;
                    }
                }
            }
        }
        Ok(())
    }
}
