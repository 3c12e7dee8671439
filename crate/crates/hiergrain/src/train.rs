//! SGD training with momentum, weight decay, a per-epoch cosine schedule,
//! and validation-based model selection, plus checkpoints, split
//! evaluation under three decision rules, and the component ablation grid.
//!
//! Determinism contract: a (seed, config, dataset) triple fixes every
//! parameter bit at every step. Parameter init and batch shuffling use
//! separate seeded streams, reductions run in a fixed order, and
//! validation never touches training state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{self, DeltaBank};
use crate::data::{Dataset, Split};
use crate::diffcore::{BnState, Graph, Mode, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::hierarchy::{DistanceMatrix, LabelTree};
use crate::metrics::{self, EvalReport, RuleReport};
use crate::model::{init_parameters, Model, ModelConfig, ModelKind};
use crate::objective::{self, LossConfig};

/// Decorrelates the shuffle stream from parameter init, which consumes
/// the raw seed.
const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Validation metric that picks the best epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Finest-level top-1 accuracy, higher is better.
    Top1,
    /// Finest-level mistake severity, lower is better; an epoch without
    /// mistakes beats every epoch with them.
    Severity,
}

impl Selection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Selection::Top1 => "top1",
            Selection::Severity => "severity",
        }
    }

    pub fn parse(s: &str) -> Option<Selection> {
        match s {
            "top1" => Some(Selection::Top1),
            "severity" => Some(Selection::Severity),
            _ => None,
        }
    }

    /// Higher scores win; severity is negated so the minimum wins.
    pub fn score(&self, val: &EpochValidation) -> f64 {
        match self {
            Selection::Top1 => *val.top1.last().expect("at least one level"),
            Selection::Severity => {
                match val.mistake_severity.last().expect("at least one level") {
                    None => 0.0,
                    Some(s) => -s,
                }
            }
        }
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate for the encoder group.
    pub encoder_lr: f64,
    /// Base learning rate for heads, transforms, and difference matrices.
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            encoder_lr: 0.01,
            head_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seeds: vec![0],
            selection: Selection::Top1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidHyperparameter {
                name: "epochs",
                detail: "must be at least 1".to_string(),
            });
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidHyperparameter {
                name: "batch_size",
                detail: "batch normalization needs at least 2 rows".to_string(),
            });
        }
        for (name, lr) in [("encoder_lr", self.encoder_lr), ("head_lr", self.head_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidHyperparameter {
                    name,
                    detail: format!("must be positive, got {lr}"),
                });
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidHyperparameter {
                name: "momentum",
                detail: format!("must be in [0, 1), got {}", self.momentum),
            });
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidHyperparameter {
                name: "weight_decay",
                detail: format!("must be finite and >= 0, got {}", self.weight_decay),
            });
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidHyperparameter {
                name: "seeds",
                detail: "need at least one seed".to_string(),
            });
        }
        Ok(())
    }
}

/// How predictions are read off the probabilities at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// Most likely class.
    Argmax,
    /// Least expected tree distance.
    Crm,
    /// Least expected effective cost, using the learned matrices.
    Augmented,
}

impl DecisionRule {
    pub const ALL: [DecisionRule; 3] =
        [DecisionRule::Argmax, DecisionRule::Crm, DecisionRule::Augmented];

    pub fn as_str(&self) -> &'static str {
        match self {
            DecisionRule::Argmax => "argmax",
            DecisionRule::Crm => "crm",
            DecisionRule::Augmented => "augmented",
        }
    }

    pub fn parse(s: &str) -> Option<DecisionRule> {
        match s {
            "argmax" => Some(DecisionRule::Argmax),
            "crm" => Some(DecisionRule::Crm),
            "augmented" => Some(DecisionRule::Augmented),
            _ => None,
        }
    }
}

/// Cosine decay from `lr0` at `t=0` to zero at `t=total`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    debug_assert!(t <= total && total > 0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Momentum buffers, one per parameter in creation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> SgdState {
        SgdState {
            velocity: store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape().to_vec()))
                .collect(),
        }
    }
}

/// One SGD update over every trainable parameter:
/// `v <- momentum*v + grad + wd*param` (decay only where the parameter
/// opted in), then `param <- param - lr*v` with the group's rate.
pub fn sgd_step(
    store: &mut ParamStore,
    state: &mut SgdState,
    encoder_lr: f64,
    head_lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            detail: format!(
                "{} velocity buffers for {} parameters",
                state.velocity.len(),
                store.len()
            ),
        });
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, vel) in ids.into_iter().zip(state.velocity.iter_mut()) {
        if !store.requires_update(id) {
            continue;
        }
        let lr = match store.group(id) {
            crate::diffcore::LrGroup::Encoder => encoder_lr,
            crate::diffcore::LrGroup::Head => head_lr,
        };
        let wd = if store.decay(id) { weight_decay } else { 0.0 };
        if !store.grad(id).all_finite() {
            return Err(Error::NonFiniteGradient {
                name: store.name(id).to_string(),
            });
        }
        let (value, grad) = store.value_and_grad(id);
        if vel.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                detail: "velocity shape drifted from its parameter".to_string(),
            });
        }
        for ((v, g), p) in vel
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(value.data().to_vec())
        {
            *v = momentum * *v + g + wd * p;
        }
        for (p, v) in value.data_mut().iter_mut().zip(vel.data()) {
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// A model, its parameters, and its difference matrices, wired to one
/// tree for training and evaluation.
pub struct Session {
    tree: LabelTree,
    distances: Vec<DistanceMatrix>,
    model: Model,
    store: ParamStore,
    bank: DeltaBank,
    loss: LossConfig,
    seed: u64,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("kind", &self.model.kind())
            .field("levels", &self.tree.level_sizes())
            .field("params", &self.store.len())
            .field("seed", &self.seed)
            .finish()
    }
}

impl Session {
    /// Builds and seeds a fresh model; the head topology follows
    /// `loss.chained_heads`.
    pub fn new(
        tree: &LabelTree,
        model_cfg: ModelConfig,
        loss: &LossConfig,
        seed: u64,
    ) -> Result<Session> {
        loss.validate()?;
        let kind = if loss.chained_heads {
            ModelKind::Chained
        } else {
            ModelKind::Parallel
        };
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, kind, model_cfg, tree.level_sizes());
        let bank = DeltaBank::new(
            &mut store,
            tree.level_sizes(),
            loss.beta,
            loss.epsilon,
            loss.gamma,
            loss.delta_init,
        )?;
        init_parameters(&mut store, seed);
        Ok(Session {
            tree: tree.clone(),
            distances: tree.distance_matrices(),
            model,
            store,
            bank,
            loss: *loss,
            seed,
        })
    }

    pub fn tree(&self) -> &LabelTree {
        &self.tree
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameter access for custom update rules; the store keeps
    /// shapes fixed, so a hand-rolled loop cannot desynchronize the
    /// architecture.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bank(&self) -> &DeltaBank {
        &self.bank
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Forward in train mode, total loss, backward. Gradients land in the
    /// store; pair with [`sgd_step`]. Returns the loss value.
    pub fn train_step(&mut self, x: &Tensor, labels: &[Vec<usize>]) -> Result<f64> {
        self.store.zero_grads();
        let mut g = Graph::new();
        let xin = g.input(x.clone())?;
        let logits = self.model.forward(&mut g, &self.store, xin, Mode::Train)?;
        let loss = objective::total_loss(
            &mut g,
            &self.store,
            &logits,
            labels,
            &self.loss,
            &self.bank,
            &self.distances,
        )?;
        let value = g.value(loss).scalar_value()?;
        g.backward(loss, &mut self.store)?;
        Ok(value)
    }

    /// Eval-mode logits per level for a feature batch; batch-norm uses
    /// running statistics and nothing is updated.
    pub fn logits(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xin = g.input(x.clone())?;
        let ids = self.model.forward(&mut g, &self.store, xin, Mode::Eval)?;
        Ok(ids.iter().map(|&id| g.value(id).clone()).collect())
    }

    /// Per-level argmax top-1 and severity on a split, for the per-epoch
    /// validation record.
    pub fn quick_validation(&mut self, ds: &Dataset, split: Split) -> Result<EpochValidation> {
        let rows = ds.indices(split);
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (x, labels) = ds.batch(&rows)?;
        let logits = self.logits(&x)?;
        let mut top1 = Vec::with_capacity(logits.len());
        let mut severity = Vec::with_capacity(logits.len());
        for (idx, z) in logits.iter().enumerate() {
            let preds: Vec<usize> = (0..rows.len())
                .map(|b| metrics::rank_descending(&z.row(b))[0])
                .collect();
            top1.push(metrics::top1(&preds, &labels[idx])?);
            severity.push(metrics::mistake_severity(
                &preds,
                &labels[idx],
                &self.distances[idx],
            )?);
        }
        Ok(EpochValidation {
            top1,
            mistake_severity: severity,
        })
    }

    /// Full metrics on a split under all three decision rules.
    pub fn evaluate(&mut self, ds: &Dataset, split: Split) -> Result<EvalReport> {
        let rows = ds.indices(split);
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let (x, labels) = ds.batch(&rows)?;
        let logits = self.logits(&x)?;
        let mut rules = Vec::with_capacity(DecisionRule::ALL.len());
        for rule in DecisionRule::ALL {
            let mut levels = Vec::with_capacity(logits.len());
            for (idx, z) in logits.iter().enumerate() {
                let d = &self.distances[idx];
                let rankings: Vec<Vec<usize>> = match rule {
                    DecisionRule::Argmax => (0..rows.len())
                        .map(|b| metrics::rank_descending(&z.row(b)))
                        .collect(),
                    DecisionRule::Crm => (0..rows.len())
                        .map(|b| cost::crm_rank(&softmax_row(&z.row(b)), d))
                        .collect::<Result<_>>()?,
                    DecisionRule::Augmented => {
                        let dt = self.bank.effective_cost(&self.store, idx + 1, d)?;
                        (0..rows.len())
                            .map(|b| cost::augmented_rank(&softmax_row(&z.row(b)), &dt))
                            .collect::<Result<_>>()?
                    }
                };
                levels.push(metrics::level_report(idx + 1, &rankings, &labels[idx], d)?);
            }
            rules.push(RuleReport {
                rule: rule.as_str().to_string(),
                levels,
            });
        }
        Ok(EvalReport {
            split: split.as_str().to_string(),
            rules,
        })
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Per-level argmax validation metrics for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochValidation {
    pub top1: Vec<f64>,
    pub mistake_severity: Vec<Option<f64>>,
}

/// Everything one training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation metrics per epoch, eval mode, argmax rule.
    pub validation: Vec<EpochValidation>,
    /// Learning rates applied at each epoch; follow the cosine law
    /// exactly.
    pub encoder_lr: Vec<f64>,
    pub head_lr: Vec<f64>,
    /// Epoch whose checkpoint was kept (0-based, earliest on ties).
    pub best_epoch: usize,
    pub best_score: f64,
    pub selection: Selection,
}

/// A frozen copy of a session: parameter tensors by name, batch-norm
/// running statistics, and the configs to rebuild the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tree_fingerprint: String,
    /// Hash of the resolved experiment config that produced this run;
    /// empty for checkpoints captured outside the command-line front end.
    #[serde(default)]
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub bn_states: Vec<(String, BnState)>,
}

impl Checkpoint {
    pub fn capture(session: &Session, epoch: usize) -> Checkpoint {
        Checkpoint {
            tree_fingerprint: session.tree.fingerprint(),
            config_hash: String::new(),
            model_config: *session.model.config(),
            loss: session.loss,
            seed: session.seed,
            epoch,
            params: session
                .store
                .ids()
                .map(|id| (session.store.name(id).to_string(), session.store.value(id).clone()))
                .collect(),
            bn_states: session.model.bn_states(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Rebuilds a live session on `tree` with every parameter and
    /// statistic restored.
    pub fn restore(&self, tree: &LabelTree) -> Result<Session> {
        let expected = tree.fingerprint();
        if self.tree_fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                actual: self.tree_fingerprint.clone(),
            });
        }
        let mut session = Session::new(tree, self.model_config, &self.loss, self.seed)?;
        if self.params.len() != session.store.len() {
            return Err(Error::Config {
                detail: format!(
                    "checkpoint holds {} parameters, architecture has {}",
                    self.params.len(),
                    session.store.len()
                ),
            });
        }
        for (name, value) in &self.params {
            let id = session.store.find(name).ok_or_else(|| Error::Config {
                detail: format!("checkpoint parameter `{name}` not in the architecture"),
            })?;
            session.store.set_value(id, value.clone())?;
        }
        session.model.set_bn_states(&self.bn_states)?;
        Ok(session)
    }
}

/// Trains one seed to completion and returns the run record plus the
/// best-validation checkpoint.
///
/// Each epoch: seeded shuffle of the train split, full mini-batches only
/// (the trailing partial batch is dropped for batch-norm stability), one
/// SGD step per batch at that epoch's cosine rate, then argmax validation
/// in eval mode. The best epoch is the first one maximizing the selection
/// score.
pub fn fit(
    tree: &LabelTree,
    ds: &Dataset,
    model_cfg: ModelConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(RunRecord, Checkpoint)> {
    cfg.validate()?;
    ds.validate_against(tree)?;
    let train_rows = ds.indices(Split::Train);
    if train_rows.len() < cfg.batch_size {
        return Err(Error::Config {
            detail: format!(
                "train split has {} rows, smaller than one batch of {}",
                train_rows.len(),
                cfg.batch_size
            ),
        });
    }
    let mut session = Session::new(tree, model_cfg, loss, seed)?;
    let mut sgd = SgdState::new(&session.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);

    let mut record = RunRecord {
        seed,
        train_loss: Vec::with_capacity(cfg.epochs),
        validation: Vec::with_capacity(cfg.epochs),
        encoder_lr: Vec::with_capacity(cfg.epochs),
        head_lr: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_score: f64::NEG_INFINITY,
        selection: cfg.selection,
    };
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        let encoder_lr = cosine_lr(cfg.encoder_lr, epoch, cfg.epochs);
        let head_lr = cosine_lr(cfg.head_lr, epoch, cfg.epochs);
        let mut order = train_rows.clone();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let (x, labels) = ds.batch(chunk)?;
            let value = session.train_step(&x, &labels).map_err(|e| match e {
                Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => {
                    Error::NonFiniteLoss { epoch, step }
                }
                other => other,
            })?;
            sgd_step(
                &mut session.store,
                &mut sgd,
                encoder_lr,
                head_lr,
                cfg.momentum,
                cfg.weight_decay,
            )
            .map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::NonFiniteLoss { epoch, step },
                other => other,
            })?;
            loss_sum += value;
            steps += 1;
        }

        let val = session.quick_validation(ds, Split::Val)?;
        let score = cfg.selection.score(&val);
        if score > record.best_score {
            record.best_score = score;
            record.best_epoch = epoch;
            best = Some(Checkpoint::capture(&session, epoch));
        }
        record.train_loss.push(loss_sum / steps as f64);
        record.validation.push(val);
        record.encoder_lr.push(encoder_lr);
        record.head_lr.push(head_lr);
    }

    Ok((record, best.expect("at least one epoch ran")))
}

/// Mean and sample standard deviation; spread is zero for fewer than two
/// values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub spread: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let spread = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Aggregate { mean, spread }
}

/// One row of the component grid: which switches were on, the rule its
/// evaluation used, and finest-level test metrics aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub chained_heads: bool,
    pub cost_loss: bool,
    pub smoothing: bool,
    pub rule: DecisionRule,
    pub top1: Aggregate,
    /// None when no seed produced a single mistake.
    pub mistake_severity: Option<Aggregate>,
    pub hier_dist1: Aggregate,
}

/// Runs the full 2x2x2 component grid over the config's seeds.
///
/// Rows come in binary order over (chained_heads, cost_loss, smoothing),
/// all-off first. Rows with the cost term on are evaluated with the
/// augmented rule (their learned matrices are part of the method); rows
/// without it use plain argmax. The all-off row is exactly the plain
/// cross-entropy baseline.
pub fn ablate(
    tree: &LabelTree,
    ds: &Dataset,
    model_cfg: ModelConfig,
    base: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(8);
    for bits in 0..8u8 {
        let (chained, cost_on, smooth) = (bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
        let loss = LossConfig {
            chained_heads: chained,
            cost_loss: cost_on,
            smoothing: smooth,
            ..*base
        };
        let rule = if cost_on {
            DecisionRule::Augmented
        } else {
            DecisionRule::Argmax
        };
        let mut top1 = Vec::with_capacity(cfg.seeds.len());
        let mut severity = Vec::new();
        let mut hier1 = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let (_, best) = fit(tree, ds, model_cfg, &loss, cfg, seed)?;
            let mut session = best.restore(tree)?;
            let report = session.evaluate(ds, Split::Test)?;
            let fine = report
                .rule(rule.as_str())
                .expect("rule was evaluated")
                .levels
                .last()
                .expect("at least one level")
                .clone();
            top1.push(fine.top1);
            if let Some(s) = fine.mistake_severity {
                severity.push(s);
            }
            hier1.push(fine.hier_dist[&1]);
        }
        rows.push(AblationRow {
            chained_heads: chained,
            cost_loss: cost_on,
            smoothing: smooth,
            rule,
            top1: aggregate(&top1),
            mistake_severity: if severity.is_empty() {
                None
            } else {
                Some(aggregate(&severity))
            },
            hier_dist1: aggregate(&hier1),
        });
    }
    Ok(rows)
}

/// CSV table of the grid, one row per component combination.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "chained_heads,cost_loss,smoothing,rule,top1_mean,top1_spread,\
         severity_mean,severity_spread,hier_dist1_mean,hier_dist1_spread\n",
    );
    for r in rows {
        let (sev_mean, sev_spread) = match r.mistake_severity {
            Some(a) => (a.mean.to_string(), a.spread.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.chained_heads,
            r.cost_loss,
            r.smoothing,
            r.rule.as_str(),
            r.top1.mean,
            r.top1.spread,
            sev_mean,
            sev_spread,
            r.hier_dist1.mean,
            r.hier_dist1.spread,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::diffcore::{Init, LrGroup};

    fn tiny_tree() -> LabelTree {
        LabelTree::parse("a/x\na/y\nb/x\nb/y\n").unwrap()
    }

    fn tiny_dataset(seed: u64) -> (LabelTree, Dataset) {
        let tree = tiny_tree();
        let spec = DatasetSpec {
            tree: tree.clone(),
            dim: 3,
            per_leaf: 15,
            level_spread: vec![4.0, 1.0],
            noise: 0.4,
            seed,
            fractions: [0.6, 0.2, 0.2],
        };
        (tree, generate(&spec).unwrap())
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            hidden1: 8,
            hidden2: 8,
            feature_dim: 8,
        }
    }

    fn quick_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 6,
            seeds: vec![0],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn test_cosine_lr_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert_eq!(cosine_lr(0.1, 100, 100), 0.0);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() <= 1e-15);
    }

    #[test]
    fn test_sgd_plain_gradient_descent_step() {
        // No momentum, no decay: param moves by exactly lr * grad.
        let mut store = ParamStore::new();
        let w = store.add("w".to_string(), vec![3], LrGroup::Head, true, Init::Ones);
        store
            .set_value(w, Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let mut state = SgdState::new(&store);
        let mut g = Graph::new();
        let leaf = g.leaf(&store, w).unwrap();
        let weighted = g
            .mul_const(leaf, &Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let loss = g.sum(weighted).unwrap();
        g.backward(loss, &mut store).unwrap();
        sgd_step(&mut store, &mut state, 0.5, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(store.value(w).data(), &[0.9, 0.8, 0.7]);
    }

    #[test]
    fn test_sgd_zero_gradient_leaves_param_unchanged() {
        let mut store = ParamStore::new();
        let w = store.add("w".to_string(), vec![2], LrGroup::Head, true, Init::Ones);
        store
            .set_value(w, Tensor::new(vec![2], vec![1.0, 1.0]).unwrap())
            .unwrap();
        let mut state = SgdState::new(&store);
        store.zero_grads();
        sgd_step(&mut store, &mut state, 0.1, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(store.value(w).data(), &[1.0, 1.0]);
    }

    #[test]
    fn test_sgd_matches_momentum_recurrence_on_quadratic_bowl() {
        // f(w) = w^2/2 has gradient w, so the trajectory obeys
        // v' = m*v + w, w' = w - lr*v', checked against a plain
        // re-implementation of that recurrence.
        let (lr, m) = (0.1, 0.9);
        let mut store = ParamStore::new();
        let w = store.add("w".to_string(), vec![1, 1], LrGroup::Head, true, Init::Ones);
        store.set_value(w, Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        let mut state = SgdState::new(&store);

        let (mut ow, mut ov) = (2.0f64, 0.0f64);
        for step in 0..50 {
            store.zero_grads();
            let mut g = Graph::new();
            let leaf = g.leaf(&store, w).unwrap();
            // matvec_rows(w, w) = w^2 for a 1x1 matrix; halving makes the
            // gradient exactly w.
            let sq = g.matvec_rows(leaf, leaf).unwrap();
            let half = g.scale(sq, 0.5).unwrap();
            let loss = g.sum(half).unwrap();
            g.backward(loss, &mut store).unwrap();
            sgd_step(&mut store, &mut state, lr, lr, m, 0.0).unwrap();

            ov = m * ov + ow;
            ow -= lr * ov;
            let got = store.value(w).data()[0];
            assert!(
                (got - ow).abs() <= 1e-12,
                "step {step}: {got} vs oracle {ow}"
            );
        }
    }

    #[test]
    fn test_sgd_weight_decay_only_touches_opted_in_params() {
        let mut store = ParamStore::new();
        let decayed = store.add("d".to_string(), vec![1], LrGroup::Head, true, Init::Ones);
        let plain = store.add("p".to_string(), vec![1], LrGroup::Head, false, Init::Ones);
        for id in [decayed, plain] {
            store
                .set_value(id, Tensor::new(vec![1], vec![1.0]).unwrap())
                .unwrap();
        }
        let mut state = SgdState::new(&store);
        store.zero_grads();
        sgd_step(&mut store, &mut state, 0.1, 0.1, 0.0, 0.5).unwrap();
        // Zero gradient: only decay moves the opted-in parameter.
        assert_eq!(store.value(decayed).data(), &[1.0 - 0.1 * 0.5]);
        assert_eq!(store.value(plain).data(), &[1.0]);
    }

    #[test]
    fn test_decay_exclusion_is_exactly_norm_affine_and_delta() {
        let (tree, _) = tiny_dataset(0);
        let session = Session::new(&tree, tiny_model(), &LossConfig::default(), 0).unwrap();
        for id in session.store().ids() {
            let name = session.store().name(id);
            let excluded = name.starts_with("delta")
                || name.ends_with(".gamma")
                || name.ends_with(".beta");
            assert_eq!(
                !session.store().decay(id),
                excluded,
                "decay flag wrong for {name}"
            );
        }
    }

    #[test]
    fn test_fit_is_deterministic_per_seed() {
        let (tree, ds) = tiny_dataset(1);
        let cfg = quick_train_cfg(3);
        let loss = LossConfig::default();
        let (rec_a, ckpt_a) = fit(&tree, &ds, tiny_model(), &loss, &cfg, 7).unwrap();
        let (rec_b, ckpt_b) = fit(&tree, &ds, tiny_model(), &loss, &cfg, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&rec_a).unwrap(),
            serde_json::to_string(&rec_b).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&ckpt_a).unwrap(),
            serde_json::to_string(&ckpt_b).unwrap()
        );
        let (rec_c, _) = fit(&tree, &ds, tiny_model(), &loss, &cfg, 8).unwrap();
        assert_ne!(rec_a.train_loss, rec_c.train_loss);
    }

    #[test]
    fn test_fit_learns_noiseless_single_level_problem() {
        let tree = LabelTree::parse("a\nb\nc\n").unwrap();
        let spec = DatasetSpec {
            tree: tree.clone(),
            dim: 4,
            per_leaf: 20,
            level_spread: vec![3.0],
            noise: 0.0,
            seed: 2,
            fractions: [0.6, 0.2, 0.2],
        };
        let ds = generate(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 6,
            seeds: vec![0],
            ..TrainConfig::default()
        };
        let model_cfg = ModelConfig {
            input_dim: 4,
            hidden1: 8,
            hidden2: 8,
            feature_dim: 8,
        };
        let (record, best) =
            fit(&tree, &ds, model_cfg, &LossConfig::baseline(), &cfg, 0).unwrap();
        assert_eq!(record.best_score, 1.0, "validation top-1 never reached 1");
        let mut session = best.restore(&tree).unwrap();
        let report = session.evaluate(&ds, Split::Test).unwrap();
        assert_eq!(report.rule("argmax").unwrap().levels[0].top1, 1.0);
    }

    #[test]
    fn test_fit_lr_traces_follow_cosine_law() {
        let (tree, ds) = tiny_dataset(3);
        let cfg = quick_train_cfg(5);
        let (record, _) =
            fit(&tree, &ds, tiny_model(), &LossConfig::baseline(), &cfg, 1).unwrap();
        for e in 0..5 {
            assert_eq!(record.encoder_lr[e], cosine_lr(cfg.encoder_lr, e, 5));
            assert_eq!(record.head_lr[e], cosine_lr(cfg.head_lr, e, 5));
        }
    }

    #[test]
    fn test_fit_best_epoch_maximizes_selection_score() {
        let (tree, ds) = tiny_dataset(4);
        let cfg = quick_train_cfg(6);
        let (record, best) =
            fit(&tree, &ds, tiny_model(), &LossConfig::default(), &cfg, 2).unwrap();
        let scores: Vec<f64> = record
            .validation
            .iter()
            .map(|v| cfg.selection.score(v))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(record.best_score, max);
        assert_eq!(scores[record.best_epoch], max);
        // Earliest epoch wins ties.
        assert!(scores[..record.best_epoch].iter().all(|&s| s < max));
        assert_eq!(best.epoch, record.best_epoch);
    }

    #[test]
    fn test_fit_rejects_oversized_batch() {
        let (tree, ds) = tiny_dataset(5);
        let cfg = TrainConfig {
            batch_size: 1000,
            ..quick_train_cfg(2)
        };
        let err = fit(&tree, &ds, tiny_model(), &LossConfig::default(), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn test_train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for (cfg, what) in [
            (TrainConfig { epochs: 0, ..TrainConfig::default() }, "epochs"),
            (TrainConfig { batch_size: 1, ..TrainConfig::default() }, "batch"),
            (TrainConfig { encoder_lr: 0.0, ..TrainConfig::default() }, "lr"),
            (TrainConfig { momentum: 1.0, ..TrainConfig::default() }, "momentum"),
            (TrainConfig { weight_decay: -1.0, ..TrainConfig::default() }, "decay"),
            (TrainConfig { seeds: vec![], ..TrainConfig::default() }, "seeds"),
        ] {
            assert!(cfg.validate().is_err(), "{what} should be rejected");
        }
    }

    #[test]
    fn test_checkpoint_restores_identical_predictions() {
        let (tree, ds) = tiny_dataset(6);
        let cfg = quick_train_cfg(3);
        let (_, best) =
            fit(&tree, &ds, tiny_model(), &LossConfig::default(), &cfg, 3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        best.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, best);

        let mut a = best.restore(&tree).unwrap();
        let mut b = loaded.restore(&tree).unwrap();
        let (x, _) = ds.batch(&ds.indices(Split::Test)).unwrap();
        let (za, zb) = (a.logits(&x).unwrap(), b.logits(&x).unwrap());
        assert_eq!(za, zb);

        let other = LabelTree::parse("p/x\np/y\nq/x\nq/y\nq/z\n").unwrap();
        assert!(matches!(
            best.restore(&other).unwrap_err(),
            Error::FingerprintMismatch { .. }
        ));
    }

    #[test]
    fn test_evaluate_rules_agree_when_beta_is_zero() {
        // With beta zero the learned matrices drop out of the effective
        // cost, so the augmented rule degenerates to least expected
        // distance.
        let (tree, ds) = tiny_dataset(7);
        let loss = LossConfig {
            beta: 0.0,
            ..LossConfig::default()
        };
        let mut session = Session::new(&tree, tiny_model(), &loss, 5).unwrap();
        let report = session.evaluate(&ds, Split::Test).unwrap();
        assert_eq!(
            report.rule("crm").unwrap().levels,
            report.rule("augmented").unwrap().levels
        );
    }

    #[test]
    fn test_aggregate_mean_and_spread() {
        let a = aggregate(&[1.0, 2.0, 3.0]);
        assert!((a.mean - 2.0).abs() <= 1e-15);
        assert!((a.spread - 1.0).abs() <= 1e-15);
        let single = aggregate(&[4.0]);
        assert_eq!(single.mean, 4.0);
        assert_eq!(single.spread, 0.0);
    }

    #[test]
    fn test_ablate_grid_shape_and_baseline_row() {
        let (tree, ds) = tiny_dataset(8);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 6,
            seeds: vec![0, 1],
            ..TrainConfig::default()
        };
        let rows = ablate(&tree, &ds, tiny_model(), &LossConfig::default(), &cfg).unwrap();
        assert_eq!(rows.len(), 8);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.chained_heads, i & 4 != 0);
            assert_eq!(row.cost_loss, i & 2 != 0);
            assert_eq!(row.smoothing, i & 1 != 0);
            let expect_rule = if row.cost_loss {
                DecisionRule::Augmented
            } else {
                DecisionRule::Argmax
            };
            assert_eq!(row.rule, expect_rule);
        }

        // The all-off row is the plain baseline run, bit for bit.
        let mut top1 = Vec::new();
        let mut hier1 = Vec::new();
        for &seed in &cfg.seeds {
            let (_, best) =
                fit(&tree, &ds, tiny_model(), &LossConfig::baseline(), &cfg, seed).unwrap();
            let mut session = best.restore(&tree).unwrap();
            let report = session.evaluate(&ds, Split::Test).unwrap();
            let fine = &report.rule("argmax").unwrap().levels[1];
            top1.push(fine.top1);
            hier1.push(fine.hier_dist[&1]);
        }
        assert_eq!(rows[0].top1, aggregate(&top1));
        assert_eq!(rows[0].hier_dist1, aggregate(&hier1));

        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.starts_with("chained_heads,cost_loss,smoothing,rule,"));
    }
}
