//! Encoder and classification-head topologies.
//!
//! Two head arrangements share one MLP encoder. The chained model computes
//! fine logits first and derives each coarser level from the level below it,
//! so coarse-level losses backpropagate through the fine heads into the
//! encoder. The parallel model attaches an independent head per level
//! directly to the encoder features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BnState, Graph, Init, LrGroup, Mode, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Encoder and feature dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden1: 64,
            hidden2: 64,
            feature_dim: 64,
        }
    }
}

/// One affine layer; weights and bias live in the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl AffineLayer {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        out: usize,
        group: LrGroup,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            vec![fan_in, out],
            group,
            true,
            Init::UniformFanIn { fan_in },
        );
        let b = store.add(format!("{prefix}.b"), vec![out], group, true, Init::Zeros);
        AffineLayer { w, b }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.leaf(store, self.w)?;
        let b = g.leaf(store, self.b)?;
        g.affine(x, w, b)
    }
}

/// Batch-norm layer: learnable scale/shift plus running statistics.
///
/// Gamma and beta are excluded from weight decay.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnState,
    name: String,
}

impl BatchNormLayer {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = store.add(
            format!("{prefix}.gamma"),
            vec![dim],
            LrGroup::Head,
            false,
            Init::Ones,
        );
        let beta = store.add(
            format!("{prefix}.beta"),
            vec![dim],
            LrGroup::Head,
            false,
            Init::Zeros,
        );
        BatchNormLayer {
            gamma,
            beta,
            state: BnState::new(dim),
            name: prefix.to_string(),
        }
    }

    fn apply(&mut self, g: &mut Graph, store: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let gamma = g.leaf(store, self.gamma)?;
        let beta = g.leaf(store, self.beta)?;
        g.batchnorm1d(x, gamma, beta, &mut self.state, mode)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Three affine layers with ELU between them: `d -> m1 -> m2 -> m`.
#[derive(Debug, Clone)]
pub struct Encoder {
    l1: AffineLayer,
    l2: AffineLayer,
    l3: AffineLayer,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        Encoder {
            l1: AffineLayer::new(store, "encoder.l1", cfg.input_dim, cfg.hidden1, LrGroup::Encoder),
            l2: AffineLayer::new(store, "encoder.l2", cfg.hidden1, cfg.hidden2, LrGroup::Encoder),
            l3: AffineLayer::new(store, "encoder.l3", cfg.hidden2, cfg.feature_dim, LrGroup::Encoder),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.l1.apply(g, store, x)?;
        let h = g.elu(h)?;
        let h = self.l2.apply(g, store, h)?;
        let h = g.elu(h)?;
        self.l3.apply(g, store, h)
    }
}

/// Transform block feeding one coarse level: batch norm, width-preserving
/// affine, batch norm, ELU, then the level's head.
#[derive(Debug, Clone)]
struct CoarseBlock {
    bn_in: BatchNormLayer,
    lin: AffineLayer,
    bn_out: BatchNormLayer,
    head: AffineLayer,
}

/// Chained-head model: fine logits feed each coarser level in turn.
#[derive(Debug, Clone)]
pub struct ChainedModel {
    cfg: ModelConfig,
    level_sizes: Vec<usize>,
    encoder: Encoder,
    fine_head: AffineLayer,
    /// Blocks for levels `H-1` down to `1`, in that order.
    blocks: Vec<CoarseBlock>,
}

impl ChainedModel {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, level_sizes: &[usize]) -> Self {
        let depth = level_sizes.len();
        let encoder = Encoder::new(store, &cfg);
        let fine_head = AffineLayer::new(
            store,
            &format!("head{depth}"),
            cfg.feature_dim,
            level_sizes[depth - 1],
            LrGroup::Head,
        );
        let mut blocks = Vec::with_capacity(depth.saturating_sub(1));
        for h in (1..depth).rev() {
            let width = level_sizes[h];
            let prefix = format!("transform{h}");
            blocks.push(CoarseBlock {
                bn_in: BatchNormLayer::new(store, &format!("{prefix}.bn_in"), width),
                lin: AffineLayer::new(store, &format!("{prefix}.lin"), width, width, LrGroup::Head),
                bn_out: BatchNormLayer::new(store, &format!("{prefix}.bn_out"), width),
                head: AffineLayer::new(
                    store,
                    &format!("head{h}"),
                    width,
                    level_sizes[h - 1],
                    LrGroup::Head,
                ),
            });
        }
        ChainedModel {
            cfg,
            level_sizes: level_sizes.to_vec(),
            encoder,
            fine_head,
            blocks,
        }
    }

    /// Logits for every level, coarsest first (`result[h-1]` is level `h`).
    pub fn forward(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
    ) -> Result<Vec<NodeId>> {
        let depth = self.level_sizes.len();
        let features = self.encoder.forward(g, store, x)?;
        let mut logits = vec![None; depth];
        let mut z = self.fine_head.apply(g, store, features)?;
        logits[depth - 1] = Some(z);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let level = depth - 1 - i;
            let t = block.bn_in.apply(g, store, z, mode)?;
            let t = block.lin.apply(g, store, t)?;
            let t = block.bn_out.apply(g, store, t, mode)?;
            let t = g.elu(t)?;
            z = block.head.apply(g, store, t)?;
            logits[level - 1] = Some(z);
        }
        Ok(logits.into_iter().map(|n| n.expect("all levels filled")).collect())
    }
}

/// Parallel-head model: every level reads the encoder features directly.
#[derive(Debug, Clone)]
pub struct ParallelModel {
    cfg: ModelConfig,
    level_sizes: Vec<usize>,
    encoder: Encoder,
    heads: Vec<AffineLayer>,
}

impl ParallelModel {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, level_sizes: &[usize]) -> Self {
        let encoder = Encoder::new(store, &cfg);
        let heads = level_sizes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                AffineLayer::new(store, &format!("head{}", i + 1), cfg.feature_dim, c, LrGroup::Head)
            })
            .collect();
        ParallelModel {
            cfg,
            level_sizes: level_sizes.to_vec(),
            encoder,
            heads,
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<Vec<NodeId>> {
        let features = self.encoder.forward(g, store, x)?;
        self.heads
            .iter()
            .map(|head| head.apply(g, store, features))
            .collect()
    }
}

/// Which head topology a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Chained,
    Parallel,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Chained => "chained",
            ModelKind::Parallel => "parallel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chained" => Ok(ModelKind::Chained),
            "parallel" => Ok(ModelKind::Parallel),
            other => Err(Error::Config {
                detail: format!("unknown model kind {other:?} (expected chained|parallel)"),
            }),
        }
    }
}

/// Either head topology behind one interface.
#[derive(Debug, Clone)]
pub enum Model {
    Chained(ChainedModel),
    Parallel(ParallelModel),
}

impl Model {
    pub fn new(
        store: &mut ParamStore,
        kind: ModelKind,
        cfg: ModelConfig,
        level_sizes: &[usize],
    ) -> Self {
        match kind {
            ModelKind::Chained => Model::Chained(ChainedModel::new(store, cfg, level_sizes)),
            ModelKind::Parallel => Model::Parallel(ParallelModel::new(store, cfg, level_sizes)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Chained(_) => ModelKind::Chained,
            Model::Parallel(_) => ModelKind::Parallel,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Chained(m) => &m.cfg,
            Model::Parallel(m) => &m.cfg,
        }
    }

    pub fn level_sizes(&self) -> &[usize] {
        match self {
            Model::Chained(m) => &m.level_sizes,
            Model::Parallel(m) => &m.level_sizes,
        }
    }

    /// Logits per level, coarsest first.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
    ) -> Result<Vec<NodeId>> {
        match self {
            Model::Chained(m) => m.forward(g, store, x, mode),
            Model::Parallel(m) => m.forward(g, store, x),
        }
    }

    /// Named running statistics of every batch-norm layer, in forward order.
    pub fn bn_states(&self) -> Vec<(String, BnState)> {
        match self {
            Model::Chained(m) => m
                .blocks
                .iter()
                .flat_map(|b| {
                    [
                        (b.bn_in.name().to_string(), b.bn_in.state.clone()),
                        (b.bn_out.name().to_string(), b.bn_out.state.clone()),
                    ]
                })
                .collect(),
            Model::Parallel(_) => Vec::new(),
        }
    }

    /// Restores running statistics captured by [`bn_states`](Model::bn_states).
    pub fn set_bn_states(&mut self, states: &[(String, BnState)]) -> Result<()> {
        let Model::Chained(m) = self else {
            if states.is_empty() {
                return Ok(());
            }
            return Err(Error::Config {
                detail: "parallel model has no batch-norm statistics".to_string(),
            });
        };
        for (name, state) in states {
            let slot = m
                .blocks
                .iter_mut()
                .flat_map(|b| [&mut b.bn_in, &mut b.bn_out])
                .find(|bn| bn.name() == name)
                .ok_or_else(|| Error::Config {
                    detail: format!("no batch-norm layer named {name:?}"),
                })?;
            if slot.state.mean.len() != state.mean.len() {
                return Err(Error::ShapeMismatch {
                    op: "set_bn_states",
                    detail: format!(
                        "layer {name:?} has width {}, stats width {}",
                        slot.state.mean.len(),
                        state.mean.len()
                    ),
                });
            }
            slot.state = state.clone();
        }
        Ok(())
    }
}

/// Fills every parameter from a seeded generator: affine weights uniform on
/// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero, batch-norm gamma one and
/// beta zero. Bit-deterministic per seed.
pub fn init_parameters(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.initialize(&mut rng);
}
