//! Command-line front end: dataset generation, training, evaluation, the
//! component grid, and hyperparameter sweeps.
//!
//! Subcommands `gen-data | train | eval | ablate | sweep`. Settings
//! resolve flag > config file > built-in default; the config file is flat
//! `key=value` lines with `#` comments. Every run directory receives the
//! resolved settings verbatim as `config.resolved`, and checkpoints carry
//! its hash. `HIERGRAIN_OUT_DIR` names the default output root (`runs`
//! when unset). Exit codes: 0 success, 2 usage or validation error,
//! 3 I/O failure, 4 numerical failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::DeltaInit;
use crate::data::{self, Dataset, DatasetSpec, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hierarchy::LabelTree;
use crate::metrics::{histogram_csv, EvalReport, LevelReport};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::train::{
    self, aggregate, Aggregate, Checkpoint, DecisionRule, Selection, Session, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "hiergrain",
    version,
    about = "Hierarchy-aware classification experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a label tree.
    #[command(name = "gen-data")]
    GenData(GenDataArgs),
    /// Train one run per seed and export records, checkpoints, and reports.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split under all three decision rules.
    Eval(EvalArgs),
    /// Train the full 2x2x2 component grid and tabulate test metrics.
    Ablate(RunArgs),
    /// Re-train across several values of one loss hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Label tree file; the built-in 4/12/36 preset when absent (its tree
    /// is then written next to the dataset).
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Dataset file to write; `<out-root>/dataset.txt` when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Samples drawn per leaf class.
    #[arg(long = "per-leaf")]
    per_leaf: Option<usize>,
    /// Comma-separated per-level center spreads, coarsest first.
    #[arg(long)]
    spreads: Option<String>,
    /// Observation noise scale.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated train,val,test fractions summing to 1.
    #[arg(long)]
    fractions: Option<String>,
    /// Replace existing output files.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value settings file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory; `<out-root>/<subcommand>` when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for the three component switches: `full` turns
    /// chained-heads, cost-loss, and smoothing on; `baseline` turns them
    /// off. Individual switch flags still win.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    hidden1: Option<usize>,
    #[arg(long)]
    hidden2: Option<usize>,
    #[arg(long = "feature-dim")]
    feature_dim: Option<usize>,
    /// Level-weight exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Learned-difference strength in the effective cost.
    #[arg(long)]
    beta: Option<f64>,
    /// Smoothing mixture weight.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Smoothing temperature.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "chained-heads")]
    chained_heads: Option<bool>,
    #[arg(long = "cost-loss")]
    cost_loss: Option<bool>,
    #[arg(long)]
    smoothing: Option<bool>,
    /// Difference-matrix init: zeros | uniform.
    #[arg(long = "delta-init")]
    delta_init: Option<String>,
    /// Half-width of the uniform difference-matrix init.
    #[arg(long = "delta-scale")]
    delta_scale: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "encoder-lr")]
    encoder_lr: Option<f64>,
    #[arg(long = "head-lr")]
    head_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    /// Comma-separated seed list, one training run per seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Validation metric picking the best epoch: top1 | severity.
    #[arg(long)]
    selection: Option<String>,
    /// Replace an existing output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    /// File for the report JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Hyperparameter to sweep: alpha | beta | epsilon | gamma.
    #[arg(long)]
    param: String,
    /// Comma-separated values, at least two, no duplicates.
    #[arg(long)]
    values: String,
}

/// Parses the process arguments, runs one subcommand, and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Every tunable setting of a run, after flag > file > default
/// resolution. `sweep` is filled only by the sweep subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub tree: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub hidden1: usize,
    pub hidden2: usize,
    pub feature_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub chained_heads: bool,
    pub cost_loss: bool,
    pub smoothing: bool,
    pub delta_init: String,
    pub delta_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub selection: String,
    pub sweep: Option<(String, Vec<f64>)>,
}

impl ExperimentConfig {
    /// The resolved settings as sorted `key=value` lines; written to
    /// every output directory and hashed into checkpoints.
    pub fn resolved_text(&self) -> String {
        let mut pairs = vec![
            ("alpha".to_string(), self.alpha.to_string()),
            ("batch_size".to_string(), self.batch_size.to_string()),
            ("beta".to_string(), self.beta.to_string()),
            ("chained_heads".to_string(), self.chained_heads.to_string()),
            ("cost_loss".to_string(), self.cost_loss.to_string()),
            ("dataset".to_string(), self.dataset.display().to_string()),
            ("delta_init".to_string(), self.delta_init.clone()),
            ("delta_scale".to_string(), self.delta_scale.to_string()),
            ("encoder_lr".to_string(), self.encoder_lr.to_string()),
            ("epochs".to_string(), self.epochs.to_string()),
            ("epsilon".to_string(), self.epsilon.to_string()),
            ("feature_dim".to_string(), self.feature_dim.to_string()),
            ("gamma".to_string(), self.gamma.to_string()),
            ("head_lr".to_string(), self.head_lr.to_string()),
            ("hidden1".to_string(), self.hidden1.to_string()),
            ("hidden2".to_string(), self.hidden2.to_string()),
            ("momentum".to_string(), self.momentum.to_string()),
            ("out".to_string(), self.out.display().to_string()),
            ("seeds".to_string(), join_u64(&self.seeds)),
            ("selection".to_string(), self.selection.clone()),
            ("smoothing".to_string(), self.smoothing.to_string()),
            ("tree".to_string(), self.tree.display().to_string()),
            ("weight_decay".to_string(), self.weight_decay.to_string()),
        ];
        if let Some((param, values)) = &self.sweep {
            pairs.push(("sweep_param".to_string(), param.clone()));
            pairs.push(("sweep_values".to_string(), join_f64(values)));
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let delta_init = match self.delta_init.as_str() {
            "zeros" => DeltaInit::Zeros,
            "uniform" => DeltaInit::Uniform {
                scale: self.delta_scale,
            },
            other => {
                return Err(Error::Config {
                    detail: format!("delta_init must be `zeros` or `uniform`, got `{other}`"),
                })
            }
        };
        let cfg = LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
            gamma: self.gamma,
            chained_heads: self.chained_heads,
            cost_loss: self.cost_loss,
            smoothing: self.smoothing,
            delta_init,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let selection = Selection::parse(&self.selection).ok_or_else(|| Error::Config {
            detail: format!("selection must be `top1` or `severity`, got `{}`", self.selection),
        })?;
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            encoder_lr: self.encoder_lr,
            head_lr: self.head_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seeds: self.seeds.clone(),
            selection,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            feature_dim: self.feature_dim,
        }
    }
}

fn out_root() -> PathBuf {
    std::env::var_os("HIERGRAIN_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Settings still open during resolution; `None` means "not set yet".
#[derive(Default)]
struct PartialConfig {
    tree: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    hidden1: Option<usize>,
    hidden2: Option<usize>,
    feature_dim: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    epsilon: Option<f64>,
    gamma: Option<f64>,
    chained_heads: Option<bool>,
    cost_loss: Option<bool>,
    smoothing: Option<bool>,
    delta_init: Option<String>,
    delta_scale: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    encoder_lr: Option<f64>,
    head_lr: Option<f64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    seeds: Option<Vec<u64>>,
    selection: Option<String>,
}

impl PartialConfig {
    fn set(&mut self, key: &str, value: &str, at: &str) -> Result<()> {
        let bad = |detail: String| Error::Config {
            detail: format!("{at}: {detail}"),
        };
        match key {
            "tree" => self.tree = Some(PathBuf::from(value)),
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "hidden1" => self.hidden1 = Some(parse_usize(value, at)?),
            "hidden2" => self.hidden2 = Some(parse_usize(value, at)?),
            "feature_dim" => self.feature_dim = Some(parse_usize(value, at)?),
            "alpha" => self.alpha = Some(parse_f64(value, at)?),
            "beta" => self.beta = Some(parse_f64(value, at)?),
            "epsilon" => self.epsilon = Some(parse_f64(value, at)?),
            "gamma" => self.gamma = Some(parse_f64(value, at)?),
            "chained_heads" => self.chained_heads = Some(parse_bool(value, at)?),
            "cost_loss" => self.cost_loss = Some(parse_bool(value, at)?),
            "smoothing" => self.smoothing = Some(parse_bool(value, at)?),
            "delta_init" => self.delta_init = Some(value.to_string()),
            "delta_scale" => self.delta_scale = Some(parse_f64(value, at)?),
            "epochs" => self.epochs = Some(parse_usize(value, at)?),
            "batch_size" => self.batch_size = Some(parse_usize(value, at)?),
            "encoder_lr" => self.encoder_lr = Some(parse_f64(value, at)?),
            "head_lr" => self.head_lr = Some(parse_f64(value, at)?),
            "momentum" => self.momentum = Some(parse_f64(value, at)?),
            "weight_decay" => self.weight_decay = Some(parse_f64(value, at)?),
            "seeds" => self.seeds = Some(parse_u64_list(value, at)?),
            "selection" => self.selection = Some(value.to_string()),
            other => return Err(bad(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        require_exists(path, "config file")?;
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{}:{}", path.display(), lineno + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                detail: format!("{at}: expected key=value, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim(), &at)?;
        }
        Ok(())
    }

    fn apply_flags(&mut self, args: &RunArgs) -> Result<()> {
        // The method shorthand is itself a flag, so it beats file entries;
        // individual switch flags beat it in turn.
        if let Some(method) = &args.method {
            let on = match method.as_str() {
                "full" => true,
                "baseline" => false,
                other => {
                    return Err(Error::Config {
                        detail: format!("method must be `full` or `baseline`, got `{other}`"),
                    })
                }
            };
            self.chained_heads = Some(on);
            self.cost_loss = Some(on);
            self.smoothing = Some(on);
        }
        macro_rules! take {
            ($($field:ident),+) => {
                $(if let Some(v) = &args.$field {
                    self.$field = Some(v.clone());
                })+
            };
        }
        take!(
            tree, dataset, out, hidden1, hidden2, feature_dim, alpha, beta, epsilon, gamma,
            chained_heads, cost_loss, smoothing, delta_init, delta_scale, epochs, batch_size,
            encoder_lr, head_lr, momentum, weight_decay, selection
        );
        if let Some(s) = &args.seeds {
            self.seeds = Some(parse_u64_list(s, "--seeds")?);
        }
        Ok(())
    }

    fn finish(self, subcommand: &str) -> Result<ExperimentConfig> {
        let missing = |key: &str| Error::Config {
            detail: format!("missing required setting `{key}` (flag --{key} or config key {key})"),
        };
        let model = ModelConfig::default();
        let loss = LossConfig::default();
        let train = TrainConfig::default();
        let delta_scale_default = match loss.delta_init {
            DeltaInit::Uniform { scale } => scale,
            DeltaInit::Zeros => 0.01,
        };
        Ok(ExperimentConfig {
            tree: self.tree.ok_or_else(|| missing("tree"))?,
            dataset: self.dataset.ok_or_else(|| missing("dataset"))?,
            out: self.out.unwrap_or_else(|| out_root().join(subcommand)),
            hidden1: self.hidden1.unwrap_or(model.hidden1),
            hidden2: self.hidden2.unwrap_or(model.hidden2),
            feature_dim: self.feature_dim.unwrap_or(model.feature_dim),
            alpha: self.alpha.unwrap_or(loss.alpha),
            beta: self.beta.unwrap_or(loss.beta),
            epsilon: self.epsilon.unwrap_or(loss.epsilon),
            gamma: self.gamma.unwrap_or(loss.gamma),
            chained_heads: self.chained_heads.unwrap_or(loss.chained_heads),
            cost_loss: self.cost_loss.unwrap_or(loss.cost_loss),
            smoothing: self.smoothing.unwrap_or(loss.smoothing),
            delta_init: self.delta_init.unwrap_or_else(|| "uniform".to_string()),
            delta_scale: self.delta_scale.unwrap_or(delta_scale_default),
            epochs: self.epochs.unwrap_or(train.epochs),
            batch_size: self.batch_size.unwrap_or(train.batch_size),
            encoder_lr: self.encoder_lr.unwrap_or(train.encoder_lr),
            head_lr: self.head_lr.unwrap_or(train.head_lr),
            momentum: self.momentum.unwrap_or(train.momentum),
            weight_decay: self.weight_decay.unwrap_or(train.weight_decay),
            seeds: self.seeds.unwrap_or_else(|| train.seeds.clone()),
            selection: self.selection.unwrap_or_else(|| "top1".to_string()),
            sweep: None,
        })
    }
}

fn resolve(subcommand: &str, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut partial = PartialConfig::default();
    if let Some(path) = &args.config {
        partial.apply_file(path)?;
    }
    partial.apply_flags(args)?;
    partial.finish(subcommand)
}

fn parse_usize(s: &str, at: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Config {
        detail: format!("{at}: `{s}` is not a non-negative integer"),
    })
}

fn parse_f64(s: &str, at: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Config {
        detail: format!("{at}: `{s}` is not a number"),
    })
}

fn parse_bool(s: &str, at: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config {
            detail: format!("{at}: `{s}` is not `true` or `false`"),
        }),
    }
}

fn parse_u64_list(s: &str, at: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|part| {
            part.trim().parse().map_err(|_| Error::Config {
                detail: format!("{at}: `{part}` is not a non-negative integer"),
            })
        })
        .collect()
}

fn parse_f64_list(s: &str, at: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|part| {
            part.trim().parse().map_err(|_| Error::Config {
                detail: format!("{at}: `{part}` is not a number"),
            })
        })
        .collect()
}

fn join_u64(values: &[u64]) -> String {
    values.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Short hash of the resolved settings. The output directory names where
/// artifacts land, not what gets computed, so it is skipped: reruns of one
/// experiment into different directories carry the same hash.
pub fn config_hash(resolved: &str) -> String {
    let mut hasher = Sha256::new();
    for line in resolved.lines().filter(|l| !l.starts_with("out=")) {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(&hasher.finalize()[..8])
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config {
            detail: format!("{what} {} does not exist", path.display()),
        });
    }
    Ok(())
}

fn guard_overwrite(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Config {
            detail: format!("{} exists; pass --overwrite to replace it", path.display()),
        });
    }
    Ok(())
}

/// Clears and recreates a run directory (gated by `--overwrite`), so a
/// rerun is byte-identical instead of layered over stale artifacts.
fn prepare_out_dir(out: &Path, overwrite: bool) -> Result<()> {
    guard_overwrite(out, overwrite)?;
    if out.exists() {
        std::fs::remove_dir_all(out)?;
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<(LabelTree, Dataset)> {
    require_exists(&cfg.tree, "tree file")?;
    require_exists(&cfg.dataset, "dataset file")?;
    let tree = LabelTree::parse(&std::fs::read_to_string(&cfg.tree)?)?;
    let ds = data::load(&cfg.dataset)?;
    ds.validate_against(&tree)?;
    Ok((tree, ds))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let tree = match &args.tree {
        Some(path) => {
            require_exists(path, "tree file")?;
            LabelTree::parse(&std::fs::read_to_string(path)?)?
        }
        None => data::preset_tree(),
    };
    let base = DatasetSpec::competition(args.seed.unwrap_or(0));
    let spec = DatasetSpec {
        tree: tree.clone(),
        dim: args.dim.unwrap_or(base.dim),
        per_leaf: args.per_leaf.unwrap_or(base.per_leaf),
        level_spread: match &args.spreads {
            Some(s) => parse_f64_list(s, "--spreads")?,
            None => base.level_spread.clone(),
        },
        noise: args.noise.unwrap_or(base.noise),
        seed: args.seed.unwrap_or(base.seed),
        fractions: match &args.fractions {
            Some(s) => {
                let v = parse_f64_list(s, "--fractions")?;
                <[f64; 3]>::try_from(v).map_err(|v| Error::Config {
                    detail: format!("--fractions needs exactly 3 values, got {}", v.len()),
                })?
            }
            None => base.fractions,
        },
    };
    let ds = data::generate(&spec)?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("dataset.txt"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    guard_overwrite(&out, args.overwrite)?;
    data::save(&ds, &out)?;

    if args.tree.is_none() {
        let tree_path = out.with_extension("tree");
        guard_overwrite(&tree_path, args.overwrite)?;
        std::fs::write(&tree_path, tree.canonical_text())?;
        println!("tree {} fingerprint={}", tree_path.display(), tree.fingerprint());
    } else {
        println!("tree {} fingerprint={}", args.tree.as_ref().unwrap().display(), tree.fingerprint());
    }
    println!(
        "dataset {} rows={} fingerprint={}",
        out.display(),
        ds.len(),
        ds.fingerprint()
    );
    Ok(())
}

/// Finest-level test metrics of one trained seed under one rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeedMetrics {
    seed: u64,
    top1: f64,
    mistake_severity: Option<f64>,
    hier_dist1: f64,
}

/// Mean and spread over seeds for one decision rule at the finest level.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleAggregate {
    rule: String,
    top1: Aggregate,
    /// Aggregated over the seeds that made at least one mistake; absent
    /// when none did.
    mistake_severity: Option<Aggregate>,
    hier_dist1: Aggregate,
    per_seed: Vec<SeedMetrics>,
}

/// `aggregate.json` schema: per-rule summaries over all trained seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunAggregate {
    config_hash: String,
    seeds: Vec<u64>,
    rules: Vec<RuleAggregate>,
}

fn fine_level<'a>(report: &'a EvalReport, rule: &str) -> &'a LevelReport {
    report
        .rule(rule)
        .expect("rule was evaluated")
        .levels
        .last()
        .expect("at least one level")
}

fn build_aggregate(
    config_hash: String,
    seeds: &[u64],
    reports: &[EvalReport],
) -> RunAggregate {
    let mut rules = Vec::new();
    for rule in DecisionRule::ALL {
        let per_seed: Vec<SeedMetrics> = seeds
            .iter()
            .zip(reports)
            .map(|(&seed, report)| {
                let fine = fine_level(report, rule.as_str());
                SeedMetrics {
                    seed,
                    top1: fine.top1,
                    mistake_severity: fine.mistake_severity,
                    hier_dist1: fine.hier_dist[&1],
                }
            })
            .collect();
        let severities: Vec<f64> = per_seed
            .iter()
            .filter_map(|m| m.mistake_severity)
            .collect();
        rules.push(RuleAggregate {
            rule: rule.as_str().to_string(),
            top1: aggregate(&per_seed.iter().map(|m| m.top1).collect::<Vec<_>>()),
            mistake_severity: if severities.is_empty() {
                None
            } else {
                Some(aggregate(&severities))
            },
            hier_dist1: aggregate(&per_seed.iter().map(|m| m.hier_dist1).collect::<Vec<_>>()),
            per_seed,
        });
    }
    RunAggregate {
        config_hash,
        seeds: seeds.to_vec(),
        rules,
    }
}

/// Comma-separated rows of an effective difference matrix.
fn matrix_csv(t: &Tensor) -> String {
    let rows = t.shape()[0];
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = t.row(r).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn export_seed_artifacts(
    dir: &Path,
    session: &Session,
    report: &EvalReport,
) -> Result<()> {
    for level in 1..=session.tree().depth() {
        let eff = session.bank().effective(session.store(), level)?;
        std::fs::write(dir.join(format!("delta_hat_level{level}.csv")), matrix_csv(&eff))?;
    }
    for rule in &report.rules {
        for lvl in &rule.levels {
            std::fs::write(
                dir.join(format!("hist_{}_level{}.csv", rule.rule, lvl.level)),
                histogram_csv(&lvl.histogram),
            )?;
        }
    }
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = resolve("train", args)?;
    let (tree, ds) = load_inputs(&cfg)?;
    let loss = cfg.loss_config()?;
    let tcfg = cfg.train_config()?;
    let mcfg = cfg.model_config(ds.dim());
    let resolved = cfg.resolved_text();
    let hash = config_hash(&resolved);

    prepare_out_dir(&cfg.out, args.overwrite)?;
    std::fs::write(cfg.out.join("config.resolved"), &resolved)?;

    let mut reports = Vec::with_capacity(tcfg.seeds.len());
    for &seed in &tcfg.seeds {
        let dir = cfg.out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        let (record, mut best) = train::fit(&tree, &ds, mcfg, &loss, &tcfg, seed)?;
        best.config_hash = hash.clone();
        write_json(&dir.join("record.json"), &record)?;
        best.save(&dir.join("checkpoint.json"))?;

        let mut session = best.restore(&tree)?;
        let report = session.evaluate(&ds, Split::Test)?;
        write_json(&dir.join("eval.json"), &report)?;
        export_seed_artifacts(&dir, &session, &report)?;

        let fine = fine_level(&report, "argmax");
        println!(
            "seed {seed}: best epoch {}, test top1 {:.4}, severity {}",
            record.best_epoch,
            fine.top1,
            fine.mistake_severity
                .map_or_else(|| "n/a".to_string(), |s| format!("{s:.4}")),
        );
        reports.push(report);
    }

    let agg = build_aggregate(hash, &tcfg.seeds, &reports);
    write_json(&cfg.out.join("aggregate.json"), &agg)?;
    println!(
        "trained {} seed(s) into {}",
        tcfg.seeds.len(),
        cfg.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    require_exists(&args.checkpoint, "checkpoint file")?;
    require_exists(&args.tree, "tree file")?;
    require_exists(&args.dataset, "dataset file")?;
    let split = Split::parse(&args.split).ok_or_else(|| Error::Config {
        detail: format!("split must be train, val, or test, got `{}`", args.split),
    })?;
    let tree = LabelTree::parse(&std::fs::read_to_string(&args.tree)?)?;
    let ds = data::load(&args.dataset)?;
    ds.validate_against(&tree)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut session = ckpt.restore(&tree)?;
    let report = session.evaluate(&ds, split)?;
    match &args.out {
        Some(path) => {
            guard_overwrite(path, args.overwrite)?;
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            write_json(path, &report)?;
            let fine = fine_level(&report, "argmax");
            println!(
                "evaluated {} split: fine top1 {:.4} -> {}",
                split.as_str(),
                fine.top1,
                path.display()
            );
        }
        None => {
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            print!("{text}");
        }
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let cfg = resolve("ablate", args)?;
    let (tree, ds) = load_inputs(&cfg)?;
    let loss = cfg.loss_config()?;
    let tcfg = cfg.train_config()?;
    let mcfg = cfg.model_config(ds.dim());
    let resolved = cfg.resolved_text();

    prepare_out_dir(&cfg.out, args.overwrite)?;
    std::fs::write(cfg.out.join("config.resolved"), &resolved)?;

    let rows = train::ablate(&tree, &ds, mcfg, &loss, &tcfg)?;
    let csv = train::ablation_csv(&rows);
    std::fs::write(cfg.out.join("ablation.csv"), &csv)?;
    write_json(&cfg.out.join("ablation.json"), &rows)?;
    print!("{csv}");
    println!("ablation grid written to {}", cfg.out.display());
    Ok(())
}

/// Replaces one named loss hyperparameter.
fn with_param(loss: &LossConfig, param: &str, value: f64) -> Result<LossConfig> {
    let mut out = *loss;
    match param {
        "alpha" => out.alpha = value,
        "beta" => out.beta = value,
        "epsilon" => out.epsilon = value,
        "gamma" => out.gamma = value,
        other => {
            return Err(Error::Config {
                detail: format!(
                    "sweep param must be alpha, beta, epsilon, or gamma, got `{other}`"
                ),
            })
        }
    }
    out.validate()?;
    Ok(out)
}

/// Rejects fewer than two values and any repeated value.
fn check_sweep_values(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::Config {
            detail: format!("sweep needs at least two values, got {}", values.len()),
        });
    }
    let distinct: BTreeSet<u64> = values.iter().map(|v| v.to_bits()).collect();
    if distinct.len() != values.len() {
        return Err(Error::Config {
            detail: "sweep values contain a duplicate".to_string(),
        });
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut cfg = resolve("sweep", &args.run)?;
    let values = parse_f64_list(&args.values, "--values")?;
    check_sweep_values(&values)?;
    let base_loss = cfg.loss_config()?;
    // Validate every point before any training starts.
    for &v in &values {
        with_param(&base_loss, &args.param, v)?;
    }
    cfg.sweep = Some((args.param.clone(), values.clone()));
    let (tree, ds) = load_inputs(&cfg)?;
    let tcfg = cfg.train_config()?;
    let mcfg = cfg.model_config(ds.dim());
    let resolved = cfg.resolved_text();

    prepare_out_dir(&cfg.out, args.run.overwrite)?;
    std::fs::write(cfg.out.join("config.resolved"), &resolved)?;

    let rule = if base_loss.cost_loss {
        DecisionRule::Augmented
    } else {
        DecisionRule::Argmax
    };
    let mut csv = String::from("param,value,seed,rule,top1,mistake_severity,hier_dist1\n");
    for &value in &values {
        let loss = with_param(&base_loss, &args.param, value)?;
        for &seed in &tcfg.seeds {
            let (_, best) = train::fit(&tree, &ds, mcfg, &loss, &tcfg, seed)?;
            let mut session = best.restore(&tree)?;
            let report = session.evaluate(&ds, Split::Test)?;
            let fine = fine_level(&report, rule.as_str());
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                args.param,
                value,
                seed,
                rule.as_str(),
                fine.top1,
                fine.mistake_severity
                    .map_or_else(String::new, |s| s.to_string()),
                fine.hier_dist[&1],
            ));
        }
    }
    std::fs::write(cfg.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    println!("sweep written to {}", cfg.out.display());
    Ok(())
}
