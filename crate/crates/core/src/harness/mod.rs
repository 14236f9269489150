//! Transfer and continual evaluation over method x task x seed grids.

mod curve;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use curve::{accuracy_at_flops, matched_budgets, tradeoff_curves, CurvePoint, TradeoffCurve};

use crate::data::{Dataset, StreamData, TaskData, TaskSpec};
use crate::error::{Error, Result};
use crate::flops::{training_step_flops, Granularity};
use crate::model::{
    attach_adapters, freeze_blocks, replace_head, surgery, truncate_blocks, Model, ModelSpec, TrainabilityConfig,
};
use crate::optim::Sgd;
use crate::par;
use crate::prune::{prune, PruningPlan, Signal};
use crate::rng::{self, derive_seed, name_hash};
use crate::train::{evaluate, train_step};

const EVAL_BATCH: usize = 250;
const HEAD_STREAM: u64 = 0x4845_4144;
const ORDER_STREAM: u64 = 0x4f52_4452;
const PRUNE_STREAM: u64 = 0x5052_554e;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::OutOfRange { what: "lr", value: self.lr.to_string(), allowed: "> 0" });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::OutOfRange {
                what: "momentum",
                value: self.momentum.to_string(),
                allowed: "[0, 1)",
            });
        }
        if self.batch_size == 0 {
            return Err(Error::OutOfRange { what: "batch_size", value: "0".into(), allowed: ">= 1" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodBase {
    DenseFinetune,
    Pruned(PruningPlan),
    /// Train blocks `X..=3` and the head.
    FtBlock(usize),
    /// Keep blocks `0..X`, train everything.
    Truncate(usize),
    Adapters,
}

impl MethodBase {
    pub fn default_name(&self) -> String {
        match self {
            MethodBase::DenseFinetune => "dense_finetune".into(),
            MethodBase::Pruned(p) => format!("pruned_{}", p.label()),
            MethodBase::FtBlock(x) => surgery::ft_block_name(*x),
            MethodBase::Truncate(x) => surgery::truncate_name(*x),
            MethodBase::Adapters => surgery::ADAPTER_NAME.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub name: String,
    pub base: MethodBase,
    pub optim: OptimConfig,
}

impl MethodConfig {
    pub fn new(base: MethodBase) -> Self {
        Self {
            name: base.default_name(),
            base,
            optim: OptimConfig::default(),
        }
    }

    pub fn with_optim(mut self, optim: OptimConfig) -> Self {
        self.optim = optim;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Transfer,
    Continual,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::Transfer => "transfer",
            Protocol::Continual => "continual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub protocol: Protocol,
    /// Training-step counts at which every cell is evaluated.
    pub budget_grid: Vec<usize>,
    /// Extra evaluation every this many steps (0: budgets only).
    pub eval_every: usize,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget_grid.is_empty() || !self.budget_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidSpec("budget_grid must be non-empty and strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidSpec("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Sorted evaluation steps: the budget grid plus every multiple of
    /// `eval_every` up to the largest budget.
    pub fn checkpoints(&self) -> Vec<usize> {
        let max = self.budget_grid.last().copied().unwrap_or(0);
        let mut steps: BTreeSet<usize> = self.budget_grid.iter().copied().collect();
        if self.eval_every > 0 {
            steps.extend((1..=max / self.eval_every).map(|k| k * self.eval_every));
        }
        steps.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub protocol: Protocol,
    pub method: String,
    /// Empty for unpruned methods.
    pub granularity: String,
    pub signal: String,
    /// Per-step training FLOPs relative to dense finetuning.
    pub flop_fraction: f64,
    pub task_id: String,
    pub task_kind: String,
    pub seed: u64,
    pub step: usize,
    pub train_flops_cum: u64,
    pub eval_accuracy: f64,
    pub status: String,
}

pub const STATUS_OK: &str = "ok";
pub const STATUS_FAILED: &str = "failed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub model: Model,
    pub test_accuracy: f64,
}

/// Endless epoch-shuffled index stream over `n` examples. Depends only on
/// the seed, so every method sees the same batches.
struct BatchOrder {
    rng: rand_chacha::ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: rng::rng(seed, &[]),
            perm: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.perm.len() {
                    self.perm.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.perm[self.pos - 1]
            })
            .collect()
    }
}

/// Trains a fresh model on the pretraining task.
pub fn pretrain(task: &TaskData, spec: &ModelSpec, config: &PretrainConfig) -> Result<Pretrained> {
    config.optim.validate()?;
    let mut spec = spec.clone();
    spec.head_classes = task.spec.n_classes;
    let mut model = Model::build(&spec, config.seed)?;
    let train = TrainabilityConfig::full(&model);
    let mut opt = Sgd::new(config.optim.lr, config.optim.momentum);
    let batch = config.optim.batch_size.min(task.train.len());
    let mut order = BatchOrder::new(task.train.len(), derive_seed(config.seed, &[ORDER_STREAM]));
    for step in 0..config.steps {
        let (x, y) = task.train.batch(&order.next(batch))?;
        train_step(&mut model, &train, &mut opt, &x, &y, step)?;
    }
    let test_accuracy = evaluate(&model, &task.test.images, &task.test.labels, EVAL_BATCH)?;
    Ok(Pretrained { model, test_accuracy })
}

fn head_seed(seed: u64, task: &TaskSpec) -> u64 {
    derive_seed(seed, &[HEAD_STREAM, name_hash(&task.task_id)])
}

/// A method applied to a pretrained model, before any downstream data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: Model,
    pub train: TrainabilityConfig,
    pub plan: Option<PruningPlan>,
}

/// Applies `method` zero-shot. Pruning seeds mix the plan seed with the run
/// seed so random-signal runs differ across seeds.
pub fn prepare(pretrained: &Model, method: &MethodConfig, seed: u64, task: &TaskSpec) -> Result<Prepared> {
    let classes = task.n_classes;
    let head_seed = head_seed(seed, task);
    let (model, train, plan) = match method.base {
        MethodBase::DenseFinetune => (pretrained.clone(), None, None),
        MethodBase::Pruned(plan) => {
            let plan = plan.with_seed(derive_seed(plan.seed, &[PRUNE_STREAM, seed]));
            let r = prune(pretrained, &plan)?;
            let model = r.compacted_model.unwrap_or(r.masked_model);
            (model, None, Some(plan))
        }
        MethodBase::FtBlock(x) => (pretrained.clone(), Some(freeze_blocks(pretrained, x)?), None),
        MethodBase::Truncate(x) => {
            let (m, t) = truncate_blocks(pretrained, x, classes, head_seed)?;
            (m, Some(t), None)
        }
        MethodBase::Adapters => {
            let (m, t) = attach_adapters(pretrained)?;
            (m, Some(t), None)
        }
    };
    let model = replace_head(&model, classes, head_seed)?;
    let train = train.unwrap_or_else(|| TrainabilityConfig::full(&model));
    train.validate_for(&model)?;
    Ok(Prepared { model, train, plan })
}

/// Fixed per-(method, seed) record fields.
struct CellInfo<'a> {
    protocol: Protocol,
    method: &'a MethodConfig,
    plan: Option<PruningPlan>,
    flop_fraction: f64,
    seed: u64,
}

impl CellInfo<'_> {
    fn record(&self, task: &TaskData, step: usize, flops: u64, accuracy: f64, status: &str) -> RunRecord {
        RunRecord {
            run_id: format!("{}-{}-s{}", self.method.name, task.spec.task_id, self.seed),
            protocol: self.protocol,
            method: self.method.name.clone(),
            granularity: self.plan.map(|p| p.granularity.as_str().to_string()).unwrap_or_default(),
            signal: self.plan.map(|p| p.signal.as_str().to_string()).unwrap_or_default(),
            flop_fraction: self.flop_fraction,
            task_id: task.spec.task_id.clone(),
            task_kind: task.spec.kind.as_str().to_string(),
            seed: self.seed,
            step,
            train_flops_cum: flops,
            eval_accuracy: accuracy,
            status: status.to_string(),
        }
    }
}

/// Finetunes on one task, evaluating at `checkpoints`. Returns the records
/// and the FLOPs spent.
fn finetune(
    model: &mut Model,
    train: &TrainabilityConfig,
    optim: &OptimConfig,
    task: &TaskData,
    seed: u64,
    checkpoints: &[usize],
    flops_before: u64,
    info: &CellInfo<'_>,
) -> Result<(Vec<RunRecord>, u64)> {
    let batch = optim.batch_size.min(task.train.len());
    let step_flops = training_step_flops(model, train, batch)?;
    let mut opt = Sgd::new(optim.lr, optim.momentum);
    let mut order = BatchOrder::new(
        task.train.len(),
        derive_seed(seed, &[ORDER_STREAM, name_hash(&task.spec.task_id)]),
    );
    let eval = |m: &Model, d: &Dataset| evaluate(m, &d.images, &d.labels, EVAL_BATCH);
    let mut records = Vec::with_capacity(checkpoints.len());
    let mut step = 0;
    for &target in checkpoints {
        while step < target {
            let (x, y) = task.train.batch(&order.next(batch))?;
            let stats = train_step(model, train, &mut opt, &x, &y, step)?;
            debug_assert_eq!(stats.executed_flops, step_flops);
            step += 1;
        }
        let flops = flops_before + step as u64 * step_flops;
        records.push(info.record(task, step, flops, eval(model, &task.test)?, STATUS_OK));
    }
    Ok((records, flops_before + step as u64 * step_flops))
}

fn flop_fraction(prepared: &Prepared, pretrained: &Model, classes: usize, batch: usize) -> Result<f64> {
    let dense = replace_head(pretrained, classes, 0)?;
    let d = training_step_flops(&dense, &TrainabilityConfig::full(&dense), batch)?;
    let m = training_step_flops(&prepared.model, &prepared.train, batch)?;
    Ok(m as f64 / d as f64)
}

fn failed(info: &CellInfo<'_>, task: &TaskData, err: &Error) -> RunRecord {
    log::warn!("{} on {} seed {} failed: {err}", info.method.name, task.spec.task_id, info.seed);
    info.record(task, 0, 0, f64::NAN, STATUS_FAILED)
}

fn transfer_cell(
    pretrained: &Model,
    method: &MethodConfig,
    task: &TaskData,
    seed: u64,
    config: &RunConfig,
) -> Vec<RunRecord> {
    let classes = task.spec.n_classes;
    let mut info = CellInfo {
        protocol: Protocol::Transfer,
        method,
        plan: match method.base {
            MethodBase::Pruned(p) => Some(p),
            _ => None,
        },
        flop_fraction: f64::NAN,
        seed,
    };
    let run = |info: &mut CellInfo<'_>| -> Result<Vec<RunRecord>> {
        method.optim.validate()?;
        let mut prepared = prepare(pretrained, method, seed, &task.spec)?;
        info.flop_fraction = flop_fraction(&prepared, pretrained, classes, method.optim.batch_size.min(task.train.len()))?;
        let (records, _) = finetune(
            &mut prepared.model,
            &prepared.train,
            &method.optim,
            task,
            seed,
            &config.checkpoints(),
            0,
            info,
        )?;
        Ok(records)
    };
    run(&mut info).unwrap_or_else(|e| vec![failed(&info, task, &e)])
}

fn continual_cell(
    pretrained: &Model,
    method: &MethodConfig,
    tasks: &[TaskData],
    seed: u64,
    config: &RunConfig,
) -> Vec<RunRecord> {
    let mut info = CellInfo {
        protocol: Protocol::Continual,
        method,
        plan: match method.base {
            MethodBase::Pruned(p) => Some(p),
            _ => None,
        },
        flop_fraction: f64::NAN,
        seed,
    };
    let mut out = Vec::new();
    let Some(first) = tasks.first() else { return out };
    // surgery and pruning happen once, before the first task
    let mut prepared = match method.optim.validate().and_then(|_| prepare(pretrained, method, seed, &first.spec)) {
        Ok(p) => p,
        Err(e) => return tasks.iter().map(|t| failed(&info, t, &e)).collect(),
    };
    let mut flops = 0;
    for (k, task) in tasks.iter().enumerate() {
        let mut step = || -> Result<(Vec<RunRecord>, u64)> {
            let classes = task.spec.n_classes;
            if k > 0 {
                prepared.model = replace_head(&prepared.model, classes, head_seed(seed, &task.spec))?;
            }
            let batch = method.optim.batch_size.min(task.train.len());
            info.flop_fraction = flop_fraction(&prepared, pretrained, classes, batch)?;
            finetune(
                &mut prepared.model,
                &prepared.train,
                &method.optim,
                task,
                seed,
                &config.checkpoints(),
                flops,
                &info,
            )
        };
        match step() {
            Ok((records, total)) => {
                out.extend(records);
                flops = total;
            }
            Err(e) => {
                // later tasks have no valid starting point
                out.extend(tasks[k..].iter().map(|t| failed(&info, t, &e)));
                break;
            }
        }
    }
    out
}

/// Deterministic record order: method, task, seed, step.
pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| {
        (a.protocol, &a.method, &a.task_id, a.seed, a.step).cmp(&(b.protocol, &b.method, &b.task_id, b.seed, b.step))
    });
}

/// Each downstream task is finetuned independently from `pretrained`.
pub fn run_transfer(
    pretrained: &Model,
    stream: &StreamData,
    methods: &[MethodConfig],
    config: &RunConfig,
) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let tasks = &stream.downstream;
    let cells: Vec<(usize, usize, u64)> = (0..methods.len())
        .flat_map(|m| (0..tasks.len()).flat_map(move |t| config.seeds.iter().map(move |&s| (m, t, s))))
        .collect();
    let mut records: Vec<RunRecord> = par::map(cells.len(), |i| {
        let (m, t, s) = cells[i];
        transfer_cell(pretrained, &methods[m], &tasks[t], s, config)
    })
    .into_iter()
    .flatten()
    .collect();
    sort_records(&mut records);
    Ok(records)
}

/// Tasks are visited in stream order, each starting from the previous
/// task's final weights with a fresh head; FLOPs accumulate across tasks.
pub fn run_continual(
    pretrained: &Model,
    stream: &StreamData,
    methods: &[MethodConfig],
    config: &RunConfig,
) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let cells: Vec<(usize, u64)> = (0..methods.len())
        .flat_map(|m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let mut records: Vec<RunRecord> = par::map(cells.len(), |i| {
        let (m, s) = cells[i];
        continual_cell(pretrained, &methods[m], &stream.downstream, s, config)
    })
    .into_iter()
    .flatten()
    .collect();
    sort_records(&mut records);
    Ok(records)
}

pub fn run(
    pretrained: &Model,
    stream: &StreamData,
    methods: &[MethodConfig],
    config: &RunConfig,
) -> Result<Vec<RunRecord>> {
    match config.protocol {
        Protocol::Transfer => run_transfer(pretrained, stream, methods, config),
        Protocol::Continual => run_continual(pretrained, stream, methods, config),
    }
}

/// Method label helpers for plans built in code.
pub fn pruned_method(granularity: Granularity, signal: Signal, target: f64) -> MethodConfig {
    MethodConfig::new(MethodBase::Pruned(PruningPlan::new(granularity, signal, target)))
}
