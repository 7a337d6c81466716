//! Simulated data-parallel fine-tuning.
//!
//! `n` devices are partitioned into `K` groups. Every device owns a replica of
//! the parameters and optimizer state. Each step a device computes a gradient
//! payload on its shard of the batch, payloads are reduced over the
//! strategy's sync scope, and every device in the scope applies the same
//! update:
//!
//! * [`CommStrategy::FullSync`]: one scope containing every device.
//! * [`CommStrategy::GroupedSync`]: one scope per group, data sharded across
//!   all devices from a shared seed.
//! * [`CommStrategy::Independent`]: one scope per group, each group running
//!   its own stream with batch `b / K`.
//! * [`CommStrategy::LocalSgd`]: single-device scopes, parameters averaged
//!   across all devices every `period` steps.
//!
//! Reductions are exact (see [`crate::exact`]), so results do not depend on
//! the number of devices a scope is split over, on reduction order, or on
//! whether devices run on threads.

use std::f64::consts::PI;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_stream, shard_stream, Batch, Dataset, TaskBundle};
use crate::diversity::{mix_batches, DiversityConfig, MixedBatch, PairedObjective};
use crate::error::{Error, Result};
use crate::exact::exact_mean;
use crate::nn::{
    forward_with_ids, grad_payload, mix_seed, probabilities, CrossEntropy, GradPayload, Matrix, Mode,
    ParamVector,
};
use crate::stats::{accuracy, MetricRecord, Split};
use crate::weights::{ema_debias, ensemble_predict, evaluate, uniform_average, EmaState};

const STEP_SALT: u64 = 0x5354_4550;
const MIX_SALT: u64 = 0x4d49_5831;

/// Assignment of devices to groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyJson", into = "TopologyJson")]
pub struct Topology {
    num_devices: usize,
    num_groups: usize,
    group_of: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyJson {
    num_devices: usize,
    num_groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_of: Option<Vec<usize>>,
}

impl TryFrom<TopologyJson> for Topology {
    type Error = Error;

    fn try_from(t: TopologyJson) -> Result<Self> {
        match t.group_of {
            Some(map) => {
                let topo = Topology::with_groups(t.num_groups, map)?;
                if topo.num_devices != t.num_devices {
                    return Err(Error::InvalidConfig(format!(
                        "group_of lists {} devices, num_devices is {}",
                        topo.num_devices, t.num_devices
                    )));
                }
                Ok(topo)
            }
            None => Topology::new(t.num_devices, t.num_groups),
        }
    }
}

impl From<Topology> for TopologyJson {
    fn from(t: Topology) -> Self {
        let contiguous = Topology::new(t.num_devices, t.num_groups).ok();
        let group_of = if contiguous.as_ref() == Some(&t) {
            None
        } else {
            Some(t.group_of)
        };
        TopologyJson {
            num_devices: t.num_devices,
            num_groups: t.num_groups,
            group_of,
        }
    }
}

impl Topology {
    /// `num_devices` devices split into `num_groups` contiguous groups whose
    /// sizes differ by at most one.
    pub fn new(num_devices: usize, num_groups: usize) -> Result<Self> {
        if num_groups == 0 || num_groups > num_devices {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= groups <= devices, got {num_groups} groups for {num_devices} devices"
            )));
        }
        let group_of = (0..num_devices).map(|d| d * num_groups / num_devices).collect();
        Self::with_groups(num_groups, group_of)
    }

    /// Explicit device-to-group map; every group must be nonempty.
    pub fn with_groups(num_groups: usize, group_of: Vec<usize>) -> Result<Self> {
        let num_devices = group_of.len();
        if num_groups == 0 || num_groups > num_devices {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= groups <= devices, got {num_groups} groups for {num_devices} devices"
            )));
        }
        let mut sizes = vec![0usize; num_groups];
        for (d, &g) in group_of.iter().enumerate() {
            if g >= num_groups {
                return Err(Error::InvalidConfig(format!(
                    "device {d} assigned to group {g}, only {num_groups} groups"
                )));
            }
            sizes[g] += 1;
        }
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("group {g} has no devices")));
        }
        Ok(Self {
            num_devices,
            num_groups,
            group_of,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn group_of(&self, device: usize) -> usize {
        self.group_of[device]
    }

    /// Devices of each group in ascending order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_groups];
        for (d, &g) in self.group_of.iter().enumerate() {
            groups[g].push(d);
        }
        groups
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CommStrategy {
    /// Baseline: gradients averaged over every device each step.
    FullSync,
    /// Gradients averaged within each group; data sharded over all devices.
    GroupedSync,
    /// Each group trains on its own stream with batch `b / K`.
    Independent,
    /// Per-device steps, parameters averaged over all devices every `period`
    /// steps.
    LocalSgd { period: u64 },
}

impl CommStrategy {
    /// `LocalSgd { period: 1 }` becomes `FullSync`; every other strategy is
    /// returned unchanged.
    pub fn normalized(self) -> Self {
        match self {
            CommStrategy::LocalSgd { period: 1 } => CommStrategy::FullSync,
            s => s,
        }
    }

    pub fn name(self) -> String {
        match self {
            CommStrategy::FullSync => "full_sync".into(),
            CommStrategy::GroupedSync => "grouped_sync".into(),
            CommStrategy::Independent => "independent".into(),
            CommStrategy::LocalSgd { period } => format!("local_sgd_{period}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    SgdMomentum {
        momentum: f64,
    },
    #[serde(rename = "adamw")]
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd => true,
            OptimizerConfig::SgdMomentum { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && eps.is_finite()
                    && weight_decay >= 0.0
                    && weight_decay.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    CosinePerIteration,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub epochs: u64,
    pub global_batch: usize,
    pub optimizer: OptimizerConfig,
    pub drop_prob: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Examples drawn per epoch; defaults to the training set size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity: Option<DiversityConfig>,
    /// Decay rates of the weight EMAs to track.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ema_betas: Vec<f64>,
    /// Evaluate every this many epochs (epoch 0 and the last epoch always).
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

fn default_eval_every() -> u64 {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr_base must be positive, got {}", self.lr_base)));
        }
        if self.epochs == 0 || self.global_batch == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "epochs, global_batch and eval_every must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidConfig(format!("drop_prob must lie in [0, 1), got {}", self.drop_prob)));
        }
        if let Some(&b) = self.ema_betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidConfig(format!("EMA decay must lie in (0, 1), got {b}")));
        }
        self.optimizer.validate()
    }
}

/// Learning rate `lr_base (1 + cos(pi step / total_steps)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_base: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    lr_base * (1.0 + (PI * step as f64 / total as f64).cos()) / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerState {
    Sgd,
    Momentum { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

/// Parameters plus optimizer state of one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub params: ParamVector,
    pub optimizer: OptimizerConfig,
    pub state: OptimizerState,
}

impl WorkerState {
    pub fn new(params: ParamVector, optimizer: OptimizerConfig) -> Result<Self> {
        optimizer.validate()?;
        let n = params.len();
        let state = match optimizer {
            OptimizerConfig::Sgd => OptimizerState::Sgd,
            OptimizerConfig::SgdMomentum { .. } => OptimizerState::Momentum {
                velocity: vec![0.0; n],
            },
            OptimizerConfig::AdamW { .. } => OptimizerState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        };
        Ok(Self {
            params,
            optimizer,
            state,
        })
    }

    /// Applies one optimizer update with an already reduced gradient.
    pub fn apply(&mut self, grad: &ParamVector, lr: f64) -> Result<()> {
        self.params.check_same_layout(grad)?;
        if let Some((index, value)) = grad.first_non_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                index,
                value,
            });
        }
        let g = grad.values();
        let theta = self.params.values_mut();
        match (&mut self.state, self.optimizer) {
            (OptimizerState::Sgd, OptimizerConfig::Sgd) => {
                for (p, gi) in theta.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            (OptimizerState::Momentum { velocity }, OptimizerConfig::SgdMomentum { momentum }) => {
                for ((p, v), gi) in theta.iter_mut().zip(velocity.iter_mut()).zip(g) {
                    *v = momentum * *v + gi;
                    *p -= lr * *v;
                }
            }
            (
                OptimizerState::Adam { m, v, t },
                OptimizerConfig::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                },
            ) => {
                *t += 1;
                let c1 = 1.0 - beta1.powf(*t as f64);
                let c2 = 1.0 - beta2.powf(*t as f64);
                for i in 0..theta.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + weight_decay * theta[i];
                    theta[i] -= lr * update;
                }
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "optimizer state does not match optimizer config".into(),
                ))
            }
        }
        Ok(())
    }

    fn bitwise_eq(&self, other: &WorkerState) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        let state_eq = match (&self.state, &other.state) {
            (OptimizerState::Sgd, OptimizerState::Sgd) => true,
            (OptimizerState::Momentum { velocity: a }, OptimizerState::Momentum { velocity: b }) => same(a, b),
            (OptimizerState::Adam { m: m1, v: v1, t: t1 }, OptimizerState::Adam { m: m2, v: v2, t: t2 }) => {
                t1 == t2 && same(m1, m2) && same(v1, v2)
            }
            _ => false,
        };
        state_eq && same(self.params.values(), other.params.values())
    }
}

/// Cross-entropy gradient on `batch` followed by one optimizer update.
pub fn local_step(mut state: WorkerState, batch: &Batch, lr: f64, mode: Mode) -> Result<WorkerState> {
    let (_, grad) = crate::nn::loss_and_grad(&state.params, batch, mode)?;
    state.apply(&grad, lr)?;
    Ok(state)
}

/// Elementwise mean of gradients or parameters, exact and independent of
/// input order.
pub fn reduce_mean(vectors: &[ParamVector]) -> Result<ParamVector> {
    uniform_average(vectors)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Devices processed one after another in index order.
    Sequential,
    /// Devices processed on the rayon thread pool.
    #[default]
    Threaded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: u64,
    pub worker_id: String,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaResult {
    pub beta: f64,
    /// Debiased EMA of the running average of the worker models.
    pub merged: ParamVector,
    /// Debiased EMA of worker 0.
    pub worker0: ParamVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Final parameters of each sync scope's representative device: one per
    /// group for grouped strategies, one per device for local SGD, a single
    /// model for full sync.
    pub workers: Vec<ParamVector>,
    /// Uniform average of `workers`.
    pub merged: ParamVector,
    pub ema: Vec<EmaResult>,
    pub metrics: Vec<EpochMetric>,
    pub steps: u64,
    pub examples_seen: u64,
    /// Gradient or parameter reductions whose scope spans more than one group.
    pub cross_group_reductions: u64,
    /// Prediction exchanges between paired groups.
    pub cross_group_exchanges: u64,
    /// Digest of every representative's parameters after every step.
    pub trajectory: Vec<Vec<u64>>,
}

impl RunResult {
    pub fn metric_records(&self, run_id: &str) -> Vec<MetricRecord> {
        self.metrics
            .iter()
            .map(|m| MetricRecord {
                run_id: run_id.to_string(),
                epoch: m.epoch,
                worker_id: m.worker_id.clone(),
                split: m.split,
                metric: m.metric.clone(),
                value: m.value,
            })
            .collect()
    }

    pub fn metric(&self, epoch: u64, worker_id: &str, split: Split, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.epoch == epoch && m.worker_id == worker_id && m.split == split && m.metric == metric)
            .map(|m| m.value)
    }

    pub fn final_epoch(&self) -> u64 {
        self.metrics.iter().map(|m| m.epoch).max().unwrap_or(0)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fine-tunes on `task.finetune_train`, evaluating on the ID and OOD test
/// splits.
pub fn train(
    task: &TaskBundle,
    init: &ParamVector,
    config: &TrainConfig,
    topology: &Topology,
    strategy: CommStrategy,
) -> Result<RunResult> {
    Trainer::new(&task.finetune_train, init, config, topology, strategy)
        .eval_set(Split::TestId, &task.test_id)
        .eval_set(Split::TestOod, &task.test_ood)
        .run()
}

/// Configurable training run.
pub struct Trainer<'a> {
    train_set: &'a Dataset,
    init: &'a ParamVector,
    config: &'a TrainConfig,
    topology: &'a Topology,
    strategy: CommStrategy,
    evals: Vec<(Split, &'a Dataset)>,
    execution: Execution,
}

struct DeviceWork {
    batch: Batch,
    mixed: Option<MixedBatch>,
    partner_probs: Option<Matrix>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        train_set: &'a Dataset,
        init: &'a ParamVector,
        config: &'a TrainConfig,
        topology: &'a Topology,
        strategy: CommStrategy,
    ) -> Self {
        Self {
            train_set,
            init,
            config,
            topology,
            strategy: strategy.normalized(),
            evals: Vec::new(),
            execution: Execution::default(),
        }
    }

    pub fn eval_set(mut self, split: Split, data: &'a Dataset) -> Self {
        self.evals.push((split, data));
        self
    }

    pub fn execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    fn map<T: Send, R: Send>(&self, items: Vec<T>, f: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
        match self.execution {
            Execution::Sequential => items.into_iter().map(f).collect(),
            Execution::Threaded => items.into_par_iter().map(f).collect(),
        }
    }

    /// Sync scopes as lists of devices.
    fn scopes(&self) -> Vec<Vec<usize>> {
        match self.strategy {
            CommStrategy::FullSync => vec![(0..self.topology.num_devices()).collect()],
            CommStrategy::GroupedSync | CommStrategy::Independent => self.topology.groups(),
            CommStrategy::LocalSgd { .. } => (0..self.topology.num_devices()).map(|d| vec![d]).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.topology.num_devices();
        let b = self.config.global_batch;
        if !b.is_multiple_of(n) {
            return Err(Error::InvalidConfig(format!(
                "global batch {b} is not divisible by {n} devices"
            )));
        }
        if self.train_set.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let shape = self.init.shape()?;
        if shape.input_dim != self.train_set.inputs.cols || shape.num_classes != self.train_set.num_classes {
            return Err(Error::LayoutMismatch(format!(
                "network maps {} inputs to {} classes, data has {} inputs and {} classes",
                shape.input_dim, shape.num_classes, self.train_set.inputs.cols, self.train_set.num_classes
            )));
        }
        if let CommStrategy::LocalSgd { period: 0 } = self.strategy {
            return Err(Error::InvalidConfig("local SGD period must be >= 1".into()));
        }
        if self.strategy == CommStrategy::Independent {
            let k = self.topology.num_groups();
            if !b.is_multiple_of(k) {
                return Err(Error::InvalidConfig(format!(
                    "global batch {b} is not divisible by {k} groups"
                )));
            }
            for (g, members) in self.topology.groups().iter().enumerate() {
                if !(b / k).is_multiple_of(members.len()) {
                    return Err(Error::InvalidConfig(format!(
                        "group batch {} is not divisible by the {} devices of group {g}",
                        b / k,
                        members.len()
                    )));
                }
            }
        }
        if let Some(div) = &self.config.diversity {
            if !matches!(self.strategy, CommStrategy::GroupedSync | CommStrategy::Independent) {
                return Err(Error::InvalidConfig(
                    "diversity regularization needs a grouped strategy".into(),
                ));
            }
            div.validate(self.topology.num_groups())?;
            let groups = self.topology.groups();
            if groups.iter().any(|g| g.len() != groups[0].len()) {
                return Err(Error::InvalidConfig(
                    "diversity regularization needs equal group sizes".into(),
                ));
            }
        }
        Ok(())
    }

    /// Example ids of every device for every step of `epoch`.
    fn epoch_batches(&self, epoch: u64) -> Result<Vec<Vec<Vec<u64>>>> {
        let len = self.train_set.len();
        let samples = self.config.samples_per_epoch.unwrap_or(len);
        let stream = epoch_stream(len, samples, epoch, self.config.seed);
        let n = self.topology.num_devices();
        let b = self.config.global_batch;
        let mut out = vec![Vec::new(); n];
        if self.strategy == CommStrategy::Independent {
            let k = self.topology.num_groups();
            for (g, members) in self.topology.groups().iter().enumerate() {
                let group_batches = shard_stream(&stream, g, k, b / k)?;
                let m = members.len();
                for (j, &d) in members.iter().enumerate() {
                    out[d] = group_batches
                        .iter()
                        .map(|batch| batch.iter().skip(j).step_by(m).copied().collect())
                        .collect();
                }
            }
        } else {
            for (d, slot) in out.iter_mut().enumerate() {
                *slot = shard_stream(&stream, d, n, b / n)?;
            }
        }
        Ok(out)
    }

    fn evaluate_epoch(
        &self,
        epoch: u64,
        reps: &[&ParamVector],
        emas: &[(EmaState, EmaState)],
        metrics: &mut Vec<EpochMetric>,
    ) -> Result<()> {
        let merged = uniform_average(reps)?;
        let mut models: Vec<(String, ParamVector)> = reps
            .iter()
            .enumerate()
            .map(|(k, p)| (k.to_string(), (*p).clone()))
            .collect();
        models.push(("merged".into(), merged));
        for (merged_ema, worker_ema) in emas {
            if merged_ema.steps > 0 {
                let beta = merged_ema.beta;
                models.push((format!("ema{beta}_merged"), ema_debias(merged_ema)?));
                models.push((format!("ema{beta}_0"), ema_debias(worker_ema)?));
            }
        }
        for &(split, data) in &self.evals {
            let scores = self.map(models.iter().collect(), |(_, p)| evaluate(p, data))?;
            for ((id, _), (loss, acc)) in models.iter().zip(scores) {
                push_pair(metrics, epoch, id, split, acc, loss);
            }
            let probs = ensemble_predict(reps, &data.inputs)?;
            let acc = accuracy(&probs, &data.labels)?;
            let nll = (0..probs.rows)
                .map(|i| -probs.row(i)[data.labels[i]].max(f64::MIN_POSITIVE).ln())
                .sum::<f64>()
                / probs.rows as f64;
            push_pair(metrics, epoch, "ensemble", split, acc, nll);
        }
        Ok(())
    }

    fn device_work(
        &self,
        step: u64,
        ids: &[&Vec<u64>],
        states: &[WorkerState],
        mode: Mode,
    ) -> Result<(Vec<DeviceWork>, u64)> {
        let mut work: Vec<DeviceWork> = ids
            .iter()
            .map(|ids| DeviceWork {
                batch: self.train_set.batch(ids),
                mixed: None,
                partner_probs: None,
            })
            .collect();
        let Some(div) = &self.config.diversity else {
            return Ok((work, 0));
        };
        let groups = self.topology.groups();
        let partners = div.partners(groups.len())?;
        let mut exchanges = 0;
        for (a, &b) in partners.iter().enumerate() {
            if b < a {
                continue;
            }
            exchanges += 1;
            for (j, (&da, &db)) in groups[a].iter().zip(&groups[b]).enumerate() {
                let seed = mix_seed(&[self.config.seed, MIX_SALT, step, a as u64, j as u64]);
                let mixed = mix_batches(&work[da].batch, &work[db].batch, div.mix, seed)?;
                let probs_a = probabilities(&forward_with_ids(&states[da].params, &mixed.inputs, &mixed.ids, mode)?);
                let probs_b = probabilities(&forward_with_ids(&states[db].params, &mixed.inputs, &mixed.ids, mode)?);
                work[da].mixed = Some(mixed.clone());
                work[da].partner_probs = Some(probs_b);
                work[db].mixed = Some(mixed);
                work[db].partner_probs = Some(probs_a);
            }
        }
        Ok((work, exchanges))
    }

    pub fn run(&self) -> Result<RunResult> {
        self.validate()?;
        let config = self.config;
        let scopes = self.scopes();
        let n = self.topology.num_devices();
        let spans_groups: Vec<bool> = scopes
            .iter()
            .map(|s| s.iter().any(|&d| self.topology.group_of(d) != self.topology.group_of(s[0])))
            .collect();
        let all_devices_span = self.topology.num_groups() > 1;

        let mut states: Vec<WorkerState> = (0..n)
            .map(|_| WorkerState::new(self.init.clone(), config.optimizer))
            .collect::<Result<_>>()?;
        let mut emas: Vec<(EmaState, EmaState)> = config
            .ema_betas
            .iter()
            .map(|&beta| Ok((EmaState::new(beta, self.init)?, EmaState::new(beta, self.init)?)))
            .collect::<Result<_>>()?;

        let steps_per_epoch = self.epoch_batches(0)?[0].len() as u64;
        let total_steps = steps_per_epoch * config.epochs;
        let mut metrics = Vec::new();
        let mut trajectory = Vec::with_capacity(total_steps as usize);
        let mut examples_seen = 0u64;
        let mut cross_group_reductions = 0u64;
        let mut cross_group_exchanges = 0u64;
        let mut step = 0u64;

        {
            let reps: Vec<&ParamVector> = scopes.iter().map(|s| &states[s[0]].params).collect();
            self.evaluate_epoch(0, &reps, &emas, &mut metrics)?;
        }

        for epoch in 1..=config.epochs {
            let batches = self.epoch_batches(epoch)?;
            let mut loss_sums = vec![0.0; scopes.len()];
            for t in 0..steps_per_epoch as usize {
                let lr = match config.lr_schedule {
                    LrSchedule::CosinePerIteration => cosine_lr(step, total_steps, config.lr_base),
                    LrSchedule::Constant => config.lr_base,
                };
                let mode = Mode::Train {
                    drop_prob: config.drop_prob,
                    seed: mix_seed(&[config.seed, STEP_SALT, step]),
                };
                let ids: Vec<&Vec<u64>> = batches.iter().map(|b| &b[t]).collect();
                let (work, exchanges) = self.device_work(step, &ids, &states, mode)?;
                cross_group_exchanges += exchanges;

                let lambda = config.diversity.as_ref().map_or(0.0, |d| d.lambda);
                let payloads: Vec<GradPayload> = self.map(states.iter().zip(&work).collect(), |(state, w)| {
                    match (&w.mixed, &w.partner_probs) {
                        (Some(mixed), Some(probs)) => grad_payload(
                            &state.params,
                            &mixed.inputs,
                            &mixed.ids,
                            mode,
                            &PairedObjective {
                                batch: mixed,
                                partner_probs: probs,
                                lambda,
                            },
                        ),
                        _ => grad_payload(
                            &state.params,
                            &w.batch.inputs,
                            &w.batch.ids,
                            mode,
                            &CrossEntropy(&w.batch.labels),
                        ),
                    }
                })?;
                examples_seen += payloads.iter().map(|p| p.count).sum::<u64>();

                let reduced: Vec<(f64, ParamVector)> = self.map(scopes.iter().collect(), |scope| {
                    GradPayload::reduce(scope.iter().map(|&d| &payloads[d]))?.finish()
                })?;
                let mut device_grad: Vec<Option<&ParamVector>> = vec![None; n];
                for (s, scope) in scopes.iter().enumerate() {
                    loss_sums[s] += reduced[s].0;
                    if spans_groups[s] {
                        cross_group_reductions += 1;
                    }
                    for &d in scope {
                        device_grad[d] = Some(&reduced[s].1);
                    }
                }
                states = self.map(states.into_iter().zip(device_grad).collect(), |(mut state, grad)| {
                    state.apply(grad.expect("every device belongs to a scope"), lr)?;
                    Ok(state)
                })?;

                if let CommStrategy::LocalSgd { period } = self.strategy {
                    if (step + 1).is_multiple_of(period) {
                        let slices: Vec<&[f64]> = states.iter().map(|s| s.params.values()).collect();
                        let avg = states[0].params.with_values(exact_mean(&slices)?);
                        for s in &mut states {
                            s.params = avg.clone();
                        }
                        if all_devices_span {
                            cross_group_reductions += 1;
                        }
                    }
                }

                for (s, scope) in scopes.iter().enumerate() {
                    if let Some(&d) = scope.iter().find(|&&d| !states[d].bitwise_eq(&states[scope[0]])) {
                        return Err(Error::Divergence(format!(
                            "device {d} diverged from device {} of its sync scope {s} at step {step}",
                            scope[0]
                        )));
                    }
                }

                let reps: Vec<&ParamVector> = scopes.iter().map(|s| &states[s[0]].params).collect();
                trajectory.push(reps.iter().map(|p| p.digest()).collect());
                if !emas.is_empty() {
                    let avg = uniform_average(&reps)?;
                    for (merged_ema, worker_ema) in &mut emas {
                        merged_ema.update(&avg)?;
                        worker_ema.update(reps[0])?;
                    }
                }
                step += 1;
            }

            for (s, sum) in loss_sums.iter().enumerate() {
                metrics.push(EpochMetric {
                    epoch,
                    worker_id: s.to_string(),
                    split: Split::Train,
                    metric: "loss".into(),
                    value: sum / steps_per_epoch.max(1) as f64,
                });
            }
            if epoch % config.eval_every == 0 || epoch == config.epochs {
                let reps: Vec<&ParamVector> = scopes.iter().map(|s| &states[s[0]].params).collect();
                self.evaluate_epoch(epoch, &reps, &emas, &mut metrics)?;
            }
        }

        let workers: Vec<ParamVector> = scopes.iter().map(|s| states[s[0]].params.clone()).collect();
        let merged = uniform_average(&workers)?;
        let ema = emas
            .iter()
            .map(|(m, w)| {
                Ok(EmaResult {
                    beta: m.beta,
                    merged: if m.steps > 0 { ema_debias(m)? } else { merged.clone() },
                    worker0: if w.steps > 0 { ema_debias(w)? } else { workers[0].clone() },
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunResult {
            workers,
            merged,
            ema,
            metrics,
            steps: step,
            examples_seen,
            cross_group_reductions,
            cross_group_exchanges,
            trajectory,
        })
    }
}

fn push_pair(metrics: &mut Vec<EpochMetric>, epoch: u64, id: &str, split: Split, acc: f64, loss: f64) {
    for (metric, value) in [("accuracy", acc), ("loss", loss)] {
        metrics.push(EpochMetric {
            epoch,
            worker_id: id.to_string(),
            split,
            metric: metric.into(),
            value,
        });
    }
}
