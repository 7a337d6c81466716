//! Per-iteration and end-to-end time model for multi-node training.
//!
//! One iteration is a forward pass followed by the backward pass of layers
//! `L..1` on a compute resource. Gradients are grouped into buckets of
//! contiguous layers; a bucket becomes ready for the network once the
//! backward of all its layers is done, and the network sends ready buckets
//! one at a time in FIFO order. Sending a bucket of `B` bytes takes
//! `latency + B / bandwidth`.
//!
//! Without overlap the network starts only after the whole backward pass.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{CommStrategy, Topology};
use crate::error::{Error, Result};
use crate::nn::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCost {
    /// Seconds of backward compute.
    pub backward_compute_time: f64,
    pub gradient_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    #[serde(default)]
    pub id: String,
    /// Layers in forward order; the backward pass visits them in reverse.
    pub layers: Vec<LayerCost>,
    pub forward_time: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    pub latency_per_message: f64,
    /// Upper bound on bucket size; `None` puts every layer in its own bucket.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_bytes: Option<u64>,
}

impl CostProfile {
    pub fn validate(&self) -> Result<()> {
        let bad_time = |t: f64| !(t >= 0.0 && t.is_finite());
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig(format!("profile {:?} has no layers", self.id)));
        }
        if bad_time(self.forward_time)
            || bad_time(self.latency_per_message)
            || self.layers.iter().any(|l| bad_time(l.backward_compute_time))
        {
            return Err(Error::InvalidConfig(format!(
                "profile {:?}: times must be finite and >= 0",
                self.id
            )));
        }
        if self.bandwidth.is_nan() || self.bandwidth <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "profile {:?}: bandwidth must be positive",
                self.id
            )));
        }
        if self.bucket_bytes == Some(0) {
            return Err(Error::InvalidConfig(format!(
                "profile {:?}: bucket_bytes must be positive",
                self.id
            )));
        }
        Ok(())
    }

    pub fn comm_time(&self, bytes: u64) -> f64 {
        self.latency_per_message + bytes as f64 / self.bandwidth
    }

    pub fn total_compute(&self) -> f64 {
        self.forward_time + self.layers.iter().map(|l| l.backward_compute_time).sum::<f64>()
    }

    pub fn total_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.gradient_bytes).sum()
    }

    /// Buckets in the order they become ready, as lists of layer indices
    /// (backward order) and their total bytes.
    pub fn buckets(&self) -> Vec<(Vec<usize>, u64)> {
        let mut out: Vec<(Vec<usize>, u64)> = Vec::new();
        for layer in (0..self.layers.len()).rev() {
            let bytes = self.layers[layer].gradient_bytes;
            match (out.last_mut(), self.bucket_bytes) {
                (Some((layers, total)), Some(cap)) if *total + bytes <= cap => {
                    layers.push(layer);
                    *total += bytes;
                }
                _ => out.push((vec![layer], bytes)),
            }
        }
        out
    }

    /// Compute times multiplied by `factor`, bytes unchanged: the profile of a
    /// per-device batch `factor` times larger.
    pub fn scaled(&self, factor: f64) -> CostProfile {
        let mut p = self.clone();
        p.forward_time *= factor;
        for l in &mut p.layers {
            l.backward_compute_time *= factor;
        }
        p
    }

    pub fn load_json(path: &Path) -> Result<Vec<CostProfile>> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let profiles: Vec<CostProfile> = match value {
            serde_json::Value::Array(_) => serde_json::from_value(value)?,
            serde_json::Value::Object(ref map) if map.contains_key("profiles") => {
                serde_json::from_value(map["profiles"].clone())?
            }
            other => vec![serde_json::from_value(other)?],
        };
        for p in &profiles {
            p.validate()?;
        }
        Ok(profiles)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    CrossNode,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Compute,
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub resource: Resource,
    pub label: String,
    pub start: f64,
    pub end: f64,
}

/// Event trace of one iteration, in start order per resource.
pub fn simulate_trace(profile: &CostProfile, overlap: bool, sync: SyncMode) -> Vec<Event> {
    let mut events = Vec::new();
    let mut t = profile.forward_time;
    if profile.forward_time > 0.0 {
        events.push(Event {
            resource: Resource::Compute,
            label: "forward".into(),
            start: 0.0,
            end: t,
        });
    }
    let mut done = vec![0.0; profile.layers.len()];
    for layer in (0..profile.layers.len()).rev() {
        let start = t;
        t += profile.layers[layer].backward_compute_time;
        done[layer] = t;
        events.push(Event {
            resource: Resource::Compute,
            label: format!("backward{}", layer + 1),
            start,
            end: t,
        });
    }
    if sync == SyncMode::None {
        return events;
    }
    let compute_end = t;
    let mut network_free = 0.0f64;
    for (layers, bytes) in profile.buckets() {
        let ready = if overlap {
            layers.iter().map(|&l| done[l]).fold(0.0, f64::max)
        } else {
            compute_end
        };
        let start = network_free.max(ready);
        let end = start + profile.comm_time(bytes);
        network_free = end;
        let names: Vec<String> = layers.iter().map(|l| (l + 1).to_string()).collect();
        events.push(Event {
            resource: Resource::Network,
            label: format!("allreduce{}", names.join("+")),
            start,
            end,
        });
    }
    events
}

/// Seconds for one iteration.
pub fn simulate_iteration(profile: &CostProfile, overlap: bool, sync: SyncMode) -> f64 {
    simulate_trace(profile, overlap, sync)
        .iter()
        .map(|e| e.end)
        .fold(0.0, f64::max)
}

/// `100 (t_multi - t_single) / t_single`.
pub fn overhead_percent(t_multi: f64, t_single: f64) -> f64 {
    100.0 * (t_multi - t_single) / t_single
}

/// Overhead of adding cross-node gradient sync to one iteration.
pub fn iteration_overhead(profile: &CostProfile, overlap: bool) -> f64 {
    overhead_percent(
        simulate_iteration(profile, overlap, SyncMode::CrossNode),
        simulate_iteration(profile, overlap, SyncMode::None),
    )
}

/// Per-node, per-iteration slowdown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum JitterSpec {
    None,
    /// Slowdown `max(1, exp(N(mu, sigma^2)))`.
    Lognormal { mu: f64, sigma: f64 },
    /// Node `node` is always `factor` times slower.
    FixedStraggler { node: usize, factor: f64 },
}

impl JitterSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            JitterSpec::Lognormal { mu, sigma } if !(mu.is_finite() && sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidConfig(format!("invalid lognormal jitter ({mu}, {sigma})")))
            }
            JitterSpec::FixedStraggler { factor, .. } if !(factor >= 1.0 && factor.is_finite()) => {
                Err(Error::InvalidConfig(format!("straggler factor must be >= 1, got {factor}")))
            }
            _ => Ok(()),
        }
    }

    /// Slowdown factors `[iteration][node]`.
    pub fn sample(&self, iterations: u64, nodes: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut out = vec![vec![1.0; nodes]; iterations as usize];
        match *self {
            JitterSpec::None => {}
            JitterSpec::FixedStraggler { node, factor } => {
                for row in &mut out {
                    if let Some(f) = row.get_mut(node) {
                        *f = factor;
                    }
                }
            }
            JitterSpec::Lognormal { mu, sigma } => {
                let dist = LogNormal::new(mu, sigma)
                    .map_err(|e| Error::InvalidConfig(format!("lognormal jitter: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x6a17]));
                for row in &mut out {
                    for f in row.iter_mut() {
                        *f = dist.sample(&mut rng).max(1.0);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Seconds to send the full parameter vector once.
pub fn final_reduce_time(profile: &CostProfile) -> f64 {
    profile.comm_time(profile.total_bytes())
}

/// Run time of `iterations` steps on `topology.num_devices()` nodes.
///
/// * FullSync: every iteration waits for the slowest node, then syncs.
/// * GroupedSync and Independent: groups never wait for each other; each
///   group's iteration waits for its slowest member and syncs only inside
///   the group. Total is the slowest group plus one final reduce.
/// * LocalSgd: nodes run unsynchronized for `period` steps, then exchange
///   parameters; each window lasts as long as its slowest node.
pub fn simulate_run_time(
    profile: &CostProfile,
    jitter: &JitterSpec,
    strategy: CommStrategy,
    topology: &Topology,
    iterations: u64,
    seed: u64,
    overlap: bool,
) -> Result<f64> {
    profile.validate()?;
    if iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be >= 1".into()));
    }
    let n = topology.num_devices();
    let factors = jitter.sample(iterations, n, seed)?;
    let iteration = |factor: f64, sync: SyncMode| simulate_iteration(&profile.scaled(factor), overlap, sync);
    let slowest = |row: &[f64], nodes: &[usize]| nodes.iter().map(|&d| row[d]).fold(1.0, f64::max);
    match strategy.normalized() {
        CommStrategy::FullSync => {
            let all: Vec<usize> = (0..n).collect();
            let sync = if n > 1 { SyncMode::CrossNode } else { SyncMode::None };
            Ok(factors.iter().map(|row| iteration(slowest(row, &all), sync)).sum())
        }
        CommStrategy::GroupedSync | CommStrategy::Independent => {
            let groups = topology.groups();
            let longest = groups
                .iter()
                .map(|g| {
                    let sync = if g.len() > 1 { SyncMode::CrossNode } else { SyncMode::None };
                    factors.iter().map(|row| iteration(slowest(row, g), sync)).sum::<f64>()
                })
                .fold(0.0, f64::max);
            let merge = if groups.len() > 1 { final_reduce_time(profile) } else { 0.0 };
            Ok(longest + merge)
        }
        CommStrategy::LocalSgd { period } => {
            if period == 0 {
                return Err(Error::InvalidConfig("local SGD period must be >= 1".into()));
            }
            let step = iteration(1.0, SyncMode::None);
            let mut total = 0.0;
            for window in factors.chunks(period as usize) {
                let longest = (0..n)
                    .map(|d| window.iter().map(|row| row[d] * step).sum::<f64>())
                    .fold(0.0, f64::max);
                total += longest;
                if n > 1 {
                    total += final_reduce_time(profile);
                }
            }
            Ok(total)
        }
    }
}

/// Queue-wait table keyed by node count, plus a run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEstimate {
    /// Seconds of queue wait for a job of the given number of nodes.
    pub queue_wait: BTreeMap<usize, f64>,
    pub run_time: f64,
}

impl ScheduleEstimate {
    pub fn wait(&self, nodes: usize) -> Result<f64> {
        self.queue_wait
            .get(&nodes)
            .copied()
            .ok_or(Error::MissingQueueWait(nodes))
    }
}

/// Default wait table: about 45 minutes for one node, 2 hours for 2 to 4
/// nodes and 3 hours for 8 nodes. Illustrative only.
pub fn default_queue_wait() -> BTreeMap<usize, f64> {
    BTreeMap::from([(1, 2700.0), (2, 7200.0), (3, 7200.0), (4, 7200.0), (8, 10800.0)])
}

/// Wait for one `nodes`-node job, then run.
pub fn time_to_result(estimate: &ScheduleEstimate, nodes: usize) -> Result<f64> {
    Ok(estimate.wait(nodes)? + estimate.run_time)
}

/// Groups submitted as separate `group_nodes`-node jobs. With `wait_samples`
/// (one sampled wait per group) the slowest sample is used; otherwise every
/// group waits the table value.
pub fn time_to_result_independent(
    estimate: &ScheduleEstimate,
    group_nodes: usize,
    wait_samples: Option<&[f64]>,
) -> Result<f64> {
    let wait = match wait_samples {
        Some(samples) if !samples.is_empty() => {
            if let Some(bad) = samples.iter().find(|w| w.is_nan() || **w < 0.0) {
                return Err(Error::InvalidConfig(format!("negative queue wait {bad}")));
            }
            samples.iter().copied().fold(0.0, f64::max)
        }
        _ => estimate.wait(group_nodes)?,
    };
    Ok(wait + estimate.run_time)
}

fn uniform_profile(id: &str, layers: usize, backward: f64, bytes: u64, forward: f64) -> CostProfile {
    CostProfile {
        id: id.into(),
        layers: vec![
            LayerCost {
                backward_compute_time: backward,
                gradient_bytes: bytes,
            };
            layers
        ],
        forward_time: forward,
        bandwidth: 12.5e9,
        latency_per_message: 50e-6,
        bucket_bytes: None,
    }
}

/// Synthetic calibration profiles of increasing depth, on a 100 Gbit/s
/// network. These are invented numbers, not measurements.
pub fn calibration_profiles() -> Vec<CostProfile> {
    vec![
        uniform_profile("calib-shallow-12", 12, 0.0040, 28_311_552, 0.024),
        uniform_profile("calib-medium-24", 24, 0.0048, 39_321_600, 0.058),
        uniform_profile("calib-deep-32", 32, 0.0060, 51_380_224, 0.096),
    ]
}

/// One row of the cost report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub profile_id: String,
    pub strategy: String,
    pub overlap: bool,
    pub batch_factor: f64,
    pub seconds: f64,
    pub overhead_percent: f64,
}

pub const COST_HEADER: [&str; 6] = [
    "profile_id",
    "strategy",
    "overlap",
    "batch_factor",
    "seconds",
    "overhead_percent",
];

/// Run time of every strategy for every profile, overlap setting and batch
/// factor, relative to the same number of iterations on a single node.
#[allow(clippy::too_many_arguments)]
pub fn cost_grid(
    profiles: &[CostProfile],
    jitter: &JitterSpec,
    strategies: &[CommStrategy],
    topology: &Topology,
    batch_factors: &[f64],
    iterations: u64,
    seed: u64,
) -> Result<Vec<CostRow>> {
    let single = Topology::new(1, 1)?;
    let mut rows = Vec::new();
    for profile in profiles {
        for &factor in batch_factors {
            if !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::InvalidConfig(format!("batch factor must be positive, got {factor}")));
            }
            let scaled = profile.scaled(factor);
            for overlap in [false, true] {
                let base = simulate_run_time(&scaled, jitter, CommStrategy::FullSync, &single, iterations, seed, overlap)?;
                for &strategy in strategies {
                    let seconds = simulate_run_time(&scaled, jitter, strategy, topology, iterations, seed, overlap)?;
                    rows.push(CostRow {
                        profile_id: profile.id.clone(),
                        strategy: strategy.name(),
                        overlap,
                        batch_factor: factor,
                        seconds,
                        overhead_percent: overhead_percent(seconds, base),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_cost_csv(rows: &[CostRow], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(COST_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.profile_id.clone(),
            r.strategy.clone(),
            r.overlap.to_string(),
            format!("{:?}", r.batch_factor),
            format!("{:?}", r.seconds),
            format!("{:?}", r.overhead_percent),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
