//! One-axis sweeps over an experiment config.

use std::fmt;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use lofi_core::data::generate_task;
use lofi_core::diversity::{DiversityConfig, MixSource};
use lofi_core::engine::Topology;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BaselineConfig, EmaConfig, ExperimentConfig, WiseFtConfig};
use crate::experiment::{pretrained_params, run, short_hash, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Groups,
    Nodes,
    EmaBeta,
    WiseFtAlpha,
    Lambda,
    Epochs,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Groups => "groups",
            Axis::Nodes => "nodes",
            Axis::EmaBeta => "ema_beta",
            Axis::WiseFtAlpha => "wise_ft_alpha",
            Axis::Lambda => "lambda",
            Axis::Epochs => "epochs",
        })
    }
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "groups" => Axis::Groups,
            "nodes" => Axis::Nodes,
            "ema_beta" => Axis::EmaBeta,
            "wise_ft_alpha" => Axis::WiseFtAlpha,
            "lambda" => Axis::Lambda,
            "epochs" => Axis::Epochs,
            other => bail!("unknown sweep axis {other:?}"),
        })
    }
}

/// Axis values from the config's `sweep` section, as strings.
pub fn axis_values(config: &ExperimentConfig, axis: Axis) -> Result<Vec<String>> {
    let sweep = config.sweep.clone().unwrap_or_default();
    let values: Vec<String> = match axis {
        Axis::Groups => sweep.groups.iter().map(ToString::to_string).collect(),
        Axis::Nodes => sweep.nodes.iter().map(ToString::to_string).collect(),
        Axis::EmaBeta => sweep.ema_beta.iter().map(ToString::to_string).collect(),
        Axis::WiseFtAlpha => sweep.wise_ft_alpha.iter().map(ToString::to_string).collect(),
        Axis::Lambda => sweep.lambda.iter().map(ToString::to_string).collect(),
        Axis::Epochs => sweep.epochs.iter().map(ToString::to_string).collect(),
    };
    if values.is_empty() {
        bail!("sweep.{axis}: no values configured for this axis");
    }
    Ok(values)
}

/// The config with one axis set to `value`.
pub fn apply_axis(base: &ExperimentConfig, axis: Axis, value: &str) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    let bad = || format!("sweep value {value:?} is not valid for axis {axis}");
    match axis {
        Axis::Groups => {
            let k: usize = value.parse().with_context(bad)?;
            c.topology = Topology::new(base.topology.num_devices(), k)?;
        }
        Axis::Nodes => {
            let nodes: usize = value.parse().with_context(bad)?;
            let k = base.topology.num_groups();
            let n = base.topology.num_devices();
            if !n.is_multiple_of(k) || !base.train.global_batch.is_multiple_of(k) {
                bail!("nodes axis needs equal groups and a batch divisible by the group count");
            }
            let per_group_batch = base.train.global_batch / k;
            let train_len = base.task.finetune_size;
            let base_samples = base.train.samples_per_epoch.unwrap_or(train_len);
            c.topology = Topology::new(nodes * (n / k), nodes)?;
            c.train.global_batch = per_group_batch * nodes;
            c.train.samples_per_epoch = Some(base_samples * nodes / k);
            c.baseline = Some(base.baseline.clone().unwrap_or(BaselineConfig {
                num_devices: n,
                global_batch: base.train.global_batch,
                samples_per_epoch: base.train.samples_per_epoch,
            }));
        }
        Axis::EmaBeta => {
            c.ema = Some(EmaConfig {
                betas: vec![value.parse().with_context(bad)?],
            });
        }
        Axis::WiseFtAlpha => {
            c.wise_ft = Some(WiseFtConfig {
                alphas: vec![value.parse().with_context(bad)?],
            });
        }
        Axis::Lambda => {
            let lambda: f64 = value.parse().with_context(bad)?;
            c.diversity = Some(match &base.diversity {
                Some(d) => DiversityConfig { lambda, ..d.clone() },
                None => DiversityConfig {
                    lambda,
                    pairing: vec![],
                    mix: MixSource::Beta { alpha: 1.0 },
                },
            });
        }
        Axis::Epochs => c.train.epochs = value.parse().with_context(bad)?,
    }
    c.sweep = None;
    c.validate().with_context(|| format!("{axis} = {value}"))?;
    Ok(c)
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub axis: String,
    pub axis_value: String,
    pub model: String,
    pub split: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Lo-fi observes more examples than the baseline.
    pub observes_more_data: bool,
    pub run_dir: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct LongRow {
    pub axis: String,
    pub axis_value: String,
    pub seed: u64,
    pub model: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug)]
pub struct SweepArtifacts {
    pub dir: PathBuf,
    pub comparison: Vec<ComparisonRow>,
    pub long: Vec<LongRow>,
}

/// One [`run`] per axis value, everything else held fixed.
pub fn sweep(base: &ExperimentConfig, axis: Axis, values: &[String], options: RunOptions) -> Result<SweepArtifacts> {
    anyhow::ensure!(!values.is_empty(), "--values: at least one value is required");
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<_>>()?;
    let mut seen = std::collections::BTreeMap::new();
    for (value, cfg) in values.iter().zip(&configs) {
        if let Some(prev) = seen.insert(cfg.canonical_json()?, value) {
            bail!("--values: `{prev}` and `{value}` give the same configuration for axis {axis}");
        }
    }
    // Pretrain once before fanning out.
    let task = generate_task(&base.task)?;
    pretrained_params(base, &task, &base.output_dir.join("cache"), options.execution)?;

    let runs = match options.execution {
        lofi_core::engine::Execution::Sequential => configs.iter().map(|c| run(c, options)).collect::<Result<Vec<_>>>()?,
        lofi_core::engine::Execution::Threaded => configs.par_iter().map(|c| run(c, options)).collect::<Result<Vec<_>>>()?,
    };

    let mut comparison = Vec::new();
    let mut long = Vec::new();
    for ((value, cfg), art) in values.iter().zip(&configs).zip(&runs) {
        let more_data = match axis {
            Axis::Nodes => cfg.topology.num_groups() > base.topology.num_groups(),
            _ => false,
        };
        for s in &art.summary {
            comparison.push(ComparisonRow {
                axis: axis.to_string(),
                axis_value: value.clone(),
                model: s.model.clone(),
                split: s.split.to_string(),
                mean: s.mean,
                min: s.min,
                max: s.max,
                observes_more_data: more_data,
                run_dir: art.dir.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            });
        }
        for r in &art.report {
            long.push(LongRow {
                axis: axis.to_string(),
                axis_value: value.clone(),
                seed: r.seed,
                model: r.model.clone(),
                split: r.split.to_string(),
                metric: "accuracy".into(),
                value: r.accuracy,
            });
        }
    }

    let key = format!("{axis}:{}:{}", values.join(","), base.canonical_json()?);
    let dir = base.output_dir.join(format!("sweep-{axis}-{}", short_hash(&key)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_rows(&dir.join("comparison.csv"), &comparison)?;
    write_rows(&dir.join("long.csv"), &long)?;
    Ok(SweepArtifacts { dir, comparison, long })
}

fn write_rows<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
