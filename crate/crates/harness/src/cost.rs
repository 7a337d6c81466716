//! Cost-model report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lofi_core::costmodel::{
    calibration_profiles, cost_grid, default_queue_wait, time_to_result, time_to_result_independent,
    write_cost_csv, CostProfile, CostRow, JitterSpec, ScheduleEstimate,
};
use lofi_core::engine::{CommStrategy, Topology};
use serde::{Deserialize, Serialize};

use crate::experiment::{short_hash, write_text};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReportConfig {
    pub profiles: Vec<CostProfile>,
    #[serde(default = "default_jitter")]
    pub jitter: JitterSpec,
    #[serde(default = "default_batch_factors")]
    pub batch_factors: Vec<f64>,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Lo-fi groups; each group holds `nodes / groups` nodes.
    #[serde(default = "default_nodes")]
    pub groups: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<CommStrategy>,
    #[serde(default = "default_queue_wait")]
    pub queue_wait: BTreeMap<usize, f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_jitter() -> JitterSpec {
    JitterSpec::None
}

fn default_batch_factors() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}

fn default_iterations() -> u64 {
    100
}

fn default_nodes() -> usize {
    4
}

fn default_strategies() -> Vec<CommStrategy> {
    vec![
        CommStrategy::FullSync,
        CommStrategy::GroupedSync,
        CommStrategy::Independent,
        CommStrategy::LocalSgd { period: 8 },
    ]
}

impl CostReportConfig {
    /// Shipped calibration profiles with default settings.
    pub fn calibration() -> Self {
        Self {
            profiles: calibration_profiles(),
            jitter: default_jitter(),
            batch_factors: default_batch_factors(),
            iterations: default_iterations(),
            nodes: default_nodes(),
            groups: default_nodes(),
            strategies: default_strategies(),
            queue_wait: default_queue_wait(),
            seed: 0,
        }
    }

    /// Reads either a full report config or a bare list of profiles.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let config = if value.is_array() {
            Self {
                profiles: serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?,
                ..Self::calibration()
            }
        } else {
            serde_path_to_error::deserialize(value)
                .map_err(|e| anyhow::anyhow!("{}: field `{}`: {}", path.display(), e.path(), e.inner()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.profiles {
            p.validate()?;
        }
        self.jitter.validate()?;
        anyhow::ensure!(!self.profiles.is_empty(), "profiles: at least one profile is required");
        anyhow::ensure!(self.iterations >= 1, "iterations: must be >= 1");
        anyhow::ensure!(
            self.groups >= 1 && self.nodes.is_multiple_of(self.groups),
            "groups: must divide nodes"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeToResultRow {
    pub profile_id: String,
    pub strategy: String,
    pub overlap: bool,
    pub batch_factor: f64,
    pub run_time: f64,
    pub queue_wait_nodes: usize,
    pub time_to_result: f64,
}

#[derive(Debug)]
pub struct CostArtifacts {
    pub dir: PathBuf,
    pub rows: Vec<CostRow>,
    pub time_to_result: Vec<TimeToResultRow>,
}

pub fn cost_rows(config: &CostReportConfig) -> Result<(Vec<CostRow>, Vec<TimeToResultRow>)> {
    let topology = Topology::new(config.nodes, config.groups)?;
    let rows = cost_grid(
        &config.profiles,
        &config.jitter,
        &config.strategies,
        &topology,
        &config.batch_factors,
        config.iterations,
        config.seed,
    )?;
    let group_nodes = config.nodes / config.groups;
    let mut ttr = Vec::new();
    for r in &rows {
        let estimate = ScheduleEstimate {
            queue_wait: config.queue_wait.clone(),
            run_time: r.seconds,
        };
        let (nodes, total) = if r.strategy == CommStrategy::Independent.name() {
            (group_nodes, time_to_result_independent(&estimate, group_nodes, None)?)
        } else {
            (config.nodes, time_to_result(&estimate, config.nodes)?)
        };
        ttr.push(TimeToResultRow {
            profile_id: r.profile_id.clone(),
            strategy: r.strategy.clone(),
            overlap: r.overlap,
            batch_factor: r.batch_factor,
            run_time: r.seconds,
            queue_wait_nodes: nodes,
            time_to_result: total,
        });
    }
    Ok((rows, ttr))
}

/// Writes `costs.csv`, `time_to_result.csv` and `summary.md` under
/// `<out>/costreport-<hash>`.
pub fn costreport(config: &CostReportConfig, out: &Path) -> Result<CostArtifacts> {
    config.validate()?;
    let (rows, ttr) = cost_rows(config)?;
    let dir = out.join(format!("costreport-{}", short_hash(&serde_json::to_string(config)?)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_cost_csv(&rows, &dir.join("costs.csv"))?;
    let path = dir.join("time_to_result.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    for r in &ttr {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut md = String::from(
        "# Cost model report\n\nProfiles named `calib-*` are synthetic calibration values, not hardware measurements.\n\n\
         | profile | overlap | full-sync overhead % (batch factor 1) |\n|---|---|---|\n",
    );
    for r in rows
        .iter()
        .filter(|r| r.batch_factor == 1.0 && r.strategy == CommStrategy::FullSync.name())
    {
        md.push_str(&format!("| {} | {} | {:.2} |\n", r.profile_id, r.overlap, r.overhead_percent));
    }
    write_text(&dir.join("summary.md"), &md)?;
    Ok(CostArtifacts {
        dir,
        rows,
        time_to_result: ttr,
    })
}
