//! Experiment configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lofi_core::data::TaskSpec;
use lofi_core::diversity::DiversityConfig;
use lofi_core::engine::{CommStrategy, LrSchedule, OptimizerConfig, Topology, TrainConfig};
use lofi_core::nn::NetworkConfig;
use lofi_core::weights::{HeadInit, ProbeConfig};
use serde::{Deserialize, Serialize};

/// Training of the shared initialization on the pretraining classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub lr_base: f64,
    pub global_batch: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub drop_prob: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_base: self.lr_base,
            epochs: self.epochs,
            global_batch: self.global_batch,
            optimizer: self.optimizer,
            drop_prob: self.drop_prob,
            lr_schedule: LrSchedule::CosinePerIteration,
            seed: self.seed,
            samples_per_epoch: None,
            diversity: None,
            ema_betas: vec![],
            eval_every: self.epochs,
        }
    }
}

/// Settings of the full-sync baseline that differ from the lo-fi run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub num_devices: usize,
    pub global_batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub betas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WiseFtConfig {
    pub alphas: Vec<f64>,
}

/// Values to sweep, one list per axis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepValues {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ema_beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub wise_ft_alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    /// Fine-tuning network; pretraining uses the same body with twice the
    /// classes.
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub topology: Topology,
    pub strategy: CommStrategy,
    pub head_init: HeadInit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity: Option<DiversityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<EmaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wise_ft: Option<WiseFtConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepValues>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("artifacts")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| anyhow::anyhow!("{}: field `{}`: {}", path.display(), e.path(), e.inner()))?;
        config.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(config)
    }

    /// Network used for pretraining.
    pub fn pretrain_network(&self) -> NetworkConfig {
        NetworkConfig {
            num_classes: 2 * self.task.num_classes,
            drop_prob: self.pretrain.drop_prob,
            ..self.network
        }
    }

    /// Train config of the lo-fi run for one seed.
    pub fn lofi_train(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        t.diversity = self.diversity.clone();
        t.ema_betas = self.ema.as_ref().map(|e| e.betas.clone()).unwrap_or_default();
        t
    }

    /// Train config and topology of the full-sync baseline for one seed.
    pub fn baseline_train(&self, seed: u64) -> Result<(TrainConfig, Topology)> {
        let mut t = self.train.clone();
        t.seed = seed;
        t.diversity = None;
        t.ema_betas = vec![];
        let topo = match &self.baseline {
            Some(b) => {
                t.global_batch = b.global_batch;
                t.samples_per_epoch = b.samples_per_epoch;
                Topology::new(b.num_devices, 1)?
            }
            None => Topology::new(self.topology.num_devices(), 1)?,
        };
        Ok((t, topo))
    }

    /// True when the baseline run is the lo-fi run itself.
    pub fn baseline_is_lofi(&self) -> bool {
        self.strategy.normalized() == CommStrategy::FullSync
            && self.baseline.is_none()
            && self.diversity.is_none()
            && self.ema.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate().context("task")?;
        self.network.validate().context("network")?;
        if self.network.num_classes != self.task.num_classes || self.network.input_dim != self.task.input_dim {
            bail!(
                "network: expects {} inputs and {} classes, task has {} and {}",
                self.network.input_dim,
                self.network.num_classes,
                self.task.input_dim,
                self.task.num_classes
            );
        }
        self.pretrain.train_config().validate().context("pretrain")?;
        self.train.validate().context("train")?;
        let n = self.topology.num_devices();
        if !self.train.global_batch.is_multiple_of(n) {
            bail!("train.global_batch: {} is not divisible by {n} devices", self.train.global_batch);
        }
        if let Some(d) = &self.diversity {
            d.validate(self.topology.num_groups()).context("diversity")?;
        }
        if let Some(e) = &self.ema {
            if e.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
                bail!("ema.betas: every decay must lie in (0, 1)");
            }
        }
        if let Some(w) = &self.wise_ft {
            if w.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
                bail!("wise_ft.alphas: every coefficient must lie in [0, 1]");
            }
        }
        if self.head_init == HeadInit::LinearProbe && self.probe.is_none() {
            bail!("probe: required when head_init is linear_probe");
        }
        if self.seeds.is_empty() {
            bail!("seeds: at least one seed is required");
        }
        Ok(())
    }

    /// Canonical JSON used for content addressing; the output directory is
    /// not part of it.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(serde_json::to_string(&c)?)
    }
}

#[cfg(test)]
pub(crate) fn shipped(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}
