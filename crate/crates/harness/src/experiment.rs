//! Single experiments: pretraining, head initialization, baseline and lo-fi
//! runs, and the comparison report.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lofi_core::data::{generate_task, TaskBundle};
use lofi_core::engine::{Execution, RunResult, Topology, TrainConfig, Trainer};
use lofi_core::nn::{forward, init_params, ParamVector};
use lofi_core::stats::{correctness, mcnemar_exact, write_metrics, PairedOutcome, Split};
use lofi_core::weights::{ensemble_predict, linear_probe, map_head, wise_ft, zero_head, HeadInit};
use lofi_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Hex SHA-256 of `text`, truncated to 16 characters.
pub fn short_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub force: bool,
    pub execution: Execution,
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn train_run(
    task: &TaskBundle,
    init: &ParamVector,
    config: &TrainConfig,
    topology: &Topology,
    strategy: lofi_core::engine::CommStrategy,
    execution: Execution,
) -> Result<RunResult, Error> {
    Trainer::new(&task.finetune_train, init, config, topology, strategy)
        .eval_set(Split::TestId, &task.test_id)
        .eval_set(Split::TestOod, &task.test_ood)
        .execution(execution)
        .run()
}

/// Trains the shared initialization on the pretraining split, or loads it
/// from `cache_dir`.
pub fn pretrained_params(config: &ExperimentConfig, task: &TaskBundle, cache_dir: &Path, execution: Execution) -> Result<ParamVector> {
    let net = config.pretrain_network();
    let key = serde_json::to_string(&(&config.task, &net, &config.pretrain))?;
    let path = cache_dir.join(format!("pretrain-{}.json", short_hash(&key)));
    if path.exists() {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    let init = init_params(&net, config.pretrain.seed, false)?;
    let train = config.pretrain.train_config();
    let topo = Topology::new(1, 1)?;
    let result = Trainer::new(&task.pretrain, &init, &train, &topo, lofi_core::engine::CommStrategy::FullSync)
        .execution(execution)
        .run()?;
    fs::create_dir_all(cache_dir).with_context(|| format!("creating {}", cache_dir.display()))?;
    let tmp = path.with_extension("tmp");
    write_json(&tmp, &result.merged)?;
    fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
    Ok(result.merged)
}

/// Fine-tuning initialization from the pretrained parameters.
pub fn head_init(config: &ExperimentConfig, task: &TaskBundle, pretrained: &ParamVector) -> Result<ParamVector> {
    Ok(match config.head_init {
        HeadInit::MappedHead => map_head(pretrained, &task.class_map)?,
        HeadInit::ZeroInit => zero_head(pretrained, task.spec.num_classes)?,
        HeadInit::LinearProbe => {
            let probe = config.probe.as_ref().context("probe settings missing")?;
            linear_probe(&zero_head(pretrained, task.spec.num_classes)?, &task.finetune_train, probe)?
        }
    })
}

/// Everything produced for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub init: ParamVector,
    pub baseline: RunResult,
    pub lofi: RunResult,
}

impl SeedOutcome {
    /// Named evaluation models, baseline first.
    pub fn models(&self, config: &ExperimentConfig) -> Result<Vec<(String, ParamVector)>> {
        let mut models = vec![
            ("baseline".to_string(), self.baseline.merged.clone()),
            ("lofi".to_string(), self.lofi.merged.clone()),
        ];
        for (k, w) in self.lofi.workers.iter().enumerate() {
            models.push((format!("lofi_worker{k}"), w.clone()));
        }
        for ema in &self.lofi.ema {
            models.push((format!("lofi_ema{}", ema.beta), ema.merged.clone()));
            models.push((format!("lofi_worker0_ema{}", ema.beta), ema.worker0.clone()));
        }
        if let Some(w) = &config.wise_ft {
            for &alpha in &w.alphas {
                models.push((format!("lofi_wiseft{alpha}"), wise_ft(&self.init, &self.lofi.merged, alpha.into())?));
            }
        }
        Ok(models)
    }
}

/// One row of the comparison report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub model: String,
    pub split: Split,
    pub accuracy: f64,
    /// Exact McNemar p-value against the baseline; empty for averaged rows.
    pub p_value: Option<f64>,
}

pub fn report_rows(config: &ExperimentConfig, task: &TaskBundle, outcome: &SeedOutcome) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let models = outcome.models(config)?;
    for (split, data) in [(Split::TestId, &task.test_id), (Split::TestOod, &task.test_ood)] {
        let mut scored: Vec<(String, Vec<bool>)> = Vec::new();
        for (name, params) in &models {
            scored.push((name.clone(), correctness(&forward(params, &data.inputs, lofi_core::nn::Mode::Eval)?, &data.labels)));
        }
        let ens = ensemble_predict(&outcome.lofi.workers, &data.inputs)?;
        scored.insert(2, ("lofi_ensemble".into(), correctness(&ens, &data.labels)));
        let baseline = scored[0].1.clone();
        let acc = |c: &[bool]| c.iter().filter(|&&x| x).count() as f64 / c.len() as f64;
        let workers: Vec<f64> = scored
            .iter()
            .filter(|(n, _)| n.starts_with("lofi_worker") && !n.contains("ema"))
            .map(|(_, c)| acc(c))
            .collect();
        for (name, c) in &scored {
            let p = mcnemar_exact(&PairedOutcome::from_correctness(&baseline, c)?).p_value;
            rows.push(ReportRow {
                seed: outcome.seed,
                model: name.clone(),
                split,
                accuracy: acc(c),
                p_value: Some(p),
            });
            if name == "lofi_ensemble" {
                rows.push(ReportRow {
                    seed: outcome.seed,
                    model: "lofi_individual".into(),
                    split,
                    accuracy: workers.iter().sum::<f64>() / workers.len() as f64,
                    p_value: None,
                });
            }
        }
    }
    Ok(rows)
}

/// Trains baseline and lo-fi for one seed.
pub fn run_seed(config: &ExperimentConfig, task: &TaskBundle, init: &ParamVector, seed: u64, execution: Execution) -> Result<SeedOutcome> {
    let (base_cfg, base_topo) = config.baseline_train(seed)?;
    let baseline = train_run(task, init, &base_cfg, &base_topo, lofi_core::engine::CommStrategy::FullSync, execution)
        .with_context(|| format!("baseline run, seed {seed}"))?;
    let lofi = if config.baseline_is_lofi() {
        baseline.clone()
    } else {
        train_run(task, init, &config.lofi_train(seed), &config.topology, config.strategy, execution)
            .with_context(|| format!("lo-fi run, seed {seed}"))?
    };
    Ok(SeedOutcome {
        seed,
        init: init.clone(),
        baseline,
        lofi,
    })
}

/// Summary statistics of one model/split over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub split: Split,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub seeds: usize,
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, Split)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(m, s)| *m == r.model && *s == r.split) {
            keys.push((r.model.clone(), r.split));
        }
    }
    keys.into_iter()
        .map(|(model, split)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model && r.split == split)
                .map(|r| r.accuracy)
                .collect();
            SummaryRow {
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                seeds: vals.len(),
                model,
                split,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_csv(path, rows, &["seed", "model", "split", "accuracy", "p_value"])
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows, &["model", "split", "mean", "min", "max", "seeds"])
}

fn summary_markdown(config_hash: &str, summary: &[SummaryRow]) -> String {
    let mut s = format!("# lo-fi comparison ({config_hash})\n\n| model | split | mean acc | range |\n|---|---|---|---|\n");
    for r in summary {
        s.push_str(&format!(
            "| {} | {} | {:.4} | [{:.4}, {:.4}] |\n",
            r.model, r.split, r.mean, r.min, r.max
        ));
    }
    s
}

/// Result of [`run`]: the artifact directory and the per-seed outcomes.
#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub reused: bool,
    pub report: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

/// Runs the experiment for every seed and writes the artifact directory
/// `<output_dir>/run-<config hash>`. An existing complete directory is
/// reused unless `options.force` is set.
pub fn run(config: &ExperimentConfig, options: RunOptions) -> Result<RunArtifacts> {
    config.validate()?;
    let hash = short_hash(&config.canonical_json()?);
    let dir = config.output_dir.join(format!("run-{hash}"));
    let done = dir.join("summary.csv");
    if done.exists() && !options.force {
        let report = read_report(&dir.join("report.csv"))?;
        let summary = summarize(&report);
        return Ok(RunArtifacts {
            dir,
            reused: true,
            report,
            summary,
        });
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let task = generate_task(&config.task)?;
    let pretrained = pretrained_params(config, &task, &config.output_dir.join("cache"), options.execution)?;
    let init = head_init(config, &task, &pretrained)?;

    let mut report = Vec::new();
    for &seed in &config.seeds {
        let outcome = run_seed(config, &task, &init, seed, options.execution)?;
        let seed_dir = dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir).with_context(|| format!("creating {}", seed_dir.display()))?;
        let mut records = outcome.baseline.metric_records("baseline");
        records.extend(outcome.lofi.metric_records("lofi"));
        write_metrics(&records, &seed_dir.join("metrics.csv"))?;
        write_json(&seed_dir.join("params.json"), &SeedParams::from(&outcome))?;
        report.extend(report_rows(config, &task, &outcome)?);
    }
    let summary = summarize(&report);
    let mut resolved = config.clone();
    resolved.output_dir = PathBuf::new();
    write_json(&dir.join("config.json"), &resolved)?;
    write_report(&dir.join("report.csv"), &report)?;
    write_text(&dir.join("summary.md"), &summary_markdown(&hash, &summary))?;
    write_summary(&done, &summary)?;
    Ok(RunArtifacts {
        dir,
        reused: false,
        report,
        summary,
    })
}

#[derive(Serialize)]
struct SeedParams<'a> {
    init: &'a ParamVector,
    baseline: &'a ParamVector,
    lofi_merged: &'a ParamVector,
    lofi_workers: &'a [ParamVector],
}

impl<'a> From<&'a SeedOutcome> for SeedParams<'a> {
    fn from(o: &'a SeedOutcome) -> Self {
        Self {
            init: &o.init,
            baseline: &o.baseline.merged,
            lofi_merged: &o.lofi.merged,
            lofi_workers: &o.lofi.workers,
        }
    }
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("parsing {}", path.display())))
        .collect()
}
