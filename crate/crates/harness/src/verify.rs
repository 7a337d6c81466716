//! Equivalence checks between strategies and interpolation barrier scans.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use lofi_core::data::{generate_task, TaskBundle};
use lofi_core::engine::{CommStrategy, Execution, RunResult, Topology, TrainConfig, Trainer};
use lofi_core::nn::{init_params, ParamVector};
use lofi_core::stats::Split;
use lofi_core::weights::{barrier_scan, BarrierScan};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiment::{head_init, pretrained_params, short_hash, write_json};

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn run_on(
    task: &TaskBundle,
    init: &ParamVector,
    config: &TrainConfig,
    topology: &Topology,
    strategy: CommStrategy,
    execution: Execution,
) -> Result<RunResult> {
    Ok(Trainer::new(&task.finetune_train, init, config, topology, strategy)
        .eval_set(Split::TestId, &task.test_id)
        .eval_set(Split::TestOod, &task.test_ood)
        .execution(execution)
        .run()?)
}

/// Describes the first difference between two runs, if any.
pub fn compare_runs(a: &RunResult, b: &RunResult) -> Option<String> {
    if a == b {
        return None;
    }
    if let Some(step) = (0..a.trajectory.len().max(b.trajectory.len())).find(|&s| a.trajectory.get(s) != b.trajectory.get(s)) {
        return Some(format!("trajectories first differ at step {step}"));
    }
    if a.workers != b.workers || a.merged != b.merged {
        return Some("final parameters differ".into());
    }
    if a.metrics != b.metrics {
        return Some("metrics differ".into());
    }
    Some("run summaries differ".into())
}

fn check(name: &str, a: &RunResult, b: &RunResult) -> EquivalenceCheck {
    let diff = compare_runs(a, b);
    EquivalenceCheck {
        name: name.into(),
        passed: diff.is_none(),
        detail: diff.unwrap_or_else(|| format!("bitwise identical over {} steps", a.steps)),
    }
}

/// Runs the degenerate-equality suite on the config's task and first seed.
pub fn verify_equivalence(config: &ExperimentConfig, execution: Execution) -> Result<Vec<EquivalenceCheck>> {
    config.validate()?;
    let task = generate_task(&config.task)?;
    let pretrained = pretrained_params(config, &task, &config.output_dir.join("cache"), execution)?;
    let init = head_init(config, &task, &pretrained)?;
    let mut train = config.lofi_train(config.seeds[0]);
    train.diversity = None;
    train.ema_betas.clear();
    let n = config.topology.num_devices();
    let k = config.topology.num_groups();
    let mut checks = Vec::new();

    let full = run_on(&task, &init, &train, &Topology::new(n, 1)?, CommStrategy::FullSync, execution)?;
    let grouped1 = run_on(&task, &init, &train, &Topology::new(n, 1)?, CommStrategy::GroupedSync, execution)?;
    checks.push(check("grouped_sync K=1 == full_sync", &full, &grouped1));

    let single = run_on(&task, &init, &train, &Topology::new(1, 1)?, CommStrategy::FullSync, execution)?;
    checks.push(check(&format!("full_sync n={n} == single device"), &full, &single));

    let unit = Topology::new(k, k)?;
    let grouped = run_on(&task, &init, &train, &unit, CommStrategy::GroupedSync, execution)?;
    let independent = run_on(&task, &init, &train, &unit, CommStrategy::Independent, execution)?;
    checks.push(check(
        &format!("grouped_sync unit groups == independent b/K (K={k})"),
        &grouped,
        &independent,
    ));
    checks.push(EquivalenceCheck {
        name: "independent has no cross-group reductions".into(),
        passed: independent.cross_group_reductions == 0,
        detail: format!("{} cross-group reductions", independent.cross_group_reductions),
    });

    let local1 = run_on(&task, &init, &train, &Topology::new(n, 1)?, CommStrategy::LocalSgd { period: 1 }, execution)?;
    checks.push(check("local_sgd period 1 == full_sync", &full, &local1));

    let lofi_train = config.lofi_train(config.seeds[0]);
    let seq = run_on(&task, &init, &lofi_train, &config.topology, config.strategy, Execution::Sequential)?;
    let thr = run_on(&task, &init, &lofi_train, &config.topology, config.strategy, Execution::Threaded)?;
    checks.push(check("sequential == threaded", &seq, &thr));
    Ok(checks)
}

#[derive(Clone, Debug, Serialize)]
pub struct PairScan {
    pub pair: String,
    pub scan: BarrierScan,
}

#[derive(Clone, Debug, Serialize)]
pub struct BarrierReport {
    /// Scans between every pair of lo-fi workers from the shared init.
    pub shared_init: Vec<PairScan>,
    /// Scan between two models trained from independent random inits.
    pub random_init: PairScan,
    pub max_shared_barrier: f64,
    pub dir: PathBuf,
}

/// Barrier scans on the ID test split with `num_points` points.
pub fn barrier_report(config: &ExperimentConfig, num_points: usize, execution: Execution) -> Result<BarrierReport> {
    config.validate()?;
    let task = generate_task(&config.task)?;
    let pretrained = pretrained_params(config, &task, &config.output_dir.join("cache"), execution)?;
    let init = head_init(config, &task, &pretrained)?;
    let seed = config.seeds[0];
    let train = config.lofi_train(seed);
    let lofi = run_on(&task, &init, &train, &config.topology, config.strategy, execution)?;
    anyhow::ensure!(lofi.workers.len() >= 2, "barrier scan needs at least two lo-fi workers");

    let mut shared = Vec::new();
    for i in 0..lofi.workers.len() {
        for j in i + 1..lofi.workers.len() {
            shared.push(PairScan {
                pair: format!("lofi_worker{i}-lofi_worker{j}"),
                scan: barrier_scan(&lofi.workers[i], &lofi.workers[j], num_points, &task.test_id)?,
            });
        }
    }

    let mut solo = train.clone();
    solo.diversity = None;
    solo.ema_betas.clear();
    let single = Topology::new(1, 1)?;
    let random_models: Vec<ParamVector> = [1u64, 2]
        .iter()
        .map(|&k| {
            let theta = init_params(&config.network, lofi_core::nn::mix_seed(&[seed, 0x7261_6e64, k]), false)?;
            Ok(run_on(&task, &theta, &solo, &single, CommStrategy::FullSync, execution)?.merged)
        })
        .collect::<Result<_>>()?;
    let random_init = PairScan {
        pair: "random_init_a-random_init_b".into(),
        scan: barrier_scan(&random_models[0], &random_models[1], num_points, &task.test_id)?,
    };
    let max_shared_barrier = shared.iter().map(|p| p.scan.barrier).fold(f64::NEG_INFINITY, f64::max);

    let key = format!("barrier:{num_points}:{}", config.canonical_json()?);
    let dir = config.output_dir.join(format!("barrier-{}", short_hash(&key)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("barrier.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["pair", "alpha", "loss", "accuracy"])?;
    for p in shared.iter().chain(std::iter::once(&random_init)) {
        for pt in &p.scan.points {
            w.write_record([
                p.pair.clone(),
                format!("{:?}", pt.alpha),
                format!("{:?}", pt.loss),
                format!("{:?}", pt.accuracy),
            ])?;
        }
    }
    w.flush()?;
    let report = BarrierReport {
        shared_init: shared,
        random_init,
        max_shared_barrier,
        dir: dir.clone(),
    };
    write_json(&dir.join("barriers.json"), &serde_json::json!({
        "max_shared_barrier": report.max_shared_barrier,
        "random_init_barrier": report.random_init.scan.barrier,
        "pairs": report.shared_init.iter().map(|p| (p.pair.clone(), p.scan.barrier)).collect::<Vec<_>>(),
    }))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::shipped;

    #[test]
    fn compare_runs_reports_the_first_difference() {
        let config = shipped("smoke.json");
        let task = generate_task(&config.task).unwrap();
        let theta = init_params(&config.network, 1, false).unwrap();
        let train = config.lofi_train(0);
        let topo = Topology::new(2, 2).unwrap();
        let a = run_on(&task, &theta, &train, &topo, CommStrategy::Independent, Execution::Sequential).unwrap();
        assert_eq!(compare_runs(&a, &a.clone()), None);
        let mut other = train.clone();
        other.lr_base *= 2.0;
        let b = run_on(&task, &theta, &other, &topo, CommStrategy::Independent, Execution::Sequential).unwrap();
        assert_eq!(compare_runs(&a, &b).unwrap(), "trajectories first differ at step 0");
    }

    #[test]
    fn suite_passes_on_the_smoke_config() {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = shipped("smoke.json");
        config.output_dir = tmp.path().to_path_buf();
        let checks = verify_equivalence(&config, Execution::Threaded).unwrap();
        assert_eq!(checks.len(), 6);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }
}
