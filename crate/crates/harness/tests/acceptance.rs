//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use lofi_core::costmodel::{
    calibration_profiles, iteration_overhead, simulate_iteration, simulate_run_time, CostProfile,
    JitterSpec, LayerCost, SyncMode,
};
use lofi_core::data::Batch;
use lofi_core::engine::{CommStrategy, Execution, Topology};
use lofi_core::nn::{finite_difference_gradient, init_params, loss_and_grad, Matrix, Mode, NetworkConfig, ParamVector};
use lofi_core::stats::{mcnemar_exact, PairedOutcome, Split};
use lofi_core::weights::{ema_debias, wise_ft, EmaState};
use lofi_harness::experiment::{head_init, pretrained_params, run_seed, RunOptions};
use lofi_harness::verify::{barrier_report, verify_equivalence};
use lofi_harness::{run, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);

fn default_config(out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let mut config = ExperimentConfig::load(&path).expect("default config");
    config.output_dir = out.to_path_buf();
    config
}

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn criterion_1(out: &Path) -> Outcome {
    let config = default_config(out);
    let checks = verify_equivalence(&config, Execution::Threaded).map_err(|e| format!("{e:#}"))?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    Ok(format!("{} bitwise checks identical", checks.len()))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    const FD_EPS: f64 = 1e-5;
    const TOL: f64 = 1e-5;
    let (mut worst, mut max_floor) = (0.0f64, 0.0f64);
    let instances = 24;
    for i in 0..instances {
        let net = NetworkConfig {
            input_dim: rng.random_range(1..5),
            hidden_dim: rng.random_range(1..6),
            num_blocks: rng.random_range(1..4),
            num_classes: rng.random_range(2..5),
            drop_prob: 0.0,
        };
        let params = init_params(&net, rng.random(), rng.random_bool(0.2)).map_err(|e| e.to_string())?;
        let rows = rng.random_range(1..6);
        let data: Vec<f64> = (0..rows * net.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let batch = Batch {
            inputs: Matrix::new(rows, net.input_dim, data).map_err(|e| e.to_string())?,
            labels: (0..rows).map(|_| rng.random_range(0..net.num_classes)).collect(),
            ids: (0..rows as u64).map(|k| k + 1000 * i).collect(),
        };
        let mode = if i % 2 == 0 {
            Mode::Eval
        } else {
            Mode::Train {
                drop_prob: 0.3,
                seed: i,
            }
        };
        let (loss, g) = loss_and_grad(&params, &batch, mode).map_err(|e| e.to_string())?;
        let fd = finite_difference_gradient(&params, &batch, mode, FD_EPS).map_err(|e| e.to_string())?;
        // Denominator floor at the rounding noise of the central difference.
        let floor = 4.0 * f64::EPSILON * loss.abs().max(1.0) / (2.0 * FD_EPS) / TOL;
        max_floor = max_floor.max(floor);
        for (a, b) in g.values().iter().zip(fd.values()) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(floor));
        }
    }
    ensure(worst <= TOL, format!("max relative error {worst:.3e} > {TOL:e}"))?;
    Ok(format!(
        "{instances} instances, max relative error {worst:.3e} (denominator floor {max_floor:.1e})"
    ))
}

fn criterion_3(out: &Path) -> Outcome {
    let config = default_config(out);
    ensure(config.seeds.len() >= 5, "fewer than 5 seeds".into())?;
    let art = run(&config, RunOptions::default()).map_err(|e| format!("{e:#}"))?;
    let acc = |seed: u64, model: &str| {
        art.report
            .iter()
            .find(|r| r.seed == seed && r.model == model && r.split == Split::TestId)
            .map(|r| r.accuracy)
            .ok_or_else(|| format!("missing {model} for seed {seed}"))
    };
    let (mut gap, mut ens) = (0.0, 0.0);
    for &seed in &config.seeds {
        let merged = acc(seed, "lofi")?;
        let individual = acc(seed, "lofi_individual")?;
        ensure(
            merged >= individual,
            format!("seed {seed}: merged {merged} < mean individual {individual}"),
        )?;
        gap += merged - acc(seed, "baseline")?;
        ens += acc(seed, "lofi_ensemble")? - merged;
    }
    let k = config.seeds.len() as f64;
    let (gap, ens) = (100.0 * gap / k, 100.0 * ens / k);
    ensure(gap.abs() <= 2.0, format!("mean merged-baseline gap {gap:.3} pp"))?;
    ensure(ens.abs() <= 1.0, format!("mean ensemble-merged gap {ens:.3} pp"))?;
    Ok(format!(
        "{} seeds, merged >= individual in all, merged-baseline {gap:+.3} pp, ensemble-merged {ens:+.3} pp",
        config.seeds.len()
    ))
}

fn criterion_4(out: &Path) -> Outcome {
    let config = default_config(out);
    let report = barrier_report(&config, 21, Execution::Threaded).map_err(|e| format!("{e:#}"))?;
    let shared = report.max_shared_barrier;
    let random = report.random_init.scan.barrier;
    ensure(shared <= 0.05, format!("lo-fi barrier {shared:.5} > 0.05 nats"))?;
    ensure(random > shared, format!("random-init barrier {random:.5} <= lo-fi barrier {shared:.5}"))?;
    Ok(format!(
        "max lo-fi barrier {shared:.5} nats over {} pairs, random-init barrier {random:.5}",
        report.shared_init.len()
    ))
}

fn binomial_two_sided(n01: u64, n10: u64) -> f64 {
    let n = n01 + n10;
    if n == 0 {
        return 1.0;
    }
    let k = n01.max(n10);
    let mut tail = 0.0;
    for i in k..=n {
        let mut c = 1.0f64;
        for j in 0..i {
            c = c * (n - j) as f64 / (j + 1) as f64;
        }
        tail += c / 2f64.powi(n as i32);
    }
    (2.0 * tail).min(1.0)
}

fn criterion_5() -> Outcome {
    let p = |a, b| {
        mcnemar_exact(&PairedOutcome {
            n01: a,
            n10: b,
            n00: 0,
            n11: 0,
        })
        .p_value
    };
    let example = p(10, 2);
    ensure(
        (example - 158.0 / 4096.0).abs() <= 1e-12,
        format!("p(10, 2) = {example}"),
    )?;
    let mut tables = 0;
    for n in 0..=20u64 {
        let mut by_gap: BTreeMap<u64, f64> = BTreeMap::new();
        for a in 0..=n {
            let b = n - a;
            tables += 1;
            let (pa, pb) = (p(a, b), p(b, a));
            ensure(pa == pb, format!("asymmetric at ({a}, {b})"))?;
            let brute = binomial_two_sided(a, b);
            ensure((pa - brute).abs() <= 1e-12, format!("({a}, {b}): {pa} vs enumeration {brute}"))?;
            by_gap.insert(a.abs_diff(b), pa);
        }
        let ps: Vec<f64> = by_gap.values().copied().collect();
        ensure(
            ps.windows(2).all(|w| w[1] <= w[0]),
            format!("p not monotone in |n01 - n10| for n = {n}"),
        )?;
    }
    Ok(format!("p(10, 2) = {example:.6}, {tables} tables symmetric, monotone and match enumeration"))
}

fn random_profile(rng: &mut ChaCha8Rng) -> CostProfile {
    let layers = rng.random_range(1..40);
    CostProfile {
        id: "random".into(),
        layers: (0..layers)
            .map(|_| LayerCost {
                backward_compute_time: rng.random_range(0.0..0.02),
                gradient_bytes: rng.random_range(0..100_000_000),
            })
            .collect(),
        forward_time: rng.random_range(0.0..0.1),
        bandwidth: rng.random_range(1e8..1e11),
        latency_per_message: rng.random_range(0.0..1e-3),
        bucket_bytes: if rng.random_bool(0.5) {
            Some(rng.random_range(1..200_000_000))
        } else {
            None
        },
    }
}

fn criterion_6() -> Outcome {
    let profiles = calibration_profiles();
    let mut bands = Vec::new();
    for p in &profiles {
        let no = iteration_overhead(p, false);
        ensure((25.0..=55.0).contains(&no), format!("{}: no-overlap overhead {no:.2}%", p.id))?;
        bands.push(format!("{} {no:.1}%", p.id));
    }
    let deepest = profiles.iter().max_by_key(|p| p.layers.len()).ok_or("no profiles")?;
    let deep_overlap = iteration_overhead(deepest, true);
    ensure(deep_overlap < 10.0, format!("{}: overlap overhead {deep_overlap:.2}%", deepest.id))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let p = random_profile(&mut rng);
        let (o, n) = (
            simulate_iteration(&p, true, SyncMode::CrossNode),
            simulate_iteration(&p, false, SyncMode::CrossNode),
        );
        ensure(o <= n, format!("random profile {i}: overlap {o} > no-overlap {n}"))?;
    }

    let factors = [0.25, 0.5, 1.0, 2.0, 4.0];
    for p in &profiles {
        for overlap in [false, true] {
            let o: Vec<f64> = factors.iter().map(|&s| iteration_overhead(&p.scaled(s), overlap)).collect();
            ensure(
                o.windows(2).all(|w| w[1] <= w[0]),
                format!("{} overlap={overlap}: overhead not nonincreasing {o:?}", p.id),
            )?;
        }
    }

    let topo = Topology::new(4, 4).map_err(|e| e.to_string())?;
    let jitter = JitterSpec::Lognormal { mu: 0.0, sigma: 0.25 };
    let (mut full, mut ind) = (0.0, 0.0);
    for p in &profiles {
        for overlap in [false, true] {
            for seed in 0..100 {
                let run = |s| simulate_run_time(p, &jitter, s, &topo, 50, seed, overlap).map_err(|e| e.to_string());
                full += run(CommStrategy::FullSync)?;
                ind += run(CommStrategy::Independent)?;
            }
            ensure(full >= ind, format!("{} overlap={overlap}: E[full] {full} < E[independent] {ind}", p.id))?;
        }
    }
    Ok(format!(
        "no-overlap {}; deepest overlap {deep_overlap:.2}%; 1000 random profiles dominated; batch trend holds; E[full]/E[independent] = {:.3}",
        bands.join(", "),
        full / ind
    ))
}

fn criterion_7() -> Outcome {
    let v = ParamVector::from_values(vec![0.3, -1.7, 1e-9, 12345.678]);
    for beta in [0.5, 0.9, 0.99, 0.999] {
        let mut s = EmaState::new(beta, &v).map_err(|e| e.to_string())?;
        for t in 1..=500 {
            s.update(&v).map_err(|e| e.to_string())?;
            let d = ema_debias(&s).map_err(|e| e.to_string())?;
            ensure(d == v, format!("beta {beta}, step {t}: debiased EMA {:?} != {:?}", d.values(), v.values()))?;
        }
    }
    let a = ParamVector::from_values(vec![0.1, 0.7, -3.0]);
    let b = ParamVector::from_values(vec![1.0 / 3.0, 2.0, 5.5]);
    ensure(wise_ft(&a, &b, 0.0.into()).map_err(|e| e.to_string())? == a, "alpha 0 endpoint".into())?;
    ensure(wise_ft(&a, &b, 1.0.into()).map_err(|e| e.to_string())? == b, "alpha 1 endpoint".into())?;

    let one = ParamVector::from_values(vec![1.0]);
    let mut s = EmaState::new(0.9, &one).map_err(|e| e.to_string())?;
    s.update(&one).map_err(|e| e.to_string())?;
    s.update(&ParamVector::from_values(vec![2.0])).map_err(|e| e.to_string())?;
    let accum = s.accum.values()[0];
    let debiased = ema_debias(&s).map_err(|e| e.to_string())?.values()[0];
    ensure((accum - 0.29).abs() <= 1e-12, format!("accum {accum}"))?;
    ensure((debiased - 0.29 / 0.19).abs() <= 1e-12, format!("debiased {debiased}"))?;
    Ok(format!("constant streams exact for 500 steps, endpoints exact, EMA 0.29 -> {debiased:.12}"))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_8(out: &Path) -> Outcome {
    let config_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let mut dirs = Vec::new();
    for (i, extra) in [None, Some("--sequential")].into_iter().enumerate() {
        let target = out.join(format!("invocation-{i}"));
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lofi"));
        cmd.args(["run", "--config"]).arg(&config_path).arg("--out").arg(&target);
        if let Some(flag) = extra {
            cmd.arg(flag);
        }
        let status = cmd.output().map_err(|e| e.to_string())?;
        ensure(
            status.status.success(),
            format!("lofi run failed: {}", String::from_utf8_lossy(&status.stderr)),
        )?;
        dirs.push(target);
    }
    let (a, b) = (files_under(&dirs[0]), files_under(&dirs[1]));
    ensure(a == b, format!("artifact listings differ: {a:?} vs {b:?}"))?;
    for f in &a {
        let (x, y) = (std::fs::read(dirs[0].join(f)), std::fs::read(dirs[1].join(f)));
        ensure(
            x.map_err(|e| e.to_string())? == y.map_err(|e| e.to_string())?,
            format!("{} differs", f.display()),
        )?;
    }

    let config = default_config(&out.join("modes"));
    let task = lofi_core::data::generate_task(&config.task).map_err(|e| e.to_string())?;
    let cache = out.join("modes-cache");
    let pre = pretrained_params(&config, &task, &cache, Execution::Sequential).map_err(|e| format!("{e:#}"))?;
    let init = head_init(&config, &task, &pre).map_err(|e| format!("{e:#}"))?;
    let seed = config.seeds[0];
    let seq = run_seed(&config, &task, &init, seed, Execution::Sequential).map_err(|e| format!("{e:#}"))?;
    let thr = run_seed(&config, &task, &init, seed, Execution::Threaded).map_err(|e| format!("{e:#}"))?;
    ensure(seq == thr, "sequential and threaded RunResults differ".into())?;
    Ok(format!(
        "{} artifact files byte-identical across invocations; sequential == threaded",
        a.len()
    ))
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("1 degenerate-equality suite", Box::new(|| criterion_1(&root.join("c1")))),
        ("2 gradient correctness", Box::new(criterion_2)),
        ("3 lo-fi comparative structure", Box::new(|| criterion_3(&root.join("c3")))),
        ("4 linear mode connectivity", Box::new(|| criterion_4(&root.join("c4")))),
        ("5 McNemar exactness", Box::new(criterion_5)),
        ("6 cost-model band", Box::new(criterion_6)),
        ("7 EMA/WiSE-FT arithmetic", Box::new(criterion_7)),
        ("8 end-to-end determinism", Box::new(|| criterion_8(&root.join("c8")))),
    ];
    let mut failures = 0;
    for (name, check) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
