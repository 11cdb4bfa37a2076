//! Acceptance checks, one PASS/FAIL line each. Runs with mock providers
//! and auto-approved verification; exits non-zero if any check fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use distal::orchestrator::{
    build_splits, run_strategies, Engine, Orchestrator, Phase, StepOutcome, Workspace,
};
use distal::replay::{Recorder, Replayer};
use distal::sim::{run_experiment, synthetic_instances, Report, SimSpec};
use distal::store::{self, PairLine};
use distal::transport::Transport;
use distal_core::kmeans::{self, ClusterModel, KMeansParams};
use distal_core::math::{entropy, softmax};
use distal_core::metrics::{
    cs_score, error_ratio_variance, mtld, safe_score, Judgment, MTLD_THRESHOLD,
};
use distal_core::pool::Provenance;
use distal_core::select::{select_cluster, select_topn, AttributeScore, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn metric_oracles() -> Check {
    let ln = f64::ln;
    ensure!(
        close(entropy(&[0.25; 4]).unwrap(), ln(4.0), 1e-9),
        "entropy of uniform(4)"
    );
    ensure!(
        entropy(&[0.0, 1.0, 0.0]).unwrap() == 0.0,
        "entropy of one-hot"
    );
    let h = entropy(&[0.5, 0.25, 0.25]).unwrap();
    ensure!(
        close(h, -(0.5 * ln(0.5) + 0.5 * ln(0.25)), 1e-9) && close(h, 1.039721, 1e-6),
        "entropy (0.5, 0.25, 0.25) = {h}"
    );

    ensure!(
        softmax(&[0.0, 0.0]).unwrap() == [0.5, 0.5],
        "softmax (0, 0)"
    );
    let p = softmax(&[2.0, 0.0]).unwrap();
    let e2 = 2f64.exp();
    ensure!(
        close(p[0], e2 / (e2 + 1.0), 1e-9) && close(p[1], 1.0 / (e2 + 1.0), 1e-9),
        "softmax (2, 0) = {p:?}"
    );
    ensure!(close(p[0], 0.880797, 1e-6), "softmax (2, 0) hand value");
    for c in [-1e3, -7.5, 0.3, 1e3] {
        let q = softmax(&[2.0 + c, c]).unwrap();
        ensure!(
            close(q[0], p[0], 1e-12) && close(q[1], p[1], 1e-12),
            "softmax shift by {c}"
        );
    }

    let judged = |errors: &[(usize, usize)]| -> Vec<Judgment> {
        let mut out = Vec::new();
        for (g, &(bad, total)) in errors.iter().enumerate() {
            for i in 0..total {
                out.push(Judgment {
                    instance_id: format!("{g}-{i}"),
                    subgroup: format!("g{g}"),
                    ok: i >= bad,
                });
            }
        }
        out
    };
    let v = error_ratio_variance(&judged(&[(0, 5), (0, 7)]))
        .unwrap()
        .variance;
    ensure!(v == 0.0, "error-free groups: {v}");
    let v = error_ratio_variance(&judged(&[(1, 5), (2, 5)]))
        .unwrap()
        .variance;
    ensure!(close(v, 0.01, 1e-9), "variance {{0.2, 0.4}} = {v}");
    let v = error_ratio_variance(&judged(&[(0, 2), (1, 2), (2, 2)]))
        .unwrap()
        .variance;
    ensure!(close(v, 1.0 / 6.0, 1e-9), "variance {{0, 0.5, 1}} = {v}");
    ensure!(
        error_ratio_variance(&[]).is_err(),
        "empty group set must error"
    );

    let toks = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let m = mtld(&toks("a b a a b a"), MTLD_THRESHOLD).unwrap();
    ensure!(close(m, 3.0, 1e-9), "MTLD \"a b a a b a\" = {m}");
    let distinct: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    ensure!(
        close(mtld(&distinct, MTLD_THRESHOLD).unwrap(), 50.0, 1e-9),
        "MTLD of 50 distinct tokens"
    );
    ensure!(
        close(mtld(&toks("solo"), MTLD_THRESHOLD).unwrap(), 1.0, 1e-9),
        "MTLD of one token"
    );
    ensure!(
        mtld(&[], MTLD_THRESHOLD).is_err(),
        "MTLD of nothing must error"
    );

    let flags: Vec<bool> = (0..400).map(|i| i < 379).collect();
    let s = safe_score(&flags).unwrap();
    ensure!(
        close(s.value, 94.75, 1e-9) && s.reported() == 94.8,
        "SafeScore 379/400"
    );
    let c = cs_score(&judged(&[(97, 400)])).unwrap();
    ensure!(c.reported() == 75.8, "CS-Score 303/400 = {}", c.reported());
    Ok("entropy, softmax, variance, MTLD, SafeScore, CS-Score".into())
}

fn score(id: &str, informativeness: f64) -> AttributeScore {
    AttributeScore {
        instance_id: id.to_string(),
        generated_text: String::new(),
        logits: vec![],
        p_adhere: 1.0 - informativeness,
        informativeness,
    }
}

fn model(assign: &[(&str, usize)], k: usize) -> ClusterModel {
    ClusterModel {
        k,
        centroids: vec![vec![0.0]; k],
        assignments: assign.iter().map(|(i, c)| (i.to_string(), *c)).collect(),
        inertia: 0.0,
        seed: 0,
        iterations_run: 0,
    }
}

/// Best n-subset by total informativeness, ties to the lexicographically
/// smallest sorted id list.
fn brute_topn(scores: &[AttributeScore], n: usize) -> BTreeSet<String> {
    let m = scores.len();
    let mut best: Option<(f64, Vec<String>)> = None;
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let picked: Vec<&AttributeScore> = (0..m)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &scores[i])
            .collect();
        let total: f64 = picked.iter().map(|s| s.informativeness).sum();
        let mut ids: Vec<String> = picked.iter().map(|s| s.instance_id.clone()).collect();
        ids.sort();
        let better = match &best {
            None => true,
            Some((t, b)) => total > *t + 1e-12 || (close(total, *t, 1e-12) && ids < *b),
        };
        if better {
            best = Some((total, ids));
        }
    }
    best.map(|(_, ids)| ids.into_iter().collect())
        .unwrap_or_default()
}

fn selection_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..200 {
        let m = rng.random_range(1..=12);
        // coarse values force plenty of ties
        let scores: Vec<AttributeScore> = (0..m)
            .map(|i| {
                score(
                    &format!("i{:02}", (i * 7) % 13),
                    rng.random_range(0..5) as f64 / 4.0,
                )
            })
            .collect();
        let n = rng.random_range(0..=m);
        let got: BTreeSet<String> = select_topn(&scores, n)
            .unwrap()
            .chosen
            .into_iter()
            .collect();
        ensure!(
            got == brute_topn(&scores, n),
            "trial {trial}: topn {got:?} differs from enumeration"
        );
        let one = model(
            &scores
                .iter()
                .map(|s| (s.instance_id.as_str(), 0))
                .collect::<Vec<_>>(),
            1,
        );
        let a = select_cluster(&scores, &one, n).unwrap().chosen;
        let b = select_topn(&scores, n).unwrap().chosen;
        ensure!(
            a == b,
            "trial {trial}: k=1 cluster selection differs from topn"
        );
    }

    let r = select_topn(&[score("a", 0.9), score("b", 0.1), score("c", 0.5)], 2).unwrap();
    ensure!(r.chosen == ["a", "c"], "topn fixture: {:?}", r.chosen);
    let r = select_topn(&[score("z", 0.5), score("m", 0.5), score("b", 0.5)], 2).unwrap();
    ensure!(r.chosen == ["b", "m"], "topn tie fixture: {:?}", r.chosen);

    let scores = [
        score("a1", 0.9),
        score("a2", 0.8),
        score("a3", 0.1),
        score("b1", 0.7),
        score("b2", 0.2),
    ];
    let m2 = model(&[("a1", 0), ("a2", 0), ("a3", 0), ("b1", 1), ("b2", 1)], 2);
    let r = select_cluster(&scores, &m2, 4).unwrap();
    let got: BTreeSet<&str> = r.chosen.iter().map(String::as_str).collect();
    ensure!(
        got == BTreeSet::from(["a1", "a2", "b1", "b2"]),
        "quota fixture: {got:?}"
    );

    // cluster 0 has no candidates; its quota moves to the others
    let scores: Vec<AttributeScore> = (0..6)
        .map(|i| score(&format!("x{i}"), i as f64 / 10.0))
        .collect();
    let assign: Vec<(String, usize)> = (0..6).map(|i| (format!("x{i}"), 1 + i % 2)).collect();
    let m3 = model(
        &assign
            .iter()
            .map(|(i, c)| (i.as_str(), *c))
            .collect::<Vec<_>>(),
        3,
    );
    let r = select_cluster(&scores, &m3, 6).unwrap();
    ensure!(r.chosen.len() == 6, "exhausted cluster: batch not filled");
    ensure!(
        r.per_cluster_quota == Some(BTreeMap::from([(0, 0), (1, 3), (2, 3)])),
        "exhausted cluster quotas {:?}",
        r.per_cluster_quota
    );
    // remainder slots go to the clusters with the most spare candidates
    let r = select_cluster(&scores, &m3, 5).unwrap();
    ensure!(r.chosen.len() == 5, "redistribution with remainder");
    Ok("200 enumerated pools, k=1 reduction, quota fixtures".into())
}

fn optimal_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        if (0..k).all(|c| labels.contains(&c)) {
            let mut total = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(p, _)| p)
                    .collect();
                let mean: Vec<f64> = (0..points[0].len())
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                total += members
                    .iter()
                    .map(|p| {
                        p.iter()
                            .zip(&mean)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum::<f64>();
            }
            best = best.min(total);
        }
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn kmeans_oracles() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let n = rng.random_range(3..=8);
        let k = rng.random_range(1..=3usize);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let opt = optimal_inertia(&points, k);
        let fit = kmeans::fit(&points, &KMeansParams::new(k, seed)).unwrap();
        ensure!(
            fit.inertia <= opt * 1.05 + 1e-12,
            "seed {seed}: inertia {} vs optimum {opt}",
            fit.inertia
        );
        if opt > 0.0 {
            worst = worst.max(fit.inertia / opt - 1.0);
        }
        for w in fit.inertia_trace.windows(2) {
            ensure!(
                w[1] <= w[0] + 1e-12 * w[0].max(1.0),
                "seed {seed}: inertia rose {} -> {}",
                w[0],
                w[1]
            );
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Vec<f64>> = (0..300)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let params = KMeansParams::new(6, 99);
    let a = serde_json::to_string(&kmeans::fit(&points, &params).unwrap()).unwrap();
    let b = serde_json::to_string(&kmeans::fit(&points, &params).unwrap()).unwrap();
    ensure!(a == b, "fixed-seed fits differ");
    for w in kmeans::fit(&points, &params)
        .unwrap()
        .inertia_trace
        .windows(2)
    {
        ensure!(
            w[1] <= w[0] + 1e-12 * w[0],
            "inertia rose on the 300-point fit"
        );
    }
    Ok(format!(
        "50 seeds, worst gap to optimum {:.2}%",
        worst * 100.0
    ))
}

fn sim_ordering(report: &Report) -> Check {
    let mean = |s: Strategy| report.strategies[&s].mean_error_ratio_variance;
    let (r, t, c) = (
        mean(Strategy::Random),
        mean(Strategy::Topn),
        mean(Strategy::Cluster),
    );
    ensure!(
        c < t && t < r,
        "mean error-ratio variance cluster {c:.3e}, topn {t:.3e}, random {r:.3e}"
    );
    let seeds = &report.seeds;
    let run = |s, seed| report.run(s, seed).expect("run present");
    let beats = seeds
        .iter()
        .filter(|&&seed| {
            run(Strategy::Cluster, seed).evaluation.error_ratio_variance
                < run(Strategy::Random, seed).evaluation.error_ratio_variance
        })
        .count();
    ensure!(
        beats * 5 >= seeds.len() * 4,
        "cluster beat random in only {beats}/{} seeds",
        seeds.len()
    );
    let floor = report.spec.budget / report.spec.clusters;
    for &seed in seeds {
        let m = run(Strategy::Cluster, seed).min_group_labeled;
        ensure!(
            m >= floor,
            "seed {seed}: cluster labeled only {m} in some group"
        );
        ensure!(
            run(Strategy::Cluster, seed).iterations == 5,
            "seed {seed}: not 5 iterations"
        );
    }
    let starved = seeds
        .iter()
        .filter(|&&seed| run(Strategy::Random, seed).min_group_labeled < floor)
        .count();
    ensure!(
        starved * 5 >= seeds.len() * 4,
        "random starved a group in only {starved}/{} seeds",
        seeds.len()
    );
    Ok(format!(
        "variance cluster {c:.2e} < topn {t:.2e} < random {r:.2e}; cluster beat random {beats}/{n}; random starved {starved}/{n}",
        n = seeds.len()
    ))
}

fn transfer(report: &Report) -> Check {
    let mean = |s: Strategy| report.strategies[&s].mean_transfer_error_ratio_variance;
    let (c, r) = (mean(Strategy::Cluster), mean(Strategy::Random));
    ensure!(c < r, "transfer variance cluster {c:.3e} vs random {r:.3e}");
    Ok(format!(
        "transfer variance cluster {c:.2e} < random {r:.2e}"
    ))
}

fn loop_config(seed: u64, test_size: usize) -> (SimSpec, distal::config::Config) {
    let spec = SimSpec {
        total: 1000,
        ..SimSpec::default()
    };
    let mut cfg = spec.config(seed);
    cfg.loop_.test_size = test_size;
    cfg.logical_clock = true;
    (spec, cfg)
}

fn fresh(spec: &SimSpec, cfg: &distal::config::Config, seed: u64) -> Workspace {
    let mut ws = Workspace::new(cfg, true);
    ws.add_instances(synthetic_instances(spec, seed).unwrap())
        .unwrap();
    ws
}

fn loop_accounting() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let (spec, cfg) = loop_config(5, 100);
    let log = dir.path().join("calls.jsonl");
    let snapshot = dir.path().join("state.json");

    // Uninterrupted, recorded, snapshotting and checking after every step.
    let recorder: Arc<dyn Transport> =
        Arc::new(Recorder::new(cfg.transport().unwrap(), &log).unwrap());
    let engine = Engine::new(cfg.clone(), cfg.providers(recorder)).unwrap();
    let mut o = Orchestrator::new(engine, fresh(&spec, &cfg, 5)).with_snapshot(&snapshot);
    let mut snapshots = 0;
    while o.step().map_err(|e| e.to_string())? == StepOutcome::Progressed {
        let saved = Workspace::load(&snapshot).map_err(|e| e.to_string())?;
        saved
            .check_invariants()
            .map_err(|e| format!("snapshot {snapshots}: {e}"))?;
        snapshots += 1;
    }
    let full = o.ws;
    drop(o.engine);
    ensure!(full.phase == Phase::Done, "run did not finish");
    ensure!(
        full.loop_state.iteration == 5,
        "{} iterations",
        full.loop_state.iteration
    );
    let l = full.pool.training_pairs().count();
    ensure!(l == cfg.loop_.bootstrap + 100, "|L| = {l}");

    // Replayed, killed every few steps and resumed from disk.
    let resumed_path = dir.path().join("resumed.json");
    fresh(&spec, &cfg, 5).save(&resumed_path).unwrap();
    let mut crashes = 0;
    loop {
        let ws = Workspace::load(&resumed_path).map_err(|e| e.to_string())?;
        let replayer: Arc<dyn Transport> =
            Arc::new(Replayer::load(&log).map_err(|e| e.to_string())?);
        let engine = Engine::new(cfg.clone(), cfg.providers(replayer)).unwrap();
        let mut o = Orchestrator::new(engine, ws).with_snapshot(&resumed_path);
        let mut done = false;
        for _ in 0..2 + crashes % 3 {
            if o.step().map_err(|e| e.to_string())? == StepOutcome::Done {
                done = true;
                break;
            }
        }
        if done {
            break;
        }
        crashes += 1;
    }
    let resumed = std::fs::read(&resumed_path).unwrap();
    ensure!(
        resumed == store::to_canonical(&full).unwrap().into_bytes(),
        "resumed state differs from the uninterrupted run"
    );
    Ok(format!(
        "5 iterations, |L| = {l}, {snapshots} snapshots checked, {crashes} crashes resumed"
    ))
}

fn read_split(path: &Path) -> Vec<PairLine> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn split_construction() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let spec = SimSpec {
        total: 4000,
        ..SimSpec::default()
    };
    let mut cfg = spec.config(1);
    cfg.loop_.test_size = 400;
    let ws = fresh(&spec, &cfg, 1);
    let engine = Engine::new(cfg.clone(), cfg.providers(cfg.transport().unwrap())).unwrap();
    let runs = run_strategies(engine, ws, &Strategy::ALL).map_err(|e| e.to_string())?;
    let summary = build_splits(&runs, dir.path()).map_err(|e| e.to_string())?;
    ensure!(summary.total == 1000, "{} pairs in total", summary.total);

    let test = read_split(&dir.path().join("test.jsonl"));
    ensure!(test.len() == 400, "test split has {}", test.len());
    ensure!(
        test.iter().all(|p| p.provenance == Provenance::Test),
        "test split provenance"
    );
    let test_ids: BTreeSet<&str> = test.iter().map(|p| p.id.as_str()).collect();
    let mut boots = Vec::new();
    for name in ["standard", "topn_al", "cluster_al"] {
        let split = read_split(&dir.path().join(format!("{name}.jsonl")));
        ensure!(split.len() == 200, "{name} has {} pairs", split.len());
        ensure!(
            split.iter().all(|p| !test_ids.contains(p.id.as_str())),
            "{name} overlaps the test set"
        );
        let boot: BTreeSet<String> = split
            .iter()
            .filter(|p| p.provenance == Provenance::Bootstrap)
            .map(|p| p.id.clone())
            .collect();
        ensure!(
            boot.len() == 100,
            "{name} has {} bootstrap pairs",
            boot.len()
        );
        boots.push(boot);
    }
    ensure!(
        boots.windows(2).all(|w| w[0] == w[1]),
        "bootstrap ids differ across splits"
    );
    Ok("3 x 200 train + 400 test = 1000, disjoint, shared bootstrap".into())
}

fn determinism(first: &Path) -> Check {
    let dir = tempfile::tempdir().unwrap();
    let spec = SimSpec::default();
    let seeds: Vec<u64> = (0..20).collect();
    run_experiment(&spec, &Strategy::ALL, &seeds, 4, Some(dir.path()))
        .map_err(|e| e.to_string())?;
    let a = std::fs::read(first.join("report.json")).unwrap();
    let b = std::fs::read(dir.path().join("report.json")).unwrap();
    ensure!(a == b, "report.json differs between runs");
    Ok(format!("report.json identical ({} bytes)", a.len()))
}

struct Outcome {
    name: &'static str,
    limit: Option<Duration>,
    elapsed: Duration,
    result: Check,
}

fn timed(name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    Outcome {
        name,
        limit,
        elapsed: start.elapsed(),
        result,
    }
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut outcomes = vec![
        timed("metric oracles", secs(1), metric_oracles),
        timed("selection oracles", secs(5), selection_oracles),
        timed("kmeans", secs(10), kmeans_oracles),
    ];

    let sim_dir = tempfile::tempdir().unwrap();
    let mut report = None;
    let sim = timed("simulation ordering", secs(60), || {
        let seeds: Vec<u64> = (0..20).collect();
        let r = run_experiment(
            &SimSpec::default(),
            &Strategy::ALL,
            &seeds,
            1,
            Some(sim_dir.path()),
        )
        .map_err(|e| e.to_string())?;
        let verdict = sim_ordering(&r);
        report = Some(r);
        verdict
    });
    outcomes.push(sim);
    outcomes.push(timed("transfer analog", None, || match &report {
        Some(r) => transfer(r),
        None => Err("simulation did not run".into()),
    }));
    outcomes.push(timed("loop accounting", None, loop_accounting));
    outcomes.push(timed("split construction", None, split_construction));
    outcomes.push(timed("simulate determinism", None, || match &report {
        Some(_) => determinism(sim_dir.path()),
        None => Err("simulation did not run".into()),
    }));

    let mut failed = 0;
    for o in &outcomes {
        let over = o.limit.filter(|l| o.elapsed > *l);
        let verdict = match (&o.result, over) {
            (Ok(detail), None) => format!("PASS  {}: {detail}", o.name),
            (Ok(_), Some(l)) => format!("FAIL  {}: took {:.2?}, limit {l:?}", o.name, o.elapsed),
            (Err(e), _) => format!("FAIL  {}: {e}", o.name),
        };
        if verdict.starts_with("FAIL") {
            failed += 1;
        }
        println!("{verdict} [{:.2?}]", o.elapsed);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        outcomes.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
