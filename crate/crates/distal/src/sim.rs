//! Offline experiments on synthetic skewed pools.
//!
//! Every run uses the deterministic mock providers, automatic approval and
//! a logical clock, so a report is a pure function of its spec, strategies
//! and seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::thread;

use distal_core::metrics::{cs_score, error_ratio_variance, Judgment};
use distal_core::pool::{Instance, Provenance};
use distal_core::select::Strategy;
use distal_core::sim::{
    gen_pool, parse_group_tag, quantile_judge, GroupSpec, MockLearnerState, SyntheticPoolSpec,
    DEFAULT_PROPORTIONS,
};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::mock::{MockConfig, MockTransport};
use crate::orchestrator::{Engine, Orchestrator, StepOutcome, Workspace};
use crate::store;
use crate::transport::RetryPolicy;

/// Parameters of the second learner that is fine-tuned once on an exported
/// split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSpec {
    pub base_error: f64,
    pub gain_per_label: f64,
    pub floor: f64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            base_error: 0.7,
            gain_per_label: 0.04,
            floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub groups: Vec<GroupSpec>,
    pub total: usize,
    pub budget: usize,
    pub batch_size: usize,
    pub clusters: usize,
    pub bootstrap: usize,
    /// Evaluation items per group in the balanced synthetic test set.
    pub test_per_group: usize,
    pub rejection_rate: f64,
    pub max_topup_rounds: u32,
    pub learner: MockConfig,
    pub transfer: TransferSpec,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            groups: SyntheticPoolSpec::skewed_default(0).groups,
            total: 2000,
            budget: 100,
            batch_size: 20,
            clusters: DEFAULT_PROPORTIONS.len(),
            bootstrap: 100,
            test_per_group: 100,
            rejection_rate: 0.0,
            max_topup_rounds: 3,
            learner: MockConfig::default(),
            transfer: TransferSpec::default(),
        }
    }
}

impl SimSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let spec: SimSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn pool_spec(&self, seed: u64) -> SyntheticPoolSpec {
        SyntheticPoolSpec {
            groups: self.groups.clone(),
            total: self.total,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pool_spec(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.test_per_group == 0 {
            return Err(Error::Config("test_per_group must be at least 1".into()));
        }
        self.config(0).validate()
    }

    fn difficulty(&self) -> BTreeMap<String, f64> {
        self.groups
            .iter()
            .map(|g| (g.name.clone(), g.difficulty))
            .collect()
    }

    /// Loop configuration for one seed.
    pub fn config(&self, seed: u64) -> Config {
        let mut cfg = Config {
            seed,
            ..Config::default()
        };
        cfg.loop_.budget = self.budget;
        cfg.loop_.batch_size = self.batch_size;
        cfg.loop_.clusters = self.clusters;
        cfg.loop_.bootstrap = self.bootstrap;
        cfg.loop_.test_size = 0;
        cfg.loop_.max_topup_rounds = self.max_topup_rounds;
        cfg.verification.auto_approve = true;
        cfg.verification.rejection_rate = self.rejection_rate;
        cfg.providers.mock = true;
        cfg.providers.concurrency = 1;
        cfg.providers.retry = RetryPolicy::immediate(3);
        cfg.mock = self.learner.clone();
        cfg.mock.seed = seed;
        cfg.mock.difficulty = self.difficulty();
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_group_error: BTreeMap<String, f64>,
    pub error_ratio_variance: f64,
    pub cs_score: f64,
}

/// Judges `test_per_group` items per group with the quantile judge at the
/// learner's per-group error.
pub fn evaluate_learner(
    learner: &MockLearnerState,
    groups: &[GroupSpec],
    test_per_group: usize,
) -> Result<Evaluation> {
    let mut judgments = Vec::with_capacity(groups.len() * test_per_group);
    for g in groups {
        let e = learner.error(&g.name);
        for rank in 0..test_per_group {
            judgments.push(Judgment {
                instance_id: format!("{}-{rank}", g.name),
                subgroup: g.name.clone(),
                ok: quantile_judge(rank, test_per_group, e),
            });
        }
    }
    let errors = error_ratio_variance(&judgments)?;
    Ok(Evaluation {
        per_group_error: errors.per_group_error,
        error_ratio_variance: errors.variance,
        cs_score: cs_score(&judgments)?.value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub iterations: u32,
    pub learner_revision: String,
    pub labeled_per_group: BTreeMap<String, usize>,
    pub min_group_labeled: usize,
    pub evaluation: Evaluation,
    pub transfer: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub runs: usize,
    pub mean_error_ratio_variance: f64,
    pub mean_cs_score: f64,
    pub mean_min_group_labeled: f64,
    pub mean_transfer_error_ratio_variance: f64,
    /// Runs in which every group received at least `budget / clusters`
    /// labels.
    pub runs_with_full_coverage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub spec: SimSpec,
    pub seeds: Vec<u64>,
    pub strategies: BTreeMap<Strategy, StrategySummary>,
    pub runs: Vec<RunResult>,
}

impl Report {
    pub fn runs_for(&self, s: Strategy) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.strategy == s)
    }

    pub fn run(&self, s: Strategy, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.strategy == s && r.seed == seed)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "strategy,seed,iterations,error_ratio_variance,cs_score,min_group_labeled,transfer_error_ratio_variance,transfer_cs_score\n",
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.strategy,
                r.seed,
                r.iterations,
                r.evaluation.error_ratio_variance,
                r.evaluation.cs_score,
                r.min_group_labeled,
                r.transfer.error_ratio_variance,
                r.transfer.cs_score
            );
        }
        out
    }
}

/// Seeds the pool for `seed`.
pub fn synthetic_instances(spec: &SimSpec, seed: u64) -> Result<Vec<Instance>> {
    let dim = spec.learner.embed_dim;
    let noise = spec.learner.embed_noise;
    Ok(gen_pool(&spec.pool_spec(seed), dim, noise)?
        .into_iter()
        .map(|s| {
            let mut inst = Instance::new(s.id, s.text).with_subgroup(s.group);
            inst.embedding = Some(s.embedding);
            inst
        })
        .collect())
}

/// Runs the full loop for one strategy and seed; returns the result and
/// the final workspace.
pub fn run_one(spec: &SimSpec, strategy: Strategy, seed: u64) -> Result<(RunResult, Workspace)> {
    let mut cfg = spec.config(seed);
    cfg.strategy = strategy;
    let mock = Arc::new(MockTransport::new(cfg.mock.clone(), cfg.template.build()?));
    let providers = cfg.providers(mock.clone());
    let mut ws = Workspace::new(&cfg, true);
    ws.add_instances(synthetic_instances(spec, seed)?)?;
    let mut orch = Orchestrator::new(Engine::new(cfg, providers)?, ws);
    match orch.run()? {
        StepOutcome::Done => {}
        other => return Err(Error::state(format!("simulation stopped early: {other:?}"))),
    }
    let ws = orch.ws;

    let mut labeled: BTreeMap<String, usize> =
        spec.groups.iter().map(|g| (g.name.clone(), 0)).collect();
    let mut split_inputs = Vec::new();
    for p in ws.pool.training_pairs() {
        if let Some(g) = parse_group_tag(&p.input_text) {
            *labeled.entry(g.to_string()).or_default() += 1;
        }
        if p.provenance == Provenance::Bootstrap || p.provenance == strategy.into() {
            split_inputs.push(p.input_text.as_str());
        }
    }
    let learner = mock.learner(&ws.loop_state.learner_revision);
    let evaluation = evaluate_learner(&learner, &spec.groups, spec.test_per_group)?;

    let t = &spec.transfer;
    let mut transfer = MockLearnerState::new(t.base_error, t.gain_per_label, t.floor);
    transfer.difficulty = spec.difficulty();
    transfer.retrain(split_inputs);
    let transfer = evaluate_learner(&transfer, &spec.groups, spec.test_per_group)?;

    let result = RunResult {
        strategy,
        seed,
        iterations: ws.loop_state.iteration,
        learner_revision: ws.loop_state.learner_revision.clone(),
        min_group_labeled: labeled.values().copied().min().unwrap_or(0),
        labeled_per_group: labeled,
        evaluation,
        transfer,
    };
    Ok((result, ws))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs every (strategy, seed) pair on up to `parallelism` threads. When
/// `out` is set, writes `report.json`, `per_seed.csv` and one snapshot per
/// run under `runs/`.
pub fn run_experiment(
    spec: &SimSpec,
    strategies: &[Strategy],
    seeds: &[u64],
    parallelism: usize,
    out: Option<&Path>,
) -> Result<Report> {
    spec.validate()?;
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let runs_dir = out.map(|o| o.join("runs"));
    let run = |&(s, seed): &(Strategy, u64)| -> Result<RunResult> {
        let (r, ws) = run_one(spec, s, seed)?;
        if let Some(dir) = &runs_dir {
            ws.save(&dir.join(format!("{s}-{seed}.json")))?;
        }
        Ok(r)
    };
    let results: Vec<Result<RunResult>> = if parallelism <= 1 {
        jobs.iter().map(run).collect()
    } else {
        let chunk = jobs.len().div_ceil(parallelism).max(1);
        thread::scope(|sc| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| sc.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("simulation worker panicked"))
                .collect()
        })
    };
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let floor = spec.budget / spec.clusters.max(1);
    let mut summaries = BTreeMap::new();
    for &s in strategies {
        let rs: Vec<&RunResult> = runs.iter().filter(|r| r.strategy == s).collect();
        summaries.insert(
            s,
            StrategySummary {
                runs: rs.len(),
                mean_error_ratio_variance: mean(
                    rs.iter().map(|r| r.evaluation.error_ratio_variance),
                ),
                mean_cs_score: mean(rs.iter().map(|r| r.evaluation.cs_score)),
                mean_min_group_labeled: mean(rs.iter().map(|r| r.min_group_labeled as f64)),
                mean_transfer_error_ratio_variance: mean(
                    rs.iter().map(|r| r.transfer.error_ratio_variance),
                ),
                runs_with_full_coverage: rs.iter().filter(|r| r.min_group_labeled >= floor).count(),
            },
        );
    }
    let report = Report {
        spec: spec.clone(),
        seeds: seeds.to_vec(),
        strategies: summaries,
        runs,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        store::write_atomic(
            &dir.join("report.json"),
            store::to_canonical(&report)?.as_bytes(),
        )?;
        store::write_atomic(&dir.join("per_seed.csv"), report.csv().as_bytes())?;
    }
    Ok(report)
}
