//! The active-learning loop as a resumable state machine.
//!
//! A run moves through these phases:
//!
//! 1. carve out and label the fixed test set,
//! 2. bootstrap the learner on random instances,
//! 3. fit clusters,
//! 4. iterate (select, distill, verify, retrain) while the budget covers a
//!    full batch.
//!
//! Each call to [`Engine::step`] advances one stage and leaves the
//! [`Workspace`] in a state that can be snapshotted and resumed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use distal_core::kmeans::{ClusterModel, KMeansParams};
use distal_core::metrics::{tokenize, Judgment, MetricsReport};
use distal_core::pool::{Instance, InstanceState, Pool, Provenance};
use distal_core::select::{select_cluster, select_random, select_topn, SelectionResult, Strategy};
use distal_core::sim::{keyed_unit_noise, stable_hash};
use distal_core::template::Template;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::config::Config;
use crate::distill::{distill_batch, DistillationFailure};
use crate::embed::embed_all;
use crate::error::{Error, Result};
use crate::providers::Providers;
use crate::scoring::{score_batch, ScoreCache, ScoringFailure};
use crate::store;
use crate::verify::{DecisionRequest, ItemMeta, ItemStatus, VerificationItem, VerificationQueue};

pub const SCHEMA_VERSION: u32 = 1;
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopState {
    pub budget_initial: usize,
    pub budget_remaining: usize,
    pub batch_size: usize,
    pub clusters: usize,
    /// Completed iterations.
    pub iteration: u32,
    pub strategy: Strategy,
    pub learner_revision: String,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Test,
    Bootstrap,
    Iteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Select,
    Distill,
    Verify,
    Retrain,
}

/// One labeling job: a target number of accepted pairs for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub kind: JobKind,
    pub iteration: u32,
    pub target: usize,
    pub stage: Stage,
    /// Top-up round; 0 is the initial selection.
    pub round: u32,
    /// Instances rejected or failed during this job, not re-selected by it.
    pub excluded: BTreeSet<String>,
    /// Informativeness of the instances currently in flight.
    pub informativeness: BTreeMap<String, f64>,
}

impl Job {
    fn new(kind: JobKind, iteration: u32, target: usize) -> Self {
        Job {
            kind,
            iteration,
            target,
            stage: Stage::Select,
            round: 0,
            excluded: BTreeSet::new(),
            informativeness: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Ingested,
    Running(Job),
    Cluster,
    Done,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Ingested => "ingested",
            Phase::Running(j) => match j.kind {
                JobKind::Test => "test_set",
                JobKind::Bootstrap => "bootstrap",
                JobKind::Iteration => "iteration",
            },
            Phase::Cluster => "cluster",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub kind: JobKind,
    pub iteration: u32,
    pub round: u32,
    pub result: SelectionResult,
}

/// Summary written after the bootstrap and after every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub strategy: Strategy,
    pub budget_remaining: usize,
    pub learner_revision: String,
    pub training_pairs: usize,
    pub accepted: usize,
    pub rejected: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Progressed,
    AwaitingVerification { pending: usize },
    Done,
}

/// The complete persistent state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub schema_version: u32,
    pub loop_state: LoopState,
    pub phase: Phase,
    #[serde(flatten)]
    pub pool: Pool,
    pub test_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_model: Option<ClusterModel>,
    pub queue: VerificationQueue,
    pub selections: Vec<SelectionRecord>,
    pub scoring_failures: Vec<ScoringFailure>,
    pub distillation_failures: Vec<DistillationFailure>,
    pub history: Vec<IterationRecord>,
    pub clock: Clock,
}

impl Workspace {
    pub fn new(config: &Config, logical_clock: bool) -> Self {
        let l = &config.loop_;
        Workspace {
            schema_version: SCHEMA_VERSION,
            loop_state: LoopState {
                budget_initial: l.budget,
                budget_remaining: l.budget,
                batch_size: l.batch_size,
                clusters: l.clusters,
                iteration: 0,
                strategy: config.strategy,
                learner_revision: "base".into(),
                rng_seed: config.seed,
            },
            phase: Phase::Ingested,
            pool: Pool::new(),
            test_ids: Vec::new(),
            cluster_model: None,
            queue: VerificationQueue::new(),
            selections: Vec::new(),
            scoring_failures: Vec::new(),
            distillation_failures: Vec::new(),
            history: Vec::new(),
            clock: if logical_clock {
                Clock::logical()
            } else {
                Clock::default()
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ws: Workspace = store::load_json(path)?;
        if ws.schema_version != SCHEMA_VERSION {
            return Err(Error::state(format!(
                "unsupported schema version {}",
                ws.schema_version
            )));
        }
        let (instances, pairs, audit) = ws.pool.clone().into_parts();
        Pool::from_parts(instances, pairs, audit)?;
        Ok(ws)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::save_canonical(path, self)
    }

    fn require_ingest_phase(&self) -> Result<()> {
        if self.phase != Phase::Ingested {
            return Err(Error::state(
                "instances can only be added before the run starts",
            ));
        }
        Ok(())
    }

    pub fn ingest(&mut self, path: &Path) -> Result<usize> {
        self.require_ingest_phase()?;
        store::ingest(&mut self.pool, path)
    }

    pub fn add_instances(&mut self, instances: Vec<Instance>) -> Result<usize> {
        self.require_ingest_phase()?;
        let n = instances.len();
        for inst in instances {
            self.pool.insert(inst)?;
        }
        Ok(n)
    }

    pub fn job(&self) -> Option<&Job> {
        match &self.phase {
            Phase::Running(j) => Some(j),
            _ => None,
        }
    }

    /// True once the bootstrap learner exists.
    pub fn is_bootstrapped(&self) -> bool {
        match &self.phase {
            Phase::Ingested => false,
            Phase::Running(j) => j.kind == JobKind::Iteration,
            Phase::Cluster | Phase::Done => true,
        }
    }

    /// Instances whose teacher call failed at least `max_attempts` times.
    pub fn quarantined(&self, max_attempts: usize) -> BTreeSet<&str> {
        let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
        for f in &self.distillation_failures {
            *failures.entry(f.instance_id.as_str()).or_default() += 1;
        }
        failures
            .into_iter()
            .filter(|&(_, n)| max_attempts > 0 && n >= max_attempts)
            .map(|(id, _)| id)
            .collect()
    }

    /// True once any active-learning selection has been made; the strategy
    /// is fixed from then on.
    pub fn iterations_started(&self) -> bool {
        match &self.phase {
            Phase::Running(j) if j.kind == JobKind::Iteration => {
                j.iteration > 1 || j.stage != Stage::Select || j.round > 0
            }
            Phase::Done => true,
            _ => self.loop_state.iteration > 0,
        }
    }

    /// Applies a verification decision, stamping it with the run's clock.
    pub fn decide(&mut self, id: u64, req: DecisionRequest) -> Result<VerificationItem> {
        let at = self.clock.now();
        Ok(self.queue.decide(&mut self.pool, id, req, at)?.0)
    }

    pub fn latest_metrics(&self) -> Option<&MetricsReport> {
        self.history.iter().rev().find_map(|h| h.metrics.as_ref())
    }

    /// Items of `job` that were accepted.
    fn accepted(&self, job: &Job) -> usize {
        let prov = self.provenance(job.kind);
        self.queue
            .items()
            .iter()
            .filter(|i| {
                i.supersedes.is_none() && i.iteration == job.iteration && i.provenance == prov
            })
            .filter(|i| matches!(i.status, ItemStatus::Approved | ItemStatus::Edited))
            .count()
    }

    fn job_items<'a>(&'a self, job: &'a Job) -> impl Iterator<Item = &'a VerificationItem> + 'a {
        let prov = self.provenance(job.kind);
        self.queue.items().iter().filter(move |i| {
            i.supersedes.is_none() && i.iteration == job.iteration && i.provenance == prov
        })
    }

    fn provenance(&self, kind: JobKind) -> Provenance {
        match kind {
            JobKind::Test => Provenance::Test,
            JobKind::Bootstrap => Provenance::Bootstrap,
            JobKind::Iteration => self.loop_state.strategy.into(),
        }
    }

    /// Pairs the learner trains on, as (input, target), sorted by id.
    pub fn training_examples(&self) -> Vec<(String, String)> {
        self.pool
            .training_pairs()
            .map(|p| (p.input_text.clone(), p.target_text.clone()))
            .collect()
    }

    /// Checks the budget ledger, count conservation, audit chains and the
    /// pair/verification correspondence.
    pub fn check_invariants(&self) -> Result<()> {
        let l = &self.loop_state;
        if l.budget_initial - l.budget_remaining != l.batch_size * l.iteration as usize {
            return Err(Error::state(format!(
                "budget ledger: spent {} over {} iterations of {}",
                l.budget_initial - l.budget_remaining,
                l.iteration,
                l.batch_size
            )));
        }
        if self.pool.counts().total() != self.pool.len() {
            return Err(Error::state("state counts do not cover the pool"));
        }
        self.pool.check_audit()?;
        let mut accepted: BTreeMap<&str, usize> = BTreeMap::new();
        for i in self.queue.items() {
            if i.supersedes.is_none()
                && matches!(i.status, ItemStatus::Approved | ItemStatus::Edited)
            {
                *accepted.entry(i.instance_id.as_str()).or_default() += 1;
            }
        }
        let pairs: BTreeMap<&str, usize> = self
            .pool
            .pairs()
            .map(|p| (p.instance_id.as_str(), 1))
            .collect();
        if accepted != pairs {
            return Err(Error::state("labeled pairs and accepted items disagree"));
        }
        Ok(())
    }
}

/// Everything a step needs besides the workspace.
pub struct Engine {
    pub config: Config,
    pub providers: Providers,
    template: Template,
    cache: ScoreCache,
}

impl Engine {
    pub fn new(config: Config, providers: Providers) -> Result<Self> {
        config.validate()?;
        let template = config.template.build()?;
        Ok(Engine {
            config,
            providers,
            template,
            cache: ScoreCache::default(),
        })
    }

    fn seed_for(ws: &Workspace, label: &str, iteration: u32, round: u32) -> u64 {
        stable_hash(&[
            &ws.loop_state.rng_seed.to_le_bytes(),
            label.as_bytes(),
            &iteration.to_le_bytes(),
            &round.to_le_bytes(),
        ])
    }

    /// Advances the run by one stage.
    pub fn step(&mut self, ws: &mut Workspace) -> Result<StepOutcome> {
        match ws.phase.clone() {
            Phase::Ingested => self.start(ws).map(|_| StepOutcome::Progressed),
            Phase::Cluster => {
                if ws.loop_state.strategy == Strategy::Cluster && ws.cluster_model.is_none() {
                    self.fit_clusters(ws)?;
                }
                self.next_iteration(ws);
                Ok(StepOutcome::Progressed)
            }
            Phase::Done => Ok(StepOutcome::Done),
            Phase::Running(job) => match job.stage {
                Stage::Select => self.select(ws, job).map(|_| StepOutcome::Progressed),
                Stage::Distill => self.distill(ws, job).map(|_| StepOutcome::Progressed),
                Stage::Verify => self.verify(ws, job),
                Stage::Retrain => self.retrain(ws, job).map(|_| StepOutcome::Progressed),
            },
        }
    }

    fn start(&mut self, ws: &mut Workspace) -> Result<()> {
        if ws.pool.is_empty() {
            return Err(Error::state("pool is empty; ingest instances first"));
        }
        let l = &self.config.loop_;
        if l.test_size > 0 {
            let ids: Vec<String> = ws.pool.instances().map(|i| i.id.clone()).collect();
            if l.test_size > ids.len() {
                return Err(Error::state(format!(
                    "test set of {} exceeds pool of {}",
                    l.test_size,
                    ids.len()
                )));
            }
            let seed = Self::seed_for(ws, "test", 0, 0);
            let mut chosen = select_random(&ids, l.test_size, seed)?.chosen;
            chosen.sort();
            if l.remove_test_from_pool {
                for id in &chosen {
                    ws.pool.annotate(id, |i| i.held_out = true)?;
                }
            }
            ws.test_ids = chosen;
        }
        ws.phase = if l.test_size > 0 && l.remove_test_from_pool {
            Phase::Running(Job::new(JobKind::Test, 0, l.test_size))
        } else {
            Phase::Running(Job::new(JobKind::Bootstrap, 0, l.bootstrap))
        };
        Ok(())
    }

    fn next_iteration(&self, ws: &mut Workspace) {
        let l = &ws.loop_state;
        ws.phase = if l.budget_remaining >= l.batch_size {
            Phase::Running(Job::new(JobKind::Iteration, l.iteration + 1, l.batch_size))
        } else {
            Phase::Done
        };
    }

    /// Embeds every trainable instance and fits the cluster model.
    pub fn fit_clusters(&mut self, ws: &mut Workspace) -> Result<()> {
        let members: Vec<&Instance> = ws.pool.instances().filter(|i| !i.held_out).collect();
        let missing: Vec<(String, String)> = members
            .iter()
            .filter(|i| i.embedding.is_none())
            .map(|i| (i.id.clone(), i.source_text.clone()))
            .collect();
        let ids: Vec<String> = members.iter().map(|i| i.id.clone()).collect();
        if !missing.is_empty() {
            let texts: Vec<String> = missing.iter().map(|(_, t)| t.clone()).collect();
            let vectors = embed_all(&self.providers, &texts, EMBED_CHUNK)?;
            for ((id, _), v) in missing.into_iter().zip(vectors) {
                ws.pool.annotate(&id, |i| i.embedding = Some(v))?;
            }
        }
        let vectors: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| {
                ws.pool
                    .get(id)
                    .and_then(|i| i.embedding.clone())
                    .expect("embedded above")
            })
            .collect();
        let dim = vectors.first().map_or(0, Vec::len);
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(distal_core::Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            }
            .into());
        }
        let k = &self.config.kmeans;
        let params = KMeansParams {
            k: ws.loop_state.clusters,
            seed: Self::seed_for(ws, "kmeans", 0, 0),
            max_iter: k.max_iter,
            tol: k.tol,
            n_init: k.n_init,
        };
        let model = ClusterModel::fit(&ids, &vectors, &params)?;
        for (id, &c) in &model.assignments {
            ws.pool.annotate(id, |i| i.cluster_id = Some(c as u32))?;
        }
        tracing::info!(k = model.k, inertia = model.inertia, sizes = ?model.sizes(), "clusters fitted");
        ws.cluster_model = Some(model);
        Ok(())
    }

    fn select(&mut self, ws: &mut Workspace, mut job: Job) -> Result<()> {
        let want = job.target.saturating_sub(ws.accepted(&job));
        let candidates: Vec<String> = match job.kind {
            JobKind::Test => ws
                .test_ids
                .iter()
                .filter(|id| {
                    ws.pool
                        .get(id)
                        .is_some_and(|i| i.state == InstanceState::Unlabeled)
                })
                .cloned()
                .collect(),
            _ => {
                let quarantined = ws.quarantined(self.config.loop_.max_distill_attempts);
                ws.pool
                    .eligible_ids()
                    .into_iter()
                    .filter(|id| !job.excluded.contains(id) && !quarantined.contains(id.as_str()))
                    .collect()
            }
        };
        if candidates.len() < want && job.round == 0 && job.kind != JobKind::Test {
            return Err(distal_core::Error::InsufficientInstances {
                requested: want,
                available: candidates.len(),
            }
            .into());
        }
        let n = want.min(candidates.len());
        if n == 0 {
            if want > 0 {
                tracing::warn!(
                    iteration = job.iteration,
                    want,
                    "no candidates left for top-up"
                );
            }
            return self.finish_verification(ws, job);
        }

        let strategy = match job.kind {
            JobKind::Iteration => ws.loop_state.strategy,
            _ => Strategy::Random,
        };
        let label = match job.kind {
            JobKind::Test => "test",
            JobKind::Bootstrap => "bootstrap",
            JobKind::Iteration => "select",
        };
        let seed = Self::seed_for(ws, label, job.iteration, job.round);
        job.informativeness.clear();
        let result = match strategy {
            Strategy::Random => select_random(&candidates, n, seed)?,
            Strategy::Topn | Strategy::Cluster => {
                let items: Vec<(String, String)> = candidates
                    .iter()
                    .map(|id| {
                        (
                            id.clone(),
                            ws.pool.get(id).expect("candidate").source_text.clone(),
                        )
                    })
                    .collect();
                let out = score_batch(
                    &self.providers,
                    &self.config.attribute,
                    &items,
                    &ws.loop_state.learner_revision,
                    self.config.providers.concurrency,
                    &mut self.cache,
                )?;
                ws.scoring_failures.extend(out.failures);
                let mut r = if strategy == Strategy::Topn {
                    select_topn(&out.scores, n.min(out.scores.len()))?
                } else {
                    let model = ws.cluster_model.as_ref().ok_or_else(|| {
                        Error::state("no cluster model; run the cluster step first")
                    })?;
                    select_cluster(&out.scores, model, n)?
                };
                r.seed = seed;
                let chosen: BTreeSet<&String> = r.chosen.iter().collect();
                for s in &out.scores {
                    if chosen.contains(&s.instance_id) {
                        job.informativeness
                            .insert(s.instance_id.clone(), s.informativeness);
                    }
                }
                r
            }
        };
        for id in &result.chosen {
            let at = ws.clock.now();
            ws.pool
                .transition(id, InstanceState::Selected, job.iteration, at)?;
        }
        tracing::info!(
            kind = ?job.kind,
            iteration = job.iteration,
            round = job.round,
            chosen = result.chosen.len(),
            "selected"
        );
        ws.selections.push(SelectionRecord {
            kind: job.kind,
            iteration: job.iteration,
            round: job.round,
            result,
        });
        job.stage = Stage::Distill;
        ws.phase = Phase::Running(job);
        Ok(())
    }

    fn distill(&mut self, ws: &mut Workspace, mut job: Job) -> Result<()> {
        let ids: Vec<String> = ws
            .selections
            .last()
            .map(|s| s.result.chosen.clone())
            .unwrap_or_default()
            .into_iter()
            .filter(|id| {
                ws.pool
                    .get(id)
                    .is_some_and(|i| i.state == InstanceState::Selected)
            })
            .collect();
        let out = distill_batch(
            &mut ws.pool,
            &ids,
            &self.template,
            &self.providers,
            self.config.providers.concurrency,
            job.iteration,
            &mut ws.clock,
        )?;
        if job.kind != JobKind::Test {
            job.excluded
                .extend(out.failures.iter().map(|f| f.instance_id.clone()));
        }
        ws.distillation_failures.extend(out.failures);
        let prov = ws.provenance(job.kind);
        let at = ws.clock.now();
        let pool = &ws.pool;
        let metas: BTreeMap<String, ItemMeta> = out
            .candidates
            .iter()
            .map(|c| {
                let meta = ItemMeta {
                    cluster_id: pool.get(&c.instance_id).and_then(|i| i.cluster_id),
                    informativeness: job.informativeness.get(&c.instance_id).copied(),
                };
                (c.instance_id.clone(), meta)
            })
            .collect();
        ws.queue.enqueue(
            &mut ws.pool,
            &out.candidates,
            prov,
            job.iteration,
            at,
            |id| metas.get(id).copied().unwrap_or_default(),
        )?;
        job.stage = Stage::Verify;
        ws.phase = Phase::Running(job);
        Ok(())
    }

    fn verify(&mut self, ws: &mut Workspace, job: Job) -> Result<StepOutcome> {
        let pending: Vec<u64> = ws
            .job_items(&job)
            .filter(|i| i.status == ItemStatus::Pending)
            .map(|i| i.id)
            .collect();
        if !pending.is_empty() {
            let v = &self.config.verification;
            if !v.auto_approve {
                return Ok(StepOutcome::AwaitingVerification {
                    pending: pending.len(),
                });
            }
            for id in pending {
                let item = ws.queue.get(id).expect("pending item");
                let key = stable_hash(&[
                    &ws.loop_state.rng_seed.to_le_bytes(),
                    b"verify",
                    item.instance_id.as_bytes(),
                    &item.iteration.to_le_bytes(),
                ]);
                let reject = v.rejection_rate > 0.0
                    && (keyed_unit_noise(key) + 1.0) / 2.0 < v.rejection_rate;
                let req = if reject {
                    DecisionRequest::reject(v.annotator.clone())
                } else {
                    DecisionRequest::approve(v.annotator.clone())
                };
                ws.decide(id, req)?;
            }
        }
        self.finish_verification(ws, job)?;
        Ok(StepOutcome::Progressed)
    }

    /// Called once every item of the job is decided: schedules a top-up
    /// round if slots were lost, otherwise moves on.
    fn finish_verification(&mut self, ws: &mut Workspace, mut job: Job) -> Result<()> {
        if job.kind != JobKind::Test {
            let rejected: Vec<String> = ws
                .job_items(&job)
                .filter(|i| i.status == ItemStatus::Rejected)
                .map(|i| i.instance_id.clone())
                .collect();
            job.excluded.extend(rejected);
        }
        let accepted = ws.accepted(&job);
        let shortfall = job.target.saturating_sub(accepted);
        let attempted = job.stage != Stage::Select;
        if shortfall > 0 && attempted && job.round < self.config.loop_.max_topup_rounds {
            job.round += 1;
            job.stage = Stage::Select;
            ws.phase = Phase::Running(job);
            return Ok(());
        }
        if shortfall > 0 {
            tracing::warn!(kind = ?job.kind, iteration = job.iteration, shortfall, "job finished short");
        }
        if job.kind == JobKind::Test {
            ws.phase = Phase::Running(Job::new(JobKind::Bootstrap, 0, self.config.loop_.bootstrap));
        } else {
            job.stage = Stage::Retrain;
            ws.phase = Phase::Running(job);
        }
        Ok(())
    }

    fn retrain(&mut self, ws: &mut Workspace, job: Job) -> Result<()> {
        let examples = ws.training_examples();
        if !examples.is_empty() {
            let rev = self.providers.finetune(&examples)?;
            ws.loop_state.learner_revision = rev;
        }
        self.cache.retain_revision(&ws.loop_state.learner_revision);
        if job.kind == JobKind::Iteration {
            let l = &mut ws.loop_state;
            l.budget_remaining -= l.batch_size;
            l.iteration += 1;
        }
        let metrics = self.evaluate(ws)?;
        let items: Vec<&VerificationItem> = ws.job_items(&job).collect();
        let record = IterationRecord {
            iteration: job.iteration,
            strategy: ws.loop_state.strategy,
            budget_remaining: ws.loop_state.budget_remaining,
            learner_revision: ws.loop_state.learner_revision.clone(),
            training_pairs: examples.len(),
            accepted: ws.accepted(&job),
            rejected: items
                .iter()
                .filter(|i| i.status == ItemStatus::Rejected)
                .count(),
            metrics,
        };
        tracing::info!(
            iteration = record.iteration,
            budget_remaining = record.budget_remaining,
            training_pairs = record.training_pairs,
            "learner retrained"
        );
        ws.history.push(record);
        match job.kind {
            JobKind::Bootstrap => ws.phase = Phase::Cluster,
            _ => self.next_iteration(ws),
        }
        Ok(())
    }

    /// Judges the learner's outputs on the test set: an output counts as
    /// correct (and safe) when the scorer's adherence probability is at
    /// least one half. Returns the judgments and the outputs' tokens.
    pub fn judge_test_set(
        &mut self,
        ws: &mut Workspace,
    ) -> Result<Option<(Vec<Judgment>, Vec<String>)>> {
        if ws.test_ids.is_empty() {
            return Ok(None);
        }
        let items: Vec<(String, String)> = ws
            .test_ids
            .iter()
            .filter_map(|id| ws.pool.get(id).map(|i| (id.clone(), i.source_text.clone())))
            .collect();
        let out = score_batch(
            &self.providers,
            &self.config.attribute,
            &items,
            &ws.loop_state.learner_revision,
            self.config.providers.concurrency,
            &mut self.cache,
        )?;
        if !out.failures.is_empty() {
            tracing::warn!(
                failed = out.failures.len(),
                "test instances could not be scored"
            );
        }
        if out.scores.is_empty() {
            return Ok(None);
        }
        let mut judgments = Vec::new();
        let mut tokens = Vec::new();
        for s in &out.scores {
            let subgroup = ws
                .pool
                .get(&s.instance_id)
                .and_then(|i| i.subgroup.clone())
                .unwrap_or_else(|| "all".into());
            judgments.push(Judgment {
                instance_id: s.instance_id.clone(),
                subgroup,
                ok: s.p_adhere >= 0.5,
            });
            tokens.extend(tokenize(&s.generated_text));
        }
        Ok(Some((judgments, tokens)))
    }

    pub fn evaluate(&mut self, ws: &mut Workspace) -> Result<Option<MetricsReport>> {
        match self.judge_test_set(ws)? {
            Some((judgments, tokens)) => metrics_for(&judgments, tokens).map(Some),
            None => Ok(None),
        }
    }
}

/// Metrics for a judged test set, with each judgment doubling as the
/// safety flag.
pub fn metrics_for(judgments: &[Judgment], mut tokens: Vec<String>) -> Result<MetricsReport> {
    let flags: Vec<bool> = judgments.iter().map(|j| j.ok).collect();
    if tokens.is_empty() {
        tokens.push(String::new());
    }
    Ok(MetricsReport::compute(judgments, &flags, &tokens)?)
}

/// An engine bound to a workspace, optionally snapshotting after each step.
pub struct Orchestrator {
    pub engine: Engine,
    pub ws: Workspace,
    snapshot: Option<PathBuf>,
}

impl Orchestrator {
    pub fn new(engine: Engine, ws: Workspace) -> Self {
        Orchestrator {
            engine,
            ws,
            snapshot: None,
        }
    }

    pub fn with_snapshot(mut self, path: impl Into<PathBuf>) -> Self {
        self.snapshot = Some(path.into());
        self
    }

    pub fn save(&self) -> Result<()> {
        match &self.snapshot {
            Some(p) => self.ws.save(p),
            None => Ok(()),
        }
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let out = self.engine.step(&mut self.ws)?;
        if out == StepOutcome::Progressed {
            self.save()?;
        }
        Ok(out)
    }

    /// Steps until `done` holds, the run finishes, or verification blocks.
    pub fn run_until(&mut self, done: impl Fn(&Workspace) -> bool) -> Result<StepOutcome> {
        loop {
            if done(&self.ws) {
                return Ok(StepOutcome::Progressed);
            }
            match self.step()? {
                StepOutcome::Progressed => {}
                other => return Ok(other),
            }
        }
    }

    /// Test set and bootstrap.
    pub fn bootstrap(&mut self) -> Result<StepOutcome> {
        self.run_until(|ws| ws.is_bootstrapped())
    }

    /// Fits (or refits) clusters regardless of strategy.
    pub fn cluster(&mut self) -> Result<()> {
        if !matches!(
            self.ws.phase,
            Phase::Cluster
                | Phase::Running(Job {
                    kind: JobKind::Iteration,
                    ..
                })
                | Phase::Done
        ) {
            return Err(Error::state("bootstrap must finish before clustering"));
        }
        if matches!(self.ws.phase, Phase::Running(Job { stage, .. }) if stage != Stage::Select) {
            return Err(Error::state(
                "cannot recluster in the middle of an iteration",
            ));
        }
        self.engine.fit_clusters(&mut self.ws)?;
        self.save()
    }

    /// Runs one full iteration.
    pub fn iterate(&mut self) -> Result<StepOutcome> {
        if !self.ws.is_bootstrapped() {
            return Err(Error::state("run bootstrap first"));
        }
        if self.ws.phase == Phase::Done {
            return Ok(StepOutcome::Done);
        }
        let start = self.ws.loop_state.iteration;
        self.run_until(|ws| ws.loop_state.iteration > start || ws.phase == Phase::Done)
    }

    pub fn run(&mut self) -> Result<StepOutcome> {
        loop {
            match self.step()? {
                StepOutcome::Progressed => {}
                other => return Ok(other),
            }
        }
    }
}

/// Runs one copy of `base` per strategy to completion. The copies share
/// everything up to the first iteration: test set, bootstrap and clusters.
pub fn run_strategies(
    mut engine: Engine,
    mut base: Workspace,
    strategies: &[Strategy],
) -> Result<Vec<Workspace>> {
    if !engine.config.verification.auto_approve {
        return Err(Error::Config(
            "building all splits in one pass requires verification.auto_approve".into(),
        ));
    }
    while !base.is_bootstrapped() {
        engine.step(&mut base)?;
    }
    if base.cluster_model.is_none() && strategies.contains(&Strategy::Cluster) {
        engine.fit_clusters(&mut base)?;
    }
    let mut runs = Vec::new();
    for &s in strategies {
        let mut ws = base.clone();
        ws.loop_state.strategy = s;
        loop {
            match engine.step(&mut ws)? {
                StepOutcome::Progressed => {}
                StepOutcome::Done => break,
                StepOutcome::AwaitingVerification { .. } => {
                    return Err(Error::state("unexpected verification wait"))
                }
            }
        }
        runs.push(ws);
    }
    Ok(runs)
}

/// File name of each split.
pub fn split_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Random => "standard",
        Strategy::Topn => "topn_al",
        Strategy::Cluster => "cluster_al",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub files: BTreeMap<String, usize>,
    pub total: usize,
}

/// Exports one training split per run (bootstrap plus strategy pairs) and
/// the shared test set, after checking the runs share a bootstrap and test
/// set that is disjoint from every training split.
pub fn build_splits(runs: &[Workspace], out_dir: &Path) -> Result<SplitSummary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::state("no runs to export"))?;
    let ids_of = |ws: &Workspace, p: Provenance| -> BTreeSet<String> {
        ws.pool
            .pairs()
            .filter(|x| x.provenance == p)
            .map(|x| x.instance_id.clone())
            .collect()
    };
    let boot = ids_of(first, Provenance::Bootstrap);
    let test: BTreeSet<String> = first.test_ids.iter().cloned().collect();
    let mut seen = BTreeSet::new();
    for ws in runs {
        if !seen.insert(ws.loop_state.strategy) {
            return Err(Error::state(format!(
                "two runs use strategy {}",
                ws.loop_state.strategy
            )));
        }
        if ids_of(ws, Provenance::Bootstrap) != boot {
            return Err(Error::state("runs do not share bootstrap instances"));
        }
        if ws.test_ids != first.test_ids {
            return Err(Error::state("runs do not share a test set"));
        }
        for p in ws.pool.training_pairs() {
            if test.contains(&p.instance_id) {
                return Err(Error::state(format!(
                    "instance {} is in both the test set and a training split",
                    p.instance_id
                )));
            }
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = BTreeMap::new();
    for ws in runs {
        let s = ws.loop_state.strategy;
        let name = format!("{}.jsonl", split_name(s));
        let n = store::export_split(
            &ws.pool,
            &[Provenance::Bootstrap, s.into()],
            &out_dir.join(&name),
        )?;
        files.insert(name, n);
    }
    let n = store::export_split(
        &first.pool,
        &[Provenance::Test],
        &out_dir.join("test.jsonl"),
    )?;
    files.insert("test.jsonl".into(), n);
    let total = files.values().sum();
    Ok(SplitSummary { files, total })
}
