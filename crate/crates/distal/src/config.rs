//! Run configuration, loaded from a single TOML document.
//!
//! Every seed, quota, endpoint and decoding parameter lives here. Missing
//! sections fall back to defaults; unknown keys are rejected so typos
//! surface at startup.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use distal_core::select::{RegulatedAttribute, Strategy};
use distal_core::template::Template;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mock::{MockConfig, MockTransport};
use crate::providers::{LearnerParams, Providers, TeacherParams};
use crate::replay::{Recorder, Replayer};
use crate::transport::{
    Endpoint, EndpointConfig, HttpTransport, RetryPolicy, TokenBucket, Transport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub strategy: Strategy,
    pub state_dir: PathBuf,
    /// Stamp audit entries and decisions with a counter instead of wall
    /// time, making snapshots reproducible.
    pub logical_clock: bool,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub verification: VerificationConfig,
    pub attribute: RegulatedAttribute,
    pub template: TemplateConfig,
    pub kmeans: KMeansConfig,
    pub learner: LearnerParams,
    pub teacher: TeacherParams,
    pub providers: ProvidersConfig,
    pub mock: MockConfig,
    pub server: ServerConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            strategy: Strategy::Cluster,
            state_dir: PathBuf::from("distal-state"),
            logical_clock: false,
            loop_: LoopConfig::default(),
            verification: VerificationConfig::default(),
            attribute: RegulatedAttribute {
                name: "inoffensiveness".into(),
                adhere_index: 0,
                description: "output is socially acceptable".into(),
            },
            template: TemplateConfig::default(),
            kmeans: KMeansConfig::default(),
            learner: LearnerParams::default(),
            teacher: TeacherParams::default(),
            providers: ProvidersConfig::default(),
            mock: MockConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Labeling budget B.
    pub budget: usize,
    /// Annotation batch size N.
    pub batch_size: usize,
    /// Cluster count m.
    pub clusters: usize,
    /// Random instances labeled before the loop starts.
    pub bootstrap: usize,
    /// Size of the fixed test set carved out of the pool.
    pub test_size: usize,
    /// Whether test instances are excluded from training selection.
    pub remove_test_from_pool: bool,
    /// Re-selection rounds per iteration that refill slots lost to
    /// rejections or failed distillations.
    pub max_topup_rounds: u32,
    /// Failed teacher calls after which an instance is never selected again.
    pub max_distill_attempts: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            budget: 100,
            batch_size: 20,
            clusters: 10,
            bootstrap: 100,
            test_size: 400,
            remove_test_from_pool: true,
            max_topup_rounds: 3,
            max_distill_attempts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationConfig {
    /// Approve every candidate without a human.
    pub auto_approve: bool,
    pub annotator: String,
    /// Fraction of candidates the automatic verifier rejects, chosen by a
    /// seeded hash of the instance id.
    pub rejection_rate: f64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            auto_approve: false,
            annotator: "auto".into(),
            rejection_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    CounterNarration,
    StyleTransfer,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub kind: TemplateKind,
    pub task_directive: Option<String>,
    pub instruction: Option<String>,
    pub preamble: Option<String>,
    pub input_block: Option<String>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig {
            kind: TemplateKind::CounterNarration,
            task_directive: None,
            instruction: None,
            preamble: None,
            input_block: None,
        }
    }
}

impl TemplateConfig {
    pub fn build(&self) -> Result<Template> {
        let t = match self.kind {
            TemplateKind::CounterNarration => Template::counter_narration(),
            TemplateKind::StyleTransfer => Template::style_transfer(),
            TemplateKind::Custom => {
                let (Some(d), Some(i)) = (&self.task_directive, &self.instruction) else {
                    return Err(Error::Config(
                        "custom template needs task_directive and instruction".into(),
                    ));
                };
                return Template::with_input_block(
                    d.clone(),
                    i.clone(),
                    self.preamble.clone(),
                    self.input_block
                        .clone()
                        .unwrap_or_else(|| distal_core::template::DEFAULT_INPUT_BLOCK.into()),
                )
                .map_err(|e| Error::Config(e.to_string()));
            }
        };
        if self.task_directive.is_some() || self.instruction.is_some() || self.input_block.is_some()
        {
            return Err(Error::Config(
                "task_directive, instruction and input_block require kind = \"custom\"".into(),
            ));
        }
        match &self.preamble {
            Some(p) => Template::new(t.task_directive(), t.instruction(), Some(p.clone()))
                .map_err(|e| Error::Config(e.to_string())),
            None => Ok(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 300,
            tol: 1e-4,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSpec {
    pub url: String,
    pub token: Option<String>,
    /// Environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub health_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    /// Use the built-in deterministic providers for every endpoint.
    pub mock: bool,
    /// In-flight request limit for scoring and distillation.
    pub concurrency: usize,
    pub requests_per_second: Option<f64>,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    /// Append every provider exchange to this JSONL log.
    pub record: Option<PathBuf>,
    pub embed: Option<EndpointSpec>,
    pub generate: Option<EndpointSpec>,
    pub finetune: Option<EndpointSpec>,
    pub score: Option<EndpointSpec>,
    pub chat: Option<EndpointSpec>,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        ProvidersConfig {
            mock: false,
            concurrency: 4,
            requests_per_second: None,
            retry: RetryPolicy::default(),
            timeout_ms: 60_000,
            record: None,
            embed: None,
            generate: None,
            finetune: None,
            score: None,
            chat: None,
        }
    }
}

impl ProvidersConfig {
    fn spec(&self, e: Endpoint) -> Option<&EndpointSpec> {
        match e {
            Endpoint::Embed => self.embed.as_ref(),
            Endpoint::Generate => self.generate.as_ref(),
            Endpoint::Finetune => self.finetune.as_ref(),
            Endpoint::Score => self.score.as_ref(),
            Endpoint::Chat => self.chat.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Shared bearer token required by the API when set.
    pub token: Option<String>,
    /// Directory of static UI assets served at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            token: None,
            ui_dir: None,
        }
    }
}

impl Config {
    /// Reads and validates a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Config::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let l = &self.loop_;
        if l.batch_size == 0 {
            return bad("loop.batch_size must be at least 1");
        }
        if l.clusters == 0 {
            return bad("loop.clusters must be at least 1");
        }
        if self.providers.concurrency == 0 {
            return bad("providers.concurrency must be at least 1");
        }
        if self.providers.retry.attempts == 0 {
            return bad("providers.retry.attempts must be at least 1");
        }
        if let Some(r) = self.providers.requests_per_second {
            if r.is_nan() || r <= 0.0 {
                return bad("providers.requests_per_second must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.verification.rejection_rate) {
            return bad("verification.rejection_rate must be in [0, 1]");
        }
        if self.verification.annotator.trim().is_empty() {
            return bad("verification.annotator must be non-empty");
        }
        if self.kmeans.n_init == 0 || self.kmeans.max_iter == 0 {
            return bad("kmeans.n_init and kmeans.max_iter must be at least 1");
        }
        if self.kmeans.tol.is_nan() || self.kmeans.tol < 0.0 {
            return bad("kmeans.tol must be non-negative");
        }
        if !(self.teacher.temperature >= 0.0 && self.learner.temperature >= 0.0) {
            return bad("temperatures must be non-negative");
        }
        if self.mock.embed_dim == 0 {
            return bad("mock.embed_dim must be at least 1");
        }
        self.template.build()?;
        if !self.providers.mock {
            for e in Endpoint::ALL {
                match self.providers.spec(e) {
                    Some(s) if !s.url.is_empty() => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "providers.{e}.url is required unless providers.mock = true"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn state_file(&self) -> PathBuf {
        self.state_dir.join("state.json")
    }

    /// Resolves the configured transport, wrapped in a recorder when a
    /// record path is set.
    pub fn transport(&self) -> Result<Arc<dyn Transport>> {
        let base: Arc<dyn Transport> = if self.providers.mock {
            Arc::new(MockTransport::new(
                self.mock.clone(),
                self.template.build()?,
            ))
        } else {
            let mut endpoints = Vec::new();
            for e in Endpoint::ALL {
                let spec = self
                    .providers
                    .spec(e)
                    .ok_or_else(|| Error::Config(format!("providers.{e} missing")))?;
                let token = match (&spec.token, &spec.token_env) {
                    (Some(t), _) => Some(t.clone()),
                    (None, Some(var)) => Some(std::env::var(var).map_err(|_| {
                        Error::Config(format!("environment variable {var} is not set"))
                    })?),
                    (None, None) => None,
                };
                endpoints.push((
                    e,
                    EndpointConfig {
                        url: spec.url.clone(),
                        token,
                        health_url: spec.health_url.clone(),
                    },
                ));
            }
            let limiter = self
                .providers
                .requests_per_second
                .map(|r| TokenBucket::new(r, self.providers.concurrency as u32));
            Arc::new(HttpTransport::new(
                endpoints,
                Duration::from_millis(self.providers.timeout_ms),
                limiter,
            ))
        };
        match &self.providers.record {
            Some(path) => Ok(Arc::new(Recorder::new(base, path)?)),
            None => Ok(base),
        }
    }

    /// Transport serving recorded exchanges from `log`.
    pub fn replay_transport(log: &Path) -> Result<Arc<dyn Transport>> {
        Ok(Arc::new(Replayer::load(log)?))
    }

    pub fn providers(&self, transport: Arc<dyn Transport>) -> Providers {
        Providers::new(
            transport,
            self.providers.retry,
            self.learner.clone(),
            self.teacher.clone(),
        )
    }
}
