//! Candidate targets from the teacher.

use std::thread;
use std::time::Instant;

use distal_core::pool::{InstanceState, Pool};
use distal_core::template::Template;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::Result;
use crate::providers::{ChatReply, Providers};
use crate::transport::{ProviderError, ProviderErrorKind};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderMeta {
    pub model: String,
    /// Zero under a logical clock.
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillationCandidate {
    pub instance_id: String,
    pub prompt: String,
    pub candidate_text: String,
    pub provider_meta: ProviderMeta,
    pub created_at: u64,
}

impl DistillationCandidate {
    #[doc(hidden)]
    pub fn for_test(id: &str, text: &str) -> Self {
        DistillationCandidate {
            instance_id: id.into(),
            prompt: String::new(),
            candidate_text: text.into(),
            provider_meta: ProviderMeta::default(),
            created_at: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillationFailure {
    pub instance_id: String,
    pub iteration: u32,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillOutcome {
    pub candidates: Vec<DistillationCandidate>,
    pub failures: Vec<DistillationFailure>,
}

/// Asks the teacher for a target for every `selected` instance in `ids`.
/// Successes move to `distilled`; failures go back to `unlabeled` with a
/// failure record. A configuration error, or an outage that failed every
/// one of two or more calls, aborts the batch and leaves the pool untouched.
pub fn distill_batch(
    pool: &mut Pool,
    ids: &[String],
    template: &Template,
    providers: &Providers,
    concurrency: usize,
    iteration: u32,
    clock: &mut Clock,
) -> Result<DistillOutcome> {
    let mut jobs = Vec::with_capacity(ids.len());
    for id in ids {
        let inst = pool
            .get(id)
            .ok_or_else(|| distal_core::Error::UnknownInstance(id.clone()))?;
        if inst.state != InstanceState::Selected {
            return Err(distal_core::Error::IllegalTransition {
                id: id.clone(),
                from: inst.state,
                to: InstanceState::Distilled,
            }
            .into());
        }
        jobs.push((id.clone(), template.render(&inst.source_text)));
    }
    if jobs.is_empty() {
        return Ok(DistillOutcome::default());
    }

    let call = |prompt: &str| -> (std::result::Result<ChatReply, ProviderError>, u64) {
        let start = Instant::now();
        let r = providers.chat(prompt);
        (r, start.elapsed().as_millis() as u64)
    };
    let replies: Vec<_> = if concurrency <= 1 || jobs.len() < 2 {
        jobs.iter().map(|(_, p)| call(p)).collect()
    } else {
        let chunk = jobs.len().div_ceil(concurrency);
        thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|(_, p)| call(p)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("distillation worker panicked"))
                .collect()
        })
    };

    if let Some((Err(e), _)) = replies
        .iter()
        .find(|(r, _)| matches!(r, Err(e) if e.kind == ProviderErrorKind::Config))
    {
        return Err(e.clone().into());
    }
    if let Some(Err(e)) = replies.iter().map(|(r, _)| r).find(|r| r.is_err()) {
        if replies.len() > 1
            && replies
                .iter()
                .all(|(r, _)| matches!(r, Err(e) if e.is_outage()))
        {
            return Err(e.clone().into());
        }
    }

    let mut out = DistillOutcome::default();
    for ((id, prompt), (reply, latency)) in jobs.into_iter().zip(replies) {
        let at = clock.now();
        match reply {
            Ok(r) if !r.content.trim().is_empty() => {
                pool.transition(&id, InstanceState::Distilled, iteration, at)?;
                out.candidates.push(DistillationCandidate {
                    instance_id: id,
                    prompt,
                    candidate_text: r.content,
                    provider_meta: ProviderMeta {
                        model: providers.teacher.model.clone(),
                        latency_ms: if clock.logical { 0 } else { latency },
                        prompt_tokens: r.prompt_tokens,
                        completion_tokens: r.completion_tokens,
                    },
                    created_at: at,
                });
            }
            other => {
                let error = match other {
                    Err(e) => e.to_string(),
                    Ok(_) => "teacher returned empty content".into(),
                };
                tracing::warn!(instance = %id, %error, "distillation failed");
                pool.transition(&id, InstanceState::Unlabeled, iteration, at)?;
                out.failures.push(DistillationFailure {
                    instance_id: id,
                    iteration,
                    error,
                });
            }
        }
    }
    Ok(out)
}
