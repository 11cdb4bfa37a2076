//! Informativeness scoring through the learner and the auxiliary scorer.

use std::collections::BTreeMap;
use std::thread;

use distal_core::select::{AttributeScore, RegulatedAttribute};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::Providers;
use crate::transport::{ProviderError, ProviderErrorKind};

/// An instance that could not be scored; it stays unlabeled and is left
/// out of this round's candidate set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringFailure {
    pub instance_id: String,
    pub revision: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreOutcome {
    /// Scores in input order.
    pub scores: Vec<AttributeScore>,
    pub failures: Vec<ScoringFailure>,
}

/// Scores keyed by (instance id, learner revision).
#[derive(Debug, Clone, Default)]
pub struct ScoreCache {
    entries: BTreeMap<(String, String), AttributeScore>,
}

impl ScoreCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops entries for every revision except `keep`.
    pub fn retain_revision(&mut self, keep: &str) {
        self.entries.retain(|(_, r), _| r == keep);
    }
}

/// Generates the learner's interim output for `text` and scores it.
pub fn score_instance(
    providers: &Providers,
    attr: &RegulatedAttribute,
    id: &str,
    text: &str,
    revision: &str,
) -> std::result::Result<AttributeScore, ScoreError> {
    let output = providers.generate(text, revision)?;
    let logits = providers.score(text, &output)?;
    AttributeScore::from_logits(id, output, logits, attr).map_err(ScoreError::Core)
}

#[derive(Debug)]
pub enum ScoreError {
    Provider(ProviderError),
    Core(distal_core::Error),
}

impl From<ProviderError> for ScoreError {
    fn from(e: ProviderError) -> Self {
        ScoreError::Provider(e)
    }
}

/// Scores `(id, text)` items with at most `concurrency` requests in flight.
/// Provider failures become [`ScoringFailure`] records; configuration
/// problems (no endpoint, bad adhere index) abort the whole batch, as does
/// an outage that fails every one of two or more calls.
pub fn score_batch(
    providers: &Providers,
    attr: &RegulatedAttribute,
    items: &[(String, String)],
    revision: &str,
    concurrency: usize,
    cache: &mut ScoreCache,
) -> Result<ScoreOutcome> {
    let todo: Vec<&(String, String)> = items
        .iter()
        .filter(|(id, _)| {
            !cache
                .entries
                .contains_key(&(id.clone(), revision.to_string()))
        })
        .collect();

    let results: Vec<(String, std::result::Result<AttributeScore, ScoreError>)> =
        if concurrency <= 1 || todo.len() < 2 {
            todo.iter()
                .map(|(id, text)| {
                    (
                        id.clone(),
                        score_instance(providers, attr, id, text, revision),
                    )
                })
                .collect()
        } else {
            let chunk = todo.len().div_ceil(concurrency);
            thread::scope(|s| {
                let handles: Vec<_> = todo
                    .chunks(chunk)
                    .map(|part| {
                        s.spawn(move || {
                            part.iter()
                                .map(|(id, text)| {
                                    (
                                        id.clone(),
                                        score_instance(providers, attr, id, text, revision),
                                    )
                                })
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("scoring worker panicked"))
                    .collect()
            })
        };

    let outage = |r: &std::result::Result<AttributeScore, ScoreError>| matches!(r, Err(ScoreError::Provider(e)) if e.is_outage());
    if let Some((_, Err(ScoreError::Provider(e)))) = results.first() {
        if results.len() > 1 && results.iter().all(|(_, r)| outage(r)) {
            return Err(e.clone().into());
        }
    }
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(score) => {
                cache.entries.insert((id, revision.to_string()), score);
            }
            Err(ScoreError::Core(e)) => return Err(Error::Config(e.to_string())),
            Err(ScoreError::Provider(e)) if e.kind == ProviderErrorKind::Config => {
                return Err(e.into())
            }
            Err(ScoreError::Provider(e)) => {
                tracing::warn!(instance = %id, error = %e, "scoring failed");
                failures.push(ScoringFailure {
                    instance_id: id,
                    revision: revision.to_string(),
                    error: e.to_string(),
                });
            }
        }
    }
    let scores = items
        .iter()
        .filter_map(|(id, _)| {
            cache
                .entries
                .get(&(id.clone(), revision.to_string()))
                .cloned()
        })
        .collect();
    Ok(ScoreOutcome { scores, failures })
}
