//! Unlabeled pool, labeled set and the instance lifecycle.
//!
//! An [`Instance`] moves `unlabeled -> selected -> distilled ->
//! pending_verification -> {labeled | rejected}`; the only backward edge is
//! `rejected -> unlabeled`, which makes a rejected instance selectable again.
//! Every transition is appended to the audit log.

use alloc::{
    collections::BTreeMap,
    string::{String, ToString},
    vec::Vec,
};
use core::{fmt, str::FromStr};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::select::Strategy;

/// Tolerance on the Euclidean norm of stored embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Unlabeled,
    Selected,
    Distilled,
    PendingVerification,
    Labeled,
    Rejected,
}

impl InstanceState {
    pub const ALL: [InstanceState; 6] = [
        InstanceState::Unlabeled,
        InstanceState::Selected,
        InstanceState::Distilled,
        InstanceState::PendingVerification,
        InstanceState::Labeled,
        InstanceState::Rejected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceState::Unlabeled => "unlabeled",
            InstanceState::Selected => "selected",
            InstanceState::Distilled => "distilled",
            InstanceState::PendingVerification => "pending_verification",
            InstanceState::Labeled => "labeled",
            InstanceState::Rejected => "rejected",
        }
    }

    /// Whether the lifecycle permits moving from `self` to `to`.
    ///
    /// `selected -> unlabeled` is allowed as well: a failed distillation
    /// hands the instance back to the pool without consuming budget.
    pub fn can_transition_to(self, to: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, to),
            (Unlabeled, Selected)
                | (Selected, Distilled)
                | (Selected, Unlabeled)
                | (Distilled, PendingVerification)
                | (PendingVerification, Labeled)
                | (PendingVerification, Rejected)
                | (Rejected, Unlabeled)
        )
    }
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub source_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<u32>,
    pub state: InstanceState,
    /// Member of the fixed test set; never eligible for training selection.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub held_out: bool,
}

impl Instance {
    pub fn new(id: impl Into<String>, source_text: impl Into<String>) -> Self {
        Instance {
            id: id.into(),
            source_text: source_text.into(),
            subgroup: None,
            embedding: None,
            cluster_id: None,
            state: InstanceState::Unlabeled,
            held_out: false,
        }
    }

    pub fn with_subgroup(mut self, subgroup: impl Into<String>) -> Self {
        self.subgroup = Some(subgroup.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidInstance {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.source_text.is_empty() {
            return Err(invalid("empty source text"));
        }
        if let Some(e) = &self.embedding {
            if (crate::math::norm(e) - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(invalid("embedding is not unit norm"));
            }
        }
        if self.cluster_id.is_some() && self.embedding.is_none() {
            return Err(invalid("cluster id without embedding"));
        }
        Ok(())
    }

    /// Eligible for training selection.
    pub fn is_eligible(&self) -> bool {
        self.state == InstanceState::Unlabeled && !self.held_out
    }
}

/// Where a labeled pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Bootstrap,
    Random,
    Topn,
    Cluster,
    /// Fixed evaluation set; never part of the learner's training data.
    Test,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Bootstrap => "bootstrap",
            Provenance::Random => "random",
            Provenance::Topn => "topn",
            Provenance::Cluster => "cluster",
            Provenance::Test => "test",
        }
    }

    pub fn is_training(self) -> bool {
        self != Provenance::Test
    }
}

impl From<Strategy> for Provenance {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Random => Provenance::Random,
            Strategy::Topn => Provenance::Topn,
            Strategy::Cluster => Provenance::Cluster,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bootstrap" => Provenance::Bootstrap,
            "random" => Provenance::Random,
            "topn" => Provenance::Topn,
            "cluster" => Provenance::Cluster,
            "test" => Provenance::Test,
            other => {
                return Err(Error::InvalidSpec(alloc::format!(
                    "unknown provenance {other}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approved,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub instance_id: String,
    pub input_text: String,
    pub target_text: String,
    pub provenance: Provenance,
    pub iteration: u32,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub editor_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub instance_id: String,
    pub from: InstanceState,
    pub to: InstanceState,
    pub iteration: u32,
    /// Milliseconds since the Unix epoch, or a logical tick in simulations.
    pub at: u64,
}

/// Per-state instance counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub unlabeled: usize,
    pub selected: usize,
    pub distilled: usize,
    pub pending_verification: usize,
    pub labeled: usize,
    pub rejected: usize,
}

impl StateCounts {
    pub fn total(&self) -> usize {
        self.unlabeled
            + self.selected
            + self.distilled
            + self.pending_verification
            + self.labeled
            + self.rejected
    }

    fn bump(&mut self, s: InstanceState) {
        match s {
            InstanceState::Unlabeled => self.unlabeled += 1,
            InstanceState::Selected => self.selected += 1,
            InstanceState::Distilled => self.distilled += 1,
            InstanceState::PendingVerification => self.pending_verification += 1,
            InstanceState::Labeled => self.labeled += 1,
            InstanceState::Rejected => self.rejected += 1,
        }
    }
}

/// In-memory pool: instances and labeled pairs keyed by instance id, plus the
/// append-only audit log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    instances: BTreeMap<String, Instance>,
    pairs: BTreeMap<String, LabeledPair>,
    audit: Vec<AuditEntry>,
}

impl Pool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a pool from its parts, re-checking every invariant.
    pub fn from_parts(
        instances: Vec<Instance>,
        pairs: Vec<LabeledPair>,
        audit: Vec<AuditEntry>,
    ) -> Result<Self> {
        let mut pool = Pool::new();
        for inst in instances {
            pool.insert(inst)?;
        }
        for pair in pairs {
            pool.check_pair(&pair)?;
            if pool
                .pairs
                .insert(pair.instance_id.clone(), pair.clone())
                .is_some()
            {
                return Err(Error::DuplicateId(pair.instance_id));
            }
        }
        pool.audit = audit;
        Ok(pool)
    }

    pub fn insert(&mut self, instance: Instance) -> Result<()> {
        instance.validate()?;
        if self.instances.contains_key(&instance.id) {
            return Err(Error::DuplicateId(instance.id));
        }
        self.instances.insert(instance.id.clone(), instance);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.get(id)
    }

    /// Instances in ascending id order.
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values()
    }

    /// Mutable access for annotating embeddings, clusters or the held-out
    /// flag. State changes must go through [`Pool::transition`].
    pub fn annotate<F>(&mut self, id: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Instance),
    {
        let inst = self
            .instances
            .get_mut(id)
            .ok_or_else(|| Error::UnknownInstance(id.to_string()))?;
        let state = inst.state;
        f(inst);
        inst.state = state;
        inst.validate()
    }

    pub fn transition(
        &mut self,
        id: &str,
        to: InstanceState,
        iteration: u32,
        at: u64,
    ) -> Result<&Instance> {
        let seq = self.audit.len() as u64;
        let inst = self
            .instances
            .get_mut(id)
            .ok_or_else(|| Error::UnknownInstance(id.to_string()))?;
        let from = inst.state;
        if !from.can_transition_to(to) {
            return Err(Error::IllegalTransition {
                id: id.to_string(),
                from,
                to,
            });
        }
        inst.state = to;
        self.audit.push(AuditEntry {
            seq,
            instance_id: id.to_string(),
            from,
            to,
            iteration,
            at,
        });
        Ok(inst)
    }

    fn check_pair(&self, pair: &LabeledPair) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidPair {
            id: pair.instance_id.clone(),
            reason: reason.to_string(),
        };
        let inst = self
            .instances
            .get(&pair.instance_id)
            .ok_or_else(|| Error::UnknownInstance(pair.instance_id.clone()))?;
        if inst.state != InstanceState::Labeled {
            return Err(invalid("instance is not labeled"));
        }
        if pair.target_text.is_empty() {
            return Err(invalid("empty target text"));
        }
        Ok(())
    }

    /// Records the labeled pair of an instance already in state `labeled`.
    pub fn add_pair(&mut self, pair: LabeledPair) -> Result<()> {
        self.check_pair(&pair)?;
        if self.pairs.contains_key(&pair.instance_id) {
            return Err(Error::DuplicateId(pair.instance_id));
        }
        self.pairs.insert(pair.instance_id.clone(), pair);
        Ok(())
    }

    /// Replaces the target of an existing pair after a human correction.
    pub fn amend_pair(
        &mut self,
        id: &str,
        target_text: String,
        editor_note: Option<String>,
    ) -> Result<()> {
        if target_text.is_empty() {
            return Err(Error::InvalidPair {
                id: id.to_string(),
                reason: "empty target text".to_string(),
            });
        }
        let pair = self
            .pairs
            .get_mut(id)
            .ok_or_else(|| Error::UnknownInstance(id.to_string()))?;
        pair.target_text = target_text;
        pair.decision = Decision::Edited;
        pair.editor_note = editor_note;
        Ok(())
    }

    pub fn pair(&self, id: &str) -> Option<&LabeledPair> {
        self.pairs.get(id)
    }

    /// Labeled pairs in ascending instance-id order.
    pub fn pairs(&self) -> impl Iterator<Item = &LabeledPair> {
        self.pairs.values()
    }

    /// Pairs the learner trains on (everything except the test set).
    pub fn training_pairs(&self) -> impl Iterator<Item = &LabeledPair> {
        self.pairs.values().filter(|p| p.provenance.is_training())
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn counts(&self) -> StateCounts {
        let mut c = StateCounts::default();
        for inst in self.instances.values() {
            c.bump(inst.state);
        }
        c
    }

    /// Ids of instances eligible for training selection, ascending.
    pub fn eligible_ids(&self) -> Vec<String> {
        self.instances
            .values()
            .filter(|i| i.is_eligible())
            .map(|i| i.id.clone())
            .collect()
    }

    pub fn ids_in_state(&self, state: InstanceState) -> Vec<String> {
        self.instances
            .values()
            .filter(|i| i.state == state)
            .map(|i| i.id.clone())
            .collect()
    }

    /// Checks that every labeled instance has exactly one pair and a full
    /// transition chain in the audit log ending in `labeled`.
    pub fn check_audit(&self) -> Result<()> {
        for inst in self.instances.values() {
            let has_pair = self.pairs.contains_key(&inst.id);
            if (inst.state == InstanceState::Labeled) != has_pair {
                return Err(Error::InvalidPair {
                    id: inst.id.clone(),
                    reason: "labeled state and pair presence disagree".to_string(),
                });
            }
            if inst.state != InstanceState::Labeled {
                continue;
            }
            let chain: Vec<(InstanceState, InstanceState)> = self
                .audit
                .iter()
                .filter(|e| e.instance_id == inst.id)
                .map(|e| (e.from, e.to))
                .collect();
            let mut cur = InstanceState::Unlabeled;
            for &(from, to) in &chain {
                if from != cur || !from.can_transition_to(to) {
                    return Err(Error::InvalidPair {
                        id: inst.id.clone(),
                        reason: "broken transition chain".to_string(),
                    });
                }
                cur = to;
            }
            if cur != InstanceState::Labeled {
                return Err(Error::InvalidPair {
                    id: inst.id.clone(),
                    reason: "transition chain does not end in labeled".to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Vec<Instance>, Vec<LabeledPair>, Vec<AuditEntry>) {
        (
            self.instances.into_values().collect(),
            self.pairs.into_values().collect(),
            self.audit,
        )
    }
}
