//! Human verification queue.
//!
//! Distilled candidates wait here as pending items until an annotator
//! approves, edits or rejects them. Decided items never change; a later
//! correction is recorded as a new item that supersedes the old one.

use distal_core::pool::{Decision, InstanceState, LabeledPair, Pool, Provenance};
use serde::{Deserialize, Serialize};

use crate::distill::DistillationCandidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Approved,
    Edited,
    Rejected,
}

impl ItemStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemStatus::Pending => "pending",
            ItemStatus::Approved => "approved",
            ItemStatus::Edited => "edited",
            ItemStatus::Rejected => "rejected",
        }
    }
}

impl std::str::FromStr for ItemStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pending" => Ok(ItemStatus::Pending),
            "approved" => Ok(ItemStatus::Approved),
            "edited" => Ok(ItemStatus::Edited),
            "rejected" => Ok(ItemStatus::Rejected),
            other => Err(format!("unknown status {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationItem {
    pub id: u64,
    pub instance_id: String,
    pub source_text: String,
    pub candidate_text: String,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at: Option<u64>,
    pub iteration: u32,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub informativeness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Approve,
    Edit,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: DecisionKind,
    #[serde(default)]
    pub final_text: Option<String>,
    pub annotator: String,
    #[serde(default)]
    pub note: Option<String>,
}

impl DecisionRequest {
    pub fn approve(annotator: impl Into<String>) -> Self {
        DecisionRequest {
            decision: DecisionKind::Approve,
            final_text: None,
            annotator: annotator.into(),
            note: None,
        }
    }

    pub fn reject(annotator: impl Into<String>) -> Self {
        DecisionRequest {
            decision: DecisionKind::Reject,
            ..Self::approve(annotator)
        }
    }

    pub fn edit(annotator: impl Into<String>, text: impl Into<String>) -> Self {
        DecisionRequest {
            decision: DecisionKind::Edit,
            final_text: Some(text.into()),
            ..Self::approve(annotator)
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerifyError {
    #[error("no verification item {0}")]
    NotFound(u64),
    #[error("item {id} is already {status}")]
    NotPending { id: u64, status: &'static str },
    #[error("edit requires final_text")]
    MissingText,
    #[error("edited text must differ from the candidate")]
    UnchangedEdit,
    #[error("annotator must be non-empty")]
    MissingAnnotator,
    #[error(transparent)]
    Pool(#[from] distal_core::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub pending: usize,
    pub approved: usize,
    pub edited: usize,
    pub rejected: usize,
}

impl StatusCounts {
    pub fn total(&self) -> usize {
        self.pending + self.approved + self.edited + self.rejected
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationQueue {
    items: Vec<VerificationItem>,
}

/// Selection metadata shown next to an item.
#[derive(Debug, Clone, Copy, Default)]
pub struct ItemMeta {
    pub cluster_id: Option<u32>,
    pub informativeness: Option<f64>,
}

impl VerificationQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn items(&self) -> &[VerificationItem] {
        &self.items
    }

    pub fn get(&self, id: u64) -> Option<&VerificationItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Adds one pending item per candidate and moves each instance to
    /// `pending_verification`. An instance with a pending or accepted item
    /// for the same iteration is skipped.
    pub fn enqueue(
        &mut self,
        pool: &mut Pool,
        candidates: &[DistillationCandidate],
        provenance: Provenance,
        iteration: u32,
        at: u64,
        meta: impl Fn(&str) -> ItemMeta,
    ) -> Result<usize, VerifyError> {
        let mut added = 0;
        for c in candidates {
            // A rejected item does not block a retry of the same instance.
            let queued = self.items.iter().any(|i| {
                i.instance_id == c.instance_id
                    && i.iteration == iteration
                    && i.supersedes.is_none()
                    && i.status != ItemStatus::Rejected
            });
            if queued {
                continue;
            }
            let source_text = pool
                .get(&c.instance_id)
                .ok_or_else(|| distal_core::Error::UnknownInstance(c.instance_id.clone()))?
                .source_text
                .clone();
            pool.transition(
                &c.instance_id,
                InstanceState::PendingVerification,
                iteration,
                at,
            )?;
            let m = meta(&c.instance_id);
            self.items.push(VerificationItem {
                id: self.items.len() as u64 + 1,
                instance_id: c.instance_id.clone(),
                source_text,
                candidate_text: c.candidate_text.clone(),
                status: ItemStatus::Pending,
                final_text: None,
                annotator: None,
                decided_at: None,
                iteration,
                provenance,
                cluster_id: m.cluster_id,
                informativeness: m.informativeness,
                note: None,
                supersedes: None,
            });
            added += 1;
        }
        Ok(added)
    }

    /// Applies a decision to a pending item. Approve and edit label the
    /// instance and return its new pair; reject sends the instance back to
    /// the unlabeled pool.
    pub fn decide(
        &mut self,
        pool: &mut Pool,
        id: u64,
        req: DecisionRequest,
        at: u64,
    ) -> Result<(VerificationItem, Option<LabeledPair>), VerifyError> {
        let idx = self
            .items
            .iter()
            .position(|i| i.id == id)
            .ok_or(VerifyError::NotFound(id))?;
        let item = &self.items[idx];
        if item.status != ItemStatus::Pending {
            return Err(VerifyError::NotPending {
                id,
                status: item.status.as_str(),
            });
        }
        if req.annotator.trim().is_empty() {
            return Err(VerifyError::MissingAnnotator);
        }
        let (status, final_text) = match req.decision {
            DecisionKind::Approve => (ItemStatus::Approved, Some(item.candidate_text.clone())),
            DecisionKind::Edit => {
                let text = req
                    .final_text
                    .clone()
                    .filter(|t| !t.is_empty())
                    .ok_or(VerifyError::MissingText)?;
                if text == item.candidate_text {
                    return Err(VerifyError::UnchangedEdit);
                }
                (ItemStatus::Edited, Some(text))
            }
            DecisionKind::Reject => (ItemStatus::Rejected, None),
        };

        let pair = match status {
            ItemStatus::Rejected => {
                pool.transition(
                    &item.instance_id,
                    InstanceState::Rejected,
                    item.iteration,
                    at,
                )?;
                pool.transition(
                    &item.instance_id,
                    InstanceState::Unlabeled,
                    item.iteration,
                    at,
                )?;
                None
            }
            _ => {
                pool.transition(
                    &item.instance_id,
                    InstanceState::Labeled,
                    item.iteration,
                    at,
                )?;
                let pair = LabeledPair {
                    instance_id: item.instance_id.clone(),
                    input_text: item.source_text.clone(),
                    target_text: final_text.clone().expect("set for approve/edit"),
                    provenance: item.provenance,
                    iteration: item.iteration,
                    decision: if status == ItemStatus::Edited {
                        Decision::Edited
                    } else {
                        Decision::Approved
                    },
                    editor_note: req.note.clone(),
                };
                pool.add_pair(pair.clone())?;
                Some(pair)
            }
        };

        let item = &mut self.items[idx];
        item.status = status;
        item.final_text = final_text;
        item.annotator = Some(req.annotator);
        item.decided_at = Some(at);
        item.note = req.note;
        Ok((item.clone(), pair))
    }

    /// Corrects an approved or edited item: a new edited item supersedes it
    /// and the labeled pair takes the corrected text.
    pub fn correct(
        &mut self,
        pool: &mut Pool,
        id: u64,
        final_text: String,
        annotator: String,
        at: u64,
    ) -> Result<VerificationItem, VerifyError> {
        let old = self.get(id).ok_or(VerifyError::NotFound(id))?.clone();
        if !matches!(old.status, ItemStatus::Approved | ItemStatus::Edited) {
            return Err(VerifyError::NotPending {
                id,
                status: old.status.as_str(),
            });
        }
        if final_text.is_empty() {
            return Err(VerifyError::MissingText);
        }
        if final_text == old.candidate_text || Some(&final_text) == old.final_text.as_ref() {
            return Err(VerifyError::UnchangedEdit);
        }
        pool.amend_pair(&old.instance_id, final_text.clone(), None)?;
        let item = VerificationItem {
            id: self.items.len() as u64 + 1,
            status: ItemStatus::Edited,
            final_text: Some(final_text),
            annotator: Some(annotator),
            decided_at: Some(at),
            note: None,
            supersedes: Some(id),
            ..old
        };
        self.items.push(item.clone());
        Ok(item)
    }

    /// Pending items, oldest first.
    pub fn pending(&self, iteration: Option<u32>) -> Vec<&VerificationItem> {
        self.filter(Some(ItemStatus::Pending), iteration)
    }

    pub fn filter(
        &self,
        status: Option<ItemStatus>,
        iteration: Option<u32>,
    ) -> Vec<&VerificationItem> {
        self.items
            .iter()
            .filter(|i| status.is_none_or(|s| i.status == s))
            .filter(|i| iteration.is_none_or(|k| i.iteration == k))
            .collect()
    }

    /// Status counts over originally enqueued items (superseding
    /// corrections excluded).
    pub fn counts(&self, iteration: Option<u32>) -> StatusCounts {
        let mut c = StatusCounts::default();
        for i in self
            .items
            .iter()
            .filter(|i| i.supersedes.is_none())
            .filter(|i| iteration.is_none_or(|k| i.iteration == k))
        {
            match i.status {
                ItemStatus::Pending => c.pending += 1,
                ItemStatus::Approved => c.approved += 1,
                ItemStatus::Edited => c.edited += 1,
                ItemStatus::Rejected => c.rejected += 1,
            }
        }
        c
    }
}
