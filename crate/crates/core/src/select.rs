//! Informativeness scores and acquisition strategies.
//!
//! An instance's informativeness is the probability mass the auxiliary
//! scorer puts on *violating* the regulated attribute for the learner's
//! interim output: `1 - softmax(logits)[adhere_index]`.

use alloc::{
    collections::BTreeMap,
    string::{String, ToString},
    vec::Vec,
};
use core::{cmp::Ordering, fmt, str::FromStr};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::ClusterModel;
use crate::math::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Topn,
    Cluster,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Topn, Strategy::Cluster];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Topn => "topn",
            Strategy::Cluster => "cluster",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "topn" => Ok(Strategy::Topn),
            "cluster" => Ok(Strategy::Cluster),
            other => Err(Error::InvalidSpec(alloc::format!(
                "unknown strategy {other}"
            ))),
        }
    }
}

/// A property the learner's outputs are expected to preserve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegulatedAttribute {
    pub name: String,
    /// Position of the "attribute satisfied" class in the scorer's logits.
    pub adhere_index: usize,
    #[serde(default)]
    pub description: String,
}

impl RegulatedAttribute {
    pub fn new(name: impl Into<String>, adhere_index: usize) -> Self {
        RegulatedAttribute {
            name: name.into(),
            adhere_index,
            description: String::new(),
        }
    }

    /// Probability of adherence under the softmax of `logits`.
    pub fn adherence(&self, logits: &[f64]) -> Result<f64> {
        if self.adhere_index >= logits.len() {
            return Err(Error::AdhereIndex {
                index: self.adhere_index,
                arity: logits.len(),
            });
        }
        Ok(softmax(logits)?[self.adhere_index])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub instance_id: String,
    pub generated_text: String,
    pub logits: Vec<f64>,
    pub p_adhere: f64,
    pub informativeness: f64,
}

impl AttributeScore {
    pub fn from_logits(
        instance_id: impl Into<String>,
        generated_text: impl Into<String>,
        logits: Vec<f64>,
        attr: &RegulatedAttribute,
    ) -> Result<Self> {
        let p_adhere = attr.adherence(&logits)?;
        Ok(AttributeScore {
            instance_id: instance_id.into(),
            generated_text: generated_text.into(),
            logits,
            p_adhere,
            informativeness: (1.0 - p_adhere).clamp(0.0, 1.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub chosen: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_cluster_quota: Option<BTreeMap<usize, usize>>,
    pub seed: u64,
}

/// Descending informativeness, ascending id.
fn by_informativeness(a: &AttributeScore, b: &AttributeScore) -> Ordering {
    b.informativeness
        .total_cmp(&a.informativeness)
        .then_with(|| a.instance_id.cmp(&b.instance_id))
}

/// Uniform sample of `n` ids without replacement.
pub fn select_random(ids: &[String], n: usize, seed: u64) -> Result<SelectionResult> {
    if n > ids.len() {
        return Err(Error::InsufficientInstances {
            requested: n,
            available: ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, ids.len(), n)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();
    Ok(SelectionResult {
        strategy: Strategy::Random,
        chosen,
        per_cluster_quota: None,
        seed,
    })
}

/// The `n` most informative instances.
pub fn select_topn(scores: &[AttributeScore], n: usize) -> Result<SelectionResult> {
    if n > scores.len() {
        return Err(Error::InsufficientInstances {
            requested: n,
            available: scores.len(),
        });
    }
    let mut ranked: Vec<&AttributeScore> = scores.iter().collect();
    ranked.sort_by(|a, b| by_informativeness(a, b));
    Ok(SelectionResult {
        strategy: Strategy::Topn,
        chosen: ranked
            .into_iter()
            .take(n)
            .map(|s| s.instance_id.clone())
            .collect(),
        per_cluster_quota: None,
        seed: 0,
    })
}

/// Hands out `slots` one per cluster per round, largest remaining capacity
/// first (lowest index on ties), until the slots or the capacity run out.
fn distribute(quota: &mut [usize], available: &[usize], mut slots: usize) {
    while slots > 0 {
        let mut open: Vec<usize> = (0..quota.len())
            .filter(|&c| available[c] > quota[c])
            .collect();
        if open.is_empty() {
            return;
        }
        open.sort_by(|&a, &b| {
            (available[b] - quota[b])
                .cmp(&(available[a] - quota[a]))
                .then(a.cmp(&b))
        });
        for c in open.into_iter().take(slots) {
            quota[c] += 1;
            slots -= 1;
        }
    }
}

/// Per-cluster quotas for a batch of `n` given the candidate count of each
/// cluster.
///
/// Every cluster starts at `n / k`. The `n % k` remainder slots go one each
/// to the clusters with the most remaining candidates; any cluster holding
/// fewer candidates than its quota then hands its shortfall on by the same
/// rule.
pub fn cluster_quotas(available: &[usize], n: usize) -> Vec<usize> {
    let k = available.len();
    if k == 0 {
        return Vec::new();
    }
    let mut quota = alloc::vec![n / k; k];
    let mut remainder = n % k;
    // Remainder first, against capacity left after the base quota.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        available[b]
            .saturating_sub(quota[b])
            .cmp(&available[a].saturating_sub(quota[a]))
            .then(a.cmp(&b))
    });
    for c in order {
        if remainder == 0 {
            break;
        }
        quota[c] += 1;
        remainder -= 1;
    }
    let mut shortfall = 0;
    for (q, &a) in quota.iter_mut().zip(available) {
        if *q > a {
            shortfall += *q - a;
            *q = a;
        }
    }
    distribute(&mut quota, available, shortfall);
    quota
}

/// Top-quota instances by informativeness within each cluster.
pub fn select_cluster(
    scores: &[AttributeScore],
    model: &ClusterModel,
    n: usize,
) -> Result<SelectionResult> {
    let mut by_cluster: Vec<Vec<&AttributeScore>> = (0..model.k).map(|_| Vec::new()).collect();
    for s in scores {
        let c = model
            .cluster_of(&s.instance_id)
            .ok_or_else(|| Error::Unassigned(s.instance_id.to_string()))?;
        by_cluster[c].push(s);
    }
    let available: Vec<usize> = by_cluster.iter().map(Vec::len).collect();
    let quota = cluster_quotas(&available, n);

    let mut chosen = Vec::new();
    let mut per_cluster = BTreeMap::new();
    for (c, members) in by_cluster.iter_mut().enumerate() {
        members.sort_by(|a, b| by_informativeness(a, b));
        chosen.extend(members.iter().take(quota[c]).map(|s| s.instance_id.clone()));
        per_cluster.insert(c, quota[c]);
    }
    Ok(SelectionResult {
        strategy: Strategy::Cluster,
        chosen,
        per_cluster_quota: Some(per_cluster),
        seed: model.seed,
    })
}
