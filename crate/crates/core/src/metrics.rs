//! Evaluation quantities: per-subgroup error ratios and their population
//! variance, MTLD lexical diversity, and the SafeScore / CS-Score
//! percentages.

use alloc::{
    collections::{BTreeMap, BTreeSet},
    string::String,
    vec::Vec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default MTLD type-token ratio threshold.
pub const MTLD_THRESHOLD: f64 = 0.72;

/// One per-instance verdict. `ok` is "judged a proper counter" for CS-Score
/// or "classified inoffensive" for SafeScore.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub instance_id: String,
    pub subgroup: String,
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTally {
    pub errors: usize,
    pub total: usize,
}

impl GroupTally {
    pub fn ratio(&self) -> f64 {
        self.errors as f64 / self.total as f64
    }
}

/// Error ratios per subgroup and their population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupErrors {
    pub tallies: BTreeMap<String, GroupTally>,
    pub per_group_error: BTreeMap<String, f64>,
    pub variance: f64,
}

pub fn group_tallies(judgments: &[Judgment]) -> BTreeMap<String, GroupTally> {
    let mut tallies: BTreeMap<String, GroupTally> = BTreeMap::new();
    for j in judgments {
        let t = tallies.entry(j.subgroup.clone()).or_default();
        t.total += 1;
        if !j.ok {
            t.errors += 1;
        }
    }
    tallies
}

/// Population variance (divide by the number of values).
pub fn population_variance(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

pub fn error_ratio_variance(judgments: &[Judgment]) -> Result<GroupErrors> {
    let tallies = group_tallies(judgments);
    let per_group_error: BTreeMap<String, f64> = tallies
        .iter()
        .map(|(g, t)| (g.clone(), t.ratio()))
        .collect();
    let ratios: Vec<f64> = per_group_error.values().copied().collect();
    let variance = population_variance(&ratios)?;
    Ok(GroupErrors {
        tallies,
        per_group_error,
        variance,
    })
}

/// Lower-cases and splits on anything that is not alphanumeric, dropping
/// empty pieces.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

/// One directional MTLD pass: token count over factor count, where a factor
/// closes whenever the running type-token ratio drops below `threshold` and
/// the leftover segment contributes `(1 - ttr) / (1 - threshold)`.
fn mtld_pass<'a, I>(tokens: I, len: usize, threshold: f64) -> f64
where
    I: Iterator<Item = &'a String>,
{
    let mut factors = 0.0;
    let mut types: BTreeSet<&str> = BTreeSet::new();
    let mut count = 0usize;
    for tok in tokens {
        count += 1;
        types.insert(tok.as_str());
        let ttr = types.len() as f64 / count as f64;
        if ttr < threshold {
            factors += 1.0;
            types.clear();
            count = 0;
        }
    }
    if count > 0 {
        let ttr = types.len() as f64 / count as f64;
        factors += (1.0 - ttr) / (1.0 - threshold);
    }
    if factors == 0.0 {
        len as f64
    } else {
        len as f64 / factors
    }
}

/// Mean of the forward and backward MTLD passes.
pub fn mtld(tokens: &[String], threshold: f64) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = tokens.len();
    let forward = mtld_pass(tokens.iter(), n, threshold);
    let backward = mtld_pass(tokens.iter().rev(), n, threshold);
    Ok((forward + backward) / 2.0)
}

/// A percentage kept at full precision, with a reporting form rounded
/// half-up to one decimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentage {
    pub hits: usize,
    pub total: usize,
    pub value: f64,
}

impl Percentage {
    pub fn new(hits: usize, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Percentage {
            hits,
            total,
            value: 100.0 * hits as f64 / total as f64,
        })
    }

    /// Rounded in exact integer arithmetic so that e.g. 94.75 reports as 94.8.
    pub fn reported(&self) -> f64 {
        let num = 2000 * self.hits as u128 + self.total as u128;
        let tenths = num / (2 * self.total as u128);
        tenths as f64 / 10.0
    }
}

/// Share of outputs flagged safe.
pub fn safe_score(flags: &[bool]) -> Result<Percentage> {
    Percentage::new(flags.iter().filter(|&&f| f).count(), flags.len())
}

/// Share of counters judged correct.
pub fn cs_score(judgments: &[Judgment]) -> Result<Percentage> {
    Percentage::new(judgments.iter().filter(|j| j.ok).count(), judgments.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cs_score: f64,
    pub safe_score: f64,
    pub mtld: f64,
    pub per_group_error: BTreeMap<String, f64>,
    pub error_ratio_variance: f64,
    pub n: usize,
}

impl MetricsReport {
    /// Builds a report from correctness judgments, safety flags and the
    /// concatenated tokens of the evaluated outputs.
    pub fn compute(judgments: &[Judgment], safe_flags: &[bool], tokens: &[String]) -> Result<Self> {
        let groups = error_ratio_variance(judgments)?;
        Ok(MetricsReport {
            cs_score: cs_score(judgments)?.value,
            safe_score: safe_score(safe_flags)?.value,
            mtld: mtld(tokens, MTLD_THRESHOLD)?,
            per_group_error: groups.per_group_error,
            error_ratio_variance: groups.variance,
            n: judgments.len(),
        })
    }
}
