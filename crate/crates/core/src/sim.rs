//! Synthetic skewed pools and the mock learner used for offline runs.
//!
//! Synthetic texts carry their subgroup as a `[[group:NAME]]` tag, which is
//! what lets stateless mock providers recover the group of any text they are
//! handed. The mock learner's error on a group falls linearly with the
//! number of labeled examples of that group, down to a floor.

use alloc::{
    collections::BTreeMap,
    format,
    string::{String, ToString},
    vec::Vec,
};
use core::hash::Hasher;

use fnv::FnvHasher;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logit, normalize};

const TAG_OPEN: &str = "[[group:";
const TAG_CLOSE: &str = "]]";
const ERR_OPEN: &str = "[[err:";

/// FNV-1a over the given byte strings, each followed by a separator byte.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write(p);
        h.write_u8(0xff);
    }
    h.finish()
}

/// Uniform draw in `[-1, 1)` keyed by `key`.
pub fn keyed_unit_noise(key: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.random_range(-1.0..1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub proportion: f64,
    #[serde(default = "default_difficulty")]
    pub difficulty: f64,
}

fn default_difficulty() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoolSpec {
    pub groups: Vec<GroupSpec>,
    pub total: usize,
    pub seed: u64,
}

/// Group proportions of the default skewed experiment.
pub const DEFAULT_PROPORTIONS: [f64; 10] =
    [0.30, 0.20, 0.15, 0.10, 0.08, 0.06, 0.05, 0.03, 0.02, 0.01];

impl SyntheticPoolSpec {
    /// Ten groups `g00..g09` with [`DEFAULT_PROPORTIONS`], 2000 instances.
    pub fn skewed_default(seed: u64) -> Self {
        SyntheticPoolSpec {
            groups: DEFAULT_PROPORTIONS
                .iter()
                .enumerate()
                .map(|(i, &p)| GroupSpec {
                    name: format!("g{i:02}"),
                    proportion: p,
                    difficulty: 0.5,
                })
                .collect(),
            total: 2000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::InvalidSpec("no groups".into()));
        }
        let mut names = BTreeMap::new();
        for g in &self.groups {
            if g.name.is_empty() || g.name.contains(TAG_CLOSE) || g.name.contains([',', '=', '%']) {
                return Err(Error::InvalidSpec(format!(
                    "invalid group name {:?}",
                    g.name
                )));
            }
            if names.insert(g.name.as_str(), ()).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate group {}", g.name)));
            }
            if !(g.proportion > 0.0 && g.proportion <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "proportion of {} must be in (0, 1]",
                    g.name
                )));
            }
            if !(0.0..=1.0).contains(&g.difficulty) {
                return Err(Error::InvalidSpec(format!(
                    "difficulty of {} must be in [0, 1]",
                    g.name
                )));
            }
        }
        let sum: f64 = self.groups.iter().map(|g| g.proportion).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("proportions sum to {sum}")));
        }
        if self.total < 10 * self.groups.len() {
            return Err(Error::InvalidSpec(format!(
                "total {} is below 10 per group",
                self.total
            )));
        }
        Ok(())
    }

    pub fn counts(&self) -> Vec<usize> {
        let props: Vec<f64> = self.groups.iter().map(|g| g.proportion).collect();
        apportion(self.total, &props)
    }
}

/// Largest-remainder apportionment of `total` by `proportions`; leftover
/// units go to the largest fractional parts, lowest index first on ties.
pub fn apportion(total: usize, proportions: &[f64]) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let quotas: Vec<f64> = proportions.iter().map(|p| total as f64 * p / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - libm::floor(quotas[a]);
        let fb = quotas[b] - libm::floor(quotas[b]);
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn group_tag(name: &str) -> String {
    format!("{TAG_OPEN}{name}{TAG_CLOSE}")
}

/// The group named by the first `[[group:NAME]]` tag in `text`.
pub fn parse_group_tag(text: &str) -> Option<&str> {
    let start = text.find(TAG_OPEN)? + TAG_OPEN.len();
    let len = text[start..].find(TAG_CLOSE)?;
    Some(&text[start..start + len])
}

fn gaussian_unit(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim)
        .map(|_| {
            // Box-Muller
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random::<f64>();
            libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
        })
        .collect();
    normalize(&mut v);
    v
}

/// Fixed unit vector for a group. Independent Gaussian directions are close
/// to orthogonal in moderate dimension.
pub fn anchor(group: &str, dim: usize) -> Vec<f64> {
    gaussian_unit(stable_hash(&[b"anchor", group.as_bytes()]), dim)
}

/// Group anchor (or, for untagged text, a text-specific direction) plus a
/// hash-seeded perturbation of norm `noise`, renormalized.
pub fn mock_embedding(text: &str, dim: usize, noise: f64) -> Vec<f64> {
    let mut v = match parse_group_tag(text) {
        Some(g) => anchor(g, dim),
        None => anchor(text, dim),
    };
    let jitter = gaussian_unit(stable_hash(&[b"noise", text.as_bytes()]), dim);
    for (x, j) in v.iter_mut().zip(&jitter) {
        *x += noise * j;
    }
    normalize(&mut v);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub id: String,
    pub text: String,
    pub group: String,
    pub embedding: Vec<f64>,
}

/// Deterministic pool: exact apportioned group counts, shuffled by seed.
pub fn gen_pool(
    spec: &SyntheticPoolSpec,
    dim: usize,
    noise: f64,
) -> Result<Vec<SyntheticInstance>> {
    spec.validate()?;
    let mut labels: Vec<usize> = Vec::with_capacity(spec.total);
    for (g, &c) in spec.counts().iter().enumerate() {
        labels.extend(core::iter::repeat_n(g, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let group = spec.groups[g].name.clone();
            let text = format!(
                "{} synthetic remark #{i} aimed at group {group}",
                group_tag(&group)
            );
            let embedding = mock_embedding(&text, dim, noise);
            SyntheticInstance {
                id: format!("{i:06}"),
                text,
                group,
                embedding,
            }
        })
        .collect())
}

/// Linear-with-floor stand-in for a learner that improves on each group as
/// labeled examples of that group accumulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockLearnerState {
    pub labeled_count_per_group: BTreeMap<String, usize>,
    pub base_error: f64,
    pub gain_per_label: f64,
    pub floor: f64,
    /// Per-group difficulty in `[0, 1]`; groups not listed count as 0.5.
    #[serde(default)]
    pub difficulty: BTreeMap<String, f64>,
}

impl MockLearnerState {
    pub fn new(base_error: f64, gain_per_label: f64, floor: f64) -> Self {
        MockLearnerState {
            labeled_count_per_group: BTreeMap::new(),
            base_error,
            gain_per_label,
            floor,
            difficulty: BTreeMap::new(),
        }
    }

    /// Starting error of a group: `base_error` scaled by `2 * difficulty`,
    /// so the neutral difficulty 0.5 leaves it unchanged.
    pub fn base_for(&self, group: &str) -> f64 {
        let d = self.difficulty.get(group).copied().unwrap_or(0.5);
        (self.base_error * 2.0 * d).clamp(0.0, 1.0)
    }

    pub fn labeled(&self, group: &str) -> usize {
        self.labeled_count_per_group
            .get(group)
            .copied()
            .unwrap_or(0)
    }

    /// `max(floor, base - gain * labeled)`, clamped to `[0, 1]`.
    pub fn error(&self, group: &str) -> f64 {
        let raw = self.base_for(group) - self.gain_per_label * self.labeled(group) as f64;
        raw.max(self.floor).clamp(0.0, 1.0)
    }

    pub fn p_adhere(&self, group: &str) -> f64 {
        1.0 - self.error(group)
    }

    pub fn record_label(&mut self, group: &str, n: usize) {
        *self
            .labeled_count_per_group
            .entry(group.to_string())
            .or_default() += n;
    }

    /// Resets the counts to the group tags found in `inputs` (retraining
    /// from the base model on the full labeled set).
    pub fn retrain<'a, I>(&mut self, inputs: I)
    where
        I: IntoIterator<Item = &'a str>,
    {
        self.labeled_count_per_group.clear();
        for text in inputs {
            if let Some(g) = parse_group_tag(text) {
                self.record_label(g, 1);
            }
        }
    }

    /// Compact revision string encoding the per-group counts.
    pub fn revision(&self) -> String {
        let body: Vec<String> = self
            .labeled_count_per_group
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(g, c)| format!("{}={c}", escape(g)))
            .collect();
        format!("mock:{}", body.join(","))
    }

    /// Restores counts from a [`MockLearnerState::revision`] string; any
    /// other revision means the untrained base model.
    pub fn load_revision(&mut self, revision: &str) {
        self.labeled_count_per_group.clear();
        let Some(body) = revision.strip_prefix("mock:") else {
            return;
        };
        for entry in body.split(',').filter(|e| !e.is_empty()) {
            if let Some((g, c)) = entry.rsplit_once('=') {
                if let Ok(c) = c.parse() {
                    self.labeled_count_per_group.insert(unescape(g), c);
                }
            }
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('%', "%25")
        .replace(',', "%2C")
        .replace('=', "%3D")
}

fn unescape(s: &str) -> String {
    s.replace("%2C", ",")
        .replace("%3D", "=")
        .replace("%25", "%")
}

/// Mock learner output: the reply text carries the learner's error on the
/// input's group so a stateless mock scorer can read it back.
pub fn mock_reply(input: &str, error: f64) -> String {
    let group = parse_group_tag(input).unwrap_or("?");
    format!("reply to {group} {ERR_OPEN}{error}{TAG_CLOSE}")
}

pub fn parse_reply_error(output: &str) -> Option<f64> {
    let start = output.find(ERR_OPEN)? + ERR_OPEN.len();
    let len = output[start..].find(TAG_CLOSE)?;
    output[start..start + len].parse().ok()
}

/// Two logits `(adhere, violate)` whose softmax puts `p_adhere` (perturbed
/// by at most `noise_amplitude`) on the adhere class.
pub fn mock_scorer_logits(p_adhere: f64, noise_amplitude: f64, key: u64) -> [f64; 2] {
    let jitter = if noise_amplitude > 0.0 {
        noise_amplitude * keyed_unit_noise(key)
    } else {
        0.0
    };
    let p = (p_adhere + jitter).clamp(1e-9, 1.0 - 1e-9);
    [logit(p), 0.0]
}

/// Stratified mock judge: the `rank`-th of `size` test instances of a group
/// is judged correct iff its quantile `(rank + 0.5) / size` is at least the
/// learner's error on that group, so the judged error ratio tracks the
/// error rate without sampling noise.
pub fn quantile_judge(rank: usize, size: usize, error: f64) -> bool {
    (rank as f64 + 0.5) / size as f64 >= error
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softmax;
    use alloc::vec;

    #[test]
    fn equal_split_is_exact() {
        let spec = SyntheticPoolSpec {
            groups: vec![
                GroupSpec {
                    name: "a".into(),
                    proportion: 0.5,
                    difficulty: 0.5,
                },
                GroupSpec {
                    name: "b".into(),
                    proportion: 0.5,
                    difficulty: 0.5,
                },
            ],
            total: 100,
            seed: 3,
        };
        let pool = gen_pool(&spec, 8, 0.02).unwrap();
        assert_eq!(pool.iter().filter(|i| i.group == "a").count(), 50);
        assert_eq!(pool, gen_pool(&spec, 8, 0.02).unwrap());
    }

    #[test]
    fn default_counts_by_largest_remainder() {
        let spec = SyntheticPoolSpec::skewed_default(0);
        assert_eq!(
            spec.counts(),
            vec![600, 400, 300, 200, 160, 120, 100, 60, 40, 20]
        );
        // 7 units over 3 equal shares: remainders tie, lowest index first.
        assert_eq!(apportion(7, &[1.0, 1.0, 1.0]), vec![3, 2, 2]);
        assert_eq!(apportion(10, &[0.55, 0.45]), vec![6, 4]);
        assert_eq!(apportion(10, &[0.26, 0.37, 0.37]), vec![2, 4, 4]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SyntheticPoolSpec::skewed_default(0);
        spec.groups[0].proportion = 0.5;
        assert!(gen_pool(&spec, 4, 0.0).is_err());
        let mut spec = SyntheticPoolSpec::skewed_default(0);
        spec.total = 99;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticPoolSpec::skewed_default(0);
        spec.groups[1].name = "g00".into();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn embeddings_are_unit_and_group_aligned() {
        let pool = gen_pool(&SyntheticPoolSpec::skewed_default(1), 32, 0.02).unwrap();
        for inst in &pool {
            let n: f64 = inst.embedding.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-9);
            let a = anchor(&inst.group, 32);
            let cos: f64 = a.iter().zip(&inst.embedding).map(|(x, y)| x * y).sum();
            assert!(cos > 0.99);
        }
    }

    #[test]
    fn tags_round_trip() {
        let text = format!("{} hello", group_tag("women"));
        assert_eq!(parse_group_tag(&text), Some("women"));
        assert_eq!(parse_group_tag("no tag"), None);
        let reply = mock_reply(&text, 0.45);
        assert_eq!(parse_reply_error(&reply), Some(0.45));
    }

    #[test]
    fn learner_is_linear_with_floor() {
        let mut s = MockLearnerState::new(0.6, 0.1, 0.1);
        assert!((s.p_adhere("g") - 0.4).abs() < 1e-12);
        s.record_label("g", 3);
        assert!((s.p_adhere("g") - 0.7).abs() < 1e-12);
        s.record_label("g", 10);
        assert!((s.error("g") - 0.1).abs() < 1e-12);
        s.difficulty.insert("h".into(), 1.0);
        assert!((s.base_for("h") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn revision_round_trip() {
        let mut s = MockLearnerState::new(0.6, 0.05, 0.1);
        s.retrain([
            "[[group:a]] x",
            "[[group:a]] y",
            "[[group:b,=%]] z",
            "untagged",
        ]);
        let rev = s.revision();
        let mut t = MockLearnerState::new(0.6, 0.05, 0.1);
        t.load_revision(&rev);
        assert_eq!(s.labeled_count_per_group, t.labeled_count_per_group);
        t.load_revision("base");
        assert!(t.labeled_count_per_group.is_empty());
    }

    #[test]
    fn scorer_logits_invert_softmax() {
        let l = mock_scorer_logits(0.5, 0.0, 1);
        assert_eq!(l, [0.0, 0.0]);
        let l = mock_scorer_logits(0.880_797_077_977_882_3, 0.0, 1);
        assert!((l[0] - l[1] - 2.0).abs() < 1e-9);
        for key in 0..200 {
            let l = mock_scorer_logits(0.7, 0.02, key);
            let p = softmax(&l).unwrap()[0];
            assert!((p - 0.7).abs() <= 0.02 + 1e-12);
        }
    }

    #[test]
    fn judge_matches_error_rate() {
        let wrong = (0..100).filter(|&r| !quantile_judge(r, 100, 0.3)).count();
        assert_eq!(wrong, 30);
        assert!((0..100).all(|r| quantile_judge(r, 100, 0.0)));
    }
}
