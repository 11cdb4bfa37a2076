//! Deterministic offline providers.
//!
//! Each endpoint is a pure function of its request: the learner's state is
//! carried by its revision string and echoed into its outputs, so replaying
//! any recorded request yields the same response.

use std::collections::BTreeSet;

use distal_core::sim::{
    mock_embedding, mock_reply, mock_scorer_logits, parse_group_tag, parse_reply_error,
    stable_hash, MockLearnerState,
};
use distal_core::template::Template;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::transport::{Endpoint, ProviderError, ProviderErrorKind, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub base_error: f64,
    pub gain_per_label: f64,
    pub floor: f64,
    /// Amplitude of the scorer's per-request jitter on the adhere probability.
    pub score_noise: f64,
    pub embed_dim: usize,
    /// Norm of the per-text perturbation added to the group anchor.
    pub embed_noise: f64,
    pub seed: u64,
    /// Teacher inputs the teacher always refuses (HTTP 422).
    pub teacher_fail: BTreeSet<String>,
    pub difficulty: std::collections::BTreeMap<String, f64>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            base_error: 0.6,
            gain_per_label: 0.05,
            floor: 0.1,
            score_noise: 0.02,
            embed_dim: 32,
            embed_noise: 0.02,
            seed: 0,
            teacher_fail: BTreeSet::new(),
            difficulty: Default::default(),
        }
    }
}

pub struct MockTransport {
    config: MockConfig,
    template: Template,
}

impl MockTransport {
    pub fn new(config: MockConfig, template: Template) -> Self {
        MockTransport { config, template }
    }

    pub fn learner(&self, revision: &str) -> MockLearnerState {
        let mut s = MockLearnerState::new(
            self.config.base_error,
            self.config.gain_per_label,
            self.config.floor,
        );
        s.difficulty = self.config.difficulty.clone();
        s.load_revision(revision);
        s
    }
}

fn field<'a>(endpoint: Endpoint, req: &'a Value, name: &str) -> Result<&'a str, ProviderError> {
    req.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::decode(endpoint, format!("missing string field {name}")))
}

impl Transport for MockTransport {
    fn call(&self, endpoint: Endpoint, req: &Value) -> Result<Value, ProviderError> {
        match endpoint {
            Endpoint::Embed => {
                let texts = req
                    .get("texts")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ProviderError::decode(endpoint, "missing texts"))?;
                let vectors: Vec<Vec<f64>> = texts
                    .iter()
                    .map(|t| {
                        mock_embedding(
                            t.as_str().unwrap_or_default(),
                            self.config.embed_dim,
                            self.config.embed_noise,
                        )
                    })
                    .collect();
                Ok(json!({ "vectors": vectors }))
            }
            Endpoint::Generate => {
                let input = field(endpoint, req, "input")?;
                let revision = req.get("model").and_then(Value::as_str).unwrap_or("base");
                let learner = self.learner(revision);
                let group = parse_group_tag(input).unwrap_or("?");
                Ok(json!({ "output": mock_reply(input, learner.error(group)) }))
            }
            Endpoint::Finetune => {
                let examples = req
                    .get("examples")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ProviderError::decode(endpoint, "missing examples"))?;
                let mut learner = self.learner("base");
                learner.retrain(
                    examples
                        .iter()
                        .filter_map(|e| e.get("input").and_then(Value::as_str)),
                );
                Ok(json!({ "revision": learner.revision() }))
            }
            Endpoint::Score => {
                let input = field(endpoint, req, "input")?;
                let output = field(endpoint, req, "output")?;
                let error = parse_reply_error(output).unwrap_or(0.5);
                let key = stable_hash(&[
                    &self.config.seed.to_le_bytes(),
                    input.as_bytes(),
                    output.as_bytes(),
                ]);
                let logits = mock_scorer_logits(1.0 - error, self.config.score_noise, key);
                Ok(json!({ "logits": logits }))
            }
            Endpoint::Chat => {
                let content = req
                    .get("messages")
                    .and_then(Value::as_array)
                    .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
                    .and_then(|m| m.get("content"))
                    .and_then(Value::as_str)
                    .ok_or_else(|| ProviderError::decode(endpoint, "missing user message"))?;
                let input = self.template.extract_input(content).unwrap_or(content);
                if self.config.teacher_fail.contains(input) {
                    return Err(ProviderError::new(
                        endpoint,
                        ProviderErrorKind::Status(422),
                        "injected failure",
                    ));
                }
                Ok(json!({ "content": format!("COUNTER({input})") }))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use distal_core::math::softmax;

    fn mock() -> MockTransport {
        MockTransport::new(MockConfig::default(), Template::counter_narration())
    }

    #[test]
    fn identical_texts_identical_vectors() {
        let m = mock();
        let r = m
            .call(Endpoint::Embed, &json!({"texts": ["a b", "a b", "c"]}))
            .unwrap();
        let v = r["vectors"].as_array().unwrap();
        assert_eq!(v[0], v[1]);
        assert_ne!(v[0], v[2]);
        assert_eq!(v[0].as_array().unwrap().len(), 32);
    }

    #[test]
    fn finetune_then_generate_then_score() {
        let m = mock();
        let input = "[[group:g1]] something";
        let examples = vec![json!({"input": input, "target": "t"}); 4];
        let rev = m
            .call(Endpoint::Finetune, &json!({ "examples": examples }))
            .unwrap()["revision"]
            .as_str()
            .unwrap()
            .to_string();
        let out = m
            .call(Endpoint::Generate, &json!({"input": input, "model": rev}))
            .unwrap()["output"]
            .as_str()
            .unwrap()
            .to_string();
        assert!((parse_reply_error(&out).unwrap() - 0.4).abs() < 1e-12);
        let logits: Vec<f64> = serde_json::from_value(
            m.call(Endpoint::Score, &json!({"input": input, "output": out}))
                .unwrap()["logits"]
                .clone(),
        )
        .unwrap();
        let p = softmax(&logits).unwrap()[0];
        assert!((p - 0.6).abs() <= 0.02 + 1e-12);
    }

    #[test]
    fn teacher_echo_and_fault_injection() {
        let t = Template::counter_narration();
        let mut cfg = MockConfig::default();
        cfg.teacher_fail.insert("bad".into());
        let m = MockTransport::new(cfg, t.clone());
        let req = |x: &str| json!({"messages": [{"role": "user", "content": t.render(x)}]});
        let r = m.call(Endpoint::Chat, &req("hello")).unwrap();
        assert_eq!(r["content"], "COUNTER(hello)");
        let e = m.call(Endpoint::Chat, &req("bad")).unwrap_err();
        assert!(!e.is_retryable() && !e.is_outage());
    }
}
