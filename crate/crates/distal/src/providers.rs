//! Typed clients for the learner, teacher, auxiliary scorer and embedder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::transport::{Endpoint, ProviderError, RetryPolicy, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerParams {
    pub max_tokens: u32,
    /// Decoding temperature for scoring passes.
    pub temperature: f64,
    pub epochs: u32,
    pub learning_rate: f64,
}

impl Default for LearnerParams {
    fn default() -> Self {
        LearnerParams {
            max_tokens: 256,
            temperature: 0.0,
            epochs: 10,
            learning_rate: 5e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherParams {
    pub model: String,
    pub temperature: f64,
    pub system_prompt: Option<String>,
}

impl Default for TeacherParams {
    fn default() -> Self {
        TeacherParams {
            model: "gpt-4".into(),
            temperature: 0.7,
            system_prompt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Clone)]
pub struct Providers {
    transport: Arc<dyn Transport>,
    pub retry: RetryPolicy,
    pub learner: LearnerParams,
    pub teacher: TeacherParams,
}

fn decode<T: for<'de> Deserialize<'de>>(
    endpoint: Endpoint,
    resp: &Value,
    field: &str,
) -> Result<T, ProviderError> {
    let v = resp
        .get(field)
        .ok_or_else(|| ProviderError::decode(endpoint, format!("response lacks {field}")))?;
    T::deserialize(v).map_err(|e| ProviderError::decode(endpoint, e.to_string()))
}

impl Providers {
    pub fn new(
        transport: Arc<dyn Transport>,
        retry: RetryPolicy,
        learner: LearnerParams,
        teacher: TeacherParams,
    ) -> Self {
        Providers {
            transport,
            retry,
            learner,
            teacher,
        }
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    fn call(&self, endpoint: Endpoint, req: &Value) -> Result<Value, ProviderError> {
        self.retry.run(|| self.transport.call(endpoint, req))
    }

    pub fn health_check(&self) -> Result<(), ProviderError> {
        for e in Endpoint::ALL {
            self.transport.health(e)?;
        }
        Ok(())
    }

    /// Raw vectors, one per text; see [`crate::embed::embed_batch`] for the
    /// normalized form.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let resp = self.call(Endpoint::Embed, &json!({ "texts": texts }))?;
        decode(Endpoint::Embed, &resp, "vectors")
    }

    /// Learner output at `revision` for `input`.
    pub fn generate(&self, input: &str, revision: &str) -> Result<String, ProviderError> {
        let req = json!({
            "input": input,
            "max_tokens": self.learner.max_tokens,
            "temperature": self.learner.temperature,
            "model": revision,
        });
        decode(
            Endpoint::Generate,
            &self.call(Endpoint::Generate, &req)?,
            "output",
        )
    }

    /// Fine-tunes the base learner on `examples` (input, target); returns the
    /// new revision.
    pub fn finetune(&self, examples: &[(String, String)]) -> Result<String, ProviderError> {
        let examples: Vec<Value> = examples
            .iter()
            .map(|(i, t)| json!({ "input": i, "target": t }))
            .collect();
        let req = json!({
            "examples": examples,
            "epochs": self.learner.epochs,
            "learning_rate": self.learner.learning_rate,
        });
        decode(
            Endpoint::Finetune,
            &self.call(Endpoint::Finetune, &req)?,
            "revision",
        )
    }

    pub fn score(&self, input: &str, output: &str) -> Result<Vec<f64>, ProviderError> {
        let req = json!({ "input": input, "output": output });
        decode(
            Endpoint::Score,
            &self.call(Endpoint::Score, &req)?,
            "logits",
        )
    }

    /// Sends the rendered prompt as the user turn.
    pub fn chat(&self, prompt: &str) -> Result<ChatReply, ProviderError> {
        let mut messages = Vec::new();
        if let Some(system) = &self.teacher.system_prompt {
            messages.push(json!({ "role": "system", "content": system }));
        }
        messages.push(json!({ "role": "user", "content": prompt }));
        let req = json!({
            "messages": messages,
            "temperature": self.teacher.temperature,
            "model": self.teacher.model,
        });
        let resp = self.call(Endpoint::Chat, &req)?;
        let usage = resp.get("usage");
        let tokens = |k: &str| usage.and_then(|u| u.get(k)).and_then(Value::as_u64);
        Ok(ChatReply {
            content: decode(Endpoint::Chat, &resp, "content")?,
            prompt_tokens: tokens("prompt_tokens"),
            completion_tokens: tokens("completion_tokens"),
        })
    }
}
