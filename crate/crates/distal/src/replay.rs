//! Record/replay of provider traffic.
//!
//! The replay log is JSONL, one exchange per line:
//! `{"endpoint", "request", "response" | "error", "timestamp"}`. Replay
//! matches on the endpoint and the canonical (key-sorted) request body and
//! serves recorded outcomes in order, repeating the last one once a key is
//! exhausted.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::transport::{Endpoint, ProviderError, ProviderErrorKind, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub endpoint: Endpoint,
    pub request: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ProviderError>,
    pub timestamp: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Wraps a transport and appends every exchange to a log file.
pub struct Recorder<T> {
    inner: T,
    out: Mutex<BufWriter<File>>,
}

impl<T: Transport> Recorder<T> {
    pub fn new(inner: T, path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Recorder {
            inner,
            out: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl<T: Transport> Transport for Recorder<T> {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, ProviderError> {
        let outcome = self.inner.call(endpoint, request);
        let exchange = Exchange {
            endpoint,
            request: request.clone(),
            response: outcome.as_ref().ok().cloned(),
            error: outcome.as_ref().err().cloned(),
            timestamp: now_ms(),
        };
        let line = serde_json::to_string(&exchange).expect("exchange serializes");
        let mut out = self.out.lock().expect("replay log poisoned");
        let written = writeln!(out, "{line}").and_then(|_| out.flush());
        if let Err(e) = written {
            tracing::warn!(error = %e, "failed to append to replay log");
        }
        outcome
    }

    fn health(&self, endpoint: Endpoint) -> Result<(), ProviderError> {
        self.inner.health(endpoint)
    }
}

type Outcome = Result<Value, ProviderError>;

/// Serves responses from a recorded log; never touches the network.
pub struct Replayer {
    recorded: Mutex<HashMap<(Endpoint, String), VecDeque<Outcome>>>,
}

fn key(endpoint: Endpoint, request: &Value) -> (Endpoint, String) {
    (
        endpoint,
        serde_json::to_string(request).expect("value serializes"),
    )
}

impl Replayer {
    pub fn from_exchanges(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        let mut recorded: HashMap<_, VecDeque<Outcome>> = HashMap::new();
        for ex in exchanges {
            let outcome = match (ex.response, ex.error) {
                (Some(v), _) => Ok(v),
                (None, Some(e)) => Err(e),
                (None, None) => continue,
            };
            recorded
                .entry(key(ex.endpoint, &ex.request))
                .or_default()
                .push_back(outcome);
        }
        Replayer {
            recorded: Mutex::new(recorded),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut exchanges = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Exchange = serde_json::from_str(&line).map_err(|e| Error::Ingest {
                line: i + 1,
                message: e.to_string(),
            })?;
            exchanges.push(ex);
        }
        Ok(Self::from_exchanges(exchanges))
    }
}

impl Transport for Replayer {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, ProviderError> {
        let mut recorded = self.recorded.lock().expect("replayer poisoned");
        let queue = recorded.get_mut(&key(endpoint, request)).ok_or_else(|| {
            ProviderError::new(endpoint, ProviderErrorKind::Replay, "no recorded response")
        })?;
        if queue.len() > 1 {
            queue.pop_front().expect("non-empty")
        } else {
            queue.front().cloned().expect("non-empty")
        }
    }
}
