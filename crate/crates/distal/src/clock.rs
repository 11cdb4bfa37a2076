//! Timestamps for audit entries and decisions.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Wall-clock milliseconds, or a logical counter that makes every
/// timestamp a pure function of the run's history.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clock {
    pub logical: bool,
    pub tick: u64,
}

impl Clock {
    pub fn logical() -> Self {
        Clock {
            logical: true,
            tick: 0,
        }
    }

    pub fn now(&mut self) -> u64 {
        if self.logical {
            self.tick += 1;
            self.tick
        } else {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        }
    }
}
