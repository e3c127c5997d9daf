//! Per-origin freshness and sliding-window replay tracking.

use std::collections::BTreeMap;

use serde::Serialize;

use super::CryptoError;
use crate::wire::NodeId;

pub const DEFAULT_FRESHNESS_WINDOW_MS: u64 = 2000;
pub const REPLAY_WINDOW_BITS: u32 = 64;

/// Sliding window over one origin's sequence numbers.
///
/// Bit `i` of `window` records whether `highest - i` has been consumed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SeqWindow {
    pub highest_seq: u32,
    pub window: u64,
}

impl SeqWindow {
    fn fresh(seq: u32) -> Self {
        SeqWindow {
            highest_seq: seq,
            window: 1,
        }
    }

    pub fn contains(&self, seq: u32) -> bool {
        if seq > self.highest_seq {
            return false;
        }
        let back = self.highest_seq - seq;
        // Anything older than the window is treated as seen.
        back >= REPLAY_WINDOW_BITS || self.window & (1u64 << back) != 0
    }

    fn insert(&mut self, seq: u32) {
        if seq > self.highest_seq {
            let shift = seq - self.highest_seq;
            self.window = if shift >= REPLAY_WINDOW_BITS {
                0
            } else {
                self.window << shift
            };
            self.highest_seq = seq;
            self.window |= 1;
        } else {
            self.window |= 1u64 << (self.highest_seq - seq);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayState {
    pub freshness_window_ms: u64,
    pub origins: BTreeMap<NodeId, SeqWindow>,
}

impl Default for ReplayState {
    fn default() -> Self {
        ReplayState::new(DEFAULT_FRESHNESS_WINDOW_MS)
    }
}

impl ReplayState {
    pub fn new(freshness_window_ms: u64) -> Self {
        ReplayState {
            freshness_window_ms,
            origins: BTreeMap::new(),
        }
    }

    pub fn check_fresh(&self, timestamp_ms: u64, now_ms: u64) -> Result<(), CryptoError> {
        if timestamp_ms.abs_diff(now_ms) > self.freshness_window_ms {
            return Err(CryptoError::Stale {
                timestamp_ms,
                now_ms,
            });
        }
        Ok(())
    }

    pub fn is_consumed(&self, origin: NodeId, seq: u32) -> bool {
        self.origins
            .get(&origin)
            .is_some_and(|w| w.contains(seq))
    }

    /// Marks `(origin, seq)` consumed, failing if it already was.
    pub fn consume(&mut self, origin: NodeId, seq: u32) -> Result<(), CryptoError> {
        match self.origins.get_mut(&origin) {
            None => {
                self.origins.insert(origin, SeqWindow::fresh(seq));
                Ok(())
            }
            Some(w) if w.contains(seq) => Err(CryptoError::Replayed { origin, seq }),
            Some(w) => {
                w.insert(seq);
                Ok(())
            }
        }
    }
}
