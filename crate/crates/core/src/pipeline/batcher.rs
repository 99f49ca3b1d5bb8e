//! Dynamic batching scheduler for inference requests.
//!
//! A batch is released once the pending count reaches the maximum batch
//! size, or once the oldest pending request has waited for the maximum
//! wait time — whichever comes first. The wait clock anchors at the first
//! arrival into an empty queue and re-anchors whenever requests remain
//! after a batch is taken.

use super::InferenceRequest;
use std::collections::VecDeque;

/// Size/time trigger thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerConfig {
    pub max_batch: usize,
    /// `f64::INFINITY` disables the time trigger (whole-batch lockstep).
    pub max_wait_ms: f64,
}

#[derive(Debug)]
pub struct DynamicBatcher {
    pending: VecDeque<InferenceRequest>,
    /// Wait-clock anchor; meaningful only while `pending` is non-empty.
    anchor_ms: f64,
    /// Bumped on every anchor change so stale timer events can be ignored.
    anchor_generation: u64,
}

impl Default for DynamicBatcher {
    fn default() -> Self {
        Self::new()
    }
}

impl DynamicBatcher {
    pub fn new() -> Self {
        DynamicBatcher { pending: VecDeque::new(), anchor_ms: 0.0, anchor_generation: 0 }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn anchor_generation(&self) -> u64 {
        self.anchor_generation
    }

    /// Appends a request in arrival order. The first request into an empty
    /// queue anchors the wait clock at `now`.
    pub fn offer(&mut self, req: InferenceRequest, now_ms: f64) {
        debug_assert!(req.enqueue_time_ms <= now_ms + 1e-9);
        if self.pending.is_empty() {
            self.anchor_ms = now_ms;
            self.anchor_generation += 1;
        }
        self.pending.push_back(req);
    }

    /// Returns the oldest `min(pending, max_batch)` requests iff a trigger
    /// condition holds; `None` otherwise. The time trigger never fires on an
    /// empty queue. Requests left behind re-anchor the wait clock at `now`.
    pub fn poll(&mut self, now_ms: f64, cfg: TriggerConfig) -> Option<Vec<InferenceRequest>> {
        if self.pending.is_empty() {
            return None;
        }
        let size_hit = self.pending.len() >= cfg.max_batch;
        let time_hit = now_ms - self.anchor_ms >= cfg.max_wait_ms;
        if !size_hit && !time_hit {
            return None;
        }
        let take = self.pending.len().min(cfg.max_batch);
        let batch: Vec<InferenceRequest> = self.pending.drain(..take).collect();
        if !self.pending.is_empty() {
            self.anchor_ms = now_ms;
        }
        self.anchor_generation += 1;
        Some(batch)
    }

    /// Absolute time at which the time trigger would fire, if armed.
    pub fn deadline(&self, cfg: TriggerConfig) -> Option<f64> {
        if self.pending.is_empty() || !cfg.max_wait_ms.is_finite() {
            None
        } else {
            Some(self.anchor_ms + cfg.max_wait_ms)
        }
    }
}
