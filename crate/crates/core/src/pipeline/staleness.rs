//! Bounded-staleness admission control for episode starts.
//!
//! Trajectories are consumed in arrival order in fixed-size update rounds,
//! so the trajectory with arrival rank `i` is consumed while the actor is at
//! version `i / trajectories_per_round`. The gate bounds how many episodes
//! may have started so that every in-flight episode — whatever order the
//! episodes finish in — lands at a rank whose consuming version is within
//! `max_staleness` of the version the episode pinned at start:
//!
//! `started < trajectories_per_round * (min_inflight_pin + max_staleness + 1)`
//!
//! Producers that would break the bound pause instead of dropping work; a
//! version publish or a trajectory arrival can re-open the gate.

use std::collections::BTreeMap;

#[derive(Debug)]
pub struct StalenessGate {
    enabled: bool,
    trajectories_per_round: usize,
    max_staleness: u64,
    started: usize,
    /// Pin multiset of episodes started but not yet arrived at the queue.
    inflight: BTreeMap<u64, usize>,
}

impl StalenessGate {
    pub fn new(enabled: bool, trajectories_per_round: usize, max_staleness: u64) -> Self {
        StalenessGate {
            enabled,
            trajectories_per_round: trajectories_per_round.max(1),
            max_staleness,
            started: 0,
            inflight: BTreeMap::new(),
        }
    }

    fn min_pin(&self) -> Option<u64> {
        self.inflight.keys().next().copied()
    }

    /// Whether one more episode may start while the actor is at
    /// `current_version`.
    pub fn may_start(&self, current_version: u64) -> bool {
        if !self.enabled {
            return true;
        }
        let governing = self.min_pin().map_or(current_version, |p| p.min(current_version));
        let quota = self.trajectories_per_round as u64 * (governing + self.max_staleness + 1);
        (self.started as u64) < quota
    }

    pub fn on_start(&mut self, pin: u64) {
        self.started += 1;
        *self.inflight.entry(pin).or_insert(0) += 1;
    }

    /// Marks an episode's trajectory as arrived (rank assigned).
    pub fn on_arrival(&mut self, pin: u64) {
        if let Some(count) = self.inflight.get_mut(&pin) {
            *count -= 1;
            if *count == 0 {
                self.inflight.remove(&pin);
            }
        }
    }

    pub fn started(&self) -> usize {
        self.started
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quota_grows_with_version() {
        // tpr = 2, staleness 1: four starts allowed at version 0.
        let mut gate = StalenessGate::new(true, 2, 1);
        for _ in 0..4 {
            assert!(gate.may_start(0));
            gate.on_start(0);
        }
        assert!(!gate.may_start(0));
        // A publish alone does not help while a v0 episode is in flight.
        assert!(!gate.may_start(1));
        // Once all v0 work has arrived, version 1 re-opens the gate.
        for _ in 0..4 {
            gate.on_arrival(0);
        }
        assert!(gate.may_start(1));
    }

    #[test]
    fn disabled_gate_always_admits() {
        let gate = StalenessGate::new(false, 1, 0);
        assert!(gate.may_start(0));
    }

    proptest! {
        /// Random interleavings of starts, completions (in any order), and
        /// version publishes never consume a trajectory more than
        /// `max_staleness` versions after its pin.
        #[test]
        fn bound_holds_under_any_completion_order(
            tpr in 1usize..5,
            staleness in 0u64..3,
            ops in proptest::collection::vec(0u8..3, 1..200),
        ) {
            let mut gate = StalenessGate::new(true, tpr, staleness);
            let mut version = 0u64;
            let mut inflight: Vec<u64> = Vec::new(); // pins of running episodes
            let mut arrivals: Vec<u64> = Vec::new(); // pins in arrival order
            let mut rounds_done = 0usize;
            for (i, op) in ops.iter().enumerate() {
                match op {
                    0 => {
                        if gate.may_start(version) {
                            gate.on_start(version);
                            inflight.push(version);
                        }
                    }
                    1 => {
                        if !inflight.is_empty() {
                            // Adversarial completion order.
                            let idx = i % inflight.len();
                            let pin = inflight.swap_remove(idx);
                            gate.on_arrival(pin);
                            arrivals.push(pin);
                        }
                    }
                    _ => {
                        // Actor publishes after each full round it can form.
                        if arrivals.len() / tpr > rounds_done {
                            rounds_done += 1;
                            version += 1;
                        }
                    }
                }
            }
            for (rank, pin) in arrivals.iter().enumerate() {
                let consuming_version = (rank / tpr) as u64;
                prop_assert!(
                    consuming_version <= pin + staleness,
                    "rank {rank} pin {pin} consumed at version {consuming_version}"
                );
            }
        }
    }
}
