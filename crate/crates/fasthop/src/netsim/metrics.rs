//! Counters a run accumulates and the conservation law they obey.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Traffic class a packet is accounted under, fixed at injection.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Class {
    Legit,
    Attack,
}

/// Consecutive send samples of one session: of `transitions` observed
/// timestamp changes, `address_changes` landed on a different pool address.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopTransitions {
    pub transitions: u64,
    pub address_changes: u64,
}

/// Everything a run counts.
///
/// Request conservation holds per class at any horizon:
/// `injected == forwarded + dropped_by_reason(sum) + in_flight`. `forwarded`
/// means accepted by the defense (or, undefended, arrival at the server);
/// what happens to a packet after acceptance is accounted separately in
/// `post_forward_drops` and `server_ingress`. Responses satisfy
/// `injected == delivered + backscatter + dropped(sum) + in_flight`.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    // Scalar counters first: the TOML projection requires plain values
    // ahead of the reason maps, which serialize as sub-tables.
    pub injected_legit: u64,
    pub injected_attack: u64,
    pub forwarded_legit: u64,
    pub forwarded_attack: u64,
    /// Wire-level tail drops, both classes, requests and responses alike.
    pub congestion_drops: u64,
    /// Accepted requests lost between switcher and server.
    pub post_forward_drops: u64,
    pub in_flight_legit: u64,
    pub in_flight_attack: u64,
    pub server_ingress: u64,
    /// Attack-class packets that reached a real server address.
    pub server_ingress_attack: u64,
    pub responses_injected: u64,
    pub responses_delivered: u64,
    /// Responses that landed on a host that never asked for them (forged
    /// sources bouncing traffic to third parties).
    pub responses_backscatter: u64,
    pub responses_in_flight: u64,
    /// Bytes of legit responses accepted by clients.
    pub legit_goodput_bytes: u64,
    /// Packets whose destination matched more than one live session.
    pub session_collisions: u64,
    pub sessions_established: u64,
    pub sessions_rejected: u64,
    pub sessions_expired: u64,
    pub dropped_legit_by_reason: BTreeMap<String, u64>,
    pub dropped_attack_by_reason: BTreeMap<String, u64>,
    /// Data requests arriving at each switcher, by node id.
    pub per_switcher_ingress: BTreeMap<String, u64>,
    pub server_ingress_by_service: BTreeMap<String, u64>,
    pub responses_dropped_by_reason: BTreeMap<String, u64>,
    /// Per session label (`client/service`).
    pub hop_transitions: BTreeMap<String, HopTransitions>,
    /// Per session label, packets sent to each pool slot, in pool order.
    /// Present only when the scenario asks for it; pools can be large.
    pub dst_histogram: BTreeMap<String, Vec<u64>>,
}

impl RunMetrics {
    pub fn count_injected(&mut self, class: Class) {
        match class {
            Class::Legit => self.injected_legit += 1,
            Class::Attack => self.injected_attack += 1,
        }
    }

    pub fn count_forwarded(&mut self, class: Class) {
        match class {
            Class::Legit => self.forwarded_legit += 1,
            Class::Attack => self.forwarded_attack += 1,
        }
    }

    pub fn count_dropped(&mut self, class: Class, reason: &str) {
        let map = match class {
            Class::Legit => &mut self.dropped_legit_by_reason,
            Class::Attack => &mut self.dropped_attack_by_reason,
        };
        *map.entry(reason.to_string()).or_insert(0) += 1;
    }

    pub fn count_in_flight(&mut self, class: Class) {
        match class {
            Class::Legit => self.in_flight_legit += 1,
            Class::Attack => self.in_flight_attack += 1,
        }
    }

    pub fn count_response_dropped(&mut self, reason: &str) {
        *self.responses_dropped_by_reason.entry(reason.to_string()).or_insert(0) += 1;
    }

    /// Both per-class reason maps merged.
    pub fn dropped_by_reason(&self) -> BTreeMap<String, u64> {
        let mut merged = self.dropped_legit_by_reason.clone();
        for (reason, n) in &self.dropped_attack_by_reason {
            *merged.entry(reason.clone()).or_insert(0) += n;
        }
        merged
    }

    pub fn dropped_legit_total(&self) -> u64 {
        self.dropped_legit_by_reason.values().sum()
    }

    pub fn dropped_attack_total(&self) -> u64 {
        self.dropped_attack_by_reason.values().sum()
    }

    /// Empty when every packet is accounted for exactly once.
    pub fn conservation_violations(&self) -> Vec<String> {
        let mut violations = Vec::new();
        let legit = self.forwarded_legit + self.dropped_legit_total() + self.in_flight_legit;
        if legit != self.injected_legit {
            violations.push(format!(
                "legit requests: injected {} but accounted {legit}",
                self.injected_legit
            ));
        }
        let attack = self.forwarded_attack + self.dropped_attack_total() + self.in_flight_attack;
        if attack != self.injected_attack {
            violations.push(format!(
                "attack requests: injected {} but accounted {attack}",
                self.injected_attack
            ));
        }
        let responses = self.responses_delivered
            + self.responses_backscatter
            + self.responses_dropped_by_reason.values().sum::<u64>()
            + self.responses_in_flight;
        if responses != self.responses_injected {
            violations.push(format!(
                "responses: injected {} but accounted {responses}",
                self.responses_injected
            ));
        }
        violations
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conservation_traps_the_missing_packet() {
        let mut m = RunMetrics::default();
        m.count_injected(Class::Legit);
        m.count_injected(Class::Legit);
        m.count_forwarded(Class::Legit);
        assert_eq!(m.conservation_violations().len(), 1);
        m.count_dropped(Class::Legit, "congestion");
        assert!(m.conservation_violations().is_empty());
    }

    #[test]
    fn reason_maps_merge() {
        let mut m = RunMetrics::default();
        m.count_dropped(Class::Legit, "congestion");
        m.count_dropped(Class::Attack, "congestion");
        m.count_dropped(Class::Attack, "hash_mismatch");
        let merged = m.dropped_by_reason();
        assert_eq!(merged.get("congestion"), Some(&2));
        assert_eq!(merged.get("hash_mismatch"), Some(&1));
        assert_eq!(m.dropped_attack_total(), 2);
    }
}
