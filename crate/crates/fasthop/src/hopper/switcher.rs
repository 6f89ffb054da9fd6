use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use thiserror::Error;

use super::pool_address;
use super::types::{DropReason, Packet, ProvisionedSession, SessionUid, SwitcherId, VerifyOutcome};

/// Result of checking one packet against the switcher's session table.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Verification {
    pub outcome: VerifyOutcome,
    /// Candidate sessions whose hop function selected this packet's
    /// destination. More than one means distinct sessions collided on the
    /// same address at the same timestamp; the earliest-provisioned one wins.
    pub matched_sessions: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Error)]
pub enum ProvisionError {
    #[error("switcher {switcher} owns no address of the session's pool")]
    NotAnOwner { switcher: SwitcherId },
}

/// Session table of one edge switcher, indexed for the per-packet check.
///
/// The switcher holds a [`ProvisionedSession`] for every session whose pool
/// includes at least one address it owns. Incoming packets are matched by
/// destination address first, then by the client source address, then by
/// recomputing the hop function; ties go to the earliest-provisioned session.
#[derive(Clone, Debug)]
pub struct SwitcherState {
    id: SwitcherId,
    /// Provisioning order. Re-provisioning a uid removes the old entry and
    /// appends the new one.
    sessions: Vec<ProvisionedSession>,
    /// Owned pool address to candidate slots in `sessions`.
    by_dst: BTreeMap<IpAddr, Vec<usize>>,
    /// Addresses whose last owning session was removed. Packets for them are
    /// refused as dead sessions rather than as unknown destinations.
    retired: BTreeSet<IpAddr>,
}

impl SwitcherState {
    pub fn new(id: SwitcherId) -> Self {
        Self { id, sessions: Vec::new(), by_dst: BTreeMap::new(), retired: BTreeSet::new() }
    }

    pub fn id(&self) -> SwitcherId {
        self.id
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &ProvisionedSession> {
        self.sessions.iter()
    }

    /// Installs a session. The pool must give this switcher at least one
    /// address to answer for, otherwise the provisioning is a protocol error.
    pub fn provision(&mut self, session: ProvisionedSession) -> Result<(), ProvisionError> {
        if !session.pool().entries().iter().any(|e| e.owner == self.id) {
            return Err(ProvisionError::NotAnOwner { switcher: self.id });
        }
        self.remove(session.uid());
        self.sessions.push(session);
        self.rebuild_index();
        Ok(())
    }

    /// Drops the session with this uid, retiring addresses no other live
    /// session answers for. Unknown uids are ignored.
    pub fn remove(&mut self, uid: &SessionUid) -> bool {
        let Some(slot) = self.sessions.iter().position(|s| s.uid() == uid) else {
            return false;
        };
        let gone = self.sessions.remove(slot);
        self.rebuild_index();
        for entry in gone.pool().entries() {
            if entry.owner == self.id && !self.by_dst.contains_key(&entry.addr) {
                self.retired.insert(entry.addr);
            }
        }
        true
    }

    fn rebuild_index(&mut self) {
        self.by_dst.clear();
        for (slot, session) in self.sessions.iter().enumerate() {
            for entry in session.pool().entries() {
                if entry.owner == self.id {
                    self.by_dst.entry(entry.addr).or_default().push(slot);
                }
            }
        }
        let live: Vec<IpAddr> =
            self.retired.iter().copied().filter(|a| self.by_dst.contains_key(a)).collect();
        for addr in live {
            self.retired.remove(&addr);
        }
    }

    /// Pre-routing check for one packet addressed to this switcher's part of
    /// the address space. Never consults a clock: the packet's own timestamps
    /// value is the only time input, so a delayed packet still verifies.
    pub fn verify(&self, packet: &Packet) -> Verification {
        let Some(candidates) = self.by_dst.get(&packet.dst) else {
            let reason = if self.retired.contains(&packet.dst) {
                DropReason::NoSession
            } else {
                DropReason::UnknownDestination
            };
            return Verification { outcome: VerifyOutcome::Drop(reason), matched_sessions: 0 };
        };
        let Some(tsval) = packet.tsval else {
            return Verification {
                outcome: VerifyOutcome::Drop(DropReason::MissingTimestamp),
                matched_sessions: 0,
            };
        };
        let mut matched = 0u32;
        let mut winner: Option<IpAddr> = None;
        for &slot in candidates {
            let session = &self.sessions[slot];
            if session.client_ip() != packet.src {
                continue;
            }
            if pool_address(session.uid(), session.pool(), tsval) == packet.dst {
                matched += 1;
                if winner.is_none() {
                    winner = Some(session.real_ip());
                }
            }
        }
        let outcome = match winner {
            Some(real) => VerifyOutcome::Forward(real),
            None => VerifyOutcome::Drop(DropReason::HashMismatch),
        };
        Verification { outcome, matched_sessions: matched }
    }

    /// Session for a server-to-client response passing back through this
    /// switcher, matched on (real server, client) the way the forward path
    /// recorded it. Earliest-provisioned wins, mirroring `verify`.
    pub fn response_session(&self, real_ip: IpAddr, client_ip: IpAddr) -> Option<&ProvisionedSession> {
        self.sessions.iter().find(|s| s.real_ip() == real_ip && s.client_ip() == client_ip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hopper::{IpPool, PoolEntry, SessionUid};

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    fn pool(addrs: &[&str], owner: SwitcherId) -> IpPool {
        IpPool::new(addrs.iter().map(|a| PoolEntry { addr: ip(a), owner }).collect()).unwrap()
    }

    fn session(uid_byte: u8, addrs: &[&str], owner: SwitcherId, client: &str) -> ProvisionedSession {
        ProvisionedSession::new(
            SessionUid::from_bytes([uid_byte; 16]),
            pool(addrs, owner),
            ip("10.99.99.1"),
            ip(client),
        )
        .unwrap()
    }

    fn valid_dst(s: &ProvisionedSession, tsval: u32) -> IpAddr {
        pool_address(s.uid(), s.pool(), tsval)
    }

    fn packet(src: &str, dst: IpAddr, tsval: Option<u32>) -> Packet {
        Packet { src: ip(src), dst, tsval, size_bytes: 64, payload_tag: 0 }
    }

    #[test]
    fn forwards_only_the_hash_selected_address() {
        let sw = SwitcherId(0);
        let s = session(1, &["10.0.1.1", "10.0.1.2", "10.0.1.3"], sw, "192.0.2.10");
        let mut state = SwitcherState::new(sw);
        state.provision(s.clone()).unwrap();

        let tsval = 99u32;
        let valid = valid_dst(&s, tsval);
        let v = state.verify(&packet("192.0.2.10", valid, Some(tsval)));
        assert_eq!(v.outcome, VerifyOutcome::Forward(ip("10.99.99.1")));
        assert_eq!(v.matched_sessions, 1);

        for wrong in s.pool().addresses().filter(|&a| a != valid) {
            let v = state.verify(&packet("192.0.2.10", wrong, Some(tsval)));
            assert_eq!(v.outcome, VerifyOutcome::Drop(DropReason::HashMismatch));
        }
    }

    #[test]
    fn source_address_is_part_of_the_match() {
        let sw = SwitcherId(0);
        let s = session(1, &["10.0.1.1", "10.0.1.2"], sw, "192.0.2.10");
        let mut state = SwitcherState::new(sw);
        state.provision(s.clone()).unwrap();

        let tsval = 5u32;
        let v = state.verify(&packet("203.0.113.77", valid_dst(&s, tsval), Some(tsval)));
        assert_eq!(v.outcome, VerifyOutcome::Drop(DropReason::HashMismatch));
    }

    #[test]
    fn drops_without_timestamp_and_for_unknown_destinations() {
        let sw = SwitcherId(0);
        let s = session(1, &["10.0.1.1", "10.0.1.2"], sw, "192.0.2.10");
        let mut state = SwitcherState::new(sw);
        state.provision(s).unwrap();

        let v = state.verify(&packet("192.0.2.10", ip("10.0.1.1"), None));
        assert_eq!(v.outcome, VerifyOutcome::Drop(DropReason::MissingTimestamp));

        let v = state.verify(&packet("192.0.2.10", ip("10.0.9.9"), Some(1)));
        assert_eq!(v.outcome, VerifyOutcome::Drop(DropReason::UnknownDestination));
    }

    #[test]
    fn removed_sessions_leave_dead_addresses_behind() {
        let sw = SwitcherId(0);
        let s = session(1, &["10.0.1.1", "10.0.1.2"], sw, "192.0.2.10");
        let uid = *s.uid();
        let mut state = SwitcherState::new(sw);
        state.provision(s).unwrap();
        assert!(state.remove(&uid));
        assert!(!state.remove(&uid));

        let v = state.verify(&packet("192.0.2.10", ip("10.0.1.1"), Some(7)));
        assert_eq!(v.outcome, VerifyOutcome::Drop(DropReason::NoSession));
    }

    #[test]
    fn shared_address_stays_live_until_last_owner_leaves() {
        let sw = SwitcherId(0);
        let a = session(1, &["10.0.1.1", "10.0.1.2"], sw, "192.0.2.10");
        let b = session(2, &["10.0.1.1", "10.0.1.3"], sw, "192.0.2.11");
        let mut state = SwitcherState::new(sw);
        state.provision(a.clone()).unwrap();
        state.provision(b.clone()).unwrap();

        state.remove(a.uid());
        // 10.0.1.2 is dead, but 10.0.1.1 still serves session b.
        let v = state.verify(&packet("192.0.2.10", ip("10.0.1.2"), Some(3)));
        assert_eq!(v.outcome, VerifyOutcome::Drop(DropReason::NoSession));
        let tsval = (0..10_000u32)
            .find(|&t| valid_dst(&b, t) == ip("10.0.1.1"))
            .expect("size-2 pool hits each address quickly");
        let v = state.verify(&packet("192.0.2.11", ip("10.0.1.1"), Some(tsval)));
        assert_eq!(v.outcome, VerifyOutcome::Forward(ip("10.99.99.1")));
    }

    #[test]
    fn collisions_count_and_earliest_provisioned_wins() {
        let sw = SwitcherId(0);
        // Two sessions for the same client over the same two addresses but
        // different uids and different real servers. Scan for a timestamp
        // where both hop functions pick the same address.
        let mk = |uid: u8, real: &str| {
            ProvisionedSession::new(
                SessionUid::from_bytes([uid; 16]),
                pool(&["10.0.1.1", "10.0.1.2"], sw),
                ip(real),
                ip("192.0.2.10"),
            )
            .unwrap()
        };
        let a = mk(1, "10.99.99.1");
        let b = mk(2, "10.99.99.2");
        let mut state = SwitcherState::new(sw);
        state.provision(a.clone()).unwrap();
        state.provision(b.clone()).unwrap();

        let tsval = (0..10_000u32)
            .find(|&t| valid_dst(&a, t) == valid_dst(&b, t))
            .expect("two size-2 pools collide within 10k timestamps");
        let dst = valid_dst(&a, tsval);
        let v = state.verify(&packet("192.0.2.10", dst, Some(tsval)));
        assert_eq!(v.matched_sessions, 2);
        assert_eq!(v.outcome, VerifyOutcome::Forward(ip("10.99.99.1")));
    }

    #[test]
    fn provisioning_requires_owning_part_of_the_pool() {
        let s = session(1, &["10.0.1.1"], SwitcherId(0), "192.0.2.10");
        let mut state = SwitcherState::new(SwitcherId(5));
        assert_eq!(state.provision(s), Err(ProvisionError::NotAnOwner { switcher: SwitcherId(5) }));
    }

    #[test]
    fn response_session_matches_on_both_endpoints() {
        let sw = SwitcherId(0);
        let s = session(1, &["10.0.1.1"], sw, "192.0.2.10");
        let mut state = SwitcherState::new(sw);
        state.provision(s.clone()).unwrap();
        assert_eq!(
            state.response_session(ip("10.99.99.1"), ip("192.0.2.10")).map(|x| *x.uid()),
            Some(*s.uid())
        );
        assert!(state.response_session(ip("10.99.99.1"), ip("192.0.2.99")).is_none());
        assert!(state.response_session(ip("10.99.99.2"), ip("192.0.2.10")).is_none());
    }
}
