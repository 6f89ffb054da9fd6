//! The hop function and the packet rewrites built on it.
//!
//! Both endpoints of a session derive, from state they already share, which
//! pool address is valid for a given packet: the client stamps it into the
//! destination field on the way out, the owning switcher checks it and swaps
//! in the real server address, and on the way back the switcher masquerades
//! the server behind the same per-timestamp address. The TCP timestamps value
//! rides inside the packet in both directions, so the two sides never need
//! synchronized clocks, and a delayed packet still checks out.

mod siphash;
mod switcher;
mod types;

pub use switcher::{ProvisionError, SwitcherState, Verification};
pub use types::{
    ClientSession, ConfigError, DropReason, IpPool, Packet, PoolEntry, ProvisionedSession,
    RewriteError, SessionUid, SwitcherId, VerifyOutcome,
};

use std::net::IpAddr;

/// Raw 64-bit hop value for one packet: SipHash-2-4 keyed by the session uid
/// over the timestamps value, zero-extended to eight bytes little-endian.
pub fn hop_value(uid: &SessionUid, tsval: u32) -> u64 {
    let mut msg = [0u8; 8];
    msg[..4].copy_from_slice(&tsval.to_le_bytes());
    siphash::siphash24(uid.as_bytes(), &msg)
}

/// Index into an ordered pool of `pool_size` addresses for one packet.
///
/// Pools of up to `2^64` addresses index without truncation; for the full
/// `2^64` case the reduction is the identity, which [`hop_value`] gives
/// directly.
pub fn hop_index(uid: &SessionUid, tsval: u32, pool_size: u64) -> Result<u64, ConfigError> {
    if pool_size == 0 {
        return Err(ConfigError::EmptyPool);
    }
    Ok(hop_value(uid, tsval) % pool_size)
}

/// The pool address valid for `tsval`. Pools are never empty, so this cannot
/// fail.
pub fn pool_address(uid: &SessionUid, pool: &IpPool, tsval: u32) -> IpAddr {
    let index = hop_value(uid, tsval) % pool.len() as u64;
    pool.addr_at(index as usize)
}

/// The address a client must send to at `tsval`.
pub fn virtual_address(session: &ClientSession, tsval: u32) -> IpAddr {
    pool_address(session.uid(), session.pool(), tsval)
}

/// Client-side outgoing rewrite: packets addressed to the session's initial
/// contact address get their destination replaced by the pool address valid
/// for their timestamps value. Traffic to any other destination is left
/// untouched. A session packet without a timestamps value is an error: no
/// destination is valid for it, so it must not be sent.
pub fn client_rewrite_outbound(
    session: &ClientSession,
    mut packet: Packet,
) -> Result<Packet, RewriteError> {
    if packet.dst != session.initial_ip() {
        return Ok(packet);
    }
    let tsval = packet.tsval.ok_or(RewriteError::MissingTimestamp)?;
    packet.dst = virtual_address(session, tsval);
    Ok(packet)
}

/// Client-side incoming rewrite: a response must arrive from the pool address
/// its own timestamps value selects; the source is then folded back to the
/// initial contact address so the transport layer above sees one stable peer.
pub fn client_rewrite_inbound(
    session: &ClientSession,
    mut packet: Packet,
) -> Result<Packet, RewriteError> {
    let tsval = packet.tsval.ok_or(RewriteError::MissingTimestamp)?;
    let expected = virtual_address(session, tsval);
    if packet.src != expected {
        return Err(RewriteError::SourceMismatch { got: packet.src, tsval });
    }
    packet.src = session.initial_ip();
    Ok(packet)
}

/// Switcher-side response rewrite: a server-to-client packet leaves with the
/// pool address valid for its timestamps value as source, hiding the real
/// server address from the client and from on-path observers.
pub fn switcher_rewrite_response(
    session: &ProvisionedSession,
    mut packet: Packet,
) -> Result<Packet, RewriteError> {
    debug_assert_eq!(packet.src, session.real_ip());
    debug_assert_eq!(packet.dst, session.client_ip());
    let tsval = packet.tsval.ok_or(RewriteError::MissingTimestamp)?;
    packet.src = pool_address(session.uid(), session.pool(), tsval);
    Ok(packet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::{IpAddr, Ipv4Addr};

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    fn pool_of(n: u32) -> IpPool {
        let entries = (0..n)
            .map(|i| PoolEntry {
                addr: IpAddr::V4(Ipv4Addr::from(0x0a000100u32 + i)),
                owner: SwitcherId(i % 3),
            })
            .collect();
        IpPool::new(entries).unwrap()
    }

    fn client_session(n: u32) -> ClientSession {
        ClientSession::new(
            SessionUid::from_bytes([7; 16]),
            pool_of(n),
            ip("198.51.100.1"),
            ip("192.0.2.10"),
        )
        .unwrap()
    }

    fn provisioned(n: u32) -> ProvisionedSession {
        ProvisionedSession::new(
            SessionUid::from_bytes([7; 16]),
            pool_of(n),
            ip("10.99.99.1"),
            ip("192.0.2.10"),
        )
        .unwrap()
    }

    // Raw hop value for the all-zero uid at tsval 0, frozen from an
    // independent SipHash-2-4 implementation.
    #[test]
    fn hop_value_matches_frozen_reference() {
        let uid = SessionUid::from_bytes([0; 16]);
        assert_eq!(hop_value(&uid, 0), 0xe849e8bb6ffe2567);
    }

    #[test]
    fn hop_index_rejects_empty_pool() {
        let uid = SessionUid::from_bytes([0; 16]);
        assert_eq!(hop_index(&uid, 0, 0), Err(ConfigError::EmptyPool));
    }

    #[test]
    fn hop_index_is_deterministic_and_in_range() {
        let uid = SessionUid::from_bytes([3; 16]);
        for tsval in [0u32, 1, 2, u32::MAX] {
            let a = hop_index(&uid, tsval, 17).unwrap();
            let b = hop_index(&uid, tsval, 17).unwrap();
            assert_eq!(a, b);
            assert!(a < 17);
        }
    }

    #[test]
    fn virtual_address_agrees_with_hop_index() {
        let s = client_session(11);
        for tsval in 0..200u32 {
            let idx = hop_index(s.uid(), tsval, 11).unwrap() as usize;
            assert_eq!(virtual_address(&s, tsval), s.pool().addr_at(idx));
        }
    }

    #[test]
    fn outbound_rewrites_only_session_traffic() {
        let s = client_session(8);
        let p = Packet {
            src: s.client_ip(),
            dst: s.initial_ip(),
            tsval: Some(1234),
            size_bytes: 64,
            payload_tag: 1,
        };
        let out = client_rewrite_outbound(&s, p).unwrap();
        assert_eq!(out.dst, virtual_address(&s, 1234));
        assert_eq!(out.src, p.src);
        assert_eq!(out.tsval, p.tsval);

        let other = Packet { dst: ip("8.8.8.8"), ..p };
        assert_eq!(client_rewrite_outbound(&s, other).unwrap(), other);
    }

    #[test]
    fn outbound_fails_closed_without_timestamp() {
        let s = client_session(8);
        let p = Packet {
            src: s.client_ip(),
            dst: s.initial_ip(),
            tsval: None,
            size_bytes: 64,
            payload_tag: 0,
        };
        assert_eq!(client_rewrite_outbound(&s, p), Err(RewriteError::MissingTimestamp));
    }

    #[test]
    fn inbound_accepts_only_the_valid_source() {
        let s = client_session(8);
        let tsval = 777u32;
        let good = Packet {
            src: virtual_address(&s, tsval),
            dst: s.client_ip(),
            tsval: Some(tsval),
            size_bytes: 512,
            payload_tag: 2,
        };
        let folded = client_rewrite_inbound(&s, good).unwrap();
        assert_eq!(folded.src, s.initial_ip());

        // Same source one tick later: the expected address moved.
        let stale = Packet { tsval: Some(tsval + 1), ..good };
        if virtual_address(&s, tsval + 1) != good.src {
            assert!(matches!(
                client_rewrite_inbound(&s, stale),
                Err(RewriteError::SourceMismatch { .. })
            ));
        }
    }

    #[test]
    fn response_rewrite_masquerades_the_server() {
        let sw = provisioned(8);
        let cl = client_session(8);
        let tsval = 4242u32;
        let p = Packet {
            src: sw.real_ip(),
            dst: sw.client_ip(),
            tsval: Some(tsval),
            size_bytes: 512,
            payload_tag: 3,
        };
        let out = switcher_rewrite_response(&sw, p).unwrap();
        assert_eq!(out.src, pool_address(sw.uid(), sw.pool(), tsval));
        // Round trip through the client-side check.
        assert_eq!(client_rewrite_inbound(&cl, out).unwrap().src, cl.initial_ip());
    }

    #[test]
    fn sessions_reject_overlapping_addresses() {
        let uid = SessionUid::from_bytes([1; 16]);
        let pool = pool_of(4);
        let in_pool = pool.addr_at(2);
        assert_eq!(
            ProvisionedSession::new(uid, pool.clone(), in_pool, ip("192.0.2.10")),
            Err(ConfigError::PoolContainsRealIp(in_pool))
        );
        assert_eq!(
            ClientSession::new(uid, pool, in_pool, ip("192.0.2.10")),
            Err(ConfigError::PoolContainsInitialIp(in_pool))
        );
    }

    #[test]
    fn uid_hex_round_trips() {
        let uid = SessionUid::from_hex("000102030405060708090a0b0c0d0e0f").unwrap();
        assert_eq!(uid.to_string(), "000102030405060708090a0b0c0d0e0f");
        assert!(SessionUid::from_hex("not hex").is_err());
        assert!(SessionUid::from_hex("00").is_err());
    }
}
