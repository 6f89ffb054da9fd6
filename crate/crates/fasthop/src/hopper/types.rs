use std::collections::BTreeSet;
use std::fmt;
use std::net::IpAddr;

use thiserror::Error;

/// 128-bit session secret, the key of the hop function.
///
/// Shared between the client, the manager, and the provisioned switchers over
/// the control channel only. It never appears inside a data packet, so an
/// on-path observer cannot learn it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionUid([u8; 16]);

impl SessionUid {
    pub const fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub const fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// Parses exactly 32 hex digits.
    pub fn from_hex(s: &str) -> Result<Self, ConfigError> {
        let mut bytes = [0u8; 16];
        hex::decode_to_slice(s, &mut bytes).map_err(|_| ConfigError::BadUidHex(s.to_string()))?;
        Ok(Self(bytes))
    }
}

impl fmt::Display for SessionUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for SessionUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionUid({})", hex::encode(self.0))
    }
}

/// Identifier of an edge switcher.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct SwitcherId(pub u32);

impl fmt::Display for SwitcherId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sw{}", self.0)
    }
}

/// One pool slot: a virtual address and the switcher that owns it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PoolEntry {
    pub addr: IpAddr,
    pub owner: SwitcherId,
}

/// Ordered list of virtual addresses a session hops across.
///
/// The order is authoritative: hop index `i` selects the `i`-th entry, so the
/// manager sends the identical ordered list to the client and to every owning
/// switcher, and no party re-sorts it.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct IpPool {
    entries: Vec<PoolEntry>,
}

impl IpPool {
    pub fn new(entries: Vec<PoolEntry>) -> Result<Self, ConfigError> {
        if entries.is_empty() {
            return Err(ConfigError::EmptyPool);
        }
        let mut seen = BTreeSet::new();
        for entry in &entries {
            if !seen.insert(entry.addr) {
                return Err(ConfigError::DuplicatePoolAddress(entry.addr));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn addr_at(&self, index: usize) -> IpAddr {
        self.entries[index].addr
    }

    pub fn contains(&self, addr: IpAddr) -> bool {
        self.entries.iter().any(|e| e.addr == addr)
    }

    pub fn position(&self, addr: IpAddr) -> Option<usize> {
        self.entries.iter().position(|e| e.addr == addr)
    }

    /// Switchers that own at least one entry, in first-appearance order.
    pub fn owners(&self) -> Vec<SwitcherId> {
        let mut out = Vec::new();
        for entry in &self.entries {
            if !out.contains(&entry.owner) {
                out.push(entry.owner);
            }
        }
        out
    }

    pub fn addresses(&self) -> impl Iterator<Item = IpAddr> + '_ {
        self.entries.iter().map(|e| e.addr)
    }
}

/// The client's share of a session: enough to hop, nothing that reveals
/// where the server really is.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClientSession {
    uid: SessionUid,
    pool: IpPool,
    initial_ip: IpAddr,
    client_ip: IpAddr,
}

impl ClientSession {
    pub fn new(
        uid: SessionUid,
        pool: IpPool,
        initial_ip: IpAddr,
        client_ip: IpAddr,
    ) -> Result<Self, ConfigError> {
        if pool.contains(initial_ip) {
            return Err(ConfigError::PoolContainsInitialIp(initial_ip));
        }
        Ok(Self { uid, pool, initial_ip, client_ip })
    }

    pub fn uid(&self) -> &SessionUid {
        &self.uid
    }

    pub fn pool(&self) -> &IpPool {
        &self.pool
    }

    /// Public, well-known contact address of the service. Not routed: packets
    /// that still carry it when they hit the network go nowhere.
    pub fn initial_ip(&self) -> IpAddr {
        self.initial_ip
    }

    pub fn client_ip(&self) -> IpAddr {
        self.client_ip
    }
}

/// A switcher's share of a session: the same uid and ordered pool the client
/// got, plus the mapping to the real server it must never reveal.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ProvisionedSession {
    uid: SessionUid,
    pool: IpPool,
    real_ip: IpAddr,
    client_ip: IpAddr,
}

impl ProvisionedSession {
    pub fn new(
        uid: SessionUid,
        pool: IpPool,
        real_ip: IpAddr,
        client_ip: IpAddr,
    ) -> Result<Self, ConfigError> {
        if pool.contains(real_ip) {
            return Err(ConfigError::PoolContainsRealIp(real_ip));
        }
        Ok(Self { uid, pool, real_ip, client_ip })
    }

    pub fn uid(&self) -> &SessionUid {
        &self.uid
    }

    pub fn pool(&self) -> &IpPool {
        &self.pool
    }

    /// Address the server actually listens on.
    pub fn real_ip(&self) -> IpAddr {
        self.real_ip
    }

    pub fn client_ip(&self) -> IpAddr {
        self.client_ip
    }
}

/// The fields of an IP packet the hop math touches. Everything else about a
/// real packet is irrelevant here and left out.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Packet {
    pub src: IpAddr,
    pub dst: IpAddr,
    /// TCP timestamps value (TSval). The only time input to any hop
    /// computation; no wall clock is ever consulted.
    pub tsval: Option<u32>,
    pub size_bytes: u32,
    /// Opaque tracing label, carried through rewrites untouched.
    pub payload_tag: u64,
}

/// Verdict of the switcher's pre-routing check on one packet.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VerifyOutcome {
    /// Packet belongs to a live session; forward it to this real address.
    Forward(IpAddr),
    Drop(DropReason),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum DropReason {
    /// Destination is a pool address of a candidate session, but not the one
    /// the hop function selects for this packet's timestamp.
    HashMismatch,
    /// Packet carries no TCP timestamps value. Fail closed.
    MissingTimestamp,
    /// Destination was never provisioned on this switcher.
    UnknownDestination,
    /// Destination belonged to a session that has since been removed.
    NoSession,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::HashMismatch => "hash_mismatch",
            DropReason::MissingTimestamp => "missing_timestamp",
            DropReason::UnknownDestination => "unknown_destination",
            DropReason::NoSession => "no_session",
        }
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum ConfigError {
    #[error("pool must contain at least one address")]
    EmptyPool,
    #[error("pool lists {0} twice")]
    DuplicatePoolAddress(IpAddr),
    #[error("pool contains the real server address {0}")]
    PoolContainsRealIp(IpAddr),
    #[error("pool contains the initial contact address {0}")]
    PoolContainsInitialIp(IpAddr),
    #[error("initial contact address equals the real server address {0}")]
    InitialEqualsReal(IpAddr),
    #[error("session uid must be 32 hex digits, got {0:?}")]
    BadUidHex(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Error)]
pub enum RewriteError {
    #[error("packet on a hopped session carries no timestamps value")]
    MissingTimestamp,
    #[error("source {got} is not the session's virtual address for tsval {tsval}")]
    SourceMismatch { got: IpAddr, tsval: u32 },
}
