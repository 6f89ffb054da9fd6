//! Session setup: name resolution, authorization, and switcher provisioning.
//!
//! A client reaches a protected service in three steps. The directory resolves
//! the service name to an authorization server. The authorization server
//! checks credentials and hands back the manager's address. The manager mints
//! the session: a fresh 128-bit uid, an ordered address pool drawn from the
//! switchers' inventories, and provisioning messages for every switcher that
//! owns part of that pool. The client's grant is released only after all
//! owning switchers acknowledged, so there is never a moment where the client
//! may send but no switcher would accept.

pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use thiserror::Error;

use crate::hopper::{ConfigError, IpPool, PoolEntry, SessionUid, SwitcherId};

/// One protected (or at least known) service.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ServiceRecord {
    pub name: String,
    /// Address the server actually listens on; never given to clients.
    pub real_ip: IpAddr,
    /// Public contact address clients know the service by. Not routed.
    pub initial_ip: IpAddr,
    /// Services can be listed without having bought the defense.
    pub subscribed: bool,
}

/// Resolves service names for clients. Stands in for DNS: the answer for a
/// protected service is where to authorize, not where the server is.
#[derive(Clone, Debug, Default)]
pub struct Directory {
    services: BTreeMap<String, ServiceRecord>,
    auth_ip: Option<IpAddr>,
}

impl Directory {
    pub fn new(auth_ip: IpAddr) -> Self {
        Self { services: BTreeMap::new(), auth_ip: Some(auth_ip) }
    }

    pub fn register(&mut self, service: ServiceRecord) {
        self.services.insert(service.name.clone(), service);
    }

    /// Where to start the handshake for `name`.
    pub fn resolve(&self, name: &str) -> Result<IpAddr, ControlError> {
        if !self.services.contains_key(name) {
            return Err(ControlError::UnknownService(name.to_string()));
        }
        self.auth_ip.ok_or(ControlError::NoAuthServer)
    }

    pub fn service(&self, name: &str) -> Option<&ServiceRecord> {
        self.services.get(name)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AuthRequest {
    pub client_ip: IpAddr,
    pub service: String,
    /// Opaque credential bytes; this implementation reads them as
    /// `user:secret` UTF-8.
    pub credentials: Vec<u8>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RejectReason {
    UnknownService,
    NotSubscribed,
    BadCredentials,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::UnknownService => "unknown_service",
            RejectReason::NotSubscribed => "not_subscribed",
            RejectReason::BadCredentials => "bad_credentials",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        match s {
            "unknown_service" => Some(RejectReason::UnknownService),
            "not_subscribed" => Some(RejectReason::NotSubscribed),
            "bad_credentials" => Some(RejectReason::BadCredentials),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AuthDecision {
    /// Credentials accepted; continue at the manager.
    Accept { manager_ip: IpAddr },
    Reject(RejectReason),
}

/// Checks who may hop. Holds the user table and the service list; on success
/// it only reveals the manager's address, nothing about the service's
/// addresses.
#[derive(Clone, Debug)]
pub struct AuthServer {
    services: BTreeMap<String, ServiceRecord>,
    users: BTreeMap<String, String>,
    manager_ip: IpAddr,
}

impl AuthServer {
    pub fn new(manager_ip: IpAddr) -> Self {
        Self { services: BTreeMap::new(), users: BTreeMap::new(), manager_ip }
    }

    pub fn register_service(&mut self, service: ServiceRecord) {
        self.services.insert(service.name.clone(), service);
    }

    pub fn register_user(&mut self, user: &str, secret: &str) {
        self.users.insert(user.to_string(), secret.to_string());
    }

    pub fn authorize(&self, request: &AuthRequest) -> AuthDecision {
        let Some(service) = self.services.get(&request.service) else {
            return AuthDecision::Reject(RejectReason::UnknownService);
        };
        if !service.subscribed {
            return AuthDecision::Reject(RejectReason::NotSubscribed);
        }
        let Ok(text) = std::str::from_utf8(&request.credentials) else {
            return AuthDecision::Reject(RejectReason::BadCredentials);
        };
        let Some((user, secret)) = text.split_once(':') else {
            return AuthDecision::Reject(RejectReason::BadCredentials);
        };
        match self.users.get(user) {
            Some(expected) if expected == secret => {
                AuthDecision::Accept { manager_ip: self.manager_ip }
            }
            _ => AuthDecision::Reject(RejectReason::BadCredentials),
        }
    }
}

/// Address stock one switcher brings to the system.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SwitcherInventory {
    pub id: SwitcherId,
    pub addresses: Vec<IpAddr>,
}

/// What the client gets: everything needed to hop, nothing that reveals the
/// real server address.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SessionGrant {
    pub uid: SessionUid,
    pub pool: IpPool,
    pub initial_ip: IpAddr,
    pub expiry_ms: u64,
}

/// What an owning switcher gets. Same uid and ordered pool as the client's
/// grant, plus the mapping to the real server and the client's address.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ProvisionMessage {
    pub switcher: SwitcherId,
    pub uid: SessionUid,
    pub pool: IpPool,
    pub real_ip: IpAddr,
    pub client_ip: IpAddr,
    pub expiry_ms: u64,
}

/// A freshly minted session: the grant must be withheld from the client until
/// every provisioning message has been acknowledged.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Establishment {
    pub grant: SessionGrant,
    pub provisions: Vec<ProvisionMessage>,
    pub real_ip: IpAddr,
    pub client_ip: IpAddr,
}

#[derive(Clone, PartialEq, Eq, Debug)]
struct ActiveSession {
    service: String,
    client_ip: IpAddr,
    owners: Vec<SwitcherId>,
    expiry_ms: u64,
}

/// Mints sessions and tracks which switchers hold them.
#[derive(Clone, Debug, Default)]
pub struct Manager {
    services: BTreeMap<String, ServiceRecord>,
    /// Registration order; pool selection interleaves inventories so load
    /// splits across switchers.
    inventories: Vec<SwitcherInventory>,
    issued: BTreeSet<SessionUid>,
    active: BTreeMap<SessionUid, ActiveSession>,
}

impl Manager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_service(&mut self, service: ServiceRecord) {
        self.services.insert(service.name.clone(), service);
    }

    pub fn register_switcher(&mut self, inventory: SwitcherInventory) {
        self.inventories.push(inventory);
    }

    pub fn active_sessions(&self) -> usize {
        self.active.len()
    }

    /// Mints a session of `pool_size` addresses for `client_ip` on `service`,
    /// drawing uid entropy from `entropy`. The pool takes addresses from the
    /// registered inventories round-robin (first address of each, then second
    /// of each, and so on), so every switcher with stock participates.
    pub fn establish_session(
        &mut self,
        client_ip: IpAddr,
        service_name: &str,
        pool_size: u64,
        now_ms: u64,
        lifetime_ms: u64,
        entropy: &mut dyn FnMut() -> u64,
    ) -> Result<Establishment, ControlError> {
        let service = self
            .services
            .get(service_name)
            .ok_or_else(|| ControlError::UnknownService(service_name.to_string()))?
            .clone();
        if !service.subscribed {
            return Err(ControlError::NotSubscribed(service_name.to_string()));
        }
        let entries = self.select_pool(pool_size)?;
        let pool = IpPool::new(entries)?;
        let uid = loop {
            let mut bytes = [0u8; 16];
            bytes[..8].copy_from_slice(&entropy().to_le_bytes());
            bytes[8..].copy_from_slice(&entropy().to_le_bytes());
            let uid = SessionUid::from_bytes(bytes);
            if self.issued.insert(uid) {
                break uid;
            }
        };
        let expiry_ms = now_ms.saturating_add(lifetime_ms);
        let owners = pool.owners();
        let provisions = owners
            .iter()
            .map(|&switcher| ProvisionMessage {
                switcher,
                uid,
                pool: pool.clone(),
                real_ip: service.real_ip,
                client_ip,
                expiry_ms,
            })
            .collect();
        self.active.insert(
            uid,
            ActiveSession {
                service: service.name.clone(),
                client_ip,
                owners,
                expiry_ms,
            },
        );
        Ok(Establishment {
            grant: SessionGrant { uid, pool, initial_ip: service.initial_ip, expiry_ms },
            provisions,
            real_ip: service.real_ip,
            client_ip,
        })
    }

    fn select_pool(&self, pool_size: u64) -> Result<Vec<PoolEntry>, ControlError> {
        if pool_size == 0 {
            return Err(ControlError::Config(ConfigError::EmptyPool));
        }
        let available: u64 = self.inventories.iter().map(|i| i.addresses.len() as u64).sum();
        if pool_size > available {
            return Err(ControlError::PoolExhausted { requested: pool_size, available });
        }
        let mut entries = Vec::with_capacity(pool_size as usize);
        let mut round = 0usize;
        while (entries.len() as u64) < pool_size {
            for inv in &self.inventories {
                if let Some(&addr) = inv.addresses.get(round) {
                    entries.push(PoolEntry { addr, owner: inv.id });
                    if entries.len() as u64 == pool_size {
                        break;
                    }
                }
            }
            round += 1;
        }
        Ok(entries)
    }

    /// Tears the session down. Returns the switchers that must drop it, empty
    /// for unknown uids (expiry and explicit teardown can race).
    pub fn expire_session(&mut self, uid: &SessionUid) -> Vec<SwitcherId> {
        match self.active.remove(uid) {
            Some(session) => session.owners,
            None => Vec::new(),
        }
    }

    pub fn session_expiry(&self, uid: &SessionUid) -> Option<u64> {
        self.active.get(uid).map(|s| s.expiry_ms)
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum ControlError {
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("service {0:?} is not subscribed to the defense")]
    NotSubscribed(String),
    #[error("no authorization server registered")]
    NoAuthServer,
    #[error("pool of {requested} addresses requested, {available} available")]
    PoolExhausted { requested: u64, available: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    fn service(name: &str, subscribed: bool) -> ServiceRecord {
        ServiceRecord {
            name: name.to_string(),
            real_ip: ip("10.99.0.80"),
            initial_ip: ip("198.51.100.80"),
            subscribed,
        }
    }

    fn counter_entropy() -> impl FnMut() -> u64 {
        let mut n = 0u64;
        move || {
            n += 1;
            n
        }
    }

    #[test]
    fn directory_points_clients_at_the_auth_server() {
        let mut dir = Directory::new(ip("192.0.0.1"));
        dir.register(service("web", true));
        assert_eq!(dir.resolve("web").unwrap(), ip("192.0.0.1"));
        assert!(matches!(dir.resolve("nope"), Err(ControlError::UnknownService(_))));
    }

    #[test]
    fn authorization_checks_service_and_credentials() {
        let mut auth = AuthServer::new(ip("192.0.0.2"));
        auth.register_service(service("web", true));
        auth.register_service(service("bare", false));
        auth.register_user("alice", "s3cret");

        let mut req = AuthRequest {
            client_ip: ip("192.0.2.10"),
            service: "web".to_string(),
            credentials: b"alice:s3cret".to_vec(),
        };
        assert_eq!(auth.authorize(&req), AuthDecision::Accept { manager_ip: ip("192.0.0.2") });

        req.credentials = b"alice:wrong".to_vec();
        assert_eq!(auth.authorize(&req), AuthDecision::Reject(RejectReason::BadCredentials));

        req.credentials = b"alice:s3cret".to_vec();
        req.service = "bare".to_string();
        assert_eq!(auth.authorize(&req), AuthDecision::Reject(RejectReason::NotSubscribed));

        req.service = "ghost".to_string();
        assert_eq!(auth.authorize(&req), AuthDecision::Reject(RejectReason::UnknownService));
    }

    fn manager_with_stock() -> Manager {
        let mut mgr = Manager::new();
        mgr.register_service(service("web", true));
        mgr.register_switcher(SwitcherInventory {
            id: SwitcherId(0),
            addresses: (0..4).map(|i| ip(&format!("10.0.1.{i}"))).collect(),
        });
        mgr.register_switcher(SwitcherInventory {
            id: SwitcherId(1),
            addresses: (0..4).map(|i| ip(&format!("10.0.2.{i}"))).collect(),
        });
        mgr
    }

    #[test]
    fn pool_selection_interleaves_switcher_inventories() {
        let mut mgr = manager_with_stock();
        let mut entropy = counter_entropy();
        let est = mgr
            .establish_session(ip("192.0.2.10"), "web", 5, 0, 1000, &mut entropy)
            .unwrap();
        let got: Vec<(IpAddr, SwitcherId)> =
            est.grant.pool.entries().iter().map(|e| (e.addr, e.owner)).collect();
        assert_eq!(
            got,
            vec![
                (ip("10.0.1.0"), SwitcherId(0)),
                (ip("10.0.2.0"), SwitcherId(1)),
                (ip("10.0.1.1"), SwitcherId(0)),
                (ip("10.0.2.1"), SwitcherId(1)),
                (ip("10.0.1.2"), SwitcherId(0)),
            ]
        );
        // One provisioning message per owning switcher, same pool order.
        assert_eq!(est.provisions.len(), 2);
        for p in &est.provisions {
            assert_eq!(p.pool, est.grant.pool);
            assert_eq!(p.real_ip, ip("10.99.0.80"));
            assert_eq!(p.uid, est.grant.uid);
        }
        assert_eq!(est.grant.expiry_ms, 1000);
    }

    #[test]
    fn grants_never_reveal_the_real_address() {
        let mut mgr = manager_with_stock();
        let mut entropy = counter_entropy();
        let est = mgr
            .establish_session(ip("192.0.2.10"), "web", 8, 0, 1000, &mut entropy)
            .unwrap();
        assert_eq!(est.grant.initial_ip, ip("198.51.100.80"));
        assert!(!est.grant.pool.contains(ip("10.99.0.80")));
    }

    #[test]
    fn uids_are_unique_even_with_colliding_entropy() {
        let mut mgr = manager_with_stock();
        // Entropy source that repeats: first two sessions would get the same
        // uid without the re-draw.
        let draws = [1u64, 2, 1, 2, 3, 4];
        let mut i = 0;
        let mut entropy = move || {
            let v = draws[i % draws.len()];
            i += 1;
            v
        };
        let a = mgr.establish_session(ip("192.0.2.10"), "web", 2, 0, 1000, &mut entropy).unwrap();
        let b = mgr.establish_session(ip("192.0.2.11"), "web", 2, 0, 1000, &mut entropy).unwrap();
        assert_ne!(a.grant.uid, b.grant.uid);
    }

    #[test]
    fn oversized_pools_are_refused() {
        let mut mgr = manager_with_stock();
        let mut entropy = counter_entropy();
        assert_eq!(
            mgr.establish_session(ip("192.0.2.10"), "web", 9, 0, 1000, &mut entropy),
            Err(ControlError::PoolExhausted { requested: 9, available: 8 })
        );
    }

    #[test]
    fn expiry_names_the_owning_switchers_once() {
        let mut mgr = manager_with_stock();
        let mut entropy = counter_entropy();
        let est =
            mgr.establish_session(ip("192.0.2.10"), "web", 4, 10, 500, &mut entropy).unwrap();
        assert_eq!(mgr.session_expiry(&est.grant.uid), Some(510));
        let owners = mgr.expire_session(&est.grant.uid);
        assert_eq!(owners, vec![SwitcherId(0), SwitcherId(1)]);
        assert!(mgr.expire_session(&est.grant.uid).is_empty());
        assert_eq!(mgr.active_sessions(), 0);
    }
}
