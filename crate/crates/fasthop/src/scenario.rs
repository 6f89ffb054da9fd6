//! Declarative simulation inputs.
//!
//! A scenario is one TOML document describing the world to simulate:
//! services, switcher address stock, clients, attackers, link shaping, and
//! the measurement horizon. Parsing is strict (unknown keys are errors).
//! [`Scenario::resolve`] fills every optional knob with its default so a
//! resolved scenario serializes with everything explicit, and the run
//! fingerprint hashes exactly that canonical form.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// TOML integers are signed, so seeds in the upper half of the u64 range
/// cannot survive a round trip as bare literals. Seeds serialize as decimal
/// strings and load from either form.
pub(crate) mod seed_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Literal(u64),
        Text(String),
    }

    fn parse<E: serde::de::Error>(raw: Raw) -> Result<u64, E> {
        match raw {
            Raw::Literal(n) => Ok(n),
            Raw::Text(t) => t.parse().map_err(|_| E::custom("seed must be an unsigned integer")),
        }
    }

    pub fn serialize<S: Serializer>(seed: &u64, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&seed.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<u64, D::Error> {
        parse(Raw::deserialize(de)?)
    }

    pub(crate) mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(seed: &Option<u64>, ser: S) -> Result<S::Ok, S::Error> {
            match seed {
                Some(n) => super::serialize(n, ser),
                None => ser.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<u64>, D::Error> {
            parse(Raw::deserialize(de)?).map(Some)
        }
    }
}

/// Node ids the simulator claims for itself.
pub const RESERVED_NODE_IDS: &[&str] = &["net", "auth", "mgr", "obs"];

const DEFAULT_AUTH_IP: &str = "192.0.0.1";
const DEFAULT_MANAGER_IP: &str = "192.0.0.2";
const DEFAULT_POOL_SIZE: u64 = 256;
const DEFAULT_LIFETIME_MS: u64 = 86_400_000;
const DEFAULT_RESPONSE_SIZE: u32 = 512;
const DEFAULT_CAPACITY_PPMS: u64 = 10_000;
const DEFAULT_LATENCY_MS: u64 = 1;
const DEFAULT_REQUEST_SIZE: u32 = 64;
/// Cap on addresses one switcher may bring, so a typo in a block length does
/// not allocate the whole internet.
const MAX_SWITCHER_STOCK: u64 = 4096;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub horizon_ms: u64,
    #[serde(default, with = "seed_as_string::opt", skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defended: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_lifetime_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit_dst_histogram: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_ip: Option<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manager_ip: Option<IpAddr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_defaults: Option<LinkParams>,
    #[serde(default, rename = "service", skip_serializing_if = "Vec::is_empty")]
    pub services: Vec<ServiceDecl>,
    #[serde(default, rename = "credential", skip_serializing_if = "Vec::is_empty")]
    pub credentials: Vec<CredentialDecl>,
    #[serde(default, rename = "switcher", skip_serializing_if = "Vec::is_empty")]
    pub switchers: Vec<SwitcherDecl>,
    #[serde(default, rename = "client", skip_serializing_if = "Vec::is_empty")]
    pub clients: Vec<ClientDecl>,
    #[serde(default, rename = "attacker", skip_serializing_if = "Vec::is_empty")]
    pub attackers: Vec<AttackerDecl>,
    #[serde(default, rename = "link", skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<Checks>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// Packets per simulated millisecond, per direction.
    pub capacity_ppms: u64,
    pub latency_ms: u64,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDecl {
    pub name: String,
    /// Address the server process actually listens on.
    pub real_ip: IpAddr,
    /// Public contact address clients know; never routed.
    pub initial_ip: IpAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subscribed: Option<bool>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CredentialDecl {
    pub user: String,
    pub secret: String,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitcherDecl {
    pub id: String,
    /// Explicit stock, or...
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub addresses: Vec<IpAddr>,
    /// ...a CIDR block expanded to every address it covers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address_block: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkParams>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientDecl {
    pub id: String,
    pub ip: IpAddr,
    /// Replicates this declaration: ids get a 0-based suffix, addresses
    /// increment from `ip`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    pub service: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    /// Data packets per simulated millisecond once a session is up. Zero
    /// means handshake only.
    pub rate_ppms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_ms: Option<u64>,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_size: Option<u32>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Every packet targets a uniformly random pool address.
    RandomPoolFlood,
    /// Sweeps the whole pool round-robin, covering every address equally.
    FullPoolFlood,
    /// Re-sends a captured client packet byte for byte.
    ExactReplay,
    /// Re-sends a captured packet with the timestamps value advanced.
    TimestampShiftReplay,
    /// Random pool addresses from forged, randomly drawn source addresses.
    SpoofedSourceFlood,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::RandomPoolFlood => "random_pool_flood",
            AttackKind::FullPoolFlood => "full_pool_flood",
            AttackKind::ExactReplay => "exact_replay",
            AttackKind::TimestampShiftReplay => "timestamp_shift_replay",
            AttackKind::SpoofedSourceFlood => "spoofed_source_flood",
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerDecl {
    pub id: String,
    pub ip: IpAddr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    pub kind: AttackKind,
    pub target_service: String,
    /// Session to aim at; defaults to the first client of the target
    /// service. Flood and replay packets impersonate this client's source
    /// address, which is what makes them candidates at the switcher at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_client: Option<String>,
    pub rate_ppms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_ms: Option<u64>,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_bytes: Option<u32>,
    /// Whether this bot's access network lets forged source addresses out.
    /// Defaults to true: impersonating the target client is the baseline
    /// threat. When false, spoofed packets die at the bot's own uplink.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spoofing_allowed: Option<bool>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDecl {
    /// Node whose access link this shapes.
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_ppms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vantage {
    /// Taps the access link of one client.
    NearClient,
    /// Taps the access link of one server.
    NearServer,
}

impl Vantage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Vantage::NearClient => "near_client",
            Vantage::NearServer => "near_server",
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverDecl {
    pub vantage: Vantage,
    /// Client id (near_client) or service name (near_server) whose link is
    /// tapped; defaults to the first declared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
}

/// Pass/fail thresholds evaluated by `run --check`. Only the ones present
/// are tested.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_forwarded_legit: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_legit_policy_drops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_attack_pass_rate: Option<f64>,
    /// Forwarded attack count must sit within this many binomial standard
    /// deviations of injected/pool_size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_pass_sigma: Option<f64>,
    /// Largest allowed max/min ratio of per-switcher ingress.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ingress_imbalance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_hop_change_freq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_uniformity_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_server_ingress_attack_fraction: Option<f64>,
}

#[derive(Clone, PartialEq, Debug, Error)]
pub enum ScenarioError {
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("{path}: {problem}")]
    Invalid { path: String, problem: String },
    #[error("override {path:?}: {problem}")]
    Override { path: String, problem: String },
}

fn invalid(path: impl Into<String>, problem: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.into(), problem: problem.into() }
}

/// One concrete traffic source after `count` expansion.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ExpandedActor {
    pub node_id: String,
    pub ip: IpAddr,
    /// Index of the declaration this actor came from.
    pub decl: usize,
}

/// Scenario with replication counts and address blocks multiplied out.
#[derive(Clone, PartialEq, Debug)]
pub struct Expanded {
    pub clients: Vec<ExpandedActor>,
    pub attackers: Vec<ExpandedActor>,
    /// Per switcher declaration, its full address stock.
    pub switcher_stock: Vec<Vec<IpAddr>>,
}

impl Scenario {
    /// Parses without validating, so overrides can still patch the result.
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self, ScenarioError> {
        value.try_into().map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))
    }

    /// Parse, resolve defaults, apply dotted-path overrides, then an optional
    /// seed override, then validate. This is the one entry point the CLI and
    /// the simulator share.
    pub fn load(
        text: &str,
        overrides: &[(String, String)],
        seed: Option<u64>,
    ) -> Result<Self, ScenarioError> {
        let mut scenario = Self::from_toml_str(text)?;
        scenario.resolve()?;
        if !overrides.is_empty() {
            let mut value = toml::Value::try_from(&scenario)
                .map_err(|e| ScenarioError::Parse(e.to_string()))?;
            for (path, raw) in overrides {
                apply_override(&mut value, path, raw)?;
            }
            scenario = Self::from_value(value)?;
            scenario.resolve()?;
        }
        if let Some(seed) = seed {
            scenario.seed = Some(seed);
        }
        scenario.validate()?;
        Ok(scenario)
    }

    /// Fills every optional knob with its default, so the scenario
    /// serializes with all values explicit.
    pub fn resolve(&mut self) -> Result<(), ScenarioError> {
        self.seed.get_or_insert(0);
        self.defended.get_or_insert(true);
        self.pool_size.get_or_insert(DEFAULT_POOL_SIZE);
        self.session_lifetime_ms.get_or_insert(DEFAULT_LIFETIME_MS);
        self.response_size.get_or_insert(DEFAULT_RESPONSE_SIZE);
        self.emit_dst_histogram.get_or_insert(true);
        self.auth_ip.get_or_insert(DEFAULT_AUTH_IP.parse().unwrap());
        self.manager_ip.get_or_insert(DEFAULT_MANAGER_IP.parse().unwrap());
        self.link_defaults.get_or_insert(LinkParams {
            capacity_ppms: DEFAULT_CAPACITY_PPMS,
            latency_ms: DEFAULT_LATENCY_MS,
        });
        for service in &mut self.services {
            service.subscribed.get_or_insert(true);
        }
        for client in &mut self.clients {
            client.count.get_or_insert(1);
            client.start_ms.get_or_insert(0);
            client.request_size.get_or_insert(DEFAULT_REQUEST_SIZE);
        }
        // Attackers that impersonate a session need to know whose; default to
        // the first client of the target service.
        let first_client: Vec<Option<String>> = self
            .attackers
            .iter()
            .map(|a| {
                self.clients
                    .iter()
                    .find(|c| c.service == a.target_service)
                    .map(|c| expanded_id(&c.id, 0, c.count.unwrap_or(1)))
            })
            .collect();
        for (attacker, first) in self.attackers.iter_mut().zip(first_client) {
            attacker.count.get_or_insert(1);
            attacker.start_ms.get_or_insert(0);
            attacker.size_bytes.get_or_insert(DEFAULT_REQUEST_SIZE);
            attacker.spoofing_allowed.get_or_insert(true);
            if attacker.target_client.is_none() && attacker.kind != AttackKind::SpoofedSourceFlood
            {
                attacker.target_client = first;
            }
        }
        if let Some(observer) = &mut self.observer {
            if observer.node.is_none() {
                observer.node = match observer.vantage {
                    Vantage::NearClient => self
                        .clients
                        .first()
                        .map(|c| expanded_id(&c.id, 0, c.count.unwrap_or(1))),
                    Vantage::NearServer => self.services.first().map(|s| s.name.clone()),
                };
            }
        }
        Ok(())
    }

    /// Multiplies out replication counts and address blocks.
    pub fn expand(&self) -> Result<Expanded, ScenarioError> {
        let mut clients = Vec::new();
        for (i, c) in self.clients.iter().enumerate() {
            let count = c.count.unwrap_or(1);
            if count == 0 {
                return Err(invalid(format!("client[{i}].count"), "count must be at least 1"));
            }
            for k in 0..count {
                let ip = ip_add(c.ip, k as u128).ok_or_else(|| {
                    invalid(format!("client[{i}].ip"), "address range overflows its family")
                })?;
                clients.push(ExpandedActor { node_id: expanded_id(&c.id, k, count), ip, decl: i });
            }
        }
        let mut attackers = Vec::new();
        for (i, a) in self.attackers.iter().enumerate() {
            let count = a.count.unwrap_or(1);
            if count == 0 {
                return Err(invalid(format!("attacker[{i}].count"), "count must be at least 1"));
            }
            for k in 0..count {
                let ip = ip_add(a.ip, k as u128).ok_or_else(|| {
                    invalid(format!("attacker[{i}].ip"), "address range overflows its family")
                })?;
                attackers.push(ExpandedActor {
                    node_id: expanded_id(&a.id, k, count),
                    ip,
                    decl: i,
                });
            }
        }
        let mut switcher_stock = Vec::new();
        for (i, s) in self.switchers.iter().enumerate() {
            switcher_stock.push(switcher_addresses(s, i)?);
        }
        Ok(Expanded { clients, attackers, switcher_stock })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (this build reads {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.horizon_ms == 0 {
            return Err(invalid("horizon_ms", "horizon must be at least 1 ms"));
        }
        if self.pool_size == Some(0) {
            return Err(invalid("pool_size", "pool must have at least one address"));
        }
        if let Some(link) = &self.link_defaults {
            if link.capacity_ppms == 0 {
                return Err(invalid("link_defaults.capacity_ppms", "capacity must be at least 1"));
            }
        }

        let mut service_names = BTreeSet::new();
        for (i, s) in self.services.iter().enumerate() {
            let path = format!("service[{i}]");
            check_name(&s.name, &format!("{path}.name"))?;
            if !service_names.insert(s.name.clone()) {
                return Err(invalid(format!("{path}.name"), format!("duplicate service {:?}", s.name)));
            }
            if s.real_ip == s.initial_ip {
                return Err(invalid(
                    format!("{path}.initial_ip"),
                    "initial contact address must differ from the real address",
                ));
            }
        }

        let mut users = BTreeSet::new();
        for (i, c) in self.credentials.iter().enumerate() {
            if !users.insert(c.user.clone()) {
                return Err(invalid(format!("credential[{i}].user"), format!("duplicate user {:?}", c.user)));
            }
        }

        let expanded = self.expand()?;

        let mut switcher_ids = BTreeSet::new();
        for (i, s) in self.switchers.iter().enumerate() {
            check_name(&s.id, &format!("switcher[{i}].id"))?;
            if !switcher_ids.insert(s.id.clone()) {
                return Err(invalid(format!("switcher[{i}].id"), format!("duplicate switcher {:?}", s.id)));
            }
        }

        // Every address in the simulated world must be claimed exactly once.
        let mut addr_owner: std::collections::BTreeMap<IpAddr, String> =
            std::collections::BTreeMap::new();
        let mut claim = |addr: IpAddr, path: String| -> Result<(), ScenarioError> {
            if let Some(prev) = addr_owner.insert(addr, path.clone()) {
                return Err(invalid(path, format!("address {addr} already used by {prev}")));
            }
            Ok(())
        };
        claim(self.auth_ip.expect("resolved"), "auth_ip".into())?;
        claim(self.manager_ip.expect("resolved"), "manager_ip".into())?;
        for (i, s) in self.services.iter().enumerate() {
            claim(s.real_ip, format!("service[{i}].real_ip"))?;
            claim(s.initial_ip, format!("service[{i}].initial_ip"))?;
        }
        for (i, stock) in expanded.switcher_stock.iter().enumerate() {
            for &addr in stock {
                claim(addr, format!("switcher[{i}]"))?;
            }
        }
        for actor in &expanded.clients {
            claim(actor.ip, format!("client[{}]", actor.decl))?;
        }
        for actor in &expanded.attackers {
            claim(actor.ip, format!("attacker[{}]", actor.decl))?;
        }

        // Node ids likewise.
        let mut node_ids: BTreeSet<String> =
            RESERVED_NODE_IDS.iter().map(|s| s.to_string()).collect();
        for (i, s) in self.switchers.iter().enumerate() {
            if !node_ids.insert(s.id.clone()) {
                return Err(invalid(format!("switcher[{i}].id"), format!("node id {:?} already taken", s.id)));
            }
        }
        for s in &self.services {
            node_ids.insert(format!("srv-{}", s.name));
        }
        for actor in &expanded.clients {
            let path = format!("client[{}].id", actor.decl);
            check_name(&actor.node_id, &path)?;
            if !node_ids.insert(actor.node_id.clone()) {
                return Err(invalid(path, format!("node id {:?} already taken", actor.node_id)));
            }
        }
        for actor in &expanded.attackers {
            let path = format!("attacker[{}].id", actor.decl);
            check_name(&actor.node_id, &path)?;
            if !node_ids.insert(actor.node_id.clone()) {
                return Err(invalid(path, format!("node id {:?} already taken", actor.node_id)));
            }
        }

        let defended = self.defended.unwrap_or(true);
        for (i, c) in self.clients.iter().enumerate() {
            let path = format!("client[{i}]");
            if !service_names.contains(&c.service) {
                return Err(invalid(format!("{path}.service"), format!("unknown service {:?}", c.service)));
            }
        }

        for (i, a) in self.attackers.iter().enumerate() {
            let path = format!("attacker[{i}]");
            if !service_names.contains(&a.target_service) {
                return Err(invalid(
                    format!("{path}.target_service"),
                    format!("unknown service {:?}", a.target_service),
                ));
            }
            if let Some(target) = &a.target_client {
                let found = expanded
                    .clients
                    .iter()
                    .any(|c| &c.node_id == target && self.clients[c.decl].service == a.target_service);
                if !found {
                    return Err(invalid(
                        format!("{path}.target_client"),
                        format!("no client {target:?} on service {:?}", a.target_service),
                    ));
                }
            } else if defended && a.kind != AttackKind::SpoofedSourceFlood {
                return Err(invalid(
                    format!("{path}.target_client"),
                    format!(
                        "kind {:?} impersonates a client session but service {:?} has none",
                        a.kind.as_str(),
                        a.target_service
                    ),
                ));
            }
        }

        if defended && !expanded.clients.is_empty() {
            let stock: u64 = expanded.switcher_stock.iter().map(|s| s.len() as u64).sum();
            let pool = self.pool_size.unwrap_or(DEFAULT_POOL_SIZE);
            if pool > stock {
                return Err(invalid(
                    "pool_size",
                    format!("{pool} addresses requested but switchers stock only {stock}"),
                ));
            }
        }

        for (i, l) in self.links.iter().enumerate() {
            if !node_ids.contains(&l.node) {
                return Err(invalid(format!("link[{i}].node"), format!("unknown node {:?}", l.node)));
            }
            if l.capacity_ppms == Some(0) {
                return Err(invalid(format!("link[{i}].capacity_ppms"), "capacity must be at least 1"));
            }
        }

        if let Some(o) = &self.observer {
            match (o.vantage, &o.node) {
                (Vantage::NearClient, Some(node)) => {
                    if !expanded.clients.iter().any(|c| &c.node_id == node) {
                        return Err(invalid("observer.node", format!("unknown client {node:?}")));
                    }
                }
                (Vantage::NearServer, Some(node)) => {
                    if !service_names.contains(node) {
                        return Err(invalid("observer.node", format!("unknown service {node:?}")));
                    }
                }
                (_, None) => {
                    return Err(invalid(
                        "observer.node",
                        "no node to observe (scenario has no client/service to default to)",
                    ));
                }
            }
        }

        Ok(())
    }

    /// Canonical serialized form. Only meaningful after [`Scenario::resolve`].
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Content hash of the fully resolved configuration, seed included. Two
    /// runs with equal fingerprints must produce byte-identical reports.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.canonical_toml().as_bytes())
    }

    /// Hash of the world's shape only: who exists, their addresses, and link
    /// shaping. Traffic rates, the seed, the defense toggle, and thresholds
    /// are excluded, so defended/undefended pairs of the same world compare.
    pub fn topology_fingerprint(&self) -> String {
        let expanded = self.expand().expect("fingerprints come after validation");
        let mut text = String::new();
        let link = self.link_defaults.expect("resolved");
        let _ = writeln!(text, "v{SCHEMA_VERSION}");
        let _ = writeln!(text, "auth {}", self.auth_ip.expect("resolved"));
        let _ = writeln!(text, "mgr {}", self.manager_ip.expect("resolved"));
        let _ = writeln!(text, "linkdefault {} {}", link.capacity_ppms, link.latency_ms);
        for s in &self.services {
            let _ = writeln!(text, "service {} real={} initial={}", s.name, s.real_ip, s.initial_ip);
        }
        for (i, s) in self.switchers.iter().enumerate() {
            let stock = &expanded.switcher_stock[i];
            let addrs: Vec<String> = stock.iter().map(|a| a.to_string()).collect();
            let _ = writeln!(text, "switcher {} {}", s.id, addrs.join(","));
        }
        for c in &expanded.clients {
            let _ = writeln!(text, "client {} {}", c.node_id, c.ip);
        }
        for a in &expanded.attackers {
            let _ = writeln!(text, "attacker {} {}", a.node_id, a.ip);
        }
        for l in &self.links {
            let _ = writeln!(
                text,
                "link {} cap={:?} lat={:?}",
                l.node, l.capacity_ppms, l.latency_ms
            );
        }
        sha256_hex(text.as_bytes())
    }
}

fn expanded_id(base: &str, index: u32, count: u32) -> String {
    if count == 1 {
        base.to_string()
    } else {
        format!("{base}{index}")
    }
}

fn check_name(name: &str, path: &str) -> Result<(), ScenarioError> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(invalid(
            path,
            format!("{name:?} must be 1..=64 chars of [A-Za-z0-9._-]"),
        ))
    }
}

fn switcher_addresses(decl: &SwitcherDecl, index: usize) -> Result<Vec<IpAddr>, ScenarioError> {
    let path = format!("switcher[{index}]");
    let addrs = match (&decl.addresses[..], &decl.address_block) {
        ([], None) => return Err(invalid(path, "give either addresses or address_block")),
        (list, None) => {
            let mut seen = BTreeSet::new();
            for addr in list {
                if !seen.insert(*addr) {
                    return Err(invalid(format!("{path}.addresses"), format!("duplicate address {addr}")));
                }
            }
            list.to_vec()
        }
        ([], Some(block)) => expand_block(block, &format!("{path}.address_block"))?,
        (_, Some(_)) => {
            return Err(invalid(path, "addresses and address_block are mutually exclusive"))
        }
    };
    if addrs.len() as u64 > MAX_SWITCHER_STOCK {
        return Err(invalid(path, format!("stock of {} exceeds the {MAX_SWITCHER_STOCK} address cap", addrs.len())));
    }
    Ok(addrs)
}

fn expand_block(block: &str, path: &str) -> Result<Vec<IpAddr>, ScenarioError> {
    let bad = |p: &str| invalid(path, format!("{block:?}: {p}"));
    let (base, len) = block.split_once('/').ok_or_else(|| bad("expected base/prefix"))?;
    let base: IpAddr = base.parse().map_err(|_| bad("bad base address"))?;
    let len: u32 = len.parse().map_err(|_| bad("bad prefix length"))?;
    let family_bits = match base {
        IpAddr::V4(_) => 32,
        IpAddr::V6(_) => 128,
    };
    if len > family_bits {
        return Err(bad("prefix longer than the address family"));
    }
    let host_bits = family_bits - len;
    if host_bits > 12 {
        return Err(bad("block larger than 4096 addresses"));
    }
    let count = 1u128 << host_bits;
    let base_int = ip_to_u128(base);
    if base_int & (count - 1) != 0 {
        return Err(bad("base is not aligned to the prefix"));
    }
    (0..count)
        .map(|k| ip_add(base, k).ok_or_else(|| bad("block overflows its family")))
        .collect()
}

fn ip_to_u128(addr: IpAddr) -> u128 {
    match addr {
        IpAddr::V4(v4) => u32::from(v4) as u128,
        IpAddr::V6(v6) => u128::from(v6),
    }
}

fn ip_add(addr: IpAddr, offset: u128) -> Option<IpAddr> {
    match addr {
        IpAddr::V4(v4) => {
            let n = u32::from(v4).checked_add(u32::try_from(offset).ok()?)?;
            Some(IpAddr::V4(n.into()))
        }
        IpAddr::V6(v6) => {
            let n = u128::from(v6).checked_add(offset)?;
            Some(IpAddr::V6(n.into()))
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Parses a `path=value` command-line override.
pub fn parse_override(text: &str) -> Result<(String, String), ScenarioError> {
    match text.split_once('=') {
        Some((path, value)) if !path.is_empty() => Ok((path.to_string(), value.to_string())),
        _ => Err(ScenarioError::Override {
            path: text.to_string(),
            problem: "expected path=value".to_string(),
        }),
    }
}

/// Sets one scalar field addressed by a dotted path (array steps are
/// numeric: `client.0.rate_ppms`). The field must already exist; its current
/// type decides how the value text is parsed.
fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<(), ScenarioError> {
    let err = |problem: &str| ScenarioError::Override {
        path: path.to_string(),
        problem: problem.to_string(),
    };
    let mut node = &mut *root;
    for step in path.split('.') {
        node = match node {
            toml::Value::Table(table) => {
                table.get_mut(step).ok_or_else(|| err(&format!("no field {step:?}")))?
            }
            toml::Value::Array(array) => {
                let index: usize =
                    step.parse().map_err(|_| err(&format!("{step:?} is not an array index")))?;
                let len = array.len();
                array
                    .get_mut(index)
                    .ok_or_else(|| err(&format!("index {index} out of range (len {len})")))?
            }
            _ => return Err(err(&format!("{step:?} descends into a scalar"))),
        };
    }
    *node = match &node {
        toml::Value::Integer(_) => toml::Value::Integer(
            raw.parse().map_err(|_| err("expected an integer"))?,
        ),
        toml::Value::Float(_) => {
            toml::Value::Float(raw.parse().map_err(|_| err("expected a number"))?)
        }
        toml::Value::Boolean(_) => {
            toml::Value::Boolean(raw.parse().map_err(|_| err("expected true or false"))?)
        }
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        _ => return Err(err("only scalar fields can be overridden")),
    };
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const SMALL: &str = r#"
schema_version = 1
horizon_ms = 1000
pool_size = 4

[[service]]
name = "web"
real_ip = "10.99.0.80"
initial_ip = "198.51.100.80"

[[credential]]
user = "alice"
secret = "s3cret"

[[switcher]]
id = "sw0"
addresses = ["10.0.1.0", "10.0.1.1"]

[[switcher]]
id = "sw1"
address_block = "10.0.2.0/31"

[[client]]
id = "c"
ip = "192.0.2.10"
count = 2
service = "web"
user = "alice"
rate_ppms = 1
duration_ms = 100

[[attacker]]
id = "b"
ip = "203.0.113.10"
kind = "random_pool_flood"
target_service = "web"
rate_ppms = 10
duration_ms = 100
"#;

    #[test]
    fn parses_resolves_and_validates() {
        let s = Scenario::load(SMALL, &[], None).unwrap();
        assert_eq!(s.seed, Some(0));
        assert_eq!(s.defended, Some(true));
        assert_eq!(s.pool_size, Some(4));
        assert_eq!(s.attackers[0].target_client.as_deref(), Some("c0"));
        let e = s.expand().unwrap();
        assert_eq!(e.clients.len(), 2);
        assert_eq!(e.clients[1].node_id, "c1");
        assert_eq!(e.clients[1].ip, "192.0.2.11".parse::<IpAddr>().unwrap());
        assert_eq!(e.switcher_stock[1], vec![
            "10.0.2.0".parse::<IpAddr>().unwrap(),
            "10.0.2.1".parse::<IpAddr>().unwrap(),
        ]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{SMALL}\nbogus_knob = 1\n");
        let err = Scenario::load(&text, &[], None).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(_)), "{err}");
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }

    #[test]
    fn validation_errors_name_the_offending_path() {
        let text = SMALL.replace("pool_size = 4", "pool_size = 400");
        let err = Scenario::load(&text, &[], None).unwrap_err();
        assert_eq!(
            err.to_string(),
            "pool_size: 400 addresses requested but switchers stock only 4"
        );

        let text = SMALL.replace("initial_ip = \"198.51.100.80\"", "initial_ip = \"10.99.0.80\"");
        let err = Scenario::load(&text, &[], None).unwrap_err();
        assert!(err.to_string().starts_with("service[0].initial_ip:"), "{err}");

        let text = SMALL.replace("addresses = [\"10.0.1.0\", \"10.0.1.1\"]", "addresses = [\"10.0.2.0\"]");
        let err = Scenario::load(&text, &[], None).unwrap_err();
        assert!(err.to_string().contains("already used"), "{err}");
    }

    #[test]
    fn spoofed_floods_load_without_a_spoofing_declaration() {
        // Forged sources are legal to declare either way: whether the bot's
        // uplink lets them out is the simulated question, not a config error.
        let text = SMALL.replace("kind = \"random_pool_flood\"", "kind = \"spoofed_source_flood\"");
        let s = Scenario::load(&text, &[], None).unwrap();
        assert_eq!(s.attackers[0].spoofing_allowed, Some(true));
        assert_eq!(s.attackers[0].target_client, None);
    }

    #[test]
    fn overrides_patch_existing_fields_only() {
        let s = Scenario::load(
            SMALL,
            &[
                ("pool_size".into(), "2".into()),
                ("client.0.rate_ppms".into(), "9".into()),
                ("defended".into(), "false".into()),
            ],
            None,
        )
        .unwrap();
        assert_eq!(s.pool_size, Some(2));
        assert_eq!(s.clients[0].rate_ppms, 9);
        assert_eq!(s.defended, Some(false));

        let err = Scenario::load(SMALL, &[("no_such".into(), "1".into())], None).unwrap_err();
        assert!(matches!(err, ScenarioError::Override { .. }), "{err}");

        let err =
            Scenario::load(SMALL, &[("pool_size".into(), "lots".into())], None).unwrap_err();
        assert!(err.to_string().contains("expected an integer"), "{err}");
    }

    #[test]
    fn seed_parameter_wins_over_everything() {
        let s = Scenario::load(SMALL, &[("seed".into(), "5".into())], Some(9)).unwrap();
        assert_eq!(s.seed, Some(9));
    }

    #[test]
    fn fingerprint_covers_seed_but_topology_does_not() {
        let a = Scenario::load(SMALL, &[], Some(1)).unwrap();
        let b = Scenario::load(SMALL, &[], Some(2)).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.topology_fingerprint(), b.topology_fingerprint());

        let undefended = Scenario::load(SMALL, &[("defended".into(), "false".into())], Some(1)).unwrap();
        assert_eq!(a.topology_fingerprint(), undefended.topology_fingerprint());
        assert_ne!(a.fingerprint(), undefended.fingerprint());

        let moved = SMALL.replace("ip = \"192.0.2.10\"", "ip = \"192.0.2.20\"");
        let moved = Scenario::load(&moved, &[], Some(1)).unwrap();
        assert_ne!(a.topology_fingerprint(), moved.topology_fingerprint());
    }

    #[test]
    fn canonical_form_round_trips() {
        let s = Scenario::load(SMALL, &[], None).unwrap();
        let mut back = Scenario::from_toml_str(&s.canonical_toml()).unwrap();
        back.resolve().unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn blocks_must_be_aligned_and_small() {
        let text = SMALL.replace("address_block = \"10.0.2.0/31\"", "address_block = \"10.0.2.1/31\"");
        let err = Scenario::load(&text, &[], None).unwrap_err();
        assert!(err.to_string().contains("not aligned"), "{err}");

        let text = SMALL.replace("address_block = \"10.0.2.0/31\"", "address_block = \"10.0.0.0/8\"");
        let err = Scenario::load(&text, &[], None).unwrap_err();
        assert!(err.to_string().contains("4096"), "{err}");
    }
}
