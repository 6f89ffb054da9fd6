//! Deterministic discrete-event network simulator.
//!
//! The simulated world is a star: every host hangs off one routing hub by an
//! access link with per-direction capacity (packets per millisecond, tail
//! drop) and fixed latency. Time is integer milliseconds. Determinism is
//! load-bearing: events execute in (time, insertion sequence) order, all
//! iterated state lives in ordered maps, and every random draw comes from a
//! per-node stream derived from the master seed and the node's name, so one
//! seed means one byte-identical run.
//!
//! Control traffic (authorization, session grants, switcher provisioning)
//! travels on a private channel: it pays path latency but never competes
//! with data for link capacity and cannot be dropped. Data packets pay
//! capacity on every link they cross.

mod metrics;
mod rng;

pub use metrics::{Class, HopTransitions, RunMetrics};
pub use rng::SimRng;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::control::wire::{self, ControlMsg};
use crate::control::{
    AuthDecision, AuthRequest, AuthServer, Directory, Manager, ServiceRecord, SessionGrant,
    SwitcherInventory,
};
use crate::hopper::{
    client_rewrite_inbound, client_rewrite_outbound, hop_value, switcher_rewrite_response,
    ClientSession, Packet, ProvisionedSession, SessionUid, SwitcherId, SwitcherState,
    VerifyOutcome,
};
use crate::scenario::{AttackKind, Scenario, ScenarioError, Vantage};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum NodeKind {
    Hub,
    Auth,
    Manager,
    Server { service: usize },
    Switcher { index: usize },
    Client { index: usize },
    Bot { index: usize },
}

struct Node {
    name: String,
    kind: NodeKind,
    /// Access link to the hub; only the hub itself has none.
    link: Option<usize>,
}

struct LinkState {
    capacity_ppms: u64,
    latency_ms: u64,
    /// Per direction (0 = toward hub, 1 = from hub): packets already sent in
    /// the tick recorded alongside.
    used: [(u64, u64); 2],
}

struct ServiceState {
    name: String,
    real_ip: IpAddr,
    node: NodeId,
}

struct ClientState {
    node: NodeId,
    ip: IpAddr,
    decl: usize,
    label: String,
    tsval_offset: u32,
    session: Option<ClientSession>,
    ticks_done: u64,
    last_sample: Option<(u32, IpAddr)>,
}

struct BotState {
    node: NodeId,
    ip: IpAddr,
    decl: usize,
    rng: SimRng,
    /// Client packet snatched off the wire, for the replay kinds.
    captured: Option<Packet>,
    shift: u32,
    sweep: u64,
    /// Impersonated client's address, resolved at build time.
    target_ip: Option<IpAddr>,
}

struct SwitcherUnit {
    node: NodeId,
    state: SwitcherState,
}

struct PendingGrant {
    grant: SessionGrant,
    client_node: NodeId,
    waiting: BTreeSet<SwitcherId>,
}

#[derive(Clone, Copy, Debug)]
struct SimPacket {
    pkt: Packet,
    class: Class,
    response: bool,
    /// Request already accounted as forwarded; later wire losses go to
    /// `post_forward_drops` instead of the class conservation ledger.
    counted: bool,
    /// Response source route: the switcher that must masquerade it.
    via: Option<NodeId>,
}

enum Ev {
    Handshake { client: usize },
    ClientTick { client: usize },
    BotTick { bot: usize },
    Deliver { to: NodeId, packet: SimPacket },
    Ctrl { to: NodeId, from: NodeId, text: String },
    Expire { uid: SessionUid },
}

struct Queued {
    time: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// What one tapped access link saw: directional packet counts between
/// address pairs. This is the full knowledge of a passive on-path observer.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ObserverReport {
    pub vantage: Vantage,
    pub node: String,
    pub flows: BTreeMap<String, u64>,
}

impl ObserverReport {
    fn key(src: IpAddr, dst: IpAddr) -> String {
        format!("{src}>{dst}")
    }

    /// Addresses `host` exchanged packets with.
    pub fn peers_of(&self, host: IpAddr) -> BTreeSet<IpAddr> {
        let mut peers = BTreeSet::new();
        for flow in self.flows.keys() {
            let (src, dst) = flow.split_once('>').expect("flow key");
            let (src, dst): (IpAddr, IpAddr) = (src.parse().unwrap(), dst.parse().unwrap());
            if src == host {
                peers.insert(dst);
            } else if dst == host {
                peers.insert(src);
            }
        }
        peers
    }

    /// Packet counts toward each destination `host` sent to.
    pub fn counts_from(&self, host: IpAddr) -> BTreeMap<IpAddr, u64> {
        let mut out = BTreeMap::new();
        for (flow, &n) in &self.flows {
            let (src, dst) = flow.split_once('>').expect("flow key");
            if src.parse::<IpAddr>().unwrap() == host {
                *out.entry(dst.parse().unwrap()).or_insert(0) += n;
            }
        }
        out
    }
}

struct ObserverState {
    vantage: Vantage,
    node_name: String,
    tapped: NodeId,
    flows: BTreeMap<(IpAddr, IpAddr), u64>,
}

/// Result of one finished run.
pub struct RunOutput {
    /// The resolved scenario the run actually used.
    pub scenario: Scenario,
    pub metrics: RunMetrics,
    pub observer: Option<ObserverReport>,
    pub event_log: Option<String>,
}

/// Builds the world from a scenario and runs it to the horizon.
pub fn run_scenario(scenario: &Scenario, with_events: bool) -> Result<RunOutput, ScenarioError> {
    let mut sim = Simulation::build(scenario)?;
    if with_events {
        sim.enable_event_log();
    }
    sim.run_to_horizon();
    Ok(RunOutput {
        observer: sim.observer_report(),
        scenario: sim.scenario,
        metrics: sim.metrics,
        event_log: sim.event_log,
    })
}

pub struct Simulation {
    scenario: Scenario,
    now: u64,
    seq: u64,
    horizon: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    nodes: Vec<Node>,
    links: Vec<LinkState>,
    hub: NodeId,
    addr_to_node: BTreeMap<IpAddr, NodeId>,
    services: Vec<ServiceState>,
    clients: Vec<ClientState>,
    bots: Vec<BotState>,
    switchers: Vec<SwitcherUnit>,
    directory: Directory,
    auth: AuthServer,
    auth_node: NodeId,
    manager_node: NodeId,
    manager: Manager,
    manager_rng: SimRng,
    pending: BTreeMap<SessionUid, PendingGrant>,
    /// What the public can learn by watching grants being used: which pool
    /// addresses belong to which client. Attackers draw targets from here.
    public_pools: BTreeMap<IpAddr, Vec<IpAddr>>,
    /// (client, real server) to the switcher that last forwarded for the
    /// pair; responses are source-routed back through it.
    flow_table: BTreeMap<(IpAddr, IpAddr), NodeId>,
    /// Client node to bots waiting to capture one of its packets.
    capture_subs: BTreeMap<NodeId, Vec<usize>>,
    observer: Option<ObserverState>,
    metrics: RunMetrics,
    defended: bool,
    pool_size: u64,
    lifetime_ms: u64,
    response_size: u32,
    emit_hist: bool,
    event_log: Option<String>,
    next_tag: u64,
    ran: bool,
}

impl Simulation {
    pub fn build(input: &Scenario) -> Result<Self, ScenarioError> {
        let mut scenario = input.clone();
        scenario.resolve()?;
        scenario.validate()?;
        let expanded = scenario.expand()?;
        let seed = scenario.seed.expect("resolved");
        let defaults = scenario.link_defaults.expect("resolved");

        // Per-node link overrides by node name.
        let mut link_over: BTreeMap<&str, (Option<u64>, Option<u64>)> = BTreeMap::new();
        for l in &scenario.links {
            link_over.insert(&l.node, (l.capacity_ppms, l.latency_ms));
        }

        let mut nodes = Vec::new();
        let mut links = Vec::new();
        let mut addr_to_node = BTreeMap::new();
        let push_node = |nodes: &mut Vec<Node>,
                             links: &mut Vec<LinkState>,
                             name: String,
                             kind: NodeKind,
                             link: Option<LinkParamsFor>| {
            let id = NodeId(nodes.len());
            let link = link.map(|choice| {
                let (cap, lat) = match link_over.get(name.as_str()) {
                    Some(&(c, l)) => (c.unwrap_or(choice.capacity), l.unwrap_or(choice.latency)),
                    None => (choice.capacity, choice.latency),
                };
                links.push(LinkState {
                    capacity_ppms: cap,
                    latency_ms: lat,
                    used: [(0, 0), (0, 0)],
                });
                links.len() - 1
            });
            nodes.push(Node { name, kind, link });
            id
        };

        struct LinkParamsFor {
            capacity: u64,
            latency: u64,
        }
        let default_link = || LinkParamsFor {
            capacity: defaults.capacity_ppms,
            latency: defaults.latency_ms,
        };

        let hub = push_node(&mut nodes, &mut links, "net".into(), NodeKind::Hub, None);
        let auth_node = push_node(
            &mut nodes,
            &mut links,
            "auth".into(),
            NodeKind::Auth,
            Some(default_link()),
        );
        let manager_node = push_node(
            &mut nodes,
            &mut links,
            "mgr".into(),
            NodeKind::Manager,
            Some(default_link()),
        );
        let auth_ip = scenario.auth_ip.expect("resolved");
        let manager_ip = scenario.manager_ip.expect("resolved");
        addr_to_node.insert(auth_ip, auth_node);
        addr_to_node.insert(manager_ip, manager_node);

        let mut services = Vec::new();
        for (i, s) in scenario.services.iter().enumerate() {
            let node = push_node(
                &mut nodes,
                &mut links,
                format!("srv-{}", s.name),
                NodeKind::Server { service: i },
                Some(default_link()),
            );
            addr_to_node.insert(s.real_ip, node);
            services.push(ServiceState { name: s.name.clone(), real_ip: s.real_ip, node });
        }

        let mut switchers = Vec::new();
        let mut manager = Manager::new();
        for (i, s) in scenario.switchers.iter().enumerate() {
            let choice = match s.link {
                Some(l) => LinkParamsFor { capacity: l.capacity_ppms, latency: l.latency_ms },
                None => default_link(),
            };
            let node = push_node(
                &mut nodes,
                &mut links,
                s.id.clone(),
                NodeKind::Switcher { index: i },
                Some(choice),
            );
            for &addr in &expanded.switcher_stock[i] {
                addr_to_node.insert(addr, node);
            }
            manager.register_switcher(SwitcherInventory {
                id: SwitcherId(i as u32),
                addresses: expanded.switcher_stock[i].clone(),
            });
            switchers.push(SwitcherUnit { node, state: SwitcherState::new(SwitcherId(i as u32)) });
        }

        let mut clients = Vec::new();
        for actor in &expanded.clients {
            let node = push_node(
                &mut nodes,
                &mut links,
                actor.node_id.clone(),
                NodeKind::Client { index: clients.len() },
                Some(default_link()),
            );
            addr_to_node.insert(actor.ip, node);
            let decl = &scenario.clients[actor.decl];
            let mut stream = SimRng::stream(seed, &actor.node_id);
            clients.push(ClientState {
                node,
                ip: actor.ip,
                decl: actor.decl,
                label: format!("{}/{}", actor.node_id, decl.service),
                tsval_offset: stream.next_u32(),
                session: None,
                ticks_done: 0,
                last_sample: None,
            });
        }

        let mut bots = Vec::new();
        let mut capture_subs: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for actor in &expanded.attackers {
            let node = push_node(
                &mut nodes,
                &mut links,
                actor.node_id.clone(),
                NodeKind::Bot { index: bots.len() },
                Some(default_link()),
            );
            addr_to_node.insert(actor.ip, node);
            let decl = &scenario.attackers[actor.decl];
            let target_ip = decl.target_client.as_ref().and_then(|id| {
                expanded.clients.iter().find(|c| &c.node_id == id).map(|c| c.ip)
            });
            if matches!(decl.kind, AttackKind::ExactReplay | AttackKind::TimestampShiftReplay) {
                if let Some(ip) = target_ip {
                    if let Some(&client_node) = addr_to_node.get(&ip) {
                        capture_subs.entry(client_node).or_default().push(bots.len());
                    }
                }
            }
            bots.push(BotState {
                node,
                ip: actor.ip,
                decl: actor.decl,
                rng: SimRng::stream(seed, &actor.node_id),
                captured: None,
                shift: 0,
                sweep: 0,
                target_ip,
            });
        }

        let mut directory = Directory::new(auth_ip);
        let mut auth = AuthServer::new(manager_ip);
        for s in &scenario.services {
            let record = ServiceRecord {
                name: s.name.clone(),
                real_ip: s.real_ip,
                initial_ip: s.initial_ip,
                subscribed: s.subscribed.unwrap_or(true),
            };
            directory.register(record.clone());
            auth.register_service(record.clone());
            manager.register_service(record);
        }
        for c in &scenario.credentials {
            auth.register_user(&c.user, &c.secret);
        }

        let observer = scenario.observer.as_ref().map(|o| {
            let node_name = o.node.clone().expect("resolved");
            let tapped = match o.vantage {
                Vantage::NearClient => {
                    nodes.iter().position(|n| n.name == node_name).map(NodeId).unwrap()
                }
                Vantage::NearServer => {
                    services.iter().find(|s| s.name == node_name).map(|s| s.node).unwrap()
                }
            };
            ObserverState { vantage: o.vantage, node_name, tapped, flows: BTreeMap::new() }
        });

        let mut sim = Simulation {
            now: 0,
            seq: 0,
            horizon: scenario.horizon_ms,
            queue: BinaryHeap::new(),
            nodes,
            links,
            hub,
            addr_to_node,
            services,
            clients,
            bots,
            switchers,
            directory,
            auth,
            auth_node,
            manager_node,
            manager,
            manager_rng: SimRng::stream(seed, "mgr"),
            pending: BTreeMap::new(),
            public_pools: BTreeMap::new(),
            flow_table: BTreeMap::new(),
            capture_subs,
            observer,
            metrics: RunMetrics::default(),
            defended: scenario.defended.expect("resolved"),
            pool_size: scenario.pool_size.expect("resolved"),
            lifetime_ms: scenario.session_lifetime_ms.expect("resolved"),
            response_size: scenario.response_size.expect("resolved"),
            emit_hist: scenario.emit_dst_histogram.expect("resolved"),
            event_log: None,
            next_tag: 0,
            ran: false,
            scenario,
        };

        for i in 0..sim.clients.len() {
            let decl = &sim.scenario.clients[sim.clients[i].decl];
            if sim.defended {
                sim.schedule(0, Ev::Handshake { client: i });
            } else if decl.rate_ppms > 0 {
                sim.schedule(decl.start_ms.unwrap_or(0), Ev::ClientTick { client: i });
            }
        }
        for b in 0..sim.bots.len() {
            let decl = &sim.scenario.attackers[sim.bots[b].decl];
            if decl.rate_ppms > 0 {
                sim.schedule(decl.start_ms.unwrap_or(0), Ev::BotTick { bot: b });
            }
        }
        Ok(sim)
    }

    pub fn enable_event_log(&mut self) {
        self.event_log = Some(String::new());
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn event_log(&self) -> Option<&str> {
        self.event_log.as_deref()
    }

    pub fn observer_report(&self) -> Option<ObserverReport> {
        self.observer.as_ref().map(|o| ObserverReport {
            vantage: o.vantage,
            node: o.node_name.clone(),
            flows: o
                .flows
                .iter()
                .map(|(&(src, dst), &n)| (ObserverReport::key(src, dst), n))
                .collect(),
        })
    }

    fn schedule(&mut self, time: u64, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued { time, seq, ev }));
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if let Some(log) = &mut self.event_log {
            let t = self.now;
            log.push_str(&format!("t={t} {}\n", line()));
        }
    }

    fn fresh_tag(&mut self) -> u64 {
        self.next_tag += 1;
        self.next_tag
    }

    /// Runs every event strictly before the horizon, then accounts whatever
    /// is still on the wire.
    pub fn run_to_horizon(&mut self) -> &RunMetrics {
        assert!(!self.ran, "a simulation runs once");
        self.ran = true;
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.time >= self.horizon {
                break;
            }
            let Reverse(Queued { time, ev, .. }) = self.queue.pop().unwrap();
            self.now = time;
            self.handle(ev);
        }
        self.now = self.horizon;
        let leftovers: Vec<Queued> = self.queue.drain().map(|Reverse(q)| q).collect();
        for q in leftovers {
            if let Ev::Deliver { packet, .. } = q.ev {
                if packet.response {
                    self.metrics.responses_in_flight += 1;
                } else if !packet.counted {
                    self.metrics.count_in_flight(packet.class);
                }
            }
        }
        let violations = self.metrics.conservation_violations();
        assert!(violations.is_empty(), "packet conservation broken: {violations:?}");
        &self.metrics
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Handshake { client } => self.handle_handshake(client),
            Ev::ClientTick { client } => self.handle_client_tick(client),
            Ev::BotTick { bot } => self.handle_bot_tick(bot),
            Ev::Deliver { to, packet } => self.handle_deliver(to, packet),
            Ev::Ctrl { to, from, text } => self.handle_ctrl(to, from, text),
            Ev::Expire { uid } => self.handle_expire(uid),
        }
    }

    // Control messages ride a private channel: path latency, no capacity.
    fn ctrl_send(&mut self, from: NodeId, to: NodeId, msg: &ControlMsg) {
        let latency = self.path_latency(from, to);
        let text = wire::encode(msg);
        let from_name = self.nodes[from.0].name.clone();
        let to_name = self.nodes[to.0].name.clone();
        self.log(|| format!("ev=ctrl_send node={from_name} to={to_name} text={text}"));
        let time = self.now + latency;
        self.schedule(time, Ev::Ctrl { to, from, text });
    }

    fn path_latency(&self, a: NodeId, b: NodeId) -> u64 {
        let leg = |n: NodeId| self.nodes[n.0].link.map_or(0, |l| self.links[l].latency_ms);
        leg(a) + leg(b)
    }

    fn handle_handshake(&mut self, client: usize) {
        let c = &self.clients[client];
        let decl = &self.scenario.clients[c.decl];
        let service = decl.service.clone();
        let client_ip = c.ip;
        let client_node = c.node;
        let Ok(_auth_ip) = self.directory.resolve(&service) else {
            self.metrics.sessions_rejected += 1;
            self.log(|| format!("ev=resolve_failed service={service}"));
            return;
        };
        let user = decl.user.clone().unwrap_or_default();
        let secret = self
            .scenario
            .credentials
            .iter()
            .find(|cr| cr.user == user)
            .map(|cr| cr.secret.clone())
            .unwrap_or_default();
        let name = self.nodes[client_node.0].name.clone();
        self.log(|| format!("ev=handshake node={name} service={service}"));
        let msg = ControlMsg::AuthRequest {
            client_ip,
            service,
            credentials: format!("{user}:{secret}").into_bytes(),
        };
        self.ctrl_send(client_node, self.auth_node, &msg);
    }

    fn handle_ctrl(&mut self, to: NodeId, from: NodeId, text: String) {
        let msg = match wire::decode(&text) {
            Ok(msg) => msg,
            Err(e) => {
                self.log(|| format!("ev=ctrl_garbled err={e}"));
                return;
            }
        };
        let to_name = self.nodes[to.0].name.clone();
        self.log(|| format!("ev=ctrl node={to_name} text={text}"));
        match (self.nodes[to.0].kind, msg) {
            (NodeKind::Auth, ControlMsg::AuthRequest { client_ip, service, credentials }) => {
                let decision = self.auth.authorize(&AuthRequest {
                    client_ip,
                    service: service.clone(),
                    credentials,
                });
                let reply = match decision {
                    AuthDecision::Accept { manager_ip } => {
                        ControlMsg::AuthAccept { manager_ip }
                    }
                    AuthDecision::Reject(reason) => ControlMsg::AuthReject { reason },
                };
                self.ctrl_send(to, from, &reply);
            }
            (NodeKind::Client { index }, ControlMsg::AuthAccept { .. }) => {
                let decl_service = self.scenario.clients[self.clients[index].decl].service.clone();
                let client_ip = self.clients[index].ip;
                let msg = ControlMsg::SessionRequest { client_ip, service: decl_service };
                self.ctrl_send(to, self.manager_node, &msg);
            }
            (NodeKind::Client { .. }, ControlMsg::AuthReject { reason }) => {
                self.metrics.sessions_rejected += 1;
                self.log(|| format!("ev=auth_rejected node={to_name} reason={}", reason.as_str()));
            }
            (NodeKind::Manager, ControlMsg::SessionRequest { client_ip, service }) => {
                self.handle_session_request(from, client_ip, &service);
            }
            (NodeKind::Switcher { index }, ControlMsg::Provision(p)) => {
                let uid = p.uid;
                let session = ProvisionedSession::new(p.uid, p.pool, p.real_ip, p.client_ip)
                    .expect("manager provisions valid sessions");
                let unit = &mut self.switchers[index];
                unit.state.provision(session).expect("manager targets owning switchers");
                let count = unit.state.session_count();
                self.log(|| format!("ev=provisioned node={to_name} uid={uid} sessions={count}"));
                self.ctrl_send(to, from, &ControlMsg::ProvisionAck { uid, switcher: SwitcherId(index as u32) });
            }
            (NodeKind::Manager, ControlMsg::ProvisionAck { uid, switcher }) => {
                let Some(pending) = self.pending.get_mut(&uid) else { return };
                pending.waiting.remove(&switcher);
                if pending.waiting.is_empty() {
                    let pending = self.pending.remove(&uid).unwrap();
                    self.ctrl_send(to, pending.client_node, &ControlMsg::Grant(pending.grant));
                }
            }
            (NodeKind::Client { index }, ControlMsg::Grant(grant)) => {
                self.install_grant(index, grant);
            }
            (NodeKind::Client { .. }, ControlMsg::SessionReject { reason }) => {
                self.metrics.sessions_rejected += 1;
                self.log(|| format!("ev=session_rejected node={to_name} reason={reason}"));
            }
            (NodeKind::Switcher { index }, ControlMsg::Remove { uid, .. }) => {
                let unit = &mut self.switchers[index];
                let removed = unit.state.remove(&uid);
                self.log(|| format!("ev=removed node={to_name} uid={uid} known={removed}"));
                self.ctrl_send(to, from, &ControlMsg::RemoveAck { uid, switcher: SwitcherId(index as u32) });
            }
            (NodeKind::Manager, ControlMsg::RemoveAck { .. }) => {}
            (kind, msg) => {
                self.log(|| format!("ev=ctrl_ignored node={to_name} kind={kind:?} type={}", msg.type_name()));
            }
        }
    }

    fn handle_session_request(&mut self, client_node: NodeId, client_ip: IpAddr, service: &str) {
        let rng = &mut self.manager_rng;
        let mut entropy = || rng.next_u64();
        match self.manager.establish_session(
            client_ip,
            service,
            self.pool_size,
            self.now,
            self.lifetime_ms,
            &mut entropy,
        ) {
            Ok(est) => {
                let uid = est.grant.uid;
                let expiry = est.grant.expiry_ms;
                self.pending.insert(
                    uid,
                    PendingGrant {
                        grant: est.grant,
                        client_node,
                        waiting: est.provisions.iter().map(|p| p.switcher).collect(),
                    },
                );
                self.schedule(expiry, Ev::Expire { uid });
                for p in est.provisions {
                    let switcher_node = self.switchers[p.switcher.0 as usize].node;
                    self.ctrl_send(self.manager_node, switcher_node, &ControlMsg::Provision(p));
                }
            }
            Err(e) => {
                let reply = ControlMsg::SessionReject { reason: slug(&e.to_string()) };
                self.ctrl_send(self.manager_node, client_node, &reply);
            }
        }
    }

    fn install_grant(&mut self, index: usize, grant: SessionGrant) {
        let c = &mut self.clients[index];
        let session = ClientSession::new(grant.uid, grant.pool, grant.initial_ip, c.ip)
            .expect("manager grants valid sessions");
        let pool_addrs: Vec<IpAddr> = session.pool().addresses().collect();
        let label = c.label.clone();
        let node_name = self.nodes[c.node.0].name.clone();
        let uid = grant.uid;
        c.session = Some(session);
        self.public_pools.insert(c.ip, pool_addrs);
        self.metrics.sessions_established += 1;
        if self.emit_hist {
            let len = self.clients[index].session.as_ref().unwrap().pool().len();
            self.metrics.dst_histogram.entry(label.clone()).or_insert_with(|| vec![0; len]);
        }
        self.metrics.hop_transitions.entry(label).or_default();
        self.log(|| format!("ev=grant_installed node={node_name} uid={uid}"));

        let decl = &self.scenario.clients[self.clients[index].decl];
        let (rate, start_ms, duration) = (decl.rate_ppms, decl.start_ms.unwrap_or(0), decl.duration_ms);
        if rate > 0 {
            let start = start_ms.max(self.now);
            if start < start_ms + duration {
                self.schedule(start, Ev::ClientTick { client: index });
            }
        }
    }

    fn handle_expire(&mut self, uid: SessionUid) {
        let owners = self.manager.expire_session(&uid);
        if owners.is_empty() {
            return;
        }
        self.metrics.sessions_expired += 1;
        self.log(|| format!("ev=expire uid={uid}"));
        for owner in owners {
            let node = self.switchers[owner.0 as usize].node;
            self.ctrl_send(self.manager_node, node, &ControlMsg::Remove { uid, switcher: owner });
        }
    }

    fn handle_client_tick(&mut self, client: usize) {
        let c = &self.clients[client];
        let decl = &self.scenario.clients[c.decl];
        let rate = decl.rate_ppms;
        let size = decl.request_size.expect("resolved");
        let end = decl.start_ms.unwrap_or(0) + decl.duration_ms;
        let (node, ip, label) = (c.node, c.ip, c.label.clone());
        let tsval = c.tsval_offset.wrapping_add(self.now as u32);

        if self.defended {
            let Some(session) = self.clients[client].session.clone() else { return };
            // One (tsval, address) sample per tick for the hop cadence stats.
            let pool_len = session.pool().len() as u64;
            let idx = (hop_value(session.uid(), tsval) % pool_len) as usize;
            let hop_dst = session.pool().addr_at(idx);
            if let Some((prev_ts, prev_dst)) = self.clients[client].last_sample {
                if prev_ts != tsval {
                    let t = self.metrics.hop_transitions.entry(label.clone()).or_default();
                    t.transitions += 1;
                    if prev_dst != hop_dst {
                        t.address_changes += 1;
                    }
                }
            }
            self.clients[client].last_sample = Some((tsval, hop_dst));

            for _ in 0..rate {
                let raw = Packet {
                    src: ip,
                    dst: session.initial_ip(),
                    tsval: Some(tsval),
                    size_bytes: size,
                    payload_tag: self.fresh_tag(),
                };
                let hopped = client_rewrite_outbound(&session, raw)
                    .expect("tick packets carry a timestamp");
                if self.emit_hist {
                    if let Some(hist) = self.metrics.dst_histogram.get_mut(&label) {
                        hist[idx] += 1;
                    }
                }
                self.metrics.count_injected(Class::Legit);
                self.send_data(node, SimPacket {
                    pkt: hopped,
                    class: Class::Legit,
                    response: false,
                    counted: false,
                    via: None,
                });
            }
        } else {
            let real = self.services.iter().find(|s| s.name == decl.service).map(|s| s.real_ip);
            let Some(real) = real else { return };
            for _ in 0..rate {
                let pkt = Packet {
                    src: ip,
                    dst: real,
                    tsval: Some(tsval),
                    size_bytes: size,
                    payload_tag: self.fresh_tag(),
                };
                self.metrics.count_injected(Class::Legit);
                self.send_data(node, SimPacket {
                    pkt,
                    class: Class::Legit,
                    response: false,
                    counted: false,
                    via: None,
                });
            }
        }

        self.clients[client].ticks_done += 1;
        if self.now + 1 < end {
            self.schedule(self.now + 1, Ev::ClientTick { client });
        }
    }

    fn handle_bot_tick(&mut self, bot: usize) {
        let decl = self.scenario.attackers[self.bots[bot].decl].clone();
        let rate = decl.rate_ppms;
        let size = decl.size_bytes.expect("resolved");
        let end = decl.start_ms.unwrap_or(0) + decl.duration_ms;
        let node = self.bots[bot].node;
        let bot_ip = self.bots[bot].ip;

        let emit = |sim: &mut Simulation, pkt: Packet| {
            sim.metrics.count_injected(Class::Attack);
            sim.send_data(node, SimPacket {
                pkt,
                class: Class::Attack,
                response: false,
                counted: false,
                via: None,
            });
        };

        if !self.defended {
            let real =
                self.services.iter().find(|s| s.name == decl.target_service).map(|s| s.real_ip);
            if let Some(real) = real {
                let tsval = self.now as u32;
                for _ in 0..rate {
                    let pkt = Packet {
                        src: bot_ip,
                        dst: real,
                        tsval: Some(tsval),
                        size_bytes: size,
                        payload_tag: self.fresh_tag(),
                    };
                    emit(self, pkt);
                }
            }
        } else {
            match decl.kind {
                AttackKind::RandomPoolFlood | AttackKind::FullPoolFlood => {
                    let target = self.bots[bot].target_ip;
                    let pool = target.and_then(|t| self.public_pools.get(&t).cloned());
                    if let (Some(target), Some(pool)) = (target, pool) {
                        for _ in 0..rate {
                            let b = &mut self.bots[bot];
                            let dst = match decl.kind {
                                AttackKind::RandomPoolFlood => {
                                    pool[b.rng.below(pool.len() as u64) as usize]
                                }
                                _ => {
                                    let dst = pool[(b.sweep % pool.len() as u64) as usize];
                                    b.sweep += 1;
                                    dst
                                }
                            };
                            let tsval = b.rng.next_u32();
                            let tag = self.fresh_tag();
                            let pkt = Packet {
                                src: target,
                                dst,
                                tsval: Some(tsval),
                                size_bytes: size,
                                payload_tag: tag,
                            };
                            emit(self, pkt);
                        }
                    }
                }
                AttackKind::ExactReplay | AttackKind::TimestampShiftReplay => {
                    if let Some(captured) = self.bots[bot].captured {
                        for _ in 0..rate {
                            let mut pkt = captured;
                            if decl.kind == AttackKind::TimestampShiftReplay {
                                let b = &mut self.bots[bot];
                                b.shift = b.shift.wrapping_add(1);
                                pkt.tsval = Some(
                                    captured.tsval.expect("captured data packet").wrapping_add(b.shift),
                                );
                            }
                            emit(self, pkt);
                        }
                    }
                }
                AttackKind::SpoofedSourceFlood => {
                    // Any session's pool will do for address targets; take the
                    // union of everything publicly observable.
                    let pools: Vec<IpAddr> =
                        self.public_pools.values().flatten().copied().collect();
                    if !pools.is_empty() {
                        for _ in 0..rate {
                            let b = &mut self.bots[bot];
                            let dst = pools[b.rng.below(pools.len() as u64) as usize];
                            let src = spoofed_source(bot_ip, &mut b.rng);
                            let tsval = b.rng.next_u32();
                            let tag = self.fresh_tag();
                            let pkt = Packet {
                                src,
                                dst,
                                tsval: Some(tsval),
                                size_bytes: size,
                                payload_tag: tag,
                            };
                            emit(self, pkt);
                        }
                    }
                }
            }
        }

        if self.now + 1 < end {
            self.schedule(self.now + 1, Ev::BotTick { bot });
        }
    }

    /// Puts a data packet on `from`'s access link toward the hub.
    fn send_data(&mut self, from: NodeId, packet: SimPacket) {
        self.enter_link(from, 0, packet, self.hub);
    }

    /// One link traversal in direction `dir` (0 toward hub). Applies ingress
    /// filtering at bot uplinks, then capacity, then the passive taps, then
    /// schedules delivery.
    fn enter_link(&mut self, owner: NodeId, dir: usize, packet: SimPacket, deliver_to: NodeId) {
        let node = &self.nodes[owner.0];
        let link_idx = node.link.expect("only the hub lacks a link");

        if dir == 0 && !packet.response {
            if let NodeKind::Bot { index } = node.kind {
                let decl = &self.scenario.attackers[self.bots[index].decl];
                if packet.pkt.src != self.bots[index].ip && decl.spoofing_allowed != Some(true) {
                    self.metrics.count_dropped(packet.class, "ingress_filtered");
                    let name = node.name.clone();
                    self.log(|| format!("ev=drop node={name} reason=ingress_filtered src={}", packet.pkt.src));
                    return;
                }
            }
        }

        let now = self.now;
        let link = &mut self.links[link_idx];
        let (tick, used) = &mut link.used[dir];
        if *tick != now {
            *tick = now;
            *used = 0;
        }
        if *used >= link.capacity_ppms {
            self.metrics.congestion_drops += 1;
            if packet.response {
                self.metrics.count_response_dropped("congestion");
            } else if packet.counted {
                self.metrics.post_forward_drops += 1;
            } else {
                self.metrics.count_dropped(packet.class, "congestion");
            }
            let name = self.nodes[owner.0].name.clone();
            self.log(|| format!("ev=drop node={name} reason=congestion dir={dir} tag={}", packet.pkt.payload_tag));
            return;
        }
        *used += 1;
        let latency = link.latency_ms;

        if let Some(obs) = &mut self.observer {
            if obs.tapped == owner {
                *obs.flows.entry((packet.pkt.src, packet.pkt.dst)).or_insert(0) += 1;
            }
        }
        if dir == 0 && !packet.response && packet.class == Class::Legit {
            if let Some(subs) = self.capture_subs.get(&owner).cloned() {
                for b in subs {
                    if self.bots[b].captured.is_none() {
                        self.bots[b].captured = Some(packet.pkt);
                        let name = self.nodes[self.bots[b].node.0].name.clone();
                        self.log(|| format!("ev=captured node={name} tag={}", packet.pkt.payload_tag));
                    }
                }
            }
        }

        self.schedule(self.now + latency, Ev::Deliver { to: deliver_to, packet });
    }

    fn handle_deliver(&mut self, to: NodeId, packet: SimPacket) {
        match self.nodes[to.0].kind {
            NodeKind::Hub => self.route_from_hub(packet),
            NodeKind::Switcher { index } => self.deliver_at_switcher(index, packet),
            NodeKind::Server { service } => self.deliver_at_server(service, packet),
            NodeKind::Client { index } => self.deliver_at_client(index, packet),
            NodeKind::Bot { .. } => {
                if packet.response {
                    self.metrics.responses_backscatter += 1;
                } else {
                    self.drop_misrouted(packet);
                }
            }
            NodeKind::Auth | NodeKind::Manager => self.drop_misrouted(packet),
        }
    }

    fn route_from_hub(&mut self, packet: SimPacket) {
        let target = match packet.via {
            Some(via) => Some(via),
            None => self.addr_to_node.get(&packet.pkt.dst).copied(),
        };
        match target {
            Some(node) => self.enter_link(node, 1, packet, node),
            None => {
                self.log(|| format!("ev=drop node=net reason=unroutable dst={}", packet.pkt.dst));
                self.drop_unroutable(packet);
            }
        }
    }

    fn drop_unroutable(&mut self, packet: SimPacket) {
        if packet.response {
            self.metrics.count_response_dropped("unroutable");
        } else if packet.counted {
            self.metrics.post_forward_drops += 1;
        } else {
            self.metrics.count_dropped(packet.class, "unroutable");
        }
    }

    fn drop_misrouted(&mut self, packet: SimPacket) {
        if packet.response {
            self.metrics.count_response_dropped("unroutable");
        } else if packet.counted {
            self.metrics.post_forward_drops += 1;
        } else {
            self.metrics.count_dropped(packet.class, "unroutable");
        }
    }

    fn deliver_at_switcher(&mut self, index: usize, mut packet: SimPacket) {
        let node = self.switchers[index].node;
        let name = self.nodes[node.0].name.clone();
        if packet.response {
            if packet.via == Some(node) {
                // Response passing back through the switcher that forwarded
                // the request: masquerade the server behind the session's
                // per-timestamp address.
                let session = self.switchers[index]
                    .state
                    .response_session(packet.pkt.src, packet.pkt.dst)
                    .cloned();
                match session {
                    Some(session) => match switcher_rewrite_response(&session, packet.pkt) {
                        Ok(rewritten) => {
                            let tag = rewritten.payload_tag;
                            let src = rewritten.src;
                            self.log(|| format!("ev=masquerade node={name} src={src} tag={tag}"));
                            packet.pkt = rewritten;
                            packet.via = None;
                            self.enter_link(node, 0, packet, self.hub);
                        }
                        Err(_) => self.metrics.count_response_dropped("missing_timestamp"),
                    },
                    None => {
                        self.log(|| format!("ev=drop node={name} reason=no_session response=true"));
                        self.metrics.count_response_dropped("no_session");
                    }
                }
            } else {
                self.metrics.count_response_dropped("unroutable");
            }
            return;
        }

        *self.metrics.per_switcher_ingress.entry(name.clone()).or_insert(0) += 1;
        let verification = self.switchers[index].state.verify(&packet.pkt);
        self.metrics.session_collisions += verification.matched_sessions.saturating_sub(1) as u64;
        match verification.outcome {
            VerifyOutcome::Forward(real_ip) => {
                self.metrics.count_forwarded(packet.class);
                self.flow_table.insert((packet.pkt.src, real_ip), node);
                let tag = packet.pkt.payload_tag;
                self.log(|| format!("ev=verify node={name} outcome=forward real={real_ip} matches={} tag={tag}", verification.matched_sessions));
                packet.pkt.dst = real_ip;
                packet.counted = true;
                self.enter_link(node, 0, packet, self.hub);
            }
            VerifyOutcome::Drop(reason) => {
                self.metrics.count_dropped(packet.class, reason.as_str());
                let tag = packet.pkt.payload_tag;
                self.log(|| {
                    format!("ev=verify node={name} outcome=drop reason={reason} tag={tag}")
                });
            }
        }
    }

    fn deliver_at_server(&mut self, service: usize, packet: SimPacket) {
        if packet.response {
            self.metrics.responses_backscatter += 1;
            return;
        }
        let svc_name = self.services[service].name.clone();
        let svc_node = self.services[service].node;
        let real_ip = self.services[service].real_ip;
        self.metrics.server_ingress += 1;
        *self.metrics.server_ingress_by_service.entry(svc_name.clone()).or_insert(0) += 1;
        if packet.class == Class::Attack {
            self.metrics.server_ingress_attack += 1;
        }
        if !packet.counted {
            // Undefended runs have no filter; reaching the server is the
            // acceptance event.
            self.metrics.count_forwarded(packet.class);
        }
        self.log(|| {
            format!(
                "ev=server_ingress node=srv-{svc_name} src={} tag={}",
                packet.pkt.src, packet.pkt.payload_tag
            )
        });

        self.metrics.responses_injected += 1;
        let response = Packet {
            src: real_ip,
            dst: packet.pkt.src,
            tsval: packet.pkt.tsval,
            size_bytes: self.response_size,
            payload_tag: self.fresh_tag(),
        };
        let via = self.flow_table.get(&(packet.pkt.src, real_ip)).copied();
        self.send_data(svc_node, SimPacket {
            pkt: response,
            class: packet.class,
            response: true,
            counted: false,
            via,
        });
    }

    fn deliver_at_client(&mut self, index: usize, packet: SimPacket) {
        if !packet.response {
            self.drop_misrouted(packet);
            return;
        }
        let c = &self.clients[index];
        let name = self.nodes[c.node.0].name.clone();
        if !self.defended {
            self.metrics.responses_delivered += 1;
            if packet.class == Class::Legit {
                self.metrics.legit_goodput_bytes += packet.pkt.size_bytes as u64;
            }
            return;
        }
        match &c.session {
            Some(session) => match client_rewrite_inbound(session, packet.pkt) {
                Ok(folded) => {
                    debug_assert_eq!(folded.src, session.initial_ip());
                    self.metrics.responses_delivered += 1;
                    if packet.class == Class::Legit {
                        self.metrics.legit_goodput_bytes += packet.pkt.size_bytes as u64;
                    }
                }
                Err(_) => {
                    self.log(|| format!("ev=drop node={name} reason=source_mismatch tag={}", packet.pkt.payload_tag));
                    self.metrics.count_response_dropped("source_mismatch");
                }
            },
            None => self.metrics.count_response_dropped("no_session"),
        }
    }
}

fn slug(text: &str) -> String {
    let mut out: String = text
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    out.truncate(48);
    out
}

/// Forged source for spoofed floods, drawn from the benchmarking ranges so it
/// never collides with a simulated host.
fn spoofed_source(like: IpAddr, rng: &mut SimRng) -> IpAddr {
    match like {
        IpAddr::V4(_) => {
            let base = u32::from(std::net::Ipv4Addr::new(198, 18, 0, 0));
            IpAddr::V4((base + rng.below(1u64 << 17) as u32).into())
        }
        IpAddr::V6(_) => {
            let base = u128::from("2001:2::".parse::<std::net::Ipv6Addr>().unwrap());
            IpAddr::V6((base + rng.below(1u64 << 32) as u128).into())
        }
    }
}
