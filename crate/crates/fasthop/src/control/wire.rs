//! Length-prefixed text encoding of the control messages.
//!
//! One message per line of the form `<len>:fhc1 <type> key=value ...`, where
//! `len` is the byte count after the colon. Values never contain spaces:
//! addresses are printed in their usual notation, uids and credentials as
//! hex, pools as `addr@owner` entries joined by commas (order preserved, it
//! is authoritative). A decoder that does not understand the version tag or
//! the type must drop the message.

use std::collections::BTreeMap;
use std::net::IpAddr;

use thiserror::Error;

use crate::hopper::{IpPool, PoolEntry, SessionUid, SwitcherId};

use super::{ProvisionMessage, RejectReason, SessionGrant};

const VERSION_TAG: &str = "fhc1";

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ControlMsg {
    AuthRequest { client_ip: IpAddr, service: String, credentials: Vec<u8> },
    AuthAccept { manager_ip: IpAddr },
    AuthReject { reason: RejectReason },
    SessionRequest { client_ip: IpAddr, service: String },
    SessionReject { reason: String },
    Provision(ProvisionMessage),
    ProvisionAck { uid: SessionUid, switcher: SwitcherId },
    Grant(SessionGrant),
    Remove { uid: SessionUid, switcher: SwitcherId },
    RemoveAck { uid: SessionUid, switcher: SwitcherId },
}

impl ControlMsg {
    pub fn type_name(&self) -> &'static str {
        match self {
            ControlMsg::AuthRequest { .. } => "auth_request",
            ControlMsg::AuthAccept { .. } => "auth_accept",
            ControlMsg::AuthReject { .. } => "auth_reject",
            ControlMsg::SessionRequest { .. } => "session_request",
            ControlMsg::SessionReject { .. } => "session_reject",
            ControlMsg::Provision(_) => "provision",
            ControlMsg::ProvisionAck { .. } => "provision_ack",
            ControlMsg::Grant(_) => "grant",
            ControlMsg::Remove { .. } => "remove",
            ControlMsg::RemoveAck { .. } => "remove_ack",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum WireError {
    #[error("missing length prefix")]
    MissingPrefix,
    #[error("declared length {declared} but body has {actual} bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("missing version tag {VERSION_TAG:?}")]
    BadVersion,
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {field:?} has unparseable value {value:?}")]
    BadValue { field: &'static str, value: String },
}

fn encode_pool(pool: &IpPool) -> String {
    pool.entries()
        .iter()
        .map(|e| format!("{}@{}", e.addr, e.owner.0))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn encode(msg: &ControlMsg) -> String {
    let body = match msg {
        ControlMsg::AuthRequest { client_ip, service, credentials } => format!(
            "{VERSION_TAG} auth_request client={client_ip} service={service} credentials={}",
            hex::encode(credentials)
        ),
        ControlMsg::AuthAccept { manager_ip } => {
            format!("{VERSION_TAG} auth_accept manager={manager_ip}")
        }
        ControlMsg::AuthReject { reason } => {
            format!("{VERSION_TAG} auth_reject reason={}", reason.as_str())
        }
        ControlMsg::SessionRequest { client_ip, service } => {
            format!("{VERSION_TAG} session_request client={client_ip} service={service}")
        }
        ControlMsg::SessionReject { reason } => {
            format!("{VERSION_TAG} session_reject reason={reason}")
        }
        ControlMsg::Provision(p) => format!(
            "{VERSION_TAG} provision switcher={} uid={} pool={} real={} client={} expiry={}",
            p.switcher.0,
            p.uid,
            encode_pool(&p.pool),
            p.real_ip,
            p.client_ip,
            p.expiry_ms
        ),
        ControlMsg::ProvisionAck { uid, switcher } => {
            format!("{VERSION_TAG} provision_ack uid={uid} switcher={}", switcher.0)
        }
        ControlMsg::Grant(g) => format!(
            "{VERSION_TAG} grant uid={} pool={} initial={} expiry={}",
            g.uid,
            encode_pool(&g.pool),
            g.initial_ip,
            g.expiry_ms
        ),
        ControlMsg::Remove { uid, switcher } => {
            format!("{VERSION_TAG} remove uid={uid} switcher={}", switcher.0)
        }
        ControlMsg::RemoveAck { uid, switcher } => {
            format!("{VERSION_TAG} remove_ack uid={uid} switcher={}", switcher.0)
        }
    };
    format!("{}:{}", body.len(), body)
}

struct Fields<'a> {
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn get(&self, key: &'static str) -> Result<&'a str, WireError> {
        self.map.get(key).copied().ok_or(WireError::MissingField(key))
    }

    fn ip(&self, key: &'static str) -> Result<IpAddr, WireError> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| WireError::BadValue { field: key, value: raw.to_string() })
    }

    fn u64(&self, key: &'static str) -> Result<u64, WireError> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| WireError::BadValue { field: key, value: raw.to_string() })
    }

    fn uid(&self, key: &'static str) -> Result<SessionUid, WireError> {
        let raw = self.get(key)?;
        SessionUid::from_hex(raw)
            .map_err(|_| WireError::BadValue { field: key, value: raw.to_string() })
    }

    fn switcher(&self, key: &'static str) -> Result<SwitcherId, WireError> {
        Ok(SwitcherId(self.u64(key)? as u32))
    }

    fn pool(&self, key: &'static str) -> Result<IpPool, WireError> {
        let raw = self.get(key)?;
        let bad = || WireError::BadValue { field: key, value: raw.to_string() };
        let mut entries = Vec::new();
        for part in raw.split(',') {
            let (addr, owner) = part.split_once('@').ok_or_else(bad)?;
            entries.push(PoolEntry {
                addr: addr.parse().map_err(|_| bad())?,
                owner: SwitcherId(owner.parse().map_err(|_| bad())?),
            });
        }
        IpPool::new(entries).map_err(|_| bad())
    }
}

pub fn decode(text: &str) -> Result<ControlMsg, WireError> {
    let (len, body) = text.split_once(':').ok_or(WireError::MissingPrefix)?;
    let declared: usize = len.parse().map_err(|_| WireError::MissingPrefix)?;
    if declared != body.len() {
        return Err(WireError::LengthMismatch { declared, actual: body.len() });
    }
    let mut tokens = body.split(' ');
    if tokens.next() != Some(VERSION_TAG) {
        return Err(WireError::BadVersion);
    }
    let msg_type = tokens.next().ok_or(WireError::UnknownType(String::new()))?;
    let mut map = BTreeMap::new();
    for token in tokens {
        if let Some((k, v)) = token.split_once('=') {
            map.insert(k, v);
        }
    }
    let f = Fields { map };
    match msg_type {
        "auth_request" => Ok(ControlMsg::AuthRequest {
            client_ip: f.ip("client")?,
            service: f.get("service")?.to_string(),
            credentials: {
                let raw = f.get("credentials")?;
                hex::decode(raw).map_err(|_| WireError::BadValue {
                    field: "credentials",
                    value: raw.to_string(),
                })?
            },
        }),
        "auth_accept" => Ok(ControlMsg::AuthAccept { manager_ip: f.ip("manager")? }),
        "auth_reject" => {
            let raw = f.get("reason")?;
            let reason = RejectReason::from_slug(raw)
                .ok_or(WireError::BadValue { field: "reason", value: raw.to_string() })?;
            Ok(ControlMsg::AuthReject { reason })
        }
        "session_request" => Ok(ControlMsg::SessionRequest {
            client_ip: f.ip("client")?,
            service: f.get("service")?.to_string(),
        }),
        "session_reject" => {
            Ok(ControlMsg::SessionReject { reason: f.get("reason")?.to_string() })
        }
        "provision" => Ok(ControlMsg::Provision(ProvisionMessage {
            switcher: f.switcher("switcher")?,
            uid: f.uid("uid")?,
            pool: f.pool("pool")?,
            real_ip: f.ip("real")?,
            client_ip: f.ip("client")?,
            expiry_ms: f.u64("expiry")?,
        })),
        "provision_ack" => Ok(ControlMsg::ProvisionAck {
            uid: f.uid("uid")?,
            switcher: f.switcher("switcher")?,
        }),
        "grant" => Ok(ControlMsg::Grant(SessionGrant {
            uid: f.uid("uid")?,
            pool: f.pool("pool")?,
            initial_ip: f.ip("initial")?,
            expiry_ms: f.u64("expiry")?,
        })),
        "remove" => {
            Ok(ControlMsg::Remove { uid: f.uid("uid")?, switcher: f.switcher("switcher")? })
        }
        "remove_ack" => {
            Ok(ControlMsg::RemoveAck { uid: f.uid("uid")?, switcher: f.switcher("switcher")? })
        }
        other => Err(WireError::UnknownType(other.to_string())),
    }
}
