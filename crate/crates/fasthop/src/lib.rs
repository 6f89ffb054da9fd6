//! IP fast hopping: a moving-target DDoS defense that remaps a server's
//! visible IP address on every packet.
//!
//! A protected session never talks to the server's real address. The client
//! addresses each outgoing packet to one entry of a public pool of virtual
//! addresses, chosen by a keyed pseudorandom function over the packet's TCP
//! timestamps value and a 128-bit session secret. Edge switchers that own the
//! pool addresses recompute the same function: packets whose destination
//! matches are forwarded to the real server address, everything else is
//! dropped. Hosts that do not hold the session secret cannot predict which
//! address is valid at which timestamp, so flood traffic is filtered at the
//! network edge and split across the switchers that own the pool.
//!
//! The crate has four parts:
//!
//! - [`hopper`]: the hop function and the client/switcher packet rewrites.
//! - [`control`]: authorization, session grants, and switcher provisioning.
//! - [`netsim`]: a deterministic discrete-event simulator that hosts clients,
//!   bots, switchers, and the control plane, and measures filtering, load
//!   splitting, and observer-visible behavior.
//! - [`scenario`] / [`report`]: declarative simulation inputs and
//!   reproducible metrics reports for the `fasthop` command-line front end.

pub mod control;
pub mod hopper;
pub mod netsim;
pub mod report;
pub mod scenario;
pub mod stats;

pub use hopper::{
    client_rewrite_inbound, client_rewrite_outbound, hop_index, hop_value, pool_address,
    switcher_rewrite_response, virtual_address, ClientSession, ConfigError, DropReason, IpPool,
    Packet, PoolEntry, ProvisionedSession, RewriteError, SessionUid, SwitcherId, SwitcherState,
    VerifyOutcome,
};
