//! Python view of the library: the hop math, the two session perspectives,
//! a standalone switcher, and the scenario runner.
//!
//! Addresses cross the boundary as strings and uids as 32 hex digits, so the
//! Python side needs no wrapper types of its own. Reports come back as TOML
//! text plus a flattened key/value dict for consumers without a TOML parser.

use std::net::IpAddr;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fasthop::scenario::Scenario;
use fasthop::{
    pool_address, ClientSession, IpPool, Packet, PoolEntry, SessionUid, SwitcherId, SwitcherState,
    VerifyOutcome,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_uid(hex: &str) -> PyResult<SessionUid> {
    SessionUid::from_hex(hex).map_err(value_err)
}

fn parse_ip(text: &str) -> PyResult<IpAddr> {
    text.parse().map_err(|_| PyValueError::new_err(format!("not an ip address: {text:?}")))
}

/// Owners default to a single switcher, which is all a standalone pool needs.
fn parse_pool(addresses: Vec<String>, owners: Option<Vec<u32>>, fallback: u32) -> PyResult<IpPool> {
    let owners = match owners {
        Some(o) if o.len() != addresses.len() => {
            return Err(PyValueError::new_err("owners must match addresses in length"));
        }
        Some(o) => o,
        None => vec![fallback; addresses.len()],
    };
    let mut entries = Vec::with_capacity(addresses.len());
    for (addr, owner) in addresses.iter().zip(owners) {
        entries.push(PoolEntry { addr: parse_ip(addr)?, owner: SwitcherId(owner) });
    }
    IpPool::new(entries).map_err(value_err)
}

/// SipHash-2-4 of the timestamps value under the session uid.
#[pyfunction]
fn hop_value(uid_hex: &str, tsval: u32) -> PyResult<u64> {
    Ok(fasthop::hop_value(&parse_uid(uid_hex)?, tsval))
}

/// Position the packet must target in an ordered pool of `pool_size` addresses.
#[pyfunction]
fn hop_index(uid_hex: &str, tsval: u32, pool_size: u64) -> PyResult<u64> {
    fasthop::hop_index(&parse_uid(uid_hex)?, tsval, pool_size).map_err(value_err)
}

/// The client's share of a session: it can compute where to send each packet
/// but holds nothing that reveals the real server address.
#[pyclass(name = "Session")]
struct PySession {
    inner: ClientSession,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (uid_hex, pool, initial_ip, client_ip))]
    fn new(
        uid_hex: &str,
        pool: Vec<String>,
        initial_ip: &str,
        client_ip: &str,
    ) -> PyResult<Self> {
        let inner = ClientSession::new(
            parse_uid(uid_hex)?,
            parse_pool(pool, None, 0)?,
            parse_ip(initial_ip)?,
            parse_ip(client_ip)?,
        )
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn uid(&self) -> String {
        self.inner.uid().to_string()
    }

    #[getter]
    fn initial_ip(&self) -> String {
        self.inner.initial_ip().to_string()
    }

    #[getter]
    fn client_ip(&self) -> String {
        self.inner.client_ip().to_string()
    }

    #[getter]
    fn pool(&self) -> Vec<String> {
        self.inner.pool().addresses().map(|a| a.to_string()).collect()
    }

    /// Pool address valid for a packet carrying this timestamps value.
    fn address_at(&self, tsval: u32) -> String {
        pool_address(self.inner.uid(), self.inner.pool(), tsval).to_string()
    }

    fn index_at(&self, tsval: u32) -> u64 {
        fasthop::hop_value(self.inner.uid(), tsval) % self.inner.pool().len() as u64
    }

    fn __len__(&self) -> usize {
        self.inner.pool().len()
    }
}

/// An edge switcher holding provisioned sessions and vetting packets against
/// them. The mirror image of `Session`: it knows the real server address but
/// must recompute the hop to tell live traffic from replays.
#[pyclass(name = "Switcher")]
struct PySwitcher {
    inner: SwitcherState,
}

#[pymethods]
impl PySwitcher {
    #[new]
    #[pyo3(signature = (id = 0))]
    fn new(id: u32) -> Self {
        Self { inner: SwitcherState::new(SwitcherId(id)) }
    }

    #[pyo3(signature = (uid_hex, pool, real_ip, client_ip, owners = None))]
    fn provision(
        &mut self,
        uid_hex: &str,
        pool: Vec<String>,
        real_ip: &str,
        client_ip: &str,
        owners: Option<Vec<u32>>,
    ) -> PyResult<()> {
        let own = self.inner.id().0;
        let session = fasthop::ProvisionedSession::new(
            parse_uid(uid_hex)?,
            parse_pool(pool, owners, own)?,
            parse_ip(real_ip)?,
            parse_ip(client_ip)?,
        )
        .map_err(value_err)?;
        self.inner.provision(session).map_err(value_err)
    }

    fn remove(&mut self, uid_hex: &str) -> PyResult<bool> {
        Ok(self.inner.remove(&parse_uid(uid_hex)?))
    }

    /// Vets one packet. Returns ("forward", real_ip) or ("drop", reason).
    #[pyo3(signature = (src, dst, tsval))]
    fn verify(&self, src: &str, dst: &str, tsval: Option<u32>) -> PyResult<(String, String)> {
        let packet = Packet {
            src: parse_ip(src)?,
            dst: parse_ip(dst)?,
            tsval,
            size_bytes: 64,
            payload_tag: 0,
        };
        Ok(match self.inner.verify(&packet).outcome {
            VerifyOutcome::Forward(real) => ("forward".into(), real.to_string()),
            VerifyOutcome::Drop(reason) => ("drop".into(), reason.to_string()),
        })
    }

    #[getter]
    fn session_count(&self) -> usize {
        self.inner.session_count()
    }
}

/// Runs a scenario document to its horizon and returns the report as TOML.
#[pyfunction]
#[pyo3(signature = (scenario_toml, seed = None, overrides = None))]
fn run_scenario(
    scenario_toml: &str,
    seed: Option<u64>,
    overrides: Option<Vec<(String, String)>>,
) -> PyResult<String> {
    let scenario =
        Scenario::load(scenario_toml, &overrides.unwrap_or_default(), seed).map_err(value_err)?;
    let output = fasthop::netsim::run_scenario(&scenario, false).map_err(value_err)?;
    Ok(fasthop::report::Report::build(&output).to_toml())
}

/// Flattens a report into dotted-key/value strings, the same projection the
/// CLI writes as metrics.tsv. Saves Python callers a TOML parser.
#[pyfunction]
fn flat_metrics(report_toml: &str) -> PyResult<std::collections::BTreeMap<String, String>> {
    let report = fasthop::report::Report::from_toml(report_toml).map_err(value_err)?;
    Ok(report.flat_metrics().into_iter().collect())
}

/// Field-by-field delta of two reports over the same topology.
#[pyfunction]
fn compare_reports(a_toml: &str, b_toml: &str) -> PyResult<String> {
    let a = fasthop::report::Report::from_toml(a_toml).map_err(value_err)?;
    let b = fasthop::report::Report::from_toml(b_toml).map_err(value_err)?;
    fasthop::report::compare(&a, &b).map_err(value_err)
}

#[pymodule]
fn fasthop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hop_value, m)?)?;
    m.add_function(wrap_pyfunction!(hop_index, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(flat_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compare_reports, m)?)?;
    m.add_class::<PySession>()?;
    m.add_class::<PySwitcher>()?;
    Ok(())
}
