//! Run reports: the resolved scenario, raw counters, derived rates, and a
//! flat key/value projection that diffs cleanly across runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{ObserverReport, RunMetrics, RunOutput};
use crate::scenario::Checks;
use crate::stats;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub schema_version: u32,
    /// Hash of the full resolved scenario, seed included: equal fingerprints
    /// mean replaying either run reproduces the other byte for byte.
    pub fingerprint: String,
    /// Hash of the world's shape only (hosts, addresses, links). Runs are
    /// comparable when these match even if rates or seeds differ.
    pub topology_fingerprint: String,
    #[serde(with = "crate::scenario::seed_as_string")]
    pub seed: u64,
    pub horizon_ms: u64,
}

/// Quantities computed from the raw counters after the run.
///
/// Scalar fields precede the per-entity maps so the TOML projection stays
/// valid. Minima over empty map are NaN, which fails any threshold check;
/// a scenario that asserts on them must actually exercise them.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Derived {
    /// forwarded_attack / injected_attack; 0 when nothing was injected.
    pub attack_pass_rate: f64,
    pub legit_pass_rate: f64,
    /// max/min/mean spread of data ingress across switchers: 0 is a perfect
    /// split, 1 means the heaviest switcher saw one mean's worth more than
    /// the lightest.
    pub ingress_imbalance: f64,
    /// Share of injected attack packets that reached a real server address.
    pub server_ingress_attack_fraction: f64,
    pub min_hop_change_freq: f64,
    pub min_uniformity_p: f64,
    pub goodput_bytes_per_ms: f64,
    pub per_switcher_share: BTreeMap<String, f64>,
    /// Per session label: observed address changes / timestamp changes.
    pub hop_change_freq: BTreeMap<String, f64>,
    /// Per session label: chi-square p-value of the destination histogram
    /// against the uniform pool distribution.
    pub uniformity_p: BTreeMap<String, f64>,
}

impl Derived {
    pub fn compute(metrics: &RunMetrics, horizon_ms: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };

        let ingress: Vec<u64> = metrics.per_switcher_ingress.values().copied().collect();
        let total_ingress: u64 = ingress.iter().sum();
        let per_switcher_share: BTreeMap<String, f64> = metrics
            .per_switcher_ingress
            .iter()
            .map(|(k, &v)| (k.clone(), ratio(v, total_ingress)))
            .collect();
        let ingress_imbalance = if ingress.is_empty() || total_ingress == 0 {
            0.0
        } else {
            let max = *ingress.iter().max().unwrap() as f64;
            let min = *ingress.iter().min().unwrap() as f64;
            let mean = total_ingress as f64 / ingress.len() as f64;
            (max - min) / mean
        };

        let hop_change_freq: BTreeMap<String, f64> = metrics
            .hop_transitions
            .iter()
            .filter(|(_, t)| t.transitions > 0)
            .map(|(k, t)| (k.clone(), t.address_changes as f64 / t.transitions as f64))
            .collect();
        let uniformity_p: BTreeMap<String, f64> = metrics
            .dst_histogram
            .iter()
            .filter_map(|(k, hist)| {
                stats::chi_square_uniform(hist).map(|chi| (k.clone(), chi.p_value))
            })
            .collect();
        let min_over = |m: &BTreeMap<String, f64>| {
            m.values().copied().fold(f64::NAN, |acc, v| if acc.is_nan() || v < acc { v } else { acc })
        };

        Derived {
            attack_pass_rate: ratio(metrics.forwarded_attack, metrics.injected_attack),
            legit_pass_rate: ratio(metrics.forwarded_legit, metrics.injected_legit),
            ingress_imbalance,
            server_ingress_attack_fraction: ratio(
                metrics.server_ingress_attack,
                metrics.injected_attack,
            ),
            min_hop_change_freq: min_over(&hop_change_freq),
            min_uniformity_p: min_over(&uniformity_p),
            goodput_bytes_per_ms: ratio(metrics.legit_goodput_bytes, horizon_ms),
            per_switcher_share,
            hop_change_freq,
            uniformity_p,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub run: RunInfo,
    pub metrics: RunMetrics,
    pub derived: Derived,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverReport>,
    pub scenario: crate::scenario::Scenario,
}

#[derive(Clone, PartialEq, Debug, Error)]
pub enum ReportError {
    #[error("report is not valid TOML: {0}")]
    Parse(String),
    #[error("runs have different topologies ({a} vs {b}); deltas would be meaningless")]
    TopologyMismatch { a: String, b: String },
}

impl Report {
    pub fn build(output: &RunOutput) -> Self {
        let scenario = output.scenario.clone();
        Report {
            run: RunInfo {
                schema_version: crate::scenario::SCHEMA_VERSION,
                fingerprint: scenario.fingerprint(),
                topology_fingerprint: scenario.topology_fingerprint(),
                seed: scenario.seed.expect("resolved"),
                horizon_ms: scenario.horizon_ms,
            },
            derived: Derived::compute(&output.metrics, scenario.horizon_ms),
            metrics: output.metrics.clone(),
            observer: output.observer.clone(),
            scenario,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ReportError> {
        toml::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))
    }

    /// `metrics.` and `derived.` keys flattened to dotted-path lines, for
    /// grep and spreadsheets. Histogram-sized arrays are summarized, not
    /// exploded.
    pub fn flat_metrics(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let metrics = toml::Value::try_from(&self.metrics).expect("metrics serialize");
        let derived = toml::Value::try_from(&self.derived).expect("derived serialize");
        flatten("metrics", &metrics, &mut out);
        flatten("derived", &derived, &mut out);
        out
    }

    pub fn flat_metrics_text(&self) -> String {
        let mut text = String::from("key\tvalue\n");
        for (k, v) in self.flat_metrics() {
            text.push_str(&k);
            text.push('\t');
            text.push_str(&v);
            text.push('\n');
        }
        text
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        toml::Value::Array(items) => {
            if items.len() > 16 {
                let sum: i64 = items.iter().filter_map(|v| v.as_integer()).sum();
                out.push((format!("{prefix}.len"), items.len().to_string()));
                out.push((format!("{prefix}.sum"), sum.to_string()));
            } else {
                for (i, v) in items.iter().enumerate() {
                    flatten(&format!("{prefix}.{i}"), v, out);
                }
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        toml::Value::Integer(n) => out.push((prefix.to_string(), n.to_string())),
        toml::Value::Float(x) => out.push((prefix.to_string(), format!("{x}"))),
        toml::Value::Boolean(b) => out.push((prefix.to_string(), b.to_string())),
        toml::Value::Datetime(d) => out.push((prefix.to_string(), d.to_string())),
    }
}

/// Side-by-side numeric comparison of two runs over the same topology.
pub fn compare(a: &Report, b: &Report) -> Result<String, ReportError> {
    if a.run.topology_fingerprint != b.run.topology_fingerprint {
        return Err(ReportError::TopologyMismatch {
            a: a.run.topology_fingerprint.clone(),
            b: b.run.topology_fingerprint.clone(),
        });
    }
    let left: BTreeMap<String, String> = a.flat_metrics().into_iter().collect();
    let right: BTreeMap<String, String> = b.flat_metrics().into_iter().collect();
    let mut text = String::from("key\ta\tb\tdelta\n");
    let keys: std::collections::BTreeSet<&String> = left.keys().chain(right.keys()).collect();
    for key in keys {
        let missing = String::from("0");
        let va = left.get(key).unwrap_or(&missing);
        let vb = right.get(key).unwrap_or(&missing);
        let delta = match (va.parse::<f64>(), vb.parse::<f64>()) {
            (Ok(x), Ok(y)) if x.is_nan() && y.is_nan() => "0".to_string(),
            (Ok(x), Ok(y)) => format!("{}", y - x),
            _ => {
                if va == vb {
                    "0".to_string()
                } else {
                    "differs".to_string()
                }
            }
        };
        text.push_str(&format!("{key}\t{va}\t{vb}\t{delta}\n"));
    }
    Ok(text)
}

#[derive(Clone, PartialEq, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Evaluates a scenario's declared thresholds against a finished run.
/// Policy drops are filter verdicts; congestion losses are not policy.
pub fn evaluate_checks(checks: &Checks, report: &Report) -> Vec<CheckOutcome> {
    let m = &report.metrics;
    let d = &report.derived;
    let mut out = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        out.push(CheckOutcome { name: name.to_string(), passed, detail });
    };

    if let Some(min) = checks.min_forwarded_legit {
        push(
            "min_forwarded_legit",
            m.forwarded_legit >= min,
            format!("forwarded_legit={} min={min}", m.forwarded_legit),
        );
    }
    if let Some(max) = checks.max_legit_policy_drops {
        let policy: u64 = m
            .dropped_legit_by_reason
            .iter()
            .filter(|(reason, _)| reason.as_str() != "congestion")
            .map(|(_, &n)| n)
            .sum();
        push(
            "max_legit_policy_drops",
            policy <= max,
            format!("legit_policy_drops={policy} max={max}"),
        );
    }
    if let Some(max_rate) = checks.max_attack_pass_rate {
        // With a sigma the bound is statistical: the observed count must sit
        // within k standard deviations of a binomial at the target rate.
        let (passed, detail) = match checks.attack_pass_sigma {
            Some(k) => {
                let (_, _, hi) = stats::binomial_bounds(m.injected_attack, max_rate, k);
                (
                    (m.forwarded_attack as f64) <= hi,
                    format!(
                        "forwarded_attack={} allowed<={hi:.2} (rate {max_rate}, {k} sigma over n={})",
                        m.forwarded_attack, m.injected_attack
                    ),
                )
            }
            None => (
                d.attack_pass_rate <= max_rate,
                format!("attack_pass_rate={} max={max_rate}", d.attack_pass_rate),
            ),
        };
        push("max_attack_pass_rate", passed, detail);
    }
    if let Some(max) = checks.max_ingress_imbalance {
        push(
            "max_ingress_imbalance",
            d.ingress_imbalance <= max,
            format!("ingress_imbalance={} max={max}", d.ingress_imbalance),
        );
    }
    if let Some(min) = checks.min_hop_change_freq {
        push(
            "min_hop_change_freq",
            d.min_hop_change_freq >= min,
            format!("min_hop_change_freq={} min={min}", d.min_hop_change_freq),
        );
    }
    if let Some(min) = checks.min_uniformity_p {
        push(
            "min_uniformity_p",
            d.min_uniformity_p >= min,
            format!("min_uniformity_p={} min={min}", d.min_uniformity_p),
        );
    }
    if let Some(max) = checks.max_server_ingress_attack_fraction {
        push(
            "max_server_ingress_attack_fraction",
            d.server_ingress_attack_fraction <= max,
            format!(
                "server_ingress_attack_fraction={} max={max}",
                d.server_ingress_attack_fraction
            ),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_metrics() -> RunMetrics {
        let mut m = RunMetrics {
            injected_legit: 100,
            forwarded_legit: 90,
            injected_attack: 1000,
            forwarded_attack: 4,
            server_ingress_attack: 4,
            legit_goodput_bytes: 51_200,
            ..RunMetrics::default()
        };
        m.per_switcher_ingress.insert("sw0".into(), 240);
        m.per_switcher_ingress.insert("sw1".into(), 260);
        m.hop_transitions.insert(
            "c0/web".into(),
            crate::netsim::HopTransitions { transitions: 100, address_changes: 75 },
        );
        m.dst_histogram.insert("c0/web".into(), vec![25, 25, 25, 25]);
        m
    }

    #[test]
    fn derived_rates() {
        let d = Derived::compute(&sample_metrics(), 100);
        assert_eq!(d.attack_pass_rate, 0.004);
        assert_eq!(d.legit_pass_rate, 0.9);
        assert_eq!(d.server_ingress_attack_fraction, 0.004);
        assert_eq!(d.goodput_bytes_per_ms, 512.0);
        // shares 0.48 / 0.52, spread (260-240)/250
        assert_eq!(d.per_switcher_share["sw0"], 0.48);
        assert_eq!(d.per_switcher_share["sw1"], 0.52);
        assert!((d.ingress_imbalance - 0.08).abs() < 1e-12);
    }

    // The negated comparison is the point: NaN must fail a >= threshold.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    #[test]
    fn empty_minima_are_nan_and_fail_thresholds() {
        let d = Derived::compute(&RunMetrics::default(), 100);
        assert!(d.min_hop_change_freq.is_nan());
        assert!(d.min_uniformity_p.is_nan());
        assert!(!(d.min_uniformity_p >= 0.001));
    }

    #[test]
    fn check_evaluation_reads_thresholds() {
        let metrics = sample_metrics();
        let scenario: crate::scenario::Scenario =
            toml::from_str(crate::scenario::tests::SMALL).unwrap();
        let output = RunOutput {
            scenario: {
                let mut s = scenario;
                s.resolve().unwrap();
                s
            },
            metrics,
            observer: None,
            event_log: None,
        };
        let report = Report::build(&output);
        let checks = Checks {
            min_forwarded_legit: Some(90),
            max_legit_policy_drops: Some(0),
            max_attack_pass_rate: Some(1.0 / 256.0),
            attack_pass_sigma: Some(3.0),
            ..Checks::default()
        };
        let outcomes = evaluate_checks(&checks, &report);
        assert_eq!(outcomes.len(), 3);
        assert!(outcomes.iter().all(|o| o.passed), "{outcomes:?}");

        let strict = Checks { min_forwarded_legit: Some(91), ..Checks::default() };
        assert!(!evaluate_checks(&strict, &report)[0].passed);
    }

    #[test]
    fn report_toml_round_trip() {
        let scenario: crate::scenario::Scenario =
            toml::from_str(crate::scenario::tests::SMALL).unwrap();
        let output = RunOutput {
            scenario: {
                let mut s = scenario;
                s.resolve().unwrap();
                s
            },
            metrics: sample_metrics(),
            observer: None,
            event_log: None,
        };
        let report = Report::build(&output);
        let text = report.to_toml();
        let back = Report::from_toml(&text).unwrap();
        assert_eq!(back, report);
    }

    /// Every number in the flat table parses back to exactly the field it
    /// came from; float printing is shortest-round-trip, not approximation.
    #[test]
    fn flat_metrics_reparse_to_the_exact_field_values() {
        let mut metrics = sample_metrics();
        // Non-terminating decimal shares and a histogram long enough to be
        // summarized rather than exploded.
        metrics.per_switcher_ingress.insert("sw2".into(), 7);
        metrics.dst_histogram.insert("c1/web".into(), (0..24).collect());
        let scenario: crate::scenario::Scenario =
            toml::from_str(crate::scenario::tests::SMALL).unwrap();
        let report = Report::build(&RunOutput {
            scenario: {
                let mut s = scenario;
                s.resolve().unwrap();
                s
            },
            metrics,
            observer: None,
            event_log: None,
        });

        let roots = [
            ("metrics", toml::Value::try_from(&report.metrics).unwrap()),
            ("derived", toml::Value::try_from(&report.derived).unwrap()),
        ];
        let flat = report.flat_metrics();
        assert!(flat.iter().any(|(k, _)| k.ends_with(".sum")), "summarization not exercised");
        for (key, printed) in flat {
            let (root, rest) = key.split_once('.').unwrap();
            let mut node = &roots.iter().find(|(name, _)| *name == root).unwrap().1;
            let mut synthesized = None;
            for step in rest.split('.') {
                match node {
                    toml::Value::Table(t) => {
                        node = t.get(step).unwrap_or_else(|| panic!("{key} missing"))
                    }
                    toml::Value::Array(items) => match step {
                        "len" => synthesized = Some(items.len().to_string()),
                        "sum" => {
                            let sum: i64 = items.iter().filter_map(|v| v.as_integer()).sum();
                            synthesized = Some(sum.to_string());
                        }
                        _ => node = &items[step.parse::<usize>().unwrap()],
                    },
                    other => panic!("{key} descends into {other:?}"),
                }
            }
            if let Some(expected) = synthesized {
                assert_eq!(printed, expected, "{key}");
                continue;
            }
            match node {
                toml::Value::Integer(n) => assert_eq!(printed.parse::<i64>().unwrap(), *n, "{key}"),
                toml::Value::Float(x) => {
                    let back: f64 = printed.parse().unwrap();
                    assert!(back == *x || (back.is_nan() && x.is_nan()), "{key}: {printed} vs {x}");
                }
                toml::Value::String(s) => assert_eq!(&printed, s, "{key}"),
                toml::Value::Boolean(b) => assert_eq!(printed.parse::<bool>().unwrap(), *b, "{key}"),
                other => panic!("{key} is {other:?}"),
            }
        }
    }

    #[test]
    fn compare_refuses_different_topologies() {
        let scenario: crate::scenario::Scenario =
            toml::from_str(crate::scenario::tests::SMALL).unwrap();
        let mut a = scenario.clone();
        a.resolve().unwrap();
        let mut b = scenario;
        b.clients[0].ip = "10.9.9.9".parse().unwrap();
        b.resolve().unwrap();
        let ra = Report::build(&RunOutput {
            scenario: a,
            metrics: sample_metrics(),
            observer: None,
            event_log: None,
        });
        let rb = Report::build(&RunOutput {
            scenario: b,
            metrics: sample_metrics(),
            observer: None,
            event_log: None,
        });
        let same = compare(&ra, &ra).unwrap();
        for line in same.lines().skip(1) {
            let delta = line.rsplit('\t').next().unwrap();
            assert_eq!(delta, "0", "{line}");
        }
        assert!(matches!(compare(&ra, &rb), Err(ReportError::TopologyMismatch { .. })));
    }
}
