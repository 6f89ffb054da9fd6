#!/usr/bin/env python3
"""Smoke test for the fasthop_py extension module.

Build the extension first, then run this file either way:

    cargo build -p fasthop-py
    pytest python/smoke_test.py
    python3 python/smoke_test.py
"""

import shutil
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent

SCENARIO = """\
schema_version = 1
horizon_ms = 2000
pool_size = 8

[[service]]
name = "web"
real_ip = "10.99.0.80"
initial_ip = "198.51.100.80"

[[credential]]
user = "alice"
secret = "s3cret"

[[switcher]]
id = "sw0"
address_block = "10.0.1.0/28"

[[client]]
id = "c0"
ip = "192.0.2.10"
service = "web"
user = "alice"
rate_ppms = 2
duration_ms = 500
"""


def _load():
    """Stage the built cdylib under an importable name and import it."""
    if "fasthop_py" in sys.modules:
        return sys.modules["fasthop_py"]
    built = next(
        (
            p
            for p in (
                REPO / "target" / "debug" / "libfasthop_py.so",
                REPO / "target" / "release" / "libfasthop_py.so",
            )
            if p.exists()
        ),
        None,
    )
    if built is None:
        raise SystemExit("extension not built; run: cargo build -p fasthop-py")
    stage = REPO / "python" / "_build"
    stage.mkdir(exist_ok=True)
    staged = stage / "fasthop_py.so"
    if not staged.exists() or built.stat().st_mtime > staged.stat().st_mtime:
        shutil.copy2(built, staged)
    sys.path.insert(0, str(stage))
    import fasthop_py

    return fasthop_py


fh = _load()


def test_hop_indexes_match_the_frozen_vectors():
    rows = 0
    for line in (REPO / "crates/fasthop/tests/data/hop_vectors.txt").read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        uid, tsval, pool_size, index = line.split()
        assert fh.hop_index(uid, int(tsval), int(pool_size)) == int(index), line
        assert fh.hop_value(uid, int(tsval)) % int(pool_size) == int(index), line
        rows += 1
    assert rows >= 14


def test_session_and_switcher_agree_on_every_tick():
    uid = "000102030405060708090a0b0c0d0e0f"
    pool = [f"10.0.0.{i}" for i in range(1, 9)]
    session = fh.Session(uid, pool, "198.51.100.80", "192.0.2.10")
    assert session.pool == pool and len(session) == 8

    switcher = fh.Switcher()
    switcher.provision(uid, pool, "10.99.0.80", "192.0.2.10")
    assert switcher.session_count == 1

    for tsval in range(200):
        dst = session.address_at(tsval)
        assert dst == pool[session.index_at(tsval)]
        assert switcher.verify("192.0.2.10", dst, tsval) == ("forward", "10.99.0.80")


def test_stale_or_malformed_packets_are_refused():
    uid = "000102030405060708090a0b0c0d0e0f"
    pool = [f"10.0.0.{i}" for i in range(1, 9)]
    session = fh.Session(uid, pool, "198.51.100.80", "192.0.2.10")
    switcher = fh.Switcher()
    switcher.provision(uid, pool, "10.99.0.80", "192.0.2.10")

    # A replayed address only stays valid while the hop lands on it.
    stale = next(
        t for t in range(1, 100) if session.address_at(t) != session.address_at(0)
    )
    good = session.address_at(0)
    assert switcher.verify("192.0.2.10", session.address_at(stale), 0)[0] == "drop"
    assert switcher.verify("192.0.2.10", good, None) == ("drop", "missing_timestamp")
    assert switcher.verify("192.0.2.10", "10.0.9.9", 0) == ("drop", "unknown_destination")
    assert switcher.verify("203.0.113.7", good, 0) == ("drop", "hash_mismatch")

    assert switcher.remove(uid)
    assert switcher.verify("192.0.2.10", good, 0) == ("drop", "no_session")


def test_scenario_runs_are_clean_and_deterministic():
    report = fh.run_scenario(SCENARIO, seed=7)
    again = fh.run_scenario(SCENARIO, seed=7)
    other = fh.run_scenario(SCENARIO, seed=8)
    assert report == again
    assert report != other

    m = fh.flat_metrics(report)
    injected = int(m["metrics.injected_legit"])
    assert injected > 0
    assert m["metrics.forwarded_legit"] == m["metrics.injected_legit"]
    assert m["metrics.responses_delivered"] == m["metrics.injected_legit"]
    assert m["metrics.sessions_established"] == "1"
    assert float(m["derived.legit_pass_rate"]) == 1.0

    fewer = fh.run_scenario(SCENARIO, seed=7, overrides=[("client.0.duration_ms", "100")])
    assert 0 < int(fh.flat_metrics(fewer)["metrics.injected_legit"]) < injected


def test_compare_reports_is_zero_against_itself():
    report = fh.run_scenario(SCENARIO, seed=7)
    table = fh.compare_reports(report, report)
    lines = table.strip().splitlines()
    assert lines[0] == "key\ta\tb\tdelta"
    assert lines[1:] and all(line.endswith("\t0") for line in lines[1:])


if __name__ == "__main__":
    failures = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"{name}: ok")
            except AssertionError as e:
                failures += 1
                print(f"{name}: FAILED {e}")
    sys.exit(1 if failures else 0)
