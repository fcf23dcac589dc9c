import json
from collections import Counter

import pytest

import oracles
from mqttauth.analysis import analyze_trace
from mqttauth.broker import AuditEvent
from mqttauth.client import ActivityEvent
from mqttauth.harness import (
    ComparisonTable,
    Scenario,
    ScenarioError,
    SchemeMetrics,
    chain_cost_sweep,
    chain_sizes,
    compare_schemes,
    run_scenario,
)


def scenario(**kw):
    base = {"name": "t", "duration": 3600, "seed": 2, "fleet": [
        {"scheme": "username-password", "client_id": "up"},
        {"scheme": "mutual-tls", "client_id": "mtls"},
        {"scheme": "jwt", "client_id": "jwt"}]}
    base.update(kw)
    return Scenario.from_dict(base)


@pytest.fixture(scope="module")
def three():
    return run_scenario(scenario(duration=4 * 3600))


@pytest.mark.parametrize("scheme", ["username-password", "mutual-tls", "jwt"])
def test_single_client_smoke(scheme):
    r = run_scenario(scenario(fleet=[{"scheme": scheme}]))
    m = r.metrics[scheme]
    assert m.connect_successes == m.connect_attempts == m.handshakes >= 1
    assert json.loads(r.report_json())["schemes"][scheme]["clients"] == 1


@pytest.mark.parametrize("bad", [
    {"fleet": []},
    {"duration": 0},
    {"fleet": [{"scheme": "kerberos"}]},
    {"fleet": [{"scheme": "jwt", "client_id": "a"}, {"scheme": "jwt", "client_id": "a"}]},
    {"fleet": [{"scheme": "jwt", "client_id": "a/b"}]},
    {"fleet": [{"scheme": "jwt", "token_lifetime": 300, "refresh_margin": 300}]},
    {"fleet": [{"scheme": "jwt", "colour": "red"}]},
    {"chain_lengths": [0]},
])
def test_config_errors_before_execution(bad):
    with pytest.raises(ScenarioError):
        scenario(**bad)


def test_reconnects_follow_schedule(three):
    assert three.reconnect_times["jwt"] == oracles.refresh_schedule(4 * 3600, 3600, 300)
    assert three.reconnect_times["up"] == [] == three.reconnect_times["mtls"]


def test_exposure_and_iam_phase(three):
    m = three.metrics
    assert m["mutual-tls"].cleartext_identity_exposed
    assert not m["jwt"].cleartext_identity_exposed
    assert not m["username-password"].cleartext_identity_exposed
    assert m["mutual-tls"].iam_consultation_phase == "tls-handshake"
    assert m["jwt"].iam_consultation_phase == "mqtt-connect"
    assert m["mutual-tls"].handshake_bytes_min > m["jwt"].handshake_bytes_max


def test_conservation(three):
    for name, m in three.metrics.items():
        ids = [cid for cid, s in three.scheme_of.items() if s == name]
        events = [ActivityEvent.from_line(l) for cid in ids for l in three.activity[cid]]
        assert m.reconnect_count == sum(e.kind == "reconnect" for e in events)
    audit = [AuditEvent.from_line(l) for l in three.audit_lines]
    for name, m in three.metrics.items():
        denials = Counter(e.reason for e in audit if e.listener == name and e.decision == "deny"
                          and e.phase.value in ("tls-handshake", "mqtt-connect"))
        assert m.auth_failures == dict(denials)


def test_variability_summary_matches_traces(three):
    rep = analyze_trace(three.traces["jwt"], direction=0)
    assert three.metrics["jwt"].connect_distinct_patterns == rep["CONNECT"].distinct_patterns
    assert three.metrics["username-password"].connect_distinct_patterns == 1


def test_deterministic_reports():
    a = run_scenario(scenario(seed=9))
    b = run_scenario(scenario(seed=9))
    assert a.report_json() == b.report_json()
    assert a.audit_lines == b.audit_lines and a.traces == b.traces
    c = run_scenario(scenario(seed=10))
    assert c.traces != a.traces


def test_publish_traffic_is_counted():
    r = run_scenario(scenario(fleet=[{"scheme": "username-password", "client_id": "p",
                                      "publish_interval": 600}]))
    pubs = [l for l in r.activity["p"] if '"kind":"publish"' in l]
    assert len(pubs) == 6


def test_compare_rows_and_csv_round_trip(three):
    table = compare_schemes(list(three.metrics.values()))
    axes = [a for a, _, _ in table.rows]
    for needed in ("identity-exposure", "handshake-bytes", "reconnects", "iam-phase",
                   "connect-frame-entropy"):
        assert needed in axes
    kinds = {a: k for a, k, _ in table.rows}
    assert kinds["confidentiality"] == "prerequisite" and kinds["reconnects"] == "measured"
    assert table.row("identity-exposure") == {"jwt": "false", "mutual-tls": "true",
                                              "username-password": "false"}
    back = ComparisonTable.from_csv(table.to_csv())
    assert back.columns == table.columns and back.rows == table.rows
    assert compare_schemes(list(three.metrics.values())).to_csv() == table.to_csv()


def test_compare_needs_two_and_flags_durations(three):
    ms = list(three.metrics.values())
    with pytest.raises(ValueError):
        compare_schemes(ms[:1])
    other = SchemeMetrics.from_dict(dict(ms[0].to_dict(), duration=60, scenario="short"))
    table = compare_schemes([ms[0], other])
    assert table.warnings and "differ" in table.warnings[0]
    assert table.columns[0] != table.columns[1]


def test_chain_cost_sweep():
    series = chain_cost_sweep([1, 2, 4], seed=3)
    assert [n for n, _ in series] == [1, 2, 4]
    b = [x for _, x in series]
    assert b[0] < b[1] < b[2]
    assert chain_cost_sweep([1, 2, 4], seed=3) == series
    # the handshake grows by exactly the added certificates' encodings,
    # each carried behind a 3-byte length prefix
    sizes = chain_sizes([1, 2, 4], seed=3)
    for (n, bytes_n) in series[1:]:
        assert bytes_n - series[0][1] == sum(sizes[n]) - sum(sizes[1]) + 3 * (n - 1)
    with pytest.raises(ValueError):
        chain_cost_sweep([0])


def test_metrics_csv_header(three):
    lines = three.metrics_csv().splitlines()
    assert lines[0].startswith("scheme,clients,handshake_bytes_min")
    assert len(lines) == 4
