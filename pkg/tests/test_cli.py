import csv
import io
import json

import pytest

from mqttauth import cli
from mqttauth.broker import AuthMode
from mqttauth.codec import Connect, Pingreq, encode_packet
from mqttauth.config import ConfigError, load_broker_config, load_client_config, provision_demo
from mqttauth.transport import write_trace

SCENARIO = {
    "name": "cli", "seed": 4, "duration": 7200,
    "fleet": [{"scheme": "mutual-tls", "client_id": "m"}, {"scheme": "jwt", "client_id": "j"}],
    "chain_lengths": [1, 2],
}


@pytest.fixture
def scenario_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(SCENARIO))
    return p


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    return rc, capsys.readouterr().out


def test_run_writes_outputs(tmp_path, scenario_file, capsys):
    out = tmp_path / "out"
    rc, stdout = run(capsys, "run", scenario_file, "--out", out)
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(stdout)))
    assert {r["scheme"] for r in rows} == {"jwt", "mutual-tls"}
    for name in ("report.json", "metrics.csv", "audit.log", "comparison.csv", "comparison.txt",
                 "chain_cost.csv", "handshake_bytes.png", "reconnects.png", "chain_cost.png",
                 "activity/j.log", "traces/m.trace", "entropy_j.png"):
        assert (out / name).exists(), name
    assert (out / "handshake_bytes.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_run_seed_override_is_deterministic(tmp_path, scenario_file, capsys):
    run(capsys, "run", scenario_file, "--seed", 11, "--out", tmp_path / "a")
    run(capsys, "run", scenario_file, "--seed", 11, "--out", tmp_path / "b")
    a = (tmp_path / "a" / "report.json").read_text()
    assert a == (tmp_path / "b" / "report.json").read_text()
    assert json.loads(a)["seed"] == 11


def test_run_bad_scenario(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"name": "x", "fleet": []}))
    assert cli.main(["run", str(p)]) == 2


def test_compare(tmp_path, scenario_file, capsys):
    run(capsys, "run", scenario_file, "--out", tmp_path / "o")
    rc, stdout = run(capsys, "compare", tmp_path / "o" / "report.json")
    assert rc == 0
    assert stdout.splitlines()[0] == "axis,kind,jwt,mutual-tls"
    assert "identity-exposure,measured,false,true" in stdout
    rc, text = run(capsys, "compare", tmp_path / "o" / "report.json", "--text")
    assert "iam-phase" in text and "tls-handshake" in text


def test_analyze(tmp_path, capsys):
    trace = tmp_path / "t.trace"
    write_trace(trace, [(0, encode_packet(Pingreq()))] * 100
                + [(0, encode_packet(Connect("c", "u", b"p")))] * 3)
    rc, stdout = run(capsys, "analyze", trace, "--out", tmp_path / "a")
    assert rc == 0
    assert "PINGREQ,100,1,0.000000" in stdout
    assert "CONNECT,3,1,0.000000" in stdout
    assert (tmp_path / "a" / "entropy.csv").exists()


def test_sweep_chains(tmp_path, capsys):
    rc, stdout = run(capsys, "sweep-chains", "--lengths", "1,2,4", "--out", tmp_path)
    assert rc == 0
    rows = [line.split(",") for line in stdout.splitlines()[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 4]
    sizes = [int(r[1]) for r in rows]
    assert sizes == sorted(set(sizes))
    assert (tmp_path / "chain_cost.png").exists()
    with pytest.raises(SystemExit):
        cli.main(["sweep-chains", "--lengths", "one"])


def test_provision_and_load(tmp_path):
    provision_demo(str(tmp_path), seed=1, port=20000)
    setup = load_broker_config(str(tmp_path / "broker.json"))
    try:
        assert {l.auth.mode for l in setup.broker.listeners.values()} == {
            AuthMode.JWT, AuthMode.MUTUAL_TLS, AuthMode.USERNAME_PASSWORD}
        assert setup.broker.iam.identity_for_subject("dev-mtls") == "dev-mtls"
        assert setup.server_channel.chain.leaf.subject == "broker.local"
    finally:
        setup.close()
    for name in ("client-jwt.json", "client-mtls.json", "client-up.json"):
        c = load_client_config(str(tmp_path / name))
        assert c.port in (20000, 20001, 20002) and c.secure


def test_config_errors(tmp_path):
    p = tmp_path / "b.json"
    p.write_text(json.dumps({"listeners": [{"mode": "jwt"}]}))
    with pytest.raises(ConfigError):
        load_broker_config(str(p))
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_broker_config(str(p))
    p.write_text(json.dumps({"client_id": "x", "scheme": "telepathy"}))
    with pytest.raises(ConfigError):
        load_client_config(str(p))
