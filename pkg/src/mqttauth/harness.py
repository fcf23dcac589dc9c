"""Scenario runner: one broker, a fleet of devices, a simulated clock.

Everything random (keys, salts, handshake nonces) comes from one
``random.Random(seed)``, and events are processed in a fixed order, so a
scenario and seed always produce the same report bytes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Optional, Sequence

from . import analysis
from .broker import (
    AclPolicy,
    AuditLog,
    AuthMode,
    AuthSchemeConfig,
    Broker,
    DefaultPolicy,
    IamStore,
    Listener,
    Phase,
)
from .channel import ChannelConfig, HandshakeError, handshake
from .client import (
    ClientConfig,
    ClockSource,
    DeviceClient,
    JwtScheme,
    MutualTlsScheme,
    SimClock,
    UsernamePasswordScheme,
)
from .jws import Alg, ValidationPolicy, generate_key_pair
from .pki import CertChain, build_chain, chain_wire_size, issue, self_sign
from .transport import C2S, InProcessEndpoint, MultiEndpoint, PLAINTEXT_PORT, SECURE_PORT

log = logging.getLogger(__name__)

SCHEMES = ("username-password", "mutual-tls", "jwt")
SERVER_NAME = "broker.local"
DEFAULT_START = 1_700_000_000
YEAR = 365 * 86400


class ScenarioError(ValueError):
    pass


# -- scenario description --------------------------------------------------

@dataclass
class ClientSpec:
    scheme: str
    client_id: str = ""
    count: int = 1
    skew: int = 0
    keep_alive: int = 60
    token_lifetime: int = 3600
    refresh_margin: int = 300
    alg: str = "ES256"
    publish_interval: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ScenarioError("unknown scheme %r" % self.scheme)
        if not self.client_id:
            self.client_id = self.scheme
        if any(ch in self.client_id for ch in "+#/\0"):
            raise ScenarioError("client_id %r may not contain '+', '#' or '/'" % self.client_id)
        if self.count < 1:
            raise ScenarioError("count must be >= 1")
        Alg(self.alg)


@dataclass
class BrokerSpec:
    clock_skew_window: int = 600
    max_lifetime: int = 3600
    audience: str = "projects/demo"
    default_policy: str = "deny-all"
    server_chain_length: int = 2
    key_alg: str = "ES256"
    secure: bool = True


@dataclass
class Scenario:
    name: str
    fleet: list[ClientSpec]
    duration: int = 3600
    broker: BrokerSpec = field(default_factory=BrokerSpec)
    chain_lengths: list[int] = field(default_factory=list)
    seed: int = 0
    start: int = DEFAULT_START

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            fleet = [ClientSpec(**c) for c in d.get("fleet", [])]
            broker = BrokerSpec(**d.get("broker", {}))
            s = cls(name=d["name"], fleet=fleet, duration=int(d.get("duration", 3600)),
                    broker=broker, chain_lengths=list(d.get("chain_lengths", [])),
                    seed=int(d.get("seed", 0)), start=int(d.get("start", DEFAULT_START)))
        except (KeyError, TypeError) as exc:
            raise ScenarioError("bad scenario: %s" % exc) from None
        s.validate()
        return s

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if not self.fleet:
            raise ScenarioError("empty fleet")
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if any(n < 1 for n in self.chain_lengths):
            raise ScenarioError("chain lengths must be >= 1")
        ids = [cid for spec in self.fleet for cid in _expand_ids(spec)]
        dupes = [k for k, v in Counter(ids).items() if v > 1]
        if dupes:
            raise ScenarioError("duplicate client ids: %s" % dupes)
        if self.broker.server_chain_length < 1:
            raise ScenarioError("server_chain_length must be >= 1")
        DefaultPolicy(self.broker.default_policy)
        for spec in self.fleet:
            if spec.scheme == "jwt" and not 0 <= spec.refresh_margin < spec.token_lifetime:
                raise ScenarioError("refresh_margin must be below token_lifetime")


def _expand_ids(spec: ClientSpec) -> list[str]:
    if spec.count == 1:
        return [spec.client_id]
    return ["%s-%d" % (spec.client_id, i + 1) for i in range(spec.count)]


# -- metrics ---------------------------------------------------------------

@dataclass
class SchemeMetrics:
    """Measurements for one authentication scheme in one scenario run."""
    scheme: str
    scenario: str
    duration: int
    clients: int
    secure_channel: bool
    handshake_bytes_min: int
    handshake_bytes_mean: float
    handshake_bytes_max: int
    handshakes: int
    cleartext_identity_exposed: bool
    reconnect_count: int
    reconnects_per_client: dict[str, int]
    connect_attempts: int
    connect_successes: int
    success_rate: dict[str, float]
    auth_failures: dict[str, int]
    iam_phases: dict[str, int]
    iam_consultation_phase: str
    connect_distinct_patterns: int
    connect_max_entropy: float
    pingreq_max_entropy: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeMetrics":
        return cls(**d)


@dataclass
class ScenarioResult:
    scenario: Scenario
    metrics: dict[str, SchemeMetrics]
    audit_lines: list[str]
    activity: dict[str, list[str]]
    traces: dict[str, list[tuple[int, bytes]]]
    chain_cost: list[tuple[int, int]]
    scheme_of: dict[str, str]
    reconnect_times: dict[str, list[float]]

    def report(self) -> dict:
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "duration": self.scenario.duration,
            "schemes": {k: v.to_dict() for k, v in sorted(self.metrics.items())},
            "chain_cost": [list(p) for p in self.chain_cost],
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), sort_keys=True, indent=2) + "\n"

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["scheme", "clients", "handshake_bytes_min", "handshake_bytes_mean",
                "handshake_bytes_max", "cleartext_identity_exposed", "reconnect_count",
                "connect_attempts", "connect_successes", "auth_failures",
                "iam_consultation_phase", "connect_distinct_patterns", "connect_max_entropy"]
        w.writerow(cols)
        for name, m in sorted(self.metrics.items()):
            w.writerow([name, m.clients, m.handshake_bytes_min, _num(m.handshake_bytes_mean),
                        m.handshake_bytes_max, str(m.cleartext_identity_exposed).lower(),
                        m.reconnect_count, m.connect_attempts, m.connect_successes,
                        sum(m.auth_failures.values()), m.iam_consultation_phase,
                        m.connect_distinct_patterns, _num(m.connect_max_entropy)])
        return buf.getvalue()


def _num(x: float) -> str:
    return ("%.6f" % x).rstrip("0").rstrip(".") if isinstance(x, float) else str(x)


# -- world construction ----------------------------------------------------

_MODE = {"username-password": AuthMode.USERNAME_PASSWORD,
         "mutual-tls": AuthMode.MUTUAL_TLS, "jwt": AuthMode.JWT}


@dataclass
class World:
    clock: SimClock
    broker: Broker
    clients: list[DeviceClient]
    scheme_of: dict[str, str]
    publish_interval: dict[str, int]
    endpoints: dict[str, InProcessEndpoint]


def _validity(start: int) -> tuple[int, int]:
    return start - YEAR, start + 10 * YEAR


def build_world(s: Scenario) -> World:
    rng = random.Random(s.seed)
    clock = SimClock(s.start)
    b = s.broker
    validity = _validity(s.start)

    server_chain, server_keys, server_root, _ = build_chain(
        b.server_chain_length, b.key_alg, rng, leaf_subject=SERVER_NAME,
        validity=validity, root_subject="server-root-ca")
    device_ca_keys = generate_key_pair(b.key_alg, rng)
    device_ca = self_sign("device-ca", device_ca_keys, validity)

    iam = IamStore(rng)
    broker = Broker(iam, audit=AuditLog())
    policy = ValidationPolicy(clock_skew_window=b.clock_skew_window,
                              max_lifetime=b.max_lifetime, required_aud=b.audience,
                              require_fresh_iat=True)
    server_cfg = ChannelConfig(chain=server_chain, signing_key=server_keys.signing,
                               trusted_roots=[device_ca], nonce_source=rng.randbytes)
    endpoints = {}
    for scheme in SCHEMES:
        if not any(spec.scheme == scheme for spec in s.fleet):
            continue
        broker.add_listener(Listener(
            scheme, AuthSchemeConfig(_MODE[scheme], policy, DefaultPolicy(b.default_policy)),
            port=SECURE_PORT if b.secure else PLAINTEXT_PORT, secure=b.secure))
        endpoints[scheme] = InProcessEndpoint(broker, scheme, clock,
                                              server_cfg if b.secure else None)
    MultiEndpoint(endpoints.values())

    clients, scheme_of, publish_interval = [], {}, {}
    for spec in s.fleet:
        for cid in _expand_ids(spec):
            acl = AclPolicy(publish_allow=["devices/%s/#" % cid],
                            subscribe_allow=["devices/%s/#" % cid, "broadcast/#"])
            if spec.scheme == "username-password":
                password = rng.randbytes(12).hex()
                iam.register_identity(cid, password=password, acl=acl)
                scheme = UsernamePasswordScheme(cid, password)
            elif spec.scheme == "mutual-tls":
                keys = generate_key_pair(b.key_alg, rng)
                leaf = issue(device_ca, device_ca_keys.signing, cid, keys.verification,
                             validity)
                iam.register_identity(cid, cert_subjects=[cid], acl=acl)
                scheme = MutualTlsScheme(CertChain([leaf, device_ca]), keys.signing)
            else:
                keys = generate_key_pair(spec.alg, rng, key_id="k1")
                iam.register_identity(cid, keys=[keys.verification], acl=acl)
                scheme = JwtScheme(keys.signing, b.audience, "k1", spec.token_lifetime,
                                   spec.refresh_margin)
            cfg = ClientConfig(cid, scheme, keep_alive=spec.keep_alive,
                               trusted_roots=[server_root], server_name=SERVER_NAME,
                               nonce_source=rng.randbytes)
            clients.append(DeviceClient(cfg, endpoints[spec.scheme],
                                        ClockSource(clock, spec.skew)))
            scheme_of[cid] = spec.scheme
            publish_interval[cid] = spec.publish_interval
    return World(clock, broker, clients, scheme_of, publish_interval, endpoints)


# -- running ---------------------------------------------------------------

def simulate(world: World, duration: float) -> None:
    """Step every client and the broker's keep-alive sweep for ``duration`` seconds."""
    clock, broker = world.clock, world.broker
    end = clock.t + duration
    next_publish = {c.cfg.client_id: clock.t + world.publish_interval[c.cfg.client_id]
                    for c in world.clients if world.publish_interval[c.cfg.client_id] > 0}
    seq = Counter()
    for c in world.clients:
        c.start()
    guard = 0
    while True:
        guard += 1
        if guard > 10_000_000:
            raise RuntimeError("simulation did not converge")
        candidates = [t for t in (c.next_event_time() for c in world.clients) if t is not None]
        candidates += list(next_publish.values())
        deadlines = [conn.session.deadline for conn in broker.sessions.values()]
        sweep_at = min(deadlines, default=float("inf"))
        if sweep_at != float("inf"):
            candidates.append(int(sweep_at) + 1)
        if not candidates:
            break
        t = min(candidates)
        if t > end:
            break
        clock.advance_to(max(t, clock.t))
        broker.keep_alive_sweep(clock.t)
        for c in world.clients:
            cid = c.cfg.client_id
            if cid in next_publish and next_publish[cid] <= clock.t:
                if c.connected:
                    seq[cid] += 1
                    c.publish("devices/%s/telemetry" % cid, b"%d" % seq[cid])
                next_publish[cid] += world.publish_interval[cid]
            due = c.next_event_time()
            if due is not None and due <= clock.t:
                c.step()
    clock.advance_to(max(clock.t, end))
    broker.keep_alive_sweep(clock.t)


def run_scenario(s: Scenario) -> ScenarioResult:
    s.validate()
    world = build_world(s)
    simulate(world, s.duration)
    metrics = collect_metrics(s, world)
    chain_cost = chain_cost_sweep(s.chain_lengths, s.broker.key_alg, seed=s.seed) \
        if s.chain_lengths else []
    return ScenarioResult(
        scenario=s,
        metrics=metrics,
        audit_lines=world.broker.audit.lines(),
        activity={c.cfg.client_id: c.activity_lines() for c in world.clients},
        traces={c.cfg.client_id: c.trace() for c in world.clients},
        chain_cost=chain_cost,
        scheme_of=dict(world.scheme_of),
        reconnect_times={c.cfg.client_id: [e.time - s.start for e in c.activity
                                           if e.kind == "reconnect"]
                         for c in world.clients},
    )


def collect_metrics(s: Scenario, world: World) -> dict[str, SchemeMetrics]:
    events = world.broker.audit.events
    out = {}
    for scheme in SCHEMES:
        clients = [c for c in world.clients if world.scheme_of[c.cfg.client_id] == scheme]
        if not clients:
            continue
        links = [link for c in clients for link in c.links]
        hs = [link.channel.metrics.handshake_bytes for link in links]
        exposed = any(link.channel.metrics.cleartext_identity_exposed for link in links)
        reconnects = {c.cfg.client_id: sum(1 for e in c.activity if e.kind == "reconnect")
                      for c in clients}
        rates = {c.cfg.client_id: (c.connect_successes / c.connect_attempts
                                   if c.connect_attempts else 0.0) for c in clients}

        mine = [e for e in events if e.listener == scheme]
        failures = Counter(e.reason or "unspecified" for e in mine
                           if e.decision == "deny"
                           and e.phase in (Phase.TLS_HANDSHAKE, Phase.MQTT_CONNECT))
        phases = Counter()
        granted = {e.conn_id for e in mine
                   if e.phase is Phase.MQTT_CONNECT and e.decision == "grant"}
        for conn_id in sorted(granted):
            first = next((e for e in mine if e.conn_id == conn_id and e.iam_consulted), None)
            phases[first.phase.value if first else "none"] += 1
        if len(phases) == 1:
            phase = next(iter(phases))
        else:
            phase = "mixed" if phases else "none"

        patterns, c_entropy, p_entropy = 0, 0.0, 0.0
        for c in clients:
            var = analysis.analyze_trace(c.trace(), direction=C2S)
            if "CONNECT" in var:
                patterns = max(patterns, var["CONNECT"].distinct_patterns)
                c_entropy = max(c_entropy, var["CONNECT"].max_entropy)
            if "PINGREQ" in var:
                p_entropy = max(p_entropy, var["PINGREQ"].max_entropy)

        out[scheme] = SchemeMetrics(
            scheme=scheme, scenario=s.name, duration=s.duration, clients=len(clients),
            secure_channel=s.broker.secure,
            handshake_bytes_min=min(hs, default=0),
            handshake_bytes_mean=round(statistics.fmean(hs), 6) if hs else 0.0,
            handshake_bytes_max=max(hs, default=0), handshakes=len(hs),
            cleartext_identity_exposed=exposed,
            reconnect_count=sum(reconnects.values()), reconnects_per_client=reconnects,
            connect_attempts=sum(c.connect_attempts for c in clients),
            connect_successes=sum(c.connect_successes for c in clients),
            success_rate={k: round(v, 6) for k, v in rates.items()},
            auth_failures=dict(sorted(failures.items())),
            iam_phases=dict(sorted(phases.items())),
            iam_consultation_phase=phase,
            connect_distinct_patterns=patterns,
            connect_max_entropy=round(c_entropy, 6),
            pingreq_max_entropy=round(p_entropy, 6),
        )
    return out


# -- cross-scheme comparison -----------------------------------------------

@dataclass
class ComparisonTable:
    columns: list[str]
    rows: list[tuple[str, str, list[str]]]  # (axis, kind, values)
    warnings: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "kind"] + self.columns)
        for axis, kind, values in self.rows:
            w.writerow([axis, kind] + values)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonTable":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        return cls(columns=header[2:], rows=[(r[0], r[1], r[2:]) for r in body])

    def to_text(self) -> str:
        head = ["axis", "kind"] + self.columns
        body = [[a, k] + v for a, k, v in self.rows]
        widths = [max(len(str(r[i])) for r in [head] + body) for i in range(len(head))]
        fmt = "  ".join("%%-%ds" % w for w in widths)
        lines = [fmt % tuple(head), fmt % tuple("-" * w for w in widths)]
        lines += [fmt % tuple(r) for r in body]
        lines += ["warning: %s" % w for w in self.warnings]
        return "\n".join(lines)

    def row(self, axis: str) -> dict[str, str]:
        for a, _kind, values in self.rows:
            if a == axis:
                return dict(zip(self.columns, values))
        raise KeyError(axis)


def compare_schemes(reports: Sequence[SchemeMetrics]) -> ComparisonTable:
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    names = [m.scheme for m in reports]
    columns = names if len(set(names)) == len(names) else \
        ["%s@%s" % (m.scheme, m.scenario) for m in reports]
    warnings = []
    durations = sorted({m.duration for m in reports})
    if len(durations) > 1:
        warnings.append("scenario durations differ: %s" % durations)

    def per_client(m):
        return m.reconnect_count / m.clients if m.clients else 0.0

    rows = [
        ("confidentiality", "prerequisite",
         ["secure-channel" if m.secure_channel else "none" for m in reports]),
        ("server-authentication", "prerequisite",
         ["ca-chain" if m.secure_channel else "none" for m in reports]),
        ("identity-exposure", "measured",
         [str(m.cleartext_identity_exposed).lower() for m in reports]),
        ("handshake-bytes", "measured", [_num(float(m.handshake_bytes_mean)) for m in reports]),
        ("reconnects", "measured", [_num(per_client(m)) for m in reports]),
        ("iam-phase", "measured", [m.iam_consultation_phase for m in reports]),
        ("connect-frame-entropy", "measured", [_num(m.connect_max_entropy) for m in reports]),
        ("auth-failures", "measured", [str(sum(m.auth_failures.values())) for m in reports]),
    ]
    return ComparisonTable(columns, rows, warnings)


def load_report(path) -> list[SchemeMetrics]:
    with open(path) as fh:
        data = json.load(fh)
    return [SchemeMetrics.from_dict(v) for _, v in sorted(data["schemes"].items())]


# -- chain cost ------------------------------------------------------------

def chain_cost_sweep(lengths: Sequence[int], alg: str = "ES256", seed: int = 0
                     ) -> list[tuple[int, int]]:
    """Server-auth-only handshake bytes for each server chain length."""
    out = []
    for n in lengths:
        if n < 1:
            raise ValueError("chain length must be >= 1")
        rng = random.Random("%d/%d" % (seed, n))
        chain, keys, root, _ = build_chain(n, alg, rng, leaf_subject=SERVER_NAME,
                                           validity=_validity(DEFAULT_START),
                                           root_subject="server-root-ca")
        server = ChannelConfig(chain=chain, signing_key=keys.signing, nonce_source=rng.randbytes)
        client = ChannelConfig(trusted_roots=[root], server_name=SERVER_NAME,
                               nonce_source=rng.randbytes)
        c_end, _ = handshake(client, server, DEFAULT_START)
        out.append((n, c_end.metrics.handshake_bytes))
    return out


def chain_sizes(lengths: Sequence[int], alg: str = "ES256", seed: int = 0
                ) -> dict[int, list[int]]:
    """Encoded size of each certificate in the chains :func:`chain_cost_sweep` uses."""
    sizes = {}
    for n in lengths:
        rng = random.Random("%d/%d" % (seed, n))
        chain, *_ = build_chain(n, alg, rng, leaf_subject=SERVER_NAME,
                                validity=_validity(DEFAULT_START),
                                root_subject="server-root-ca")
        sizes[n] = [len(c.encode()) for c in chain]
    return sizes
