"""Device-side MQTT client for the three authentication schemes.

The client is driven by timers: :meth:`DeviceClient.next_event_time` says
when it next needs to act (keep-alive ping, token refresh, reconnect retry)
and :meth:`DeviceClient.step` does it.  :meth:`DeviceClient.maintain` loops
over those for a single client; the scenario harness interleaves many.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

from .channel import ChannelConfig, HandshakeError
from .codec import Connack, Connect, Disconnect, Pingreq, Publish, Subscribe, Suback
from .jws import ClaimsSet, JoseHeader, SigningKey, compact_serialize, sign
from .pki import CertChain, Certificate
from .transport import Link, LinkClosed

log = logging.getLogger(__name__)


# -- configuration ---------------------------------------------------------

@dataclass
class UsernamePasswordScheme:
    username: str
    password: str

    name = "username-password"


@dataclass
class MutualTlsScheme:
    chain: CertChain
    signing_key: SigningKey

    name = "mutual-tls"


@dataclass
class JwtScheme:
    signing_key: SigningKey
    aud: str
    kid: Optional[str] = None
    token_lifetime: int = 3600
    refresh_margin: int = 300

    name = "jwt"

    def __post_init__(self):
        if not 0 <= self.refresh_margin < self.token_lifetime:
            raise ValueError("refresh_margin must be below token_lifetime")


Scheme = Union[UsernamePasswordScheme, MutualTlsScheme, JwtScheme]


@dataclass
class ClientConfig:
    client_id: str
    scheme: Scheme
    keep_alive: int = 60
    trusted_roots: Sequence[Certificate] = ()
    server_name: Optional[str] = None
    reconnect_backoff: int = 5
    nonce_source: Optional[Callable[[int], bytes]] = None

    def channel_config(self) -> ChannelConfig:
        chain = key = None
        if isinstance(self.scheme, MutualTlsScheme):
            chain, key = self.scheme.chain, self.scheme.signing_key
        return ChannelConfig(chain=chain, signing_key=key, trusted_roots=self.trusted_roots,
                             server_name=self.server_name, nonce_source=self.nonce_source)


class ClockSource:
    """Device clock: ``now() == true_time() + skew_offset``, in whole seconds."""

    def __init__(self, true_time: Callable[[], float] = time.time, skew_offset: int = 0):
        self.true_time = true_time
        self.skew_offset = skew_offset

    def now(self) -> int:
        return int(self.true_time() + self.skew_offset)

    def to_true(self, device_time: float) -> float:
        return device_time - self.skew_offset


class SimClock:
    """Discrete-event time source; callable like ``time.time``."""

    def __init__(self, start: float = 0):
        self.t = start

    def __call__(self) -> float:
        return self.t

    def advance_to(self, t: float):
        if t < self.t:
            raise ValueError("time cannot run backwards (%s < %s)" % (t, self.t))
        self.t = t


def mint_token(scheme: JwtScheme, clock: ClockSource) -> str:
    return _mint(scheme, clock)[0]


def _mint(scheme: JwtScheme, clock: ClockSource) -> tuple[str, int]:
    iat = clock.now()
    claims = ClaimsSet(iat=iat, exp=iat + scheme.token_lifetime, aud=scheme.aud)
    header = JoseHeader(scheme.signing_key.alg, "JWT", scheme.kid)
    return compact_serialize(sign(header, claims, scheme.signing_key)), claims.exp


# -- activity log ----------------------------------------------------------

@dataclass(frozen=True)
class ActivityEvent:
    time: float
    kind: str  # connect | reconnect | ping | publish | subscribe | disconnect | failure
    cause: str = ""
    detail: str = ""

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "ActivityEvent":
        return cls(**json.loads(line))


class ConnectFailed(Exception):
    def __init__(self, reason: str, code: Optional[int] = None):
        super().__init__(reason if code is None else "connack %d: %s" % (code, reason))
        self.reason = reason
        self.code = code


# -- client ----------------------------------------------------------------

class DeviceClient:
    def __init__(self, cfg: ClientConfig, endpoint, clock: ClockSource):
        self.cfg = cfg
        self.endpoint = endpoint
        self.clock = clock
        self.link: Optional[Link] = None
        self.activity: list[ActivityEvent] = []
        self.received: list[Publish] = []
        self.links: list[Link] = []
        self.token_exp: Optional[int] = None
        self.last_sent: float = 0
        self.retry_at: Optional[float] = None
        self.pending_cause = "initial"
        self.connect_attempts = 0
        self.connect_successes = 0
        self.ever_connected = False
        self._packet_id = 0

    @property
    def connected(self) -> bool:
        return self.link is not None and not self.link.closed

    def _true_now(self) -> float:
        return self.clock.true_time()

    def _log(self, kind, cause="", detail=""):
        self.activity.append(ActivityEvent(self._true_now(), kind, cause, detail))

    def build_connect(self) -> Connect:
        s = self.cfg.scheme
        if isinstance(s, UsernamePasswordScheme):
            return Connect(self.cfg.client_id, s.username, s.password.encode("utf-8"),
                           self.cfg.keep_alive)
        if isinstance(s, JwtScheme):
            token, self.token_exp = _mint(s, self.clock)
            return Connect(self.cfg.client_id, None, token.encode("ascii"), self.cfg.keep_alive)
        return Connect(self.cfg.client_id, keep_alive=self.cfg.keep_alive)

    def connect(self) -> Link:
        """Handshake, CONNECT, wait for CONNACK; raise :class:`ConnectFailed`."""
        self.connect_attempts += 1
        try:
            link = self.endpoint.open(self.cfg.channel_config(), client_now=self.clock.now())
        except HandshakeError as exc:
            raise ConnectFailed(exc.reason.value) from None
        except (LinkClosed, OSError) as exc:
            raise ConnectFailed("transport: %s" % exc) from None
        self.links.append(link)
        try:
            link.send(self.build_connect())
        except LinkClosed:
            raise ConnectFailed("closed-before-connack") from None
        ack = self._await(link, Connack)
        if ack is None:
            link.close()
            raise ConnectFailed("no-connack")
        if ack.return_code != 0:
            link.close()
            raise ConnectFailed("refused", ack.return_code)
        self.link = link
        self.last_sent = self._true_now()
        self.connect_successes += 1
        self.ever_connected = True
        return link

    def _await(self, link: Link, kind, timeout: float = 5.0):
        deadline = time.monotonic() + timeout
        while True:
            for pkt in link.drain():
                if isinstance(pkt, kind):
                    return pkt
                self._on_packet(pkt)
            if link.closed or not _is_wallclock(link) or time.monotonic() > deadline:
                # in-process links answer synchronously
                for pkt in link.drain():
                    if isinstance(pkt, kind):
                        return pkt
                return None
            time.sleep(0.005)

    def _on_packet(self, pkt):
        if isinstance(pkt, Publish):
            self.received.append(pkt)

    def poll(self) -> list:
        if self.link is None:
            return []
        pkts = self.link.drain()
        for p in pkts:
            self._on_packet(p)
        return pkts

    def _send(self, pkt):
        if not self.connected:
            raise LinkClosed("not connected")
        self.link.send(pkt)
        self.last_sent = self._true_now()

    def publish(self, topic: str, payload: bytes = b""):
        self._send(Publish(topic, payload))
        self._log("publish", detail=topic)

    def subscribe(self, *filters: str) -> Optional[Suback]:
        self._packet_id = self._packet_id % 0xFFFF + 1
        self._send(Subscribe(self._packet_id, tuple((f, 0) for f in filters)))
        self._log("subscribe", detail=",".join(filters))
        return self._await(self.link, Suback)

    def disconnect(self, cause: str = "requested"):
        if self.connected:
            try:
                self.link.send(Disconnect())
            except LinkClosed:
                pass
            self.link.close()
        self._log("disconnect", cause)
        self.link = None

    # timers

    def refresh_due(self) -> Optional[float]:
        """True time at which the current token must be replaced."""
        if self.token_exp is None or not isinstance(self.cfg.scheme, JwtScheme):
            return None
        return self.clock.to_true(self.token_exp - self.cfg.scheme.refresh_margin)

    def next_event_time(self) -> Optional[float]:
        if not self.connected:
            if self.retry_at is not None:
                return self.retry_at
            return self._true_now()
        times = []
        if self.cfg.keep_alive > 0:
            times.append(self.last_sent + self.cfg.keep_alive)
        due = self.refresh_due()
        if due is not None:
            times.append(due)
        return min(times) if times else None

    def start(self) -> bool:
        """Initial connection attempt; schedules retries on failure."""
        return self._try_connect("connect", self.pending_cause)

    def _try_connect(self, kind: str, cause: str) -> bool:
        try:
            self.connect()
        except ConnectFailed as exc:
            self._log("failure", cause, str(exc))
            self.retry_at = self._true_now() + self.cfg.reconnect_backoff
            self.pending_cause = cause
            return False
        self.retry_at = None
        self._log(kind, cause)
        return True

    def step(self) -> None:
        """Perform whatever is due at the current true time."""
        now = self._true_now()
        self.poll()
        if not self.connected:
            if self.link is not None:
                # the broker dropped us
                self.link = None
                self.pending_cause = "connection-lost"
                self.retry_at = now
            if self.retry_at is None or self.retry_at <= now:
                kind = "reconnect" if self.ever_connected else "connect"
                self._try_connect(kind, self.pending_cause)
            return
        due = self.refresh_due()
        if due is not None and due <= now:
            # No in-session refresh exists; drop and come back with a fresh token.
            self.link.send(Disconnect())
            self.link.close()
            self.link = None
            self.token_exp = None
            self._try_connect("reconnect", "token-refresh")
            return
        if self.cfg.keep_alive > 0 and self.last_sent + self.cfg.keep_alive <= now:
            self._send(Pingreq())
            self._log("ping")
            self.poll()

    def maintain(self, until: float, on_tick: Optional[Callable[[float], None]] = None
                 ) -> list[ActivityEvent]:
        """Keep the session alive until true time ``until``.

        With a :class:`SimClock` as ``clock.true_time`` time jumps from event
        to event; otherwise this sleeps in wall-clock time.
        """
        if self.link is None and not self.activity:
            self.start()
        sim = self.clock.true_time if isinstance(self.clock.true_time, SimClock) else None
        while True:
            t = self.next_event_time()
            if sim is None:
                # wall clock: wake at least once a second to pick up deliveries
                wake = min(t if t is not None else until, until, time.time() + 1.0)
                time.sleep(max(0.0, wake - time.time()))
                self.poll()
                if time.time() >= until:
                    break
                if t is None or t > time.time():
                    continue
            elif t is None or t > until:
                break
            else:
                sim.advance_to(max(t, sim.t))
            if on_tick is not None:
                on_tick(self._true_now())
            self.step()
        if sim is not None and sim.t < until:
            sim.advance_to(until)
        return self.activity

    def activity_lines(self) -> list[str]:
        return [e.to_line() for e in self.activity]

    def trace(self) -> list[tuple[int, bytes]]:
        frames = []
        for link in self.links:
            frames.extend(link.trace)
        return frames


def _is_wallclock(link: Link) -> bool:
    from .transport import TcpLink
    return isinstance(link, TcpLink)
