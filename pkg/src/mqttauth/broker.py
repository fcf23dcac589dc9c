"""MQTT broker with pluggable client authentication.

One :class:`Broker` routes between all of its listeners; each listener runs
exactly one authentication mode.  Every IAM lookup is written to the audit
log together with the phase in which it happened, so the moment at which
each scheme consults the identity store can be read back later.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import itertools
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Callable, Iterable, Optional, Sequence

from . import codec
from .codec import (
    Connack,
    ConnackCode,
    Connect,
    Disconnect,
    MqttPacket,
    Pingreq,
    Pingresp,
    Publish,
    Subscribe,
    Suback,
    filter_covers,
    topic_matches,
    validate_filter,
)
from .jws import (
    ClaimsRejected,
    JwsError,
    ValidationPolicy,
    VerificationKey,
    parse_compact,
    validate_claims,
    verify_signature,
)

log = logging.getLogger(__name__)

MAX_KEYS_PER_IDENTITY = 3
KEEP_ALIVE_GRACE = 1.5


class AuthMode(str, enum.Enum):
    USERNAME_PASSWORD = "username-password"
    MUTUAL_TLS = "mutual-tls"
    JWT = "jwt"
    ALLOW_ANONYMOUS = "allow-anonymous"


class DefaultPolicy(str, enum.Enum):
    DENY_ALL = "deny-all"
    LEGACY_OPEN = "legacy-open"


class Phase(str, enum.Enum):
    TLS_HANDSHAKE = "tls-handshake"
    MQTT_CONNECT = "mqtt-connect"
    PUBLISH = "publish"
    SUBSCRIBE = "subscribe"


class IamError(KeyError):
    pass


class AuthDenied(Exception):
    def __init__(self, code: int, reason: str):
        super().__init__("%d %s" % (code, reason))
        self.code = code
        self.reason = reason


# -- IAM -------------------------------------------------------------------

@dataclass(frozen=True)
class AclPolicy:
    publish_allow: tuple[str, ...] = ()
    subscribe_allow: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "publish_allow", tuple(self.publish_allow))
        object.__setattr__(self, "subscribe_allow", tuple(self.subscribe_allow))
        for f in self.publish_allow + self.subscribe_allow:
            validate_filter(f)


@dataclass(frozen=True)
class PasswordHash:
    salt: bytes
    digest: bytes

    @classmethod
    def create(cls, password: bytes, salt: bytes) -> "PasswordHash":
        return cls(salt, hashlib.sha256(salt + password).digest())

    def matches(self, password: bytes) -> bool:
        return hmac.compare_digest(self.digest, hashlib.sha256(self.salt + password).digest())

    def to_text(self) -> str:
        return "%s$%s" % (self.salt.hex(), self.digest.hex())

    @classmethod
    def from_text(cls, text: str) -> "PasswordHash":
        salt, digest = text.split("$")
        return cls(bytes.fromhex(salt), bytes.fromhex(digest))


@dataclass(frozen=True)
class IdentityRecord:
    name: str
    password_hash: Optional[PasswordHash] = None
    cert_subjects: tuple[str, ...] = ()
    verification_keys: tuple[VerificationKey, ...] = ()
    acl: AclPolicy = AclPolicy()


class IamStore:
    """Identity registry.

    Records are immutable and swapped whole under a writer lock, so readers
    never need to lock and always see a consistent record.
    """

    def __init__(self, rng=None):
        self._records: dict[str, IdentityRecord] = {}
        self._lock = threading.Lock()
        self._rng = rng

    def _salt(self) -> bytes:
        return self._rng.randbytes(16) if self._rng is not None else os.urandom(16)

    def register_identity(self, name: str, *, password=None, cert_subjects: Iterable[str] = (),
                          keys: Iterable[VerificationKey] = (),
                          acl: Optional[AclPolicy] = None,
                          password_hash: Optional[PasswordHash] = None) -> IdentityRecord:
        keys = tuple(keys)
        if len(keys) > MAX_KEYS_PER_IDENTITY:
            raise ValueError("at most %d keys per identity" % MAX_KEYS_PER_IDENTITY)
        if password is not None:
            if isinstance(password, str):
                password = password.encode("utf-8")
            password_hash = PasswordHash.create(password, self._salt())
        rec = IdentityRecord(name, password_hash, tuple(cert_subjects), keys, acl or AclPolicy())
        with self._lock:
            if name in self._records:
                raise IamError("identity %r already registered" % name)
            for other in self._records.values():
                clash = set(other.cert_subjects) & set(rec.cert_subjects)
                if clash:
                    raise IamError("subject %s already bound to %r" % (sorted(clash), other.name))
            self._records[name] = rec
        return rec

    def rotate_keys(self, name: str, key: VerificationKey) -> Optional[VerificationKey]:
        """Add ``key`` to the ring, evicting and returning the oldest when full."""
        with self._lock:
            rec = self._records.get(name)
            if rec is None:
                raise IamError("unknown identity %r" % name)
            ring = rec.verification_keys + (key,)
            evicted = None
            if len(ring) > MAX_KEYS_PER_IDENTITY:
                evicted, ring = ring[0], ring[1:]
            self._records[name] = replace(rec, verification_keys=ring)
        return evicted

    def set_acl(self, name: str, acl: AclPolicy):
        with self._lock:
            rec = self._records.get(name)
            if rec is None:
                raise IamError("unknown identity %r" % name)
            self._records[name] = replace(rec, acl=acl)

    def get(self, name: Optional[str]) -> Optional[IdentityRecord]:
        if name is None:
            return None
        return self._records.get(name)

    def identity_for_subject(self, subject: str) -> Optional[str]:
        for rec in list(self._records.values()):
            if subject in rec.cert_subjects:
                return rec.name
        return None

    def __contains__(self, name):
        return name in self._records

    def __len__(self):
        return len(self._records)

    def names(self) -> list[str]:
        return sorted(self._records)


# -- audit -----------------------------------------------------------------

@dataclass(frozen=True)
class AuditEvent:
    timestamp: float
    phase: Phase
    iam_consulted: bool
    decision: str  # "grant" | "deny"
    identity: Optional[str] = None
    client_id: Optional[str] = None
    conn_id: Optional[int] = None
    listener: Optional[str] = None
    reason: Optional[str] = None

    def to_line(self) -> str:
        d = asdict(self)
        d["phase"] = self.phase.value
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "AuditEvent":
        d = json.loads(line)
        d["phase"] = Phase(d["phase"])
        return cls(**d)


class AuditLog:
    """Append-only, one JSON object per line."""

    def __init__(self, stream: Optional[IO[str]] = None):
        self._events: list[AuditEvent] = []
        self._lock = threading.Lock()
        self._stream = stream

    def append(self, event: AuditEvent):
        with self._lock:
            self._events.append(event)
            if self._stream is not None:
                self._stream.write(event.to_line() + "\n")
                self._stream.flush()

    @property
    def events(self) -> tuple[AuditEvent, ...]:
        return tuple(self._events)

    def lines(self) -> list[str]:
        return [e.to_line() for e in self._events]

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self._events)


# -- authentication --------------------------------------------------------

def authenticate_username_password(connect: Connect, iam: IamStore) -> str:
    if connect.username is None:
        raise AuthDenied(ConnackCode.BAD_USERNAME_PASSWORD, "username-missing")
    rec = iam.get(connect.username)
    if rec is None or rec.password_hash is None:
        raise AuthDenied(ConnackCode.BAD_USERNAME_PASSWORD, "unknown-identity")
    if connect.password is None or not rec.password_hash.matches(connect.password):
        raise AuthDenied(ConnackCode.BAD_USERNAME_PASSWORD, "bad-password")
    return rec.name


def authenticate_mtls(peer_identity: Optional[str], iam: IamStore) -> str:
    if peer_identity is None:
        raise AuthDenied(ConnackCode.NOT_AUTHORIZED, "no-client-certificate")
    name = iam.identity_for_subject(peer_identity)
    if name is None:
        raise AuthDenied(ConnackCode.NOT_AUTHORIZED, "unregistered-subject")
    return name


def authenticate_jwt(connect: Connect, iam: IamStore, now: int,
                     policy: ValidationPolicy) -> str:
    """Identity is the client id; the token in the password field proves it."""
    if connect.password is None:
        raise AuthDenied(ConnackCode.BAD_USERNAME_PASSWORD, "token-missing")
    try:
        token = parse_compact(connect.password.decode("ascii"))
    except (UnicodeDecodeError, JwsError):
        raise AuthDenied(ConnackCode.BAD_USERNAME_PASSWORD, "token-unparseable") from None
    rec = iam.get(connect.client_id)
    if rec is None:
        raise AuthDenied(ConnackCode.BAD_USERNAME_PASSWORD, "unknown-identity")
    keys = rec.verification_keys
    if token.header.kid is not None:
        keys = tuple(k for k in keys if k.key_id == token.header.kid)
    if not any(verify_signature(token, k) for k in keys):
        raise AuthDenied(ConnackCode.BAD_USERNAME_PASSWORD, "bad-signature")
    try:
        validate_claims(token.claims, now, policy)
    except ClaimsRejected as exc:
        raise AuthDenied(ConnackCode.NOT_AUTHORIZED, exc.reason.value) from None
    return rec.name


def authorize(identity: Optional[str], action: str, topic: str, iam: IamStore,
              default_policy: DefaultPolicy = DefaultPolicy.DENY_ALL) -> bool:
    """``action`` is "publish" (topic name) or "subscribe" (topic filter)."""
    rec = iam.get(identity)
    if rec is None:
        return default_policy is DefaultPolicy.LEGACY_OPEN
    if action == "publish":
        return any(topic_matches(f, topic) for f in rec.acl.publish_allow)
    if action == "subscribe":
        return any(filter_covers(f, topic) for f in rec.acl.subscribe_allow)
    raise ValueError("unknown action %r" % action)


# -- sessions --------------------------------------------------------------

@dataclass(frozen=True)
class AuthSchemeConfig:
    mode: AuthMode
    jwt_policy: ValidationPolicy = ValidationPolicy(require_fresh_iat=True)
    default_policy: DefaultPolicy = DefaultPolicy.DENY_ALL

    def __post_init__(self):
        object.__setattr__(self, "mode", AuthMode(self.mode))
        object.__setattr__(self, "default_policy", DefaultPolicy(self.default_policy))


@dataclass
class Listener:
    name: str
    auth: AuthSchemeConfig
    port: int = 8883
    secure: bool = True

    @property
    def requires_client_cert(self) -> bool:
        return self.auth.mode is AuthMode.MUTUAL_TLS


@dataclass
class Session:
    client_id: str
    identity: Optional[str]
    authenticated: bool
    keep_alive: int
    last_activity: float
    subscriptions: list[str] = field(default_factory=list)
    channel_peer_identity: Optional[str] = None

    @property
    def deadline(self) -> float:
        if self.keep_alive == 0:
            return float("inf")
        return self.last_activity + KEEP_ALIVE_GRACE * self.keep_alive


class Connection:
    """Broker-side state of one transport connection."""

    def __init__(self, listener: Listener, conn_id: int):
        self.id = conn_id
        self.listener = listener
        self.channel_peer_identity: Optional[str] = None
        self.tls_identity: Optional[str] = None
        self.tls_consulted = False
        self.session: Optional[Session] = None
        self.closed = False
        self.close_reason: Optional[str] = None
        self._buffer = b""
        # set by the transport; called when the broker closes the connection
        self.on_close: Optional[Callable[["Connection"], None]] = None

    def __repr__(self):
        cid = self.session.client_id if self.session else None
        return "<Connection %d %s %s%s>" % (self.id, self.listener.name, cid,
                                            " closed" if self.closed else "")


Delivery = tuple[Connection, MqttPacket]


class Broker:
    def __init__(self, iam: IamStore, listeners: Sequence[Listener] = (),
                 audit: Optional[AuditLog] = None):
        self.iam = iam
        self.audit = audit if audit is not None else AuditLog()
        self.listeners: dict[str, Listener] = {}
        self.sessions: dict[str, Connection] = {}
        self._lock = threading.RLock()
        self._conn_ids = itertools.count(1)
        for lst in listeners:
            self.add_listener(lst)

    def add_listener(self, listener: Listener):
        if listener.name in self.listeners:
            raise ValueError("duplicate listener %r" % listener.name)
        self.listeners[listener.name] = listener

    # connection lifecycle

    def accept(self, listener_name: str) -> Connection:
        return Connection(self.listeners[listener_name], next(self._conn_ids))

    def on_client_certificate(self, conn: Connection, subject: str, now: float):
        """Handshake-time hook, called once the client chain has verified."""
        conn.channel_peer_identity = subject
        if conn.listener.auth.mode is not AuthMode.MUTUAL_TLS:
            return
        identity = self.iam.identity_for_subject(subject)
        conn.tls_identity = identity
        conn.tls_consulted = True
        self._audit(now, Phase.TLS_HANDSHAKE, True, identity is not None, conn,
                    identity=identity,
                    reason=None if identity else "unregistered-subject")

    def handshake_failed(self, conn: Connection, reason: str, now: float):
        self._audit(now, Phase.TLS_HANDSHAKE, conn.tls_consulted, False, conn,
                    identity=conn.tls_identity, reason=reason)
        self.close(conn, "handshake-failed")

    def close(self, conn: Connection, reason: str):
        with self._lock:
            if conn.closed:
                return
            conn.closed = True
            conn.close_reason = reason
            s = conn.session
            if s is not None and self.sessions.get(s.client_id) is conn:
                del self.sessions[s.client_id]
        if conn.on_close is not None:
            conn.on_close(conn)

    # packet handling

    def handle_bytes(self, conn: Connection, data: bytes, now: float) -> list[Delivery]:
        out: list[Delivery] = []
        conn._buffer += data
        while not conn.closed:
            try:
                got = codec.read_packet(conn._buffer)
            except codec.DecodeError as exc:
                log.info("conn %d: %s", conn.id, exc)
                self.close(conn, "malformed-packet")
                break
            if got is None:
                break
            packet, used = got
            conn._buffer = conn._buffer[used:]
            out += self.handle(conn, packet, now)
        return out

    def handle(self, conn: Connection, packet: MqttPacket, now: float) -> list[Delivery]:
        with self._lock:
            if conn.closed:
                return []
            if conn.session is None:
                if not isinstance(packet, Connect):
                    self.close(conn, "protocol-order")
                    return []
                return self.handle_connect(conn, packet, now)
            if isinstance(packet, Connect):
                self.close(conn, "second-connect")
                return []
            conn.session.last_activity = now
            if isinstance(packet, Publish):
                return self.handle_publish(conn, packet, now)
            if isinstance(packet, Subscribe):
                return self.handle_subscribe(conn, packet, now)
            if isinstance(packet, Pingreq):
                return self.handle_pingreq(conn, packet, now)
            if isinstance(packet, Disconnect):
                return self.handle_disconnect(conn, packet, now)
            self.close(conn, "unexpected-%s" % type(packet).__name__.lower())
            return []

    def _authenticate(self, conn: Connection, packet: Connect, now: float) -> Optional[str]:
        mode = conn.listener.auth.mode
        if mode is AuthMode.USERNAME_PASSWORD:
            return self._consulting(now, conn, packet,
                                    lambda: authenticate_username_password(packet, self.iam))
        if mode is AuthMode.JWT:
            policy = conn.listener.auth.jwt_policy
            return self._consulting(now, conn, packet,
                                    lambda: authenticate_jwt(packet, self.iam, now, policy))
        if mode is AuthMode.MUTUAL_TLS:
            # the identity store was already consulted during the handshake
            if not conn.tls_consulted:
                raise AuthDenied(ConnackCode.NOT_AUTHORIZED, "no-client-certificate")
            if conn.tls_identity is None:
                raise AuthDenied(ConnackCode.NOT_AUTHORIZED, "unregistered-subject")
            return conn.tls_identity
        return None

    def _consulting(self, now, conn, packet, check: Callable[[], str]) -> str:
        identity = check()
        self._audit(now, Phase.MQTT_CONNECT, True, True, conn, identity=identity,
                    client_id=packet.client_id)
        return identity

    def handle_connect(self, conn: Connection, packet: Connect, now: float) -> list[Delivery]:
        mode = conn.listener.auth.mode
        try:
            identity = self._authenticate(conn, packet, now)
        except AuthDenied as exc:
            consulted = mode in (AuthMode.USERNAME_PASSWORD, AuthMode.JWT)
            self._audit(now, Phase.MQTT_CONNECT, consulted, False, conn,
                        client_id=packet.client_id, reason=exc.reason,
                        identity=conn.tls_identity)
            out = [(conn, Connack(int(exc.code)))]
            self.close(conn, "connect-denied")
            return out
        if mode is AuthMode.MUTUAL_TLS:
            self._audit(now, Phase.MQTT_CONNECT, False, True, conn, identity=identity,
                        client_id=packet.client_id)
        elif mode is AuthMode.ALLOW_ANONYMOUS:
            self._audit(now, Phase.MQTT_CONNECT, False, True, conn, client_id=packet.client_id,
                        reason="anonymous")

        old = self.sessions.get(packet.client_id)
        if old is not None and old is not conn:
            self.close(old, "taken-over")
        conn.session = Session(
            client_id=packet.client_id, identity=identity,
            authenticated=identity is not None, keep_alive=packet.keep_alive,
            last_activity=now, channel_peer_identity=conn.channel_peer_identity,
        )
        self.sessions[packet.client_id] = conn
        return [(conn, Connack(ConnackCode.ACCEPTED))]

    def _allowed(self, conn: Connection, action: str, topic: str, now: float,
                 phase: Phase) -> bool:
        s = conn.session
        ok = authorize(s.identity, action, topic, self.iam, conn.listener.auth.default_policy)
        self._audit(now, phase, s.identity is not None, ok, conn, identity=s.identity,
                    client_id=s.client_id, reason=topic)
        return ok

    def handle_publish(self, conn: Connection, packet: Publish, now: float) -> list[Delivery]:
        if not self._allowed(conn, "publish", packet.topic, now, Phase.PUBLISH):
            return []
        out = []
        for target in list(self.sessions.values()):
            s = target.session
            if target.closed or s is None:
                continue
            if any(topic_matches(f, packet.topic) for f in s.subscriptions):
                out.append((target, packet))
        return out

    def handle_subscribe(self, conn: Connection, packet: Subscribe, now: float) -> list[Delivery]:
        codes = []
        for topic_filter, _qos in packet.filters:
            if self._allowed(conn, "subscribe", topic_filter, now, Phase.SUBSCRIBE):
                if topic_filter not in conn.session.subscriptions:
                    conn.session.subscriptions.append(topic_filter)
                codes.append(0x00)  # QoS 0 only
            else:
                codes.append(0x80)
        return [(conn, Suback(packet.packet_id, tuple(codes)))]

    def handle_pingreq(self, conn: Connection, packet: Pingreq, now: float) -> list[Delivery]:
        return [(conn, Pingresp())]

    def handle_disconnect(self, conn: Connection, packet: Disconnect, now: float) -> list[Delivery]:
        self.close(conn, "client-disconnect")
        return []

    def keep_alive_sweep(self, now: float) -> list[Session]:
        expired = []
        with self._lock:
            for conn in list(self.sessions.values()):
                if conn.session.deadline < now:
                    expired.append(conn.session)
                    self.close(conn, "keep-alive-timeout")
        return expired

    def _audit(self, now, phase, consulted, granted, conn, identity=None, client_id=None,
               reason=None):
        if client_id is None and conn.session is not None:
            client_id = conn.session.client_id
        self.audit.append(AuditEvent(
            timestamp=now, phase=phase, iam_consulted=consulted,
            decision="grant" if granted else "deny", identity=identity,
            client_id=client_id, conn_id=conn.id, listener=conn.listener.name,
            reason=reason,
        ))
