"""A desk-scale model of the TLS 1.2 handshake with optional client certificates.

This is a model, not transport security you should deploy.  It reproduces
the message sequence, server and client authentication by certificate
chain, the CertificateVerify transcript signature, key establishment by
ephemeral ECDH over P-256, and byte accounting.  Record protection is an
HMAC-tagged frame over a SHA-256 keystream.  There is no cipher-suite or
version negotiation, no renegotiation and no session resumption.

Each side of the handshake is a generator that yields outgoing
:class:`HandshakeMessage` objects and ``None`` when it waits for input;
:func:`handshake` pumps two of them in-process and ``tcp`` helpers pump one
side over a socket.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable, Optional, Sequence

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec

from .jws import SigningKey, sign_bytes, verify_bytes
from .pki import CertChain, Certificate, ChainInvalid, PkiError, verify_chain

NonceSource = Callable[[int], bytes]

_P256_ORDER = int("FFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551", 16)


class MsgType(enum.IntEnum):
    CLIENT_HELLO = 1
    SERVER_HELLO = 2
    CERTIFICATE = 11
    SERVER_KEY_EXCHANGE = 12
    CERTIFICATE_REQUEST = 13
    SERVER_HELLO_DONE = 14
    CERTIFICATE_VERIFY = 15
    CLIENT_KEY_EXCHANGE = 16
    FINISHED = 20
    CHANGE_CIPHER_SPEC = 254


_NAMES = {
    MsgType.CLIENT_HELLO: "ClientHello",
    MsgType.SERVER_HELLO: "ServerHello",
    MsgType.CERTIFICATE: "Certificate",
    MsgType.SERVER_KEY_EXCHANGE: "ServerKeyExchange",
    MsgType.CERTIFICATE_REQUEST: "CertificateRequest",
    MsgType.SERVER_HELLO_DONE: "ServerHelloDone",
    MsgType.CERTIFICATE_VERIFY: "CertificateVerify",
    MsgType.CLIENT_KEY_EXCHANGE: "ClientKeyExchange",
    MsgType.FINISHED: "Finished",
    MsgType.CHANGE_CIPHER_SPEC: "ChangeCipherSpec",
}


class HandshakeFailure(str, enum.Enum):
    SERVER_CHAIN_INVALID = "server-chain-invalid"
    SERVER_SIGNATURE_INVALID = "server-signature-invalid"
    CLIENT_CERT_REQUIRED = "client-cert-required-but-absent"
    CLIENT_CHAIN_INVALID = "client-chain-invalid"
    CERTIFICATE_VERIFY_FAILED = "certificate-verify-failed"
    FINISHED_MISMATCH = "finished-mismatch"
    PROTOCOL_ERROR = "protocol-error"


class HandshakeError(Exception):
    def __init__(self, reason: HandshakeFailure, detail: str = "",
                 transcript: Optional["HandshakeTranscript"] = None):
        super().__init__(reason.value + (": " + detail if detail else ""))
        self.reason = reason
        self.detail = detail
        self.transcript = transcript


class IntegrityError(Exception):
    pass


@dataclass(frozen=True)
class HandshakeMessage:
    msg_type: MsgType
    body: bytes
    sender: str  # "client" | "server"
    cleartext: bool = True

    @property
    def name(self) -> str:
        return _NAMES[self.msg_type]

    def encode(self) -> bytes:
        return bytes([self.msg_type]) + len(self.body).to_bytes(3, "big") + self.body

    @classmethod
    def decode(cls, data: bytes, sender: str, cleartext: bool = True) -> "HandshakeMessage":
        if len(data) < 4:
            raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "short handshake message")
        try:
            mtype = MsgType(data[0])
        except ValueError:
            raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR,
                                 "unknown message type %d" % data[0]) from None
        n = int.from_bytes(data[1:4], "big")
        if len(data) != 4 + n:
            raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "length mismatch")
        return cls(mtype, data[4:], sender, cleartext)


@dataclass
class HandshakeTranscript:
    entries: list[HandshakeMessage] = field(default_factory=list)

    def append(self, msg: HandshakeMessage):
        self.entries.append(msg)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self) -> list[str]:
        return ["%s:%s" % (m.sender, m.name) for m in self.entries]

    def wire_bytes(self) -> int:
        return sum(len(m.encode()) for m in self.entries)


def transcript_hash(messages: Iterable) -> bytes:
    """SHA-256 over the concatenated encodings, in order.

    Accepts :class:`HandshakeMessage` objects or raw byte strings.
    """
    h = hashlib.sha256()
    for m in messages:
        h.update(m.encode() if isinstance(m, HandshakeMessage) else bytes(m))
    return h.digest()


@dataclass
class ChannelConfig:
    """One side's handshake settings.

    Servers set ``chain``/``signing_key`` and optionally
    ``require_client_cert`` and ``trusted_roots`` (for client chains).
    Clients set ``trusted_roots`` and, for mutual authentication,
    ``chain``/``signing_key``.
    """
    chain: Optional[CertChain] = None
    signing_key: Optional[SigningKey] = None
    trusted_roots: Sequence[Certificate] = ()
    require_client_cert: bool = False
    server_name: Optional[str] = None
    nonce_source: Optional[NonceSource] = None
    # server side: called with the verified client subject during the handshake
    on_client_identity: Optional[Callable[[str], None]] = None

    def nonce(self, n: int) -> bytes:
        return (self.nonce_source or os.urandom)(n)


@dataclass
class ChannelMetrics:
    handshake_bytes: int = 0
    cleartext_identity_exposed: bool = False
    messages_exchanged: int = 0


def exposure_report(transcript: HandshakeTranscript) -> ChannelMetrics:
    exposed = any(
        m.cleartext and m.sender == "client" and m.msg_type is MsgType.CERTIFICATE
        and _cert_count(m.body) > 0
        for m in transcript
    )
    return ChannelMetrics(
        handshake_bytes=transcript.wire_bytes(),
        cleartext_identity_exposed=exposed,
        messages_exchanged=len(transcript),
    )


# -- record layer ----------------------------------------------------------

TAG_LEN = 32


class EstablishedChannel:
    """One endpoint of a completed handshake."""

    def __init__(self, role: str, session_key: bytes, peer_identity: Optional[str],
                 transcript: HandshakeTranscript):
        self.role = role
        self.session_key = session_key
        self.peer_identity = peer_identity
        self.transcript = transcript
        self.metrics = exposure_report(transcript)
        self._send_seq = 0
        self._recv_seq = 0

    def _keys(self, direction: str) -> tuple[bytes, bytes]:
        enc = hmac.new(self.session_key, b"enc " + direction.encode(), hashlib.sha256).digest()
        mac = hmac.new(self.session_key, b"mac " + direction.encode(), hashlib.sha256).digest()
        return enc, mac

    def send(self, payload: bytes) -> bytes:
        direction = "c2s" if self.role == "client" else "s2c"
        frame = _seal(self._keys(direction), self._send_seq, bytes(payload))
        self._send_seq += 1
        return frame

    def recv(self, frame: bytes) -> bytes:
        direction = "s2c" if self.role == "client" else "c2s"
        payload = _open(self._keys(direction), self._recv_seq, bytes(frame))
        self._recv_seq += 1
        return payload


def _keystream(key: bytes, seq: int, n: int) -> bytes:
    out = bytearray()
    block = 0
    while len(out) < n:
        out += hashlib.sha256(key + struct.pack(">QI", seq, block)).digest()
        block += 1
    return bytes(out[:n])


def _seal(keys, seq: int, payload: bytes) -> bytes:
    enc, mac = keys
    ct = bytes(a ^ b for a, b in zip(payload, _keystream(enc, seq, len(payload))))
    head = struct.pack(">QI", seq, len(ct))
    return head + ct + hmac.new(mac, head + ct, hashlib.sha256).digest()


def _open(keys, seq: int, frame: bytes) -> bytes:
    enc, mac = keys
    if len(frame) < 12 + TAG_LEN:
        raise IntegrityError("frame too short")
    head, ct, tag = frame[:12], frame[12:-TAG_LEN], frame[-TAG_LEN:]
    if not hmac.compare_digest(tag, hmac.new(mac, head + ct, hashlib.sha256).digest()):
        raise IntegrityError("integrity check failed")
    got_seq, n = struct.unpack(">QI", head)
    if got_seq != seq or n != len(ct):
        raise IntegrityError("unexpected sequence number %d (wanted %d)" % (got_seq, seq))
    return bytes(a ^ b for a, b in zip(ct, _keystream(enc, seq, n)))


class PlainChannel:
    """Unprotected baseline: frames are the payload bytes themselves."""

    role = "client"
    session_key = b""
    peer_identity = None

    def __init__(self, role: str = "client"):
        self.role = role
        self.transcript = HandshakeTranscript()
        self.metrics = ChannelMetrics()

    def send(self, payload: bytes) -> bytes:
        return bytes(payload)

    def recv(self, frame: bytes) -> bytes:
        return bytes(frame)


# -- message bodies --------------------------------------------------------

def _cert_body(chain: Optional[CertChain]) -> bytes:
    certs = list(chain) if chain is not None else []
    out = bytearray([len(certs)])
    for c in certs:
        enc = c.encode()
        out += len(enc).to_bytes(3, "big") + enc
    return bytes(out)


def _cert_count(body: bytes) -> int:
    return body[0] if body else 0


def _parse_cert_body(body: bytes) -> list[Certificate]:
    if not body:
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "empty Certificate body")
    count, off, certs = body[0], 1, []
    try:
        for _ in range(count):
            n = int.from_bytes(body[off:off + 3], "big")
            off += 3
            if off + n > len(body):
                raise PkiError("truncated certificate")
            certs.append(Certificate.decode(body[off:off + n]))
            off += n
    except PkiError as exc:
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, str(exc)) from None
    if off != len(body):
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "trailing certificate bytes")
    return certs


def _lp2(b: bytes) -> bytes:
    return struct.pack(">H", len(b)) + b


def _split_lp2(body: bytes) -> list[bytes]:
    parts, off = [], 0
    while off < len(body):
        if off + 2 > len(body):
            raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "truncated field")
        n = struct.unpack_from(">H", body, off)[0]
        off += 2
        if off + n > len(body):
            raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "truncated field")
        parts.append(body[off:off + n])
        off += n
    return parts


def _ephemeral(cfg: ChannelConfig) -> ec.EllipticCurvePrivateKey:
    scalar = int.from_bytes(cfg.nonce(40), "big") % (_P256_ORDER - 1) + 1
    return ec.derive_private_key(scalar, ec.SECP256R1())


def _point(key) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.X962,
                                         serialization.PublicFormat.UncompressedPoint)


def _shared(priv, peer_point: bytes) -> bytes:
    try:
        peer = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), peer_point)
    except ValueError as exc:
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "bad ECDH point") from exc
    return priv.exchange(ec.ECDH(), peer)


def _master(premaster: bytes, client_random: bytes, server_random: bytes) -> bytes:
    return hmac.new(premaster, b"master secret" + client_random + server_random,
                    hashlib.sha256).digest()


def _finished(key: bytes, label: bytes, seen: list) -> bytes:
    return hmac.new(key, label + transcript_hash(seen), hashlib.sha256).digest()


def _expect(msg: Optional[HandshakeMessage], *types: MsgType) -> HandshakeMessage:
    if msg is None or msg.msg_type not in types:
        got = "nothing" if msg is None else msg.name
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR,
                             "expected %s, got %s" % ("/".join(_NAMES[t] for t in types), got))
    return msg


_SideGen = Generator[Optional[HandshakeMessage], Optional[HandshakeMessage], EstablishedChannel]


def client_side(cfg: ChannelConfig, now: int) -> _SideGen:
    seen: list[HandshakeMessage] = []
    transcript = HandshakeTranscript()

    def out(mtype, body, cleartext=True):
        m = HandshakeMessage(mtype, body, "client", cleartext)
        seen.append(m)
        transcript.append(m)
        return m

    def recv(msg):
        seen.append(msg)
        transcript.append(msg)
        return msg

    client_random = cfg.nonce(32)
    eph = _ephemeral(cfg)
    yield out(MsgType.CLIENT_HELLO, client_random)

    server_random = recv(_expect((yield None), MsgType.SERVER_HELLO)).body
    if len(server_random) != 32:
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "bad server random", transcript)
    server_certs = _parse_cert_body(recv(_expect((yield None), MsgType.CERTIFICATE)).body)
    if not server_certs:
        raise HandshakeError(HandshakeFailure.SERVER_CHAIN_INVALID, "empty chain", transcript)
    try:
        server_chain = CertChain(server_certs)
        verify_chain(list(cfg.trusted_roots), server_chain, now)
    except (ChainInvalid, PkiError) as exc:
        raise HandshakeError(HandshakeFailure.SERVER_CHAIN_INVALID, str(exc), transcript) from None
    if cfg.server_name is not None and server_chain.leaf.subject != cfg.server_name:
        raise HandshakeError(HandshakeFailure.SERVER_CHAIN_INVALID,
                             "leaf %r is not %r" % (server_chain.leaf.subject, cfg.server_name),
                             transcript)

    ske = recv(_expect((yield None), MsgType.SERVER_KEY_EXCHANGE))
    parts = _split_lp2(ske.body)
    if len(parts) != 2:
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "bad ServerKeyExchange", transcript)
    server_point, server_sig = parts
    if not verify_bytes(client_random + server_random + server_point, server_sig,
                        server_chain.leaf.public_key):
        raise HandshakeError(HandshakeFailure.SERVER_SIGNATURE_INVALID, "", transcript)

    msg = recv(_expect((yield None), MsgType.CERTIFICATE_REQUEST, MsgType.SERVER_HELLO_DONE))
    requested = msg.msg_type is MsgType.CERTIFICATE_REQUEST
    if requested:
        recv(_expect((yield None), MsgType.SERVER_HELLO_DONE))
        send_chain = cfg.chain if cfg.signing_key is not None else None
        yield out(MsgType.CERTIFICATE, _cert_body(send_chain))
    premaster = _shared(eph, server_point)
    yield out(MsgType.CLIENT_KEY_EXCHANGE, _lp2(_point(eph)))
    if requested and cfg.chain is not None and cfg.signing_key is not None:
        yield out(MsgType.CERTIFICATE_VERIFY,
                  _lp2(sign_bytes(transcript_hash(seen), cfg.signing_key)))
    key = _master(premaster, client_random, server_random)
    yield out(MsgType.CHANGE_CIPHER_SPEC, b"\x01")
    yield out(MsgType.FINISHED, _finished(key, b"client finished", seen), cleartext=False)

    recv(_expect((yield None), MsgType.CHANGE_CIPHER_SPEC))
    expected = _finished(key, b"server finished", seen)
    fin = recv(_expect((yield None), MsgType.FINISHED))
    if not hmac.compare_digest(fin.body, expected):
        raise HandshakeError(HandshakeFailure.FINISHED_MISMATCH, "server Finished", transcript)
    return EstablishedChannel("client", key, server_chain.leaf.subject, transcript)


def server_side(cfg: ChannelConfig, now: int) -> _SideGen:
    if cfg.chain is None or cfg.signing_key is None:
        raise ValueError("server needs a certificate chain and signing key")
    seen: list[HandshakeMessage] = []
    transcript = HandshakeTranscript()

    def out(mtype, body, cleartext=True):
        m = HandshakeMessage(mtype, body, "server", cleartext)
        seen.append(m)
        transcript.append(m)
        return m

    def recv(msg):
        seen.append(msg)
        transcript.append(msg)
        return msg

    hello = recv(_expect((yield None), MsgType.CLIENT_HELLO))
    client_random = hello.body
    if len(client_random) != 32:
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "bad client random", transcript)
    server_random = cfg.nonce(32)
    eph = _ephemeral(cfg)
    point = _point(eph)
    yield out(MsgType.SERVER_HELLO, server_random)
    yield out(MsgType.CERTIFICATE, _cert_body(cfg.chain))
    sig = sign_bytes(client_random + server_random + point, cfg.signing_key)
    yield out(MsgType.SERVER_KEY_EXCHANGE, _lp2(point) + _lp2(sig))
    if cfg.require_client_cert:
        yield out(MsgType.CERTIFICATE_REQUEST, b"")
    yield out(MsgType.SERVER_HELLO_DONE, b"")

    peer_identity = None
    client_chain = None
    if cfg.require_client_cert:
        certs = _parse_cert_body(recv(_expect((yield None), MsgType.CERTIFICATE)).body)
        if not certs:
            raise HandshakeError(HandshakeFailure.CLIENT_CERT_REQUIRED, "", transcript)
        try:
            client_chain = CertChain(certs)
            verify_chain(list(cfg.trusted_roots), client_chain, now)
        except (ChainInvalid, PkiError) as exc:
            raise HandshakeError(HandshakeFailure.CLIENT_CHAIN_INVALID, str(exc),
                                 transcript) from None

    cke = recv(_expect((yield None), MsgType.CLIENT_KEY_EXCHANGE))
    parts = _split_lp2(cke.body)
    if len(parts) != 1:
        raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "bad ClientKeyExchange", transcript)
    premaster = _shared(eph, parts[0])

    if client_chain is not None:
        digest = transcript_hash(seen)
        cv = recv(_expect((yield None), MsgType.CERTIFICATE_VERIFY))
        cv_parts = _split_lp2(cv.body)
        if len(cv_parts) != 1 or not verify_bytes(digest, cv_parts[0],
                                                  client_chain.leaf.public_key):
            raise HandshakeError(HandshakeFailure.CERTIFICATE_VERIFY_FAILED, "", transcript)
        peer_identity = client_chain.leaf.subject
        if cfg.on_client_identity is not None:
            cfg.on_client_identity(peer_identity)

    key = _master(premaster, client_random, server_random)
    recv(_expect((yield None), MsgType.CHANGE_CIPHER_SPEC))
    expected = _finished(key, b"client finished", seen)
    fin = recv(_expect((yield None), MsgType.FINISHED))
    if not hmac.compare_digest(fin.body, expected):
        raise HandshakeError(HandshakeFailure.FINISHED_MISMATCH, "client Finished", transcript)
    yield out(MsgType.CHANGE_CIPHER_SPEC, b"\x01")
    yield out(MsgType.FINISHED, _finished(key, b"server finished", seen), cleartext=False)
    return EstablishedChannel("server", key, peer_identity, transcript)


class _Party:
    def __init__(self, gen: _SideGen, sender: str):
        self.gen = gen
        self.sender = sender
        self.inbox: deque = deque()
        self.started = False
        self.waiting = False
        self.result: Optional[EstablishedChannel] = None

    @property
    def done(self) -> bool:
        return self.result is not None

    def advance(self, outbox: deque) -> bool:
        """Run until blocked; return True if anything happened."""
        if self.done:
            return False
        progressed = False
        try:
            while True:
                if not self.started:
                    value = next(self.gen)
                    self.started = True
                elif self.waiting:
                    if not self.inbox:
                        return progressed
                    self.waiting = False
                    value = self.gen.send(self.inbox.popleft())
                else:
                    value = self.gen.send(None)
                progressed = True
                if value is None:
                    self.waiting = True
                else:
                    outbox.append(value)
        except StopIteration as stop:
            self.result = stop.value
            return True


Tamper = Callable[[HandshakeMessage], HandshakeMessage]


def handshake(client_cfg: ChannelConfig, server_cfg: ChannelConfig, now: int,
              tamper: Optional[Tamper] = None, client_now: Optional[int] = None,
              ) -> tuple[EstablishedChannel, EstablishedChannel]:
    """Run both sides in-process.

    ``client_now`` lets the client check the server chain against its own
    (possibly skewed) clock.  ``tamper`` sees every message in flight and
    may replace it.  The transcript attached to a :class:`HandshakeError`
    is the wire view.
    """
    client = _Party(client_side(client_cfg, now if client_now is None else client_now),
                    "client")
    server = _Party(server_side(server_cfg, now), "server")
    wire = HandshakeTranscript()
    to_server, to_client = deque(), deque()
    try:
        while not (client.done and server.done):
            moved = client.advance(to_server)
            moved |= server.advance(to_client)
            for q, party in ((to_server, server), (to_client, client)):
                while q:
                    m = q.popleft()
                    if tamper is not None:
                        m = tamper(m)
                    wire.append(m)
                    party.inbox.append(m)
                    moved = True
            if not moved:
                raise HandshakeError(HandshakeFailure.PROTOCOL_ERROR, "handshake stalled")
    except HandshakeError as exc:
        exc.transcript = wire
        raise
    return client.result, server.result
