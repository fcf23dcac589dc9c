"""MQTT 3.1.1 wire codec for the packet subset used here, plus topic matching.

Only QoS 0 publishing is supported.  CONNECT packets never carry a will;
the clean-session bit is always written.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Union

MAX_REMAINING_LENGTH = 268435455


class EncodeError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class UnderflowDecodeError(DecodeError):
    """Input ended before the packet did."""


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    SUBSCRIBE = 8
    SUBACK = 9
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


class ConnackCode(IntEnum):
    ACCEPTED = 0
    UNACCEPTABLE_PROTOCOL = 1
    IDENTIFIER_REJECTED = 2
    SERVER_UNAVAILABLE = 3
    BAD_USERNAME_PASSWORD = 4
    NOT_AUTHORIZED = 5


# -- packets ---------------------------------------------------------------

@dataclass(frozen=True)
class Connect:
    client_id: str
    username: Optional[str] = None
    password: Optional[bytes] = None
    keep_alive: int = 60
    clean_session: bool = True

    packet_type = PacketType.CONNECT


@dataclass(frozen=True)
class Connack:
    return_code: int = 0
    session_present: bool = False

    packet_type = PacketType.CONNACK


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""

    packet_type = PacketType.PUBLISH


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    filters: tuple[tuple[str, int], ...] = field(default_factory=tuple)

    packet_type = PacketType.SUBSCRIBE

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple((f, int(q)) for f, q in self.filters))


@dataclass(frozen=True)
class Suback:
    packet_id: int
    return_codes: tuple[int, ...] = field(default_factory=tuple)

    packet_type = PacketType.SUBACK

    def __post_init__(self):
        object.__setattr__(self, "return_codes", tuple(self.return_codes))


@dataclass(frozen=True)
class Pingreq:
    packet_type = PacketType.PINGREQ


@dataclass(frozen=True)
class Pingresp:
    packet_type = PacketType.PINGRESP


@dataclass(frozen=True)
class Disconnect:
    packet_type = PacketType.DISCONNECT


MqttPacket = Union[Connect, Connack, Publish, Subscribe, Suback, Pingreq, Pingresp, Disconnect]


# -- remaining length ------------------------------------------------------

def encode_remaining_length(n: int) -> bytes:
    if not 0 <= n <= MAX_REMAINING_LENGTH:
        raise EncodeError("remaining length %d out of range" % n)
    out = bytearray()
    while True:
        n, digit = divmod(n, 128)
        if n:
            out.append(digit | 0x80)
        else:
            out.append(digit)
            return bytes(out)


def decode_remaining_length(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Return ``(value, bytes consumed)``."""
    value = 0
    for i in range(4):
        if offset + i >= len(data):
            raise UnderflowDecodeError("truncated remaining length")
        b = data[offset + i]
        value += (b & 0x7F) << (7 * i)
        if not b & 0x80:
            if i and b == 0:
                raise DecodeError("non-minimal remaining length")
            return value, i + 1
    raise DecodeError("remaining length exceeds 4 bytes")


# -- field helpers ---------------------------------------------------------

def _utf8(s: str) -> bytes:
    try:
        raw = s.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodeError(str(exc)) from exc
    if "\x00" in s:
        raise EncodeError("null character in string")
    return _binary(raw)


def _binary(b: bytes) -> bytes:
    if len(b) > 0xFFFF:
        raise EncodeError("field longer than 65535 bytes")
    return struct.pack(">H", len(b)) + b


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise DecodeError("field overruns remaining length")
        chunk = self.body[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def binary(self) -> bytes:
        return self.take(self.u16())

    def utf8(self) -> str:
        raw = self.binary()
        try:
            s = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid UTF-8: %s" % exc) from exc
        if "\x00" in s:
            raise DecodeError("null character in string")
        return s

    def rest(self) -> bytes:
        return self.take(len(self.body) - self.pos)

    def done(self):
        if self.pos != len(self.body):
            raise DecodeError("%d trailing bytes" % (len(self.body) - self.pos))


# -- topics ----------------------------------------------------------------

def validate_topic(topic: str) -> None:
    if not topic:
        raise EncodeError("empty topic")
    if "+" in topic or "#" in topic:
        raise EncodeError("wildcard in topic name %r" % topic)


def validate_filter(topic_filter: str) -> None:
    if not topic_filter:
        raise EncodeError("empty topic filter")
    levels = topic_filter.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            raise EncodeError("'#' must be a whole, final level in %r" % topic_filter)
        if "+" in level and level != "+":
            raise EncodeError("'+' must occupy a whole level in %r" % topic_filter)


def topic_matches(topic_filter: str, topic: str) -> bool:
    flevels = topic_filter.split("/")
    tlevels = topic.split("/")
    for i, f in enumerate(flevels):
        if f == "#":
            return True
        if i >= len(tlevels):
            return False
        if f != "+" and f != tlevels[i]:
            return False
    return len(flevels) == len(tlevels)


def filter_covers(outer: str, inner: str) -> bool:
    """True when every topic matched by ``inner`` is also matched by ``outer``."""
    olevels = outer.split("/")
    ilevels = inner.split("/")
    for i, o in enumerate(olevels):
        if o == "#":
            return True
        if i >= len(ilevels):
            return False
        n = ilevels[i]
        if n == "#":
            return False
        if o == "+":
            continue
        if n == "+" or n != o:
            return False
    return len(olevels) == len(ilevels)


# -- encode ----------------------------------------------------------------

def encode_packet(p: MqttPacket) -> bytes:
    flags = 0
    if isinstance(p, Connect):
        if not p.client_id:
            raise EncodeError("empty client_id")
        cflags = 0x02 if p.clean_session else 0
        if p.username is not None:
            cflags |= 0x80
        if p.password is not None:
            cflags |= 0x40
        if not 0 <= p.keep_alive <= 0xFFFF:
            raise EncodeError("keep_alive out of range")
        body = (_utf8("MQTT") + bytes([4, cflags]) + struct.pack(">H", p.keep_alive)
                + _utf8(p.client_id))
        if p.username is not None:
            body += _utf8(p.username)
        if p.password is not None:
            body += _binary(bytes(p.password))
    elif isinstance(p, Connack):
        if not 0 <= p.return_code <= 5:
            raise EncodeError("connack code %d out of range" % p.return_code)
        if p.session_present and p.return_code:
            raise EncodeError("session_present with a refusal code")
        body = bytes([1 if p.session_present else 0, p.return_code])
    elif isinstance(p, Publish):
        validate_topic(p.topic)
        body = _utf8(p.topic) + bytes(p.payload)
    elif isinstance(p, Subscribe):
        flags = 0x2
        if not p.filters:
            raise EncodeError("subscribe without filters")
        body = _packet_id(p.packet_id)
        for f, qos in p.filters:
            validate_filter(f)
            if qos not in (0, 1, 2):
                raise EncodeError("bad requested qos %r" % qos)
            body += _utf8(f) + bytes([qos])
    elif isinstance(p, Suback):
        if not p.return_codes:
            raise EncodeError("suback without return codes")
        for rc in p.return_codes:
            if rc not in (0, 1, 2, 0x80):
                raise EncodeError("bad suback code %r" % rc)
        body = _packet_id(p.packet_id) + bytes(p.return_codes)
    elif isinstance(p, (Pingreq, Pingresp, Disconnect)):
        body = b""
    else:
        raise EncodeError("unsupported packet %r" % (p,))
    return (bytes([(p.packet_type << 4) | flags]) + encode_remaining_length(len(body))
            + body)


def _packet_id(pid: int) -> bytes:
    if not 1 <= pid <= 0xFFFF:
        raise EncodeError("packet id %r out of range" % pid)
    return struct.pack(">H", pid)


# -- decode ----------------------------------------------------------------

_EXPECTED_FLAGS = {t: 0 for t in PacketType}
_EXPECTED_FLAGS[PacketType.SUBSCRIBE] = 0x2


def read_packet(data: bytes, offset: int = 0) -> Optional[tuple[MqttPacket, int]]:
    """Decode one packet from a stream buffer.

    Returns ``(packet, bytes consumed)`` or None when ``data`` does not yet
    hold a complete packet.
    """
    if len(data) - offset < 2:
        return None
    try:
        length, n = decode_remaining_length(data, offset + 1)
    except UnderflowDecodeError:
        return None
    end = offset + 1 + n + length
    if end > len(data):
        return None
    return _decode_body(data[offset], data[offset + 1 + n:end]), end - offset


def decode_packet(data: bytes) -> MqttPacket:
    """Decode exactly one packet occupying all of ``data``."""
    data = bytes(data)
    if len(data) < 2:
        raise UnderflowDecodeError("packet shorter than a fixed header")
    length, n = decode_remaining_length(data, 1)
    if 1 + n + length > len(data):
        raise UnderflowDecodeError("truncated packet")
    if 1 + n + length < len(data):
        raise DecodeError("bytes beyond remaining length")
    return _decode_body(data[0], data[1 + n:])


def _decode_body(first: int, body: bytes) -> MqttPacket:
    try:
        ptype = PacketType(first >> 4)
    except ValueError:
        raise DecodeError("unsupported packet type %d" % (first >> 4)) from None
    flags = first & 0x0F
    if flags != _EXPECTED_FLAGS[ptype]:
        raise DecodeError("reserved flags 0x%x misused for %s" % (flags, ptype.name))
    r = _Reader(body)
    if ptype is PacketType.CONNECT:
        if r.utf8() != "MQTT":
            raise DecodeError("bad protocol name")
        if r.u8() != 4:
            raise DecodeError("unsupported protocol level")
        cflags = r.u8()
        if cflags & 0x01:
            raise DecodeError("reserved connect flag set")
        if cflags & 0x3C:
            raise DecodeError("will messages are not supported")
        keep_alive = r.u16()
        client_id = r.utf8()
        if not client_id:
            raise DecodeError("empty client_id")
        username = r.utf8() if cflags & 0x80 else None
        password = r.binary() if cflags & 0x40 else None
        r.done()
        return Connect(client_id, username, password, keep_alive, bool(cflags & 0x02))
    if ptype is PacketType.CONNACK:
        ack = r.u8()
        code = r.u8()
        r.done()
        if ack & 0xFE:
            raise DecodeError("reserved connack bits set")
        if code > 5:
            raise DecodeError("connack code %d out of range" % code)
        return Connack(code, bool(ack & 1))
    if ptype is PacketType.PUBLISH:
        topic = r.utf8()
        if not topic or "+" in topic or "#" in topic:
            raise DecodeError("invalid publish topic %r" % topic)
        return Publish(topic, r.rest())
    if ptype is PacketType.SUBSCRIBE:
        pid = r.u16()
        filters = []
        while r.pos < len(body):
            f = r.utf8()
            qos = r.u8()
            if qos > 2:
                raise DecodeError("bad requested qos")
            try:
                validate_filter(f)
            except EncodeError as exc:
                raise DecodeError(str(exc)) from None
            filters.append((f, qos))
        if not filters or pid == 0:
            raise DecodeError("malformed subscribe")
        return Subscribe(pid, tuple(filters))
    if ptype is PacketType.SUBACK:
        pid = r.u16()
        codes = tuple(r.rest())
        if not codes or any(c not in (0, 1, 2, 0x80) for c in codes):
            raise DecodeError("malformed suback")
        return Suback(pid, codes)
    r.done()
    return {PacketType.PINGREQ: Pingreq, PacketType.PINGRESP: Pingresp,
            PacketType.DISCONNECT: Disconnect}[ptype]()
