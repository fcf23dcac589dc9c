"""Byte transports between device clients and the broker.

:class:`InProcessEndpoint` wires clients to a :class:`~mqttauth.broker.Broker`
through in-memory duplex pipes; it is what the simulated harness uses.
:func:`serve_tcp` and :class:`TcpEndpoint` run the same handshake and
framing over real sockets (wall-clock only).

Every link keeps a plaintext trace of the MQTT frames it carried, captured
before record protection, as ``(direction, bytes)`` with direction 0 for
client-to-broker and 1 for broker-to-client.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from collections import deque
from typing import Callable, Optional, Union

from . import codec
from .broker import Broker, Connection
from .channel import (
    ChannelConfig,
    EstablishedChannel,
    HandshakeError,
    HandshakeMessage,
    IntegrityError,
    PlainChannel,
    client_side,
    handshake,
    server_side,
)
from .codec import MqttPacket

log = logging.getLogger(__name__)

C2S, S2C = 0, 1
PLAINTEXT_PORT = 1883
SECURE_PORT = 8883

Channel = Union[EstablishedChannel, PlainChannel]


class LinkClosed(Exception):
    pass


class Link:
    """Client end of one connection."""

    def __init__(self, channel: Channel):
        self.channel = channel
        self.inbox: deque[MqttPacket] = deque()
        self.trace: list[tuple[int, bytes]] = []
        self.closed = False

    def send(self, packet: MqttPacket):
        raise NotImplementedError

    def drain(self) -> list[MqttPacket]:
        out = list(self.inbox)
        self.inbox.clear()
        return out

    def close(self):
        self.closed = True


class _PipeLink(Link):
    def __init__(self, endpoint: "InProcessEndpoint", conn: Connection,
                 client_chan: Channel, server_chan: Channel):
        super().__init__(client_chan)
        self.endpoint = endpoint
        self.conn = conn
        self.server_channel = server_chan
        self._rx = b""
        conn.on_close = lambda _c: self._peer_closed()

    def _peer_closed(self):
        self.closed = True

    def send(self, packet: MqttPacket):
        if self.closed:
            raise LinkClosed("link closed")
        raw = codec.encode_packet(packet)
        self.trace.append((C2S, raw))
        frame = self.channel.send(raw)
        self.endpoint._from_client(self, frame)

    def _push(self, raw: bytes):
        """Broker to client: seal on the server side, open on the client side."""
        frame = self.server_channel.send(raw)
        try:
            plain = self.channel.recv(frame)
        except IntegrityError:
            self.closed = True
            return
        self.trace.append((S2C, plain))
        self._rx += plain
        while True:
            got = codec.read_packet(self._rx)
            if got is None:
                break
            pkt, used = got
            self._rx = self._rx[used:]
            self.inbox.append(pkt)

    def close(self):
        if not self.closed:
            self.closed = True
            self.endpoint.broker.close(self.conn, "transport-closed")


class InProcessEndpoint:
    """Connects clients to one broker listener through in-memory pipes.

    ``clock`` returns the broker's notion of now (true time).
    ``server_channel`` is required for secure listeners.
    """

    def __init__(self, broker: Broker, listener: str, clock: Callable[[], float],
                 server_channel: Optional[ChannelConfig] = None):
        self.broker = broker
        self.listener = broker.listeners[listener]
        self.clock = clock
        self.server_channel = server_channel
        if self.listener.secure and server_channel is None:
            raise ValueError("secure listener %r needs a server channel config" % listener)
        self.links: dict[int, _PipeLink] = {}

    def open(self, client_channel: Optional[ChannelConfig], client_now: Optional[float] = None
             ) -> Link:
        """Connect a client; raises :class:`HandshakeError` on failure."""
        now = self.clock()
        conn = self.broker.accept(self.listener.name)
        if not self.listener.secure:
            link = _PipeLink(self, conn, PlainChannel("client"), PlainChannel("server"))
        else:
            cfg = _server_cfg_for(self.server_channel, self.listener.requires_client_cert,
                                  lambda subject: self.broker.on_client_certificate(
                                      conn, subject, now))
            ccfg = client_channel if client_channel is not None else ChannelConfig()
            try:
                c_end, s_end = handshake(ccfg, cfg, int(now),
                                         client_now=None if client_now is None else int(client_now))
            except HandshakeError as exc:
                self.broker.handshake_failed(conn, exc.reason.value, now)
                raise
            link = _PipeLink(self, conn, c_end, s_end)
        self.links[conn.id] = link
        return link

    def _from_client(self, link: _PipeLink, frame: bytes):
        try:
            raw = link.server_channel.recv(frame)
        except IntegrityError:
            self.broker.close(link.conn, "integrity-failure")
            return
        deliveries = self.broker.handle_bytes(link.conn, raw, self.clock())
        self.dispatch(deliveries)

    def dispatch(self, deliveries):
        for target, pkt in deliveries:
            tl = self.links.get(target.id)
            if tl is None:
                continue
            tl._push(codec.encode_packet(pkt))


def _server_cfg_for(base: ChannelConfig, require: bool, hook) -> ChannelConfig:
    from dataclasses import replace
    return replace(base, require_client_cert=require, on_client_identity=hook)


class MultiEndpoint:
    """Routes deliveries across several in-process endpoints of one broker."""

    def __init__(self, endpoints):
        self.endpoints = list(endpoints)
        for ep in self.endpoints:
            ep.dispatch = self.dispatch

    def dispatch(self, deliveries):
        for target, pkt in deliveries:
            for ep in self.endpoints:
                link = ep.links.get(target.id)
                if link is not None:
                    link._push(codec.encode_packet(pkt))
                    break


# -- trace files -----------------------------------------------------------

def write_trace(path, frames):
    with open(path, "wb") as fh:
        for direction, data in frames:
            fh.write(struct.pack(">BI", direction, len(data)) + bytes(data))


def read_trace(path) -> list[tuple[int, bytes]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    frames, off = [], 0
    while off < len(blob):
        if off + 5 > len(blob):
            raise ValueError("truncated frame header at offset %d" % off)
        direction, n = struct.unpack_from(">BI", blob, off)
        off += 5
        if off + n > len(blob):
            raise ValueError("truncated frame at offset %d" % off)
        frames.append((direction, blob[off:off + n]))
        off += n
    return frames


# -- TCP -------------------------------------------------------------------
# Records on the socket: 1-byte kind, 4-byte length, body.  Kind 22 carries
# a handshake message in the clear, 23 a sealed application frame.

_HS, _APP = 22, 23


def _send_record(sock: socket.socket, kind: int, body: bytes):
    sock.sendall(struct.pack(">BI", kind, len(body)) + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise LinkClosed("peer closed")
        buf += chunk
    return buf


def _recv_record(sock: socket.socket) -> tuple[int, bytes]:
    kind, n = struct.unpack(">BI", _recv_exact(sock, 5))
    return kind, _recv_exact(sock, n)


def _run_side(gen, sock: socket.socket, peer: str):
    """Drive one handshake generator over a socket."""
    try:
        value = next(gen)
        while True:
            if value is None:
                kind, body = _recv_record(sock)
                if kind != _HS:
                    raise LinkClosed("unexpected record kind %d" % kind)
                value = gen.send(HandshakeMessage.decode(body, peer, body[0] != 20))
            else:
                _send_record(sock, _HS, value.encode())
                value = next(gen)
    except StopIteration as stop:
        return stop.value


class TcpLink(Link):
    def __init__(self, sock: socket.socket, channel: Channel):
        super().__init__(channel)
        self.sock = sock
        self._lock = threading.Lock()
        self._rx = b""
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def send(self, packet: MqttPacket):
        if self.closed:
            raise LinkClosed("link closed")
        raw = codec.encode_packet(packet)
        self.trace.append((C2S, raw))
        try:
            _send_record(self.sock, _APP, self.channel.send(raw))
        except OSError as exc:
            self.closed = True
            raise LinkClosed(str(exc)) from exc

    def _read_loop(self):
        try:
            while True:
                kind, body = _recv_record(self.sock)
                plain = self.channel.recv(body)
                self.trace.append((S2C, plain))
                self._rx += plain
                while True:
                    got = codec.read_packet(self._rx)
                    if got is None:
                        break
                    pkt, used = got
                    self._rx = self._rx[used:]
                    with self._lock:
                        self.inbox.append(pkt)
        except (LinkClosed, OSError, IntegrityError, codec.DecodeError):
            self.closed = True

    def drain(self) -> list[MqttPacket]:
        with self._lock:
            return super().drain()

    def close(self):
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass


class TcpEndpoint:
    def __init__(self, host: str, port: int, secure: bool = True):
        self.host = host
        self.port = port
        self.secure = secure

    def open(self, client_channel: Optional[ChannelConfig], client_now=None) -> Link:
        sock = socket.create_connection((self.host, self.port), timeout=10)
        sock.settimeout(None)
        if not self.secure:
            return TcpLink(sock, PlainChannel("client"))
        now = int(client_now if client_now is not None else time.time())
        try:
            chan = _run_side(client_side(client_channel or ChannelConfig(), now), sock, "server")
        except (HandshakeError, LinkClosed):
            sock.close()
            raise
        return TcpLink(sock, chan)


def serve_tcp(broker: Broker, listener: str, host: str = "127.0.0.1",
              port: Optional[int] = None, server_channel: Optional[ChannelConfig] = None,
              clock: Callable[[], float] = time.time, sweep_interval: float = 1.0):
    """Start a threaded TCP server for one listener; returns the server.

    Call ``shutdown()`` on the result to stop it.  Port 0 picks a free port
    (``server.server_address`` holds the real one).
    """
    lst = broker.listeners[listener]
    if port is None:
        port = lst.port
    if lst.secure and server_channel is None:
        raise ValueError("secure listener needs a server channel config")
    conns: dict[int, tuple[Connection, socket.socket, Channel, threading.Lock]] = {}

    def deliver(deliveries):
        for target, pkt in deliveries:
            entry = conns.get(target.id)
            if entry is None:
                continue
            _conn, sock, chan, lock = entry
            try:
                with lock:
                    _send_record(sock, _APP, chan.send(codec.encode_packet(pkt)))
            except OSError:
                broker.close(target, "transport-error")

    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            sock = self.request
            conn = broker.accept(listener)
            conn.on_close = lambda c: _shutdown(sock)
            now = clock()
            if lst.secure:
                cfg = _server_cfg_for(server_channel, lst.requires_client_cert,
                                      lambda subject: broker.on_client_certificate(conn, subject,
                                                                                   now))
                try:
                    chan = _run_side(server_side(cfg, int(now)), sock, "client")
                except HandshakeError as exc:
                    broker.handshake_failed(conn, exc.reason.value, clock())
                    return
                except LinkClosed:
                    broker.close(conn, "transport-closed")
                    return
            else:
                chan = PlainChannel("server")
            conns[conn.id] = (conn, sock, chan, threading.Lock())
            try:
                while not conn.closed:
                    kind, body = _recv_record(sock)
                    raw = chan.recv(body)
                    deliver(broker.handle_bytes(conn, raw, clock()))
            except (LinkClosed, OSError, IntegrityError):
                pass
            finally:
                broker.close(conn, "transport-closed")
                conns.pop(conn.id, None)

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    server = Server((host, port), Handler)
    stop = threading.Event()

    def sweeper():
        while not stop.wait(sweep_interval):
            broker.keep_alive_sweep(clock())

    threading.Thread(target=server.serve_forever, daemon=True).start()
    threading.Thread(target=sweeper, daemon=True).start()
    orig_shutdown = server.shutdown

    def shutdown():
        stop.set()
        orig_shutdown()
        server.server_close()

    server.shutdown = shutdown
    return server


def _shutdown(sock: socket.socket):
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
