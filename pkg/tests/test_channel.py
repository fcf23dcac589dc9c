import random
from dataclasses import replace

import pytest

from mqttauth.channel import (
    ChannelConfig,
    HandshakeError,
    HandshakeFailure,
    HandshakeMessage,
    IntegrityError,
    MsgType,
    PlainChannel,
    exposure_report,
    handshake,
)
from mqttauth.jws import Alg, generate_key_pair
from mqttauth.pki import CertChain, build_chain, issue, self_sign

V = (0, 10**9)
NOW = 10**6


@pytest.fixture(scope="module")
def pki():
    rng = random.Random(11)
    server_chain, server_keys, server_root, _ = build_chain(
        3, Alg.ES256, rng, leaf_subject="broker.local", validity=V, root_subject="srv-root")
    ca_keys = generate_key_pair(Alg.ES256, rng)
    ca = self_sign("device-ca", ca_keys, V)
    dev_keys = generate_key_pair(Alg.ES256, rng)
    dev = issue(ca, ca_keys.signing, "device-7", dev_keys.verification, V)
    return dict(server_chain=server_chain, server_keys=server_keys, server_root=server_root,
                ca=ca, ca_keys=ca_keys, dev_chain=CertChain([dev, ca]), dev_keys=dev_keys,
                rng=rng)


def server_cfg(pki, mutual=False, **kw):
    return ChannelConfig(chain=pki["server_chain"], signing_key=pki["server_keys"].signing,
                         trusted_roots=[pki["ca"]], require_client_cert=mutual,
                         nonce_source=random.Random(1).randbytes, **kw)


def client_cfg(pki, with_cert=False, **kw):
    if with_cert:
        kw.setdefault("chain", pki["dev_chain"])
        kw.setdefault("signing_key", pki["dev_keys"].signing)
    return ChannelConfig(trusted_roots=[pki["server_root"]], server_name="broker.local",
                         nonce_source=random.Random(2).randbytes, **kw)


def fails(client, server, **kw):
    with pytest.raises(HandshakeError) as info:
        handshake(client, server, NOW, **kw)
    return info.value


def test_server_auth_only(pki):
    c, s = handshake(client_cfg(pki), server_cfg(pki), NOW)
    assert c.session_key == s.session_key
    assert s.peer_identity is None and c.peer_identity == "broker.local"
    assert c.transcript.names() == [
        "client:ClientHello", "server:ServerHello", "server:Certificate",
        "server:ServerKeyExchange", "server:ServerHelloDone", "client:ClientKeyExchange",
        "client:ChangeCipherSpec", "client:Finished", "server:ChangeCipherSpec",
        "server:Finished"]
    assert not c.metrics.cleartext_identity_exposed


def test_mutual(pki):
    seen = []
    c, s = handshake(client_cfg(pki, True), server_cfg(pki, True, on_client_identity=seen.append),
                     NOW)
    assert s.peer_identity == "device-7" and seen == ["device-7"]
    assert c.metrics.cleartext_identity_exposed and s.metrics.cleartext_identity_exposed
    assert "client:CertificateVerify" in c.transcript.names()
    assert c.metrics.handshake_bytes == s.metrics.handshake_bytes == c.transcript.wire_bytes()


def test_both_sides_agree_on_transcript(pki):
    c, s = handshake(client_cfg(pki, True), server_cfg(pki, True), NOW)
    assert [m.encode() for m in c.transcript] == [m.encode() for m in s.transcript]


def test_exposure_requires_cleartext_client_certs(pki):
    c, _ = handshake(client_cfg(pki, True), server_cfg(pki, True), NOW)
    msgs = list(c.transcript)
    hidden = [replace(m, cleartext=False) if m.msg_type is MsgType.CERTIFICATE else m
              for m in msgs]

    class T(list):
        def names(self):
            return []

        def wire_bytes(self):
            return 0
    assert exposure_report(T(msgs)).cleartext_identity_exposed
    assert not exposure_report(T(hidden)).cleartext_identity_exposed


def test_untrusted_server(pki):
    other = self_sign("x", generate_key_pair(Alg.ES256, random.Random(5)), V)
    err = fails(replace(client_cfg(pki), trusted_roots=[other]), server_cfg(pki))
    assert err.reason is HandshakeFailure.SERVER_CHAIN_INVALID
    # the client aborts before sending anything past its hello
    assert [n for n in err.transcript.names() if n.startswith("client:")] == ["client:ClientHello"]


def test_wrong_server_name(pki):
    err = fails(replace(client_cfg(pki), server_name="evil.example"), server_cfg(pki))
    assert err.reason is HandshakeFailure.SERVER_CHAIN_INVALID


def test_server_key_mismatch(pki):
    wrong = generate_key_pair(Alg.ES256, random.Random(6)).signing
    err = fails(client_cfg(pki), replace(server_cfg(pki), signing_key=wrong))
    assert err.reason is HandshakeFailure.SERVER_SIGNATURE_INVALID


def test_client_cert_required(pki):
    err = fails(client_cfg(pki), server_cfg(pki, True))
    assert err.reason is HandshakeFailure.CLIENT_CERT_REQUIRED


def test_client_chain_untrusted(pki):
    rogue_keys = generate_key_pair(Alg.ES256, random.Random(7))
    rogue = self_sign("device-7", rogue_keys, V)
    err = fails(client_cfg(pki, True, chain=CertChain([rogue]), signing_key=rogue_keys.signing),
                server_cfg(pki, True))
    assert err.reason is HandshakeFailure.CLIENT_CHAIN_INVALID


def test_certificate_verify_with_stolen_cert(pki):
    thief = generate_key_pair(Alg.ES256, random.Random(8)).signing
    err = fails(client_cfg(pki, True, signing_key=thief), server_cfg(pki, True))
    assert err.reason is HandshakeFailure.CERTIFICATE_VERIFY_FAILED


def test_tampered_finished(pki):
    def flip(m):
        if m.msg_type is MsgType.FINISHED and m.sender == "client":
            return replace(m, body=bytes([m.body[0] ^ 1]) + m.body[1:])
        return m
    err = fails(client_cfg(pki), server_cfg(pki), tamper=flip)
    assert err.reason is HandshakeFailure.FINISHED_MISMATCH


def test_tampered_server_random(pki):
    def flip(m):
        if m.msg_type is MsgType.SERVER_HELLO:
            return replace(m, body=bytes(32))
        return m
    err = fails(client_cfg(pki), server_cfg(pki), tamper=flip)
    assert err.reason is HandshakeFailure.SERVER_SIGNATURE_INVALID


def test_skewed_client_clock_rejects_chain(pki):
    chain, keys, root, _ = build_chain(1, Alg.ES256, random.Random(9), leaf_subject="b",
                                       validity=(NOW - 10, NOW + 10))
    cfg = ChannelConfig(chain=chain, signing_key=keys.signing)
    with pytest.raises(HandshakeError):
        handshake(ChannelConfig(trusted_roots=[root]), cfg, NOW, client_now=NOW + 11)
    handshake(ChannelConfig(trusted_roots=[root]), cfg, NOW, client_now=NOW + 10)


def test_deterministic_with_injected_nonces(pki):
    a, _ = handshake(client_cfg(pki), server_cfg(pki), NOW)
    b, _ = handshake(client_cfg(pki), server_cfg(pki), NOW)
    assert a.session_key == b.session_key
    assert [m.encode() for m in a.transcript] == [m.encode() for m in b.transcript]


def test_record_layer(pki):
    c, s = handshake(client_cfg(pki), server_cfg(pki), NOW)
    f1, f2 = c.send(b"hello"), c.send(b"hello")
    assert f1 != f2 and b"hello" not in f1
    assert s.recv(f1) == b"hello" and s.recv(f2) == b"hello"
    assert c.recv(s.send(b"back")) == b"back"
    bad = bytearray(c.send(b"x"))
    bad[12] ^= 1
    with pytest.raises(IntegrityError):
        s.recv(bytes(bad))


def test_record_replay_rejected(pki):
    c, s = handshake(client_cfg(pki), server_cfg(pki), NOW)
    f = c.send(b"once")
    s.recv(f)
    with pytest.raises(IntegrityError):
        s.recv(f)


def test_reflection_rejected(pki):
    c, s = handshake(client_cfg(pki), server_cfg(pki), NOW)
    with pytest.raises(IntegrityError):
        c.recv(c.send(b"mirror"))


def test_plain_channel_passthrough():
    p = PlainChannel()
    assert p.send(b"abc") == b"abc" and p.recv(b"abc") == b"abc"


def test_message_codec():
    m = HandshakeMessage(MsgType.CLIENT_HELLO, b"\x01" * 32, "client")
    assert HandshakeMessage.decode(m.encode(), "client") == m
    assert m.encode()[:4] == bytes([1, 0, 0, 32])
