"""JSON config files for a broker and its devices (real-TCP mode).

Broker file::

    {
      "listeners": [{"name": "jwt", "mode": "jwt", "port": 8883, "secure": true,
                     "default_policy": "deny-all",
                     "jwt_policy": {"clock_skew_window": 600, "max_lifetime": 3600,
                                    "required_aud": "projects/demo"}}],
      "tls": {"chain": "server-chain.pem", "key": "server-key.pem", "key_alg": "ES256",
              "client_roots": ["device-ca.pem"]},
      "identities": [{"name": "dev1", "password_hash": "<salt hex>$<digest hex>",
                      "cert_subjects": ["dev1"],
                      "keys": [{"alg": "ES256", "file": "dev1.pub.pem", "kid": "k1"}],
                      "acl": {"publish": ["devices/dev1/#"], "subscribe": ["broadcast/#"]}}],
      "audit_log": "audit.log"
    }

Client file::

    {"client_id": "dev1", "scheme": "jwt", "host": "127.0.0.1", "port": 8883,
     "secure": true, "keep_alive": 60, "server_name": "broker.local",
     "trusted_roots": ["server-root.pem"], "skew": 0,
     "username": "...", "password": "...",                  # username-password
     "chain": "dev1-chain.pem", "key": "dev1-key.pem",      # mutual-tls
     "key_alg": "ES256", "kid": "k1", "aud": "projects/demo",
     "token_lifetime": 3600, "refresh_margin": 300}         # jwt

Relative file paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field
from typing import Optional

from .broker import (
    AclPolicy,
    AuditLog,
    AuthSchemeConfig,
    Broker,
    IamStore,
    Listener,
    PasswordHash,
)
from .channel import ChannelConfig
from .client import (
    ClientConfig,
    ClockSource,
    JwtScheme,
    MutualTlsScheme,
    UsernamePasswordScheme,
)
from .jws import (
    ValidationPolicy,
    generate_key_pair,
    key_to_pem,
    load_signing_key,
    load_verification_key,
)
from .pki import build_chain, dump_certs, issue, load_certs, load_chain, self_sign
from .transport import PLAINTEXT_PORT, SECURE_PORT


class ConfigError(ValueError):
    pass


def _read(base: str, path: str) -> str:
    with open(os.path.join(base, path)) as fh:
        return fh.read()


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("%s: %s" % (path, exc)) from None
    if not isinstance(data, dict):
        raise ConfigError("%s: top level must be an object" % path)
    return data


@dataclass
class BrokerSetup:
    broker: Broker
    server_channel: Optional[ChannelConfig]
    audit_path: Optional[str] = None
    _audit_fh: object = field(default=None, repr=False)

    def close(self):
        if self._audit_fh is not None:
            self._audit_fh.close()


def load_broker_config(path: str) -> BrokerSetup:
    data = _load_json(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        listeners = []
        for spec in data["listeners"]:
            policy = ValidationPolicy(require_fresh_iat=True, **spec.get("jwt_policy", {}))
            secure = bool(spec.get("secure", True))
            listeners.append(Listener(
                spec.get("name", spec["mode"]),
                AuthSchemeConfig(spec["mode"], policy, spec.get("default_policy", "deny-all")),
                port=int(spec.get("port", SECURE_PORT if secure else PLAINTEXT_PORT)),
                secure=secure))

        iam = IamStore()
        for ident in data.get("identities", []):
            keys = [load_verification_key(k["alg"], _read(base, k["file"]), k.get("kid"))
                    for k in ident.get("keys", [])]
            acl = ident.get("acl", {})
            pw_hash = ident.get("password_hash")
            iam.register_identity(
                ident["name"], password=ident.get("password"),
                password_hash=PasswordHash.from_text(pw_hash) if pw_hash else None,
                cert_subjects=ident.get("cert_subjects", ()), keys=keys,
                acl=AclPolicy(tuple(acl.get("publish", ())), tuple(acl.get("subscribe", ()))))

        server_channel = None
        tls = data.get("tls")
        if tls:
            roots = [c for f in tls.get("client_roots", []) for c in load_certs(_read(base, f))]
            server_channel = ChannelConfig(
                chain=load_chain(_read(base, tls["chain"])),
                signing_key=load_signing_key(tls.get("key_alg", "ES256"),
                                             _read(base, tls["key"])),
                trusted_roots=roots)
        elif any(lst.secure for lst in listeners):
            raise ConfigError("secure listener configured without a tls section")
    except (KeyError, TypeError) as exc:
        raise ConfigError("%s: missing or malformed field %s" % (path, exc)) from None

    audit_path = data.get("audit_log")
    fh = None
    if audit_path:
        audit_path = os.path.join(base, audit_path)
        fh = open(audit_path, "a")
    broker = Broker(iam, listeners, AuditLog(fh))
    return BrokerSetup(broker, server_channel, audit_path, fh)


@dataclass
class ClientSetup:
    config: ClientConfig
    host: str
    port: int
    secure: bool
    clock: ClockSource


def load_client_config(path: str) -> ClientSetup:
    d = _load_json(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        kind = d["scheme"]
        if kind == "username-password":
            scheme = UsernamePasswordScheme(d["username"], d["password"])
        elif kind == "mutual-tls":
            scheme = MutualTlsScheme(load_chain(_read(base, d["chain"])),
                                     load_signing_key(d.get("key_alg", "ES256"),
                                                      _read(base, d["key"])))
        elif kind == "jwt":
            scheme = JwtScheme(load_signing_key(d.get("key_alg", "ES256"), _read(base, d["key"])),
                               d["aud"], d.get("kid"), int(d.get("token_lifetime", 3600)),
                               int(d.get("refresh_margin", 300)))
        else:
            raise ConfigError("%s: unknown scheme %r" % (path, kind))
        secure = bool(d.get("secure", True))
        roots = [c for f in d.get("trusted_roots", []) for c in load_certs(_read(base, f))]
        cfg = ClientConfig(d["client_id"], scheme, keep_alive=int(d.get("keep_alive", 60)),
                           trusted_roots=roots, server_name=d.get("server_name"),
                           reconnect_backoff=int(d.get("reconnect_backoff", 5)))
    except (KeyError, TypeError) as exc:
        raise ConfigError("%s: missing or malformed field %s" % (path, exc)) from None
    return ClientSetup(cfg, d.get("host", "127.0.0.1"),
                       int(d.get("port", SECURE_PORT if secure else PLAINTEXT_PORT)), secure,
                       ClockSource(skew_offset=int(d.get("skew", 0))))


def provision_demo(out_dir: str, seed: Optional[int] = None, port: int = SECURE_PORT,
                   audience: str = "projects/demo") -> list[str]:
    """Write a broker config plus one client config per scheme, with keys and certs.

    All three schemes share one listener port range: jwt on ``port``,
    mutual-tls on ``port + 1``, username-password on ``port + 2``.
    """
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        p = os.path.join(out_dir, name)
        with open(p, "w") as fh:
            fh.write(text)
        written.append(p)
        return name

    validity = (0, 2**40)
    chain, server_keys, root, _ = build_chain(2, "ES256", rng, leaf_subject="broker.local",
                                              validity=validity, root_subject="server-root-ca")
    put("server-chain.pem", dump_certs(chain.certs))
    put("server-key.pem", key_to_pem(server_keys.signing))
    put("server-root.pem", dump_certs([root]))
    ca_keys = generate_key_pair("ES256", rng)
    ca = self_sign("device-ca", ca_keys, validity)
    put("device-ca.pem", dump_certs([ca]))

    dev_keys = generate_key_pair("ES256", rng, key_id="k1")
    put("dev-jwt-key.pem", key_to_pem(dev_keys.signing))
    put("dev-jwt.pub.pem", key_to_pem(dev_keys.verification))
    mtls_keys = generate_key_pair("ES256", rng)
    leaf = issue(ca, ca_keys.signing, "dev-mtls", mtls_keys.verification, validity)
    put("dev-mtls-chain.pem", dump_certs([leaf, ca]))
    put("dev-mtls-key.pem", key_to_pem(mtls_keys.signing))
    password = rng.randbytes(12).hex()

    def acl(name):
        return {"publish": ["devices/%s/#" % name],
                "subscribe": ["devices/%s/#" % name, "broadcast/#"]}

    policy = {"clock_skew_window": 600, "max_lifetime": 3600, "required_aud": audience}
    broker_cfg = {
        "listeners": [
            {"name": "jwt", "mode": "jwt", "port": port, "jwt_policy": policy},
            {"name": "mutual-tls", "mode": "mutual-tls", "port": port + 1},
            {"name": "username-password", "mode": "username-password", "port": port + 2},
        ],
        "tls": {"chain": "server-chain.pem", "key": "server-key.pem", "key_alg": "ES256",
                "client_roots": ["device-ca.pem"]},
        "identities": [
            {"name": "dev-jwt", "keys": [{"alg": "ES256", "file": "dev-jwt.pub.pem",
                                          "kid": "k1"}], "acl": acl("dev-jwt")},
            {"name": "dev-mtls", "cert_subjects": ["dev-mtls"], "acl": acl("dev-mtls")},
            {"name": "dev-up",
             "password_hash": PasswordHash.create(password.encode(), rng.randbytes(16)).to_text(),
             "acl": acl("dev-up")},
        ],
        "audit_log": "audit.log",
    }
    common = {"host": "127.0.0.1", "secure": True, "keep_alive": 60,
              "server_name": "broker.local", "trusted_roots": ["server-root.pem"]}
    clients = {
        "client-jwt.json": dict(common, client_id="dev-jwt", scheme="jwt", port=port,
                                key="dev-jwt-key.pem", key_alg="ES256", kid="k1", aud=audience),
        "client-mtls.json": dict(common, client_id="dev-mtls", scheme="mutual-tls",
                                 port=port + 1, chain="dev-mtls-chain.pem",
                                 key="dev-mtls-key.pem"),
        "client-up.json": dict(common, client_id="dev-up", scheme="username-password",
                               port=port + 2, username="dev-up", password=password),
    }
    put("broker.json", json.dumps(broker_cfg, indent=2) + "\n")
    for name, cfg in clients.items():
        put(name, json.dumps(cfg, indent=2) + "\n")
    return written
