"""JSON Web Signatures in compact serialization.

Supports HS256, RS256 and ES256 with a fixed claims vocabulary
(iss, sub, aud, iat, exp) plus pass-through custom claims.
"""

from __future__ import annotations

import base64
import binascii
import enum
import functools
import hashlib
import hmac
import json
import re
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

__all__ = [
    "Alg", "JoseHeader", "ClaimsSet", "JwsToken", "SigningKey",
    "VerificationKey", "KeyPair", "ValidationPolicy", "RejectReason",
    "JwsError", "ClaimsRejected", "base64url_encode", "base64url_decode",
    "serialize_claims", "parse_claims", "sign", "compact_serialize",
    "parse_compact", "verify_signature", "validate_claims",
    "generate_key_pair", "public_key_of", "hs256_key",
]

Scalar = Union[str, int, float, bool, None]

_B64URL = re.compile(r"^[A-Za-z0-9_-]*$")


class JwsError(ValueError):
    pass


class Alg(str, enum.Enum):
    HS256 = "HS256"
    RS256 = "RS256"
    ES256 = "ES256"


def base64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def base64url_decode(text: str) -> bytes:
    if not _B64URL.match(text):
        raise JwsError("illegal base64url character in %r" % text[:32])
    if len(text) % 4 == 1:
        raise JwsError("impossible base64url length %d" % len(text))
    try:
        data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except binascii.Error as exc:
        raise JwsError(str(exc)) from exc
    if base64url_encode(data) != text:
        raise JwsError("non-canonical base64url trailing bits")
    return data


@dataclass(frozen=True)
class JoseHeader:
    alg: Alg
    typ: Optional[str] = "JWT"
    kid: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "alg", Alg(self.alg))
        if self.typ is not None and self.typ != "JWT":
            raise JwsError("typ must be 'JWT', got %r" % self.typ)

    def to_json(self) -> bytes:
        obj: dict[str, Any] = {"alg": self.alg.value}
        if self.typ is not None:
            obj["typ"] = self.typ
        if self.kid is not None:
            obj["kid"] = self.kid
        return _dumps(obj)

    @classmethod
    def from_json(cls, raw: bytes) -> "JoseHeader":
        obj = _loads_object(raw)
        try:
            alg = Alg(obj.get("alg"))
        except ValueError:
            raise JwsError("unknown alg %r" % (obj.get("alg"),)) from None
        kid = obj.get("kid")
        if kid is not None and not isinstance(kid, str):
            raise JwsError("kid must be a string")
        return cls(alg=alg, typ=obj.get("typ"), kid=kid)


_REGISTERED = ("iss", "sub", "aud", "iat", "exp")


@dataclass(frozen=True)
class ClaimsSet:
    iat: int
    exp: int
    iss: Optional[str] = None
    sub: Optional[str] = None
    aud: Optional[str] = None
    custom: dict[str, Scalar] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("iat", "exp"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise JwsError("%s must be an integer" % name)
        if not self.iat < self.exp:
            raise JwsError("iat must precede exp")
        clash = set(self.custom) & set(_REGISTERED)
        if clash:
            raise JwsError("custom claims shadow registered ones: %s" % sorted(clash))


def serialize_claims(claims: ClaimsSet) -> bytes:
    obj: dict[str, Any] = {}
    for name in ("iss", "sub", "aud"):
        value = getattr(claims, name)
        if value is not None:
            obj[name] = value
    obj["iat"] = claims.iat
    obj["exp"] = claims.exp
    for key in sorted(claims.custom):
        obj[key] = claims.custom[key]
    return _dumps(obj)


def parse_claims(raw: bytes) -> ClaimsSet:
    obj = _loads_object(raw)
    if "iat" not in obj or "exp" not in obj:
        raise JwsError("claims must carry iat and exp")
    for name in ("iss", "sub", "aud"):
        if obj.get(name) is not None and not isinstance(obj[name], str):
            raise JwsError("%s must be a string" % name)
    custom = {k: v for k, v in obj.items() if k not in _REGISTERED}
    for k, v in custom.items():
        if isinstance(v, (dict, list)):
            raise JwsError("custom claim %r is not a scalar" % k)
    return ClaimsSet(
        iat=obj["iat"], exp=obj["exp"], iss=obj.get("iss"),
        sub=obj.get("sub"), aud=obj.get("aud"), custom=custom,
    )


def _dumps(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


def _loads_object(raw: bytes) -> dict:
    def no_dupes(pairs):
        keys = [k for k, _ in pairs]
        if len(keys) != len(set(keys)):
            raise JwsError("duplicate JSON member")
        return dict(pairs)

    try:
        obj = json.loads(raw.decode("utf-8"), object_pairs_hook=no_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise JwsError("malformed JSON: %s" % exc) from exc
    if not isinstance(obj, dict):
        raise JwsError("expected a JSON object")
    return obj


@dataclass(frozen=True)
class JwsToken:
    header: JoseHeader
    claims: ClaimsSet
    signature: bytes = b""
    # Exact segments as received; signatures are checked over these, not a
    # re-serialization, so non-canonical tokens from other issuers verify.
    raw_segments: Optional[tuple[str, str]] = field(
        default=None, compare=False, repr=False)

    def segments(self) -> tuple[str, str]:
        if self.raw_segments is not None:
            return self.raw_segments
        return (base64url_encode(self.header.to_json()),
                base64url_encode(serialize_claims(self.claims)))

    def signing_input(self) -> bytes:
        return ".".join(self.segments()).encode("ascii")


def compact_serialize(token: JwsToken) -> str:
    h, p = token.segments()
    return "%s.%s.%s" % (h, p, base64url_encode(token.signature))


def parse_compact(text: str) -> JwsToken:
    if isinstance(text, bytes):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError:
            raise JwsError("token is not ASCII") from None
    parts = text.split(".")
    if len(parts) != 3:
        raise JwsError("expected 3 segments, got %d" % len(parts))
    h, p, s = parts
    header = JoseHeader.from_json(base64url_decode(h))
    claims = parse_claims(base64url_decode(p))
    return JwsToken(header, claims, base64url_decode(s), raw_segments=(h, p))


# -- keys ------------------------------------------------------------------

@dataclass(frozen=True)
class SigningKey:
    """Secret for HS256; PKCS#8 DER private key for RS256/ES256."""
    alg: Alg
    material: bytes = field(repr=False)
    key_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "alg", Alg(self.alg))


@dataclass(frozen=True)
class VerificationKey:
    """Secret for HS256; SubjectPublicKeyInfo DER for RS256/ES256."""
    alg: Alg
    material: bytes = field(repr=False)
    key_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "alg", Alg(self.alg))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.alg.value.encode() + b"\0" + self.material).hexdigest()[:16]


class KeyPair(NamedTuple):
    signing: SigningKey
    verification: VerificationKey


def hs256_key(secret: Union[str, bytes], key_id: Optional[str] = None) -> KeyPair:
    if isinstance(secret, str):
        secret = secret.encode("utf-8")
    return KeyPair(SigningKey(Alg.HS256, secret, key_id),
                   VerificationKey(Alg.HS256, secret, key_id))


_P256_ORDER = int("FFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551", 16)


def generate_key_pair(alg: Union[Alg, str], rng=None, key_id: Optional[str] = None,
                      rsa_bits: int = 2048) -> KeyPair:
    """Make a fresh key pair.

    ``rng`` is an optional ``random.Random``; when given, the key is a pure
    function of its state, which keeps seeded scenarios reproducible.
    """
    alg = Alg(alg)
    if alg is Alg.HS256:
        secret = rng.randbytes(32) if rng is not None else _urandom(32)
        return hs256_key(secret, key_id)
    if alg is Alg.ES256:
        if rng is not None:
            scalar = rng.randrange(1, _P256_ORDER)
        else:
            scalar = int.from_bytes(_urandom(40), "big") % (_P256_ORDER - 1) + 1
        priv = ec.derive_private_key(scalar, ec.SECP256R1())
    elif rng is None:
        priv = rsa.generate_private_key(public_exponent=65537, key_size=rsa_bits)
    else:
        priv = _seeded_rsa(rng, rsa_bits)
    return _pair_from_private(alg, priv, key_id)


def _urandom(n: int) -> bytes:
    import os
    return os.urandom(n)


def _seeded_rsa(rng, bits: int) -> rsa.RSAPrivateKey:
    import gmpy2

    e = 65537
    half = bits // 2

    def prime():
        while True:
            cand = rng.getrandbits(half) | (3 << (half - 2)) | 1
            p = int(gmpy2.next_prime(cand))
            if p.bit_length() == half and (p - 1) % e != 0:
                return p

    while True:
        p, q = prime(), prime()
        if p != q and (p * q).bit_length() == bits:
            break
    if p < q:
        p, q = q, p
    d = pow(e, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p=p, q=q, d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p), dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(e, p * q),
    )
    return numbers.private_key()


def _pair_from_private(alg: Alg, priv, key_id) -> KeyPair:
    der = priv.private_bytes(serialization.Encoding.DER,
                             serialization.PrivateFormat.PKCS8,
                             serialization.NoEncryption())
    pub = priv.public_key().public_bytes(serialization.Encoding.DER,
                                         serialization.PublicFormat.SubjectPublicKeyInfo)
    return KeyPair(SigningKey(alg, der, key_id), VerificationKey(alg, pub, key_id))


def public_key_of(key: SigningKey) -> VerificationKey:
    if key.alg is Alg.HS256:
        return VerificationKey(key.alg, key.material, key.key_id)
    priv = serialization.load_der_private_key(key.material, password=None)
    return _pair_from_private(key.alg, priv, key.key_id).verification


def load_signing_key(alg: Union[Alg, str], text: Union[str, bytes],
                     key_id: Optional[str] = None) -> SigningKey:
    """Raw secret text for HS256, PEM private key for the others."""
    alg = Alg(alg)
    if isinstance(text, str):
        text = text.encode("utf-8")
    if alg is Alg.HS256:
        return SigningKey(alg, text.strip(), key_id)
    priv = serialization.load_pem_private_key(text, password=None)
    _check_key_type(alg, priv)
    return _pair_from_private(alg, priv, key_id).signing


def load_verification_key(alg: Union[Alg, str], text: Union[str, bytes],
                          key_id: Optional[str] = None) -> VerificationKey:
    alg = Alg(alg)
    if isinstance(text, str):
        text = text.encode("utf-8")
    if alg is Alg.HS256:
        return VerificationKey(alg, text.strip(), key_id)
    pub = serialization.load_pem_public_key(text)
    _check_key_type(alg, pub)
    der = pub.public_bytes(serialization.Encoding.DER,
                           serialization.PublicFormat.SubjectPublicKeyInfo)
    return VerificationKey(alg, der, key_id)


def key_to_pem(key: Union[SigningKey, VerificationKey]) -> str:
    if key.alg is Alg.HS256:
        return key.material.decode("utf-8", "replace")
    if isinstance(key, SigningKey):
        obj = serialization.load_der_private_key(key.material, password=None)
        return obj.private_bytes(serialization.Encoding.PEM,
                                 serialization.PrivateFormat.PKCS8,
                                 serialization.NoEncryption()).decode()
    obj = serialization.load_der_public_key(key.material)
    return obj.public_bytes(serialization.Encoding.PEM,
                            serialization.PublicFormat.SubjectPublicKeyInfo).decode()


def _check_key_type(alg: Alg, obj):
    want = (rsa.RSAPrivateKey, rsa.RSAPublicKey) if alg is Alg.RS256 else \
        (ec.EllipticCurvePrivateKey, ec.EllipticCurvePublicKey)
    if not isinstance(obj, want):
        raise JwsError("key does not match %s" % alg.value)
    if alg is Alg.ES256 and not isinstance(obj.curve, ec.SECP256R1):
        raise JwsError("ES256 requires a P-256 key")


# -- signatures ------------------------------------------------------------

# Parsing a DER private key runs OpenSSL's consistency checks, which are
# slow for RSA; keys are immutable bytes, so parse each one once.
@functools.lru_cache(maxsize=512)
def _private_key(material: bytes):
    return serialization.load_der_private_key(material, password=None)


@functools.lru_cache(maxsize=512)
def _public_key(material: bytes):
    return serialization.load_der_public_key(material)


def sign_bytes(data: bytes, key: SigningKey) -> bytes:
    """Raw signature over ``data``; shared with the certificate model."""
    if key.alg is Alg.HS256:
        return hmac.new(key.material, data, hashlib.sha256).digest()
    priv = _private_key(key.material)
    _check_key_type(key.alg, priv)
    if key.alg is Alg.RS256:
        return priv.sign(data, padding.PKCS1v15(), hashes.SHA256())
    der = priv.sign(data, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))
    r, s = decode_dss_signature(der)
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify_bytes(data: bytes, signature: bytes, key: VerificationKey) -> bool:
    if key.alg is Alg.HS256:
        expected = hmac.new(key.material, data, hashlib.sha256).digest()
        return hmac.compare_digest(expected, signature)
    try:
        pub = _public_key(key.material)
        _check_key_type(key.alg, pub)
        if key.alg is Alg.RS256:
            pub.verify(signature, data, padding.PKCS1v15(), hashes.SHA256())
        else:
            if len(signature) != 64:
                return False
            r = int.from_bytes(signature[:32], "big")
            s = int.from_bytes(signature[32:], "big")
            pub.verify(encode_dss_signature(r, s), data, ec.ECDSA(hashes.SHA256()))
    except (InvalidSignature, ValueError, JwsError):
        return False
    return True


def sign(header: JoseHeader, claims: ClaimsSet, key: SigningKey) -> JwsToken:
    if header.alg is not key.alg:
        raise JwsError("header alg %s does not match %s key"
                       % (header.alg.value, key.alg.value))
    unsigned = JwsToken(header, claims)
    return JwsToken(header, claims, sign_bytes(unsigned.signing_input(), key))


def verify_signature(token: JwsToken, key: VerificationKey) -> bool:
    # Dispatch on the key's algorithm only; the header merely has to agree.
    if token.header.alg is not key.alg:
        return False
    return verify_bytes(token.signing_input(), token.signature, key)


# -- claim validation ------------------------------------------------------

class RejectReason(str, enum.Enum):
    EXPIRED = "expired"
    IAT_SKEW = "iat-skew"
    LIFETIME_EXCEEDED = "lifetime-exceeded"
    AUDIENCE_MISMATCH = "audience-mismatch"


class ClaimsRejected(Exception):
    def __init__(self, reason: RejectReason, detail: str = ""):
        super().__init__("%s%s" % (reason.value, ": " + detail if detail else ""))
        self.reason = reason


@dataclass(frozen=True)
class ValidationPolicy:
    clock_skew_window: int = 600
    max_lifetime: int = 3600
    required_aud: Optional[str] = None
    # Also reject tokens whose iat lies more than the skew window in the
    # past. Brokers that expect a freshly minted token per CONNECT set this.
    require_fresh_iat: bool = False

    def __post_init__(self):
        if self.clock_skew_window < 0:
            raise ValueError("clock_skew_window must be >= 0")
        if self.max_lifetime <= 0:
            raise ValueError("max_lifetime must be > 0")


def validate_claims(claims: ClaimsSet, now: int, policy: ValidationPolicy) -> None:
    """Raise :class:`ClaimsRejected` unless ``claims`` are acceptable at ``now``."""
    skew = policy.clock_skew_window
    if claims.exp - claims.iat > policy.max_lifetime:
        raise ClaimsRejected(RejectReason.LIFETIME_EXCEEDED,
                             "lifetime %d > %d" % (claims.exp - claims.iat, policy.max_lifetime))
    if claims.iat > now + skew:
        raise ClaimsRejected(RejectReason.IAT_SKEW,
                             "iat %d is %ds ahead" % (claims.iat, claims.iat - now))
    if now > claims.exp + skew:
        raise ClaimsRejected(RejectReason.EXPIRED, "exp %d < now %d" % (claims.exp, now))
    if policy.require_fresh_iat and now - claims.iat > skew:
        raise ClaimsRejected(RejectReason.IAT_SKEW,
                             "iat %d is %ds behind" % (claims.iat, now - claims.iat))
    if policy.required_aud is not None and claims.aud != policy.required_aud:
        raise ClaimsRejected(RejectReason.AUDIENCE_MISMATCH,
                             "aud %r != %r" % (claims.aud, policy.required_aud))
