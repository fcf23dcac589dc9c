"""Minimal certificate and chain model used in place of X.509.

A certificate binds a subject name to a public key for a validity window
and is signed by its issuer.  The encoding is a flat concatenation of
length-prefixed fields (4-byte big-endian length, then the bytes), in this
order::

    subject | issuer | alg | public key | not_before | not_after | signature

``not_before``/``not_after`` are 8-byte signed big-endian integers inside
their length prefix.  The signature covers the encoding of every field
before it.  There is no revocation checking.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence, Union

from .jws import (
    Alg,
    KeyPair,
    SigningKey,
    VerificationKey,
    base64url_decode,
    base64url_encode,
    public_key_of,
    sign_bytes,
    verify_bytes,
)

PEM_LABEL = "MINIPKI CERTIFICATE"


class PkiError(ValueError):
    pass


class ChainFailure(str, enum.Enum):
    BAD_SIGNATURE = "bad-signature"
    EXPIRED = "expired"
    UNTRUSTED_ROOT = "untrusted-root"
    BROKEN_LINKAGE = "broken-linkage"


class ChainInvalid(Exception):
    def __init__(self, reason: ChainFailure, index: Optional[int] = None):
        where = "" if index is None else "(%d)" % index
        super().__init__(reason.value + where)
        self.reason = reason
        self.index = index


@dataclass(frozen=True)
class Certificate:
    subject: str
    public_key: VerificationKey
    issuer: str
    not_before: int
    not_after: int
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return b"".join(_lp(x) for x in (
            self.subject.encode("utf-8"),
            self.issuer.encode("utf-8"),
            self.public_key.alg.value.encode("ascii"),
            self.public_key.material,
            struct.pack(">q", self.not_before),
            struct.pack(">q", self.not_after),
        ))

    def encode(self) -> bytes:
        return self.tbs_bytes() + _lp(self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        fields = []
        off = 0
        while off < len(data):
            if off + 4 > len(data):
                raise PkiError("truncated length prefix")
            (n,) = struct.unpack_from(">I", data, off)
            off += 4
            if off + n > len(data):
                raise PkiError("truncated field")
            fields.append(data[off:off + n])
            off += n
        if len(fields) != 7:
            raise PkiError("expected 7 fields, got %d" % len(fields))
        subject, issuer, alg, key, nb, na, sig = fields
        if len(nb) != 8 or len(na) != 8:
            raise PkiError("bad validity field width")
        try:
            return cls(
                subject=subject.decode("utf-8"),
                public_key=VerificationKey(Alg(alg.decode("ascii")), key),
                issuer=issuer.decode("utf-8"),
                not_before=struct.unpack(">q", nb)[0],
                not_after=struct.unpack(">q", na)[0],
                signature=sig,
            )
        except (UnicodeDecodeError, ValueError) as exc:
            raise PkiError(str(exc)) from exc

    def is_self_signed(self) -> bool:
        return (self.subject == self.issuer
                and verify_bytes(self.tbs_bytes(), self.signature, self.public_key))

    def valid_at(self, now: int) -> bool:
        return self.not_before <= now <= self.not_after


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def _check_validity(validity: tuple[int, int]):
    nb, na = validity
    if not nb < na:
        raise PkiError("empty validity window [%d, %d]" % (nb, na))


def self_sign(subject: str, key_pair: KeyPair, validity: tuple[int, int]) -> Certificate:
    _check_validity(validity)
    if key_pair.signing.alg is Alg.HS256:
        raise PkiError("certificates need an asymmetric key")
    cert = Certificate(subject, _bare(key_pair.verification), subject, *validity)
    return replace(cert, signature=sign_bytes(cert.tbs_bytes(), key_pair.signing))


def issue(issuer_cert: Certificate, issuer_signing_key: SigningKey, subject: str,
          subject_public_key: VerificationKey, validity: tuple[int, int]) -> Certificate:
    _check_validity(validity)
    if subject_public_key.alg is Alg.HS256:
        raise PkiError("certificates need an asymmetric key")
    if public_key_of(issuer_signing_key).material != issuer_cert.public_key.material:
        raise PkiError("signing key does not belong to %r" % issuer_cert.subject)
    cert = Certificate(subject, _bare(subject_public_key), issuer_cert.subject, *validity)
    return replace(cert, signature=sign_bytes(cert.tbs_bytes(), issuer_signing_key))


def _bare(key: VerificationKey) -> VerificationKey:
    # key ids are not part of the certified identity
    return VerificationKey(key.alg, key.material)


@dataclass(frozen=True)
class CertChain:
    """Leaf first, root-most last."""
    certs: tuple[Certificate, ...]

    def __init__(self, certs: Iterable[Certificate]):
        certs = tuple(certs)
        if not certs:
            raise PkiError("a chain holds at least one certificate")
        object.__setattr__(self, "certs", certs)

    def __len__(self):
        return len(self.certs)

    def __iter__(self):
        return iter(self.certs)

    def __getitem__(self, i):
        return self.certs[i]

    @property
    def leaf(self) -> Certificate:
        return self.certs[0]

    def encode(self) -> bytes:
        return b"".join(c.encode() for c in self.certs)


def verify_chain(trusted_root: Union[Certificate, Sequence[Certificate]],
                 chain: CertChain, now: int) -> None:
    """Raise :class:`ChainInvalid` unless ``chain`` is valid at ``now``.

    ``trusted_root`` may be a single certificate or a list of trust anchors.
    """
    roots = [trusted_root] if isinstance(trusted_root, Certificate) else list(trusted_root)
    certs = list(chain)
    for i, cert in enumerate(certs):
        if not cert.valid_at(now):
            raise ChainInvalid(ChainFailure.EXPIRED, i)
        if i + 1 < len(certs):
            parent = certs[i + 1]
            if cert.issuer != parent.subject:
                raise ChainInvalid(ChainFailure.BROKEN_LINKAGE, i)
            if not verify_bytes(cert.tbs_bytes(), cert.signature, parent.public_key):
                raise ChainInvalid(ChainFailure.BAD_SIGNATURE, i)

    last = len(certs) - 1
    top = certs[last]
    for root in roots:
        if top.encode() == root.encode():
            if not top.is_self_signed():
                raise ChainInvalid(ChainFailure.BAD_SIGNATURE, last)
            return
    for root in roots:
        if top.issuer == root.subject:
            if not root.valid_at(now):
                raise ChainInvalid(ChainFailure.EXPIRED, last + 1)
            if verify_bytes(top.tbs_bytes(), top.signature, root.public_key):
                return
    if any(top.issuer == r.subject for r in roots):
        raise ChainInvalid(ChainFailure.BAD_SIGNATURE, last)
    raise ChainInvalid(ChainFailure.UNTRUSTED_ROOT, last)


def chain_wire_size(chain: CertChain) -> int:
    if not len(chain):
        raise PkiError("empty chain")
    return sum(len(c.encode()) for c in chain)


def build_chain(length: int, alg: Union[Alg, str] = Alg.ES256, rng=None,
                leaf_subject: str = "leaf", validity: tuple[int, int] = (0, 2**40),
                root_subject: str = "root-ca", root: Optional[tuple[Certificate, KeyPair]] = None,
                ) -> tuple[CertChain, KeyPair, Certificate, KeyPair]:
    """Build a chain of ``length`` certificates ending at a self-signed root.

    Returns (chain, leaf key pair, root certificate, root key pair).  A
    length-1 chain is the self-signed root alone, named ``leaf_subject``.
    An existing ``(root_cert, root_keys)`` may be passed to issue under it;
    the root then counts toward ``length``.
    """
    from .jws import generate_key_pair

    if length < 1:
        raise PkiError("chain length must be >= 1")
    if root is None:
        root_keys = generate_key_pair(alg, rng)
        name = leaf_subject if length == 1 else root_subject
        root_cert = self_sign(name, root_keys, validity)
    else:
        root_cert, root_keys = root
    if length == 1:
        return CertChain([root_cert]), root_keys, root_cert, root_keys

    certs = [root_cert]
    parent, parent_keys = root_cert, root_keys
    for depth in range(length - 2, 0, -1):
        keys = generate_key_pair(alg, rng)
        cert = issue(parent, parent_keys.signing, "%s-int-%d" % (root_cert.subject, depth),
                     keys.verification, validity)
        certs.insert(0, cert)
        parent, parent_keys = cert, keys
    leaf_keys = generate_key_pair(alg, rng)
    leaf = issue(parent, parent_keys.signing, leaf_subject, leaf_keys.verification, validity)
    certs.insert(0, leaf)
    return CertChain(certs), leaf_keys, root_cert, root_keys


# -- text files ------------------------------------------------------------

_BLOCK = re.compile(r"-----BEGIN %s-----\s*(.*?)\s*-----END %s-----" % (PEM_LABEL, PEM_LABEL),
                    re.S)


def dump_certs(certs: Iterable[Certificate]) -> str:
    out = []
    for cert in certs:
        body = base64url_encode(cert.encode())
        lines = [body[i:i + 64] for i in range(0, len(body), 64)] or [""]
        out.append("-----BEGIN %s-----\n%s\n-----END %s-----\n"
                   % (PEM_LABEL, "\n".join(lines), PEM_LABEL))
    return "".join(out)


def load_certs(text: str) -> list[Certificate]:
    certs = []
    for m in _BLOCK.finditer(text):
        body = "".join(m.group(1).split())
        certs.append(Certificate.decode(base64url_decode(body)))
    if not certs:
        raise PkiError("no %s blocks found" % PEM_LABEL)
    return certs


def load_chain(text: str) -> CertChain:
    return CertChain(load_certs(text))
