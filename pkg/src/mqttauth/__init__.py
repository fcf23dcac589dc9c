"""MQTT device authentication: JWS tokens, a small PKI, an MQTT 3.1.1 codec,
a modelled secure channel, a broker with IAM and audit, device clients and
a scenario harness comparing the schemes."""

from .jws import Alg, ClaimsSet, JoseHeader, ValidationPolicy, sign, validate_claims
from .pki import Certificate, CertChain, verify_chain

__version__ = "0.1.0"

__all__ = [
    "Alg", "ClaimsSet", "JoseHeader", "ValidationPolicy", "sign", "validate_claims",
    "Certificate", "CertChain", "verify_chain",
]
