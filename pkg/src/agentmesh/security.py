"""Keys, certificates, bundle signatures, trust stores, and the
challenge-response handshake that gates control access to an agent.

Signature scheme is Ed25519 throughout: 32-byte public keys, 64-byte
signatures. Certificates are self-signed statements of (subject, public
key); their fingerprint is the SHA-256 of the canonical certificate bytes
excluding the fingerprint itself. A station admits a visiting agent only
after three checks, in this fixed order: bundle hash, signer trust,
bundle signature.
"""
from __future__ import annotations

import base64
import hashlib
import re
import secrets
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PrivateFormat,
    PublicFormat,
    NoEncryption,
)

from .errors import MeshError
from .wire import canonical_json

ADMITTED = "ADMITTED"
UNTRUSTED_SIGNER = "UNTRUSTED_SIGNER"
TAMPERED = "TAMPERED"
HASH_MISMATCH = "HASH_MISMATCH"
OK = "OK"
REJECTED = "REJECTED"

NONCE_TTL_MS = 60_000

_HEX64 = re.compile(r"^[0-9a-f]{64}$")


class KeyCertMismatch(MeshError):
    code = "KEY_CERT_MISMATCH"


class NonceUnknown(MeshError):
    code = "NONCE_UNKNOWN"


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


@dataclass(frozen=True)
class KeyPair:
    """Ed25519 pair; the private half never leaves the keystore file."""

    public_key: bytes
    private_key: bytes

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(message)


@dataclass(frozen=True)
class Certificate:
    subject: str
    public_key: bytes
    fingerprint: str

    def to_json(self) -> dict:
        return {
            "subject": self.subject,
            "public_key": _b64(self.public_key),
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Certificate":
        cert = cls(
            subject=obj["subject"],
            public_key=_unb64(obj["public_key"]),
            fingerprint=obj["fingerprint"],
        )
        expected = certificate_fingerprint(cert.subject, cert.public_key)
        if cert.fingerprint != expected:
            raise MeshError("certificate fingerprint does not recompute", code="BAD_CERT")
        return cert


def certificate_fingerprint(subject: str, public_key: bytes) -> str:
    body = canonical_json({"subject": subject, "public_key": _b64(public_key)})
    return hashlib.sha256(body).hexdigest()


def issue_certificate(subject: str, key: KeyPair) -> Certificate:
    return Certificate(
        subject=subject,
        public_key=key.public_key,
        fingerprint=certificate_fingerprint(subject, key.public_key),
    )


@dataclass(frozen=True)
class BundleSignature:
    signer_cert: Certificate
    sig: bytes

    def to_json(self) -> dict:
        return {"signer_cert": self.signer_cert.to_json(), "sig": _b64(self.sig)}

    @classmethod
    def from_json(cls, obj: dict) -> "BundleSignature":
        return cls(
            signer_cert=Certificate.from_json(obj["signer_cert"]),
            sig=_unb64(obj["sig"]),
        )


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    if seed is not None:
        if len(seed) != 32:
            raise MeshError("seed must be exactly 32 bytes", code="BAD_SEED")
        priv = Ed25519PrivateKey.from_private_bytes(seed)
    else:
        priv = Ed25519PrivateKey.generate()
    private_bytes = priv.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
    public_bytes = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(public_key=public_bytes, private_key=private_bytes)


def sign_bundle(bundle_bytes: bytes, key: KeyPair, cert: Certificate) -> BundleSignature:
    if cert.public_key != key.public_key:
        raise KeyCertMismatch("certificate public key does not match signing key")
    return BundleSignature(signer_cert=cert, sig=key.sign(bundle_bytes))


def verify_bundle(bundle_bytes: bytes, sig: BundleSignature) -> str:
    """OK iff the signature is valid over the bundle bytes; TAMPERED otherwise."""
    try:
        pub = Ed25519PublicKey.from_public_bytes(sig.signer_cert.public_key)
        pub.verify(sig.sig, bundle_bytes)
    except (InvalidSignature, ValueError):
        return TAMPERED
    return OK


class TrustStore:
    """Fingerprints a station administrator has accepted.

    File form: one fingerprint per line, sorted, LF-terminated.
    """

    def __init__(self, trusted: set[str] | None = None):
        self._trusted = set(trusted or ())
        self._lock = threading.Lock()

    def __contains__(self, fingerprint: str) -> bool:
        with self._lock:
            return fingerprint in self._trusted

    def accept(self, cert: Certificate) -> None:
        with self._lock:
            self._trusted.add(cert.fingerprint)

    def reject(self, fingerprint: str) -> None:
        with self._lock:
            self._trusted.discard(fingerprint)

    def fingerprints(self) -> list[str]:
        with self._lock:
            return sorted(self._trusted)

    def save(self, path: str | Path) -> None:
        text = "".join(fp + "\n" for fp in self.fingerprints())
        Path(path).write_text(text, encoding="ascii")

    @classmethod
    def load(cls, path: str | Path) -> "TrustStore":
        trusted = set()
        for line in Path(path).read_text(encoding="ascii").splitlines():
            line = line.strip()
            if not line:
                continue
            if not _HEX64.match(line):
                raise MeshError(f"bad fingerprint line {line!r}", code="BAD_TRUST_STORE")
            trusted.add(line)
        return cls(trusted)


def admit_agent(snapshot, bundle_bytes: bytes, trust: TrustStore) -> str:
    """Admission decision for an arriving agent, checks in fixed order.

    Returns ADMITTED only when the bundle hash matches the carried
    reference, the bundle signer is trusted, and the signature verifies.
    """
    ref = snapshot.bundle_ref
    if hashlib.sha256(bundle_bytes).hexdigest() != ref.sha256:
        return HASH_MISMATCH
    if ref.signature.signer_cert.fingerprint not in trust:
        return UNTRUSTED_SIGNER
    if verify_bundle(bundle_bytes, ref.signature) != OK:
        return TAMPERED
    return ADMITTED


class NonceTable:
    """Single-use challenge nonces with a 60 s lifetime."""

    def __init__(self, clock=None):
        self._clock = clock or (lambda: int(time.time() * 1000))
        self._issued: dict[bytes, int] = {}
        self._lock = threading.Lock()

    def issue_challenge(self) -> bytes:
        nonce = secrets.token_bytes(32)
        with self._lock:
            self._issued[nonce] = self._clock() + NONCE_TTL_MS
        return nonce

    def verify_challenge(self, nonce: bytes, answer: bytes, owner_cert: Certificate) -> str:
        now = self._clock()
        with self._lock:
            deadline = self._issued.pop(nonce, None)
            for stale in [n for n, d in self._issued.items() if d < now]:
                del self._issued[stale]
        if deadline is None or deadline < now:
            raise NonceUnknown("nonce never issued, already consumed, or expired")
        try:
            pub = Ed25519PublicKey.from_public_bytes(owner_cert.public_key)
            pub.verify(answer, nonce)
        except (InvalidSignature, ValueError):
            return REJECTED
        return OK


def answer_challenge(nonce: bytes, owner_key: KeyPair) -> bytes:
    return owner_key.sign(nonce)


def save_keystore(path: str | Path, subject: str, key: KeyPair) -> None:
    obj = {
        "subject": subject,
        "public_key": _b64(key.public_key),
        "private_key": _b64(key.private_key),
    }
    Path(path).write_bytes(canonical_json(obj))


def load_keystore(path: str | Path) -> tuple[KeyPair, Certificate]:
    import json

    obj = json.loads(Path(path).read_bytes())
    key = KeyPair(
        public_key=_unb64(obj["public_key"]),
        private_key=_unb64(obj["private_key"]),
    )
    cert = issue_certificate(obj["subject"], key)
    return key, cert
