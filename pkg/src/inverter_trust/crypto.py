"""Cryptographic primitives shared by every actor.

Keys are ECDSA over NIST P-256. Signatures are deterministic (RFC 6979) so
seeded simulations reproduce byte-identical transcripts. Encryption is
ECIES-style: an ephemeral P-256 key agreement, HKDF-SHA256, then AES-256-GCM.
"""

from __future__ import annotations

import hashlib
import os
import random
import secrets
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

CURVE = ec.SECP256R1()
CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
SIGNATURE_ALGORITHM = "ES256"
HASH_ALGORITHM = "sha-256"

_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
_ENVELOPE_INFO = b"inverter-trust/envelope/v1"
_PUBKEY_LEN = 33
_TAG_LEN = 16
_NONCE_MAX = (1 << 128) - 1


class CryptoError(Exception):
    pass


class DecryptionError(CryptoError):
    pass


class NonceOverflow(CryptoError):
    pass


@dataclass(frozen=True)
class Digest:
    bytes: bytes
    algorithm_tag: str = HASH_ALGORITHM

    def hex(self) -> str:
        return self.bytes.hex()

    @classmethod
    def from_hex(cls, value: str) -> "Digest":
        raw = bytes.fromhex(value)
        if len(raw) != 32 or raw.hex() != value:
            raise ValueError(f"not a lowercase 32-byte hex digest: {value!r}")
        return cls(raw)


@dataclass(frozen=True)
class Signature:
    bytes: bytes
    key_id: str


@dataclass(frozen=True)
class KeyPair:
    """A P-256 key pair.

    ``signing_key`` is the raw 32-byte scalar and ``verification_key`` the
    33-byte compressed SEC1 point. The repr never shows the secret.
    """

    signing_key: bytes = field(repr=False)
    verification_key: bytes
    key_id: str
    _private: ec.EllipticCurvePrivateKey = field(repr=False, compare=False, hash=False)


def key_id_for(verification_key: bytes) -> str:
    return hashlib.sha256(verification_key).hexdigest()[:16]


def _from_private(private: ec.EllipticCurvePrivateKey) -> KeyPair:
    scalar = private.private_numbers().private_value.to_bytes(32, "big")
    vk = private.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )
    return KeyPair(scalar, vk, key_id_for(vk), private)


def _scalar_from(material: bytes) -> int:
    return int.from_bytes(hashlib.sha256(b"keygen" + material).digest(), "big") % (CURVE_ORDER - 1) + 1


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    """Create a key pair; a 32-byte ``seed`` makes the result reproducible."""
    if seed is None:
        return _from_private(ec.generate_private_key(CURVE))
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise ValueError("seed must be exactly 32 bytes")
    return _from_private(ec.derive_private_key(_scalar_from(bytes(seed)), CURVE))


def keypair_from_rng(rng: random.Random) -> KeyPair:
    return generate_keypair(rng.getrandbits(256).to_bytes(32, "big"))


def load_verification_key(vk: bytes) -> ec.EllipticCurvePublicKey:
    if len(vk) != _PUBKEY_LEN:
        raise CryptoError("verification key must be a 33-byte compressed point")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, bytes(vk))
    except ValueError as exc:
        raise CryptoError(f"invalid verification key: {exc}") from None


def sha256(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def sign(message: bytes, key: KeyPair) -> Signature:
    """Sign SHA-256(message); returns a 64-byte r||s signature."""
    der = key._private.sign(message, _ECDSA)
    r, s = decode_dss_signature(der)
    return Signature(r.to_bytes(32, "big") + s.to_bytes(32, "big"), key.key_id)


def verify(message: bytes, sig: Signature, vk: bytes) -> bool:
    try:
        raw = sig.bytes
        if len(raw) != 64:
            return False
        public = load_verification_key(vk)
        der = encode_dss_signature(int.from_bytes(raw[:32], "big"), int.from_bytes(raw[32:], "big"))
        public.verify(der, message, _ECDSA)
    except (InvalidSignature, CryptoError, ValueError, TypeError, AttributeError):
        return False
    return True


@dataclass(frozen=True)
class Envelope:
    ephemeral_key: bytes
    ciphertext: bytes
    auth_tag: bytes

    def to_bytes(self) -> bytes:
        return self.ephemeral_key + self.auth_tag + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Envelope":
        if len(raw) < _PUBKEY_LEN + _TAG_LEN:
            raise DecryptionError("envelope too short")
        return cls(
            raw[:_PUBKEY_LEN],
            raw[_PUBKEY_LEN + _TAG_LEN :],
            raw[_PUBKEY_LEN : _PUBKEY_LEN + _TAG_LEN],
        )


def _derive(shared: bytes, ephemeral_vk: bytes, recipient_vk: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(
        algorithm=hashes.SHA256(),
        length=44,
        salt=ephemeral_vk + recipient_vk,
        info=_ENVELOPE_INFO,
    ).derive(shared)
    return okm[:32], okm[32:]


def encrypt_for(recipient_vk: bytes, plaintext: bytes, rng: Optional[random.Random] = None) -> Envelope:
    """Encrypt ``plaintext`` so only the holder of ``recipient_vk``'s secret can read it.

    Passing ``rng`` draws the ephemeral key from it, which keeps seeded
    simulations deterministic.
    """
    recipient = load_verification_key(recipient_vk)
    if rng is None:
        ephemeral = ec.generate_private_key(CURVE)
    else:
        ephemeral = ec.derive_private_key(rng.getrandbits(256) % (CURVE_ORDER - 1) + 1, CURVE)
    ephemeral_vk = ephemeral.public_key().public_bytes(
        serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
    )
    key, iv = _derive(ephemeral.exchange(ec.ECDH(), recipient), ephemeral_vk, bytes(recipient_vk))
    sealed = AESGCM(key).encrypt(iv, plaintext, ephemeral_vk)
    return Envelope(ephemeral_vk, sealed[:-_TAG_LEN], sealed[-_TAG_LEN:])


def decrypt(envelope: Envelope, key: KeyPair) -> bytes:
    try:
        ephemeral = load_verification_key(envelope.ephemeral_key)
    except CryptoError as exc:
        raise DecryptionError(str(exc)) from None
    shared = key._private.exchange(ec.ECDH(), ephemeral)
    sym, iv = _derive(shared, envelope.ephemeral_key, key.verification_key)
    try:
        return AESGCM(sym).decrypt(iv, envelope.ciphertext + envelope.auth_tag, envelope.ephemeral_key)
    except InvalidTag:
        raise DecryptionError("authentication failed") from None


@dataclass(frozen=True)
class Nonce:
    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value <= _NONCE_MAX:
            raise ValueError("nonce must fit in 128 bits")

    def successor(self) -> "Nonce":
        if self.value == _NONCE_MAX:
            raise NonceOverflow("nonce successor would wrap around")
        return Nonce(self.value + 1)


class NonceSource:
    """Hands out 128-bit nonces that never repeat within one source."""

    def __init__(self, seed: Optional[int] = None):
        self._rng = random.Random(seed) if seed is not None else None
        self._issued: set[int] = set()

    def next(self) -> Nonce:
        while True:
            value = self._rng.getrandbits(128) if self._rng else secrets.randbits(128)
            if value not in self._issued and value != _NONCE_MAX:
                self._issued.add(value)
                return Nonce(value)


def random_bytes(n: int, rng: Optional[random.Random] = None) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.getrandbits(8 * n).to_bytes(n, "big")
