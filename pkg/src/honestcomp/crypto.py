"""Algorithm-agile primitives: hashing, signatures, AEAD and seeded randomness.

Every value carries a one-octet ``algorithm_id`` so a suite can be swapped
without touching callers.  Nothing in this module reads the clock or the OS
entropy pool; keys are derived from caller-supplied seed material.
"""

from __future__ import annotations

import functools
import hashlib
import hmac
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305

from .codec import DecodeError, Reader, Writer

HASH_SHA256 = 1
HASH_BLAKE2B_256 = 2

SIG_ED25519 = 1

AEAD_CHACHA20_POLY1305 = 1
AEAD_AES256_GCM = 2

DEFAULT_HASH = HASH_SHA256
DEFAULT_SIG = SIG_ED25519
DEFAULT_AEAD = AEAD_CHACHA20_POLY1305

NONCE_SIZE = 12
TAG_SIZE = 16
AEAD_KEY_SIZE = 32

_HASH_SIZES = {HASH_SHA256: 32, HASH_BLAKE2B_256: 32}
_SIG_SIZES = {SIG_ED25519: 64}
_AEAD_CIPHERS = {AEAD_CHACHA20_POLY1305: ChaCha20Poly1305, AEAD_AES256_GCM: AESGCM}


class MalformedKeyError(ValueError):
    pass


class AuthenticationError(Exception):
    """AEAD open failed: wrong key, wrong AAD or modified ciphertext."""


def _hasher(algorithm_id: int):
    if algorithm_id == HASH_SHA256:
        return hashlib.sha256()
    if algorithm_id == HASH_BLAKE2B_256:
        return hashlib.blake2b(digest_size=32)
    raise ValueError(f"unknown hash algorithm {algorithm_id}")


def hash_size(algorithm_id: int = DEFAULT_HASH) -> int:
    return _HASH_SIZES[algorithm_id]


@dataclass(frozen=True, slots=True)
class Digest:
    algorithm_id: int
    data: bytes

    def __post_init__(self) -> None:
        if len(self.data) != _HASH_SIZES.get(self.algorithm_id, -1):
            raise ValueError(
                f"digest length {len(self.data)} does not match algorithm {self.algorithm_id}"
            )

    def hex(self) -> str:
        return self.data.hex()

    @classmethod
    def fromhex(cls, text: str, algorithm_id: int = DEFAULT_HASH) -> "Digest":
        return cls(algorithm_id, bytes.fromhex(text))

    def write(self, w: Writer) -> None:
        w.u8(self.algorithm_id).fixed(self.data, len(self.data))

    @classmethod
    def read(cls, r: Reader) -> "Digest":
        alg = r.u8()
        size = _HASH_SIZES.get(alg)
        if size is None:
            raise DecodeError(f"unknown hash algorithm {alg}")
        return cls(alg, r.fixed(size))


def hash_bytes(data: bytes, algorithm_id: int = DEFAULT_HASH) -> Digest:
    h = _hasher(algorithm_id)
    h.update(data)
    return Digest(algorithm_id, h.digest())


def hash_parts(*parts: bytes, algorithm_id: int = DEFAULT_HASH) -> Digest:
    """Hash of the length-prefixed concatenation of ``parts`` (unambiguous)."""
    w = Writer()
    for p in parts:
        w.blob(p)
    return hash_bytes(w.getvalue(), algorithm_id)


def mac(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()[:16]


# -- signatures ---------------------------------------------------------------


@functools.lru_cache(maxsize=4096)
def _ed25519_private(material: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(material)


@functools.lru_cache(maxsize=4096)
def _ed25519_public(material: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(material)


@dataclass(frozen=True, slots=True)
class Signature:
    algorithm_id: int
    data: bytes

    def write(self, w: Writer) -> None:
        w.u8(self.algorithm_id).fixed(self.data, len(self.data))

    @classmethod
    def read(cls, r: Reader) -> "Signature":
        alg = r.u8()
        size = _SIG_SIZES.get(alg)
        if size is None:
            raise DecodeError(f"unknown signature algorithm {alg}")
        return cls(alg, r.fixed(size))

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()


@dataclass(frozen=True, slots=True)
class VerifyKey:
    algorithm_id: int
    material: bytes
    fingerprint: Digest = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.algorithm_id != SIG_ED25519:
            raise MalformedKeyError(f"unknown signature algorithm {self.algorithm_id}")
        if len(self.material) != 32:
            raise MalformedKeyError("ed25519 verify key must be 32 octets")
        try:
            _ed25519_public(self.material)
        except ValueError as exc:
            raise MalformedKeyError(str(exc)) from exc
        object.__setattr__(self, "fingerprint", hash_bytes(self.encode()))

    def write(self, w: Writer) -> None:
        w.u8(self.algorithm_id).blob(self.material)

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "VerifyKey":
        alg = r.u8()
        material = r.blob(64)
        try:
            return cls(alg, material)
        except MalformedKeyError as exc:
            raise DecodeError(str(exc)) from exc

    @classmethod
    def decode(cls, data: bytes) -> "VerifyKey":
        r = Reader(data)
        vk = cls.read(r)
        r.done()
        return vk


@dataclass(frozen=True, slots=True)
class SigningKey:
    algorithm_id: int
    material: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if self.algorithm_id != SIG_ED25519:
            raise MalformedKeyError(f"unknown signature algorithm {self.algorithm_id}")
        if len(self.material) != 32:
            raise MalformedKeyError("ed25519 signing key seed must be 32 octets")

    @classmethod
    def from_seed(cls, seed: bytes, algorithm_id: int = DEFAULT_SIG) -> "SigningKey":
        return cls(algorithm_id, bytes(seed))

    @classmethod
    def generate(cls, rng: "SeededRng", algorithm_id: int = DEFAULT_SIG) -> "SigningKey":
        return cls(algorithm_id, rng.read(32))

    @property
    def verify_key(self) -> VerifyKey:
        return _derive_verify_key(self.algorithm_id, self.material)


@functools.lru_cache(maxsize=4096)
def _derive_verify_key(algorithm_id: int, material: bytes) -> VerifyKey:
    pub = _ed25519_private(material).public_key()
    raw = pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return VerifyKey(algorithm_id, raw)


def sign(sk: SigningKey, msg: bytes) -> Signature:
    if not isinstance(sk, SigningKey):
        raise MalformedKeyError("not a signing key")
    return Signature(sk.algorithm_id, _ed25519_private(sk.material).sign(msg))


# Memoised: verification is a pure function of its inputs, and every replica
# in a simulated cluster checks the same signatures.
@functools.lru_cache(maxsize=1 << 16)
def _verify_cached(alg: int, material: bytes, msg: bytes, sig_alg: int, sig: bytes) -> bool:
    if alg != sig_alg or len(sig) != _SIG_SIZES.get(sig_alg, -1):
        return False
    try:
        _ed25519_public(material).verify(sig, msg)
    except InvalidSignature:
        return False
    return True


def verify(vk: VerifyKey, msg: bytes, sig: Signature) -> bool:
    if not isinstance(vk, VerifyKey):
        raise MalformedKeyError("not a verify key")
    if not isinstance(sig, Signature):
        return False
    return _verify_cached(vk.algorithm_id, vk.material, bytes(msg), sig.algorithm_id, sig.data)


# -- key agreement --------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class KeyShare:
    """Ephemeral X25519 secret used for the attestation-bound key agreements."""

    secret: bytes = field(repr=False)

    @classmethod
    def generate(cls, rng: "SeededRng") -> "KeyShare":
        return cls(rng.read(32))

    @property
    def public(self) -> bytes:
        priv = X25519PrivateKey.from_private_bytes(self.secret)
        return priv.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    def exchange(self, peer_public: bytes) -> bytes:
        priv = X25519PrivateKey.from_private_bytes(self.secret)
        try:
            return priv.exchange(X25519PublicKey.from_public_bytes(peer_public))
        except ValueError as exc:
            raise MalformedKeyError(str(exc)) from exc


# -- authenticated encryption -------------------------------------------------


@dataclass(frozen=True, slots=True)
class AeadKey:
    key: bytes = field(repr=False)
    algorithm_id: int = DEFAULT_AEAD

    def __post_init__(self) -> None:
        if len(self.key) != AEAD_KEY_SIZE:
            raise MalformedKeyError("AEAD key must be 32 octets")
        if self.algorithm_id not in _AEAD_CIPHERS:
            raise MalformedKeyError(f"unknown AEAD algorithm {self.algorithm_id}")

    @classmethod
    def derive(cls, *parts: bytes, algorithm_id: int = DEFAULT_AEAD) -> "AeadKey":
        return cls(hash_parts(b"aead-key", *parts).data, algorithm_id)


@dataclass(frozen=True, slots=True)
class Ciphertext:
    nonce: bytes
    body: bytes
    tag: bytes
    algorithm_id: int = DEFAULT_AEAD

    def write(self, w: Writer) -> None:
        w.u8(self.algorithm_id).fixed(self.nonce, NONCE_SIZE).blob(self.body).fixed(self.tag, TAG_SIZE)

    @classmethod
    def read(cls, r: Reader) -> "Ciphertext":
        alg = r.u8()
        nonce = r.fixed(NONCE_SIZE)
        body = r.blob()
        tag = r.fixed(TAG_SIZE)
        return cls(nonce, body, tag, alg)

    def encode(self) -> bytes:
        w = Writer()
        self.write(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Ciphertext":
        r = Reader(data)
        ct = cls.read(r)
        r.done()
        return ct


def counter_nonce(counter: int, prefix: bytes = b"\x00\x00\x00\x00") -> bytes:
    return prefix + counter.to_bytes(8, "big")


def aead_seal(key: AeadKey, nonce: bytes, aad: bytes, plaintext: bytes) -> Ciphertext:
    if len(nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 12 octets")
    sealed = _AEAD_CIPHERS[key.algorithm_id](key.key).encrypt(nonce, plaintext, aad)
    return Ciphertext(bytes(nonce), sealed[:-TAG_SIZE], sealed[-TAG_SIZE:], key.algorithm_id)


def aead_open(key: AeadKey, aad: bytes, ct: Ciphertext) -> bytes:
    if ct.algorithm_id != key.algorithm_id or len(ct.nonce) != NONCE_SIZE or len(ct.tag) != TAG_SIZE:
        raise AuthenticationError("ciphertext does not match key parameters")
    try:
        return _AEAD_CIPHERS[key.algorithm_id](key.key).decrypt(ct.nonce, ct.body + ct.tag, aad)
    except InvalidTag as exc:
        raise AuthenticationError("authentication failed") from exc


# -- deterministic randomness -------------------------------------------------

_RNG_BLOCK = 32


def rng_stream(seed: bytes, counter: int, n_octets: int) -> bytes:
    """Octets ``[32*counter, 32*counter + n)`` of the SHA-256 counter-mode stream."""
    if n_octets < 0:
        raise ValueError("n_octets must be non-negative")
    if len(seed) != 32:
        raise ValueError("seed must be 32 octets")
    out = bytearray()
    block = counter
    while len(out) < n_octets:
        out += hashlib.sha256(b"honestcomp.rng" + seed + block.to_bytes(8, "big")).digest()
        block += 1
    return bytes(out[:n_octets])


class SeededRng:
    """Stateful cursor over :func:`rng_stream`; ``counter`` counts consumed blocks."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: bytes, counter: int = 0) -> None:
        if len(seed) != 32:
            raise ValueError("seed must be 32 octets")
        self.seed = bytes(seed)
        self.counter = counter

    @classmethod
    def from_int(cls, seed: int) -> "SeededRng":
        return cls(hash_bytes(b"honestcomp.seed" + seed.to_bytes(16, "big", signed=True)).data)

    def fork(self, label: str) -> "SeededRng":
        return SeededRng(hash_parts(b"fork", self.seed, label.encode()).data)

    def read(self, n: int) -> bytes:
        out = rng_stream(self.seed, self.counter, n)
        self.counter += -(-n // _RNG_BLOCK)
        return out

    def randbelow(self, bound: int) -> int:
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - (1 << 64) % bound
        while True:
            v = int.from_bytes(self.read(8), "big")
            if v < limit:
                return v % bound

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        return lo + self.randbelow(hi - lo + 1)

    def chance(self, numerator: int, denominator: int) -> bool:
        return self.randbelow(denominator) < numerator
