"""Simulated TEE identities, quotes, mutual attestation and code manifests.

Vendor roots are the only trust anchors.  A vendor root endorses each
platform's attestation identity key (AIK) and signs quotes binding a
measurement, 64 octets of caller data and the challenger's nonce.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .codec import DecodeError, Reader, Writer
from .crypto import (
    AeadKey,
    Digest,
    KeyShare,
    SeededRng,
    Signature,
    SigningKey,
    VerifyKey,
    hash_bytes,
    hash_parts,
    sign,
    verify,
)

REPORT_DATA_SIZE = 64
NONCE_SIZE = 16
QUOTE_MAGIC = b"HCQT"
MANIFEST_MAGIC = b"HCMF"
FORMAT_VERSION = 1


class Vendor(enum.IntEnum):
    A = 1
    B = 2
    C = 3

    @property
    def label(self) -> str:
        return f"Vendor{self.name}"

    @classmethod
    def parse(cls, text: str) -> "Vendor":
        text = text.strip()
        if text.startswith("Vendor"):
            text = text[len("Vendor"):]
        return cls[text.upper()]


class AttestationError(Exception):
    """A quote, handshake or manifest check failed; ``reason`` is a stable code."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class QuoteRejected(AttestationError):
    pass


class HandshakeFailed(AttestationError):
    pass


class CrossVendorRejected(AttestationError):
    pass


class UnendorsedIdentityError(AttestationError):
    def __init__(self, detail: str = "") -> None:
        super().__init__("unendorsed-identity", detail)


class ManifestError(AttestationError):
    pass


BAD_SIGNATURE = "bad-signature"
UNTRUSTED_VENDOR = "untrusted-vendor"
WRONG_MEASUREMENT = "wrong-measurement"
STALE_NONCE = "stale-nonce"
REPORT_MISMATCH = "report-mismatch"


def report_data(payload: bytes) -> bytes:
    """Fit ``payload`` into the fixed 64-octet report field (pad or hash)."""
    if len(payload) <= REPORT_DATA_SIZE:
        return payload.ljust(REPORT_DATA_SIZE, b"\x00")
    return hash_bytes(payload).data.ljust(REPORT_DATA_SIZE, b"\x00")


# -- vendor roots ---------------------------------------------------------------


@dataclass(frozen=True)
class VendorRoot:
    vendor: Vendor
    signing_key: SigningKey = field(repr=False)

    @classmethod
    def generate(cls, vendor: Vendor, rng: SeededRng) -> "VendorRoot":
        return cls(vendor, SigningKey.generate(rng))

    @property
    def verify_key(self) -> VerifyKey:
        return self.signing_key.verify_key

    def endorse(self, platform_id: str, aik: VerifyKey) -> Signature:
        return sign(self.signing_key, _endorsement_statement(self.vendor, platform_id, aik))


def _endorsement_statement(vendor: Vendor, platform_id: str, aik: VerifyKey) -> bytes:
    w = Writer().raw(b"aik-endorsement").u8(vendor).text(platform_id)
    aik.write(w)
    return w.getvalue()


TrustStore = Mapping[Vendor, VerifyKey]


def trust_store(roots: Iterable[VendorRoot]) -> dict[Vendor, VerifyKey]:
    return {r.vendor: r.verify_key for r in roots}


# -- code manifests -------------------------------------------------------------


@dataclass(frozen=True)
class CodeManifest:
    app_id: str
    version: str
    code_digest: Digest
    author_vk: VerifyKey
    author_signature: Signature

    @staticmethod
    def _body(app_id: str, version: str, code_digest: Digest, author_vk: VerifyKey) -> bytes:
        w = Writer().raw(MANIFEST_MAGIC).u8(FORMAT_VERSION).text(app_id).text(version)
        code_digest.write(w)
        author_vk.write(w)
        return w.getvalue()

    @classmethod
    def create(cls, app_id: str, version: str, code: bytes, author: SigningKey) -> "CodeManifest":
        digest = hash_bytes(code)
        body = cls._body(app_id, version, digest, author.verify_key)
        return cls(app_id, version, digest, author.verify_key, sign(author, body))

    def body(self) -> bytes:
        return self._body(self.app_id, self.version, self.code_digest, self.author_vk)

    def signature_valid(self) -> bool:
        return verify(self.author_vk, self.body(), self.author_signature)

    def encode(self) -> bytes:
        w = Writer().raw(self.body())
        self.author_signature.write(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "CodeManifest":
        r = Reader(data)
        r.magic(MANIFEST_MAGIC)
        if r.u8() != FORMAT_VERSION:
            raise DecodeError("unsupported manifest version")
        app_id, version = r.text(256), r.text(256)
        digest = Digest.read(r)
        vk = VerifyKey.read(r)
        sig = Signature.read(r)
        r.done()
        return cls(app_id, version, digest, vk, sig)

    @property
    def measurement(self) -> Digest:
        return hash_bytes(self.encode())


class ManifestRegistry:
    """Single-writer store of signed manifests keyed by (app_id, version)."""

    def __init__(self) -> None:
        self._by_version: dict[tuple[str, str], CodeManifest] = {}
        self._by_measurement: dict[Digest, CodeManifest] = {}

    def __contains__(self, measurement: Digest) -> bool:
        return measurement in self._by_measurement

    def get(self, measurement: Digest) -> CodeManifest | None:
        return self._by_measurement.get(measurement)

    def manifests(self) -> list[CodeManifest]:
        return list(self._by_version.values())

    def _store(self, manifest: CodeManifest) -> Digest:
        m = manifest.measurement
        self._by_version[(manifest.app_id, manifest.version)] = manifest
        self._by_measurement[m] = manifest
        return m


def register_manifest(manifest: CodeManifest, registry: ManifestRegistry) -> Digest:
    if not manifest.signature_valid():
        raise ManifestError("bad-author-signature", manifest.app_id)
    if (manifest.app_id, manifest.version) in registry._by_version:
        raise ManifestError("duplicate-manifest", f"{manifest.app_id} {manifest.version}")
    return registry._store(manifest)


# -- enclaves and quotes --------------------------------------------------------


@dataclass(frozen=True)
class EnclaveIdentity:
    """A simulated enclave.

    ``measurement`` is what the hardware reports; ``code_digest`` is the code
    actually loaded.  They agree unless the vendor is compromised.
    """

    platform_id: str
    vendor: Vendor
    measurement: Digest
    code_digest: Digest
    aik: SigningKey = field(repr=False)
    endorsement: Signature | None = field(repr=False)
    quoter: VendorRoot = field(repr=False)
    clock_rate: Fraction = Fraction(1)

    @classmethod
    def create(
        cls,
        platform_id: str,
        root: VendorRoot,
        manifest: CodeManifest,
        rng: SeededRng,
        clock_rate: Fraction = Fraction(1),
        endorse: bool = True,
    ) -> "EnclaveIdentity":
        aik = SigningKey.generate(rng)
        endorsement = root.endorse(platform_id, aik.verify_key) if endorse else None
        return cls(
            platform_id,
            root.vendor,
            manifest.measurement,
            manifest.code_digest,
            aik,
            endorsement,
            root,
            clock_rate,
        )

    @property
    def aik_vk(self) -> VerifyKey:
        return self.aik.verify_key

    def endorsed(self) -> bool:
        return self.endorsement is not None and verify(
            self.quoter.verify_key,
            _endorsement_statement(self.vendor, self.platform_id, self.aik_vk),
            self.endorsement,
        )

    def compute_report(self, challenge: bytes) -> bytes:
        """Deterministic self-test output of the loaded code over ``challenge``.

        Used for horizontal validation: enclaves running the same code agree.
        """
        return report_data(hash_parts(b"self-test", self.code_digest.data, challenge).data)


@dataclass(frozen=True)
class AttestationQuote:
    measurement: Digest
    vendor: Vendor
    platform_id: str
    report_data: bytes
    freshness_nonce: bytes
    signature: Signature

    @staticmethod
    def _body(measurement: Digest, vendor: Vendor, platform_id: str, rd: bytes, nonce: bytes) -> bytes:
        w = Writer().raw(QUOTE_MAGIC).u8(FORMAT_VERSION)
        measurement.write(w)
        w.u8(vendor).text(platform_id).fixed(rd, REPORT_DATA_SIZE).fixed(nonce, NONCE_SIZE)
        return w.getvalue()

    def body(self) -> bytes:
        return self._body(
            self.measurement, self.vendor, self.platform_id, self.report_data, self.freshness_nonce
        )

    def encode(self) -> bytes:
        w = Writer().raw(self.body())
        self.signature.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "AttestationQuote":
        r.magic(QUOTE_MAGIC)
        if r.u8() != FORMAT_VERSION:
            raise DecodeError("unsupported quote version")
        measurement = Digest.read(r)
        vendor_code = r.u8()
        try:
            vendor = Vendor(vendor_code)
        except ValueError as exc:
            raise DecodeError(f"unknown vendor {vendor_code}") from exc
        platform_id = r.text(256)
        rd = r.fixed(REPORT_DATA_SIZE)
        nonce = r.fixed(NONCE_SIZE)
        sig = Signature.read(r)
        return cls(measurement, vendor, platform_id, rd, nonce, sig)

    @classmethod
    def decode(cls, data: bytes) -> "AttestationQuote":
        r = Reader(data)
        q = cls.read(r)
        r.done()
        return q


def generate_quote(identity: EnclaveIdentity, report: bytes, nonce: bytes) -> AttestationQuote:
    if not identity.endorsed():
        raise UnendorsedIdentityError(identity.platform_id)
    if len(report) != REPORT_DATA_SIZE:
        report = report_data(report)
    if len(nonce) != NONCE_SIZE:
        raise ValueError("freshness nonce must be 16 octets")
    body = AttestationQuote._body(identity.measurement, identity.vendor, identity.platform_id, report, nonce)
    return AttestationQuote(
        identity.measurement,
        identity.vendor,
        identity.platform_id,
        report,
        nonce,
        sign(identity.quoter.signing_key, body),
    )


def verify_quote(
    quote: AttestationQuote,
    expected_measurement: Digest,
    trusted_vendors: TrustStore,
    nonce: bytes,
) -> None:
    """Raise :class:`QuoteRejected` unless every binding of ``quote`` holds."""
    root = trusted_vendors.get(quote.vendor)
    if root is None:
        raise QuoteRejected(UNTRUSTED_VENDOR, quote.vendor.label)
    if not verify(root, quote.body(), quote.signature):
        raise QuoteRejected(BAD_SIGNATURE, quote.platform_id)
    if quote.measurement != expected_measurement:
        raise QuoteRejected(WRONG_MEASUREMENT, quote.platform_id)
    if quote.freshness_nonce != nonce:
        raise QuoteRejected(STALE_NONCE, quote.platform_id)


def quote_accepted(
    quote: AttestationQuote, expected_measurement: Digest, trusted_vendors: TrustStore, nonce: bytes
) -> bool:
    try:
        verify_quote(quote, expected_measurement, trusted_vendors, nonce)
    except QuoteRejected:
        return False
    return True


# -- mutual attestation (identify friend or foe) ---------------------------------


@dataclass(frozen=True)
class IffHello:
    platform_id: str
    nonce: bytes


@dataclass(frozen=True)
class IffEvidence:
    platform_id: str
    vendor: Vendor
    aik_vk: VerifyKey
    endorsement: Signature
    key_share: bytes
    quote: AttestationQuote


@dataclass(frozen=True)
class PeerTrust:
    local_id: str
    peer_id: str
    peer_vendor: Vendor
    peer_aik: VerifyKey
    channel_key: AeadKey = field(repr=False)
    transcript: Digest


def _iff_binding(platform_id: str, aik: VerifyKey, key_share: bytes) -> bytes:
    w = Writer().raw(b"iff").text(platform_id)
    aik.write(w)
    w.blob(key_share)
    return report_data(hash_bytes(w.getvalue()).data)


class IffParty:
    """One side of the mutual attestation handshake.

    Message flow: both sides send :meth:`hello`, each answers the other's
    nonce with :meth:`evidence`, and :meth:`accept` checks the peer's evidence
    and derives the pairwise channel key.
    """

    def __init__(self, identity: EnclaveIdentity, rng: SeededRng) -> None:
        self.identity = identity
        self._nonce = rng.read(NONCE_SIZE)
        self._share = KeyShare.generate(rng)
        self._sent_share: bytes | None = None

    def hello(self) -> IffHello:
        return IffHello(self.identity.platform_id, self._nonce)

    def evidence(self, peer_hello: IffHello) -> IffEvidence:
        ident = self.identity
        share = self._share.public
        self._sent_share = share
        quote = generate_quote(ident, _iff_binding(ident.platform_id, ident.aik_vk, share), peer_hello.nonce)
        if ident.endorsement is None:
            raise UnendorsedIdentityError(ident.platform_id)
        return IffEvidence(ident.platform_id, ident.vendor, ident.aik_vk, ident.endorsement, share, quote)

    def accept(
        self, evidence: IffEvidence, expected_measurement: Digest, trusted_vendors: TrustStore
    ) -> PeerTrust:
        try:
            verify_quote(evidence.quote, expected_measurement, trusted_vendors, self._nonce)
        except QuoteRejected as exc:
            raise HandshakeFailed(exc.reason, evidence.platform_id) from exc
        q = evidence.quote
        if q.platform_id != evidence.platform_id or q.vendor != evidence.vendor:
            raise HandshakeFailed(REPORT_MISMATCH, "quote does not name the presenting platform")
        if q.report_data != _iff_binding(evidence.platform_id, evidence.aik_vk, evidence.key_share):
            raise HandshakeFailed(REPORT_MISMATCH, "quote does not bind the presented key share")
        root = trusted_vendors[evidence.vendor]
        if not verify(root, _endorsement_statement(evidence.vendor, evidence.platform_id, evidence.aik_vk), evidence.endorsement):
            raise HandshakeFailed("unendorsed-identity", evidence.platform_id)
        if self._sent_share is None:
            raise HandshakeFailed("protocol-order", "evidence must be sent before accepting")
        shared = self._share.exchange(evidence.key_share)
        ids = sorted([self.identity.platform_id, evidence.platform_id])
        shares = sorted([self._sent_share, evidence.key_share])
        transcript = hash_parts(b"iff-transcript", *(i.encode() for i in ids), *shares)
        key = AeadKey.derive(b"pairwise", shared, transcript.data)
        return PeerTrust(
            self.identity.platform_id, evidence.platform_id, evidence.vendor, evidence.aik_vk, key, transcript
        )


def mutual_attest(
    a: EnclaveIdentity,
    b: EnclaveIdentity,
    expected_measurement: Digest,
    trusted_vendors: TrustStore,
    rng: SeededRng,
) -> tuple[PeerTrust, PeerTrust]:
    """Run both directions of the handshake; returns (a's view, b's view)."""
    pa, pb = IffParty(a, rng), IffParty(b, rng)
    ha, hb = pa.hello(), pb.hello()
    ev_a, ev_b = pa.evidence(hb), pb.evidence(ha)
    trust_a = pa.accept(ev_b, expected_measurement, trusted_vendors)
    trust_b = pb.accept(ev_a, expected_measurement, trusted_vendors)
    return trust_a, trust_b


# -- horizontal (cross-vendor) validation ---------------------------------------


def cross_vendor_validate(
    quotes: Sequence[AttestationQuote],
    expected_measurement: Digest,
    trusted_vendors: TrustStore,
    nonce: bytes,
) -> None:
    """Require >= 2 vendors, all quotes valid and all binding the same report.

    With three or more vendors every quote must agree (unanimity).
    """
    if len(quotes) < 2:
        raise CrossVendorRejected("single-vendor", "fewer than two quotes")
    for q in quotes:
        try:
            verify_quote(q, expected_measurement, trusted_vendors, nonce)
        except QuoteRejected as exc:
            raise CrossVendorRejected("invalid-member", f"{q.platform_id}: {exc.reason}") from exc
    if len({q.vendor for q in quotes}) < 2:
        raise CrossVendorRejected("single-vendor", quotes[0].vendor.label)
    first = quotes[0]
    for q in quotes[1:]:
        if (q.measurement, q.report_data) != (first.measurement, first.report_data):
            raise CrossVendorRejected("mismatched-report", q.platform_id)
