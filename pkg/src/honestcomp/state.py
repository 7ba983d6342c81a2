"""Ledger key layout and the canonical encodings of values stored under it.

Keys are short byte strings (the trie caps them at 64 octets), so anything
keyed by two digests is hashed into one.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .attestation import Vendor
from .codec import DecodeError, Reader, Writer
from .crypto import Digest, VerifyKey, hash_parts
from .mpt_ledger import BlobRef

MAX_LABEL = 56


def prov_key(data_id: Digest) -> bytes:
    return b"prov/" + data_id.data


def data_key(data_id: Digest) -> bytes:
    return b"data/" + data_id.data


def member_key(platform_id: str) -> bytes:
    return b"member/" + platform_id.encode()


def code_key(measurement: Digest) -> bytes:
    return b"code/" + measurement.data


def prog_key(code_digest: Digest) -> bytes:
    return b"prog/" + code_digest.data


def source_key(label: str) -> bytes:
    raw = label.encode()
    if not raw or len(raw) > MAX_LABEL:
        raise ValueError("source label must be 1..56 octets")
    return b"src/" + raw


def grant_id(data_id: Digest, grantee: Digest) -> Digest:
    return hash_parts(b"grant", data_id.data, grantee.data)


def grant_key(data_id: Digest, grantee: Digest) -> bytes:
    return b"grant/" + grant_id(data_id, grantee).data


def revocation_key(data_id: Digest, grantee: Digest) -> bytes:
    return b"rev/" + grant_id(data_id, grantee).data


def proc_key(action_id: Digest) -> bytes:
    return b"proc/" + action_id.data


def tx_key(tx_id: Digest) -> bytes:
    return b"tx/" + tx_id.data


def app_key(key: bytes) -> bytes:
    if not key or len(key) > 60:
        raise ValueError("application key must be 1..60 octets")
    return b"app/" + key


class MemberStatus(enum.IntEnum):
    ACTIVE = 0
    EXCLUDED = 1


@dataclass(frozen=True)
class MemberInfo:
    platform_id: str
    vendor: Vendor
    aik: VerifyKey
    status: MemberStatus = MemberStatus.ACTIVE
    reason: str = ""
    term: int = 0
    evidence: str = ""

    def encode(self) -> bytes:
        w = Writer().text(self.platform_id).u8(self.vendor)
        self.aik.write(w)
        w.u8(self.status).text(self.reason).u64(self.term).text(self.evidence)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "MemberInfo":
        r = Reader(data)
        pid = r.text(MAX_LABEL)
        try:
            vendor = Vendor(r.u8())
            aik = VerifyKey.read(r)
            status = MemberStatus(r.u8())
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        reason, term, evidence = r.text(64), r.u64(), r.text(256)
        r.done()
        return cls(pid, vendor, aik, status, reason, term, evidence)

    def excluded(self, reason: str, term: int, evidence: str) -> "MemberInfo":
        return MemberInfo(self.platform_id, self.vendor, self.aik, MemberStatus.EXCLUDED, reason, term, evidence)


@dataclass(frozen=True)
class DatumValue:
    """Stored ciphertext of a datum (inline, or a reference to an external blob)."""

    owner: Digest
    body: bytes
    external: bool = False

    def encode(self) -> bytes:
        w = Writer()
        self.owner.write(w)
        w.flag(self.external).blob(self.body)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "DatumValue":
        r = Reader(data)
        owner = Digest.read(r)
        external = r.flag()
        body = r.blob()
        r.done()
        return cls(owner, body, external)

    def blob_ref(self) -> BlobRef | None:
        return BlobRef.decode(self.body) if self.external else None


@dataclass(frozen=True)
class GrantState:
    data_id: Digest
    grantee: Digest
    grantee_public: bytes
    revoked: bool = False
    revoked_block: int = 0

    def encode(self) -> bytes:
        w = Writer()
        self.data_id.write(w)
        self.grantee.write(w)
        w.fixed(self.grantee_public, 32).flag(self.revoked).u64(self.revoked_block)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "GrantState":
        r = Reader(data)
        data_id, grantee = Digest.read(r), Digest.read(r)
        public, revoked, block = r.fixed(32), r.flag(), r.u64()
        r.done()
        return cls(data_id, grantee, public, revoked, block)


@dataclass(frozen=True)
class RevocationRecord:
    data_id: Digest
    grantee: Digest
    block_index: int

    def encode(self) -> bytes:
        w = Writer().raw(b"revoked")
        self.data_id.write(w)
        self.grantee.write(w)
        w.u64(self.block_index)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "RevocationRecord":
        r = Reader(data)
        r.magic(b"revoked")
        data_id, grantee, block = Digest.read(r), Digest.read(r), r.u64()
        r.done()
        return cls(data_id, grantee, block)


class ProposalStatus(enum.IntEnum):
    PENDING = 0
    APPROVED = 1
    EXECUTED = 2
    EXPIRED = 3

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class ProposalState:
    action: bytes
    approvers: tuple[Digest, ...]
    threshold: int
    approvals: tuple[Digest, ...]
    status: ProposalStatus
    created_block: int
    expiry_blocks: int

    def encode(self) -> bytes:
        w = Writer().blob(self.action).u16(self.threshold).u16(len(self.approvers))
        for a in self.approvers:
            a.write(w)
        w.u16(len(self.approvals))
        for a in self.approvals:
            a.write(w)
        w.u8(self.status).u64(self.created_block).u64(self.expiry_blocks)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "ProposalState":
        r = Reader(data)
        action, threshold = r.blob(), r.u16()
        approvers = tuple(Digest.read(r) for _ in range(r.u16()))
        approvals = tuple(Digest.read(r) for _ in range(r.u16()))
        try:
            status = ProposalStatus(r.u8())
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        created, expiry = r.u64(), r.u64()
        r.done()
        return cls(action, approvers, threshold, approvals, status, created, expiry)
