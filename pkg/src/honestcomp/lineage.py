"""Provenance records, lineage graphs, offline audit bundles and access grants.

Every datum has one provenance record stored at ``prov/<data_id>``.  A record
is signed by the producing enclave's AIK; ingress records additionally carry
the data source's signature over (payload digest, source label).  An auditor
holding only a root hash and a :class:`LineageBundle` can check the whole
ancestry offline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Protocol

from .codec import DecodeError, Reader, Writer
from .crypto import (
    AeadKey,
    Ciphertext,
    Digest,
    KeyShare,
    Signature,
    SigningKey,
    VerifyKey,
    aead_open,
    hash_parts,
    sign,
    verify,
)
from .mpt_ledger import InclusionProof, ProofRejected, Trie, verify_proof
from .state import (
    MemberInfo,
    code_key,
    member_key,
    prov_key,
    source_key,
)

RECORD_MAGIC = b"HCPR"
BUNDLE_MAGIC = b"HCLB"
FORMAT_VERSION = 1

INGRESS = "external-ingress"
DERIVED = "derived"


class LineageError(Exception):
    def __init__(self, code: str, detail: str = "") -> None:
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


def ingress_statement(payload_digest: Digest, source_label: str) -> bytes:
    w = Writer().raw(b"ingress")
    payload_digest.write(w)
    return w.text(source_label).getvalue()


def derived_label(code_measurement: Digest) -> str:
    return "derived:" + code_measurement.hex()


def compute_data_id(payload_digest: Digest, source_label: str, logical_time: tuple[int, int]) -> Digest:
    term, index = logical_time
    return hash_parts(
        b"data-id",
        payload_digest.data,
        source_label.encode(),
        term.to_bytes(8, "big"),
        index.to_bytes(8, "big"),
    )


@dataclass(frozen=True)
class ProvenanceRecord:
    data_id: Digest
    origin: str
    source_label: str
    payload_digest: Digest
    input_ids: tuple[Digest, ...]
    code_measurement: Digest
    block_index: int
    logical_time: tuple[int, int]
    producer: str
    client_vk: VerifyKey | None
    client_sig: Signature | None
    signature: Signature | None = None

    def __post_init__(self) -> None:
        if self.origin == INGRESS:
            if self.input_ids or self.client_vk is None or self.client_sig is None:
                raise ValueError("ingress records have no inputs and carry a client signature")
        elif self.origin == DERIVED:
            if not self.input_ids or self.client_vk is not None or self.client_sig is not None:
                raise ValueError("derived records have inputs and no client signature")
        else:
            raise ValueError(f"unknown origin {self.origin!r}")

    def body(self) -> bytes:
        w = Writer().raw(RECORD_MAGIC).u8(FORMAT_VERSION)
        self.data_id.write(w)
        w.u8(0 if self.origin == INGRESS else 1).text(self.source_label)
        self.payload_digest.write(w)
        w.u16(len(self.input_ids))
        for i in self.input_ids:
            i.write(w)
        self.code_measurement.write(w)
        w.u64(self.block_index).u64(self.logical_time[0]).u64(self.logical_time[1])
        w.text(self.producer)
        if self.origin == INGRESS:
            self.client_vk.write(w)
            self.client_sig.write(w)
        return w.getvalue()

    @property
    def record_id(self) -> Digest:
        return hash_parts(b"record", self.body())

    def signed(self, producer_key: SigningKey) -> "ProvenanceRecord":
        return _replace_signature(self, sign(producer_key, self.body()))

    def with_signature(self, sig: Signature) -> "ProvenanceRecord":
        return _replace_signature(self, sig)

    def signature_valid(self, producer_vk: VerifyKey) -> bool:
        return self.signature is not None and verify(producer_vk, self.body(), self.signature)

    def client_signature_valid(self) -> bool:
        if self.origin != INGRESS:
            return True
        return verify(self.client_vk, ingress_statement(self.payload_digest, self.source_label), self.client_sig)

    def encode(self) -> bytes:
        if self.signature is None:
            raise ValueError("record is unsigned")
        w = Writer().raw(self.body())
        self.signature.write(w)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "ProvenanceRecord":
        r.magic(RECORD_MAGIC)
        if r.u8() != FORMAT_VERSION:
            raise DecodeError("unsupported record version")
        data_id = Digest.read(r)
        kind = r.u8()
        if kind > 1:
            raise DecodeError("unknown origin")
        label = r.text(256)
        payload_digest = Digest.read(r)
        inputs = tuple(Digest.read(r) for _ in range(r.u16()))
        code = Digest.read(r)
        block, term, index = r.u64(), r.u64(), r.u64()
        producer = r.text(64)
        client_vk = client_sig = None
        if kind == 0:
            client_vk, client_sig = VerifyKey.read(r), Signature.read(r)
        sig = Signature.read(r)
        try:
            return cls(
                data_id, INGRESS if kind == 0 else DERIVED, label, payload_digest, inputs, code,
                block, (term, index), producer, client_vk, client_sig, sig,
            )
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc

    @classmethod
    def decode(cls, data: bytes) -> "ProvenanceRecord":
        r = Reader(data)
        rec = cls.read(r)
        r.done()
        return rec

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id.hex(),
            "data_id": self.data_id.hex(),
            "origin": self.origin,
            "inputs": [i.hex() for i in self.input_ids],
            "code": self.code_measurement.hex(),
            "block": self.block_index,
            "time": list(self.logical_time),
            "producer": self.producer,
        }


def _replace_signature(rec: ProvenanceRecord, sig: Signature) -> ProvenanceRecord:
    return ProvenanceRecord(
        rec.data_id, rec.origin, rec.source_label, rec.payload_digest, rec.input_ids,
        rec.code_measurement, rec.block_index, rec.logical_time, rec.producer,
        rec.client_vk, rec.client_sig, sig,
    )


# -- lineage graphs -----------------------------------------------------------------


class LedgerView(Protocol):
    def get(self, key: bytes) -> bytes | None: ...


def load_record(view: LedgerView, data_id: Digest) -> ProvenanceRecord | None:
    raw = view.get(prov_key(data_id))
    return None if raw is None else ProvenanceRecord.decode(raw)


@dataclass(frozen=True)
class LineageGraph:
    nodes: tuple[ProvenanceRecord, ...]
    edges: tuple[tuple[Digest, Digest], ...]

    @property
    def roots(self) -> tuple[ProvenanceRecord, ...]:
        return tuple(n for n in self.nodes if n.origin == INGRESS)

    def to_json(self) -> str:
        doc = {
            "nodes": [n.to_json() for n in self.nodes],
            "edges": [[a.hex(), b.hex()] for a, b in self.edges],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _order_key(rec: ProvenanceRecord) -> tuple:
    return (rec.logical_time, rec.record_id.data)


def trace_lineage(view: LedgerView, data_id: Digest) -> LineageGraph:
    """Ancestor closure of ``data_id``, ordered by logical time then record id."""
    found: dict[Digest, ProvenanceRecord] = {}
    state: dict[Digest, int] = {}  # 1 = on stack, 2 = done

    def visit(did: Digest) -> None:
        mark = state.get(did)
        if mark == 2:
            return
        if mark == 1:
            raise LineageError("cycle", did.hex())
        rec = load_record(view, did)
        if rec is None:
            raise LineageError("unknown-data-id", did.hex())
        state[did] = 1
        for parent in rec.input_ids:
            visit(parent)
        state[did] = 2
        found[did] = rec

    visit(data_id)
    nodes = tuple(sorted(found.values(), key=_order_key))
    edges = sorted(
        ((p, rec.data_id) for rec in nodes for p in rec.input_ids),
        key=lambda e: (_order_key(found[e[1]]), e[0].data),
    )
    return LineageGraph(nodes, tuple(edges))


# -- offline audit bundles ------------------------------------------------------------


@dataclass(frozen=True)
class LineageBundle:
    data_id: Digest
    records: tuple[ProvenanceRecord, ...]
    proofs: tuple[InclusionProof, ...]

    def encode(self) -> bytes:
        w = Writer().raw(BUNDLE_MAGIC).u8(FORMAT_VERSION)
        self.data_id.write(w)
        w.u32(len(self.records))
        for rec in self.records:
            w.blob(rec.encode())
        w.u32(len(self.proofs))
        for p in self.proofs:
            w.blob(p.encode())
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "LineageBundle":
        r = Reader(data)
        r.magic(BUNDLE_MAGIC)
        if r.u8() != FORMAT_VERSION:
            raise DecodeError("unsupported bundle version")
        data_id = Digest.read(r)
        records = tuple(ProvenanceRecord.decode(r.blob()) for _ in range(r.u32()))
        proofs = tuple(InclusionProof.decode(r.blob()) for _ in range(r.u32()))
        r.done()
        return cls(data_id, records, proofs)


def build_bundle(trie: Trie, data_id: Digest, extra_keys: Iterable[bytes] = ()) -> LineageBundle:
    graph = trace_lineage(trie, data_id)
    keys: list[bytes] = []
    for rec in graph.nodes:
        keys += [prov_key(rec.data_id), member_key(rec.producer), code_key(rec.code_measurement)]
        if rec.origin == INGRESS:
            keys.append(source_key(rec.source_label))
    keys += list(extra_keys)
    unique = sorted(set(keys))
    return LineageBundle(data_id, graph.nodes, tuple(trie.prove(k) for k in unique))


@dataclass(frozen=True)
class ProvenanceVerdict:
    accepted: bool
    reason: str = ""
    record: str = ""

    def __bool__(self) -> bool:
        return self.accepted

    def to_json(self) -> dict:
        out = {"verdict": "accept" if self.accepted else "reject"}
        if not self.accepted:
            out.update(reason=self.reason, record=self.record)
        return out


def _key_text(key: bytes) -> str:
    prefix, sep, rest = key.partition(b"/")
    if sep and prefix.isascii():
        return prefix.decode() + "/" + rest.hex()
    return key.hex()


def _reject(reason: str, record: str = "") -> ProvenanceVerdict:
    return ProvenanceVerdict(False, reason, record)


def verify_provenance(data_id: Digest, root: Digest, bundle: LineageBundle | bytes) -> ProvenanceVerdict:
    """Check the full ancestry of ``data_id`` against ``root`` using only the bundle."""
    if isinstance(bundle, (bytes, bytearray)):
        try:
            bundle = LineageBundle.decode(bytes(bundle))
        except (DecodeError, ValueError) as exc:
            return _reject("malformed", str(exc))
    if bundle.data_id != data_id:
        return _reject("unknown-data-id", data_id.hex())
    proven: dict[bytes, bytes | None] = {}
    for p in bundle.proofs:
        try:
            verify_proof(root, p)
        except ProofRejected as exc:
            return _reject("bad-proof", f"{_key_text(p.key)}: {exc.reason}")
        if p.key in proven:
            return _reject("malformed", "duplicate proof")
        proven[p.key] = p.value
    records: dict[Digest, ProvenanceRecord] = {}
    for rec in bundle.records:
        if rec.data_id in records:
            return _reject("malformed", "duplicate record")
        records[rec.data_id] = rec

    seen: set[Digest] = set()
    pending = [data_id]
    while pending:
        did = pending.pop()
        if did in seen:
            continue
        seen.add(did)
        rec = records.get(did)
        if rec is None:
            return _reject("missing-record", did.hex())
        rid = rec.record_id.hex()
        if proven.get(prov_key(did)) != rec.encode():
            return _reject("bad-proof", rid)
        member_raw = proven.get(member_key(rec.producer))
        if member_raw is None:
            return _reject("unknown-producer", rid)
        try:
            member = MemberInfo.decode(member_raw)
        except DecodeError:
            return _reject("unknown-producer", rid)
        if not rec.signature_valid(member.aik):
            return _reject("bad-signature", rid)
        if proven.get(code_key(rec.code_measurement)) is None:
            return _reject("unregistered-code", rid)
        if rec.origin == INGRESS:
            if proven.get(source_key(rec.source_label)) != rec.client_vk.encode():
                return _reject("unregistered-source", rid)
            if not rec.client_signature_valid():
                return _reject("bad-client-signature", rid)
            label = rec.source_label
        else:
            label = derived_label(rec.code_measurement)
            if rec.source_label != label:
                return _reject("bad-data-id", rid)
        if compute_data_id(rec.payload_digest, label, rec.logical_time) != did:
            return _reject("bad-data-id", rid)
        for parent in rec.input_ids:
            parent_rec = records.get(parent)
            if parent_rec is not None and parent_rec.logical_time >= rec.logical_time:
                return _reject("cycle", rid)
            pending.append(parent)
    if seen != set(records):
        return _reject("malformed", "bundle carries records outside the lineage")
    return ProvenanceVerdict(True)


# -- access grants ---------------------------------------------------------------------


class AccessRevoked(Exception):
    """The enclave refuses to release key material for a revoked or unknown grant."""


@dataclass(frozen=True)
class AccessGrant:
    data_id: Digest
    grantee: Digest
    wrapped_key: Ciphertext | None = field(repr=False)
    revoked: bool = False
    revoked_block: int | None = None


def grant_wrap_key(shared_secret: bytes, data_id: Digest) -> AeadKey:
    return AeadKey.derive(b"grant-wrap", shared_secret, data_id.data)


def unwrap_datum_key(grantee_share: KeyShare, cluster_public: bytes, grant: AccessGrant) -> AeadKey:
    if grant.revoked or grant.wrapped_key is None:
        raise AccessRevoked(grant.data_id.hex())
    wrap = grant_wrap_key(grantee_share.exchange(cluster_public), grant.data_id)
    return AeadKey(aead_open(wrap, grant.data_id.data, grant.wrapped_key))


# -- ledger operations ----------------------------------------------------------------
#
# ``ctx`` is anything that can run transactions through the apply path: a
# standalone ledger or a cluster client.  The heavy lifting lives in
# ``execution``; these keep the lineage-facing vocabulary.


def record_ingress(ctx, payload: bytes, source_label: str, source_key_: SigningKey, client_sig: Signature | None = None) -> ProvenanceRecord:
    return ctx.ingest(payload, source_label, source_key_, client_sig)


def record_transformation(ctx, input_ids: Iterable[Digest], code_measurement: Digest, program_input: bytes = b"") -> ProvenanceRecord:
    return ctx.transform(tuple(input_ids), code_measurement, program_input)


def revoke_access(ctx, data_id: Digest, grantee: Digest) -> None:
    ctx.revoke(data_id, grantee)
