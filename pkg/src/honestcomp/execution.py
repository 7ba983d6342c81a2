"""Deterministic transaction engine applied to committed log entries.

``Engine.apply`` is a pure function of (trie, command, block context): it
reads no clock, no node identity beyond the block context and no entropy
beyond the epoch seed.  Failures are results, never exceptions, and leave
the root unchanged.

Provenance records need the producing enclave's signature, which replicas
cannot forge.  The proposer therefore executes speculatively over its own
log (``signer`` given) and attaches the record signatures to the command;
replicas recompute the records and verify those signatures.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .attestation import CodeManifest
from .codec import DecodeError, Reader, Writer
from .crypto import (
    AeadKey,
    Ciphertext,
    Digest,
    KeyShare,
    SeededRng,
    Signature,
    SigningKey,
    VerifyKey,
    aead_open,
    aead_seal,
    counter_nonce,
    hash_bytes,
    hash_parts,
    rng_stream,
    sign,
    verify,
)
from .lineage import (
    DERIVED,
    INGRESS,
    AccessGrant,
    AccessRevoked,
    LineageBundle,
    LineageError,
    ProvenanceRecord,
    build_bundle,
    compute_data_id,
    derived_label,
    grant_wrap_key,
    ingress_statement,
    load_record,
)
from .mpt_ledger import (
    MAX_INLINE_VALUE,
    BlobStore,
    RootHistory,
    Trie,
    UnknownBlobError,
    block_statement,
)
from .state import (
    DatumValue,
    GrantState,
    MemberInfo,
    MemberStatus,
    ProposalState,
    ProposalStatus,
    RevocationRecord,
    app_key,
    code_key,
    data_key,
    grant_key,
    member_key,
    proc_key,
    prog_key,
    prov_key,
    revocation_key,
    source_key,
    tx_key,
)

MAX_STEPS = 10_000
DEFAULT_EXPIRY_BLOCKS = 1_000
TX_MAGIC = b"HCTX"
FORMAT_VERSION = 1


# -- epoch seed and the program VM -----------------------------------------------------


@dataclass(frozen=True)
class EpochSeed:
    epoch: int
    seed: Digest

    @classmethod
    def derive(cls, root: Digest, epoch: int) -> "EpochSeed":
        return cls(epoch, hash_parts(b"epoch-seed", root.data, epoch.to_bytes(8, "big")))

    def stream(self, counter: int, n: int) -> bytes:
        return rng_stream(self.seed.data, counter, n)


class ProgramFault(Exception):
    pass


class Op(enum.IntEnum):
    HALT = 0
    PUSHI = 1
    PUSHB = 2
    INPUT = 3
    LOAD = 4
    DUP = 5
    SWAP = 6
    DROP = 7
    ADD = 8
    SUB = 9
    MUL = 10
    DIV = 11
    MOD = 12
    EQ = 13
    LT = 14
    JMP = 15
    JZ = 16
    HASH = 17
    CAT = 18
    LEN = 19
    SEED = 20
    GET = 21
    PUT = 22
    ITOB = 23
    BTOI = 24


_ARG_U64 = {Op.PUSHI, Op.JMP, Op.JZ}
_ARG_U8 = {Op.LOAD, Op.SEED}
_MASK = (1 << 64) - 1


def assemble(source: str) -> bytes:
    """Assemble whitespace-separated mnemonics; ``PUSHB`` takes a hex operand."""
    w = Writer()
    tokens = source.split()
    i = 0
    while i < len(tokens):
        try:
            op = Op[tokens[i].upper()]
        except KeyError:
            raise ValueError(f"unknown mnemonic {tokens[i]!r}") from None
        w.u8(op)
        if op in _ARG_U64 or op in _ARG_U8 or op is Op.PUSHB:
            if i + 1 >= len(tokens):
                raise ValueError(f"{op.name} needs an operand")
            arg = tokens[i + 1]
            i += 1
            if op is Op.PUSHB:
                data = bytes.fromhex(arg)
                w.u16(len(data)).raw(data)
            elif op in _ARG_U8:
                w.u8(int(arg, 0))
            else:
                w.u64(int(arg, 0) & _MASK)
        i += 1
    return w.getvalue()


def decode_program(code: bytes) -> list[tuple[Op, int | bytes | None]]:
    r = Reader(code)
    out: list[tuple[Op, int | bytes | None]] = []
    while r.remaining:
        try:
            op = Op(r.u8())
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        if op in _ARG_U64:
            out.append((op, r.u64()))
        elif op in _ARG_U8:
            out.append((op, r.u8()))
        elif op is Op.PUSHB:
            out.append((op, r.fixed(r.u16())))
        else:
            out.append((op, None))
    return out


@dataclass(frozen=True)
class ProgramResult:
    output: bytes
    writes: tuple[tuple[bytes, bytes], ...]
    steps: int


def run_program(
    code: bytes,
    program_input: bytes,
    view: Callable[[bytes], bytes | None],
    seed: EpochSeed,
    inputs: Sequence[bytes] = (),
    budget: int = MAX_STEPS,
) -> ProgramResult:
    """Execute a stack program; raises :class:`ProgramFault` deterministically."""
    try:
        prog = decode_program(code)
    except DecodeError as exc:
        raise ProgramFault(f"malformed-program: {exc}") from exc
    budget = min(budget, MAX_STEPS)
    stack: list[int | bytes] = []
    writes: dict[bytes, bytes] = {}
    seed_counter = 0
    pc = steps = 0

    def pop(kind=None):
        if not stack:
            raise ProgramFault("stack-underflow")
        v = stack.pop()
        if kind is not None and not isinstance(v, kind):
            raise ProgramFault("type-error")
        return v

    while pc < len(prog):
        if steps >= budget:
            raise ProgramFault("budget-exceeded")
        steps += 1
        op, arg = prog[pc]
        pc += 1
        if op is Op.HALT:
            break
        if op is Op.PUSHI or op is Op.PUSHB:
            stack.append(arg)
        elif op is Op.INPUT:
            stack.append(program_input)
        elif op is Op.LOAD:
            if arg >= len(inputs):
                raise ProgramFault("no-such-input")
            stack.append(inputs[arg])
        elif op is Op.DUP:
            v = pop()
            stack += [v, v]
        elif op is Op.SWAP:
            b, a = pop(), pop()
            stack += [b, a]
        elif op is Op.DROP:
            pop()
        elif op in (Op.ADD, Op.SUB, Op.MUL, Op.DIV, Op.MOD, Op.EQ, Op.LT):
            b, a = pop(int), pop(int)
            if op in (Op.DIV, Op.MOD) and b == 0:
                raise ProgramFault("division-by-zero")
            res = {
                Op.ADD: lambda: a + b,
                Op.SUB: lambda: a - b,
                Op.MUL: lambda: a * b,
                Op.DIV: lambda: a // b,
                Op.MOD: lambda: a % b,
                Op.EQ: lambda: int(a == b),
                Op.LT: lambda: int(a < b),
            }[op]()
            stack.append(res & _MASK)
        elif op is Op.JMP:
            pc = arg
        elif op is Op.JZ:
            if pop(int) == 0:
                pc = arg
        elif op is Op.HASH:
            stack.append(hash_bytes(pop(bytes)).data)
        elif op is Op.CAT:
            b, a = pop(bytes), pop(bytes)
            if len(a) + len(b) > MAX_INLINE_VALUE * 64:
                raise ProgramFault("value-too-large")
            stack.append(a + b)
        elif op is Op.LEN:
            stack.append(len(pop(bytes)))
        elif op is Op.SEED:
            stack.append(seed.stream(seed_counter, arg))
            seed_counter += (arg + 31) // 32
        elif op is Op.GET:
            key = pop(bytes)
            if key in writes:
                stack.append(writes[key])
            else:
                try:
                    stack.append(view(app_key(key)) or b"")
                except ValueError:
                    raise ProgramFault("bad-key") from None
        elif op is Op.PUT:
            value, key = pop(bytes), pop(bytes)
            if not key or len(key) > 60 or len(value) > MAX_INLINE_VALUE:
                raise ProgramFault("bad-key")
            writes[key] = value
        elif op is Op.ITOB:
            stack.append(pop(int).to_bytes(8, "big"))
        elif op is Op.BTOI:
            stack.append(int.from_bytes(pop(bytes)[-8:], "big"))
    if not stack:
        raise ProgramFault("empty-stack")
    top = stack[-1]
    output = top if isinstance(top, bytes) else top.to_bytes(8, "big")
    return ProgramResult(output, tuple(sorted(writes.items())), steps)


# -- transactions --------------------------------------------------------------------


@dataclass(frozen=True)
class Put:
    label: str
    payload: bytes
    source_vk: VerifyKey
    source_sig: Signature


@dataclass(frozen=True)
class Get:
    key: bytes


@dataclass(frozen=True)
class Delete:
    data_id: Digest


@dataclass(frozen=True)
class Run:
    measurement: Digest
    input_ids: tuple[Digest, ...]
    program_input: bytes = b""
    budget: int = MAX_STEPS


@dataclass(frozen=True)
class Propose:
    action: bytes
    approvers: tuple[VerifyKey, ...]
    threshold: int
    expiry_blocks: int = DEFAULT_EXPIRY_BLOCKS


@dataclass(frozen=True)
class Approve:
    action_id: Digest
    approver_vk: VerifyKey
    approver_sig: Signature


@dataclass(frozen=True)
class Grant:
    data_id: Digest
    grantee_vk: VerifyKey
    grantee_public: bytes


@dataclass(frozen=True)
class Revoke:
    data_id: Digest
    grantee: Digest


Operation = Put | Get | Delete | Run | Propose | Approve | Grant | Revoke
_OP_TAGS = {Put: 1, Get: 2, Delete: 3, Run: 4, Propose: 5, Approve: 6, Grant: 7, Revoke: 8}


def approve_statement(action_id: Digest) -> bytes:
    return b"approve" + action_id.data


def _write_op(w: Writer, op: Operation) -> None:
    w.u8(_OP_TAGS[type(op)])
    if isinstance(op, Put):
        w.text(op.label).blob(op.payload)
        op.source_vk.write(w)
        op.source_sig.write(w)
    elif isinstance(op, Get):
        w.blob(op.key)
    elif isinstance(op, Delete):
        op.data_id.write(w)
    elif isinstance(op, Run):
        op.measurement.write(w)
        w.u16(len(op.input_ids))
        for i in op.input_ids:
            i.write(w)
        w.blob(op.program_input).u32(op.budget)
    elif isinstance(op, Propose):
        w.blob(op.action).u16(len(op.approvers))
        for a in op.approvers:
            a.write(w)
        w.u16(op.threshold).u64(op.expiry_blocks)
    elif isinstance(op, Approve):
        op.action_id.write(w)
        op.approver_vk.write(w)
        op.approver_sig.write(w)
    elif isinstance(op, Grant):
        op.data_id.write(w)
        op.grantee_vk.write(w)
        w.fixed(op.grantee_public, 32)
    else:
        op.data_id.write(w)
        op.grantee.write(w)


def _read_op(r: Reader) -> Operation:
    tag = r.u8()
    if tag == 1:
        return Put(r.text(256), r.blob(), VerifyKey.read(r), Signature.read(r))
    if tag == 2:
        return Get(r.blob(64))
    if tag == 3:
        return Delete(Digest.read(r))
    if tag == 4:
        m = Digest.read(r)
        inputs = tuple(Digest.read(r) for _ in range(r.u16()))
        return Run(m, inputs, r.blob(), r.u32())
    if tag == 5:
        action = r.blob()
        approvers = tuple(VerifyKey.read(r) for _ in range(r.u16()))
        return Propose(action, approvers, r.u16(), r.u64())
    if tag == 6:
        return Approve(Digest.read(r), VerifyKey.read(r), Signature.read(r))
    if tag == 7:
        return Grant(Digest.read(r), VerifyKey.read(r), r.fixed(32))
    if tag == 8:
        return Revoke(Digest.read(r), Digest.read(r))
    raise DecodeError(f"unknown operation tag {tag}")


@dataclass(frozen=True)
class Transaction:
    app_id: str
    op: Operation
    client_vk: VerifyKey
    nonce: int
    signature: Signature | None = None

    def body(self) -> bytes:
        w = Writer().raw(TX_MAGIC).u8(FORMAT_VERSION).text(self.app_id)
        _write_op(w, self.op)
        self.client_vk.write(w)
        w.u64(self.nonce)
        return w.getvalue()

    @property
    def tx_id(self) -> Digest:
        return hash_parts(b"tx", self.body())

    def signed(self, client: SigningKey) -> "Transaction":
        return Transaction(self.app_id, self.op, self.client_vk, self.nonce, sign(client, self.body()))

    def signature_valid(self) -> bool:
        return self.signature is not None and verify(self.client_vk, self.body(), self.signature)

    def encode(self) -> bytes:
        if self.signature is None:
            raise ValueError("transaction is unsigned")
        w = Writer().raw(self.body())
        self.signature.write(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        r.magic(TX_MAGIC)
        if r.u8() != FORMAT_VERSION:
            raise DecodeError("unsupported transaction version")
        app_id = r.text(64)
        op = _read_op(r)
        client_vk = VerifyKey.read(r)
        nonce = r.u64()
        sig = Signature.read(r)
        r.done()
        return cls(app_id, op, client_vk, nonce, sig)


def make_tx(client: SigningKey, op: Operation, nonce: int, app_id: str = "honestcomp") -> Transaction:
    return Transaction(app_id, op, client.verify_key, nonce).signed(client)


# -- log commands ------------------------------------------------------------------------


class CommandKind(enum.IntEnum):
    NOOP = 0
    TX = 1
    ADMIT = 2
    EXCLUDE = 3


@dataclass(frozen=True)
class Command:
    kind: CommandKind
    tx: bytes = b""
    producer_sigs: tuple[Signature, ...] = ()
    member: MemberInfo | None = None
    platform_id: str = ""
    reason: str = ""
    evidence: str = ""

    def encode(self) -> bytes:
        w = Writer().u8(self.kind)
        if self.kind is CommandKind.TX:
            w.blob(self.tx).u16(len(self.producer_sigs))
            for s in self.producer_sigs:
                s.write(w)
        elif self.kind is CommandKind.ADMIT:
            w.blob(self.member.encode())
        elif self.kind is CommandKind.EXCLUDE:
            w.text(self.platform_id).text(self.reason).text(self.evidence)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Command":
        r = Reader(data)
        try:
            kind = CommandKind(r.u8())
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        if kind is CommandKind.TX:
            tx = r.blob()
            sigs = tuple(Signature.read(r) for _ in range(r.u16()))
            cmd = cls(kind, tx, sigs)
        elif kind is CommandKind.ADMIT:
            cmd = cls(kind, member=MemberInfo.decode(r.blob()))
        elif kind is CommandKind.EXCLUDE:
            cmd = cls(kind, platform_id=r.text(64), reason=r.text(64), evidence=r.text(256))
        else:
            cmd = cls(kind)
        r.done()
        return cmd

    @classmethod
    def for_tx(cls, tx: Transaction | bytes, sigs: Sequence[Signature] = ()) -> "Command":
        raw = tx.encode() if isinstance(tx, Transaction) else tx
        return cls(CommandKind.TX, raw, tuple(sigs))


# -- apply ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockContext:
    block_index: int
    term: int
    index: int
    proposer: str

    @property
    def logical_time(self) -> tuple[int, int]:
        return (self.term, self.index)


@dataclass(frozen=True)
class TxResult:
    tx_id: Digest
    ok: bool
    code: str
    output: bytes = b""

    def encode(self) -> bytes:
        w = Writer()
        self.tx_id.write(w)
        return w.flag(self.ok).text(self.code).blob(self.output).getvalue()

    def to_json(self) -> dict:
        return {"tx_id": self.tx_id.hex(), "ok": self.ok, "code": self.code, "output": self.output.hex()}


@dataclass(frozen=True)
class ApplyOutcome:
    trie: Trie
    records: tuple[ProvenanceRecord, ...]
    result: TxResult

    @property
    def producer_sigs(self) -> tuple[Signature, ...]:
        return tuple(r.signature for r in self.records)


class _Failure(Exception):
    def __init__(self, code: str) -> None:
        super().__init__(code)
        self.code = code


@dataclass
class Policy:
    """Cluster-wide switches; tests flip them to show a mitigation is load-bearing."""

    check_client_signature: bool = True


class Engine:
    """Per-node executor holding the enclave-resident key material."""

    def __init__(
        self,
        cluster_secret: bytes,
        ingress_measurement: Digest,
        blobs: BlobStore | None = None,
        policy: Policy | None = None,
    ) -> None:
        self._secret = cluster_secret
        self.ingress_measurement = ingress_measurement
        self.blobs = blobs if blobs is not None else BlobStore()
        self.policy = policy or Policy()
        self._cluster_share = KeyShare(hash_parts(b"cluster-x25519", cluster_secret).data)
        self._registry: dict[tuple[Digest, Digest], AccessGrant] = {}

    @property
    def cluster_public(self) -> bytes:
        return self._cluster_share.public

    def datum_key(self, data_id: Digest) -> AeadKey:
        return AeadKey.derive(b"datum", self._secret, data_id.data)

    # enclave-side reads

    def read_datum(self, trie: Trie, data_id: Digest) -> bytes:
        raw = trie.get(data_key(data_id))
        if raw is None:
            raise LineageError("unknown-data-id", data_id.hex())
        return self._decrypt(DatumValue.decode(raw), data_id)

    def _decrypt(self, value: DatumValue, data_id: Digest) -> bytes:
        ref = value.blob_ref()
        body = self.blobs.dereference(ref) if ref else value.body
        return aead_open(self.datum_key(data_id), data_id.data, Ciphertext.decode(body))

    def open_grant(self, data_id: Digest, grantee: Digest) -> AccessGrant:
        grant = self._registry.get((data_id, grantee))
        if grant is None or grant.revoked:
            raise AccessRevoked(f"no active grant for {grantee.hex()} on {data_id.hex()}")
        return grant

    # the apply path

    def apply(
        self,
        trie: Trie,
        command: bytes | Command,
        ctx: BlockContext,
        signer: SigningKey | None = None,
        commit_effects: bool = True,
    ) -> ApplyOutcome:
        """Apply one command.  ``commit_effects=False`` is for speculation: the
        trie is computed but the key registry is left untouched."""
        raw = command.encode() if isinstance(command, Command) else command
        try:
            cmd = Command.decode(raw) if isinstance(command, bytes) else command
        except DecodeError:
            return ApplyOutcome(trie, (), TxResult(hash_parts(b"cmd", raw), False, "malformed"))
        if cmd.kind is CommandKind.NOOP:
            return ApplyOutcome(trie, (), TxResult(hash_parts(b"cmd", raw), True, "noop"))
        if cmd.kind is CommandKind.ADMIT:
            return self._admit(trie, cmd, raw)
        if cmd.kind is CommandKind.EXCLUDE:
            return self._exclude(trie, cmd, raw, ctx)
        return self._apply_tx(trie, cmd, ctx, signer, commit_effects)

    def _admit(self, trie: Trie, cmd: Command, raw: bytes) -> ApplyOutcome:
        rid = hash_parts(b"cmd", raw)
        key = member_key(cmd.member.platform_id)
        if trie.get(key) is not None:
            return ApplyOutcome(trie, (), TxResult(rid, False, "duplicate-member"))
        return ApplyOutcome(trie.insert(key, cmd.member.encode()), (), TxResult(rid, True, "admitted"))

    def _exclude(self, trie: Trie, cmd: Command, raw: bytes, ctx: BlockContext) -> ApplyOutcome:
        rid = hash_parts(b"cmd", raw)
        key = member_key(cmd.platform_id)
        current = trie.get(key)
        if current is None:
            return ApplyOutcome(trie, (), TxResult(rid, False, "unknown-member"))
        info = MemberInfo.decode(current)
        if info.status is MemberStatus.EXCLUDED:
            return ApplyOutcome(trie, (), TxResult(rid, False, "already-excluded"))
        updated = info.excluded(cmd.reason, ctx.term, cmd.evidence)
        return ApplyOutcome(trie.insert(key, updated.encode()), (), TxResult(rid, True, "excluded"))

    def _apply_tx(
        self, trie: Trie, cmd: Command, ctx: BlockContext, signer: SigningKey | None, commit_effects: bool
    ) -> ApplyOutcome:
        try:
            tx = Transaction.decode(cmd.tx)
        except (DecodeError, ValueError):
            return ApplyOutcome(trie, (), TxResult(hash_parts(b"cmd", cmd.tx), False, "malformed"))
        tx_id = tx.tx_id
        try:
            if not tx.signature_valid():
                raise _Failure("bad-signature")
            if trie.get(tx_key(tx_id)) is not None:
                raise _Failure("duplicate")
            new_trie, records, code, output, effects = self._dispatch(trie, tx, tx_id, ctx)
            records = self._sign_or_check(new_trie, records, cmd, ctx, signer)
            for rec in records:
                new_trie = new_trie.insert(prov_key(rec.data_id), rec.encode())
        except _Failure as f:
            return ApplyOutcome(trie, (), TxResult(tx_id, False, f.code))
        if new_trie is not trie:
            new_trie = new_trie.insert(tx_key(tx_id), ctx.block_index.to_bytes(8, "big"))
        if commit_effects:
            for effect in effects:
                effect()
        return ApplyOutcome(new_trie, records, TxResult(tx_id, True, code, output))

    def _sign_or_check(self, trie, records, cmd, ctx, signer) -> tuple[ProvenanceRecord, ...]:
        if signer is not None:
            return tuple(r.signed(signer) for r in records)
        if len(cmd.producer_sigs) != len(records):
            raise _Failure("bad-producer-signature")
        raw = trie.get(member_key(ctx.proposer))
        if raw is None:
            raise _Failure("unknown-producer")
        aik = MemberInfo.decode(raw).aik
        out = []
        for rec, sig in zip(records, cmd.producer_sigs):
            rec = rec.with_signature(sig)
            if not rec.signature_valid(aik):
                raise _Failure("bad-producer-signature")
            out.append(rec)
        return tuple(out)

    def _dispatch(self, trie: Trie, tx: Transaction, tx_id: Digest, ctx: BlockContext):
        op = tx.op
        handler = {
            Put: self._put,
            Get: self._get,
            Delete: self._delete,
            Run: self._run,
            Propose: self._propose,
            Approve: self._approve,
            Grant: self._grant,
            Revoke: self._revoke,
        }[type(op)]
        return handler(trie, tx, tx_id, ctx)

    def _store_datum(self, trie: Trie, data_id: Digest, owner: Digest, payload: bytes):
        ct = aead_seal(self.datum_key(data_id), counter_nonce(0), data_id.data, payload).encode()
        external = len(ct) > MAX_INLINE_VALUE - 64
        body = self.blobs.store(ct).encode() if external else ct
        return trie.insert(data_key(data_id), DatumValue(owner, body, external).encode())

    def _put(self, trie, tx, tx_id, ctx):
        op: Put = tx.op
        registered = trie.get(source_key(op.label)) if 0 < len(op.label.encode()) <= 56 else None
        if registered is None or registered != op.source_vk.encode():
            raise _Failure("unregistered-source")
        payload_digest = hash_bytes(op.payload)
        if self.policy.check_client_signature and not verify(
            op.source_vk, ingress_statement(payload_digest, op.label), op.source_sig
        ):
            raise _Failure("bad-client-signature")
        data_id = compute_data_id(payload_digest, op.label, ctx.logical_time)
        if trie.get(prov_key(data_id)) is not None:
            raise _Failure("duplicate-data")
        rec = ProvenanceRecord(
            data_id, INGRESS, op.label, payload_digest, (), self.ingress_measurement,
            ctx.block_index, ctx.logical_time, ctx.proposer, op.source_vk, op.source_sig,
        )
        trie = self._store_datum(trie, data_id, tx.client_vk.fingerprint, op.payload)
        return trie, [rec], "ok", data_id.data, ()

    def _get(self, trie, tx, tx_id, ctx):
        key = tx.op.key
        try:
            value = trie.get(key)
        except ValueError:
            raise _Failure("bad-key") from None
        if value is None:
            return trie, [], "absent", b"", ()
        return trie, [], "ok", value, ()

    def _owned(self, trie, data_id: Digest, client: Digest) -> DatumValue:
        raw = trie.get(data_key(data_id))
        if raw is None:
            raise _Failure("unknown-data-id")
        value = DatumValue.decode(raw)
        if value.owner != client:
            raise _Failure("not-owner")
        return value

    def _delete(self, trie, tx, tx_id, ctx):
        value = self._owned(trie, tx.op.data_id, tx.client_vk.fingerprint)
        ref = value.blob_ref()
        effects = ()
        if ref is not None:
            effects = (lambda: _forget_quietly(self.blobs, ref.external_id),)
        return trie.delete(data_key(tx.op.data_id)), [], "ok", b"", effects

    def _run(self, trie, tx, tx_id, ctx):
        op: Run = tx.op
        raw_manifest = trie.get(code_key(op.measurement))
        if raw_manifest is None:
            raise _Failure("unregistered-code")
        manifest = CodeManifest.decode(raw_manifest)
        code = trie.get(prog_key(manifest.code_digest))
        if code is None:
            raise _Failure("unregistered-code")
        if not op.input_ids or len(set(op.input_ids)) != len(op.input_ids):
            raise _Failure("bad-inputs")
        client = tx.client_vk.fingerprint
        plaintexts = []
        for did in op.input_ids:
            if trie.get(prov_key(did)) is None:
                raise _Failure("unknown-input")
            raw = trie.get(data_key(did))
            if raw is None:
                raise _Failure("input-erased")
            value = DatumValue.decode(raw)
            if value.owner != client and not self._active_grant(trie, did, client):
                raise _Failure("access-denied")
            try:
                plaintexts.append(self._decrypt(value, did))
            except UnknownBlobError:
                raise _Failure("input-erased") from None
        seed = EpochSeed.derive(trie.root_hash(), ctx.block_index)
        try:
            result = run_program(code, op.program_input, trie.get, seed, plaintexts, op.budget)
        except ProgramFault as fault:
            raise _Failure(f"program-fault:{fault}") from None
        label = derived_label(op.measurement)
        payload_digest = hash_bytes(result.output)
        data_id = compute_data_id(payload_digest, label, ctx.logical_time)
        rec = ProvenanceRecord(
            data_id, DERIVED, label, payload_digest, op.input_ids, op.measurement,
            ctx.block_index, ctx.logical_time, ctx.proposer, None, None,
        )
        for key, value in result.writes:
            trie = trie.insert(app_key(key), value)
        trie = self._store_datum(trie, data_id, client, result.output)
        return trie, [rec], "ok", data_id.data, ()

    def _active_grant(self, trie, data_id: Digest, grantee: Digest) -> bool:
        raw = trie.get(grant_key(data_id, grantee))
        return raw is not None and not GrantState.decode(raw).revoked

    def _propose(self, trie, tx, tx_id, ctx):
        op: Propose = tx.op
        fps = tuple(a.fingerprint for a in op.approvers)
        if not fps or len(set(fps)) != len(fps) or not 1 <= op.threshold <= len(fps):
            raise _Failure("bad-proposal")
        action_id = hash_parts(b"action", tx_id.data)
        state = ProposalState(op.action, fps, op.threshold, (), ProposalStatus.PENDING, ctx.block_index, op.expiry_blocks)
        return trie.insert(proc_key(action_id), state.encode()), [], "pending", action_id.data, ()

    def _approve(self, trie, tx, tx_id, ctx):
        op: Approve = tx.op
        raw = trie.get(proc_key(op.action_id))
        if raw is None:
            raise _Failure("unknown-action")
        state = ProposalState.decode(raw)
        if state.status is ProposalStatus.EXECUTED:
            return trie, [], "no-op", b"executed", ()
        if ctx.block_index > state.created_block + state.expiry_blocks:
            raise _Failure("expired")
        fp = op.approver_vk.fingerprint
        if fp not in state.approvers:
            raise _Failure("non-approver")
        if not verify(op.approver_vk, approve_statement(op.action_id), op.approver_sig):
            raise _Failure("bad-approval-signature")
        if fp in state.approvals:
            return trie, [], "no-op", state.status.label.encode(), ()
        approvals = tuple(sorted(state.approvals + (fp,), key=lambda d: d.data))
        status = ProposalStatus.EXECUTED if len(approvals) >= state.threshold else ProposalStatus.PENDING
        new = ProposalState(state.action, state.approvers, state.threshold, approvals, status, state.created_block, state.expiry_blocks)
        code = "executed" if status is ProposalStatus.EXECUTED else "pending"
        return trie.insert(proc_key(op.action_id), new.encode()), [], code, status.label.encode(), ()

    def _grant(self, trie, tx, tx_id, ctx):
        op: Grant = tx.op
        self._owned(trie, op.data_id, tx.client_vk.fingerprint)
        grantee = op.grantee_vk.fingerprint
        key = grant_key(op.data_id, grantee)
        existing = trie.get(key)
        if existing is not None:
            raise _Failure("already-revoked" if GrantState.decode(existing).revoked else "duplicate-grant")
        try:
            shared = self._cluster_share.exchange(op.grantee_public)
        except ValueError:
            raise _Failure("bad-grantee-key") from None
        wrapped = aead_seal(
            grant_wrap_key(shared, op.data_id), counter_nonce(0), op.data_id.data, self.datum_key(op.data_id).key
        )
        state = GrantState(op.data_id, grantee, op.grantee_public)

        def remember() -> None:
            self._registry[(op.data_id, grantee)] = AccessGrant(op.data_id, grantee, wrapped)

        return trie.insert(key, state.encode()), [], "ok", b"", (remember,)

    def _revoke(self, trie, tx, tx_id, ctx):
        op: Revoke = tx.op
        self._owned(trie, op.data_id, tx.client_vk.fingerprint)
        key = grant_key(op.data_id, op.grantee)
        raw = trie.get(key)
        if raw is None:
            raise _Failure("unknown-grant")
        state = GrantState.decode(raw)
        if state.revoked:
            raise _Failure("already-revoked")
        revoked = GrantState(state.data_id, state.grantee, state.grantee_public, True, ctx.block_index)
        trie = trie.insert(key, revoked.encode())
        trie = trie.insert(
            revocation_key(op.data_id, op.grantee),
            RevocationRecord(op.data_id, op.grantee, ctx.block_index).encode(),
        )

        def destroy() -> None:
            self._registry[(op.data_id, op.grantee)] = AccessGrant(op.data_id, op.grantee, None, True, ctx.block_index)

        return trie, [], "ok", b"", (destroy,)


def _forget_quietly(store: BlobStore, external_id: str) -> None:
    if external_id in store:
        store.forget(external_id)


# -- genesis and a standalone single-enclave ledger ------------------------------------------


def genesis_trie(
    members: Iterable[MemberInfo],
    manifests: Iterable[CodeManifest],
    programs: Iterable[bytes] = (),
    sources: Mapping[str, VerifyKey] | None = None,
) -> Trie:
    trie = Trie()
    for m in members:
        trie = trie.insert(member_key(m.platform_id), m.encode())
    for manifest in manifests:
        trie = trie.insert(code_key(manifest.measurement), manifest.encode())
    for code in programs:
        trie = trie.insert(prog_key(hash_bytes(code)), code)
    for label, vk in sorted((sources or {}).items()):
        trie = trie.insert(source_key(label), vk.encode())
    return trie


IDENTITY_PROGRAM = assemble("INPUT HALT")
CONCAT_PROGRAM = assemble("LOAD 0 INPUT CAT HALT")
DIGEST_PROGRAM = assemble("LOAD 0 HASH HALT")


class LocalLedger:
    """One enclave applying its own transactions: the whole apply path without consensus.

    Used for audits, the CLI demo and unit tests of lineage and execution.
    """

    def __init__(self, seed: int = 0, platform_id: str = "local-1", policy: Policy | None = None) -> None:
        from .attestation import Vendor  # local import keeps the module graph shallow

        rng = SeededRng.from_int(seed).fork("local-ledger")
        self.platform_id = platform_id
        self.aik = SigningKey.generate(rng)
        self.client = SigningKey.generate(rng)
        author = SigningKey.generate(rng)
        self.app_manifest = CodeManifest.create("honestcomp", "1.0", b"honestcomp-app", author)
        self.programs: dict[str, CodeManifest] = {}
        codes = []
        for name, code in (("identity", IDENTITY_PROGRAM), ("concat", CONCAT_PROGRAM), ("digest", DIGEST_PROGRAM)):
            self.programs[name] = CodeManifest.create(name, "1.0", code, author)
            codes.append(code)
        self.sources: dict[str, SigningKey] = {"sensor-a": SigningKey.generate(rng), "sensor-b": SigningKey.generate(rng)}
        member = MemberInfo(platform_id, Vendor.A, self.aik.verify_key)
        self.trie = genesis_trie(
            [member],
            [self.app_manifest, *self.programs.values()],
            codes,
            {k: v.verify_key for k, v in self.sources.items()},
        )
        self.engine = Engine(rng.read(32), self.app_manifest.measurement, policy=policy)
        self.history = RootHistory()
        self.results: dict[Digest, TxResult] = {}
        self.records: list[ProvenanceRecord] = []
        self._nonce = 0
        self._index = 0

    @property
    def root(self) -> Digest:
        return self.trie.root_hash()

    @property
    def members(self) -> dict[str, VerifyKey]:
        return {self.platform_id: self.aik.verify_key}

    def submit(self, tx: Transaction | Command) -> ApplyOutcome:
        cmd = tx if isinstance(tx, Command) else Command.for_tx(tx)
        self._index += 1
        ctx = BlockContext(self._index - 1, 1, self._index, self.platform_id)
        outcome = self.engine.apply(self.trie, cmd, ctx, signer=self.aik)
        self.trie = outcome.trie
        sig = sign(self.aik, block_statement(ctx.block_index, self.trie.root_hash(), ctx.term))
        self.history = self.history.commit(self.trie.root_hash(), ctx.term, self.platform_id, [(self.platform_id, sig)], self.members)
        self.results[outcome.result.tx_id] = outcome.result
        self.records.extend(outcome.records)
        return outcome

    def run(self, op: Operation, client: SigningKey | None = None) -> ApplyOutcome:
        self._nonce += 1
        return self.submit(make_tx(client or self.client, op, self._nonce))

    def _expect(self, outcome: ApplyOutcome) -> ApplyOutcome:
        if not outcome.result.ok:
            raise LineageError(outcome.result.code)
        return outcome

    # lineage vocabulary

    def ingest(self, payload: bytes, source_label: str, source: SigningKey, client_sig: Signature | None = None) -> ProvenanceRecord:
        if client_sig is None:
            client_sig = sign(source, ingress_statement(hash_bytes(payload), source_label))
        outcome = self._expect(self.run(Put(source_label, payload, source.verify_key, client_sig)))
        return outcome.records[0]

    def transform(self, input_ids: Sequence[Digest], code_measurement: Digest, program_input: bytes = b"", client: SigningKey | None = None) -> ProvenanceRecord:
        outcome = self._expect(self.run(Run(code_measurement, tuple(input_ids), program_input), client))
        return outcome.records[0]

    def grant(self, data_id: Digest, grantee: SigningKey, grantee_share: KeyShare) -> None:
        self._expect(self.run(Grant(data_id, grantee.verify_key, grantee_share.public)))

    def revoke(self, data_id: Digest, grantee: Digest) -> None:
        self._expect(self.run(Revoke(data_id, grantee)))

    def read(self, data_id: Digest) -> bytes:
        return self.engine.read_datum(self.trie, data_id)

    def record(self, data_id: Digest) -> ProvenanceRecord | None:
        return load_record(self.trie, data_id)

    def bundle(self, data_id: Digest, extra_keys: Iterable[bytes] = ()) -> LineageBundle:
        return build_bundle(self.trie, data_id, extra_keys)
