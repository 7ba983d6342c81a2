"""Append-only root history: one quorum-signed entry per committed block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from ..codec import Reader, Writer
from ..crypto import Digest, Signature, VerifyKey, verify


class HistoryError(ValueError):
    code = "history-error"


class BadQuorumError(HistoryError):
    code = "bad-quorum"


class GapInIndexError(HistoryError):
    code = "gap-in-index"


def quorum_size(member_count: int) -> int:
    return member_count // 2 + 1


def block_statement(block_index: int, root: Digest, term: int) -> bytes:
    w = Writer().raw(b"block").u64(block_index)
    root.write(w)
    w.u64(term)
    return w.getvalue()


@dataclass(frozen=True)
class HistoryEntry:
    block_index: int
    root: Digest
    term: int
    leader: str
    signatures: tuple[tuple[str, Signature], ...]
    flagged: tuple[str, ...] = ()

    def encode(self) -> bytes:
        w = Writer().u64(self.block_index)
        self.root.write(w)
        w.u64(self.term).text(self.leader).u16(len(self.signatures))
        for signer, sig in self.signatures:
            w.text(signer)
            sig.write(w)
        w.u16(len(self.flagged))
        for f in self.flagged:
            w.text(f)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "HistoryEntry":
        index, root, term, leader = r.u64(), Digest.read(r), r.u64(), r.text(64)
        sigs = tuple((r.text(64), Signature.read(r)) for _ in range(r.u16()))
        flagged = tuple(r.text(64) for _ in range(r.u16()))
        return cls(index, root, term, leader, sigs, flagged)


class RootHistory:
    """Immutable sequence of :class:`HistoryEntry`; :meth:`commit` returns a new one."""

    __slots__ = ("_entries",)

    def __init__(self, entries: tuple[HistoryEntry, ...] = ()) -> None:
        self._entries = entries

    @property
    def entries(self) -> tuple[HistoryEntry, ...]:
        return self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, i: int) -> HistoryEntry:
        return self._entries[i]

    @property
    def next_index(self) -> int:
        return len(self._entries)

    def last_root(self) -> Digest | None:
        return self._entries[-1].root if self._entries else None

    def commit(
        self,
        root: Digest,
        term: int,
        leader: str,
        quorum_sigs: Iterable[tuple[str, Signature]],
        members: Mapping[str, VerifyKey],
        block_index: int | None = None,
    ) -> "RootHistory":
        return commit_block(self, root, term, leader, quorum_sigs, members, block_index)


def commit_block(
    history: RootHistory,
    root: Digest,
    term: int,
    leader: str,
    quorum_sigs: Iterable[tuple[str, Signature]],
    members: Mapping[str, VerifyKey],
    block_index: int | None = None,
) -> RootHistory:
    """Append a block if a quorum of ``members`` signed (block_index, root, term).

    Signatures from non-members or that fail verification do not count; they
    are kept on the entry and their signers listed in ``flagged``.
    """
    expected = history.next_index
    if block_index is None:
        block_index = expected
    if block_index != expected:
        raise GapInIndexError(f"expected block {expected}, got {block_index}")
    statement = block_statement(block_index, root, term)
    valid: dict[str, Signature] = {}
    kept: list[tuple[str, Signature]] = []
    flagged: list[str] = []
    for signer, sig in sorted(quorum_sigs, key=lambda p: p[0]):
        if signer in valid:
            continue
        vk = members.get(signer)
        if vk is not None and verify(vk, statement, sig):
            valid[signer] = sig
        elif signer not in flagged:
            flagged.append(signer)
        kept.append((signer, sig))
    need = quorum_size(len(members))
    if len(valid) < need:
        raise BadQuorumError(f"{len(valid)} valid signatures, quorum is {need}")
    entry = HistoryEntry(block_index, root, term, leader, tuple(kept), tuple(flagged))
    return RootHistory(history.entries + (entry,))
