"""Snapshot files: a header followed by node encodings in depth-first order."""

from __future__ import annotations

from ..codec import DecodeError, Reader, Writer
from ..crypto import DEFAULT_HASH, Digest, hash_bytes
from ..sharding import PRODUCTION_MODULUS
from .trie import (
    EMPTY_ENCODING,
    Branch,
    Extension,
    Leaf,
    Trie,
    decode_node,
)

SNAPSHOT_MAGIC = b"HCSN"
SNAPSHOT_VERSION = 1
FORMAT_VERSION = 1
SUPPORTED_MODULI = frozenset({PRODUCTION_MODULUS})


class SnapshotRejected(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def write_snapshot(trie: Trie, field_modulus: int = PRODUCTION_MODULUS) -> bytes:
    if field_modulus not in SUPPORTED_MODULI:
        raise ValueError(f"unsupported field modulus {field_modulus}")
    nodes = trie.node_encodings()
    w = Writer().raw(SNAPSHOT_MAGIC).u8(SNAPSHOT_VERSION)
    w.u16(FORMAT_VERSION).u8(DEFAULT_HASH).u16(field_modulus).u32(len(nodes))
    for enc in nodes:
        w.blob(enc)
    return w.getvalue()


def read_snapshot(data: bytes) -> Trie:
    """Rebuild a trie, checking every digest link; raises :class:`SnapshotRejected`."""
    try:
        r = Reader(data)
        r.magic(SNAPSHOT_MAGIC)
        if r.u8() != SNAPSHOT_VERSION or r.u16() != FORMAT_VERSION:
            raise DecodeError("unsupported snapshot version")
        alg = r.u8()
        modulus = r.u16()
        count = r.u32()
        encodings = [r.blob() for _ in range(count)]
        r.done()
    except DecodeError as exc:
        raise SnapshotRejected("malformed", str(exc)) from exc
    if alg != DEFAULT_HASH:
        raise SnapshotRejected("malformed", f"unsupported hash algorithm {alg}")
    if modulus not in SUPPORTED_MODULI:
        raise SnapshotRejected("malformed", f"unsupported field modulus {modulus}")
    if encodings == [EMPTY_ENCODING]:
        return Trie()
    pos = 0

    def build(expected: Digest | None):
        nonlocal pos
        if pos >= len(encodings):
            raise SnapshotRejected("malformed", "missing node")
        enc = encodings[pos]
        pos += 1
        if expected is not None and hash_bytes(enc, expected.algorithm_id) != expected:
            raise SnapshotRejected("digest-mismatch", f"node {pos - 1}")
        try:
            node = decode_node(enc)
        except DecodeError as exc:
            raise SnapshotRejected("malformed", str(exc)) from exc
        if node.kind == "leaf":
            return Leaf(node.path, node.value)
        if node.kind == "extension":
            child = build(node.children[0])
            if not isinstance(child, Branch):
                raise SnapshotRejected("malformed", "extension must point at a branch")
            return Extension(node.path, child)
        if node.kind == "branch":
            kids = tuple(build(d) if d is not None else None for d in node.children)
            return Branch(kids, node.value)
        raise SnapshotRejected("malformed", "empty node inside a snapshot")

    root = build(None)
    if pos != len(encodings):
        raise SnapshotRejected("malformed", "surplus nodes")
    return Trie(root)


def verify_snapshot(data: bytes, root: Digest) -> Trie:
    trie = read_snapshot(data)
    if trie.root_hash() != root:
        raise SnapshotRejected("digest-mismatch", "snapshot root differs from the expected root")
    return trie
