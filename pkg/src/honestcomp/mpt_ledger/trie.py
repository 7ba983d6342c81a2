"""Persistent Merkle Patricia Trie over octet keys.

Node encodings (all integers big-endian):

* empty      ``0x80``
* extension  ``0x00|parity`` ``u8 nibble_count`` packed nibbles, child digest
* leaf       ``0x20|parity`` ``u8 nibble_count`` packed nibbles, ``u32`` length, value
* branch     ``0x40`` ``u16`` occupancy bitmap, one digest per occupied slot,
             ``u8`` has_value, optional ``u32`` length + value

Digests are ``u8 algorithm_id`` followed by the hash octets.  Children are
referenced only by digest.  The shape is canonical for a given key/value
map, so the root hash does not depend on insertion order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

from ..codec import DecodeError, Reader, Writer
from ..crypto import DEFAULT_HASH, Digest, hash_bytes, hash_size

MAX_KEY_SIZE = 64
MAX_INLINE_VALUE = 1024

EMPTY_ENCODING = b"\x80"
_EXT = 0x00
_LEAF = 0x20
_BRANCH = 0x40
_EMPTY = 0x80

PROOF_MAGIC = b"HCPF"
PROOF_VERSION = 1


class TrieError(ValueError):
    code = "trie-error"


class OversizedKeyError(TrieError):
    code = "oversized-key"


class InvalidKeyError(TrieError):
    code = "invalid-key"


class OversizedValueError(TrieError):
    code = "oversized-value"


class ProofRejected(Exception):
    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def key_to_nibbles(key: bytes) -> tuple[int, ...]:
    out = []
    for b in key:
        out.append(b >> 4)
        out.append(b & 0x0F)
    return tuple(out)


def nibbles_to_key(nibbles: tuple[int, ...]) -> bytes:
    if len(nibbles) % 2:
        raise ValueError("odd nibble count")
    return bytes((nibbles[i] << 4) | nibbles[i + 1] for i in range(0, len(nibbles), 2))


def _write_path(w: Writer, flag: int, path: tuple[int, ...]) -> None:
    w.u8(flag | (len(path) & 1)).u8(len(path))
    packed = bytearray()
    for i in range(0, len(path), 2):
        hi = path[i]
        lo = path[i + 1] if i + 1 < len(path) else 0
        packed.append((hi << 4) | lo)
    w.raw(bytes(packed))


def _read_path(r: Reader, prefix: int) -> tuple[int, ...]:
    count = r.u8()
    if (prefix & 1) != (count & 1):
        raise DecodeError("parity flag disagrees with nibble count")
    packed = r.fixed((count + 1) // 2)
    path = []
    for b in packed:
        path.append(b >> 4)
        path.append(b & 0x0F)
    if count % 2:
        if path[-1] != 0:
            raise DecodeError("nonzero padding nibble")
        path.pop()
    return tuple(path)


class _Node:
    __slots__ = ("_enc", "_digest")

    def encoding(self) -> bytes:
        enc = self._enc
        if enc is None:
            enc = self._enc = self._encode()
        return enc

    def digest(self) -> Digest:
        d = self._digest
        if d is None:
            d = self._digest = hash_bytes(self.encoding())
        return d

    def _encode(self) -> bytes:  # pragma: no cover - abstract
        raise NotImplementedError


class Leaf(_Node):
    __slots__ = ("path", "value")

    def __init__(self, path: tuple[int, ...], value: bytes) -> None:
        self.path, self.value = path, value
        self._enc = self._digest = None

    def _encode(self) -> bytes:
        w = Writer()
        _write_path(w, _LEAF, self.path)
        w.blob(self.value)
        return w.getvalue()


class Extension(_Node):
    __slots__ = ("path", "child")

    def __init__(self, path: tuple[int, ...], child: "Branch") -> None:
        self.path, self.child = path, child
        self._enc = self._digest = None

    def _encode(self) -> bytes:
        w = Writer()
        _write_path(w, _EXT, self.path)
        self.child.digest().write(w)
        return w.getvalue()


class Branch(_Node):
    __slots__ = ("children", "value")

    def __init__(self, children: tuple, value: bytes | None) -> None:
        self.children, self.value = children, value
        self._enc = self._digest = None

    def _encode(self) -> bytes:
        w = Writer().u8(_BRANCH)
        bitmap = 0
        for i, c in enumerate(self.children):
            if c is not None:
                bitmap |= 1 << i
        w.u16(bitmap)
        for c in self.children:
            if c is not None:
                c.digest().write(w)
        if self.value is None:
            w.u8(0)
        else:
            w.u8(1).blob(self.value)
        return w.getvalue()


_EMPTY_CHILDREN = (None,) * 16


def _lcp(a: tuple[int, ...], b: tuple[int, ...]) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


def _with_child(children: tuple, idx: int, node) -> tuple:
    lst = list(children)
    lst[idx] = node
    return tuple(lst)


def _join(prefix: tuple[int, ...], node):
    """Prepend ``prefix`` to ``node`` while keeping the shape canonical."""
    if node is None or not prefix:
        return node
    if isinstance(node, Leaf):
        return Leaf(prefix + node.path, node.value)
    if isinstance(node, Extension):
        return Extension(prefix + node.path, node.child)
    return Extension(prefix, node)


def _normalize_branch(children: tuple, value: bytes | None):
    occupied = [i for i, c in enumerate(children) if c is not None]
    if not occupied:
        return None if value is None else Leaf((), value)
    if len(occupied) == 1 and value is None:
        idx = occupied[0]
        return _join((idx,), children[idx])
    return Branch(children, value)


def _insert(node, path: tuple[int, ...], value: bytes):
    if node is None:
        return Leaf(path, value)
    if isinstance(node, Branch):
        if not path:
            if node.value == value:
                return node
            return Branch(node.children, value)
        child = node.children[path[0]]
        new_child = _insert(child, path[1:], value)
        if new_child is child:
            return node
        return Branch(_with_child(node.children, path[0], new_child), node.value)
    if isinstance(node, Leaf):
        if node.path == path:
            return node if node.value == value else Leaf(path, value)
        common = _lcp(node.path, path)
        children = list(_EMPTY_CHILDREN)
        branch_value = None
        old_rest, new_rest = node.path[common:], path[common:]
        if old_rest:
            children[old_rest[0]] = Leaf(old_rest[1:], node.value)
        else:
            branch_value = node.value
        if new_rest:
            children[new_rest[0]] = Leaf(new_rest[1:], value)
        else:
            branch_value = value
        return _join(path[:common], Branch(tuple(children), branch_value))
    # extension
    common = _lcp(node.path, path)
    if common == len(node.path):
        new_child = _insert(node.child, path[common:], value)
        if new_child is node.child:
            return node
        return Extension(node.path, new_child)
    children = list(_EMPTY_CHILDREN)
    branch_value = None
    ext_rest = node.path[common:]
    children[ext_rest[0]] = _join(ext_rest[1:], node.child)
    new_rest = path[common:]
    if new_rest:
        children[new_rest[0]] = Leaf(new_rest[1:], value)
    else:
        branch_value = value
    return _join(path[:common], Branch(tuple(children), branch_value))


def _delete(node, path: tuple[int, ...]):
    if node is None:
        return None
    if isinstance(node, Leaf):
        return None if node.path == path else node
    if isinstance(node, Extension):
        n = len(node.path)
        if path[:n] != node.path:
            return node
        new_child = _delete(node.child, path[n:])
        if new_child is node.child:
            return node
        return _join(node.path, new_child)
    if not path:
        if node.value is None:
            return node
        return _normalize_branch(node.children, None)
    child = node.children[path[0]]
    new_child = _delete(child, path[1:])
    if new_child is child:
        return node
    return _normalize_branch(_with_child(node.children, path[0], new_child), node.value)


def _get(node, path: tuple[int, ...]) -> bytes | None:
    while node is not None:
        if isinstance(node, Leaf):
            return node.value if node.path == path else None
        if isinstance(node, Extension):
            n = len(node.path)
            if path[:n] != node.path:
                return None
            node, path = node.child, path[n:]
            continue
        if not path:
            return node.value
        node, path = node.children[path[0]], path[1:]
    return None


def _check_key(key: bytes) -> None:
    if not key:
        raise InvalidKeyError("key must be nonempty")
    if len(key) > MAX_KEY_SIZE:
        raise OversizedKeyError(f"key of {len(key)} octets exceeds {MAX_KEY_SIZE}")


@dataclass(frozen=True)
class InclusionProof:
    key: bytes
    value: bytes | None
    nodes: tuple[bytes, ...]

    def encode(self) -> bytes:
        w = Writer().raw(PROOF_MAGIC).u8(PROOF_VERSION).blob(self.key)
        if self.value is None:
            w.u8(0)
        else:
            w.u8(1).blob(self.value)
        w.u32(len(self.nodes))
        for n in self.nodes:
            w.blob(n)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "InclusionProof":
        r.magic(PROOF_MAGIC)
        if r.u8() != PROOF_VERSION:
            raise DecodeError("unsupported proof version")
        key = r.blob(MAX_KEY_SIZE)
        present = r.flag()
        value = r.blob() if present else None
        count = r.u32()
        if count > 1 + 2 * MAX_KEY_SIZE * 2:
            raise DecodeError("proof path too long")
        nodes = tuple(r.blob() for _ in range(count))
        return cls(key, value, nodes)

    @classmethod
    def decode(cls, data: bytes) -> "InclusionProof":
        r = Reader(data)
        p = cls.read(r)
        r.done()
        return p


class Trie:
    """Immutable handle on a trie version; updates return a new handle."""

    __slots__ = ("_root",)

    def __init__(self, root: _Node | None = None) -> None:
        self._root = root

    @property
    def root(self) -> _Node | None:
        return self._root

    def insert(self, key: bytes, value: bytes) -> "Trie":
        _check_key(key)
        if len(value) > MAX_INLINE_VALUE:
            raise OversizedValueError(f"value of {len(value)} octets must be stored as a blob reference")
        new_root = _insert(self._root, key_to_nibbles(key), bytes(value))
        return self if new_root is self._root else Trie(new_root)

    def get(self, key: bytes) -> bytes | None:
        _check_key(key)
        return _get(self._root, key_to_nibbles(key))

    def __contains__(self, key: bytes) -> bool:
        return self.get(key) is not None

    def delete(self, key: bytes) -> "Trie":
        _check_key(key)
        new_root = _delete(self._root, key_to_nibbles(key))
        return self if new_root is self._root else Trie(new_root)

    def root_hash(self) -> Digest:
        if self._root is None:
            return hash_bytes(EMPTY_ENCODING)
        return self._root.digest()

    def items(self, prefix: bytes = b"") -> Iterator[tuple[bytes, bytes]]:
        """Key/value pairs in ascending key order, optionally under ``prefix``."""

        def walk(node, path: tuple[int, ...]):
            if node is None:
                return
            if isinstance(node, Leaf):
                yield path + node.path, node.value
            elif isinstance(node, Extension):
                yield from walk(node.child, path + node.path)
            else:
                if node.value is not None:
                    yield path, node.value
                for i, c in enumerate(node.children):
                    if c is not None:
                        yield from walk(c, path + (i,))

        want = key_to_nibbles(prefix)
        for nibbles, value in walk(self._root, ()):
            if nibbles[: len(want)] == want:
                yield nibbles_to_key(nibbles), value

    def __len__(self) -> int:
        return sum(1 for _ in self.items())

    def prove(self, key: bytes) -> InclusionProof:
        _check_key(key)
        path = key_to_nibbles(key)
        node = self._root
        encodings: list[bytes] = []
        value = None
        if node is None:
            return InclusionProof(bytes(key), None, (EMPTY_ENCODING,))
        while node is not None:
            encodings.append(node.encoding())
            if isinstance(node, Leaf):
                value = node.value if node.path == path else None
                break
            if isinstance(node, Extension):
                n = len(node.path)
                if path[:n] != node.path:
                    break
                node, path = node.child, path[n:]
                continue
            if not path:
                value = node.value
                break
            node, path = node.children[path[0]], path[1:]
        return InclusionProof(bytes(key), value, tuple(encodings))

    def node_encodings(self) -> list[bytes]:
        """Every node encoding in deterministic depth-first (pre-order) order."""
        out: list[bytes] = []

        def walk(node):
            out.append(node.encoding())
            if isinstance(node, Extension):
                walk(node.child)
            elif isinstance(node, Branch):
                for c in node.children:
                    if c is not None:
                        walk(c)

        if self._root is None:
            return [EMPTY_ENCODING]
        walk(self._root)
        return out


# -- decoding (proofs and snapshots) -------------------------------------------


@dataclass(frozen=True)
class DecodedNode:
    kind: str
    path: tuple[int, ...] = ()
    value: bytes | None = None
    children: tuple[Digest | None, ...] = ()


@lru_cache(maxsize=1 << 16)
def decode_node(enc: bytes) -> DecodedNode:
    r = Reader(enc)
    prefix = r.u8()
    kind = prefix & 0xFE
    if prefix == _EMPTY:
        r.done()
        return DecodedNode("empty")
    if kind == _LEAF:
        path = _read_path(r, prefix)
        value = r.blob(MAX_INLINE_VALUE)
        r.done()
        return DecodedNode("leaf", path, value)
    if kind == _EXT:
        path = _read_path(r, prefix)
        if not path:
            raise DecodeError("extension with empty path")
        child = Digest.read(r)
        r.done()
        return DecodedNode("extension", path, None, (child,))
    if prefix == _BRANCH:
        bitmap = r.u16()
        children = tuple(Digest.read(r) if bitmap >> i & 1 else None for i in range(16))
        has_value = r.flag()
        value = r.blob(MAX_INLINE_VALUE) if has_value else None
        r.done()
        occupied = sum(c is not None for c in children)
        if occupied < 2 and not (occupied == 1 and value is not None):
            raise DecodeError("branch is not canonical")
        return DecodedNode("branch", (), value, children)
    raise DecodeError(f"unknown node prefix {prefix:#x}")


def verify_proof(root: Digest, proof: InclusionProof) -> None:
    """Raise :class:`ProofRejected` unless ``proof`` recomputes to ``root``.

    Reasons: ``digest-mismatch`` (a hash link fails), ``path-malformed``
    (undecodable node, missing or surplus nodes) and ``key-mismatch`` (the
    terminal node contradicts the claimed value or absence).
    """
    try:
        _check_key(proof.key)
    except TrieError as exc:
        raise ProofRejected("path-malformed", str(exc)) from exc
    if not proof.nodes:
        raise ProofRejected("path-malformed", "empty proof")
    path = key_to_nibbles(proof.key)
    expected = root
    found: bytes | None = None
    terminal_at = None
    for i, enc in enumerate(proof.nodes):
        if hash_bytes(enc, expected.algorithm_id) != expected:
            raise ProofRejected("digest-mismatch", f"node {i}")
        try:
            node = decode_node(enc)
        except DecodeError as exc:
            raise ProofRejected("path-malformed", f"node {i}: {exc}") from exc
        if node.kind == "empty":
            if i != 0:
                raise ProofRejected("path-malformed", "empty node below root")
            terminal_at, found = i, None
            break
        if node.kind == "leaf":
            terminal_at, found = i, node.value if node.path == path else None
            break
        if node.kind == "extension":
            n = len(node.path)
            if path[:n] != node.path:
                terminal_at, found = i, None
                break
            expected, path = node.children[0], path[n:]
            continue
        if not path:
            terminal_at, found = i, node.value
            break
        child = node.children[path[0]]
        if child is None:
            terminal_at, found = i, None
            break
        expected, path = child, path[1:]
    if terminal_at is None:
        raise ProofRejected("path-malformed", "path ends before a terminal node")
    if terminal_at != len(proof.nodes) - 1:
        raise ProofRejected("path-malformed", "surplus nodes after terminal")
    if found != proof.value:
        raise ProofRejected("key-mismatch", "terminal node contradicts the claim")


def empty_root(algorithm_id: int = DEFAULT_HASH) -> Digest:
    return hash_bytes(EMPTY_ENCODING, algorithm_id)


def digest_size() -> int:
    return hash_size(DEFAULT_HASH)
