"""Threshold sharing of the cluster secret with verifiable shards and epochs.

Each secret octet is shared independently over GF(p) (p = 257 in production,
so a share value occupies two octets).  A sharing publishes one hash
commitment per polynomial coefficient plus one digest per issued shard;
:func:`verify_shard` checks a shard against the latter.  Rotation adds a
random polynomial with a zero constant term, which leaves the secret intact
and makes every previous-epoch shard useless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .codec import DecodeError, Reader, Writer
from .crypto import Digest, SeededRng, hash_bytes

PRODUCTION_MODULUS = 257
SHARD_MAGIC = b"HCSH"
META_MAGIC = b"HCSM"
FORMAT_VERSION = 1


class ShardingError(ValueError):
    code = "sharding-error"


class ParameterError(ShardingError):
    code = "parameter-violation"


class BelowThresholdError(ShardingError):
    code = "below-threshold"


class MixedEpochError(ShardingError):
    code = "mixed-epoch"


class DuplicateIndexError(ShardingError):
    code = "duplicate-index"


class EpochMismatchError(ShardingError):
    code = "epoch-mismatch"


class IncompleteSetError(ShardingError):
    code = "incomplete-set"


class InconsistentShardsError(ShardingError):
    code = "inconsistent-shards"


@dataclass(frozen=True)
class Shard:
    index: int
    values: tuple[int, ...]
    epoch: int
    field_modulus: int = PRODUCTION_MODULUS

    def encode(self) -> bytes:
        w = Writer().raw(SHARD_MAGIC).u8(FORMAT_VERSION)
        w.u64(self.epoch).u16(self.index).u16(self.field_modulus).u32(len(self.values))
        for v in self.values:
            w.u16(v)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Shard":
        r = Reader(data)
        r.magic(SHARD_MAGIC)
        if r.u8() != FORMAT_VERSION:
            raise DecodeError("unsupported shard version")
        epoch, index, modulus, count = r.u64(), r.u16(), r.u16(), r.u32()
        values = tuple(r.u16() for _ in range(count))
        r.done()
        if modulus < 2 or any(v >= modulus for v in values):
            raise DecodeError("shard value outside field")
        return cls(index, values, epoch, modulus)


@dataclass(frozen=True)
class ShardedSecret:
    n: int
    k: int
    epoch: int
    field_modulus: int
    length: int
    commitments: tuple[Digest, ...]
    shard_digests: tuple[Digest, ...]

    def encode(self) -> bytes:
        w = Writer().raw(META_MAGIC).u8(FORMAT_VERSION)
        w.u16(self.n).u16(self.k).u64(self.epoch).u16(self.field_modulus).u32(self.length)
        for d in self.commitments + self.shard_digests:
            d.write(w)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "ShardedSecret":
        r = Reader(data)
        r.magic(META_MAGIC)
        if r.u8() != FORMAT_VERSION:
            raise DecodeError("unsupported metadata version")
        n, k, epoch, modulus, length = r.u16(), r.u16(), r.u64(), r.u16(), r.u32()
        commitments = tuple(Digest.read(r) for _ in range(k))
        digests = tuple(Digest.read(r) for _ in range(n))
        r.done()
        return cls(n, k, epoch, modulus, length, commitments, digests)


def _coefficient_commitment(epoch: int, position: int, modulus: int, coeffs: Sequence[int]) -> Digest:
    w = Writer().raw(b"coef").u64(epoch).u16(position).u16(modulus).u32(len(coeffs))
    for c in coeffs:
        w.u16(c)
    return hash_bytes(w.getvalue())


def _shard_digest(shard: Shard) -> Digest:
    return hash_bytes(b"shard" + shard.encode())


def _evaluate(coeffs: Sequence[int], x: int, p: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % p
    return acc


def _poly_mul_linear(poly: list[int], root: int, p: int) -> list[int]:
    """Multiply ``poly`` (ascending coefficients) by ``(x - root)``."""
    out = [0] * (len(poly) + 1)
    for i, c in enumerate(poly):
        out[i + 1] = (out[i + 1] + c) % p
        out[i] = (out[i] - root * c) % p
    return out


def _interpolate_coefficients(points: Sequence[tuple[int, int]], p: int) -> list[int]:
    """Coefficients (ascending) of the unique polynomial through ``points``."""
    k = len(points)
    result = [0] * k
    for i, (xi, yi) in enumerate(points):
        basis = [1]
        denom = 1
        for j, (xj, _) in enumerate(points):
            if j != i:
                basis = _poly_mul_linear(basis, xj, p)
                denom = denom * (xi - xj) % p
        scale = yi * pow(denom, -1, p) % p
        for d in range(k):
            result[d] = (result[d] + scale * basis[d]) % p
    return result


def lagrange_at_zero(points: Sequence[tuple[int, int]], p: int) -> int:
    total = 0
    for i, (xi, yi) in enumerate(points):
        num, den = 1, 1
        for j, (xj, _) in enumerate(points):
            if j != i:
                num = num * (-xj) % p
                den = den * (xi - xj) % p
        total = (total + yi * num * pow(den, -1, p)) % p
    return total


def _random_element(rng: SeededRng, p: int) -> int:
    return rng.randbelow(p)


def _check_params(n: int, k: int, p: int) -> None:
    if not 1 <= k <= n:
        raise ParameterError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n > p - 1:
        raise ParameterError(f"n={n} exceeds field capacity {p - 1}")


def _deal(
    coeffs: list[list[int]], n: int, k: int, epoch: int, p: int, length: int
) -> tuple[ShardedSecret, list[Shard]]:
    # coeffs[j][pos]: coefficient of x^j for secret element ``pos``
    shards = [
        Shard(x, tuple(_evaluate([coeffs[j][pos] for j in range(k)], x, p) for pos in range(length)), epoch, p)
        for x in range(1, n + 1)
    ]
    meta = ShardedSecret(
        n=n,
        k=k,
        epoch=epoch,
        field_modulus=p,
        length=length,
        commitments=tuple(_coefficient_commitment(epoch, j, p, coeffs[j]) for j in range(k)),
        shard_digests=tuple(_shard_digest(s) for s in shards),
    )
    return meta, shards


def split(
    secret: bytes | Sequence[int],
    n: int,
    k: int,
    rng: SeededRng,
    field_modulus: int = PRODUCTION_MODULUS,
    epoch: int = 0,
) -> tuple[ShardedSecret, list[Shard]]:
    """Share ``secret`` (octets, or field elements) so that any ``k`` of ``n`` recover it."""
    p = field_modulus
    _check_params(n, k, p)
    elements = list(secret)
    if not elements:
        raise ParameterError("secret must be nonempty")
    if any(not 0 <= e < p for e in elements):
        raise ParameterError(f"secret element outside GF({p})")
    coeffs = [elements] + [[_random_element(rng, p) for _ in elements] for _ in range(k - 1)]
    return _deal(coeffs, n, k, epoch, p, len(elements))


def verify_shard(shard: Shard, meta: ShardedSecret) -> bool:
    if shard.epoch != meta.epoch or shard.field_modulus != meta.field_modulus:
        return False
    if not 1 <= shard.index <= meta.n or len(shard.values) != meta.length:
        return False
    return _shard_digest(shard) == meta.shard_digests[shard.index - 1]


def _validated_points(shards: Iterable[Shard], meta: ShardedSecret) -> list[Shard]:
    shards = sorted(shards, key=lambda s: s.index)
    epochs = {s.epoch for s in shards}
    if len(epochs) > 1:
        raise MixedEpochError(f"shards span epochs {sorted(epochs)}")
    if epochs and epochs != {meta.epoch}:
        raise EpochMismatchError(f"shards are from epoch {epochs.pop()}, metadata is epoch {meta.epoch}")
    indices = [s.index for s in shards]
    if len(set(indices)) != len(indices):
        raise DuplicateIndexError("duplicate shard index")
    if len(shards) < meta.k:
        raise BelowThresholdError(f"{len(shards)} shards, threshold is {meta.k}")
    for s in shards:
        if s.field_modulus != meta.field_modulus or len(s.values) != meta.length:
            raise ParameterError("shard does not match sharing parameters")
        if not 1 <= s.index <= meta.field_modulus - 1:
            raise ParameterError(f"invalid shard index {s.index}")
    return shards


def reconstruct_elements(shards: Iterable[Shard], meta: ShardedSecret) -> list[int]:
    """Interpolate at zero from the ``k`` lowest-indexed shards.

    Shards beyond the threshold must lie on the same polynomial, otherwise
    :class:`InconsistentShardsError` is raised.
    """
    ordered = _validated_points(shards, meta)
    p = meta.field_modulus
    base, extra = ordered[: meta.k], ordered[meta.k:]
    out = []
    for pos in range(meta.length):
        pts = [(s.index, s.values[pos]) for s in base]
        out.append(lagrange_at_zero(pts, p))
        if extra:
            coeffs = _interpolate_coefficients(pts, p)
            for s in extra:
                if _evaluate(coeffs, s.index, p) != s.values[pos]:
                    raise InconsistentShardsError(f"shard {s.index} disagrees with the others")
    return out


def reconstruct(shards: Iterable[Shard], meta: ShardedSecret) -> bytes:
    elements = reconstruct_elements(shards, meta)
    if any(e > 0xFF for e in elements):
        raise InconsistentShardsError("interpolated value is not an octet")
    return bytes(elements)


def rotate(
    shards: Iterable[Shard], meta: ShardedSecret, rng: SeededRng
) -> tuple[ShardedSecret, list[Shard]]:
    """Proactive refresh: new epoch, same secret, fresh shard values."""
    shards = list(shards)
    if any(s.epoch != meta.epoch for s in shards):
        raise EpochMismatchError("rotation needs shards of the current epoch")
    if sorted(s.index for s in shards) != list(range(1, meta.n + 1)):
        raise IncompleteSetError(f"rotation needs all {meta.n} shards")
    if not all(verify_shard(s, meta) for s in shards):
        raise InconsistentShardsError("a shard fails verification")
    p, k = meta.field_modulus, meta.k
    ordered = sorted(shards, key=lambda s: s.index)
    coeffs: list[list[int]] = [[0] * meta.length for _ in range(k)]
    for pos in range(meta.length):
        current = _interpolate_coefficients([(s.index, s.values[pos]) for s in ordered[:k]], p)
        for j in range(k):
            refresh = 0 if j == 0 else _random_element(rng, p)
            coeffs[j][pos] = (current[j] + refresh) % p
    return _deal(coeffs, meta.n, k, meta.epoch + 1, p, meta.length)
