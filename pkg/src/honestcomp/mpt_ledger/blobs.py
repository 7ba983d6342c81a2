"""External blob storage: the ledger keeps only a digest-bearing reference.

Forgetting a blob removes the payload while every ledger proof over the
reference keeps verifying, which is how erasure coexists with an immutable
ledger.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..codec import DecodeError, Reader, Writer
from ..crypto import Digest, hash_bytes

BLOBREF_MAGIC = b"HCBR"


class BlobError(KeyError):
    code = "blob-error"


class UnknownBlobError(BlobError):
    code = "unknown-id"


class BlobDigestError(BlobError):
    code = "digest-mismatch"


@dataclass(frozen=True)
class BlobRef:
    external_id: str
    digest: Digest
    size: int

    def encode(self) -> bytes:
        w = Writer().raw(BLOBREF_MAGIC).u8(1).text(self.external_id)
        self.digest.write(w)
        w.u64(self.size)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "BlobRef":
        r = Reader(data)
        r.magic(BLOBREF_MAGIC)
        if r.u8() != 1:
            raise DecodeError("unsupported blob reference version")
        ext = r.text(128)
        digest = Digest.read(r)
        size = r.u64()
        r.done()
        return cls(ext, digest, size)

    @staticmethod
    def is_ref(data: bytes) -> bool:
        return data[:4] == BLOBREF_MAGIC


class BlobStore:
    """Content-addressed, so replicas storing the same payload agree on the id."""

    def __init__(self) -> None:
        self._blobs: dict[str, bytes] = {}

    def __contains__(self, external_id: str) -> bool:
        return external_id in self._blobs

    def store(self, payload: bytes) -> BlobRef:
        digest = hash_bytes(payload)
        ext = digest.hex()[:32]
        self._blobs[ext] = bytes(payload)
        return BlobRef(ext, digest, len(payload))

    def dereference(self, ref: BlobRef) -> bytes:
        try:
            payload = self._blobs[ref.external_id]
        except KeyError:
            raise UnknownBlobError(ref.external_id) from None
        if hash_bytes(payload, ref.digest.algorithm_id) != ref.digest:
            raise BlobDigestError(ref.external_id)
        return payload

    def forget(self, external_id: str) -> None:
        try:
            del self._blobs[external_id]
        except KeyError:
            raise UnknownBlobError(external_id) from None


def store_external(store: BlobStore, payload: bytes) -> BlobRef:
    return store.store(payload)


def forget_external(store: BlobStore, external_id: str) -> None:
    store.forget(external_id)
