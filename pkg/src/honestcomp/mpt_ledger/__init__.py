from .blobs import BlobRef, BlobStore, UnknownBlobError, forget_external, store_external
from .history import (
    BadQuorumError,
    GapInIndexError,
    HistoryEntry,
    RootHistory,
    block_statement,
    commit_block,
    quorum_size,
)
from .snapshot import SnapshotRejected, read_snapshot, verify_snapshot, write_snapshot
from .trie import (
    MAX_INLINE_VALUE,
    MAX_KEY_SIZE,
    InclusionProof,
    InvalidKeyError,
    OversizedKeyError,
    OversizedValueError,
    ProofRejected,
    Trie,
    empty_root,
    verify_proof,
)

__all__ = [
    "BadQuorumError",
    "BlobRef",
    "BlobStore",
    "GapInIndexError",
    "HistoryEntry",
    "InclusionProof",
    "InvalidKeyError",
    "MAX_INLINE_VALUE",
    "MAX_KEY_SIZE",
    "OversizedKeyError",
    "OversizedValueError",
    "ProofRejected",
    "RootHistory",
    "SnapshotRejected",
    "Trie",
    "UnknownBlobError",
    "block_statement",
    "commit_block",
    "empty_root",
    "forget_external",
    "quorum_size",
    "read_snapshot",
    "store_external",
    "verify_proof",
    "verify_snapshot",
    "write_snapshot",
]
