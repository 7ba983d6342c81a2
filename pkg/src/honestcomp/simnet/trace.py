"""Trace files and from-genesis replay."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..codec import DecodeError, Reader
from ..consensus import LogEntry
from ..execution import BlockContext, TxResult
from ..mpt_ledger import Trie
from ..state import MemberInfo, member_key


class TraceError(ValueError):
    code = "malformed-trace"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class Trace:
    header: dict
    events: list[dict]
    summary: dict

    @property
    def config_json(self) -> dict:
        return self.header["config"]

    def lines(self):
        yield _dumps({"header": self.header})
        for e in self.events:
            yield _dumps(e)
        yield _dumps({"summary": self.summary})

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Trace":
        try:
            rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise TraceError(f"not JSON lines: {exc}") from None
        if len(rows) < 2 or "header" not in rows[0] or "summary" not in rows[-1]:
            raise TraceError("trace needs a header line first and a summary line last")
        return cls(rows[0]["header"], rows[1:-1], rows[-1]["summary"])

    @classmethod
    def read(cls, path: str | Path) -> "Trace":
        return cls.loads(Path(path).read_text())

    def by_event(self, *names: str) -> list[dict]:
        return [e for e in self.events if e["event"] in names]


@dataclass
class ReplayResult:
    roots: list[str]
    trie: Trie
    results: dict[str, TxResult] = field(default_factory=dict)
    mismatched: dict[str, tuple[str, str]] = field(default_factory=dict)
    bad_entries: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatched and not self.bad_entries


def replay(trace: Trace) -> ReplayResult:
    """Re-apply the committed log from genesis and compare every node's root.

    A node's reported root must equal the replayed root after its own
    ``last_applied`` entries, so lagging, excluded and destroyed nodes are
    checked at the point they stopped.
    """
    from .cluster import build_cluster
    from .config import config_from_json

    setup = build_cluster(config_from_json(trace.config_json))
    engine = setup.engine()
    trie = setup.genesis
    roots = [trie.root_hash().hex()]
    results: dict[str, TxResult] = {}
    bad: list[int] = []
    for i, raw in enumerate(trace.summary["committed_log"], 1):
        try:
            r = Reader(bytes.fromhex(raw))
            entry = LogEntry.read(r)
            r.done()
        except (DecodeError, ValueError):
            bad.append(i)
            roots.append("")
            continue
        member = trie.get(member_key(entry.proposer))
        if entry.index != i or member is None or not entry.signature_valid(MemberInfo.decode(member).aik):
            bad.append(i)
        outcome = engine.apply(trie, entry.command, BlockContext(i - 1, entry.term, i, entry.proposer))
        trie = outcome.trie
        results.setdefault(outcome.result.tx_id.hex(), outcome.result)
        roots.append(trie.root_hash().hex())
    mismatched = {}
    for pid, node in sorted(trace.summary["nodes"].items()):
        n = node["last_applied"]
        expected = roots[n] if n < len(roots) else "<beyond committed log>"
        if expected != node["root"]:
            mismatched[pid] = (expected, node["root"])
    return ReplayResult(roots, trie, results, mismatched, bad)
