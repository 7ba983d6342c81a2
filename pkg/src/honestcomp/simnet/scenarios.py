"""Threat catalog and trace predicates.

Each scenario names what the adversary does, which switch disables the
defence (the mutation), and a predicate over the finished trace.  The
predicate is evaluated against a from-genesis replay of the committed log,
not against what nodes claim about themselves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from ..lineage import INGRESS, ProvenanceRecord
from ..state import MemberInfo, MemberStatus, member_key, source_key
from .config import SCENARIO_IDS
from .trace import ReplayResult, Trace, replay

Predicate = Callable[[Trace, ReplayResult], "str | None"]


@dataclass(frozen=True)
class Verdict:
    scenario: str
    mitigated: bool
    detail: str = ""
    event: dict | None = None

    @property
    def label(self) -> str:
        return "mitigated" if self.mitigated else "violated"

    def to_json(self) -> dict:
        out = {"scenario": self.scenario, "verdict": self.label}
        if self.detail:
            out["detail"] = self.detail
        if self.event is not None:
            out["event"] = self.event
        return out


class Violation(Exception):
    def __init__(self, detail: str, event: dict | None = None) -> None:
        super().__init__(detail)
        self.detail = detail
        self.event = event


@dataclass(frozen=True)
class ThreatScenario:
    id: str
    title: str
    params: tuple[str, ...]
    mutation: str
    predicate: Predicate


def _first(trace: Trace, *names: str, **match) -> dict | None:
    for e in trace.events:
        if e["event"] in names and all(e["detail"].get(k) == v for k, v in match.items()):
            return e
    return None


def _s1(trace: Trace, rep: ReplayResult) -> None:
    trie = rep.trie
    for key, raw in trie.items(b"prov/"):
        rec = ProvenanceRecord.decode(raw)
        if rec.origin != INGRESS:
            continue
        registered = trie.get(source_key(rec.source_label))
        if registered is None or registered != rec.client_vk.encode() or not rec.client_signature_valid():
            raise Violation(f"committed ingress record {rec.data_id.hex()} has an invalid source signature")
    attack = trace.summary.get("attack_tx")
    if attack:
        result = rep.results.get(attack)
        if result is not None and result.ok:
            raise Violation("false ingress transaction was applied", _first(trace, "false_ingress"))


def _i1(trace: Trace, rep: ReplayResult) -> None:
    e = _first(trace, "session_established", via="proxy") or _first(trace, "outer_read_by_proxy")
    if e is not None:
        raise Violation("client accepted a session whose outer key the proxy holds", e)


def _i3(trace: Trace, rep: ReplayResult) -> None:
    expected = _first(trace, "session_established", via="direct")
    if expected is None:
        return
    for e in trace.by_event("session_established"):
        if e["detail"]["app_measurement"] != expected["detail"]["app_measurement"]:
            raise Violation("client accepted an application enclave with another measurement", e)


def _i4(trace: Trace, rep: ReplayResult) -> None:
    e = _first(trace, "runtime_read_payload")
    if e is not None:
        raise Violation("runtime manager recovered an application payload", e)


def _adversary(trace: Trace, rep: ReplayResult) -> None:
    adv = trace.summary.get("adversary")
    if adv and adv["recovered"]:
        raise Violation(f"adversary decrypted {adv['recovered']} ledger plaintexts from {','.join(adv['captured'])}")


def _t2(trace: Trace, rep: ReplayResult) -> None:
    at = trace.summary.get("destroyed_at")
    if at is None:
        return
    destroyed = set(trace.summary["destroyed"])
    after = [e for e in trace.by_event("commit") if e["tick"] > at and e["node"] not in destroyed]
    if not after:
        raise Violation(f"no commits after domain destruction at tick {at}", _first(trace, "domain_destroyed"))
    _adversary(trace, rep)


def _excluded_for(cause: str) -> Predicate:
    def check(trace: Trace, rep: ReplayResult) -> None:
        target = trace.config_json["target"]
        raw = rep.trie.get(member_key(target))
        info = MemberInfo.decode(raw) if raw else None
        if info is None or info.status is not MemberStatus.EXCLUDED or info.reason != cause:
            raise Violation(f"{target} was not excluded for {cause}")
        others = sorted(set(trace.summary["exclusions"]) - {target})
        if others:
            raise Violation(f"honest members excluded: {','.join(others)}", _first(trace, "member_excluded", platform_id=others[0]))

    return check


def _candidate_kept_out(trace: Trace, rep: ReplayResult) -> None:
    cid = trace.summary.get("candidate")
    if cid is None:
        return
    if rep.trie.get(member_key(cid)) is not None:
        raise Violation(f"{cid} was admitted", _first(trace, "member_admitted", platform_id=cid))
    e = _first(trace, "shard_sent", to=cid)
    if e is not None:
        raise Violation(f"a shard was sent to {cid}", e)


def _no_compromised_member(trace: Trace, rep: ReplayResult) -> None:
    cid = trace.summary.get("candidate")
    if cid and trace.summary.get("candidate_compromised") and rep.trie.get(member_key(cid)) is not None:
        raise Violation(f"{cid} runs compromised code and was admitted", _first(trace, "member_admitted", platform_id=cid))


CATALOG: dict[str, ThreatScenario] = {
    s.id: s
    for s in (
        ThreatScenario("S1", "false responses injected at the ingress", ("attack_tick",),
                       "client-signature check disabled", _s1),
        ThreatScenario("I1", "interception of the client channel", ("attack_tick",),
                       "outer quote not bound to the key share", _i1),
        ThreatScenario("I3", "tampered application enclave", ("attack_tick",),
                       "inner measurement not checked", _i3),
        ThreatScenario("I4", "runtime manager spying on client traffic", (),
                       "single-layer channel", _i4),
        ThreatScenario("E1", "platform sealing key extracted", ("target",),
                       "full cluster secret sealed at rest", _adversary),
        ThreatScenario("E2", "compromised vendor issuing false quotes", ("attack_tick",),
                       "cross-vendor validation skipped", _no_compromised_member),
        ThreatScenario("T2", "physical destruction of a failure domain", ("destroy_domain", "destroy_tick"),
                       "all nodes placed in one domain", _t2),
        ThreatScenario("T3", "clock speed manipulation", ("target", "drift"),
                       "drift threshold set to infinity", _excluded_for("drift")),
        ThreatScenario("D1", "corrupted communication", ("target", "corruption"),
                       "error-rate threshold set to infinity", _excluded_for("comm-anomaly")),
        ThreatScenario("S2", "compromised platform seeking admission", ("attack_tick",),
                       "admission attestation skipped", _candidate_kept_out),
    )
}

assert tuple(CATALOG) == SCENARIO_IDS


def honest_roots(trace: Trace) -> dict[str, str]:
    nodes = trace.summary["nodes"]
    return {pid: nodes[pid]["root"] for pid in trace.summary["honest"]}


def check(trace: Trace, scenario: str, replayed: ReplayResult | None = None) -> Verdict:
    """Evaluate ``scenario``'s predicate; a trace without that attack is vacuously mitigated."""
    if scenario not in CATALOG:
        raise KeyError(scenario)
    rep = replayed if replayed is not None else replay(trace)
    roots = honest_roots(trace)
    if len(set(roots.values())) > 1:
        return Verdict(scenario, False, "honest nodes disagree on the final root: " + ", ".join(f"{k}={v[:12]}" for k, v in roots.items()))
    if rep.mismatched:
        pid = next(iter(rep.mismatched))
        return Verdict(scenario, False, f"{pid}'s root does not match replay of the committed log")
    if trace.config_json["scenario"] != scenario:
        return Verdict(scenario, True, "no such attack in this trace")
    try:
        CATALOG[scenario].predicate(trace, rep)
    except Violation as v:
        return Verdict(scenario, False, v.detail, v.event)
    return Verdict(scenario, True)


@dataclass(frozen=True)
class SafetyReport:
    leaders_per_term_ok: bool
    log_matching_ok: bool
    roots_agree: bool
    spurious_exclusions: tuple[str, ...]
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.leaders_per_term_ok and self.log_matching_ok and self.roots_agree and not self.spurious_exclusions


def check_safety(trace: Trace) -> SafetyReport:
    """Raft safety invariants over one trace."""
    leaders: dict[int, set[str]] = {}
    for e in trace.by_event("became_leader"):
        leaders.setdefault(e["term"], set()).add(e["node"])
    multi = sorted(t for t, s in leaders.items() if len(s) > 1)
    logs = {pid: n["log"] for pid, n in trace.summary["nodes"].items()}
    matching, detail = True, ""
    pids = sorted(logs)
    for i, a in enumerate(pids):
        for b in pids[i + 1:]:
            la, lb = logs[a], logs[b]
            common = min(len(la), len(lb))
            last_same_term = max((k for k in range(common) if la[k][0] == lb[k][0]), default=-1)
            if la[: last_same_term + 1] != lb[: last_same_term + 1]:
                matching, detail = False, f"logs of {a} and {b} diverge below index {last_same_term + 1}"
    cfg = trace.config_json
    expected = {cfg["target"]} if cfg["scenario"] in ("T3", "D1") else set()
    spurious = tuple(sorted(set(trace.summary["exclusions"]) - expected))
    roots = set(honest_roots(trace).values())
    if multi:
        detail = f"terms with several leaders: {multi}"
    return SafetyReport(not multi, matching, len(roots) <= 1, spurious, detail)
