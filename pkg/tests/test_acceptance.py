"""The eight acceptance criteria, each at its stated scale and time limit.

A summary line per criterion is printed at the end of the run.
"""

import itertools
import time

import numpy as np
import pytest

from oracles import SortedMapOracle, consistent_counts_brute, consistent_counts_linear, posterior_is_uniform
from honestcomp.channel import (
    Envelope,
    ReplayError,
    RoutingHeader,
    open_at_app,
    open_at_runtime,
    runtime_attempt_inner,
    seal_request,
)
from honestcomp.codec import DecodeError
from honestcomp.crypto import KeyShare, SeededRng, SigningKey
from honestcomp.lineage import AccessRevoked, LineageBundle, unwrap_datum_key, verify_provenance
from honestcomp.execution import LocalLedger
from honestcomp.mpt_ledger import InclusionProof, ProofRejected, Trie, verify_proof
from honestcomp.sharding import (
    PRODUCTION_MODULUS,
    EpochMismatchError,
    MixedEpochError,
    reconstruct,
    reconstruct_elements,
    rotate,
    split,
)
from honestcomp.simnet import SCENARIO_IDS, SimConfig, check, check_safety, replay, run
from honestcomp.state import revocation_key

FAULT_FREE_SEEDS = range(1000)
SCENARIO_SEEDS = range(5)
BRUTE_FORCE_LIMIT = 100_000


def _flip(data: bytes, bit: int) -> bytes:
    out = bytearray(data)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


def _elapsed(record_property, start, limit):
    elapsed = time.perf_counter() - start
    record_property("elapsed", elapsed)
    if limit:
        assert elapsed < limit, f"took {elapsed:.1f}s, limit {limit}s"


# -- 1: threshold sharing, exhaustively ------------------------------------------------------


def _sharing_cases():
    for p in (7, PRODUCTION_MODULUS):
        for n in range(1, min(7, p - 1) + 1):
            for k in range(1, n + 1):
                yield p, n, k


@pytest.mark.criterion(1, "threshold sharing exhaustive over GF(7) and the production field", 10)
def test_criterion_1_sharing_exhaustive(record_property):
    start = time.perf_counter()
    rng = SeededRng.from_int(1).fork("criterion-1")
    cases = 0
    for p, n, k in _sharing_cases():
        secret = [rng.randint(0, p - 1) for _ in range(2)]
        meta, shards = split(secret, n, k, rng.fork(f"{p}/{n}/{k}"), field_modulus=p)
        for subset in itertools.combinations(shards, k):
            assert reconstruct_elements(subset, meta) == secret
        for subset in itertools.combinations(shards, k - 1):
            xs = [s.index for s in subset]
            if p == 7:
                assert posterior_is_uniform(p, k, xs)
            for pos in range(len(secret)):
                held = [(s.index, s.values[pos]) for s in subset]
                counts = consistent_counts_linear(p, k, held)
                assert np.all(counts == counts[0]) and counts[0] > 0
                if p ** (k - 1) <= BRUTE_FORCE_LIMIT:
                    assert np.array_equal(counts, consistent_counts_brute(p, k, held))
            cases += 1
        # the oracle is not vacuous: k shares pin the secret
        held = [(s.index, s.values[0]) for s in shards[:k]]
        counts = consistent_counts_linear(p, k, held)
        assert counts[secret[0]] == 1 and counts.sum() == 1
    assert cases > 0
    _elapsed(record_property, start, 10)


# -- 2: rotation --------------------------------------------------------------------------


@pytest.mark.criterion(2, "1000 seeded rotate cycles keep the secret and reject every cross-epoch mix", 10)
def test_criterion_2_rotation(record_property):
    start = time.perf_counter()
    rng = SeededRng.from_int(2).fork("criterion-2")
    secret = rng.read(16)
    n, k = 5, 3
    meta, shards = split(secret, n, k, rng.fork("split"))
    mixes = 0
    for cycle in range(1000):
        new_meta, new = rotate(shards, meta, rng.fork(f"rotate/{cycle}"))
        assert new_meta.epoch == meta.epoch + 1
        pick = rng.fork(f"pick/{cycle}")
        subset = sorted(new, key=lambda _: pick.read(4))[:k]
        assert reconstruct(subset, new_meta) == secret
        for size in (k, k + 1):
            for combo in itertools.combinations(shards + new, size):
                if len({s.epoch for s in combo}) < 2:
                    continue
                for m in (meta, new_meta):
                    with pytest.raises(MixedEpochError):
                        reconstruct(combo, m)
                mixes += 1
        with pytest.raises(EpochMismatchError):
            rotate(shards, new_meta, rng.fork("stale"))
        meta, shards = new_meta, new
    assert mixes == 1000 * 300
    _elapsed(record_property, start, 10)


# -- 3: the trie -----------------------------------------------------------------------------


@pytest.mark.criterion(3, "trie vs sorted map, order independence, proof bit flips", 60)
def test_criterion_3_trie(record_property):
    start = time.perf_counter()
    rng = SeededRng.from_int(3).fork("criterion-3")
    pool = [rng.read(rng.randint(1, 8)) for _ in range(300)]
    pool += [b"\x12\x34" + bytes([i]) for i in range(20)] + [b"\x12", b"\x12\x34"]
    trie, oracle = Trie(), SortedMapOracle()
    for step in range(10_000):
        key = pool[rng.randint(0, len(pool) - 1)]
        if rng.randint(0, 9) < 6:
            value = rng.read(rng.randint(0, 40))
            trie, _ = trie.insert(key, value), oracle.insert(key, value)
        else:
            trie, _ = trie.delete(key), oracle.delete(key)
        assert trie.get(key) == oracle.d.get(key)
        if step % 1000 == 999:
            assert list(trie.items()) == oracle.items()
            fresh = Trie()
            for k, v in oracle.items():
                fresh = fresh.insert(k, v)
            assert fresh.root_hash() == trie.root_hash()

    for size in range(1, 5):
        for trial in range(30):
            keys = sorted({pool[rng.randint(0, len(pool) - 1)] for _ in range(size)})
            pairs = [(k, rng.read(rng.randint(0, 12))) for k in keys]
            roots = set()
            for order in itertools.permutations(pairs):
                t = Trie()
                for k, v in order:
                    t = t.insert(k, v)
                roots.add(t.root_hash())
            assert len(roots) == 1

    t = Trie()
    for i in range(50):
        t = t.insert(pool[i], rng.read(rng.randint(1, 40)))
    root = t.root_hash()
    flips = 0
    for key in pool[:50]:
        enc = t.prove(key).encode()
        verify_proof(root, InclusionProof.decode(enc))
        for bit in range(len(enc) * 8):
            with pytest.raises((DecodeError, ProofRejected)):
                verify_proof(root, InclusionProof.decode(_flip(enc, bit)))
            flips += 1
    assert flips > 50 * 8 * 64
    _elapsed(record_property, start, 60)


# -- 4 to 6: the simulated cluster ------------------------------------------------------------


@pytest.fixture(scope="module")
def fault_free():
    start = time.perf_counter()
    traces = [run(SimConfig(seed=s)) for s in FAULT_FREE_SEEDS]
    return traces, time.perf_counter() - start


@pytest.fixture(scope="module")
def scenario_runs():
    start = time.perf_counter()
    out = []
    for scenario in SCENARIO_IDS:
        for seed in SCENARIO_SEEDS:
            for mutation in (False, True):
                out.append((scenario, mutation, run(SimConfig(seed=seed).with_scenario(scenario, mutation))))
    return out, time.perf_counter() - start


@pytest.mark.criterion(4, "1000 fault-free 5-node traces: election safety, log matching, equal roots, no exclusions", 300)
def test_criterion_4_fault_free(fault_free, record_property):
    traces, generation = fault_free
    start = time.perf_counter()
    assert len(traces) == 1000
    for trace in traces:
        cfg = trace.config_json
        assert cfg["nodes"] == 5 and cfg["tick_limit"] == 10_000 and cfg["scenario"] == "none"
        report = check_safety(trace)
        assert report.leaders_per_term_ok, (cfg["seed"], report.detail)
        assert report.log_matching_ok, (cfg["seed"], report.detail)
        assert report.roots_agree, cfg["seed"]
        assert report.spurious_exclusions == (), cfg["seed"]
        assert trace.summary["committed_log"], cfg["seed"]
    _elapsed(record_property, start - generation, 300)


@pytest.mark.criterion(5, "every scenario mitigated, every mutation violated", 300)
def test_criterion_5_scenarios(scenario_runs, record_property):
    runs, generation = scenario_runs
    start = time.perf_counter()
    outcomes = {}
    for scenario, mutation, trace in runs:
        verdict = check(trace, scenario)
        assert verdict.mitigated != mutation, (scenario, mutation, trace.config_json["seed"], verdict.detail)
        outcomes.setdefault(scenario, set()).add(verdict.label)
    assert outcomes == {s: {"mitigated", "violated"} for s in SCENARIO_IDS}
    _elapsed(record_property, start - generation, 300)


@pytest.mark.criterion(6, "replay from genesis reproduces every node's root for all traces of 4 and 5", None)
def test_criterion_6_replay(fault_free, scenario_runs, record_property):
    start = time.perf_counter()
    traces = fault_free[0] + [t for _, _, t in scenario_runs[0]]
    assert len(traces) == 1000 + len(SCENARIO_IDS) * len(SCENARIO_SEEDS) * 2
    for trace in traces:
        rep = replay(trace)
        assert not rep.bad_entries and not rep.mismatched, (trace.config_json, rep.mismatched)
        for pid, node in trace.summary["nodes"].items():
            assert rep.roots[node["last_applied"]] == node["root"]
    _elapsed(record_property, start, None)


# -- 7: end-to-end audit ---------------------------------------------------------------------


@pytest.mark.criterion(7, "ingress, two transforms, revocation; bundle verifies offline and rejects every bit flip", None)
def test_criterion_7_audit(record_property):
    start = time.perf_counter()
    ledger = LocalLedger(seed=7)
    rng = SeededRng.from_int(7).fork("criterion-7")
    src = ledger.sources["sensor-a"]
    raw = ledger.ingest(b"reading=42;unit=C", "sensor-a", src)
    mid = ledger.transform([raw.data_id], ledger.programs["concat"].measurement, b";calibrated")
    out = ledger.transform([mid.data_id], ledger.programs["digest"].measurement)
    analyst, share = SigningKey.generate(rng), KeyShare.generate(rng)
    ledger.grant(out.data_id, analyst, share)
    key = unwrap_datum_key(share, ledger.engine.cluster_public, ledger.engine.open_grant(out.data_id, analyst.verify_key.fingerprint))
    assert key == ledger.engine.datum_key(out.data_id)
    ledger.revoke(out.data_id, analyst.verify_key.fingerprint)
    with pytest.raises(AccessRevoked):
        ledger.engine.open_grant(out.data_id, analyst.verify_key.fingerprint)

    final_root = ledger.root
    assert ledger.history.entries[-1].root == final_root
    rev_key = revocation_key(out.data_id, analyst.verify_key.fingerprint)
    encoded = ledger.bundle(out.data_id, extra_keys=[rev_key]).encode()

    # offline: only the bytes and the root
    bundle = LineageBundle.decode(encoded)
    assert verify_provenance(out.data_id, final_root, encoded)
    assert [r.data_id for r in bundle.records] == [raw.data_id, mid.data_id, out.data_id]
    assert any(p.key == rev_key and p.value is not None for p in bundle.proofs)

    for bit in range(len(encoded) * 8):
        verdict = verify_provenance(out.data_id, final_root, _flip(encoded, bit))
        assert not verdict, f"bit {bit} accepted"
    _elapsed(record_property, start, None)


# -- 8: layered channel ----------------------------------------------------------------------


@pytest.mark.criterion(8, "1000 sealed requests: runtime sees only the routing header; replays rejected", None)
def test_criterion_8_channel(record_property):
    from test_channel import _session

    start = time.perf_counter()
    rng = SeededRng.from_int(8).fork("criterion-8")
    requests = 0
    for s in range(10):
        platform, session = _session(seed=100 + s)
        sent = []
        for _ in range(100):
            payload = rng.read(rng.randint(8, 256))
            env = Envelope.decode(seal_request(session, payload).encode())
            routing, inner = open_at_runtime(platform.runtime.keyset, env)
            assert routing == RoutingHeader(session.app_id, session.session_id)
            assert runtime_attempt_inner(platform.runtime.keyset, routing, inner) is None
            assert payload not in inner.body
            assert open_at_app(platform.app.keyset, routing, inner) == payload
            with pytest.raises(ReplayError):
                open_at_runtime(platform.runtime.keyset, env)
            with pytest.raises(ReplayError):
                open_at_app(platform.app.keyset, routing, inner)
            sent.append(env)
            requests += 1
        for env in sent:
            with pytest.raises(ReplayError):
                open_at_runtime(platform.runtime.keyset, env)
    assert requests == 1000
    _elapsed(record_property, start, None)
