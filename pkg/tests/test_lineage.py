import pytest

from honestcomp.crypto import AuthenticationError, Digest, KeyShare, SeededRng, Signature, SigningKey, hash_bytes, sign
from honestcomp.execution import BlockContext, Command, Engine, Grant, LocalLedger, Put, Revoke, make_tx
from honestcomp.lineage import (
    DERIVED,
    AccessGrant,
    INGRESS,
    AccessRevoked,
    LineageBundle,
    LineageError,
    ProvenanceRecord,
    build_bundle,
    compute_data_id,
    ingress_statement,
    record_ingress,
    record_transformation,
    revoke_access,
    trace_lineage,
    unwrap_datum_key,
    verify_provenance,
)
from honestcomp.state import code_key, prov_key, revocation_key


@pytest.fixture
def ledger():
    return LocalLedger(seed=5)


def _ingest(ledger, payload=b"temp=21", label="sensor-a"):
    return record_ingress(ledger, payload, label, ledger.sources[label])


def test_ingress_record(ledger):
    rec = _ingest(ledger)
    assert rec.origin == INGRESS and rec.input_ids == ()
    assert ProvenanceRecord.decode(rec.encode()) == rec
    assert ledger.read(rec.data_id) == b"temp=21"


def test_forged_client_signature(ledger):
    forger = SigningKey.generate(SeededRng.from_int(1))
    bad = sign(forger, ingress_statement(hash_bytes(b"x"), "sensor-a"))
    with pytest.raises(LineageError) as exc:
        record_ingress(ledger, b"x", "sensor-a", ledger.sources["sensor-a"], bad)
    assert exc.value.code == "bad-client-signature"


def test_data_id_binds_source_and_time(ledger):
    a = _ingest(ledger, b"same", "sensor-a")
    b = _ingest(ledger, b"same", "sensor-b")
    assert a.data_id != b.data_id
    for rec in (a, b):
        assert compute_data_id(hash_bytes(b"same"), rec.source_label, rec.logical_time) == rec.data_id


def test_chain(ledger):
    a = _ingest(ledger)
    ident = ledger.programs["identity"].measurement
    b = record_transformation(ledger, [a.data_id], ident, b"b")
    c = record_transformation(ledger, [b.data_id], ident, b"c")
    g = trace_lineage(ledger.trie, c.data_id)
    assert [n.data_id for n in g.nodes] == [a.data_id, b.data_id, c.data_id]
    assert set(g.edges) == {(a.data_id, b.data_id), (b.data_id, c.data_id)}
    assert [n.logical_time for n in g.nodes] == sorted(n.logical_time for n in g.nodes)
    assert c.origin == DERIVED


def test_diamond(ledger):
    a = _ingest(ledger)
    concat = ledger.programs["concat"].measurement
    b = record_transformation(ledger, [a.data_id], concat, b"|b")
    c = record_transformation(ledger, [a.data_id], concat, b"|c")
    d = record_transformation(ledger, [b.data_id, c.data_id], concat, b"|d")
    g = trace_lineage(ledger.trie, d.data_id)
    assert len(g.nodes) == 4 and len(g.edges) == 4
    assert ledger.read(d.data_id) == b"temp=21|b|d"


def test_unknown_input(ledger):
    with pytest.raises(LineageError) as exc:
        record_transformation(ledger, [hash_bytes(b"nothing")], ledger.programs["identity"].measurement)
    assert exc.value.code == "unknown-input"


def test_trace_ingress_only(ledger):
    a = _ingest(ledger)
    g = trace_lineage(ledger.trie, a.data_id)
    assert g.nodes == (a,) and g.edges == ()


def test_trace_json_is_deterministic(ledger):
    a = _ingest(ledger)
    b = record_transformation(ledger, [a.data_id], ledger.programs["digest"].measurement)
    first = trace_lineage(ledger.trie, b.data_id).to_json()
    assert first == trace_lineage(ledger.trie, b.data_id).to_json()
    assert first.startswith('{"edges":')


def _chain(ledger):
    a = _ingest(ledger)
    b = record_transformation(ledger, [a.data_id], ledger.programs["concat"].measurement, b"|x")
    return a, b


def test_untampered_bundle_accepts(ledger):
    _, b = _chain(ledger)
    bundle = ledger.bundle(b.data_id)
    assert verify_provenance(b.data_id, ledger.root, LineageBundle.decode(bundle.encode()))


def test_bundle_against_other_root(ledger):
    _, b = _chain(ledger)
    bundle = ledger.bundle(b.data_id)
    verdict = verify_provenance(b.data_id, hash_bytes(b"x"), bundle)
    assert not verdict and verdict.reason == "bad-proof"


def test_forged_signature_in_snapshot(ledger):
    a, b = _chain(ledger)
    sig = a.signature
    flipped = Signature(sig.algorithm_id, bytes([sig.data[0] ^ 1]) + sig.data[1:])
    forged_rec = a.with_signature(flipped)
    forged = ledger.trie.insert(prov_key(a.data_id), forged_rec.encode())
    verdict = verify_provenance(b.data_id, forged.root_hash(), build_bundle(forged, b.data_id))
    assert verdict.reason == "bad-signature" and verdict.record == forged_rec.record_id.hex()


def test_unregistered_code_in_snapshot(ledger):
    _, b = _chain(ledger)
    forged = ledger.trie.delete(code_key(b.code_measurement))
    verdict = verify_provenance(b.data_id, forged.root_hash(), build_bundle(forged, b.data_id))
    assert verdict.reason == "unregistered-code"


def test_grant_revoke_on_replicas():
    rng = SeededRng.from_int(9)
    ledger = LocalLedger(seed=9)
    secret = rng.read(32)
    replicas = [Engine(secret, ledger.app_manifest.measurement) for _ in range(3)]
    tries = [ledger.trie] * 3
    owner = ledger.client
    grantee, share = SigningKey.generate(rng), KeyShare.generate(rng)
    src = ledger.sources["sensor-a"]
    put = Put("sensor-a", b"secret-reading", src.verify_key, sign(src, ingress_statement(hash_bytes(b"secret-reading"), "sensor-a")))
    txs = [make_tx(owner, put, 1)]

    def apply_all(tx, index):
        out = []
        for i, eng in enumerate(replicas):
            o = eng.apply(tries[i], Command.for_tx(tx), BlockContext(index - 1, 1, index, ledger.platform_id), signer=ledger.aik)
            tries[i] = o.trie
            out.append(o.result)
        return out

    res = apply_all(txs[0], 1)[0]
    data_id = Digest(hash_bytes(b"").algorithm_id, res.output)
    grant_results = apply_all(make_tx(owner, Grant(data_id, grantee.verify_key, share.public), 2), 2)
    assert all(r.ok for r in grant_results)
    for eng, trie in zip(replicas, tries):
        key = unwrap_datum_key(share, eng.cluster_public, eng.open_grant(data_id, grantee.verify_key.fingerprint))
        assert key == eng.datum_key(data_id)
    revoke = make_tx(owner, Revoke(data_id, grantee.verify_key.fingerprint), 3)
    assert all(r.ok for r in apply_all(revoke, 3))
    assert len({t.root_hash() for t in tries}) == 1
    for eng in replicas:
        with pytest.raises(AccessRevoked):
            eng.open_grant(data_id, grantee.verify_key.fingerprint)
    tombstone = AccessGrant(data_id, grantee.verify_key.fingerprint, None, True, 2)
    with pytest.raises(AccessRevoked):
        unwrap_datum_key(share, replicas[0].cluster_public, tombstone)
    again = apply_all(make_tx(owner, Revoke(data_id, grantee.verify_key.fingerprint), 4), 4)
    assert {r.code for r in again} == {"already-revoked"}


def test_revocation_record_provable(ledger):
    a = _ingest(ledger)
    grantee, share = SigningKey.generate(SeededRng.from_int(2)), KeyShare.generate(SeededRng.from_int(3))
    ledger.grant(a.data_id, grantee, share)
    revoke_access(ledger, a.data_id, grantee.verify_key.fingerprint)
    key = revocation_key(a.data_id, grantee.verify_key.fingerprint)
    bundle = ledger.bundle(a.data_id, extra_keys=[key])
    assert verify_provenance(a.data_id, ledger.root, bundle)
    assert any(p.key == key and p.value is not None for p in bundle.proofs)
    with pytest.raises(LineageError) as exc:
        revoke_access(ledger, a.data_id, grantee.verify_key.fingerprint)
    assert exc.value.code == "already-revoked"


def test_decrypt_with_wrong_key_fails(ledger):
    a = _ingest(ledger)
    other = LocalLedger(seed=6)
    with pytest.raises(AuthenticationError):
        other.engine.read_datum(ledger.trie, a.data_id)
