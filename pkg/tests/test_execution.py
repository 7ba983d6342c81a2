import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from honestcomp.attestation import CodeManifest
from honestcomp.crypto import Digest, KeyShare, SeededRng, SigningKey, hash_bytes, sign
from honestcomp.execution import (
    IDENTITY_PROGRAM,
    Approve,
    BlockContext,
    Command,
    EpochSeed,
    Get,
    Grant,
    LocalLedger,
    Op,
    ProgramFault,
    Propose,
    Run,
    Transaction,
    approve_statement,
    assemble,
    make_tx,
    run_program,
)
from honestcomp.lineage import AccessRevoked
from honestcomp.state import code_key, data_key, prog_key

SEED = EpochSeed.derive(hash_bytes(b"root"), 1)


def _run(source, program_input=b"", inputs=(), budget=10_000):
    return run_program(assemble(source), program_input, lambda k: None, SEED, inputs, budget)


def _register(ledger, name, source):
    code = assemble(source)
    manifest = CodeManifest.create(name, "1.0", code, SigningKey.generate(SeededRng.from_int(0)))
    ledger.trie = ledger.trie.insert(code_key(manifest.measurement), manifest.encode()).insert(prog_key(manifest.code_digest), code)
    return manifest.measurement


def test_identity_program_returns_input():
    assert run_program(IDENTITY_PROGRAM, b"hello", lambda k: None, SEED).output == b"hello"


def test_arithmetic():
    assert _run("PUSHI 7 PUSHI 3 SUB PUSHI 5 MUL").output == (20).to_bytes(8, "big")
    assert _run("PUSHI 7 PUSHI 3 MOD").output == (1).to_bytes(8, "big")


@pytest.mark.parametrize(
    "source, fault",
    [
        ("PUSHI 1 PUSHI 0 DIV", "division-by-zero"),
        ("PUSHI 0 JZ 0", "budget-exceeded"),
        ("ADD", "stack-underflow"),
        ("PUSHI 1 HASH", "type-error"),
        ("LOAD 3", "no-such-input"),
        ("HALT", "empty-stack"),
    ],
)
def test_faults(source, fault):
    with pytest.raises(ProgramFault, match=fault):
        _run(source)


def test_assemble_rejects_unknown_mnemonic():
    with pytest.raises(ValueError):
        assemble("FLY")


def test_seed_op_reads_epoch_stream():
    assert _run("SEED 32").output == SEED.stream(0, 32)


def test_epoch_seed():
    root = hash_bytes(b"pre-block root")
    assert EpochSeed.derive(root, 4) == EpochSeed.derive(root, 4)
    assert EpochSeed.derive(root, 4).seed != EpochSeed.derive(root, 5).seed
    assert EpochSeed.derive(root, 4).seed != EpochSeed.derive(hash_bytes(b"other"), 4).seed


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(list(Op)), max_size=12), st.binary(max_size=8))
def test_vm_is_total_and_deterministic(ops, data):
    code = b"".join(
        bytes([op]) + (b"\x00" * 8 if op in (Op.PUSHI, Op.JMP, Op.JZ) else b"\x00" if op in (Op.LOAD, Op.SEED) else b"\x00\x00" if op is Op.PUSHB else b"")
        for op in ops
    )

    def once():
        try:
            return run_program(code, data, lambda k: None, SEED, (data,), 200)
        except ProgramFault as f:
            return str(f)

    assert once() == once()


def test_get_absent_leaves_root():
    ledger = LocalLedger(seed=1)
    before = ledger.root
    result = ledger.run(Get(b"app/missing")).result
    assert result.ok and result.code == "absent" and ledger.root == before


def test_duplicate_tx_rejected():
    ledger = LocalLedger(seed=1)
    tx = make_tx(ledger.client, Propose(b"a", (ledger.client.verify_key,), 1), 1)
    assert ledger.submit(tx).result.ok
    before = ledger.root
    assert ledger.submit(tx).result.code == "duplicate" and ledger.root == before


def test_tx_roundtrip_and_signature():
    ledger = LocalLedger(seed=1)
    tx = make_tx(ledger.client, Get(b"app/x"), 9)
    assert Transaction.decode(tx.encode()) == tx and tx.signature_valid()
    forged = Transaction.decode(tx.encode()[:-1] + bytes([tx.encode()[-1] ^ 1]))
    assert ledger.submit(forged).result.code == "bad-signature"


def test_division_by_zero_is_deterministic_failure():
    outcomes = []
    for _ in range(2):
        ledger = LocalLedger(seed=3)
        rec = ledger.ingest(b"x", "sensor-a", ledger.sources["sensor-a"])
        div = _register(ledger, "div", "PUSHI 1 PUSHI 0 DIV")
        before = ledger.root
        result = ledger.run(Run(div, (rec.data_id,))).result
        assert ledger.root == before
        outcomes.append(result)
    assert outcomes[0] == outcomes[1]
    assert outcomes[0].code == "program-fault:division-by-zero" and not outcomes[0].ok


def test_program_writes_app_state():
    ledger = LocalLedger(seed=3)
    rec = ledger.ingest(b"v", "sensor-a", ledger.sources["sensor-a"])
    m = _register(ledger, "store", "PUSHB 6b LOAD 0 PUT PUSHB 6b GET")
    assert ledger.run(Run(m, (rec.data_id,))).result.ok
    assert ledger.run(Get(b"app/k")).result.output == b"v"


def test_unregistered_code_and_bad_inputs():
    ledger = LocalLedger(seed=3)
    rec = ledger.ingest(b"v", "sensor-a", ledger.sources["sensor-a"])
    assert ledger.run(Run(hash_bytes(b"nope"), (rec.data_id,))).result.code == "unregistered-code"
    ident = ledger.programs["identity"].measurement
    assert ledger.run(Run(ident, ())).result.code == "bad-inputs"
    assert ledger.run(Run(ident, (rec.data_id, rec.data_id))).result.code == "bad-inputs"


def test_access_control_follows_grants():
    ledger = LocalLedger(seed=4)
    rec = ledger.ingest(b"v", "sensor-a", ledger.sources["sensor-a"])
    ident = ledger.programs["identity"].measurement
    rng = SeededRng.from_int(4)
    other, share = SigningKey.generate(rng), KeyShare.generate(rng)
    assert ledger.run(Run(ident, (rec.data_id,)), other).result.code == "access-denied"
    ledger.grant(rec.data_id, other, share)
    assert ledger.run(Run(ident, (rec.data_id,)), other).result.ok
    ledger.revoke(rec.data_id, other.verify_key.fingerprint)
    assert ledger.run(Run(ident, (rec.data_id,), b"again"), other).result.code == "access-denied"


def test_datum_encrypted_at_rest():
    ledger = LocalLedger(seed=4)
    rec = ledger.ingest(b"plain-secret-value", "sensor-a", ledger.sources["sensor-a"])
    assert b"plain-secret-value" not in ledger.trie.get(data_key(rec.data_id))
    assert ledger.read(rec.data_id) == b"plain-secret-value"


def test_m_of_n_approval():
    ledger = LocalLedger(seed=8)
    rng = SeededRng.from_int(8)
    approvers = [SigningKey.generate(rng) for _ in range(3)]
    outsider = SigningKey.generate(rng)
    prop = ledger.run(Propose(b"rotate-keys", tuple(a.verify_key for a in approvers), 2)).result
    assert prop.code == "pending"
    action = Digest(hash_bytes(b"").algorithm_id, prop.output)

    def approve(key):
        return ledger.run(Approve(action, key.verify_key, sign(key, approve_statement(action)))).result.code

    assert approve(outsider) == "non-approver"
    assert approve(approvers[0]) == "pending"
    assert approve(approvers[0]) == "no-op"
    assert approve(approvers[1]) == "executed"
    assert approve(approvers[2]) == "no-op"


def test_bad_proposal():
    ledger = LocalLedger(seed=8)
    vk = ledger.client.verify_key
    assert ledger.run(Propose(b"a", (vk,), 2)).result.code == "bad-proposal"
    assert ledger.run(Propose(b"a", (vk, vk), 1)).result.code == "bad-proposal"


def test_replicas_agree_on_roots():
    a, b = LocalLedger(seed=11), LocalLedger(seed=11)
    for ledger in (a, b):
        rec = ledger.ingest(b"x", "sensor-b", ledger.sources["sensor-b"])
        ledger.transform([rec.data_id], ledger.programs["digest"].measurement)
    assert a.root == b.root
    assert a.history.entries[-1].root == a.root


def test_speculative_apply_keeps_registry():
    ledger = LocalLedger(seed=12)
    rec = ledger.ingest(b"x", "sensor-a", ledger.sources["sensor-a"])
    rng = SeededRng.from_int(1)
    grantee, share = SigningKey.generate(rng), KeyShare.generate(rng)
    tx = make_tx(ledger.client, Grant(rec.data_id, grantee.verify_key, share.public), 99)
    out = ledger.engine.apply(ledger.trie, Command.for_tx(tx), BlockContext(5, 1, 6, ledger.platform_id), ledger.aik, commit_effects=False)
    assert out.result.ok
    with pytest.raises(AccessRevoked):
        ledger.engine.open_grant(rec.data_id, grantee.verify_key.fingerprint)
