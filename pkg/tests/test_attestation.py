from dataclasses import replace

import pytest

from honestcomp.attestation import (
    AttestationQuote,
    CodeManifest,
    CrossVendorRejected,
    EnclaveIdentity,
    HandshakeFailed,
    IffParty,
    ManifestError,
    ManifestRegistry,
    QuoteRejected,
    UnendorsedIdentityError,
    Vendor,
    VendorRoot,
    cross_vendor_validate,
    generate_quote,
    mutual_attest,
    register_manifest,
    trust_store,
    verify_quote,
)
from honestcomp.crypto import SeededRng, Signature, SigningKey, hash_bytes

RNG = SeededRng.from_int(11)
ROOTS = {v: VendorRoot.generate(v, RNG.fork(v.name)) for v in Vendor}
TRUSTED = trust_store(ROOTS.values())
AUTHOR = SigningKey.generate(RNG.fork("author"))
MANIFEST = CodeManifest.create("node", "1", b"node-code", AUTHOR)
OTHER = CodeManifest.create("node", "2", b"other-code", AUTHOR)
NONCE = bytes(range(16))


def _ident(pid="p1", vendor=Vendor.A, manifest=MANIFEST):
    return EnclaveIdentity.create(pid, ROOTS[vendor], manifest, RNG.fork(pid + vendor.name + manifest.version))


def _flip(data: bytes, bit: int) -> bytes:
    out = bytearray(data)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


def test_quote_round_trip_accepts():
    ident = _ident()
    q = generate_quote(ident, b"report", NONCE)
    verify_quote(q, ident.measurement, {ident.vendor: TRUSTED[ident.vendor]}, NONCE)
    assert AttestationQuote.decode(q.encode()) == q


def test_quote_freshness_binding():
    ident = _ident()
    q = generate_quote(ident, b"report", NONCE)
    with pytest.raises(QuoteRejected) as exc:
        verify_quote(q, ident.measurement, TRUSTED, bytes(16))
    assert exc.value.reason == "stale-nonce"


def test_quote_measurement_binding():
    ident = _ident()
    q = generate_quote(ident, b"report", NONCE)
    with pytest.raises(QuoteRejected) as exc:
        verify_quote(q, OTHER.measurement, TRUSTED, NONCE)
    assert exc.value.reason == "wrong-measurement"


def test_untrusted_vendor():
    ident = _ident(vendor=Vendor.C)
    q = generate_quote(ident, b"r", NONCE)
    with pytest.raises(QuoteRejected) as exc:
        verify_quote(q, ident.measurement, {Vendor.A: TRUSTED[Vendor.A]}, NONCE)
    assert exc.value.reason == "untrusted-vendor"


def test_signature_bit_flip():
    ident = _ident()
    q = generate_quote(ident, b"r", NONCE)
    bad = replace(q, signature=Signature(q.signature.algorithm_id, _flip(q.signature.data, 5)))
    with pytest.raises(QuoteRejected) as exc:
        verify_quote(bad, ident.measurement, TRUSTED, NONCE)
    assert exc.value.reason == "bad-signature"


def test_every_quote_bit_flip_rejected():
    ident = _ident()
    enc = generate_quote(ident, b"r", NONCE).encode()
    for bit in range(len(enc) * 8):
        try:
            q = AttestationQuote.decode(_flip(enc, bit))
        except ValueError:
            continue
        with pytest.raises(QuoteRejected):
            verify_quote(q, ident.measurement, TRUSTED, NONCE)


def test_unendorsed_identity_cannot_quote():
    ident = EnclaveIdentity.create("p9", ROOTS[Vendor.A], MANIFEST, RNG.fork("p9"), endorse=False)
    with pytest.raises(UnendorsedIdentityError):
        generate_quote(ident, b"r", NONCE)


def test_mutual_attest_symmetric_keys():
    a, b = _ident("a"), _ident("b", Vendor.B)
    ta, tb = mutual_attest(a, b, MANIFEST.measurement, TRUSTED, RNG.fork("iff"))
    assert ta.channel_key == tb.channel_key
    assert ta.transcript == tb.transcript
    assert (ta.peer_id, tb.peer_id) == ("b", "a")


def test_mutual_attest_modified_manifest():
    a, b = _ident("a"), _ident("b", manifest=OTHER)
    with pytest.raises(HandshakeFailed) as exc:
        mutual_attest(a, b, MANIFEST.measurement, TRUSTED, RNG.fork("iff"))
    assert exc.value.reason == "wrong-measurement"


def test_replayed_evidence_is_stale():
    a, b = _ident("a"), _ident("b")
    pa, pb = IffParty(a, RNG.fork("1")), IffParty(b, RNG.fork("2"))
    pb.evidence(pa.hello())
    old = pa.evidence(pb.hello())
    victim = IffParty(b, RNG.fork("3"))
    victim.evidence(IffParty(a, RNG.fork("4")).hello())
    with pytest.raises(HandshakeFailed) as exc:
        victim.accept(old, MANIFEST.measurement, TRUSTED)
    assert exc.value.reason == "stale-nonce"


def test_cross_vendor():
    ids = [_ident("a"), _ident("b", Vendor.B), _ident("c", Vendor.C)]
    report = b"self-test"
    quotes = [generate_quote(i, report, NONCE) for i in ids]
    cross_vendor_validate(quotes[:2], MANIFEST.measurement, TRUSTED, NONCE)
    cross_vendor_validate(quotes, MANIFEST.measurement, TRUSTED, NONCE)
    same = [generate_quote(_ident("x"), report, NONCE), generate_quote(_ident("y"), report, NONCE)]
    with pytest.raises(CrossVendorRejected) as exc:
        cross_vendor_validate(same, MANIFEST.measurement, TRUSTED, NONCE)
    assert exc.value.reason == "single-vendor"
    lying = generate_quote(ids[1], b"self-tesT", NONCE)
    with pytest.raises(CrossVendorRejected) as exc:
        cross_vendor_validate([quotes[0], lying], MANIFEST.measurement, TRUSTED, NONCE)
    assert exc.value.reason == "mismatched-report"


def test_compute_report_tracks_loaded_code():
    honest = _ident("a")
    lying = replace(_ident("b", Vendor.B), code_digest=hash_bytes(b"implant"))
    assert honest.compute_report(b"c") != lying.compute_report(b"c")
    assert honest.compute_report(b"c") == _ident("z", Vendor.C).compute_report(b"c")


def test_manifest_registry():
    reg = ManifestRegistry()
    m = register_manifest(MANIFEST, reg)
    assert m == hash_bytes(MANIFEST.encode())
    assert CodeManifest.decode(MANIFEST.encode()) == MANIFEST
    with pytest.raises(ManifestError) as exc:
        register_manifest(MANIFEST, reg)
    assert exc.value.reason == "duplicate-manifest"
    forged = replace(OTHER, author_signature=MANIFEST.author_signature)
    with pytest.raises(ManifestError) as exc:
        register_manifest(forged, reg)
    assert exc.value.reason == "bad-author-signature"
