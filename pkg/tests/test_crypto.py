import hashlib
import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fixture_lines
from honestcomp.codec import DecodeError, Reader, Writer
from honestcomp.crypto import (
    AeadKey,
    AuthenticationError,
    Ciphertext,
    Digest,
    KeyShare,
    SeededRng,
    Signature,
    SigningKey,
    VerifyKey,
    aead_open,
    aead_seal,
    counter_nonce,
    hash_bytes,
    hash_parts,
    rng_stream,
    sign,
    verify,
)


def _flip(data: bytes, bit: int) -> bytes:
    out = bytearray(data)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


# -- codec ---------------------------------------------------------------------


def test_codec_round_trip():
    data = Writer().u8(7).u16(513).u32(70000).u64(2**40).blob(b"xy").text("hé").flag(True).getvalue()
    r = Reader(data)
    assert (r.u8(), r.u16(), r.u32(), r.u64(), r.blob(), r.text(), r.flag()) == (7, 513, 70000, 2**40, b"xy", "hé", True)
    r.done()


def test_codec_rejects_truncation_and_trailing():
    data = Writer().blob(b"abc").getvalue()
    with pytest.raises(DecodeError):
        Reader(data[:-1]).blob()
    r = Reader(data + b"\x00")
    r.blob()
    with pytest.raises(DecodeError):
        r.done()


def test_codec_flag_must_be_canonical():
    with pytest.raises(DecodeError):
        Reader(b"\x02").flag()


# -- hashing ---------------------------------------------------------------------


def test_hash_deterministic():
    assert hash_bytes(b"x") == hash_bytes(b"x")


@pytest.mark.parametrize("alg,msg,digest", fixture_lines("hash_vectors.txt"))
def test_hash_reference_vectors(alg, msg, digest):
    message = b"" if msg == "-" else bytes.fromhex(msg)
    assert hash_bytes(message, int(alg)).hex() == digest


def test_hash_no_collisions_in_random_corpus():
    rng = SeededRng.from_int(1)
    corpus = {rng.read(1 + rng.randbelow(40)) for _ in range(10_000)}
    digests = {hash_bytes(x).data for x in corpus}
    assert len(digests) == len(corpus)


def test_hash_parts_is_unambiguous():
    assert hash_parts(b"ab", b"c") != hash_parts(b"a", b"bc")


def test_digest_length_checked():
    with pytest.raises(ValueError):
        Digest(1, b"short")


# -- signatures ----------------------------------------------------------------------


def test_sign_verify_round_trip():
    sk = SigningKey.generate(SeededRng.from_int(2))
    assert verify(sk.verify_key, b"msg", sign(sk, b"msg"))


@pytest.mark.parametrize("bit", range(0, 24, 5))
def test_signature_binds_message(bit):
    sk = SigningKey.generate(SeededRng.from_int(3))
    sig = sign(sk, b"message!")
    assert not verify(sk.verify_key, _flip(b"message!", bit), sig)


def test_signature_binds_key():
    rng = SeededRng.from_int(4)
    a, b = SigningKey.generate(rng), SigningKey.generate(rng)
    assert not verify(b.verify_key, b"m", sign(a, b"m"))


def test_signature_and_key_encodings_round_trip():
    sk = SigningKey.generate(SeededRng.from_int(5))
    sig = sign(sk, b"m")
    w = Writer()
    sig.write(w)
    assert Signature.read(Reader(w.getvalue())) == sig
    assert VerifyKey.decode(sk.verify_key.encode()) == sk.verify_key


# -- AEAD ------------------------------------------------------------------------------


KEY = AeadKey.derive(b"test")


def test_aead_round_trip():
    ct = aead_seal(KEY, counter_nonce(1), b"aad", b"plain")
    assert aead_open(KEY, b"aad", ct) == b"plain"
    assert Ciphertext.decode(ct.encode()) == ct


def test_aead_binds_aad():
    ct = aead_seal(KEY, counter_nonce(1), b"aad", b"plain")
    with pytest.raises(AuthenticationError):
        aead_open(KEY, b"aad2", ct)


def test_aead_binds_key():
    ct = aead_seal(KEY, counter_nonce(1), b"aad", b"plain")
    with pytest.raises(AuthenticationError):
        aead_open(AeadKey.derive(b"other"), b"aad", ct)


def test_aead_any_bit_flip_rejected():
    enc = aead_seal(KEY, counter_nonce(9), b"a", b"payload").encode()
    for bit in range(len(enc) * 8):
        try:
            ct = Ciphertext.decode(_flip(enc, bit))
        except DecodeError:
            continue
        with pytest.raises(AuthenticationError):
            aead_open(KEY, b"a", ct)


def test_key_exchange_agrees():
    rng = SeededRng.from_int(6)
    a, b = KeyShare.generate(rng), KeyShare.generate(rng)
    assert a.exchange(b.public) == b.exchange(a.public)


# -- deterministic randomness ------------------------------------------------------------


def test_rng_zero_length():
    assert rng_stream(bytes(32), 0, 0) == b""


def test_rng_replicas_agree():
    seed = hash_bytes(b"seed").data
    assert rng_stream(seed, 3, 100) == rng_stream(seed, 3, 100)


def test_rng_golden_vector():
    (golden,) = fixture_lines("rng_zero_seed.txt")[0]
    assert rng_stream(bytes(32), 0, 32).hex() == golden
    # independent construction of the same stream
    oracle = hashlib.sha256(b"honestcomp.rng" + bytes(32) + (0).to_bytes(8, "big")).hexdigest()
    assert oracle == golden


@given(st.integers(0, 50), st.integers(0, 100), st.integers(0, 100))
def test_rng_stream_is_prefix_consistent(counter, a, b):
    seed = bytes(range(32))
    lo, hi = sorted((a, b))
    assert rng_stream(seed, counter, hi)[:lo] == rng_stream(seed, counter, lo)


def test_fork_is_pure():
    rng = SeededRng.from_int(7)
    before = rng.fork("x").read(16)
    rng.read(100)
    assert rng.fork("x").read(16) == before
    assert rng.fork("y").read(16) != before


@settings(max_examples=50)
@given(st.integers(1, 1000))
def test_randbelow_in_range(bound):
    rng = SeededRng.from_int(bound)
    assert all(0 <= rng.randbelow(bound) < bound for _ in range(20))


def test_randint_roughly_uniform():
    rng = SeededRng.from_int(8)
    counts = [0] * 5
    for _ in range(5000):
        counts[rng.randint(1, 5) - 1] += 1
    assert all(900 < c < 1100 for c in counts)


def test_distinct_seeds_give_distinct_streams():
    streams = {SeededRng.from_int(i).read(16) for i in range(200)}
    assert len(streams) == 200


def test_all_pairs_of_small_messages_sign_distinctly():
    sk = SigningKey.generate(SeededRng.from_int(9))
    sigs = {sign(sk, bytes(p)).encode() for p in itertools.product(range(4), repeat=3)}
    assert len(sigs) == 64
