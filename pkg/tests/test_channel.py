import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from honestcomp.attestation import CodeManifest, EnclaveIdentity, HandshakeFailed, Vendor, VendorRoot, trust_store
from honestcomp.channel import (
    _Endpoint,
    ChannelClient,
    Envelope,
    InterceptingProxy,
    Platform,
    ReplayError,
    handshake,
    open_at_app,
    open_at_runtime,
    open_response,
    runtime_attempt_inner,
    seal_request,
    seal_response,
)
from conftest import fixture_lines
from honestcomp.crypto import AeadKey, AuthenticationError, SeededRng, SigningKey

RNG = SeededRng.from_int(21)
ROOTS = {v: VendorRoot.generate(v, RNG.fork(v.name)) for v in Vendor}
TRUSTED = trust_store(ROOTS.values())
AUTHOR = SigningKey.generate(RNG.fork("author"))
RUNTIME = CodeManifest.create("runtime", "1", b"runtime-code", AUTHOR)
APP = CodeManifest.create("honestcomp", "1", b"app-code", AUTHOR)
TAMPERED = CodeManifest.create("honestcomp", "1", b"app-code-with-backdoor", AUTHOR)


def _platform(seed=0, app=APP, layered=True):
    rng = SeededRng.from_int(seed)
    runtime = EnclaveIdentity.create("n1", ROOTS[Vendor.A], RUNTIME, rng.fork("rt"))
    app_id = EnclaveIdentity.create("n1", ROOTS[Vendor.A], app, rng.fork("app"))
    return Platform(runtime, app_id, rng.fork("platform"), layered)


def _client(seed=0, **checks):
    return ChannelClient(TRUSTED, RUNTIME.measurement, APP.measurement, SeededRng.from_int(seed).fork("client"), **checks)


def _session(seed=0, layered=True):
    platform = _platform(seed, layered=layered)
    return platform, handshake(_client(seed, layered=layered), platform)


def test_round_trip():
    platform, session = _session()
    env = seal_request(session, b"put x")
    routing, inner = open_at_runtime(platform.runtime.keyset, Envelope.decode(env.encode()))
    assert routing.app_id == "honestcomp" and routing.session_id == session.session_id
    assert open_at_app(platform.app.keyset, routing, inner) == b"put x"
    resp = seal_response(platform.app.keyset, session.session_id, b"ok")
    assert open_response(session, resp) == b"ok"


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=200))
def test_runtime_sees_header_not_payload(payload):
    platform, session = _session()
    routing, inner = open_at_runtime(platform.runtime.keyset, seal_request(session, payload))
    assert routing.session_id == session.session_id
    assert runtime_attempt_inner(platform.runtime.keyset, routing, inner) is None
    assert open_at_app(platform.app.keyset, routing, inner) == payload


def test_single_layer_leaks_payload_to_runtime():
    platform, session = _session(layered=False)
    routing, inner = open_at_runtime(platform.runtime.keyset, seal_request(session, b"secret"))
    assert runtime_attempt_inner(platform.runtime.keyset, routing, inner) == b"secret"


def test_request_replay_rejected():
    platform, session = _session()
    env = seal_request(session, b"once")
    open_at_runtime(platform.runtime.keyset, env)
    with pytest.raises(ReplayError):
        open_at_runtime(platform.runtime.keyset, env)


def test_inner_replay_rejected():
    platform, session = _session()
    routing, inner = open_at_runtime(platform.runtime.keyset, seal_request(session, b"once"))
    open_at_app(platform.app.keyset, routing, inner)
    with pytest.raises(ReplayError):
        open_at_app(platform.app.keyset, routing, inner)


def test_response_replay_rejected():
    platform, session = _session()
    resp = seal_response(platform.app.keyset, session.session_id, b"r")
    open_response(session, resp)
    with pytest.raises(ReplayError):
        open_response(session, resp)


def test_tampered_envelope_rejected():
    platform, session = _session()
    raw = bytearray(seal_request(session, b"x").encode())
    raw[-1] ^= 1
    with pytest.raises(AuthenticationError):
        open_at_runtime(platform.runtime.keyset, bytes(raw))


def test_tampered_app_rejected():
    client = _client()
    with pytest.raises(HandshakeFailed) as exc:
        handshake(client, _platform(app=TAMPERED))
    assert exc.value.reason == "inner-attestation" and exc.value.detail == "wrong-measurement"


def test_tampered_app_accepted_without_inner_check():
    session = handshake(_client(check_inner_measurement=False), _platform(app=TAMPERED))
    assert session.quotes[1].measurement == TAMPERED.measurement


def test_proxy_rejected():
    platform = _platform()
    proxy = InterceptingProxy(platform, SeededRng.from_int(5))
    client = _client()
    with pytest.raises(HandshakeFailed) as exc:
        client.finish(proxy.relay(client.hello()))
    assert exc.value.reason == "outer-attestation"


def test_proxy_reads_outer_without_binding_check():
    platform = _platform()
    proxy = InterceptingProxy(platform, SeededRng.from_int(5))
    client = _client(check_outer_binding=False)
    session = client.finish(proxy.relay(client.hello()))
    env = seal_request(session, b"payload-bytes")
    outer = proxy.read_outer(env)
    assert outer is not None and b"payload-bytes" not in outer
    # the re-sealed envelope still routes to the client's session id
    with pytest.raises(AuthenticationError):
        open_at_runtime(platform.runtime.keyset, proxy.forward(env))


def test_finish_before_hello():
    platform = _platform()
    other = _client(1)
    server = platform.accept(other.hello())
    with pytest.raises(HandshakeFailed) as exc:
        _client(2).finish(server)
    assert exc.value.reason == "protocol-order"


def test_quote_from_other_handshake_rejected():
    platform = _platform()
    client = _client(3)
    client.hello()
    stolen = platform.accept(_client(4).hello())
    with pytest.raises(HandshakeFailed):
        client.finish(stolen)


GOLDEN = fixture_lines("golden_envelopes.txt")


def test_golden_envelopes_open():
    outer_keys, inner_keys = {}, {}
    for outer, inner, payload, raw in GOLDEN:
        env = Envelope.decode(bytes.fromhex(raw))
        assert env.encode().hex() == raw
        outer_keys.setdefault(env.session_id, _Endpoint(AeadKey(bytes.fromhex(outer))))
        inner_keys.setdefault(env.session_id, _Endpoint(AeadKey(bytes.fromhex(inner))))
        routing, ct = open_at_runtime(outer_keys, env)
        assert open_at_app(inner_keys, routing, ct).hex() == ("" if payload == "-" else payload)


def test_golden_envelopes_regenerate():
    _, session = _session(seed=0)
    for _, _, payload, raw in GOLDEN:
        assert seal_request(session, bytes.fromhex("" if payload == "-" else payload)).encode().hex() == raw
