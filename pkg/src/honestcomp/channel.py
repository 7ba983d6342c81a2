"""Layered client channel: an outer layer to the platform runtime manager and
an inner layer that terminates only inside the application enclave.

Each layer gets its own key agreement whose server share is bound into that
enclave's quote, so a proxy that swaps shares cannot present a matching quote
and the runtime manager never learns the inner key.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attestation import (
    NONCE_SIZE,
    AttestationQuote,
    EnclaveIdentity,
    HandshakeFailed,
    QuoteRejected,
    TrustStore,
    generate_quote,
    report_data,
    verify_quote,
)
from .codec import DecodeError, Reader, Writer
from .crypto import (
    AeadKey,
    AuthenticationError,
    Ciphertext,
    Digest,
    KeyShare,
    SeededRng,
    aead_open,
    aead_seal,
    counter_nonce,
    hash_parts,
)

ENVELOPE_VERSION = 1
SESSION_ID_SIZE = 16
_TO_SERVER = b"\x00\x00\x00\x00"
_TO_CLIENT = b"\x00\x00\x00\x01"


class ReplayError(AuthenticationError):
    """Envelope counter not above the last accepted one."""


def _binding(layer: bytes, server_share: bytes, client_share: bytes) -> bytes:
    return report_data(hash_parts(b"channel", layer, server_share, client_share).data)


@dataclass(frozen=True)
class ClientHello:
    outer_share: bytes
    inner_share: bytes
    outer_nonce: bytes
    inner_nonce: bytes


@dataclass(frozen=True)
class ServerHello:
    outer_share: bytes
    outer_quote: AttestationQuote
    inner_share: bytes
    inner_quote: AttestationQuote


@dataclass(frozen=True)
class RoutingHeader:
    app_id: str
    session_id: bytes

    def encode(self) -> bytes:
        return Writer().text(self.app_id).fixed(self.session_id, SESSION_ID_SIZE).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "RoutingHeader":
        return cls(r.text(64), r.fixed(SESSION_ID_SIZE))


@dataclass(frozen=True)
class Envelope:
    """Wire form: version, session id, outer nonce, length-prefixed body, tag."""

    session_id: bytes
    outer: Ciphertext

    def encode(self) -> bytes:
        w = Writer().u8(ENVELOPE_VERSION).fixed(self.session_id, SESSION_ID_SIZE)
        w.fixed(self.outer.nonce, 12).blob(self.outer.body).fixed(self.outer.tag, 16)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Envelope":
        r = Reader(data)
        if r.u8() != ENVELOPE_VERSION:
            raise DecodeError("unsupported envelope version")
        sid, nonce, body, tag = r.fixed(SESSION_ID_SIZE), r.fixed(12), r.blob(), r.fixed(16)
        r.done()
        return cls(sid, Ciphertext(nonce, body, tag))


def _session_id(hello: ClientHello, server: ServerHello) -> bytes:
    return hash_parts(
        b"session", hello.outer_share, hello.inner_share, server.outer_share, server.inner_share
    ).data[:SESSION_ID_SIZE]


def _counter_of(ct: Ciphertext) -> int:
    return int.from_bytes(ct.nonce[4:], "big")


def _outer_aad(session_id: bytes) -> bytes:
    return bytes([ENVELOPE_VERSION]) + session_id


def _inner_aad(session_id: bytes) -> bytes:
    return b"inner" + session_id


@dataclass
class _Endpoint:
    key: AeadKey = field(repr=False)
    last_in: int = -1
    next_out: int = 0


class ServerEnclave:
    """Server half of one layer: the runtime manager (outer) or the application (inner).

    ``keyset`` is everything this role holds; tests hand it to the other
    layer's open function to show it is useless there.
    """

    def __init__(self, identity: EnclaveIdentity, layer: bytes, rng: SeededRng) -> None:
        self.identity = identity
        self.layer = layer
        self._rng = rng
        self.keyset: dict[bytes, _Endpoint] = {}

    def respond(self, client_share: bytes, nonce: bytes) -> tuple[bytes, AttestationQuote, KeyShare]:
        share = KeyShare.generate(self._rng)
        quote = generate_quote(self.identity, _binding(self.layer, share.public, client_share), nonce)
        return share.public, quote, share

    def install(self, session_id: bytes, share: KeyShare, client_share: bytes) -> None:
        shared = share.exchange(client_share)
        self.keyset[session_id] = _Endpoint(AeadKey.derive(self.layer, shared, session_id))


class Platform:
    """A node's runtime manager plus the application enclave behind it."""

    def __init__(self, runtime: EnclaveIdentity, app: EnclaveIdentity, rng: SeededRng, layered: bool = True) -> None:
        self.runtime = ServerEnclave(runtime, b"outer", rng.fork("runtime"))
        self.app = ServerEnclave(app, b"inner", rng.fork("app"))
        self.app_id = "honestcomp"
        self.layered = layered

    def accept(self, hello: ClientHello) -> ServerHello:
        o_pub, o_quote, o_share = self.runtime.respond(hello.outer_share, hello.outer_nonce)
        i_pub, i_quote, i_share = self.app.respond(hello.inner_share, hello.inner_nonce)
        server = ServerHello(o_pub, o_quote, i_pub, i_quote)
        sid = _session_id(hello, server)
        self.runtime.install(sid, o_share, hello.outer_share)
        if self.layered:
            self.app.install(sid, i_share, hello.inner_share)
        else:
            # single-layer deployment: the app reuses the runtime's key
            self.app.keyset[sid] = _Endpoint(self.runtime.keyset[sid].key)
        return server


@dataclass
class LayeredSession:
    session_id: bytes
    app_id: str
    outer_key: AeadKey = field(repr=False)
    inner_key: AeadKey = field(repr=False)
    quotes: tuple[AttestationQuote, AttestationQuote]
    outer_counter: int = 0
    inner_counter: int = 0
    last_response: int = -1


class ChannelClient:
    """Client half.  The ``check_*`` switches exist so tests can show each
    check is what stops the corresponding attack."""

    def __init__(
        self,
        trusted: TrustStore,
        runtime_measurement: Digest,
        app_measurement: Digest,
        rng: SeededRng,
        check_outer_binding: bool = True,
        check_inner_measurement: bool = True,
        layered: bool = True,
    ) -> None:
        self.trusted = trusted
        self.runtime_measurement = runtime_measurement
        self.app_measurement = app_measurement
        self._rng = rng
        self.check_outer_binding = check_outer_binding
        self.check_inner_measurement = check_inner_measurement
        self.layered = layered
        self._outer = self._inner = None
        self._hello: ClientHello | None = None

    def hello(self) -> ClientHello:
        self._outer, self._inner = KeyShare.generate(self._rng), KeyShare.generate(self._rng)
        self._hello = ClientHello(
            self._outer.public, self._inner.public, self._rng.read(NONCE_SIZE), self._rng.read(NONCE_SIZE)
        )
        return self._hello

    def finish(self, server: ServerHello, app_id: str = "honestcomp") -> LayeredSession:
        hello = self._hello
        if hello is None:
            raise HandshakeFailed("protocol-order", "hello not sent")
        try:
            verify_quote(server.outer_quote, self.runtime_measurement, self.trusted, hello.outer_nonce)
        except QuoteRejected as exc:
            raise HandshakeFailed("outer-attestation", exc.reason) from exc
        if self.check_outer_binding and server.outer_quote.report_data != _binding(
            b"outer", server.outer_share, hello.outer_share
        ):
            raise HandshakeFailed("outer-attestation", "quote does not bind the key share")
        inner_expected = self.app_measurement if self.check_inner_measurement else server.inner_quote.measurement
        try:
            verify_quote(server.inner_quote, inner_expected, self.trusted, hello.inner_nonce)
        except QuoteRejected as exc:
            raise HandshakeFailed("inner-attestation", exc.reason) from exc
        if server.inner_quote.report_data != _binding(b"inner", server.inner_share, hello.inner_share):
            raise HandshakeFailed("inner-attestation", "quote does not bind the key share")
        sid = _session_id(hello, server)
        outer = AeadKey.derive(b"outer", self._outer.exchange(server.outer_share), sid)
        inner = AeadKey.derive(b"inner", self._inner.exchange(server.inner_share), sid) if self.layered else outer
        return LayeredSession(sid, app_id, outer, inner, (server.outer_quote, server.inner_quote))


def handshake(client: ChannelClient, platform: Platform) -> LayeredSession:
    """Run the full exchange; raises :class:`HandshakeFailed` naming the failing layer."""
    return client.finish(platform.accept(client.hello()), platform.app_id)


# -- sealing and opening ---------------------------------------------------------------


def seal_request(session: LayeredSession, payload: bytes) -> Envelope:
    sid = session.session_id
    inner = aead_seal(session.inner_key, counter_nonce(session.inner_counter, _TO_SERVER), _inner_aad(sid), payload)
    session.inner_counter += 1
    w = Writer().raw(RoutingHeader(session.app_id, sid).encode())
    inner.write(w)
    outer = aead_seal(session.outer_key, counter_nonce(session.outer_counter, _TO_SERVER), _outer_aad(sid), w.getvalue())
    session.outer_counter += 1
    return Envelope(sid, outer)


def _accept_counter(endpoint: _Endpoint, ct: Ciphertext) -> None:
    counter = _counter_of(ct)
    if ct.nonce[:4] != _TO_SERVER or counter <= endpoint.last_in:
        raise ReplayError(f"counter {counter} not above {endpoint.last_in}")
    endpoint.last_in = counter


def _endpoint(keyset: dict[bytes, _Endpoint], session_id: bytes) -> _Endpoint:
    ep = keyset.get(session_id)
    if ep is None:
        raise AuthenticationError("unknown session")
    return ep


def open_at_runtime(keyset: dict[bytes, _Endpoint], env: Envelope | bytes) -> tuple[RoutingHeader, Ciphertext]:
    if isinstance(env, (bytes, bytearray)):
        try:
            env = Envelope.decode(bytes(env))
        except DecodeError as exc:
            raise AuthenticationError(f"malformed envelope: {exc}") from exc
    ep = _endpoint(keyset, env.session_id)
    plain = aead_open(ep.key, _outer_aad(env.session_id), env.outer)
    _accept_counter(ep, env.outer)
    try:
        r = Reader(plain)
        routing = RoutingHeader.read(r)
        inner = Ciphertext.read(r)
        r.done()
    except DecodeError as exc:
        raise AuthenticationError(f"malformed inner layer: {exc}") from exc
    if routing.session_id != env.session_id:
        raise AuthenticationError("routing header names another session")
    return routing, inner


def open_at_app(keyset: dict[bytes, _Endpoint], routing: RoutingHeader, inner: Ciphertext) -> bytes:
    ep = _endpoint(keyset, routing.session_id)
    payload = aead_open(ep.key, _inner_aad(routing.session_id), inner)
    _accept_counter(ep, inner)
    return payload


def runtime_attempt_inner(keyset: dict[bytes, _Endpoint], routing: RoutingHeader, inner: Ciphertext) -> bytes | None:
    """What a curious runtime manager recovers by trying every key it holds."""
    for ep in keyset.values():
        try:
            return aead_open(ep.key, _inner_aad(routing.session_id), inner)
        except AuthenticationError:
            continue
    return None


def seal_response(keyset: dict[bytes, _Endpoint], session_id: bytes, payload: bytes) -> Ciphertext:
    ep = _endpoint(keyset, session_id)
    ct = aead_seal(ep.key, counter_nonce(ep.next_out, _TO_CLIENT), _inner_aad(session_id), payload)
    ep.next_out += 1
    return ct


def open_response(session: LayeredSession, ct: Ciphertext) -> bytes:
    payload = aead_open(session.inner_key, _inner_aad(session.session_id), ct)
    counter = _counter_of(ct)
    if ct.nonce[:4] != _TO_CLIENT or counter <= session.last_response:
        raise ReplayError(f"response counter {counter} replayed")
    session.last_response = counter
    return payload


# -- the interception adversary --------------------------------------------------------------


class InterceptingProxy:
    """Terminates the client's outer layer with its own share and re-initiates
    towards the platform, hoping the client accepts the platform's quote."""

    def __init__(self, platform: Platform, rng: SeededRng) -> None:
        self.platform = platform
        self._rng = rng
        self.client_side_key: AeadKey | None = None
        self._platform_side: tuple[bytes, AeadKey] | None = None

    def relay(self, hello: ClientHello) -> ServerHello:
        towards_platform = KeyShare.generate(self._rng)
        forwarded = ClientHello(towards_platform.public, hello.inner_share, hello.outer_nonce, hello.inner_nonce)
        real = self.platform.accept(forwarded)
        platform_sid = _session_id(forwarded, real)
        self._platform_side = (
            platform_sid,
            AeadKey.derive(b"outer", towards_platform.exchange(real.outer_share), platform_sid),
        )
        own = KeyShare.generate(self._rng)
        substituted = ServerHello(own.public, real.outer_quote, real.inner_share, real.inner_quote)
        sid = _session_id(hello, substituted)
        self.client_side_key = AeadKey.derive(b"outer", own.exchange(hello.outer_share), sid)
        return substituted

    def forward(self, env: Envelope) -> Envelope | None:
        """Re-seal a client envelope towards the platform (after reading it)."""
        plain = self.read_outer(env)
        if plain is None or self._platform_side is None:
            return None
        sid, key = self._platform_side
        ct = aead_seal(key, counter_nonce(_counter_of(env.outer), _TO_SERVER), _outer_aad(sid), plain)
        return Envelope(sid, ct)

    def read_outer(self, env: Envelope) -> bytes | None:
        """Plaintext of the outer layer if the proxy holds the client's outer key."""
        if self.client_side_key is None:
            return None
        try:
            return aead_open(self.client_side_key, _outer_aad(env.session_id), env.outer)
        except AuthenticationError:
            return None
