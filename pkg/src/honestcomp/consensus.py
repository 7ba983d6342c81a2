"""Attestation-hardened Raft over simulated enclaves.

Differences from textbook Raft:

* every log entry is signed by its proposer's AIK and re-verified on append;
* a RequestVote carries a quote binding (term, candidate, last log position),
  and vote grants are AIK-signed;
* a pre-vote round and leader stickiness keep an isolated or misbehaving node
  from inflating terms;
* each node measures its peers' clock rate and message error rate, and the
  leader commits an exclusion entry for a peer outside the thresholds,
  either on its own corroborated measurements or when quorum - 1 followers
  report the same suspicion in their append replies;
* after applying a block every node signs (block, root, term); the leader
  gathers a quorum of those into its root history and ships finalized entries
  to followers.

Links are point-to-point and encrypted under the pairwise key from the
mutual-attestation handshake, so a frame that fails authentication is
attributed to the link it arrived on.
"""

from __future__ import annotations

import enum
import math
import statistics
import struct
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Protocol, Sequence

from .attestation import (
    AttestationQuote,
    CrossVendorRejected,
    EnclaveIdentity,
    HandshakeFailed,
    QuoteRejected,
    TrustStore,
    cross_vendor_validate,
    generate_quote,
    mutual_attest,
    report_data,
    verify_quote,
)
from .codec import DecodeError, Reader, Writer
from .crypto import (
    AeadKey,
    AuthenticationError,
    Ciphertext,
    Digest,
    SeededRng,
    Signature,
    SigningKey,
    VerifyKey,
    aead_open,
    aead_seal,
    counter_nonce,
    hash_parts,
    sign,
    verify,
)
from .execution import BlockContext, Command, CommandKind, Engine, Transaction, TxResult
from .mpt_ledger import (
    BadQuorumError,
    GapInIndexError,
    HistoryEntry,
    RootHistory,
    Trie,
    block_statement,
    commit_block,
    quorum_size,
)
from .sharding import Shard, ShardedSecret, ShardingError, rotate, split, verify_shard
from .state import MemberInfo, MemberStatus

_U64x2 = struct.Struct(">QQ")

DRIFT = "drift"
COMM_ANOMALY = "comm-anomaly"
FAILED_ATTESTATION = "failed-attestation"


@dataclass(frozen=True)
class Timing:
    election_min: int = 150
    election_max: int = 300
    heartbeat: int = 50
    window: int = 20
    drift_threshold: float = 0.10
    comm_threshold: float = 0.15
    max_batch: int = 64
    rotation_interval: int = 4000

    def to_json(self) -> dict:
        return {
            "election_min": self.election_min,
            "election_max": self.election_max,
            "heartbeat": self.heartbeat,
            "window": self.window,
            "drift_threshold": _num(self.drift_threshold),
            "comm_threshold": _num(self.comm_threshold),
            "max_batch": self.max_batch,
            "rotation_interval": self.rotation_interval,
        }


def _num(x: float):
    return "inf" if math.isinf(x) else x


# -- detectors ------------------------------------------------------------------------------


class InsufficientObservations(ValueError):
    code = "insufficient-observations"


@dataclass(frozen=True)
class Within:
    value: float
    anomalous = False


@dataclass(frozen=True)
class Outside:
    value: float
    anomalous = True


class HeartbeatStats:
    """Most recent ``window`` (expected, observed) interval pairs for one peer.

    ``expected`` is the receiver's own elapsed time and ``observed`` the
    sender's, read from the clock stamp on its frames.
    """

    def __init__(self, window: int, min_gap: int) -> None:
        self.window = window
        self.min_gap = min_gap
        self.samples: deque[tuple[int, int]] = deque(maxlen=window)
        self.version = 0
        self._last: tuple[int, int] | None = None

    def observe(self, local_now: int, sender_clock: int) -> None:
        last = self._last
        if last is None:
            self._last = (local_now, sender_clock)
            return
        gap = local_now - last[0]
        if gap < self.min_gap:
            return
        self.samples.append((gap, sender_clock - last[1]))
        self.version += 1
        self._last = (local_now, sender_clock)

    def full(self) -> bool:
        return len(self.samples) >= self.window


def detect_drift(stats: HeartbeatStats, threshold: float) -> Within | Outside:
    if not stats.full():
        raise InsufficientObservations(f"{len(stats.samples)} of {stats.window}")
    ratio = statistics.median(obs / exp for exp, obs in stats.samples)
    return Outside(ratio) if abs(ratio - 1) > threshold else Within(ratio)


class CommMonitor:
    """Outcome of the most recent ``window`` frames received on one link."""

    def __init__(self, window: int) -> None:
        self.window = window
        self.outcomes: deque[bool] = deque(maxlen=window)
        self.errors = 0  # errors currently inside the window
        self.errors_by_kind: dict[str, int] = {}

    def _push(self, is_error: bool) -> None:
        if len(self.outcomes) == self.window and self.outcomes[0]:
            self.errors -= 1
        self.outcomes.append(is_error)
        self.errors += is_error

    def ok(self) -> None:
        self._push(False)

    def error(self, kind: str) -> None:
        self._push(True)
        self.errors_by_kind[kind] = self.errors_by_kind.get(kind, 0) + 1

    def full(self) -> bool:
        return len(self.outcomes) >= self.window


def detect_comm_anomaly(monitor: CommMonitor, threshold: float) -> Within | Outside:
    if not monitor.full():
        raise InsufficientObservations(f"{len(monitor.outcomes)} of {monitor.window}")
    rate = monitor.errors / len(monitor.outcomes)
    return Outside(rate) if rate > threshold else Within(rate)


# -- log entries and membership -------------------------------------------------------------


def entry_statement(term: int, index: int, command: bytes, proposer: str) -> bytes:
    return Writer().raw(b"entry").u64(term).u64(index).blob(command).text(proposer).getvalue()


@dataclass(frozen=True)
class LogEntry:
    term: int
    index: int
    command: bytes
    proposer: str
    signature: Signature

    @classmethod
    def create(cls, term: int, index: int, command: bytes, proposer: str, key: SigningKey) -> "LogEntry":
        return cls(term, index, command, proposer, sign(key, entry_statement(term, index, command, proposer)))

    def signature_valid(self, vk: VerifyKey) -> bool:
        return verify(vk, entry_statement(self.term, self.index, self.command, self.proposer), self.signature)

    def write(self, w: Writer) -> None:
        w.u64(self.term).u64(self.index).blob(self.command).text(self.proposer)
        self.signature.write(w)

    @classmethod
    def read(cls, r: Reader) -> "LogEntry":
        return cls(r.u64(), r.u64(), r.blob(), r.text(64), Signature.read(r))

    def digest(self) -> Digest:
        w = Writer()
        self.write(w)
        return hash_parts(b"log-entry", w.getvalue())


@dataclass(frozen=True)
class QuorumMembership:
    members: Mapping[str, MemberInfo]
    excluded: Mapping[str, MemberInfo] = field(default_factory=dict)

    @property
    def quorum(self) -> int:
        return quorum_size(len(self.members))

    def __contains__(self, pid: str) -> bool:
        return pid in self.members

    def keys(self) -> dict[str, VerifyKey]:
        return {pid: m.aik for pid, m in self.members.items()}

    def vendors(self) -> set:
        return {m.vendor for m in self.members.values()}

    @classmethod
    def from_trie(cls, trie: Trie) -> "QuorumMembership":
        members, excluded = {}, {}
        for _, raw in trie.items(b"member/"):
            info = MemberInfo.decode(raw)
            (members if info.status is MemberStatus.ACTIVE else excluded)[info.platform_id] = info
        return cls(members, excluded)


# -- wire messages --------------------------------------------------------------------------


class Msg(enum.IntEnum):
    PREVOTE = 1
    PREVOTE_REPLY = 2
    VOTE = 3
    VOTE_REPLY = 4
    APPEND = 5
    APPEND_REPLY = 6
    SHARD = 7
    FORWARD = 8


def vote_binding(term: int, candidate: str, last_index: int, last_term: int) -> bytes:
    return report_data(
        hash_parts(b"vote", term.to_bytes(8, "big"), candidate.encode(), last_index.to_bytes(8, "big"), last_term.to_bytes(8, "big")).data
    )


def vote_nonce(term: int, candidate: str) -> bytes:
    return hash_parts(b"vote-nonce", term.to_bytes(8, "big"), candidate.encode()).data[:16]


def vote_statement(term: int, voter: str, candidate: str, granted: bool) -> bytes:
    return Writer().raw(b"vote-reply").u64(term).text(voter).text(candidate).flag(granted).getvalue()


@dataclass(frozen=True)
class Attestation:
    block_index: int
    root: Digest
    term: int
    signature: Signature

    def write(self, w: Writer) -> None:
        w.u64(self.block_index)
        self.root.write(w)
        w.u64(self.term)
        self.signature.write(w)

    @classmethod
    def read(cls, r: Reader) -> "Attestation":
        return cls(r.u64(), Digest.read(r), r.u64(), Signature.read(r))


class Host(Protocol):
    """What a node needs from its environment (the simulator)."""

    now: int

    def send(self, src: str, dst: str, frame: bytes) -> None: ...

    def schedule(self, node: str, at: int, kind: str, token: int) -> None: ...

    def emit(self, node: str, event: str, detail: dict) -> None: ...


class Role(enum.Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


@dataclass
class NodeOptions:
    """Per-node switches.  Defaults are the hardened behaviour."""

    skip_attestation: bool = False
    skip_cross_vendor: bool = False
    seal_full_secret: bool = False


class RaftNode:
    def __init__(
        self,
        identity: EnclaveIdentity,
        genesis: Trie,
        engine: Engine,
        cluster_secret: bytes,
        cluster_measurement: Digest,
        trusted: TrustStore,
        timing: Timing,
        host: Host,
        rng: SeededRng,
        sealing_key: AeadKey,
        options: NodeOptions | None = None,
    ) -> None:
        self.id = identity.platform_id
        self.identity = identity
        self.aik = identity.aik
        self.clock_rate = Fraction(identity.clock_rate)
        self._rate_num, self._rate_den = self.clock_rate.numerator, self.clock_rate.denominator
        self.engine = engine
        self.secret = cluster_secret
        self.cluster_measurement = cluster_measurement
        self.trusted = trusted
        self.timing = timing
        self.host = host
        self.rng = rng
        self.options = options or NodeOptions()
        self.sealing_key = sealing_key
        self.at_rest: dict[str, Ciphertext] = {}
        self._seal_counter = 0

        # persistent raft state
        self.term = 0
        self.voted_for: str | None = None
        self.log: list[LogEntry] = []
        # volatile
        self.role = Role.FOLLOWER
        self.commit_index = 0
        self.last_applied = 0
        self.leader_id: str | None = None
        self.last_leader_contact: int | None = None
        self.votes: set[str] = set()
        self.prevotes: set[str] = set()
        self.next_index: dict[str, int] = {}
        self.match_index: dict[str, int] = {}
        self.peer_history: dict[str, int] = {}

        # state machine
        self.trie = genesis
        self.membership = QuorumMembership.from_trie(genesis)
        self.member_order = sorted(self.membership.members)
        self.known_aiks: dict[str, VerifyKey] = {pid: m.aik for pid, m in self.membership.members.items()}
        self.results: dict[Digest, TxResult] = {}
        self.history = RootHistory()
        self.block_roots: dict[int, tuple[Digest, int]] = {}
        self.members_at: dict[int, dict[str, VerifyKey]] = {}
        self.own_attestations: dict[int, Attestation] = {}
        self.collected: dict[int, dict[str, Signature]] = {}
        self.spec_trie: Trie | None = None
        self.log_tx_ids: set[Digest] = set()
        self.pending: dict[Digest, tuple[bytes, int]] = {}
        self.pending_exclusions: set[str] = set()
        self.history_hint = 0

        # links and monitors
        self.peers: dict[str, AeadKey] = {}
        self._routes: dict[str, tuple[bytes, bytes]] = {}
        self.send_counters: dict[str, int] = {}
        self.drift: dict[str, HeartbeatStats] = {}
        self.comm: dict[str, CommMonitor] = {}
        self.suspected: dict[str, str] = {}
        self.peer_reports: dict[str, dict[str, str]] = {}
        self._drift_cache: dict[str, tuple[int, Within | Outside | None]] = {}

        # shards
        self.shard_epoch = -1
        self.dealing: tuple[list[Shard], ShardedSecret] | None = None
        self.last_rotation = 0

        self._timer_tokens: dict[str, int] = {"election": 0, "heartbeat": 0}
        self._election_deadline = 0
        self._election_armed: int | None = None
        self.alive = True

    # -- clock and timers ------------------------------------------------------------

    def local_time(self, real: int | None = None) -> int:
        real = self.host.now if real is None else real
        return real * self._rate_num // self._rate_den

    def _real_at(self, local: int) -> int:
        return max(self.host.now + 1, -(-local * self._rate_den // self._rate_num))

    def _set_timer(self, kind: str, local_delay: int) -> None:
        token = self._timer_tokens[kind] + 1
        self._timer_tokens[kind] = token
        self.host.schedule(self.id, self._real_at(self.local_time() + local_delay), kind, token)

    def _reset_election_timer(self) -> None:
        # Resets are frequent (every append), so keep a single pending event
        # and move the deadline; the event re-arms itself if fired early.
        timeout = self.rng.randint(self.timing.election_min, self.timing.election_max)
        deadline = self._real_at(self.local_time() + timeout)
        self._election_deadline = deadline
        if self._election_armed is None or self._election_armed > deadline:
            self._election_armed = deadline
            self._timer_tokens["election"] += 1
            self.host.schedule(self.id, deadline, "election", self._timer_tokens["election"])

    def start(self) -> None:
        self._reset_election_timer()

    def on_timer(self, kind: str, token: int) -> None:
        if not self.alive or self._timer_tokens.get(kind) != token:
            return
        if kind == "election":
            self._election_armed = None
            if self.host.now < self._election_deadline:
                self._election_armed = self._election_deadline
                self._timer_tokens["election"] += 1
                self.host.schedule(self.id, self._election_deadline, "election", self._timer_tokens["election"])
                return
            self._on_election_timeout()
        elif kind == "heartbeat":
            self._on_heartbeat()

    # -- links -------------------------------------------------------------------------

    def add_peer(self, peer_id: str, channel_key: AeadKey) -> None:
        self.peers[peer_id] = channel_key
        self._routes[peer_id] = (
            Writer().text(self.id).text(peer_id).getvalue(),
            self._direction(self.id, peer_id),
        )
        self.send_counters.setdefault(peer_id, 0)
        self.drift.setdefault(peer_id, HeartbeatStats(self.timing.window, self.timing.heartbeat))
        self.comm.setdefault(peer_id, CommMonitor(self.timing.window))

    def _direction(self, src: str, dst: str) -> bytes:
        return b"\x00\x00\x00\x00" if src < dst else b"\x00\x00\x00\x01"

    def _send(self, dst: str, kind: Msg, body: bytes) -> None:
        key = self.peers.get(dst)
        if key is None or not self.alive:
            return
        counter = self.send_counters[dst]
        self.send_counters[dst] = counter + 1
        route, direction = self._routes[dst]
        header = bytes((kind,)) + route + _U64x2.pack(self.local_time(), counter)
        ct = aead_seal(key, counter_nonce(counter, direction), header, body)
        self.host.send(self.id, dst, Writer().raw(header).blob(ct.body).fixed(ct.tag, 16).getvalue())

    def on_frame(self, link_src: str, frame: bytes) -> None:
        """Authenticate and dispatch a frame received on the link from ``link_src``."""
        if not self.alive:
            return
        key = self.peers.get(link_src)
        if key is None:
            return
        monitor = self.comm[link_src]
        try:
            r = Reader(frame)
            kind = Msg(r.u8())
            sender, receiver, clock, counter = r.text(64), r.text(64), r.u64(), r.u64()
            header_len = len(frame) - r.remaining
            body_ct, tag = r.blob(), r.fixed(16)
            r.done()
        except (DecodeError, ValueError):
            monitor.error("malformed")
            return
        if sender != link_src or receiver != self.id:
            monitor.error("contradictory")
            return
        ct = Ciphertext(counter_nonce(counter, self._direction(sender, self.id)), body_ct, tag)
        try:
            body = aead_open(key, frame[:header_len], ct)
        except AuthenticationError:
            monitor.error("bad-mac")
            return
        self.drift[link_src].observe(self.local_time(), clock)
        try:
            handled = self._dispatch(kind, sender, Reader(body))
        except (DecodeError, ValueError):
            monitor.error("malformed")
            return
        if handled is False:
            monitor.error("contradictory")
        else:
            monitor.ok()
        self._update_suspicion(link_src)

    def _dispatch(self, kind: Msg, sender: str, r: Reader) -> bool | None:
        if kind is Msg.PREVOTE:
            return self._on_prevote(sender, r)
        if kind is Msg.PREVOTE_REPLY:
            return self._on_prevote_reply(sender, r)
        if kind is Msg.VOTE:
            return self._on_vote_request(sender, r)
        if kind is Msg.VOTE_REPLY:
            return self._on_vote_reply(sender, r)
        if kind is Msg.APPEND:
            return self._on_append(sender, r)
        if kind is Msg.APPEND_REPLY:
            return self._on_append_reply(sender, r)
        if kind is Msg.SHARD:
            return self._on_shard(sender, r)
        if kind is Msg.FORWARD:
            return self._on_forward(sender, r)
        return False

    # -- monitors ----------------------------------------------------------------------------

    def peer_verdicts(self, peer: str) -> dict[str, Within | Outside | None]:
        out: dict[str, Within | Outside | None] = {}
        stats = self.drift[peer]
        cached = self._drift_cache.get(peer)
        if cached is not None and cached[0] == stats.version:
            out[DRIFT] = cached[1]
        else:
            try:
                out[DRIFT] = detect_drift(stats, self.timing.drift_threshold)
            except InsufficientObservations:
                out[DRIFT] = None
            self._drift_cache[peer] = (stats.version, out[DRIFT])
        try:
            out[COMM_ANOMALY] = detect_comm_anomaly(self.comm[peer], self.timing.comm_threshold)
        except InsufficientObservations:
            out[COMM_ANOMALY] = None
        return out

    def _update_suspicion(self, peer: str) -> None:
        for cause, verdict in self.peer_verdicts(peer).items():
            if verdict is not None and verdict.anomalous:
                if peer not in self.suspected:
                    self.suspected[peer] = cause
                    self.host.emit(self.id, "suspect", {"peer": peer, "cause": cause, "value": round(verdict.value, 4)})
                return
        self.suspected.pop(peer, None)

    def _corroborated(self) -> bool:
        """True when enough peers look normal that our own measurements can be trusted.

        A node whose own clock or link is faulty sees every peer as anomalous;
        requiring quorum - 1 peers inside both thresholds keeps it from
        accusing honest members.
        """
        normal = 0
        for peer in self.member_order:
            if peer == self.id:
                continue
            verdicts = self.peer_verdicts(peer).values()
            if all(v is not None and not v.anomalous for v in verdicts):
                normal += 1
        return normal >= self.membership.quorum - 1

    def _reported(self, peer: str, cause: str) -> bool:
        """True when quorum - 1 other members report the same suspicion of ``peer``.

        A freshly elected leader has no windows for its fellow followers yet,
        so it leans on theirs; its own verdict on ``peer`` is still required.
        """
        agree = sum(
            1 for m, reports in self.peer_reports.items()
            if m not in (self.id, peer) and m in self.membership and reports.get(peer) == cause
        )
        return agree >= self.membership.quorum - 1

    # -- elections ----------------------------------------------------------------------------

    def _last_log(self) -> tuple[int, int]:
        return (len(self.log), self.log[-1].term if self.log else 0)

    def _heard_from_leader_recently(self) -> bool:
        if self.role is Role.LEADER:
            return True
        if self.last_leader_contact is None:
            return False
        return self.local_time() - self.last_leader_contact < self.timing.election_min

    def _log_ok(self, last_index: int, last_term: int) -> bool:
        my_index, my_term = self._last_log()
        return (last_term, last_index) >= (my_term, my_index)

    def _on_election_timeout(self) -> None:
        self._reset_election_timer()
        if self.role is Role.LEADER or self.id not in self.membership:
            return
        self.prevotes = {self.id}
        last_index, last_term = self._last_log()
        body = Writer().u64(self.term + 1).u64(last_index).u64(last_term).getvalue()
        for peer in self.member_order:
            if peer != self.id:
                self._send(peer, Msg.PREVOTE, body)
        self._check_prevotes()

    def _on_prevote(self, sender: str, r: Reader) -> bool:
        term, last_index, last_term = r.u64(), r.u64(), r.u64()
        r.done()
        if sender not in self.membership:
            return True
        granted = (
            term > self.term
            and sender not in self.suspected
            and not self._heard_from_leader_recently()
            and self._log_ok(last_index, last_term)
        )
        self._send(sender, Msg.PREVOTE_REPLY, Writer().u64(term).flag(granted).getvalue())
        return True

    def _on_prevote_reply(self, sender: str, r: Reader) -> bool:
        term, granted = r.u64(), r.flag()
        r.done()
        if granted and term == self.term + 1 and self.role is not Role.LEADER and sender in self.membership:
            self.prevotes.add(sender)
            self._check_prevotes()
        return True

    def _check_prevotes(self) -> None:
        if len(self.prevotes & set(self.membership.members)) >= self.membership.quorum:
            self.prevotes = set()
            self._start_election()

    def _start_election(self) -> None:
        self.term += 1
        self.role = Role.CANDIDATE
        self.voted_for = self.id
        self.votes = {self.id}
        self.leader_id = None
        self.host.emit(self.id, "became_candidate", {})
        last_index, last_term = self._last_log()
        quote = generate_quote(
            self.identity, vote_binding(self.term, self.id, last_index, last_term), vote_nonce(self.term, self.id)
        )
        body = Writer().u64(self.term).u64(last_index).u64(last_term).blob(quote.encode()).getvalue()
        for peer in self.member_order:
            if peer != self.id:
                self._send(peer, Msg.VOTE, body)
        self._check_votes()

    def _on_vote_request(self, sender: str, r: Reader) -> bool:
        term, last_index, last_term = r.u64(), r.u64(), r.u64()
        quote_raw = r.blob()
        r.done()
        if sender not in self.membership or sender in self.suspected:
            return True
        if self._heard_from_leader_recently() and term > self.term:
            return True  # leader stickiness: do not let a stray candidate disrupt
        if term > self.term:
            self._become_follower(term)
        reason = ""
        try:
            quote = AttestationQuote.decode(quote_raw)
            verify_quote(quote, self.cluster_measurement, self.trusted, vote_nonce(term, sender))
            if quote.platform_id != sender or quote.report_data != vote_binding(term, sender, last_index, last_term):
                raise QuoteRejected("report-mismatch", sender)
        except (QuoteRejected, DecodeError):
            reason = FAILED_ATTESTATION
        if not reason and term < self.term:
            reason = "stale-term"
        if not reason and self.voted_for not in (None, sender):
            reason = "already-voted"
        if not reason and not self._log_ok(last_index, last_term):
            reason = "log-behind"
        granted = not reason
        if granted:
            self.voted_for = sender
            self._reset_election_timer()
        else:
            self.host.emit(self.id, "vote_denied", {"candidate": sender, "reason": reason, "vote_term": term})
        sig = sign(self.aik, vote_statement(term, self.id, sender, granted))
        w = Writer().u64(term).flag(granted).text(reason)
        sig.write(w)
        self._send(sender, Msg.VOTE_REPLY, w.getvalue())
        return True

    def _on_vote_reply(self, sender: str, r: Reader) -> bool:
        term, granted = r.u64(), r.flag()
        r.text(64)
        sig = Signature.read(r)
        r.done()
        vk = self.membership.keys().get(sender)
        if vk is None or not verify(vk, vote_statement(term, sender, self.id, granted), sig):
            return False
        if term > self.term:
            self._become_follower(term)
            return True
        if self.role is Role.CANDIDATE and term == self.term and granted:
            self.votes.add(sender)
            self._check_votes()
        return True

    def _check_votes(self) -> None:
        if self.role is Role.CANDIDATE and len(self.votes & set(self.membership.members)) >= self.membership.quorum:
            self._become_leader()

    def _become_follower(self, term: int) -> None:
        if term > self.term:
            self.term = term
            self.voted_for = None
        if self.role is not Role.FOLLOWER:
            self.host.emit(self.id, "became_follower", {})
        self.role = Role.FOLLOWER
        self.spec_trie = None

    def _become_leader(self) -> None:
        self.role = Role.LEADER
        self.peer_reports = {}
        self.leader_id = self.id
        self.host.emit(self.id, "became_leader", {})
        last = len(self.log)
        for peer in self.membership.members:
            self.next_index[peer] = last + 1
            self.match_index[peer] = 0
            self.peer_history[peer] = 0
        self.match_index[self.id] = last
        self.pending_exclusions = set()
        self.spec_trie = self._replay_uncommitted()
        self._propose(Command(CommandKind.NOOP))
        if self.dealing is None:
            self.reshare("leader")
        self._broadcast_append()
        self._set_timer("heartbeat", self.timing.heartbeat)

    def _replay_uncommitted(self) -> Trie:
        trie = self.trie
        for entry in self.log[self.last_applied:]:
            outcome = self.engine.apply(trie, entry.command, self._ctx(entry), commit_effects=False)
            trie = outcome.trie
        return trie

    # -- replication (leader side) ---------------------------------------------------------------

    def _ctx(self, entry: LogEntry) -> BlockContext:
        return BlockContext(entry.index - 1, entry.term, entry.index, entry.proposer)

    def _propose(self, cmd: Command) -> LogEntry:
        index = len(self.log) + 1
        ctx = BlockContext(index - 1, self.term, index, self.id)
        if cmd.kind is CommandKind.TX:
            outcome = self.engine.apply(self.spec_trie, cmd, ctx, signer=self.aik, commit_effects=False)
            cmd = Command.for_tx(cmd.tx, outcome.producer_sigs)
            self.spec_trie = outcome.trie
            self.log_tx_ids.add(outcome.result.tx_id)
        else:
            self.spec_trie = self.engine.apply(self.spec_trie, cmd, ctx, commit_effects=False).trie
        raw = cmd.encode()
        entry = LogEntry.create(self.term, index, raw, self.id, self.aik)
        self.log.append(entry)
        self.match_index[self.id] = index
        self._advance_commit()
        return entry

    def submit(self, tx: bytes) -> Digest | None:
        """Accept a client transaction at this node; it is forwarded or proposed until applied."""
        try:
            tx_id = Transaction.decode(tx).tx_id
        except (DecodeError, ValueError):
            return None
        if tx_id not in self.results:
            self.pending.setdefault(tx_id, (tx, -1))
        return tx_id

    def _drain_pending(self) -> None:
        now = self.local_time()
        for tx_id in sorted(self.pending, key=lambda d: d.data):
            if tx_id in self.results:
                del self.pending[tx_id]
                continue
            tx, last = self.pending[tx_id]
            if self.role is Role.LEADER:
                if tx_id not in self.log_tx_ids:
                    self._propose(Command.for_tx(tx))
            elif self.leader_id and self.leader_id != self.id and (last < 0 or now - last >= 4 * self.timing.heartbeat):
                self._send(self.leader_id, Msg.FORWARD, Writer().blob(tx).getvalue())
                self.pending[tx_id] = (tx, now)

    def _on_forward(self, sender: str, r: Reader) -> bool:
        tx = r.blob()
        r.done()
        if sender in self.membership:
            self.submit(tx)
            if self.role is Role.LEADER:
                self._drain_pending()
        return True

    def _on_heartbeat(self) -> None:
        if self.role is not Role.LEADER:
            return
        self._set_timer("heartbeat", self.timing.heartbeat)
        self._propose_exclusions()
        self._drain_pending()
        self._broadcast_append()
        if self.host.now - self.last_rotation >= self.timing.rotation_interval:
            self.reshare("rotation")

    def _propose_exclusions(self) -> None:
        trusted_self = self._corroborated()
        for peer in self.member_order:
            if peer == self.id or peer in self.pending_exclusions:
                continue
            for cause, verdict in self.peer_verdicts(peer).items():
                if verdict is not None and verdict.anomalous and (trusted_self or self._reported(peer, cause)):
                    label = "ratio" if cause == DRIFT else "error_rate"
                    evidence = f"{label}={verdict.value:.4f}"
                    self.pending_exclusions.add(peer)
                    self.host.emit(self.id, "exclusion_proposed", {"peer": peer, "reason": cause, "evidence": evidence})
                    self._propose(Command(CommandKind.EXCLUDE, platform_id=peer, reason=cause, evidence=evidence))
                    break

    def _broadcast_append(self) -> None:
        for peer in self.member_order:
            if peer != self.id:
                self._send_append(peer)

    def _send_append(self, peer: str) -> None:
        nxt = self.next_index.get(peer, len(self.log) + 1)
        prev_index = nxt - 1
        prev_term = self.log[prev_index - 1].term if prev_index > 0 else 0
        entries = self.log[prev_index : prev_index + self.timing.max_batch]
        w = Writer().u64(self.term).u64(prev_index).u64(prev_term).u64(self.commit_index)
        w.u32(len(entries))
        for e in entries:
            e.write(w)
        start = self.peer_history.get(peer, 0)
        finalized = self.history.entries[start : start + 16]
        w.u64(len(self.history)).u64(start).u16(len(finalized))
        for h in finalized:
            w.blob(h.encode())
        self._send(peer, Msg.APPEND, w.getvalue())

    def _on_append_reply(self, sender: str, r: Reader) -> bool:
        term, success, match, hint, history_len = r.u64(), r.flag(), r.u64(), r.u64(), r.u64()
        atts = [Attestation.read(r) for _ in range(r.u16())]
        reports = {r.text(64): r.text(32) for _ in range(r.u16())}
        r.done()
        if term > self.term:
            self._become_follower(term)
            return True
        if self.role is not Role.LEADER or term != self.term or sender not in self.membership:
            return True
        self.peer_reports[sender] = reports
        self.peer_history[sender] = min(history_len, len(self.history))
        if success:
            self.match_index[sender] = max(self.match_index.get(sender, 0), match)
            self.next_index[sender] = self.match_index[sender] + 1
            self._advance_commit()
        else:
            self.next_index[sender] = max(1, min(hint, self.next_index.get(sender, 1) - 1 or 1))
        consistent = True
        for att in atts:
            mine = self.block_roots.get(att.block_index)
            if mine is not None and (mine[0] != att.root or mine[1] != att.term):
                consistent = False
                continue
            self.collected.setdefault(att.block_index, {})[sender] = att.signature
        self._finalize_blocks()
        return consistent

    def _advance_commit(self) -> None:
        if self.role is not Role.LEADER:
            return
        members = self.member_order
        for n in range(len(self.log), self.commit_index, -1):
            if self.log[n - 1].term != self.term:
                break
            if sum(1 for m in members if self.match_index.get(m, 0) >= n) >= self.membership.quorum:
                self._commit_to(n)
                break

    def _finalize_blocks(self) -> None:
        while True:
            b = len(self.history)
            mine = self.block_roots.get(b)
            if mine is None:
                return
            sigs = dict(self.collected.get(b, {}))
            sigs[self.id] = self.own_attestations[b].signature
            try:
                self.history = commit_block(self.history, mine[0], mine[1], self.id, sigs.items(), self.members_at[b], b)
            except (BadQuorumError, GapInIndexError):
                return
            self.host.emit(self.id, "block_finalized", {"block": b, "root": mine[0].hex()})

    # -- replication (follower side) ------------------------------------------------------------

    def _on_append(self, sender: str, r: Reader) -> bool:
        term, prev_index, prev_term, leader_commit = r.u64(), r.u64(), r.u64(), r.u64()
        entries = [LogEntry.read(r) for _ in range(r.u32())]
        leader_history, start = r.u64(), r.u64()
        finalized = [HistoryEntry.read(Reader(r.blob())) for _ in range(r.u16())]
        r.done()
        if sender not in self.membership:
            return True
        if term < self.term:
            self._reply_append(sender, False, 0, len(self.log) + 1)
            return True
        if sender in self.suspected:
            return True
        if term > self.term or self.role is not Role.FOLLOWER:
            self._become_follower(term)
        self.leader_id = sender
        self.last_leader_contact = self.local_time()
        self._reset_election_timer()
        if prev_index > len(self.log) or (prev_index > 0 and self.log[prev_index - 1].term != prev_term):
            hint = min(prev_index, len(self.log) + 1)
            if prev_index <= len(self.log):
                bad_term = self.log[prev_index - 1].term
                hint = prev_index
                while hint > 1 and self.log[hint - 2].term == bad_term:
                    hint -= 1
            self._reply_append(sender, False, 0, max(1, hint))
            return True
        aiks = dict(self.known_aiks)
        index = prev_index
        for e in entries:
            index += 1
            vk = aiks.get(e.proposer)
            if e.index != index or e.term > term or vk is None or not e.signature_valid(vk):
                self.host.emit(self.id, "bad_entry", {"index": index, "proposer": e.proposer})
                self._reply_append(sender, False, 0, index)
                return False
            if e.command[:1] == bytes([CommandKind.ADMIT]):
                try:
                    admitted = Command.decode(e.command).member
                    aiks[admitted.platform_id] = admitted.aik
                except (DecodeError, ValueError):
                    pass
            if index <= len(self.log):
                if self.log[index - 1].term == e.term:
                    continue
                if index <= self.commit_index:
                    return False  # leader contradicts a committed entry
                self._truncate(index - 1)
            self.log.append(e)
            self._note_tx(e)
        self.known_aiks = aiks
        last_new = prev_index + len(entries)
        if leader_commit > self.commit_index:
            self._commit_to(min(leader_commit, max(last_new, self.commit_index)))
        consistent = self._accept_finalized(finalized, start)
        self.history_hint = leader_history
        self._reply_append(sender, True, last_new, 0)
        self._drain_pending()
        return consistent

    def _note_tx(self, e: LogEntry) -> None:
        if e.command[:1] == bytes([CommandKind.TX]):
            try:
                self.log_tx_ids.add(Transaction.decode(Command.decode(e.command).tx).tx_id)
            except (DecodeError, ValueError):
                pass

    def _truncate(self, keep: int) -> None:
        for e in self.log[keep:]:
            try:
                cmd = Command.decode(e.command)
                if cmd.kind is CommandKind.TX:
                    self.log_tx_ids.discard(Transaction.decode(cmd.tx).tx_id)
            except (DecodeError, ValueError):
                pass
        del self.log[keep:]

    def _accept_finalized(self, finalized: Sequence[HistoryEntry], start: int) -> bool:
        if start != len(self.history):
            return True
        for h in finalized:
            b = h.block_index
            mine = self.block_roots.get(b)
            if mine is None:
                return True
            if (h.root, h.term) != mine:
                return False
            try:
                self.history = commit_block(self.history, h.root, h.term, h.leader, h.signatures, self.members_at[b], b)
            except (BadQuorumError, GapInIndexError):
                return False
        return True

    def _reply_append(self, leader: str, success: bool, match: int, hint: int) -> None:
        w = Writer().u64(self.term).flag(success).u64(match).u64(hint).u64(len(self.history))
        lo = self.history_hint
        atts = [self.own_attestations[b] for b in range(lo, min(self.last_applied, lo + 16))]
        w.u16(len(atts))
        for a in atts:
            a.write(w)
        w.u16(len(self.suspected))
        for peer, cause in sorted(self.suspected.items()):
            w.text(peer).text(cause)
        self._send(leader, Msg.APPEND_REPLY, w.getvalue())

    # -- commit and apply -----------------------------------------------------------------------

    def _commit_to(self, index: int) -> None:
        index = min(index, len(self.log))
        if index <= self.commit_index:
            return
        self.commit_index = index
        self.host.emit(self.id, "commit", {"index": index})
        self._apply_committed()

    def _apply_committed(self) -> None:
        while self.last_applied < self.commit_index:
            entry = self.log[self.last_applied]
            ctx = self._ctx(entry)
            outcome = self.engine.apply(self.trie, entry.command, ctx)
            self.trie = outcome.trie
            self.last_applied += 1
            self.results.setdefault(outcome.result.tx_id, outcome.result)
            if outcome.result.code in ("admitted", "excluded"):
                self._membership_changed(entry)
            b = ctx.block_index
            root = self.trie.root_hash()
            self.block_roots[b] = (root, entry.term)
            self.members_at[b] = self.membership.keys()
            self.own_attestations[b] = Attestation(b, root, entry.term, sign(self.aik, block_statement(b, root, entry.term)))
        if self.role is Role.LEADER:
            self._finalize_blocks()

    def _membership_changed(self, entry: LogEntry) -> None:
        before = set(self.membership.members)
        self.membership = QuorumMembership.from_trie(self.trie)
        self.member_order = sorted(self.membership.members)
        for pid, info in self.membership.members.items():
            self.known_aiks.setdefault(pid, info.aik)
        after = set(self.membership.members)
        for pid in sorted(after - before):
            self.host.emit(self.id, "member_admitted", {"platform_id": pid, "index": entry.index})
        for pid in sorted(before - after):
            info = self.membership.excluded.get(pid)
            self.host.emit(
                self.id,
                "member_excluded",
                {"platform_id": pid, "reason": info.reason, "evidence": info.evidence, "index": entry.index},
            )
            self.pending_exclusions.discard(pid)
            if pid == self.id:
                self.role = Role.FOLLOWER
        if self.role is Role.LEADER:
            for pid in after - before:
                self.next_index[pid] = 1
                self.match_index[pid] = 0
                self.peer_history[pid] = 0
            self.reshare("membership")

    # -- shard custody -----------------------------------------------------------------------------

    def seal(self, label: str, data: bytes) -> None:
        self._seal_counter += 1
        self.at_rest[label] = aead_seal(self.sealing_key, counter_nonce(self._seal_counter), label.encode(), data)

    def install_shard(self, shard: Shard, meta: ShardedSecret) -> bool:
        if not verify_shard(shard, meta) or meta.epoch < self.shard_epoch:
            return False
        self.shard_epoch = meta.epoch
        self.seal("shard", Writer().blob(shard.encode()).blob(meta.encode()).getvalue())
        if self.options.seal_full_secret:
            self.seal("secret", self.secret)
        return True

    def reshare(self, cause: str) -> None:
        """Deal fresh shares of the cluster secret to the current members."""
        if self.role is not Role.LEADER:
            return
        members = self.member_order
        n, k = len(members), self.membership.quorum
        epoch = self.shard_epoch + 1
        dealing = self.dealing
        try:
            if dealing is not None and dealing[1].n == n and dealing[1].k == k and dealing[1].epoch == self.shard_epoch:
                meta, shards = rotate(dealing[0], dealing[1], self.rng)
            else:
                meta, shards = split(self.secret, n, k, self.rng, epoch=epoch)
        except ShardingError:
            meta, shards = split(self.secret, n, k, self.rng, epoch=epoch)
        self.dealing = (list(shards), meta)
        self.last_rotation = self.host.now
        self.host.emit(self.id, "reshare", {"epoch": meta.epoch, "n": n, "k": k, "cause": cause})
        for pid, shard in zip(members, shards):
            if pid == self.id:
                self.install_shard(shard, meta)
                continue
            self.host.emit(self.id, "shard_sent", {"to": pid, "epoch": meta.epoch})
            self._send(pid, Msg.SHARD, Writer().blob(shard.encode()).blob(meta.encode()).getvalue())

    def _on_shard(self, sender: str, r: Reader) -> bool:
        shard, meta = Shard.decode(r.blob()), ShardedSecret.decode(r.blob())
        r.done()
        if sender != self.leader_id or sender not in self.membership:
            return True
        return self.install_shard(shard, meta)

    # -- admission ---------------------------------------------------------------------------------

    def admit_member(
        self,
        candidate: EnclaveIdentity,
        horizontal: Callable[[str], EnclaveIdentity | None],
    ) -> tuple[bool, str]:
        """Leader-side admission gate; on success an ADMIT entry is proposed.

        ``horizontal`` returns a current member's enclave so the leader can
        gather same-challenge quotes across vendors.
        """
        if self.role is not Role.LEADER:
            return False, "not-leader"
        pid = candidate.platform_id
        if pid in self.membership.members or pid in self.membership.excluded:
            return False, "duplicate-member"
        if not self.options.skip_attestation:
            try:
                mutual_attest(self.identity, candidate, self.cluster_measurement, self.trusted, self.rng)
            except HandshakeFailed as exc:
                return False, f"{FAILED_ATTESTATION}:{exc.reason}"
        vendors = self.membership.vendors() | {candidate.vendor}
        if len(vendors) >= 2 and not (self.options.skip_cross_vendor or self.options.skip_attestation):
            challenge = self.rng.read(16)
            witnesses = [candidate]
            for vendor in sorted(vendors - {candidate.vendor}):
                for member_id in self.member_order:
                    if self.membership.members[member_id].vendor == vendor:
                        ident = horizontal(member_id)
                        if ident is not None:
                            witnesses.append(ident)
                            break
            quotes = [generate_quote(w, w.compute_report(challenge), challenge) for w in witnesses]
            try:
                cross_vendor_validate(quotes, self.cluster_measurement, self.trusted, challenge)
            except CrossVendorRejected as exc:
                return False, f"{FAILED_ATTESTATION}:{exc.reason}"
        info = MemberInfo(pid, candidate.vendor, candidate.aik_vk)
        self._propose(Command(CommandKind.ADMIT, member=info))
        return True, "proposed"

    # -- reporting -----------------------------------------------------------------------------------

    def log_digests(self) -> list[str]:
        return [e.digest().hex()[:16] for e in self.log]
