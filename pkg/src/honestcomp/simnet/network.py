"""The discrete-event loop, the link model, the workload client and the adversaries."""

from __future__ import annotations

import heapq
from dataclasses import replace
from typing import Callable, Sequence

from ..attestation import HandshakeFailed, mutual_attest
from ..channel import (
    ChannelClient,
    Envelope,
    InterceptingProxy,
    LayeredSession,
    Platform,
    open_at_app,
    open_at_runtime,
    open_response,
    runtime_attempt_inner,
    seal_request,
    seal_response,
)
from ..codec import DecodeError, Reader, Writer
from ..consensus import LogEntry, NodeOptions, RaftNode, Role
from ..crypto import AeadKey, AuthenticationError, Digest, KeyShare, SeededRng, SigningKey, aead_open, hash_bytes, sign
from ..execution import (
    Approve,
    Engine,
    Get,
    Grant,
    Propose,
    Put,
    Revoke,
    Run,
    Transaction,
    TxResult,
    approve_statement,
    make_tx,
)
from ..lineage import ingress_statement
from ..mpt_ledger import Trie
from ..sharding import Shard, ShardedSecret, ShardingError, reconstruct
from ..state import prov_key
from .cluster import ClusterSetup, build_cluster
from .config import WORKLOAD_STEPS, SimConfig
from .trace import Trace

_PPM = 1_000_000
RETRY = 50


def _chance(rng: SeededRng, p: float) -> bool:
    return p > 0 and rng.randbelow(_PPM) < round(p * _PPM)


class WorkloadClient:
    """Scripted client driving a fixed transaction mix through the layered channel."""

    def __init__(self, sim: "Simulation", rng: SeededRng) -> None:
        self.sim = sim
        setup = sim.setup
        self.key = SigningKey.generate(rng)
        self.approvers = [SigningKey.generate(rng) for _ in range(3)]
        self.grantee = SigningKey.generate(rng)
        self.grantee_share = KeyShare.generate(rng)
        self.rng = rng
        self.nonce = 0
        self.outputs: dict[str, bytes] = {}
        self.results: dict[str, TxResult] = {}
        self.pending: dict[Digest, str] = {}
        mutated = sim.config.mutation
        scenario = sim.config.scenario
        self.layered = not (scenario == "I4" and mutated)
        self.channel = ChannelClient(
            setup.trusted,
            setup.measurement,
            setup.app_manifest.measurement,
            rng.fork("channel"),
            check_outer_binding=not (scenario == "I1" and mutated),
            check_inner_measurement=not (scenario == "I3" and mutated),
            layered=self.layered,
        )
        self.session: LayeredSession | None = None
        self.route: Callable[[Envelope], None] | None = None

    def connect(self, platform: Platform, via: str, relay: InterceptingProxy | None = None) -> bool:
        hello = self.channel.hello()
        server = relay.relay(hello) if relay else platform.accept(hello)
        try:
            session = self.channel.finish(server, platform.app_id)
        except HandshakeFailed as exc:
            self.sim.emit("client", "handshake_failed", {"via": via, "layer": exc.reason, "detail": exc.detail})
            return False
        self.session = session
        app_m = session.quotes[1].measurement.hex()
        self.sim.emit("client", "session_established", {"via": via, "app_measurement": app_m, "layered": self.layered})
        if relay is None:
            self.route = lambda env: self.sim.gateway_receive(platform, env)
        else:
            def through_proxy(env: Envelope) -> None:
                if relay.read_outer(env) is not None:
                    self.sim.emit("adversary", "outer_read_by_proxy", {"session": env.session_id.hex()})
                forwarded = relay.forward(env)
                if forwarded is not None:
                    self.sim.gateway_receive(platform, forwarded)
            self.route = through_proxy
        self.platform = platform
        return True

    def build(self, step: str):
        setup, out = self.sim.setup, self.outputs
        progs = setup.programs

        def ingress(label: str, payload: bytes) -> Put:
            src = setup.sources[label]
            return Put(label, payload, src.verify_key, sign(src, ingress_statement(hash_bytes(payload), label)))

        def did(name: str) -> Digest | None:
            raw = out.get(name)
            return Digest(hash_bytes(b"").algorithm_id, raw) if raw else None

        if step == "put-a":
            return ingress("sensor-a", b"reading-0:21.5C")
        if step == "put-b":
            return ingress("sensor-b", b"reading-1:48%RH")
        if step == "put-a2":
            return ingress("sensor-a", b"reading-3:22.1C")
        if step == "run-concat":
            d = did("put-a")
            return d and Run(progs["concat"].measurement, (d,), b"|calibrated")
        if step == "run-digest":
            d = did("put-a2")
            return d and Run(progs["digest"].measurement, (d,))
        if step == "run-identity":
            d = did("put-b")
            return d and Run(progs["identity"].measurement, (d,))
        if step == "propose":
            return Propose(b"release:batch-1", tuple(a.verify_key for a in self.approvers), 2)
        if step in ("approve-1", "approve-2"):
            aid = did("propose")
            if aid is None:
                return None
            approver = self.approvers[int(step[-1]) - 1]
            return Approve(aid, approver.verify_key, sign(approver, approve_statement(aid)))
        if step == "grant":
            d = did("run-concat")
            return d and Grant(d, self.grantee.verify_key, self.grantee_share.public)
        if step == "get":
            d = did("run-concat")
            return d and Get(prov_key(d))
        if step == "revoke":
            d = did("run-concat")
            return d and "grant" in out and Revoke(d, self.grantee.verify_key.fingerprint)
        raise ValueError(step)

    def step(self, step: str) -> None:
        op = self.build(step)
        if not op or self.session is None:
            self.sim.after(RETRY, lambda: self.step(step))
            return
        self.nonce += 1
        tx = make_tx(self.key, op, self.nonce)
        self.pending[tx.tx_id] = step
        self.sim.emit("client", "tx_submitted", {"step": step, "tx_id": tx.tx_id.hex()})
        self.send(tx)

    def send(self, tx: Transaction) -> None:
        self.route(seal_request(self.session, tx.encode()))

    def poll(self) -> None:
        gateway = self.sim.nodes.get(self.sim.config.gateway)
        for tx_id in sorted(self.pending, key=lambda d: d.data):
            result = gateway.results.get(tx_id) if gateway and gateway.alive else None
            if result is None:
                continue
            step = self.pending.pop(tx_id)
            try:
                sid = self.session.session_id
                reply = open_response(self.session, seal_response(self.platform.app.keyset, sid, result.encode()))
            except (AuthenticationError, KeyError):
                reply = None
            if reply != result.encode():
                self.sim.emit("client", "response_rejected", {"step": step})
                continue
            self.results[step] = result
            if result.ok:
                self.outputs[step] = result.output
            self.sim.emit("client", "tx_result", {"step": step, **result.to_json()})
        if self.pending or len(self.results) < self.sim.config.workload:
            self.sim.after(RETRY, self.poll)


class Simulation:
    """Host for one run: implements the consensus host interface."""

    def __init__(self, config: SimConfig, injected: Sequence[tuple[int, bytes]] = ()) -> None:
        cfg = config
        self.injected = [(int(at), bytes(raw)) for at, raw in injected]
        if cfg.scenario == "T2" and cfg.mutation:
            cfg = replace(cfg, domains=tuple(cfg.destroy_domain for _ in cfg.platform_ids))
        self.config = cfg
        self.setup: ClusterSetup = build_cluster(cfg)
        root = SeededRng.from_int(cfg.seed).fork("sim")
        self.net_rng = root.fork("net")
        self.corrupt_rng = root.fork("corrupt")
        self.rng = root
        self.now = 0
        self._queue: list = []
        self._seq = 0
        self.events: list[dict] = []
        self.dead: set[str] = set()
        self.destroyed_at: int | None = None
        self.nodes: dict[str, RaftNode] = {}
        self.candidate_id: str | None = None
        self.candidate_compromised = False
        self.attack_tx: Digest | None = None
        self._linked: set[str] = set()

        timing = cfg.timing
        if cfg.mutation and cfg.scenario == "T3":
            timing = replace(timing, drift_threshold=float("inf"))
        if cfg.mutation and cfg.scenario == "D1":
            timing = replace(timing, comm_threshold=float("inf"))
        self.timing = timing
        self.options = NodeOptions(
            skip_attestation=cfg.mutation and cfg.scenario == "S2",
            skip_cross_vendor=cfg.mutation and cfg.scenario == "E2",
            seal_full_secret=cfg.mutation and cfg.scenario == "E1",
        )
        s = self.setup
        for pid in cfg.platform_ids:
            self.nodes[pid] = self._make_node(s.identities[pid], s.sealing_keys[pid])
        pids = cfg.platform_ids
        for i, a in enumerate(pids):
            for b in pids[i + 1:]:
                ta, tb = mutual_attest(s.identities[a], s.identities[b], s.measurement, s.trusted, root.fork(f"iff/{a}/{b}"))
                self.nodes[a].add_peer(b, ta.channel_key)
                self.nodes[b].add_peer(a, tb.channel_key)
        self.domains = dict(zip(pids, cfg.domains))

    def _make_node(self, identity, sealing_key: AeadKey) -> RaftNode:
        s = self.setup
        pid = identity.platform_id
        return RaftNode(
            identity, s.genesis, s.engine(), s.secret, s.measurement, s.trusted, self.timing, self,
            self.rng.fork(f"node/{pid}"), sealing_key, self.options,
        )

    # -- host interface --------------------------------------------------------------

    def _push(self, at: int, fn: Callable, *args) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, fn, args))

    def after(self, delay: int, fn: Callable, *args) -> None:
        self._push(self.now + delay, fn, *args)

    def send(self, src: str, dst: str, frame: bytes) -> None:
        if src in self.dead or _chance(self.net_rng, self.config.drop_rate):
            return
        delay = self.net_rng.randint(self.config.delay_min, self.config.delay_max)
        self._push(self.now + delay, self._deliver, src, dst, frame)

    def _deliver(self, src: str, dst: str, frame: bytes) -> None:
        cfg = self.config
        if dst in self.dead:
            return
        if cfg.partition is not None and cfg.partition.separates(src, dst, self.now):
            return
        if cfg.scenario == "D1" and cfg.target in (src, dst) and _chance(self.corrupt_rng, cfg.corruption):
            bit = self.corrupt_rng.randbelow(len(frame) * 8)
            frame = bytearray(frame)
            frame[bit // 8] ^= 1 << (bit % 8)
            frame = bytes(frame)
        node = self.nodes.get(dst)
        if node is not None:
            node.on_frame(src, frame)

    def schedule(self, node: str, at: int, kind: str, token: int) -> None:
        self._push(at, self._timer, node, kind, token)

    def _timer(self, node: str, kind: str, token: int) -> None:
        if node not in self.dead:
            self.nodes[node].on_timer(kind, token)

    def emit(self, node: str, event: str, detail: dict) -> None:
        n = self.nodes.get(node)
        self.events.append(
            {
                "seq": len(self.events),
                "tick": self.now,
                "node": node,
                "event": event,
                "term": n.term if n else 0,
                "role": n.role.value if n else "-",
                "commit_index": n.commit_index if n else 0,
                "detail": detail,
            }
        )
        if event == "member_admitted" and detail["platform_id"] == self.candidate_id:
            self._link_candidate()

    # -- channel ingress ------------------------------------------------------------------

    def gateway_receive(self, platform: Platform, env: Envelope) -> None:
        gateway = self.nodes[self.config.gateway]
        if self.config.gateway in self.dead:
            return
        try:
            routing, inner = open_at_runtime(platform.runtime.keyset, env.encode())
        except AuthenticationError as exc:
            self.emit(self.config.gateway, "request_rejected", {"layer": "outer", "reason": str(exc)[:60]})
            return
        if runtime_attempt_inner(platform.runtime.keyset, routing, inner) is not None:
            self.emit(self.config.gateway, "runtime_read_payload", {"session": routing.session_id.hex()})
        try:
            payload = open_at_app(platform.app.keyset, routing, inner)
        except AuthenticationError as exc:
            self.emit(self.config.gateway, "request_rejected", {"layer": "inner", "reason": str(exc)[:60]})
            return
        if platform is not self.platform:
            self.emit(self.config.gateway, "tampered_app_request", {"session": routing.session_id.hex()})
        gateway.submit(payload)

    # -- scenario actions --------------------------------------------------------------------

    def _leader(self) -> RaftNode | None:
        leaders = [n for pid, n in sorted(self.nodes.items()) if n.role is Role.LEADER and pid not in self.dead]
        return max(leaders, key=lambda n: n.term) if leaders else None

    def _attack(self) -> None:
        cfg, s = self.config, self.setup
        if cfg.scenario == "S1":
            forger = SigningKey.generate(self.rng.fork("forger"))
            payload = b"reading-x:99.9C"
            src = s.sources["sensor-a"]
            op = Put("sensor-a", payload, src.verify_key, sign(forger, ingress_statement(hash_bytes(payload), "sensor-a")))
            tx = make_tx(forger, op, 1)
            self.attack_tx = tx.tx_id
            self.emit("adversary", "false_ingress", {"tx_id": tx.tx_id.hex(), "label": "sensor-a"})
            self.client.send(tx)
        elif cfg.scenario == "I1":
            proxy = InterceptingProxy(self.platform, self.rng.fork("proxy"))
            self.emit("adversary", "proxy_inserted", {})
            self.client.connect(self.platform, "proxy", relay=proxy)
        elif cfg.scenario == "I3":
            tampered = s.tampered_app(cfg.gateway, self.rng.fork("tampered-app"))
            platform = Platform(s.identities[cfg.gateway], tampered, self.rng.fork("tampered-platform"), self.client.layered)
            self.emit("adversary", "app_replaced", {"measurement": tampered.measurement.hex()})
            self.client.connect(platform, "tampered-app")
        elif cfg.scenario in ("S2", "E2"):
            self._attempt_admission()

    def _attempt_admission(self) -> None:
        leader = self._leader()
        if leader is None:
            self.after(RETRY, self._attempt_admission)
            return
        if self.candidate_id is None:
            identity, compromised = self.setup.candidate(self.rng.fork("candidate"))
            self.candidate_id = identity.platform_id
            self.candidate_compromised = compromised
            key = AeadKey.derive(b"platform-seal", self.rng.fork("seal/candidate").read(32))
            self.nodes[identity.platform_id] = self._make_node(identity, key)
            self._candidate_identity = identity
        ok, reason = leader.admit_member(self._candidate_identity, lambda pid: self.setup.identities.get(pid))
        self.emit(leader.id, "admission_proposed" if ok else "admission_rejected", {"candidate": self.candidate_id, "reason": reason})

    def _link_candidate(self) -> None:
        """Open transport links to a newly admitted platform (no attestation here)."""
        cid = self.candidate_id
        if cid in self._linked:
            return
        self._linked.add(cid)
        for pid in self.config.platform_ids:
            key = AeadKey.derive(b"late-link", pid.encode(), cid.encode(), self.rng.fork(f"link/{pid}").read(32))
            self.nodes[pid].add_peer(cid, key)
            self.nodes[cid].add_peer(pid, key)
        self.nodes[cid].start()

    def _destroy(self) -> None:
        cfg = self.config
        victims = [pid for pid in cfg.platform_ids if self.domains[pid] == cfg.destroy_domain]
        self.destroyed_at = self.now
        for pid in victims:
            self.dead.add(pid)
            self.nodes[pid].alive = False
        self.emit("adversary", "domain_destroyed", {"domain": cfg.destroy_domain, "nodes": victims})

    def _inject(self, raw: bytes) -> None:
        """Externally built transaction, sent over the client's channel."""
        if self.client.session is None:
            self.after(RETRY, self._inject, raw)
            return
        tx = Transaction.decode(raw)
        self.emit("client", "tx_submitted", {"step": "injected", "tx_id": tx.tx_id.hex()})
        self.client.send(tx)

    # -- run -------------------------------------------------------------------------------

    def run(self) -> Trace:
        cfg, s = self.config, self.setup
        for pid in cfg.platform_ids:
            self.nodes[pid].start()
        self.platform = Platform(
            s.identities[cfg.gateway], s.app_identities[cfg.gateway], self.rng.fork("platform"),
            layered=not (cfg.scenario == "I4" and cfg.mutation),
        )
        self.client = WorkloadClient(self, self.rng.fork("client"))
        self.client.connect(self.platform, "direct")
        for i, step in enumerate(WORKLOAD_STEPS[: cfg.workload]):
            self._push(cfg.workload_start + i * cfg.workload_interval, self.client.step, step)
        if cfg.workload:
            self._push(cfg.workload_start + RETRY, self.client.poll)
        if cfg.scenario in ("S1", "I1", "I3", "S2", "E2"):
            self._push(cfg.attack_tick, self._attack)
        if cfg.scenario == "T2":
            self._push(cfg.destroy_tick, self._destroy)
        for at, raw in self.injected:
            self._push(at, self._inject, raw)
        queue = self._queue
        while queue and queue[0][0] <= cfg.tick_limit:
            at, _, fn, args = heapq.heappop(queue)
            self.now = at
            fn(*args)
        self.now = cfg.tick_limit
        header = {"format": 1, "config": cfg.to_json()}
        if self.injected:
            header["injected"] = [{"tick": at, "tx": raw.hex()} for at, raw in self.injected]
        return Trace(header, self.events, self._summary())

    # -- summary ----------------------------------------------------------------------------

    def _reference(self) -> RaftNode:
        live = [n for pid, n in sorted(self.nodes.items()) if pid != self.candidate_id]
        return max(live, key=lambda n: n.last_applied)

    def _summary(self) -> dict:
        cfg = self.config
        ref = self._reference()
        members = ref.membership
        excluded = {
            pid: {"reason": m.reason, "evidence": m.evidence, "term": m.term}
            for pid, m in sorted(members.excluded.items())
        }
        nodes = {}
        for pid, n in sorted(self.nodes.items()):
            status = "active"
            if pid in self.dead:
                status = "destroyed"
            elif pid in excluded:
                status = "excluded"
            elif pid not in members:
                status = "outsider"
            nodes[pid] = {
                "root": n.trie.root_hash().hex(),
                "last_applied": n.last_applied,
                "commit_index": n.commit_index,
                "term": n.term,
                "role": n.role.value,
                "status": status,
                "log": [[e.term, d] for e, d in zip(n.log, n.log_digests())],
                "history": len(n.history),
                "shard_epoch": n.shard_epoch,
            }
        faulty = {cfg.target} if cfg.scenario in ("T3", "D1") else set()
        honest = [
            pid for pid in cfg.platform_ids
            if pid not in self.dead and pid not in excluded and pid not in faulty
        ]
        summary = {
            "nodes": nodes,
            "honest": honest,
            "committed_log": [_entry_hex(e) for e in ref.log[: ref.last_applied]],
            "exclusions": excluded,
            "members": sorted(members.members),
            "candidate": self.candidate_id,
            "candidate_compromised": self.candidate_compromised,
            "destroyed": sorted(self.dead),
            "destroyed_at": self.destroyed_at,
            "attack_tx": self.attack_tx.hex() if self.attack_tx else None,
            "workload": {k: v.to_json() for k, v in sorted(self.client.results.items())},
        }
        captured = []
        if cfg.scenario == "E1":
            captured = [cfg.target]
        elif cfg.scenario == "T2":
            captured = sorted(self.dead)
        if captured:
            summary["adversary"] = {"captured": captured, "recovered": self._adversary_recover(captured, ref.trie)}
        return summary

    def _adversary_recover(self, captured: list[str], trie: Trie) -> int:
        """Plaintexts an adversary holding the captured platforms' sealing keys can read."""
        shards: dict[int, tuple[ShardedSecret, dict[int, Shard]]] = {}
        secrets: list[bytes] = []
        blobs = []
        for pid in captured:
            node = self.nodes[pid]
            blobs.append(node.engine.blobs)
            for label, ct in sorted(node.at_rest.items()):
                try:
                    plain = aead_open(node.sealing_key, label.encode(), ct)
                except AuthenticationError:
                    continue
                if label == "secret":
                    secrets.append(plain)
                elif label == "shard":
                    r = Reader(plain)
                    shard, meta = Shard.decode(r.blob()), ShardedSecret.decode(r.blob())
                    shards.setdefault(meta.epoch, (meta, {}))[1][shard.index] = shard
        for epoch, (meta, have) in sorted(shards.items()):
            if len(have) >= meta.k:
                try:
                    secrets.append(reconstruct(list(have.values()), meta))
                except ShardingError:
                    pass
        recovered = set()
        for secret in secrets:
            for blob_store in blobs or [None]:
                engine = Engine(secret, self.setup.measurement, blob_store)
                for key, _ in trie.items(b"data/"):
                    data_id = Digest(hash_bytes(b"").algorithm_id, key[len(b"data/"):])
                    try:
                        engine.read_datum(trie, data_id)
                    except (AuthenticationError, DecodeError, ValueError, KeyError):
                        continue
                    recovered.add(key)
        return len(recovered)


def _entry_hex(entry: LogEntry) -> str:
    w = Writer()
    entry.write(w)
    return w.getvalue().hex()


def run(config: SimConfig, injected: Sequence[tuple[int, bytes]] = ()) -> Trace:
    return Simulation(config, injected).run()


__all__ = ["Simulation", "WorkloadClient", "run"]
