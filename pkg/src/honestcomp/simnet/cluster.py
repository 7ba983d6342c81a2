"""Deterministic cluster construction from a :class:`SimConfig`.

Everything here is a pure function of the config, which is what lets a
trace be replayed from genesis with nothing but its header.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

from ..attestation import CodeManifest, EnclaveIdentity, Vendor, VendorRoot, trust_store
from ..crypto import AeadKey, SeededRng, SigningKey
from ..execution import (
    CONCAT_PROGRAM,
    DIGEST_PROGRAM,
    IDENTITY_PROGRAM,
    Engine,
    Policy,
    genesis_trie,
)
from ..mpt_ledger import BlobStore, Trie
from ..state import MemberInfo
from .config import SimConfig

NODE_CODE = b"honestcomp-node/1"
APP_CODE = b"honestcomp-app/1"
TAMPERED_CODE = b"honestcomp-node/1+implant"
TAMPERED_APP_CODE = b"honestcomp-app/1+implant"
CANDIDATE_ID = "x1"


@dataclass
class ClusterSetup:
    config: SimConfig
    roots: dict[Vendor, VendorRoot]
    trusted: dict
    author: SigningKey
    node_manifest: CodeManifest
    app_manifest: CodeManifest
    programs: dict[str, CodeManifest]
    sources: dict[str, SigningKey]
    identities: dict[str, EnclaveIdentity]
    app_identities: dict[str, EnclaveIdentity]
    sealing_keys: dict[str, AeadKey]
    secret: bytes
    genesis: Trie

    @property
    def measurement(self):
        return self.node_manifest.measurement

    def policy(self) -> Policy:
        cfg = self.config
        return Policy(check_client_signature=not (cfg.scenario == "S1" and cfg.mutation))

    def engine(self) -> Engine:
        return Engine(self.secret, self.measurement, BlobStore(), self.policy())

    def candidate(self, rng: SeededRng) -> tuple[EnclaveIdentity, bool]:
        """The platform trying to join in S2/E2; returns (identity, runs compromised code)."""
        cfg = self.config
        if cfg.scenario == "S2":
            # honest hardware running tampered code: its quote reports the wrong measurement
            bad = CodeManifest.create("honestcomp-node", "1+implant", TAMPERED_CODE, self.author)
            root = self.roots[Vendor.parse(cfg.vendors[0])]
            return EnclaveIdentity.create(CANDIDATE_ID, root, bad, rng), True
        # E2: a compromised vendor quotes the expected measurement over tampered code
        root = self.roots[Vendor.parse(cfg.vendors[-1])]
        ident = EnclaveIdentity.create(CANDIDATE_ID, root, self.node_manifest, rng)
        tampered = CodeManifest.create("honestcomp-node", "1+implant", TAMPERED_CODE, self.author)
        return replace(ident, code_digest=tampered.code_digest), True

    def tampered_app(self, platform_id: str, rng: SeededRng) -> EnclaveIdentity:
        manifest = CodeManifest.create("honestcomp-app", "1+implant", TAMPERED_APP_CODE, self.author)
        vendor = self.identities[platform_id].vendor
        return EnclaveIdentity.create(f"{platform_id}/app", self.roots[vendor], manifest, rng)


def build_cluster(config: SimConfig) -> ClusterSetup:
    rng = SeededRng.from_int(config.seed)
    vendors = sorted({Vendor.parse(v) for v in config.vendors})
    roots = {v: VendorRoot.generate(v, rng.fork(f"vendor/{v.name}")) for v in vendors}
    setup_rng = rng.fork("setup")
    author = SigningKey.generate(setup_rng)
    node_manifest = CodeManifest.create("honestcomp-node", "1", NODE_CODE, author)
    app_manifest = CodeManifest.create("honestcomp-app", "1", APP_CODE, author)
    programs = {
        name: CodeManifest.create(name, "1", code, author)
        for name, code in (("identity", IDENTITY_PROGRAM), ("concat", CONCAT_PROGRAM), ("digest", DIGEST_PROGRAM))
    }
    sources = {label: SigningKey.generate(setup_rng) for label in ("sensor-a", "sensor-b")}
    identities, apps, sealing = {}, {}, {}
    for pid, vendor in zip(config.platform_ids, config.vendors):
        root = roots[Vendor.parse(vendor)]
        rate = Fraction(1)
        if config.scenario == "T3" and pid == config.target:
            rate = Fraction(config.drift).limit_denominator(1000)
        identities[pid] = EnclaveIdentity.create(pid, root, node_manifest, rng.fork(f"identity/{pid}"), rate)
        apps[pid] = EnclaveIdentity.create(f"{pid}/app", root, app_manifest, rng.fork(f"app/{pid}"))
        sealing[pid] = AeadKey.derive(b"platform-seal", rng.fork(f"seal/{pid}").read(32))
    secret = rng.fork("cluster-secret").read(32)
    members = [MemberInfo(pid, identities[pid].vendor, identities[pid].aik_vk) for pid in config.platform_ids]
    genesis = genesis_trie(
        members,
        [node_manifest, app_manifest, *programs.values()],
        [IDENTITY_PROGRAM, CONCAT_PROGRAM, DIGEST_PROGRAM],
        {label: key.verify_key for label, key in sources.items()},
    )
    return ClusterSetup(
        config, roots, trust_store(roots.values()), author, node_manifest, app_manifest, programs,
        sources, identities, apps, sealing, secret, genesis,
    )
