"""Command line entry point.

Exit codes: 0 success, 1 domain failure, 2 usage error.  Failures print one
JSON line with a stable ``error_code`` to stderr.  ``--json`` output is
canonical: sorted keys, no insignificant whitespace, lowercase hex.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .attestation import AttestationError, AttestationQuote, Vendor, generate_quote, verify_quote
from .codec import DecodeError, Reader, Writer
from .crypto import Digest, SeededRng, SigningKey, hash_bytes, sign
from .execution import Get, Put, Transaction, make_tx
from .lineage import INGRESS, LineageError, ProvenanceRecord, build_bundle, ingress_statement, trace_lineage, verify_provenance
from .mpt_ledger import SnapshotRejected, Trie, read_snapshot, verify_snapshot, write_snapshot
from .sharding import PRODUCTION_MODULUS, Shard, ShardedSecret, ShardingError, reconstruct, rotate, split
from .simnet import (
    CATALOG,
    SCENARIO_IDS,
    ConfigError,
    SimConfig,
    Trace,
    TraceError,
    build_cluster,
    check,
    check_safety,
    parse_config,
    replay,
    run,
)
from .simnet import config as config_module

KEYFILE_MAGIC = b"HCKS"
KEYFILE_VERSION = 1


class Failure(Exception):
    """Domain failure: exit code 1 and a JSON error line."""

    def __init__(self, code: str, message: str = "", **extra) -> None:
        super().__init__(message or code)
        self.code = code
        self.extra = extra


class UsageError(Exception):
    pass


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# -- parsing helpers ------------------------------------------------------------------


def _hex(text: str) -> bytes:
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not hex: {text!r}") from None


def _digest(text: str) -> Digest:
    try:
        return Digest.fromhex(text)
    except (ValueError, DecodeError):
        raise argparse.ArgumentTypeError(f"not a digest: {text!r}") from None


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise Failure("io-error", f"{path}: {exc.strerror}") from None


def _write(path: str | Path, data: bytes | str) -> None:
    p = Path(path)
    try:
        if isinstance(data, str):
            p.write_text(data)
        else:
            p.write_bytes(data)
    except OSError as exc:
        raise Failure("io-error", f"{path}: {exc.strerror}") from None


def _load_config(args) -> SimConfig:
    text = _read(args.config).decode("utf-8", "replace") if args.config else ""
    cfg = parse_config(text)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "scenario", None):
        overrides["scenario"] = args.scenario
    if getattr(args, "mutation", False):
        overrides["mutation"] = True
    return replace(cfg, **overrides) if overrides else cfg


_SUMMARY_KEYS = ("nodes", "honest", "committed_log", "exclusions")


def _load_trace(path: str) -> Trace:
    trace = Trace.loads(_read(path).decode("utf-8", "replace"))
    if not isinstance(trace.header.get("config"), dict) or any(k not in trace.summary for k in _SUMMARY_KEYS):
        raise TraceError("trace header or summary is incomplete")
    return trace


def _load_trie(args) -> Trie:
    if getattr(args, "snapshot", None):
        return read_snapshot(_read(args.snapshot))
    if getattr(args, "trace", None):
        return replay(_load_trace(args.trace)).trie
    raise UsageError("give --snapshot or --trace")


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


# -- key files ---------------------------------------------------------------------------


def encode_keyfile(meta: ShardedSecret, shard: Shard) -> bytes:
    return Writer().raw(KEYFILE_MAGIC).u8(KEYFILE_VERSION).blob(meta.encode()).blob(shard.encode()).getvalue()


def decode_keyfile(data: bytes) -> tuple[ShardedSecret, Shard]:
    r = Reader(data)
    r.magic(KEYFILE_MAGIC)
    if r.u8() != KEYFILE_VERSION:
        raise DecodeError("unsupported shard file version")
    meta, shard = ShardedSecret.decode(r.blob()), Shard.decode(r.blob())
    r.done()
    return meta, shard


def _load_shards(paths: list[str]) -> tuple[ShardedSecret, list[Shard]]:
    metas, shards = [], []
    for p in paths:
        meta, shard = decode_keyfile(_read(p))
        metas.append(meta)
        shards.append(shard)
    if len({m.encode() for m in metas}) > 1:
        epochs = sorted({m.epoch for m in metas})
        code = "mixed-epoch" if len(epochs) > 1 else "inconsistent-shards"
        raise Failure(code, "shard files come from different sharings")
    return metas[0], shards


def _emit_shards(meta: ShardedSecret, shards: list[Shard], out: str) -> dict:
    directory = Path(out)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise Failure("io-error", f"{out}: {exc.strerror}") from None
    files = []
    for s in shards:
        path = directory / f"shard-e{meta.epoch}-{s.index}.bin"
        _write(path, encode_keyfile(meta, s))
        files.append(str(path))
    return {
        "n": meta.n, "k": meta.k, "epoch": meta.epoch, "field_modulus": meta.field_modulus,
        "files": files, "shards": [s.encode().hex() for s in shards],
    }


# -- commands ----------------------------------------------------------------------------


def cmd_simnet_run(args) -> dict:
    cfg = _load_config(args)
    trace = run(cfg)
    text = trace.dumps()
    out = {"events": len(trace.events), "roots": sorted(set(n["root"] for n in trace.summary["nodes"].values()))}
    out.update(seed=cfg.seed, scenario=cfg.scenario, mutation=cfg.mutation, committed=len(trace.summary["committed_log"]))
    if args.out:
        _write(args.out, text)
        out["trace"] = args.out
        return out
    sys.stdout.write(text)
    return None


def cmd_simnet_check(args) -> dict:
    trace = _load_trace(args.trace)
    rep = replay(trace)
    if args.scenario:
        verdict = check(trace, args.scenario, rep)
        if not verdict.mitigated:
            raise Failure("violated", verdict.detail, **verdict.to_json())
        return verdict.to_json()
    safety = check_safety(trace)
    out = {
        "leaders_per_term": safety.leaders_per_term_ok, "log_matching": safety.log_matching_ok,
        "roots_agree": safety.roots_agree, "spurious_exclusions": list(safety.spurious_exclusions),
        "replay_matches": rep.ok,
    }
    if not (safety.ok and rep.ok):
        raise Failure("unsafe", safety.detail or "replay mismatch", **out)
    return {"verdict": "safe", **out}


def cmd_ledger_verify(args) -> dict:
    data = _read(args.snapshot)
    try:
        trie = verify_snapshot(data, args.root)
    except SnapshotRejected as exc:
        raise Failure(exc.reason, str(exc), reason=exc.reason, verdict="reject") from None
    return {"verdict": "accept", "root": args.root.hex(), "entries": len(list(trie.items(b"")))}


def cmd_ledger_snapshot(args) -> dict:
    trace = _load_trace(args.trace)
    rep = replay(trace)
    if not args.out:
        raise UsageError("--out is required")
    _write(args.out, write_snapshot(rep.trie))
    return {"root": rep.trie.root_hash().hex(), "block": len(rep.roots) - 1, "snapshot": args.out}


def cmd_lineage_list(args) -> dict:
    trie = _load_trie(args)
    records = [ProvenanceRecord.decode(raw) for _, raw in trie.items(b"prov/")]
    records.sort(key=lambda r: (r.block_index, r.logical_time, r.data_id.data))
    return {"root": trie.root_hash().hex(), "data": [
        {"data_id": r.data_id.hex(), "origin": "ingress" if r.origin == INGRESS else "derived", "block": r.block_index}
        for r in records
    ]}


def cmd_lineage_trace(args) -> dict:
    trie = _load_trie(args)
    graph = trace_lineage(trie, args.data_id)
    return json.loads(graph.to_json())


def cmd_lineage_bundle(args) -> dict:
    trie = _load_trie(args)
    if not args.out:
        raise UsageError("--out is required")
    bundle = build_bundle(trie, args.data_id)
    _write(args.out, bundle.encode())
    return {"bundle": args.out, "root": trie.root_hash().hex(), "records": len(bundle.records), "proofs": len(bundle.proofs)}


def cmd_lineage_verify(args) -> dict:
    verdict = verify_provenance(args.data_id, args.root, _read(args.bundle))
    if not verdict:
        raise Failure(verdict.reason, verdict.record, **verdict.to_json())
    return verdict.to_json()


def _vendors(text: str) -> list[Vendor]:
    try:
        return [Vendor.parse(v.strip()) for v in text.split(",") if v.strip()]
    except (ValueError, KeyError):
        raise argparse.ArgumentTypeError(f"bad vendor list {text!r}") from None


def cmd_attest_quote(args) -> dict:
    setup = build_cluster(SimConfig(seed=_seed(args)))
    identity = setup.identities.get(args.platform)
    if identity is None:
        raise Failure("unknown-platform", args.platform)
    if len(args.nonce) != 16:
        raise UsageError("--nonce must be 16 octets")
    quote = generate_quote(identity, args.report, args.nonce)
    if not args.out:
        raise UsageError("--out is required")
    _write(args.out, quote.encode())
    return {
        "quote": args.out, "platform": identity.platform_id, "vendor": identity.vendor.label,
        "measurement": quote.measurement.hex(), "nonce": args.nonce.hex(),
    }


def cmd_attest_verify(args) -> dict:
    try:
        quote = AttestationQuote.decode(_read(args.quote))
    except DecodeError as exc:
        raise Failure("malformed", str(exc), verdict="reject", reason="malformed") from None
    setup = build_cluster(SimConfig(seed=_seed(args)))
    allowed = set(args.vendors) if args.vendors else set(setup.trusted)
    trusted = {v: k for v, k in setup.trusted.items() if v in allowed}
    nonce = args.nonce if args.nonce is not None else quote.freshness_nonce
    try:
        verify_quote(quote, args.measurement, trusted, nonce)
    except AttestationError as exc:
        raise Failure(exc.reason, exc.detail, verdict="reject", reason=exc.reason) from None
    return {
        "verdict": "accept", "platform": quote.platform_id, "vendor": quote.vendor.label,
        "freshness": "checked" if args.nonce is not None else "unchecked",
    }


def cmd_keys_split(args) -> dict:
    meta, shards = split(args.secret_hex, args.n, args.k, SeededRng.from_int(_seed(args)).fork("keys"), args.modulus)
    return _emit_shards(meta, shards, args.out or ".")


def cmd_keys_reconstruct(args) -> dict:
    meta, shards = _load_shards(args.files)
    return {"secret": reconstruct(shards, meta).hex()}


def cmd_keys_rotate(args) -> dict:
    meta, shards = _load_shards(args.files)
    new_meta, new_shards = rotate(shards, meta, SeededRng.from_int(_seed(args)).fork(f"rotate/{meta.epoch}"))
    return _emit_shards(new_meta, new_shards, args.out or ".")


def cmd_tx_build(args) -> dict:
    rng = SeededRng.from_int(_seed(args)).fork("cli-client")
    client = SigningKey.generate(rng)
    if args.op == "put":
        setup = build_cluster(_load_config(args))
        source = setup.sources.get(args.label)
        if source is None:
            raise Failure("unknown-source", args.label)
        payload = args.payload_hex
        op = Put(args.label, payload, source.verify_key, sign(source, ingress_statement(hash_bytes(payload), args.label)))
    else:
        op = Get(args.key_hex)
    tx = make_tx(client, op, args.nonce)
    if not args.out:
        raise UsageError("--out is required")
    _write(args.out, tx.encode())
    return {"tx_id": tx.tx_id.hex(), "file": args.out}


def cmd_tx_submit(args) -> dict:
    raw = _read(args.file)
    try:
        tx = Transaction.decode(raw)
    except DecodeError as exc:
        raise Failure("malformed", str(exc)) from None
    cfg = _load_config(args)
    trace = run(cfg, [(args.at, raw)])
    if not args.out:
        raise UsageError("--out is required")
    _write(args.out, trace.dumps())
    rep = replay(trace)
    result = rep.results.get(tx.tx_id.hex())
    return {"tx_id": tx.tx_id.hex(), "trace": args.out, "committed": result is not None}


def cmd_tx_result(args) -> dict:
    rep = replay(_load_trace(args.trace))
    result = rep.results.get(args.id.hex())
    if result is None:
        raise Failure("tx-not-found", args.id.hex())
    return result.to_json()


# -- parser ------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_help(sys.stderr)
        sys.stderr.write(canonical({"error_code": "usage", "message": message}) + "\n")
        raise SystemExit(2)


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="master seed")
    parser.add_argument("--json", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="canonical JSON output")
    parser.add_argument("--out", default=default, help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="honestcomp", description="Attested enclave cluster simulator and audit tools.")
    parser.add_argument("--version", action="version", version=__version__)
    _globals(parser, suppress=False)
    groups = parser.add_subparsers(dest="group", metavar="command", parser_class=_Parser)
    groups.required = True

    def leaf(sub, name: str, fn, help: str, **kw):
        p = sub.add_parser(name, help=help, description=help, **kw)
        _globals(p, suppress=True)
        p.set_defaults(fn=fn, parser=p)
        return p

    def group(name: str, help: str):
        g = groups.add_parser(name, help=help, description=help)
        sub = g.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
        sub.required = True
        return sub

    sim = group("simnet", "run and check simulations")
    p = leaf(sim, "run", cmd_simnet_run, "run one simulation and write its trace",
             epilog=config_module.__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="flat key = value config file (keys below)")
    p.add_argument("--scenario", choices=SCENARIO_IDS, help="override the config's scenario")
    p.add_argument("--mutation", action="store_true", help="disable the scenario's mitigation")
    p = leaf(sim, "check", cmd_simnet_check, "evaluate a trace; without --scenario checks Raft safety")
    p.add_argument("--trace", required=True)
    p.add_argument("--scenario", choices=sorted(CATALOG))

    led = group("ledger", "ledger snapshots")
    p = leaf(led, "verify", cmd_ledger_verify, "check a snapshot against an expected root")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--root", required=True, type=_digest)
    p = leaf(led, "snapshot", cmd_ledger_snapshot, "replay a trace and write the final ledger snapshot")
    p.add_argument("--trace", required=True)

    lin = group("lineage", "provenance queries and offline audit")
    for name, fn, text in (
        ("list", cmd_lineage_list, "list provenance records"),
        ("trace", cmd_lineage_trace, "lineage graph of a datum"),
        ("bundle", cmd_lineage_bundle, "write an offline audit bundle"),
    ):
        p = leaf(lin, name, fn, text)
        p.add_argument("--snapshot", help="ledger snapshot file")
        p.add_argument("--trace", help="trace to replay instead of a snapshot")
        if name != "list":
            p.add_argument("--data-id", required=True, type=_digest)
    p = leaf(lin, "verify", cmd_lineage_verify, "verify a bundle against a trusted root")
    p.add_argument("--data-id", required=True, type=_digest)
    p.add_argument("--root", required=True, type=_digest)
    p.add_argument("--bundle", required=True)

    att = group("attest", "attestation quotes")
    p = leaf(att, "quote", cmd_attest_quote, "produce a quote from a simulated platform of the --seed cluster")
    p.add_argument("--platform", default="n1")
    p.add_argument("--nonce", required=True, type=_hex, help="16-octet freshness nonce")
    p.add_argument("--report", default=b"", type=_hex, help="report data to bind")
    p = leaf(att, "verify", cmd_attest_verify, "verify a quote against the --seed cluster's vendor roots")
    p.add_argument("--quote", required=True)
    p.add_argument("--measurement", required=True, type=_digest)
    p.add_argument("--vendors", type=_vendors, help="accepted vendors, e.g. A,B")
    p.add_argument("--nonce", type=_hex, help="expected freshness nonce")

    keys = group("keys", "threshold key ceremonies")
    p = leaf(keys, "split", cmd_keys_split, "split a secret into shard files under --out")
    p.add_argument("--secret-hex", required=True, type=_hex)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--k", required=True, type=int)
    p.add_argument("--modulus", type=int, default=PRODUCTION_MODULUS, help="prime field modulus")
    p = leaf(keys, "reconstruct", cmd_keys_reconstruct, "recover the secret from shard files")
    p.add_argument("files", nargs="+")
    p = leaf(keys, "rotate", cmd_keys_rotate, "refresh all n shard files into a new epoch")
    p.add_argument("files", nargs="+")

    tx = group("tx", "client transactions")
    p = leaf(tx, "build", cmd_tx_build, "build and sign a transaction file")
    p.add_argument("--op", choices=("put", "get"), required=True)
    p.add_argument("--label", default="sensor-a", help="registered source label (put)")
    p.add_argument("--payload-hex", type=_hex, default=b"", help="payload (put)")
    p.add_argument("--key-hex", type=_hex, default=b"", help="ledger key (get)")
    p.add_argument("--nonce", type=int, default=1)
    p.add_argument("--config", help="simulation config whose sources sign ingress")
    p = leaf(tx, "submit", cmd_tx_submit, "run a simulation with the transaction submitted at --at")
    p.add_argument("--file", required=True)
    p.add_argument("--config")
    p.add_argument("--at", type=int, default=1000, help="submission tick")
    p = leaf(tx, "result", cmd_tx_result, "look up a transaction result in a trace")
    p.add_argument("--id", required=True, type=_digest)
    p.add_argument("--trace", required=True)
    return parser


def _scalar(value) -> str:
    return json.dumps(value) if isinstance(value, bool) or value is None else str(value)


def _human(obj, indent: str = "") -> str:
    lines = []
    for key in sorted(obj):
        value = obj[key]
        if isinstance(value, dict):
            lines.append(f"{indent}{key}:")
            lines.append(_human(value, indent + "  "))
        elif isinstance(value, list):
            lines.append(f"{indent}{key}:")
            for item in value:
                lines.append(f"{indent}  - " + (canonical(item) if isinstance(item, (dict, list)) else _scalar(item)))
        else:
            lines.append(f"{indent}{key}: {_scalar(value)}")
    return "\n".join(lines)


_DOMAIN_ERRORS = (ConfigError, TraceError, DecodeError, ShardingError, LineageError, AttestationError, SnapshotRejected)


def _error_code(exc: Exception) -> str:
    if isinstance(exc, DecodeError):
        return "malformed"
    return getattr(exc, "reason", None) or getattr(exc, "code", None) or "error"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out = args.fn(args)
    except UsageError as exc:
        args.parser.error(str(exc))
    except Failure as exc:
        sys.stderr.write(canonical({**exc.extra, "error_code": exc.code, "message": str(exc)}) + "\n")
        return 1
    except _DOMAIN_ERRORS as exc:
        sys.stderr.write(canonical({"error_code": _error_code(exc), "message": str(exc)}) + "\n")
        return 1
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        sys.stderr.write(canonical({"error_code": "malformed-input", "message": f"{type(exc).__name__}: {exc}"}) + "\n")
        return 1
    if out is None:
        return 0
    if args.json:
        sys.stdout.write(canonical(out) + "\n")
    elif list(out) == ["secret"]:
        sys.stdout.write(out["secret"] + "\n")
    else:
        sys.stdout.write(_human(out) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
