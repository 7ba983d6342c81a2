import itertools
import json
import subprocess
import sys

import pytest

from conftest import FIXTURES
from honestcomp.cli import main


def cli(capsys, *argv):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def _json(text):
    lines = text.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[-1])


@pytest.fixture
def t3_trace(tmp_path_factory):
    path = tmp_path_factory.mktemp("trace") / "t.trace"
    assert main(["simnet", "run", "--config", str(FIXTURES / "t3.cfg"), "--out", str(path)]) == 0
    return path


@pytest.fixture
def shards(tmp_path, capsys):
    code, out, _ = cli(capsys, "keys", "split", "--secret-hex", "2a", "--n", 5, "--k", 3, "--seed", 7, "--out", tmp_path, "--json")
    assert code == 0
    return _json(out)["files"]


def test_split_reconstruct_any_three(shards, capsys):
    for subset in itertools.combinations(shards, 3):
        code, out, _ = cli(capsys, "keys", "reconstruct", *subset)
        assert code == 0 and out == "2a\n"


def test_reconstruct_below_threshold(shards, capsys):
    code, _, err = cli(capsys, "keys", "reconstruct", *shards[:2])
    assert code == 1 and _json(err)["error_code"] == "below-threshold"


def test_rotate_then_mix_epochs(shards, tmp_path, capsys):
    out_dir = tmp_path / "e1"
    out_dir.mkdir()
    code, out, _ = cli(capsys, "keys", "rotate", *shards, "--out", out_dir, "--json")
    assert code == 0
    rotated = _json(out)["files"]
    assert cli(capsys, "keys", "reconstruct", *rotated[:3])[1] == "2a\n"
    code, _, err = cli(capsys, "keys", "reconstruct", shards[0], *rotated[1:3])
    assert code == 1 and _json(err)["error_code"] == "mixed-epoch"


def test_split_is_byte_identical(tmp_path, capsys):
    outs = []
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        cli(capsys, "keys", "split", "--secret-hex", "2a", "--n", 5, "--k", 3, "--seed", 7, "--out", tmp_path / d, "--json")
        outs.append([(tmp_path / d / f"shard-e0-{i}.bin").read_bytes() for i in range(1, 6)])
    assert outs[0] == outs[1]


def test_simnet_check_t3(t3_trace, capsys):
    code, out, _ = cli(capsys, "simnet", "check", "--trace", t3_trace, "--scenario", "T3", "--json")
    assert code == 0 and _json(out) == {"scenario": "T3", "verdict": "mitigated"}


def test_simnet_run_mutation_violated(tmp_path, capsys):
    path = tmp_path / "m.trace"
    assert cli(capsys, "simnet", "run", "--config", FIXTURES / "t3.cfg", "--mutation", "--out", path)[0] == 0
    code, _, err = cli(capsys, "simnet", "check", "--trace", path, "--scenario", "T3", "--json")
    assert code == 1 and _json(err)["error_code"] == "violated"


def test_simnet_check_safety(t3_trace, capsys):
    code, out, _ = cli(capsys, "simnet", "check", "--trace", t3_trace, "--json")
    assert code == 0 and _json(out)["verdict"] == "safe"


def test_ledger_verify(t3_trace, tmp_path, capsys):
    snap = tmp_path / "s.bin"
    code, out, _ = cli(capsys, "ledger", "snapshot", "--trace", t3_trace, "--out", snap, "--json")
    root = _json(out)["root"]
    assert code == 0 and snap.read_bytes()[:4].isascii()
    assert cli(capsys, "ledger", "verify", "--snapshot", snap, "--root", root)[0] == 0
    code, _, err = cli(capsys, "ledger", "verify", "--snapshot", snap, "--root", "0" * 64, "--json")
    assert code == 1 and _json(err)["reason"] == "digest-mismatch"


def test_lineage_bundle_verify(t3_trace, tmp_path, capsys):
    code, out, _ = cli(capsys, "lineage", "list", "--trace", t3_trace, "--json")
    records = _json(out)["data"]
    derived = next(r for r in records if r["origin"] == "derived")
    snap = tmp_path / "s.bin"
    root = _json(cli(capsys, "ledger", "snapshot", "--trace", t3_trace, "--out", snap, "--json")[1])["root"]
    bundle = tmp_path / "b.bin"
    assert cli(capsys, "lineage", "bundle", "--snapshot", snap, "--data-id", derived["data_id"], "--out", bundle)[0] == 0
    assert cli(capsys, "lineage", "verify", "--data-id", derived["data_id"], "--root", root, "--bundle", bundle)[0] == 0
    raw = bytearray(bundle.read_bytes())
    raw[len(raw) // 2] ^= 1
    bundle.write_bytes(bytes(raw))
    code, _, err = cli(capsys, "lineage", "verify", "--data-id", derived["data_id"], "--root", root, "--bundle", bundle)
    assert code == 1 and "error_code" in _json(err)
    code, out, _ = cli(capsys, "lineage", "trace", "--trace", t3_trace, "--data-id", derived["data_id"], "--json")
    assert code == 0 and len(_json(out)["nodes"]) >= 2


def test_attest_round_trip(tmp_path, capsys):
    quote = tmp_path / "q.bin"
    nonce = "00" * 16
    code, out, _ = cli(capsys, "attest", "quote", "--platform", "n1", "--nonce", nonce, "--out", quote, "--json")
    assert code == 0
    measurement = _json(out)["measurement"]
    assert cli(capsys, "attest", "verify", "--quote", quote, "--measurement", measurement, "--nonce", nonce)[0] == 0
    code, _, err = cli(capsys, "attest", "verify", "--quote", quote, "--measurement", measurement, "--vendors", "B,C")
    assert code == 1 and _json(err)["error_code"] == "untrusted-vendor"
    code, _, err = cli(capsys, "attest", "verify", "--quote", quote, "--measurement", "0" * 64)
    assert code == 1 and _json(err)["error_code"] == "wrong-measurement"


def test_tx_build_submit_result(tmp_path, capsys):
    tx = tmp_path / "tx.bin"
    code, out, _ = cli(capsys, "tx", "build", "--op", "put", "--payload-hex", "beef", "--out", tx, "--json")
    assert code == 0
    tx_id = _json(out)["tx_id"]
    trace = tmp_path / "t.trace"
    assert cli(capsys, "tx", "submit", "--file", tx, "--out", trace)[0] == 0
    code, out, _ = cli(capsys, "tx", "result", "--id", tx_id, "--trace", trace, "--json")
    assert code == 0 and _json(out)["ok"] is True
    code, _, err = cli(capsys, "tx", "result", "--id", "0" * 64, "--trace", trace)
    assert code == 1 and _json(err)["error_code"] == "tx-not-found"


@pytest.mark.parametrize(
    "argv",
    [
        ["keys", "split", "--n"],
        ["keys", "frobnicate"],
        ["ledger", "verify", "--snapshot", "x"],
        ["simnet", "check", "--trace", "x", "--scenario", "Z9"],
        ["ledger", "verify", "--snapshot", "x", "--root", "nothex"],
    ],
)
def test_usage_errors(argv, capsys):
    code, _, err = cli(capsys, *argv)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error_code"] == "usage"


@pytest.mark.parametrize(
    "argv, expected",
    [
        (["keys", "reconstruct", "/nonexistent/shard.bin"], None),
        (["simnet", "run", "--config", "/nonexistent.cfg"], None),
        (["ledger", "verify", "--snapshot", __file__, "--root", "0" * 64], "malformed"),
        (["simnet", "check", "--trace", __file__], "malformed-trace"),
    ],
)
def test_domain_errors_are_single_json_line(argv, expected, capsys):
    code, out, err = cli(capsys, *argv)
    assert code == 1 and out == ""
    body = _json(err)
    assert set(body) >= {"error_code", "message"}
    if expected:
        assert body["error_code"] == expected


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "honestcomp.cli", "keys", "reconstruct", str(tmp_path / "missing.bin")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1 and json.loads(proc.stderr)["error_code"]
