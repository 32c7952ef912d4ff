import csv
import io
import json
import subprocess
import sys

import pytest

from gearkv.cli import main
from gearkv.report import SCHEMAS, fmt

SMALL = ["--n", "96", "--d", "32", "--heads", "2"]


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_golden_headers():
    assert SCHEMAS["compress"][:3] == ("cfg_id", "role", "bits")
    assert ",".join(SCHEMAS["deviate"]) == "step,l2_dev,cosine,cfg_id"
    assert ",".join(SCHEMAS["account"]) == (
        "cfg_id,n_prefill,n_gen,d,heads,codes,scales_zeros,sparse_values,sparse_indices,lowrank,buffer,"
        "total,baseline,percent_of_fp16")
    assert ",".join(SCHEMAS["sweep"]) == (
        "bits,sparsity,rank_prefill,rank_decode,coverage_p,buffer,backbone,"
        "key_relative,value_relative,relative,kv_size_percent")


def test_number_rendering():
    assert fmt(3) == "3"
    assert fmt(0.1) == "0.1"
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(0.0) == "0"
    assert fmt(True) == "1"


def test_gen_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert _run(capsys, "gen", "--n", "256", "--d", "128", "--heads", "2", "--seed", "7",
                    "--out", str(tmp_path / name))[0] == 0
    for f in ("keys.kvt", "values.kvt", "queries.kvt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_compress_reads_generated_tensors(tmp_path, capsys):
    _run(capsys, "gen", *SMALL, "--seed", "3", "--out", str(tmp_path / "data"))
    code, out, _ = _run(capsys, "compress", "--in", str(tmp_path / "data"), "--heads", "2",
                        "--backbone", "kcvt", "--buffer", "20", "--seed", "3")
    assert code == 0
    rows = _rows(out)
    assert [r["role"] for r in rows] == ["key", "value"]
    assert all(0 < float(r["relative"]) < 1 for r in rows)
    code, again, _ = _run(capsys, "compress", "--in", str(tmp_path / "data"), "--heads", "2",
                          "--backbone", "kcvt", "--buffer", "20", "--seed", "3")
    assert again == out


def test_sweep_bits_by_rank(capsys):
    code, out, _ = _run(capsys, "sweep", *SMALL, "--bits", "2,4,8", "--rank-prefill", "0,4",
                        "--backbone", "kcvt", "--buffer", "16", "--decode-tokens", "16")
    assert code == 0
    rows = _rows(out)
    assert len(rows) == 6
    for r in ("0", "4"):
        errs = [float(x["relative"]) for x in rows if x["rank_prefill"] == r]
        assert errs[0] > errs[1] > errs[2]
    assert _run(capsys, "sweep", *SMALL, "--bits", "2,4,8", "--rank-prefill", "0,4", "--backbone", "kcvt",
                "--buffer", "16", "--decode-tokens", "16")[1] == out


def test_deviate_is_deterministic(capsys):
    argv = ["deviate", *SMALL, "--steps", "8", "--seed", "5", "--variants", "pass,gear", "--buffer", "64"]
    code, out, _ = _run(capsys, *argv)
    assert code == 0
    rows = _rows(out)
    assert len(rows) == 16
    assert all(float(r["l2_dev"]) == 0 for r in rows if r["cfg_id"] == "pass")
    assert _run(capsys, *argv)[1] == out


def test_account_preset_matches_reported(capsys):
    code, out, _ = _run(capsys, "account", "--preset", "kcvt4-gsm8k")
    assert code == 0
    (row,) = _rows(out)
    assert row["cfg_id"] == "kcvt4-gsm8k" and row["d"] == "1024"
    assert abs(float(row["percent_of_fp16"]) - 26.7) <= 2.0
    code, table, _ = _run(capsys, "account", "--preset", "kcvt4-gsm8k", "--format", "table")
    assert "fp16 baseline" in table


def _error(err):
    return json.loads(err.strip().splitlines()[-1])


def test_error_lines(tmp_path, capsys):
    code, _, err = _run(capsys, "compress", "--in", str(tmp_path / "nope"))
    assert code == 2 and _error(err)["error"] == "missing_file"
    code, _, err = _run(capsys, "account", "--backbone", "kivi-g64", "--buffer", "20")
    assert code == 2 and _error(err)["error"] == "flush_threshold"
    code, _, err = _run(capsys, "account", "--bits", "3")
    assert code == 2 and _error(err)["error"] == "config"
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "keys.kvt").write_bytes(b"junk")
    (tmp_path / "bad" / "values.kvt").write_bytes(b"junk")
    code, _, err = _run(capsys, "compress", "--in", str(tmp_path / "bad"))
    assert code == 2 and _error(err)["error"] == "format"


def test_config_precedence(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"preset": "kivi2", "bits": 4, "n_gen": 128}))
    (row,) = _rows(_run(capsys, "account", "--config", str(conf))[1])
    assert row["cfg_id"] == "kivi2" and row["n_gen"] == "128"
    four = float(row["percent_of_fp16"])
    (row,) = _rows(_run(capsys, "account", "--config", str(conf), "--bits", "2")[1])
    assert float(row["percent_of_fp16"]) < four
    conf.write_text(json.dumps({"bogus": 1}))
    code, _, err = _run(capsys, "account", "--config", str(conf))
    assert code == 2 and _error(err)["error"] == "config"


def test_seed_env_fallback(monkeypatch, capsys):
    argv = ["compress", *SMALL, "--backbone", "kcvt", "--buffer", "20"]
    monkeypatch.setenv("GEARKV_SEED", "11")
    env_out = _run(capsys, *argv)[1]
    flag_out = _run(capsys, *argv, "--seed", "11")[1]
    other = _run(capsys, *argv, "--seed", "12")[1]
    assert env_out == flag_out != other


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gearkv.cli", "account", "--preset", "kivi2"],
                          capture_output=True, text=True, check=True)
    assert proc.stdout.startswith("cfg_id,")


@pytest.mark.parametrize("command", ["gen", "compress", "sweep", "deviate", "account"])
def test_help_for_every_command(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
