import csv
import json
import shutil
import subprocess

import pytest

from beckerdoring import cli, experiments, io
from beckerdoring.exceptions import ConfigError, SpectralError


def _write(tmp_path, text, name="cfg.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- config parsing ---------------------------------------------------------------

def test_parse_key_value_and_json():
    kv = io.parse_config_text("kind = equilibrium  # comment\n\nN = 64\nks = [1, 2]\nsigns = alternating\n")
    assert kv == {"kind": "equilibrium", "N": 64, "ks": [1, 2], "signs": "alternating"}
    assert io.parse_config_text('{"kind": "spectrum", "N": 64}') == {"kind": "spectrum", "N": 64}
    with pytest.raises(ConfigError):
        io.parse_config_text("{not json")
    with pytest.raises(ConfigError):
        io.parse_config_text("N 64")


def test_parse_override():
    assert io.parse_override("N=800") == ("N", 800)
    assert io.parse_override("signs = random") == ("signs", "random")
    with pytest.raises(ConfigError):
        io.parse_override("N")


@pytest.mark.parametrize("raw", [
    {"kind": "equilibrium", "bogus": 1},
    {"kind": "nope"},
    {"kind": "equilibrium", "N": 2.5},
    {"kind": "equilibrium", "rtol": "x"},
    {"kind": "equilibrium", "z": 0.1, "rho": 1.0},
    {"kind": "equilibrium", "model": "custom"},
    {"kind": "equilibrium", "model": "custom", "a": [1, 2], "b": 1, "N": 8},
    {"kind": "equilibrium", "ks": "1,2"},
    {"kind": "equilibrium", "seed": -1},
    {"kind": "equilibrium", "threads": 0},
    {"kind": "equilibrium", "out": 3},
])
def test_resolve_rejects(raw):
    with pytest.raises(ConfigError):
        io.resolve_config(raw)


def test_resolve_fills_defaults():
    cfg = io.resolve_config({"kind": "equilibrium"}, [("N", 64)], seed=7)
    assert cfg["N"] == 64 and cfg["seed"] == 7 and cfg["z_fraction"] == 0.5
    assert set(cfg.values) == set(io.DEFAULTS)
    assert cfg.digest == io.resolve_config({"kind": "equilibrium", "N": 64, "seed": 7}).digest


# --- serialisation ----------------------------------------------------------------

def test_csv_and_json_deterministic(tmp_path):
    rows = [[1, 0.1, None], [2, 1e-300, "x"]]
    assert io.csv_text(["i", "v", "s"], rows) == "i,v,s\n1,0.1,\n2,1e-300,x\n"
    a = io.dumps({"b": float("nan"), "a": [1.0, 2]})
    assert a == io.dumps({"a": [1.0, 2], "b": float("nan")})
    assert json.loads(a)["b"] == "nan"


def test_atomic_write_creates_dirs(tmp_path):
    target = tmp_path / "deep" / "dir" / "x.txt"
    io.atomic_write(target, "hello")
    io.atomic_write(target, "again")
    assert target.read_text() == "again"
    assert [p.name for p in target.parent.iterdir()] == ["x.txt"]


# --- cli ----------------------------------------------------------------------------

def test_run_equilibrium(tmp_path):
    cfg = _write(tmp_path, "kind = equilibrium\nN = 64\n")
    out = tmp_path / "new" / "out"
    assert cli.main(["run", str(cfg), "--out", str(out)]) == 0
    with open(out / "equilibrium.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 64 and "residual" in rows[0]
    assert max(abs(float(r["residual"])) for r in rows) <= 1e-12
    body = json.loads((out / "equilibrium.json").read_text())
    assert body["status"] == "ok" and body["config"]["N"] == 64 and len(body["config_hash"]) == 64


def test_run_spectrum_override(tmp_path):
    cfg = _write(tmp_path, '{"kind": "spectrum", "N": 64, "samples": 50, "ks": [3.0]}', "cfg.json")
    assert cli.main(["run", "--config", str(cfg), "--override", "N=800", "--out", str(tmp_path)]) == 0
    body = json.loads((tmp_path / "spectrum.json").read_text())
    assert body["result"]["N"] == 800
    assert body["result"]["lambda_c"] > 0


def test_run_is_deterministic(tmp_path):
    cfg = _write(tmp_path, "kind = nonlinear-decay\nN = 80\nt_end = 20\nsamples = 50\nsigns = random\n"
                           "scale = relative\nseed = 11\n")
    out = tmp_path / "out"
    blobs = []
    for _ in range(2):
        assert cli.main(["run", str(cfg), "--out", str(out), "--threads", "1"]) == 0
        blobs.append([(out / n).read_bytes() for n in ("decay.csv", "nonlinear-decay.json")])
    assert blobs[0] == blobs[1]
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "other")]) == 0
    h = [json.loads((d / "nonlinear-decay.json").read_text())["config_hash"] for d in (out, tmp_path / "other")]
    assert h[0] == h[1]


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, "kind = equilibrium\ncolour = blue\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path)]) == 2
    assert "colour" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.txt")]) == 2
    assert cli.main(["run"]) == 2


def test_bad_usage_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "x", "--seed", "-4"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_invalid_model_exits_2(tmp_path):
    cfg = _write(tmp_path, "kind = equilibrium\nN = 4\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path)]) == 2
    assert json.loads((tmp_path / "equilibrium.json").read_text())["status"] == "invalid"


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    def boom(cfg):
        raise SpectralError("eigensolver did not converge", report={"partial": 1.5})

    monkeypatch.setitem(experiments.RUNNERS, "spectrum", boom)
    cfg = _write(tmp_path, "kind = spectrum\nN = 64\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path)]) == 3
    body = json.loads((tmp_path / "spectrum.json").read_text())
    assert body["status"] == "failed"
    assert body["failure"]["type"] == "SpectralError"
    assert body["result"] == {"partial": 1.5}


def test_verify_unknown_suite():
    assert cli.main(["verify", ""]) == 2
    assert cli.main(["verify", "nightly"]) == 2


@pytest.mark.skipif(shutil.which("beckerdoring") is None, reason="console script not installed")
def test_console_script(tmp_path):
    cfg = _write(tmp_path, "kind = equilibrium\nN = 32\n")
    proc = subprocess.run(["beckerdoring", "run", str(cfg), "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "equilibrium.csv").exists()
