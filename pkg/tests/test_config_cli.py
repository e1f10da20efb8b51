import json

import pytest

from degzero.cli import main
from degzero.config import ConfigError, RunConfig
from degzero.io import sha256_file

SMALL = """\
[run]
seed = 11
stages = quantize,spectrum

[quantize]
N = 6

[spectrum]
N_list = 4,6
"""


def _write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_ini_round_trip_is_fixed_point():
    cfg = RunConfig.from_ini(SMALL)
    text = cfg.to_ini()
    again = RunConfig.from_ini(text)
    assert again == cfg and again.to_ini() == text
    assert cfg["quantize"]["N"] == 6 and cfg["spectrum"]["N_list"] == [4, 6]
    assert cfg["waves"]["eps_list"] == RunConfig()["waves"]["eps_list"]


def test_json_round_trip():
    cfg = RunConfig.from_ini(SMALL)
    j = RunConfig.from_json(cfg.to_json())
    assert j == cfg and j.to_json() == cfg.to_json()


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="unknown key 'grdi' in section \\[foliation\\]"):
        RunConfig.from_ini("[foliation]\ngrdi = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        RunConfig.from_json('{"nope": {}}')


def test_invalid_values_rejected():
    for text in ("[waves]\ngamma = 0\n", "[quantize]\nN = abc\n", "[run]\nformat = xml\n",
                 "[weyl]\nJ = 0.9,0.6\n", "[escape]\nmethod = guess\n"):
        with pytest.raises(ConfigError):
            RunConfig.from_ini(text)


def test_override():
    cfg = RunConfig().override("waves", "N", "48")
    assert cfg["waves"]["N"] == 48
    with pytest.raises(ConfigError):
        RunConfig().override("waves", "M", 1)


def test_cli_config_error_exit_code(tmp_path):
    p = _write(tmp_path, "[run]\nsed = 1\n")
    assert main(["quantize", "--config", str(p), "--out", str(tmp_path / "o")]) == 4
    p = _write(tmp_path, "[run]\nstages = quantize,bogus\n", "bad.ini")
    out = tmp_path / "o2"
    assert main(["run", "--config", str(p), "--out", str(out)]) == 4
    man = json.loads((out / "manifest.json").read_text())
    assert man["errors"] and man["errors"][0]["stage"] == "config"


def test_cli_precondition_exit_code(tmp_path):
    # eps schedule below 5x the level spacing at N = 16
    out = tmp_path / "o"
    p = _write(tmp_path, "[waves]\nN = 16\neps_list = 0.02,0.0001\n")
    assert main(["resolvent", "--config", str(p), "--out", str(out)]) == 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["errors"][0]["stage"] == "resolvent"
    assert man["errors"][0]["kind"] == "WavePreconditionError"


def test_cli_run_manifest_and_determinism(tmp_path):
    p = _write(tmp_path, SMALL)
    out = tmp_path / "run"
    assert main(["run", "--config", str(p), "--out", str(out), "--format", "json"]) == 0
    first = {f.name: f.read_bytes() for f in sorted(out.iterdir())}
    man = json.loads(first["manifest.json"])
    listed = {e["file"] for e in man["files"]}
    assert listed == set(first) - {"manifest.json"}
    for e in man["files"]:
        assert e["sha256"] == sha256_file(out / e["file"]) and not e["partial"]
    assert man["seed"] == 11 and not man["errors"]
    for name, data in first.items():
        if name.endswith(".json") and name != "manifest.json":
            assert json.loads(data)["seed"] == 11
    assert main(["run", "--config", str(p), "--out", str(out), "--format", "json"]) == 0
    second = {f.name: f.read_bytes() for f in sorted(out.iterdir())}
    assert first == second


def test_cli_seed_recorded_in_csv(tmp_path):
    out = tmp_path / "q"
    assert main(["spectrum", "--N", "4", "--seed", "5", "--out", str(out)]) == 0
    text = (out / "eigenvalues_N4.csv").read_text()
    assert any(ln.startswith("#") and "seed=5" in ln for ln in text.splitlines())
