import json
import subprocess
import sys

import pytest

from memedit.cli import ConfigError, load_config, main, parse_overrides
from memedit.memory import load_model


def test_parse_overrides():
    out = parse_overrides(["--geometry.kappa=1e4", "--method", "ridge_only", "--n-edits=3"])
    assert out == {("geometry", "kappa"): 1e4, ("method",): "ridge_only", ("n_edits",): 3}


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n_edits": 3, "geometry": {"kappa": 5.0}}))
    cfg = load_config(path, parse_overrides(["--geometry.d0=8"]), seed=4)
    assert (cfg.n_edits, cfg.geometry.kappa, cfg.geometry.d0, cfg.seed) == (3, 5.0, 8, 4)


def test_bad_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(path)


def test_gen(tmp_path):
    out = tmp_path / "m.json"
    assert main(["gen", "--out", str(out), "--geometry.d0=5"]) == 0
    assert load_model(out).d0 == 5


def test_edit_and_report(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["edit", "--seed", "1", "--out", str(out), "--n_edits=2", "--method=ridge_only"]) == 0
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report[0]["n_edits"] == 2 and report[0]["matches_summary"]


def test_seed_required(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["edit", "--out", str(tmp_path / "r.csv")])
    assert info.value.code == 3


def test_config_error_exit(tmp_path):
    assert main(["edit", "--seed", "0", "--out", str(tmp_path / "r.csv"), "--geometry.kappa=0.5"]) == 3
    assert main(["edit", "--seed", "0", "--out", str(tmp_path / "r.csv"), "--bogus=1"]) == 3


def test_divergence_exit(tmp_path):
    code = main(["edit", "--seed", "0", "--out", str(tmp_path / "r.csv"), "--n_edits=1",
                 "--metake_params.optimizer=sgd", "--metake_params.eta=1e305"])
    assert code == 4


def test_verify_exit_codes(tmp_path):
    assert main(["verify", "--out", str(tmp_path / "v.json")]) == 0
    report = json.loads((tmp_path / "v.json").read_text())
    assert report["passed"]
    assert main(["verify", "--out", str(tmp_path / "v2.json"), "--verify_params.perturbation_ratio=1.5"]) == 0


def test_verify_failure_exit(tmp_path, monkeypatch):
    import memedit.cli as cli
    monkeypatch.setattr(cli, "verify_all", lambda cfg: {"passed": False, "checks": []})
    assert main(["verify", "--out", str(tmp_path / "v.json")]) == 2


def test_sweep(tmp_path):
    out = tmp_path / "sweep"
    code = main(["sweep", "--seed", "0", "--out-dir", str(out), "--kappa", "1,100", "--protected-mass", "0.9",
                 "--methods", "ridge_only,static_baseline", "--n_edits=2"])
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "kappa,protected_mass,method,efficacy,generalization,specificity"
    assert len(lines) == 5


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "memedit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout
