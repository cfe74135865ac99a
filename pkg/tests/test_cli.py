from __future__ import annotations

import json
import logging

import numpy as np
import pytest

from alzsim.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_NONCONVERGENCE, EXIT_OK, main, oracle_w1, refine_study
from alzsim.config import PRESETS, ConfigError, RunConfig, from_dict, load_config, preset
from alzsim.errors import HypothesisError


def _write(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


class TestConfig:
    @pytest.mark.parametrize("name", PRESETS)
    def test_presets_validate(self, name):
        cfg = from_dict(preset(name))
        assert isinstance(cfg, RunConfig)
        assert cfg.scenario == name

    def test_healthy_has_no_seeding(self):
        assert from_dict(preset("healthy")).data.jump.chi_boxes == ()

    def test_zero_clearance_rejected(self, tmp_path, capsys):
        raw = preset("healthy")
        raw["params"]["sigma"] = [0.0, 1.0]
        with pytest.raises(HypothesisError, match="are positive constants"):
            from_dict(raw)
        assert main(["validate", "--config", str(_write(tmp_path, raw))]) == EXIT_CONFIG
        assert "H1" in capsys.readouterr().err

    def test_asymmetric_coagulation_accepted(self, caplog):
        raw = preset("healthy")
        raw["params"]["a_coag"] = [[1.0, 2.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]
        with caplog.at_level(logging.WARNING):
            cfg = from_dict(raw)
        assert cfg.raw["params"]["a_coag"][0][1] == 1.5
        assert "symmetric" in caplog.text

    def test_round_trip_idempotent(self, tmp_path):
        first = load_config(_write(tmp_path, preset("seeded")))
        path2 = tmp_path / "again.json"
        path2.write_text(first.dumps(), encoding="utf-8")
        second = load_config(path2)
        assert second.dumps() == first.dumps()
        assert second.config_hash() == first.config_hash()

    def test_bad_json_reports_position(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text('{"schema_version": 1,\n  "params": }', encoding="utf-8")
        with pytest.raises(ConfigError, match=r"broken.json:2:\d+"):
            load_config(path)
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG

    def test_missing_section(self):
        raw = preset("healthy")
        del raw["grid"]
        with pytest.raises(ConfigError, match="grid"):
            from_dict(raw)

    def test_wrong_schema_version(self):
        raw = preset("healthy")
        raw["schema_version"] = 99
        with pytest.raises(ConfigError):
            from_dict(raw)

    def test_preset_path_form(self):
        assert load_config("preset:riccati-test").scenario == "riccati-test"


class TestRun:
    def test_decoupled_march(self, tmp_path):
        out = tmp_path / "dec"
        assert main(["run", "--preset", "decoupled", "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        check = manifest["closed_form_checks"]["u1_linear_closed_form_error"]
        assert check["pass"] and check["value"] <= 1e-4
        assert all(v["pass"] for v in manifest["invariants"].values())
        assert (out / "config.json").exists() and (out / "run_summary.json").exists()
        assert list((out / "snapshots").glob("transport_t*.csv"))

    def test_riccati(self, tmp_path):
        out = tmp_path / "ric"
        assert main(["run", "--preset", "riccati-test", "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["closed_form_checks"]["riccati_closed_form_error"]["value"] <= 2e-3

    def test_seeded_picard(self, tmp_path):
        out = tmp_path / "pic"
        assert main(["run", "--preset", "seeded", "--mode", "picard", "--out", str(out)]) == EXIT_OK
        report = json.loads((out / "contraction.json").read_text())
        assert report["converged"] and report["max_ratio"] < 1.0

    def test_invariant_failure_exit(self, tmp_path):
        raw = preset("riccati-test")
        raw["run"]["dt"] = 0.05
        out = tmp_path / "coarse"
        assert main(["run", "--config", str(_write(tmp_path, raw)), "--out", str(out)]) == EXIT_INVARIANT
        manifest = json.loads((out / "manifest.json").read_text())
        assert "riccati_closed_form_error" in manifest["failure"]["invariants"]

    def test_non_convergence_exit(self, tmp_path):
        raw = preset("seeded")
        raw["grid"].update(K=11, M=26)
        raw["run"].update(mode="picard", max_iter=1, dt=0.01)
        out = tmp_path / "nc"
        assert main(["run", "--config", str(_write(tmp_path, raw)), "--out", str(out)]) == EXIT_NONCONVERGENCE
        assert "contraction" in json.loads((out / "manifest.json").read_text())

    def test_manifest_reproduces_run(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--preset", "decoupled", "--out", str(out1)]) == EXIT_OK
        manifest = json.loads((out1 / "manifest.json").read_text())
        cfg_path = _write(tmp_path, manifest["config"], "replay.json")
        assert main(["run", "--config", str(cfg_path), "--out", str(out2)]) == EXIT_OK
        for f in sorted((out1 / "snapshots").iterdir()):
            assert f.read_bytes() == (out2 / "snapshots" / f.name).read_bytes()


class TestRefine:
    def test_two_levels_rejected(self, capsys):
        assert main(["refine", "--preset", "decoupled", "--levels", "2"]) == EXIT_CONFIG
        with pytest.raises(ConfigError):
            refine_study(from_dict(preset("decoupled")), 2)

    def test_decoupled_transport_exact(self):
        # started at the equilibrium u_1 = F / sigma every level computes the same state
        raw = preset("decoupled")
        raw["initial"]["u0"] = [0.1, 0.0]
        raw["run"].update(T=0.5, dt=0.01)
        rows = refine_study(from_dict(raw), 3)
        assert all(r["distance"] <= 1e-14 for r in rows)

    def test_decoupled_first_order(self):
        raw = preset("decoupled")
        raw["run"].update(T=0.5, dt=0.01)
        rows = refine_study(from_dict(raw), 3)
        assert rows[-1]["observed_order"] == pytest.approx(1.0, abs=0.1)

    def test_seeded_order(self, tmp_path):
        raw = preset("seeded")
        raw["grid"].update(K=11, M=26)
        raw["run"].update(T=0.5, dt=0.02, snapshot_stride=5)
        csv_path = tmp_path / "refine.csv"
        rows = refine_study(from_dict(raw), 3, csv_path)
        assert rows[-1]["observed_order"] >= 0.8
        assert csv_path.read_text().splitlines()[0] == "level,dt,M,K,distance,observed_order"


def test_oracle_battery(capsys):
    assert main(["oracle-w1", "--atoms", "8", "--trials", "50"]) == EXIT_OK
    result = json.loads(capsys.readouterr().out)
    assert result["pass"] and result["max_abs_difference"] <= 1e-10
    assert oracle_w1(5, 20, seed=3)["trials"] == 20


def test_validate_prints_config(capsys):
    assert main(["validate", "--preset", "healthy"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["scenario"] == "healthy"


def test_run_reproducible_hash():
    a = from_dict(preset("seeded"))
    b = from_dict(json.loads(a.dumps()))
    assert a.config_hash() == b.config_hash()
    assert np.array_equal(a.data.g0, b.data.g0)
