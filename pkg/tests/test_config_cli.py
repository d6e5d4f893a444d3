import json
import os
import subprocess
import sys

import numpy as np
import pytest

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from drekf.cli import main
from drekf.config import (
    ScenarioConfig,
    emit_toml,
    load_config,
    load_template,
    parse_override,
)
from drekf.errors import ConfigError

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CT_CONFIG = os.path.join(REPO, "configs", "ct_tracking.toml")
NAV_CONFIG = os.path.join(REPO, "configs", "safe_nav.toml")


def run_cli(args):
    return main(args)


class TestConfigParsing:
    def test_templates_load(self):
        for name in ("ct_tracking", "safe_nav"):
            cfg = load_template(name)
            assert cfg.scenario_id in ("ct_tracking", "safe_nav")

    def test_repo_configs_match_bundled(self):
        # The repo-level files and the package data must not drift.
        for name, path in (("ct_tracking", CT_CONFIG), ("safe_nav", NAV_CONFIG)):
            assert load_config(path) == load_template(name)

    def test_echo_round_trip(self):
        for name in ("ct_tracking", "safe_nav"):
            cfg = load_template(name)
            reparsed = ScenarioConfig(tomllib.loads(cfg.echo()))
            assert reparsed == cfg

    def test_non_psd_covariance_names_key(self):
        with pytest.raises(ConfigError) as err:
            load_template("ct_tracking", ["true_model.v_cov_diag=[-1.0, 0.25]"])
        assert "v_cov" in str(err.value)

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/rabbit.toml")

    def test_override_parsing(self):
        assert parse_override("robust.theta=0.5") == ("robust.theta", 0.5)
        assert parse_override("scenario.runs=7") == ("scenario.runs", 7)
        assert parse_override('scenario.id="x"') == ("scenario.id", "x")
        with pytest.raises(ConfigError):
            parse_override("no_equals_sign")

    def test_omega0_override_touches_only_true_model(self):
        cfg = load_template("ct_tracking", ["omega0=0.7"])
        assert cfg.true_laws.init.mean[4] == 0.7
        assert cfg.nominal_laws.init.mean[4] == 0.3

    def test_provenance_tags_present(self):
        nav = load_template("safe_nav")
        assert nav.data["mpc"]["provenance"] == "non-paper-default"
        assert nav.data["system"]["beacons_provenance"] == "non-paper-default"
        ct = load_template("ct_tracking")
        assert ct.data["robust"]["radius_cap_provenance"] == "non-paper-default"

    def test_emit_rejects_nonfinite(self):
        with pytest.raises(ConfigError):
            emit_toml({"a": float("inf")})


class TestCliExitCodes:
    def test_run_success(self, tmp_path, capsys):
        code = run_cli([
            "run", "--config", CT_CONFIG, "--out", str(tmp_path),
            "--override", "scenario.runs=2", "--override", "scenario.horizon=5",
            "--jobs", "1",
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "estimator=drekf" in out and "mse_mean=" in out
        assert (tmp_path / "summary.csv").exists()
        assert (tmp_path / "runs.jsonl").exists()
        assert (tmp_path / "config_echo.toml").exists()

    def test_malformed_covariance_exits_one(self, tmp_path, caplog):
        code = run_cli([
            "run", "--config", CT_CONFIG, "--out", str(tmp_path),
            "--override", "nominal_model.v_cov_diag=[-0.1, 0.2]",
        ])
        assert code == 1
        assert "v_cov" in caplog.text

    def test_missing_config_exits_one(self, tmp_path):
        assert run_cli(["run", "--config", "/tmp/does_not_exist.toml",
                        "--out", str(tmp_path)]) == 1

    def test_reduction_override(self, tmp_path):
        code = run_cli([
            "run", "--config", CT_CONFIG, "--out", str(tmp_path),
            "--override", "scenario.runs=2",
            "--override", "scenario.horizon=6",
            "--override", "robust.theta=0.0",
            "--override", "robust.curvature.l_f=0.0",
            "--override", "robust.curvature.l_h=0.0",
            "--jobs", "1",
        ])
        assert code == 0
        import drekf.simkit as simkit

        records = simkit.load_records(str(tmp_path))
        for record in records:
            np.testing.assert_allclose(
                record.estimators["drekf"]["x_post"],
                record.estimators["ekf_nominal"]["x_post"],
                atol=1e-6,
            )

    def test_echo_config_round_trip(self, capsys):
        assert run_cli(["echo-config", "--template", "ct_tracking"]) == 0
        text = capsys.readouterr().out
        assert ScenarioConfig(tomllib.loads(text)) == load_template("ct_tracking")

    def test_echo_config_requires_source(self):
        assert run_cli(["echo-config"]) == 1


class TestCliSweep:
    def test_single_value_sweep_matches_run(self, tmp_path, capsys):
        overrides = ["scenario.runs=2", "scenario.horizon=5"]
        run_dir = tmp_path / "run"
        sweep_dir = tmp_path / "sweep"
        assert run_cli(
            ["run", "--config", CT_CONFIG, "--out", str(run_dir), "--jobs", "1"]
            + [a for o in overrides for a in ("--override", o)]
        ) == 0
        assert run_cli(
            ["sweep", "--config", CT_CONFIG, "--out", str(sweep_dir),
             "--key", "omega0", "--values", "0.3", "--jobs", "1"]
            + [a for o in overrides for a in ("--override", o)]
        ) == 0
        with open(run_dir / "summary.csv") as fh:
            run_csv = fh.read()
        with open(sweep_dir / "omega0_0.3" / "summary.csv") as fh:
            assert fh.read() == run_csv
        sweep_csv = open(sweep_dir / "sweep.csv").read().splitlines()
        assert sweep_csv[0].startswith("sweep_omega0,stage,estimator")
        assert len(sweep_csv) == len(run_csv.splitlines())

    def test_invalid_key_exits_one(self, tmp_path):
        code = run_cli([
            "sweep", "--config", NAV_CONFIG, "--out", str(tmp_path),
            "--key", "omega0", "--values", "0.1",
        ])
        assert code == 1


class TestCliVerifySdp:
    def test_dump_then_verify(self, tmp_path, capsys):
        out = tmp_path / "o"
        code = run_cli([
            "run", "--config", CT_CONFIG, "--out", str(out),
            "--override", "scenario.runs=1", "--override", "scenario.horizon=4",
            "--jobs", "1", "--dump-sdp",
        ])
        assert code == 0
        dump = out / "sdp_dump.jsonl"
        assert dump.exists()
        capsys.readouterr()
        assert run_cli(["verify-sdp", "--dump", str(dump)]) == 0
        assert "ok" in capsys.readouterr().out

    def test_corrupted_dump_flags_violation(self, tmp_path, capsys):
        out = tmp_path / "o"
        run_cli([
            "run", "--config", CT_CONFIG, "--out", str(out),
            "--override", "scenario.runs=1", "--override", "scenario.horizon=3",
            "--jobs", "1", "--dump-sdp",
        ])
        dump = out / "sdp_dump.jsonl"
        lines = [json.loads(l) for l in open(dump)]
        lines[0]["solution"]["posterior_cov"] = (
            np.array(lines[0]["solution"]["posterior_cov"]) + 0.5
        ).tolist()
        with open(dump, "w") as fh:
            fh.writelines(json.dumps(rec) + "\n" for rec in lines)
        capsys.readouterr()
        code = run_cli(["verify-sdp", "--dump", str(dump)])
        assert code == 2
        assert "VIOLATION" in capsys.readouterr().out

    def test_missing_dump_exits_one(self):
        assert run_cli(["verify-sdp", "--dump", "/tmp/nope.jsonl"]) == 1

    def test_cross_check_interior_point(self, tmp_path, capsys):
        out = tmp_path / "o"
        run_cli([
            "run", "--config", CT_CONFIG, "--out", str(out),
            "--override", "scenario.runs=1", "--override", "scenario.horizon=3",
            "--jobs", "1", "--dump-sdp",
        ])
        capsys.readouterr()
        code = run_cli([
            "verify-sdp", "--dump", str(out / "sdp_dump.jsonl"), "--cross-check"
        ])
        assert code == 0
        assert "cross-check objective gap" in capsys.readouterr().out


class TestCliAudit:
    def test_audit_after_run(self, tmp_path, capsys):
        out = tmp_path / "o"
        run_cli([
            "run", "--config", CT_CONFIG, "--out", str(out),
            "--override", "scenario.runs=2", "--override", "scenario.horizon=5",
            "--jobs", "1",
        ])
        capsys.readouterr()
        assert run_cli(["audit", "--records", str(out)]) == 0
        text = capsys.readouterr().out
        assert "mode=pathwise" in text

    def test_audit_missing_records(self, tmp_path):
        assert run_cli(["audit", "--records", str(tmp_path / "none")]) == 1


class TestEntryPoint:
    def test_installed_script(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "drekf.cli", "echo-config", "--template", "safe_nav"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "[mpc]" in proc.stdout
