import csv
import logging
import math

import numpy as np
import pytest

from dfnopt.app import SWEEP_COLUMNS, WORKERS_ENV, RunConfig, choose_scaling, load_network, main, run, sweep
from dfnopt.optimizer import ConfigError


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(dl=0.0), dict(dp=1.5), dict(tol=0.0), dict(dh=-1.0),
                                    dict(alpha=-0.1), dict(mode="xfem"), dict(solver="gmres"),
                                    dict(precond="ilu"), dict(scaling="-3"), dict(scaling="big")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)

    def test_from_mapping(self):
        cfg = RunConfig.from_mapping({"dh": "0.01", "maxit": "50", "scaling": "1e7", "out": "none"})
        assert cfg.dh == 0.01 and cfg.maxit == 50 and cfg.scaling == "1e7" and cfg.out is None
        assert choose_scaling(cfg, load_network(cfg)[0]) == 1e7

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig.from_mapping({"dx": "1"})


class TestRun:
    def test_dfn3_kkt_smoke(self):
        r = run(RunConfig())
        assert r.converged
        assert np.isfinite(r.indicators.E_h_L2) and r.indicators.E_h_L2 < 1
        assert np.isclose(r.indicators.J_value, r.indicators.J_mismatch, rtol=1e-10)

    def test_pd_beats_none(self):
        base = RunConfig(solver="pcg", tol=1e-8)
        none = run(base.replace(precond="none"))
        pd = run(base.replace(precond="pd"))
        assert none.converged and pd.converged
        assert pd.report.iterations < none.report.iterations

    def test_pcg_matches_kkt(self):
        a = run(RunConfig())
        b = run(RunConfig(solver="pcg", precond="pd", tol=1e-10))
        assert np.isclose(a.indicators.E_h_L2, b.indicators.E_h_L2, rtol=1e-6)

    def test_auto_scaling_on_large_generated_network(self, caplog):
        cfg = RunConfig(network="generator", gen_fractures=395, gen_extent=1000.0,
                        gen_size_min=0.05, gen_size_max=0.15, seed=3, dh=5e3,
                        solver="pcg", maxit=5, scaling="auto")
        net, _ = load_network(cfg)
        assert len(net.fractures) > 300
        with caplog.at_level(logging.INFO, logger="dfnopt"):
            r = run(cfg, net)
        assert 1e6 <= r.scaling <= 1e11
        assert any("scaling factor" in m for m in caplog.messages)

    def test_scaling_preserves_physical_lambda(self):
        a = run(RunConfig(dh=0.005))
        b = run(RunConfig(dh=0.005, scaling="10"))
        assert b.scaling == 10.0
        assert np.isclose(a.indicators.E_lambda_L2, b.indicators.E_lambda_L2, rtol=0.05)

    def test_outputs(self, tmp_path):
        r = run(RunConfig(out=str(tmp_path)))
        names = sorted(p.name for p in r.files)
        assert names == ["fracture_0000.vtk", "fracture_0001.vtk", "fracture_0002.vtk",
                         "heads.vtm", "indicators.csv", "residuals.csv"]
        rows = _read_csv(tmp_path / "indicators.csv")
        assert rows[0][:3] == ["solver", "precond", "iterations"] and len(rows) == 2

    def test_partial_outputs_kept_on_failure(self, tmp_path):
        r = run(RunConfig(solver="pcg", maxit=2, tol=1e-12, out=str(tmp_path)))
        assert not r.converged
        rows = _read_csv(tmp_path / "residuals.csv")
        assert len(rows) == 1 + 3

    def test_dfn10_continuity_decreases_with_lambda_ratio(self):
        vals = [run(RunConfig(network="builtin:dfn10", dh=0.002, dl=dl, dp=0.3)).indicators.delta_S_h
                for dl in (0.1, 0.3, 0.5, 0.7)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestSweep:
    def test_grid_3x3(self, tmp_path):
        header, rows = sweep(RunConfig(), {"dl": [0.1, 0.5, 0.9], "dp": [0.1, 0.5, 0.9]},
                             tmp_path / "s.csv")
        assert header == ["dl", "dp"] + SWEEP_COLUMNS
        assert len(rows) == 9
        assert all(math.isfinite(v) for r in rows for v in r)
        assert len(_read_csv(tmp_path / "s.csv")) == 10

    def test_dh_sequence_conforming(self):
        _, rows = sweep(RunConfig(mode="trace_conforming"),
                        {"dh": [0.02, 0.005, 0.00125, 0.0003]})
        e = [r[2 + SWEEP_COLUMNS.index("E_h_L2")] for r in rows]
        assert all(a > b for a, b in zip(e, e[1:]))

    def test_failed_cells_are_nan(self):
        _, rows = sweep(RunConfig(), {"dl": [0.5, 1.5]})
        assert all(math.isfinite(v) for v in rows[0])
        assert rows[1][0] == 1.5 and all(math.isnan(v) for v in rows[1][1:])

    def test_workers_agree(self, monkeypatch):
        grid = {"dp": [0.3, 0.6]}
        _, serial = sweep(RunConfig(), grid, workers=1)
        monkeypatch.setenv(WORKERS_ENV, "2")
        _, parallel = sweep(RunConfig(), grid)
        assert serial == parallel


class TestCli:
    def test_run_deterministic(self, tmp_path, capsys):
        for d in ("a", "b"):
            assert main(["run", "--network", "builtin:dfn10", "--dh", "0.01", "--solver", "pcg",
                         "--precond", "pd", "--tol", "1e-8", "--out", str(tmp_path / d)]) == 0
        for name in ("indicators.csv", "residuals.csv", "fracture_0003.vtk"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert "converged=True" in capsys.readouterr().out

    def test_config_file_and_override(self, tmp_path, capsys):
        (tmp_path / "run.cfg").write_text("dh = 0.05\nsolver = pcg\nprecond = pd\nmaxit = 1\n")
        assert main(["run", "--config", str(tmp_path / "run.cfg")]) == 1
        assert main(["run", "--config", str(tmp_path / "run.cfg"), "--maxit", "500"]) == 0
        out = capsys.readouterr().out
        assert "converged=False" in out and "converged=True" in out

    def test_network_file(self, tmp_path):
        from dfnopt.io import write_network
        net, _ = load_network(RunConfig())
        write_network(net, tmp_path / "dfn3.dfn")
        assert main(["run", "--network", str(tmp_path / "dfn3.dfn"), "--dh", "0.05"]) == 0

    @pytest.mark.parametrize("argv", [["run", "--dl", "2"], ["run", "--network", "missing.dfn"],
                                      ["sweep", "--grid", "dx=1,2"], ["sweep", "--grid", "dl"],
                                      ["run", "--scaling", "abc"]])
    def test_errors_exit_2(self, argv, capsys):
        assert main(argv) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_sweep(self, tmp_path, capsys):
        csv_path = tmp_path / "s.csv"
        assert main(["sweep", "--dh", "0.05", "--grid", "dl=0.3,0.6", "--grid", "dp=0.5",
                     "--csv", str(csv_path)]) == 0
        rows = _read_csv(csv_path)
        assert rows[0][:2] == ["dl", "dp"] and len(rows) == 3
        assert "wrote 2 rows" in capsys.readouterr().out
