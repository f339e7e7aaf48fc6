import json
import subprocess
import sys

import numpy as np
import pytest

from solodid.cli import main, parse_study_config
from solodid.errors import ConfigError


def _write_micro(path, n_units=5, t=6, start=4, m=8, effect=0.0, seed=0):
    gen = np.random.default_rng(seed)
    lines = ["unit,time,outcome,weight"]
    for i in range(n_units):
        a = gen.normal()
        for s in range(t):
            loc = a + 0.1 * s + (effect if (i == 0 and s >= start) else 0.0)
            for _ in range(m):
                lines.append(f"u{i},{s},{loc + 0.3 * gen.normal():.8f},1.0")
    path.write_text("\n".join(lines) + "\n")
    return path


def _write_panel(path, n=8, t=7, start=5, effect=0.0, seed=0, counts=False):
    gen = np.random.default_rng(seed)
    header = "unit,time,value" + (",count" if counts else "")
    lines = [header]
    for i in range(n):
        a = gen.normal()
        for s in range(t):
            v = a + 0.1 * s + 0.3 * gen.normal()
            if i == 0 and s >= start:
                v += effect
            row = f"u{i},{s},{v:.8f}"
            if counts:
                row += f",{int(gen.integers(300, 500))}"
            lines.append(row)
    path.write_text("\n".join(lines) + "\n")
    return path


class TestAggregate:
    def test_happy_path_writes_panel_and_manifest(self, tmp_path, capsys):
        micro = _write_micro(tmp_path / "m.csv")
        out = tmp_path / "panel.csv"
        rc = main(["aggregate", str(micro), "--out", str(out),
                   "--treated", "u0", "--treatment-start", "4"])
        assert rc == 0
        text = out.read_text()
        assert text.startswith("# format_version=")
        assert (tmp_path / "panel.csv.manifest.json").exists()
        manifest = json.loads(
            (tmp_path / "panel.csv.manifest.json").read_text())
        assert manifest["command"][0] == "aggregate"

    def test_trim_drops_extremes_symmetrically(self, tmp_path):
        # one wild outlier per tail in a single cell; trimming 2/10 of the
        # cell must remove exactly those two
        lines = ["unit,time,outcome"]
        for u in ("a", "b", "c"):
            for s in range(3):
                vals = [5.0] * 8 + [1000.0, -1000.0] if (
                    u == "a" and s == 0) else [5.0] * 10
                lines.extend(f"{u},{s},{v}" for v in vals)
        micro = tmp_path / "m.csv"
        micro.write_text("\n".join(lines) + "\n")
        out = tmp_path / "p.csv"
        rc = main(["aggregate", str(micro), "--out", str(out),
                   "--treated", "a", "--treatment-start", "2",
                   "--trim", "0.2"])
        assert rc == 0
        rows = [l for l in out.read_text().splitlines()
                if l and not l.startswith("#") and not l.startswith("unit")]
        cell = next(r for r in rows if r.startswith("a,0"))
        assert float(cell.split(",")[2]) == pytest.approx(5.0)

    def test_unbalanced_micro_exits_3(self, tmp_path, capsys):
        micro = tmp_path / "m.csv"
        micro.write_text(
            "unit,time,outcome\na,0,1\na,1,1\nb,0,1\nb,1,1\nc,0,1\n")
        rc = main(["aggregate", str(micro), "--out",
                   str(tmp_path / "p.csv"), "--treated", "a",
                   "--treatment-start", "1"])
        assert rc == 3
        assert "c" in capsys.readouterr().err

    def test_missing_input_exits_2(self, tmp_path, capsys):
        rc = main(["aggregate", str(tmp_path / "absent.csv"), "--out",
                   str(tmp_path / "p.csv"), "--treated", "a",
                   "--treatment-start", "1"])
        assert rc == 2


class TestEstimate:
    def test_json_output_round_trips(self, tmp_path, capsys):
        panel = _write_panel(tmp_path / "p.csv", effect=1.0)
        rc = main(["estimate", str(panel), "--treated", "u0",
                   "--treatment-start", "5", "--method", "did",
                   "--inference", "crve"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["format_version"] == 1
        assert payload["method"] == "did"
        assert payload["inference"] == "crve"
        assert np.isfinite(payload["tau"])
        assert np.isfinite(payload["se"])
        assert 0.0 <= payload["p"] <= 1.0
        assert "manifest" in payload

    def test_did_tau_on_tiny_additive_panel(self, tmp_path, capsys):
        # 3 units x 3 periods with exact unit/time additivity and a unit
        # jump: the smallest panel the validators accept
        lines = ["unit,time,value"]
        base = {"t": 0.0, "a": 1.0, "b": 2.0}
        for u, a in base.items():
            for s in range(3):
                v = a + 0.5 * s + (1.0 if (u == "t" and s == 2) else 0.0)
                lines.append(f"{u},{s},{v}")
        panel = tmp_path / "p.csv"
        panel.write_text("\n".join(lines) + "\n")
        rc = main(["estimate", str(panel), "--treated", "t",
                   "--treatment-start", "2", "--method", "did",
                   "--inference", "crve", "--seed", "1"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["tau"] == pytest.approx(1.0, abs=1e-10)

    def test_latex_line(self, tmp_path, capsys):
        panel = _write_panel(tmp_path / "p.csv", effect=0.8)
        rc = main(["estimate", str(panel), "--treated", "u0",
                   "--treatment-start", "5", "--method", "did",
                   "--inference", "crve", "--latex"])
        assert rc == 0
        out = capsys.readouterr().out.strip()
        import re
        assert re.fullmatch(r"-?\d+\.\d{3} \(\d+\.\d{3}\) \[\d\.\d{3}\]", out)

    def test_rmspe_rank_via_cli(self, tmp_path, capsys):
        # more pre periods than donors so no control gets an exact
        # convex-hull pre fit and the huge treated effect ranks first
        panel = _write_panel(tmp_path / "p.csv", n=7, t=12, start=8,
                             effect=25.0, seed=5)
        rc = main(["estimate", str(panel), "--treated", "u0",
                   "--treatment-start", "8", "--method", "sc",
                   "--inference", "rmspe"])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["p"] == pytest.approx(1.0 / 7.0, abs=1e-12)
        assert payload["rank"] == 1.0
        assert payload["post_pre_ratio"] > 10.0

    def test_crb_requires_counts_exit_4(self, tmp_path, capsys):
        panel = _write_panel(tmp_path / "p.csv", counts=False)
        rc = main(["estimate", str(panel), "--treated", "u0",
                   "--treatment-start", "5", "--method", "did",
                   "--inference", "crb"])
        assert rc == 4

    def test_crb_with_non_did_method_exit_4(self, tmp_path):
        panel = _write_panel(tmp_path / "p.csv", counts=True)
        rc = main(["estimate", str(panel), "--treated", "u0",
                   "--treatment-start", "5", "--method", "sc",
                   "--inference", "crb"])
        assert rc == 4

    def test_crve_with_sc_exit_4(self, tmp_path):
        panel = _write_panel(tmp_path / "p.csv")
        rc = main(["estimate", str(panel), "--treated", "u0",
                   "--treatment-start", "5", "--method", "sc",
                   "--inference", "crve"])
        assert rc == 4

    def test_default_seed_warns_on_stderr(self, tmp_path, capsys):
        panel = _write_panel(tmp_path / "p.csv")
        main(["estimate", str(panel), "--treated", "u0",
              "--treatment-start", "5", "--method", "did",
              "--inference", "placebo"])
        assert "seed" in capsys.readouterr().err.lower()

    def test_explicit_seed_is_silent(self, tmp_path, capsys):
        panel = _write_panel(tmp_path / "p.csv")
        main(["estimate", str(panel), "--treated", "u0",
              "--treatment-start", "5", "--method", "did",
              "--inference", "placebo", "--seed", "3"])
        assert capsys.readouterr().err == ""

    def test_plot_data_post_periods(self, tmp_path, capsys):
        panel = _write_panel(tmp_path / "p.csv", t=7, start=5)
        plot = tmp_path / "plot.csv"
        rc = main(["estimate", str(panel), "--treated", "u0",
                   "--treatment-start", "5", "--method", "sc",
                   "--inference", "rmspe", "--plot-data", str(plot)])
        assert rc == 0
        rows = [l for l in plot.read_text().splitlines()
                if l and not l.startswith("#")]
        assert rows[0] == "time,treated,counterfactual"
        assert len(rows) == 1 + 2  # two post periods

    def test_unknown_treated_exit_3(self, tmp_path, capsys):
        panel = _write_panel(tmp_path / "p.csv")
        rc = main(["estimate", str(panel), "--treated", "nope",
                   "--treatment-start", "5", "--method", "did",
                   "--inference", "crve"])
        assert rc == 3


class TestStudyConfig:
    def test_parse_round_trip(self, tmp_path):
        text = ("scale = desk\nn_controls = 16\nt = 8\nt_pre = 5\n"
                "rho = 0.8\nmethods = crve, crb\nseed = 3\n")
        cfg, methods, seed_given = parse_study_config(text)
        assert cfg.n_controls == 16
        assert cfg.rho == 0.8
        assert cfg.replications == 500  # desk scale
        assert methods == ("crve", "crb")
        assert seed_given

    def test_full_scale_defaults(self):
        cfg, _, seed_given = parse_study_config(
            "scale = full\nn_controls = 38\nt = 14\nt_pre = 9\nrho = 0.2\n")
        assert cfg.replications == 10_000
        assert not seed_given

    def test_unknown_key_raises_config_error(self):
        with pytest.raises(ConfigError) as err:
            parse_study_config("n_contrls = 16\n")
        assert "n_contrls" in str(err.value)

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_study_config("rho = 0.2\nrho = 0.3\n")

    def test_uncastable_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_study_config("n_controls = many\n")

    def test_config_error_exit_6(self, tmp_path, capsys):
        cfg = tmp_path / "study.cfg"
        cfg.write_text("scale = desk\nbogus_key = 1\n")
        rc = main(["simulate", str(cfg), "--out", str(tmp_path / "out")])
        assert rc == 6
        assert "bogus_key" in capsys.readouterr().err


class TestSimulate:
    CFG = ("n_controls = 8\nt = 7\nt_pre = 5\nrho = 0.3\n"
           "replications = 100\nplacebo_b = 60\nmethods = crve\nseed = 1\n")

    def test_worker_count_does_not_change_report(self, tmp_path, capsys):
        cfg = tmp_path / "study.cfg"
        cfg.write_text(self.CFG)
        assert main(["simulate", str(cfg), "--out", str(tmp_path / "w1"),
                     "--workers", "1"]) == 0
        assert main(["simulate", str(cfg), "--out", str(tmp_path / "w2"),
                     "--workers", "2"]) == 0
        r1 = (tmp_path / "w1" / "report.csv").read_bytes()
        r2 = (tmp_path / "w2" / "report.csv").read_bytes()
        assert r1 == r2

    def test_resume_completes_partial_run(self, tmp_path, capsys):
        cfg = tmp_path / "study.cfg"
        cfg.write_text(self.CFG)
        assert main(["simulate", str(cfg), "--out",
                     str(tmp_path / "full")]) == 0
        ck = (tmp_path / "full" / "checkpoint.jsonl").read_bytes()
        part = tmp_path / "part"
        part.mkdir()
        (part / "checkpoint.jsonl").write_bytes(ck[: len(ck) // 3])
        assert main(["simulate", str(cfg), "--out", str(part),
                     "--resume"]) == 0
        assert (part / "report.csv").read_bytes() == (
            tmp_path / "full" / "report.csv").read_bytes()

    def test_simulate_writes_manifest_and_table(self, tmp_path, capsys):
        cfg = tmp_path / "study.cfg"
        cfg.write_text(self.CFG)
        out = tmp_path / "run"
        assert main(["simulate", str(cfg), "--out", str(out)]) == 0
        assert (out / "report.csv").exists()
        assert (out / "table.txt").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 1
        stdout = capsys.readouterr().out
        assert "crve" in stdout


class TestUqrCli:
    def test_single_grid_point_single_row(self, tmp_path, capsys):
        micro = _write_micro(tmp_path / "m.csv", m=12)
        rc = main(["uqr", str(micro), "--treated", "u0",
                   "--treatment-start", "4", "--grid", "0.5",
                   "--B", "50", "--seed", "2"])
        assert rc == 0
        out = capsys.readouterr().out.strip().splitlines()
        data = [l for l in out if not l.startswith("#")]
        assert data[0] == "kappa,threshold,tau,se"
        assert len(data) == 2
        assert data[1].startswith("0.5000,")

    def test_grid_file_output_with_manifest(self, tmp_path, capsys):
        micro = _write_micro(tmp_path / "m.csv", m=12)
        out = tmp_path / "curve.csv"
        rc = main(["uqr", str(micro), "--treated", "u0",
                   "--treatment-start", "4", "--grid", "0.3,0.6",
                   "--B", "50", "--seed", "2", "--out", str(out)])
        assert rc == 0
        assert out.exists()
        assert (tmp_path / "curve.csv.manifest.json").exists()
        rows = [l for l in out.read_text().splitlines()
                if l and not l.startswith("#")]
        assert len(rows) == 3

    def test_threshold_grid_requires_explicit_grid(self, tmp_path, capsys):
        micro = _write_micro(tmp_path / "m.csv", m=6)
        rc = main(["uqr", str(micro), "--treated", "u0",
                   "--treatment-start", "4", "--grid-type", "threshold",
                   "--seed", "1"])
        assert rc == 4

    def test_threshold_grid_rows_keep_given_thresholds(self, tmp_path, capsys):
        # threshold values are outcome levels, not quantile levels, so
        # values beyond [0, 1] must pass straight through to the rows
        micro = _write_micro(tmp_path / "m.csv", m=40)
        rc = main(["uqr", str(micro), "--treated", "u0",
                   "--treatment-start", "4", "--grid=-1.0,1.5",
                   "--grid-type", "threshold", "--se", "hc2"])
        assert rc == 0
        out = capsys.readouterr().out.strip().splitlines()
        rows = [l.split(",") for l in out if l and not l.startswith("#")][1:]
        assert [float(r[1]) for r in rows] == [-1.0, 1.5]
        for r in rows:
            assert 0.0 < float(r[0]) < 1.0

    def test_bad_grid_value_exit_3(self, tmp_path, capsys):
        micro = _write_micro(tmp_path / "m.csv", m=6)
        rc = main(["uqr", str(micro), "--treated", "u0",
                   "--treatment-start", "4", "--grid", "0.5,0.2",
                   "--seed", "1"])
        assert rc == 3


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-c",
                           "from solodid.cli import main; "
                           "raise SystemExit(main(['--help']))"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "aggregate" in proc.stdout
