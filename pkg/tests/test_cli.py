from __future__ import annotations

import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from trunccert import bounds as B
from trunccert.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, EXIT_VIOLATED, run

from conftest import BS_REFERENCE

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _bs_cfg(**extra):
    cfg = {
        "d": 1, "k": 1, "r": [0.05], "sigma": [0.2], "lambda": [[0.0]],
        "payoff": {"kind": "vanilla-call", "strike": 100.0},
        "domain": {"s_lo": [0.0], "s_hi": [400.0], "T": 1.0},
        "probes": [{"t": 0.0, "s": [100.0], "regime": 0}],
        "boundary": {"kind": "frozen-bsm"},
        "ie": {"n_t": 11, "n_s": [61], "v_panels": 4},
        "mc": {"n_paths": 200000},
        "fd": {"M": 400, "N": [801]},
    }
    cfg.update(extra)
    return cfg


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def _run(capsys, *argv):
    code = run(list(argv))
    return code, capsys.readouterr()


class TestExitCodes:
    def test_validate_ok(self, tmp_path, capsys):
        code, out = _run(capsys, "validate", "--config", _write(tmp_path, _bs_cfg()))
        assert code == EXIT_OK
        rows = _rows(out.out)
        d = [r for r in rows if r["quantity"] == "D"][0]
        assert float(d["value"]) == pytest.approx(0.04 - 0.1)

    def test_bad_generator(self, tmp_path, capsys):
        cfg = _bs_cfg(k=2, r=[0.05, 0.05], sigma=[0.2, 0.2], **{"lambda": [[-1.0, 1.0], [1.0, -0.5]]})
        code, out = _run(capsys, "validate", "--config", _write(tmp_path, cfg))
        assert code == EXIT_CONFIG and "row 1" in out.err

    def test_missing_file(self, tmp_path, capsys):
        code, _ = _run(capsys, "validate", "--config", str(tmp_path / "nope.json"))
        assert code == EXIT_IO

    def test_invalid_json(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert _run(capsys, "validate", "--config", str(p))[0] == EXIT_CONFIG

    def test_quadrature_dimension(self, tmp_path, capsys):
        sig = np.diag([0.2] * 4).tolist()
        cfg = _bs_cfg(d=4, sigma=[sig], payoff={"kind": "basket-call", "strike": 1.0, "weights": [0.25] * 4},
                      domain={"s_lo": [0.0] * 4, "s_hi": [2.0] * 4, "T": 1.0},
                      probes=[{"t": 0.0, "s": [1.0] * 4}])
        code, out = _run(capsys, "price", "--config", _write(tmp_path, cfg), "--method", "ie")
        assert code == EXIT_SOLVER and "QuadratureDimension" in out.err

    def test_probe_on_boundary(self, tmp_path, capsys):
        cfg = _bs_cfg(probes=[{"t": 0.0, "s": [400.0]}])
        code, out = _run(capsys, "certify", "--config", _write(tmp_path, cfg))
        assert code == EXIT_SOLVER and "ProbeOutsideDomain" in out.err

    def test_violation(self, tmp_path, capsys, monkeypatch):
        real = B.certify_point

        def broken(*a, **kw):
            rep = real(*a, **kw)
            rep.certified = 0.0
            return rep

        monkeypatch.setattr(B, "certify_point", broken)
        cfg = json.loads((CONFIGS / "positive_gap_call.json").read_text())
        code, out = _run(capsys, "certify", "--config", _write(tmp_path, cfg), "--measure")
        assert code == EXIT_VIOLATED
        assert "false" in out.out

    def test_size_domain_needs_tolerance(self, tmp_path, capsys):
        assert _run(capsys, "size-domain", "--config", _write(tmp_path, _bs_cfg()))[0] == EXIT_CONFIG


class TestPrice:
    def test_three_methods_agree(self, tmp_path, capsys):
        path = _write(tmp_path, _bs_cfg())
        vals = {}
        for method in ("ie", "fd", "mc"):
            code, out = _run(capsys, "price", "--config", path, "--method", method)
            assert code == EXIT_OK
            vals[method] = _rows(out.out)[0]
        assert float(vals["ie"]["value"]) == pytest.approx(BS_REFERENCE, rel=1e-3)
        assert float(vals["fd"]["value"]) == pytest.approx(BS_REFERENCE, rel=1e-3)
        mc = vals["mc"]
        assert abs(float(mc["mean"]) - BS_REFERENCE) < 4 * float(mc["stderr"])

    @pytest.mark.parametrize("method", ["ie", "fd", "mc"])
    def test_zero_payoff(self, tmp_path, capsys, method):
        cfg = _bs_cfg(payoff={"kind": "vanilla-call", "strike": 1e9}, boundary={"kind": "zero"})
        cfg["ie"] = {"n_t": 5, "n_s": [21], "v_panels": 2}
        cfg["mc"] = {"n_paths": 1000}
        cfg["fd"] = {"M": 10, "N": [21]}
        code, out = _run(capsys, "price", "--config", _write(tmp_path, cfg), "--method", method)
        assert code == EXIT_OK
        col = "mean" if method == "mc" else "value"
        assert float(_rows(out.out)[0][col]) == 0.0

    def test_writes_out_file_and_reports(self, tmp_path, capsys):
        cfg = _bs_cfg()
        cfg["ie"]["report"] = str(tmp_path / "iters.csv")
        cfg["fd"] = {"M": 20, "N": [41], "dump": str(tmp_path / "field.csv"), "dump_binary": str(tmp_path / "f.bin")}
        path = _write(tmp_path, cfg)
        out = tmp_path / "prices.csv"
        assert _run(capsys, "price", "--config", path, "--method", "ie", "--out", str(out))[0] == EXIT_OK
        assert _run(capsys, "price", "--config", path, "--method", "fd")[0] == EXIT_OK
        assert out.read_text().startswith("point,t,s_1,regime,value\n")
        assert (tmp_path / "iters.csv").read_text().startswith("iter,v_norm_diff,wall_time_ms\n")
        assert (tmp_path / "f.bin").read_bytes()[:4] == b"TCRT"
        assert len((tmp_path / "field.csv").read_text().splitlines()) == 1 + 21 * 41


class TestBoundsCommands:
    def test_compare_columns_and_psi_hat(self, capsys):
        code, out = _run(capsys, "bounds-compare", "--config", str(CONFIGS / "negative_gap_call.json"))
        assert code == EXIT_OK
        rows = _rows(out.out)
        assert list(rows[0]) == ["t", "s", "psi", "psi_bar", "psi_hat", "in_D", "diff"]
        assert len(rows) == 200 * 200
        for r in rows[::97]:
            if r["in_D"] == "true":
                assert float(r["psi_hat"]) <= min(float(r["psi"]), float(r["psi_bar"]))
        diffs = [float(r["diff"]) for r in rows if r["in_D"] == "true"]
        assert max(diffs) > 1e-6 and min(diffs) < -1e-6

    @pytest.mark.parametrize("name", ["positive_gap_call.json", "negative_gap_call.json"])
    def test_certify_measure_dominated(self, capsys, name):
        code, out = _run(capsys, "certify", "--config", str(CONFIGS / name), "--measure")
        assert code == EXIT_OK
        assert all(r["dominated"] == "true" for r in _rows(out.out))

    def test_certify_exact_reference(self, tmp_path, capsys):
        cfg = json.loads((CONFIGS / "positive_gap_call.json").read_text())
        cfg["boundary"] = {"kind": "frozen-bsm"}
        cfg["bounds"]["reference"] = "frozen-bsm"
        code, out = _run(capsys, "certify", "--config", _write(tmp_path, cfg))
        assert code == EXIT_OK
        assert all(float(r["certified"]) == 0.0 for r in _rows(out.out))

    def test_size_domain(self, tmp_path, capsys):
        cfg = json.loads((CONFIGS / "positive_gap_call.json").read_text())
        cs = []
        for tol in (1.0, 0.1):
            cfg["bounds"]["tolerance"] = tol
            code, out = _run(capsys, "size-domain", "--config", _write(tmp_path, cfg))
            assert code == EXIT_OK
            row = _rows(out.out)[0]
            assert float(row["achieved"]) <= tol
            cs.append(float(row["c"]))
        assert cs[0] < cs[1]


class TestDeterminism:
    @pytest.mark.parametrize("method", ["mc", "ie"])
    def test_byte_identical_across_threads(self, tmp_path, capsys, method):
        cfg = json.loads((CONFIGS / "two_regime_call.json").read_text())
        cfg["mc"] = {"n_paths": 120000, "batch_size": 10000}
        cfg["ie"] = {"n_t": 11, "n_s": [61], "v_panels": 4}
        path = _write(tmp_path, cfg)
        outs = []
        for threads in ("1", "2", "8"):
            code, out = _run(capsys, "price", "--config", path, "--method", method, "--threads", threads,
                             "--seed", "7")
            assert code == EXIT_OK
            outs.append(out.out.encode())
        assert outs[0] == outs[1] == outs[2]


def test_console_entry_point(tmp_path):
    path = _write(tmp_path, _bs_cfg())
    proc = subprocess.run([sys.executable, "-m", "trunccert.cli", "validate", "--config", path],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("quantity,regime,l,m,value\n")
