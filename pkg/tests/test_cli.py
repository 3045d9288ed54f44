import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from semkit.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, TIMESERIES_COLUMNS, _cost, main
from semkit.config import load_case
from semkit.fielddump import read_fields

ROOT = __import__("pathlib").Path(__file__).resolve().parents[1]

SMALL = {
    "mesh": {"elements": [2, 2, 2], "extents": [[0, "2*pi"], [0, "2*pi"], [0, "2*pi"]], "periodic": [True, True, True]},
    "discretization": {"N": 4, "dt": 1e-3, "steps": 4},
    "physics": {"Re": 1600, "initial": "tgv"},
    "solver": {"pressure_tol": 1e-8, "velocity_tol": 1e-10},
    "execution": {"P": 2},
    "output": {"cadence": 2, "timeseries": "ts.csv", "ledger": "led.csv", "field_dump": "end.semf"},
}


def write_case(tmp_path, doc, name="case.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def run(args, capsys):
    code = main(args)
    err = capsys.readouterr().err
    return code, err


def test_run_writes_artifacts(tmp_path, capsys):
    case = write_case(tmp_path, SMALL)
    code, err = run(["run", case, "--out", str(tmp_path / "a")], capsys)
    assert code == EXIT_OK and err == ""
    rows = read_csv(tmp_path / "a" / "ts.csv")
    assert rows[0] == TIMESERIES_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == [0, 2, 4]
    vals = np.array(rows[1:], dtype=float)
    assert vals[0, 2] == pytest.approx(np.pi**3, rel=5e-3)
    assert np.all(np.diff(vals[:, 2]) < 0)
    assert np.all(vals[:, 5] < 0.25)
    led = read_csv(tmp_path / "a" / "led.csv")
    assert led[0] == ["region", "W", "Q", "count"] and any(r[0] == "step" for r in led)
    fields, N = read_fields(tmp_path / "a" / "end.semf")
    assert N == 4 and list(fields) == ["u", "v", "w", "p"] and fields["u"].shape == (8, 5, 5, 5)
    # the dump holds the full field assembled from both ranks
    assert np.abs(fields["u"]).max() > 0.5


def test_run_is_deterministic_and_partition_independent(tmp_path, capsys):
    case = write_case(tmp_path, SMALL)
    for sub in ("a", "b"):
        assert run(["run", case, "--out", str(tmp_path / sub)], capsys)[0] == EXIT_OK
    a = (tmp_path / "a" / "ts.csv").read_bytes()
    assert a == (tmp_path / "b" / "ts.csv").read_bytes()
    assert (tmp_path / "a" / "end.semf").read_bytes() == (tmp_path / "b" / "end.semf").read_bytes()
    serial = write_case(tmp_path, {**SMALL, "execution": {"P": 1}}, "serial.json")
    assert run(["run", serial, "--out", str(tmp_path / "s")], capsys)[0] == EXIT_OK
    x = np.array(read_csv(tmp_path / "a" / "ts.csv")[1:], dtype=float)
    y = np.array(read_csv(tmp_path / "s" / "ts.csv")[1:], dtype=float)
    np.testing.assert_allclose(x[:, :5], y[:, :5], rtol=1e-10)


def test_zero_velocity_case(tmp_path, capsys):
    doc = {**SMALL, "physics": {"Re": 10, "initial": "rest"}, "execution": {"P": 1}}
    doc["output"] = {"timeseries": "ts.csv", "ledger": None}
    case = write_case(tmp_path, doc)
    assert run(["run", case, "--out", str(tmp_path)], capsys)[0] == EXIT_OK
    rows = read_csv(tmp_path / "ts.csv")[1:]
    assert all(float(r[2]) == 0.0 and float(r[3]) == 0.0 for r in rows)
    assert not (tmp_path / "ledger.csv").exists()


def test_csv_format(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("LC_NUMERIC", "de_DE.UTF-8")
    case = write_case(tmp_path, {**SMALL, "execution": {"P": 1}})
    assert run(["run", case, "--out", str(tmp_path)], capsys)[0] == EXIT_OK
    raw = (tmp_path / "ts.csv").read_bytes()
    assert raw.count(b"\r\n") == 4 and b";" not in raw
    for row in read_csv(tmp_path / "ts.csv")[1:]:
        for cell in row:
            float(cell)
            assert "," not in cell


def test_invalid_case_exit_2(tmp_path, capsys):
    case = write_case(tmp_path, {**SMALL, "typo": 1})
    code, err = run(["run", case], capsys)
    assert code == EXIT_CONFIG
    msg = json.loads(err)
    assert msg["error"] == "config" and msg["exit_code"] == 2
    case = write_case(tmp_path, {**SMALL, "execution": {"P": 9}})
    assert run(["run", case], capsys)[0] == EXIT_CONFIG


def test_bad_seed_env_exit_2(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SEMKIT_SEED", "abc")
    doc = {**SMALL, "model": {"machines": [str(ROOT / "machines" / "xc40_like_noisy.json")], "pmax": 64, "trials": 5}}
    case = write_case(tmp_path, doc)
    code, err = run(["model", case, "--out", str(tmp_path)], capsys)
    assert code == EXIT_CONFIG and "SEMKIT_SEED" in json.loads(err)["message"]


def test_solver_failure_exit_3(tmp_path, capsys):
    doc = {**SMALL, "solver": {"pressure_tol": 1e-14, "max_iter": 2, "restart": 2}, "execution": {"P": 1}}
    case = write_case(tmp_path, doc)
    code, err = run(["run", case, "--out", str(tmp_path)], capsys)
    assert code == EXIT_SOLVER
    msg = json.loads(err)
    assert msg["error"] == "solver" and msg["step"] == 1 and "pressure" in msg


def test_io_failure_exit_4(tmp_path, capsys):
    code, err = run(["run", str(tmp_path / "nope.json")], capsys)
    assert code == EXIT_IO and json.loads(err)["error"] == "io"
    blocker = tmp_path / "file"
    blocker.write_text("")
    case = write_case(tmp_path, {**SMALL, "execution": {"P": 1}, "discretization": {"N": 2, "dt": 1e-3, "steps": 1}})
    assert run(["run", case, "--out", str(blocker / "sub")], capsys)[0] == EXIT_IO


def test_poisson_command(tmp_path, capsys):
    doc = {
        "mesh": {"elements": [2, 2, 2]},
        "discretization": {"N": 6},
        "poisson": {"solution": "sin(pi*x)*sin(pi*y)*sin(pi*z)", "orders": [2, 4, 6]},
        "execution": {"P": 2},
        "output": {"poisson": "conv.csv"},
    }
    case = write_case(tmp_path, doc)
    assert run(["poisson", case, "--out", str(tmp_path)], capsys)[0] == EXIT_OK
    rows = read_csv(tmp_path / "conv.csv")
    assert rows[0] == ["N", "dofs", "linf", "l2", "iters"]
    err = [float(r[2]) for r in rows[1:]]
    assert err[0] / err[1] > 10 and err[1] / err[2] > 10
    doc["mesh"]["periodic"] = [True, True, True]
    assert run(["poisson", write_case(tmp_path, doc), "--out", str(tmp_path)], capsys)[0] == EXIT_CONFIG


def _model_doc(**model):
    doc = dict(SMALL)
    doc["execution"] = {"P": 1, "seed": 4}
    doc["model"] = {"machines": [str(ROOT / "machines" / "xc40_like.json")], "pmin": 1, "pmax": 4096, **model}
    doc["output"] = {"model": "model.csv", "projection": "proj.csv"}
    return doc


def test_model_command(tmp_path, capsys):
    case = write_case(tmp_path, _model_doc(expected=True))
    assert run(["model", case, "--out", str(tmp_path)], capsys)[0] == EXIT_OK
    rows = read_csv(tmp_path / "model.csv")
    assert rows[0] == ["machine", "P", "Ta", "Tc", "T", "T_p99"]
    assert [int(r[1]) for r in rows[1:]] == [2**k for k in range(13)]
    for r in rows[1:]:
        assert float(r[4]) == pytest.approx(float(r[2]) + float(r[3]), rel=1e-15)
    lim = read_csv(tmp_path / "model_limit.csv")
    assert lim[0][:2] == ["machine", "P_star"] and len(lim) == 2
    cost = read_csv(tmp_path / "model_cost.csv")
    assert cost[0] == ["W_step", "Q_step", "n_allreduce", "n_gs", "n_p"]


def test_model_communication_free_machine(tmp_path, capsys):
    spec = json.loads((ROOT / "machines" / "xc40_like.json").read_text())
    spec["latency"] = {"kind": "constant", "value": 0.0}
    spec["inv_bandwidth_s_per_word"] = 0.0
    (tmp_path / "free.json").write_text(json.dumps(spec))
    case = write_case(tmp_path, _model_doc(expected=True, machines=["free.json"]))
    assert run(["model", case, "--out", str(tmp_path)], capsys)[0] == EXIT_OK
    for r in read_csv(tmp_path / "model.csv")[1:]:
        assert r[4] == r[2]
    assert read_csv(tmp_path / "model_limit.csv")[1][-1] == "1"


def test_model_seeded(tmp_path, capsys, monkeypatch):
    noisy = [str(ROOT / "machines" / "xc40_like_noisy.json")]
    case = write_case(tmp_path, _model_doc(machines=noisy, trials=20, pmax=256))
    out = []
    for sub, seed in (("a", "7"), ("b", "7"), ("c", "8")):
        monkeypatch.setenv("SEMKIT_SEED", seed)
        assert run(["model", case, "--out", str(tmp_path / sub)], capsys)[0] == EXIT_OK
        out.append((tmp_path / sub / "model.csv").read_bytes())
    assert out[0] == out[1] != out[2]
    monkeypatch.delenv("SEMKIT_SEED")
    assert run(["model", case, "--seed", "7", "--out", str(tmp_path / "d")], capsys)[0] == EXIT_OK
    assert (tmp_path / "d" / "model.csv").read_bytes() == out[0]


def test_project_command(tmp_path, capsys):
    base = json.loads((ROOT / "machines" / "xc40_like.json").read_text())
    fast = dict(base, name="fast", node_bandwidth_GBs=2 * base["node_bandwidth_GBs"],
                peak_flops_per_pe=2 * base["peak_flops_per_pe"])
    (tmp_path / "fast.json").write_text(json.dumps(fast))
    case = write_case(tmp_path, _model_doc())
    code, _ = run(["project", case, "--machine", str(ROOT / "machines" / "xc40_like.json"),
                   "--machine", str(tmp_path / "fast.json"), "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "proj.csv")
    assert rows[0] == ["machine", "P", "Ta", "Tc", "T", "speedup"]
    sp = [float(r[5]) for r in rows[1:] if r[0] == "fast"]
    assert all(s <= 2.0 for s in sp) and sp[0] == pytest.approx(2.0, rel=1e-12)
    assert all(a >= b for a, b in zip(sp, sp[1:]))


def test_model_needs_machine(tmp_path, capsys):
    case = write_case(tmp_path, _model_doc(machines=[]))
    assert run(["model", case], capsys)[0] == EXIT_CONFIG
    (tmp_path / "bad.json").write_text('{"name": "x"}')
    assert run(["model", case, "--machine", str(tmp_path / "bad.json")], capsys)[0] == EXIT_CONFIG


def test_run_cost_equals_analytic_cost(tmp_path, capsys):
    doc = _model_doc(cost="run", expected=True)
    measured = _cost(load_case(write_case(tmp_path, doc, "run.json")))
    p = measured.params
    analytic = _model_doc(cost="analytic", expected=True, i=p["i"], j=p["j"], m=p["m"],
                          coarse_iters=list(p["coarse_iters"]),
                          projection_added=p["projection_added"])
    for name, d in (("run", doc), ("analytic", analytic)):
        case = write_case(tmp_path, d, name + ".json")
        assert run(["model", case, "--out", str(tmp_path / name)], capsys)[0] == EXIT_OK
    for f in ("model.csv", "model_cost.csv", "model_limit.csv"):
        assert (tmp_path / "run" / f).read_bytes() == (tmp_path / "analytic" / f).read_bytes()


def test_console_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=str(ROOT / "src"))
    r = subprocess.run([sys.executable, "-m", "semkit", "--version"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and r.stdout.startswith("semkit")
    r = subprocess.run([sys.executable, "-m", "semkit", "run", str(tmp_path / "x.json")],
                       capture_output=True, text=True, env=env)
    assert r.returncode == EXIT_IO and json.loads(r.stderr)["exit_code"] == 4
