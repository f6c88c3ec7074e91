import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from latentmarkov import ModelParams, load_panel, simulate_panel, write_panel
from latentmarkov.cli import main


def truth(T=4):
    phi = np.tile([[0.85, 0.15], [0.15, 0.85]], (T, 1, 1))
    return ModelParams(2, T, (2, 2), ((0,), (1,)), np.array([0.6, 0.4]),
                       np.tile([[0.9, 0.1], [0.15, 0.85]], (T - 1, 1, 1)), [phi, phi.copy()])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_panel(simulate_panel(truth(), 150, seed=4), d / "panel.csv")
    return d


def write_config(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def model_doc(transition="homogeneous", structure=None):
    tr = {"kind": transition}
    if structure:
        tr["structure"] = structure
    return {"k": 2, "measurement": {"kind": "time_invariant"}, "initial": {"kind": "free"}, "transition": tr}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fitted(workdir):
    cfg = write_config(workdir / "fit.yaml", {"data": {"path": "panel.csv"}, "model": model_doc(),
                                              "options": {"starts": 2, "seed": 0}})
    out = workdir / "fit.json"
    assert run("fit", "--config", cfg, "--out", out) == 0
    return out


def test_fit_report_contents(fitted):
    rep = json.loads(fitted.read_text())
    for key in ("loglik", "params", "spec", "estimates", "aic", "bic", "data_digest", "converged", "identifiable"):
        assert key in rep
    assert rep["converged"] is True
    assert rep["g"] == 1 + 2 + 2 * 2
    assert all(e["se"] is not None for e in rep["estimates"])


def test_reports_are_byte_identical_across_runs_and_threads(workdir, fitted):
    cfg = str(workdir / "fit.yaml")
    again = workdir / "fit_again.json"
    threaded = workdir / "fit_threads.json"
    assert run("fit", "--config", cfg, "--out", again) == 0
    assert run("fit", "--config", cfg, "--out", threaded, "--threads", "3") == 0
    assert fitted.read_bytes() == again.read_bytes() == threaded.read_bytes()


def test_thread_count_from_environment(workdir, fitted, monkeypatch):
    monkeypatch.setenv("LATENTMARKOV_THREADS", "2")
    out = workdir / "fit_env.json"
    assert run("fit", "--config", workdir / "fit.yaml", "--out", out) == 0
    assert out.read_bytes() == fitted.read_bytes()


def test_non_convergence_exit_code(workdir):
    cfg = write_config(workdir / "short.yaml", {"data": "panel.csv", "model": {"k": 2},
                                                "options": {"max_iter": 2, "starts": 0}})
    assert run("fit", "--config", cfg, "--out", workdir / "short.json") == 2
    assert json.loads((workdir / "short.json").read_text())["converged"] is False


def test_input_errors_exit_with_one(workdir, capsys):
    missing = write_config(workdir / "missing.yaml", {"data": "nowhere.csv", "model": {"k": 2}})
    assert run("fit", "--config", missing) == 1
    nomodel = write_config(workdir / "nomodel.yaml", {"data": "panel.csv"})
    assert run("fit", "--config", nomodel) == 1
    badopt = write_config(workdir / "badopt.yaml", {"data": "panel.csv", "model": {"k": 2},
                                                    "options": {"sparkle": 1}})
    assert run("fit", "--config", badopt) == 1
    assert "sparkle" in capsys.readouterr().err


def test_both_covariate_schemes_refused(workdir, capsys):
    rng = np.random.default_rng(0)
    data = simulate_panel(truth(), 40, seed=1)
    text = write_panel(data).splitlines()
    rows = [text[0] + ",x"] + [line + f",{rng.normal():.4f}" for line in text[1:]]
    (workdir / "cov.csv").write_text("\n".join(rows) + "\n")
    cfg = write_config(workdir / "both.yaml", {
        "data": "cov.csv",
        "model": {"k": 2, "covariates": ["x"], "measurement": {"kind": "covariate"},
                  "initial": {"kind": "covariate"}, "transition": {"kind": "homogeneous"}},
    })
    assert run("fit", "--config", cfg) == 1
    assert "adopt only one scheme" in capsys.readouterr().err


def test_simulate_round_trips_through_the_reader(workdir, fitted):
    cfg = write_config(workdir / "sim.yaml", {"simulate": {"report": str(fitted), "n": 30}})
    out = workdir / "sim.csv"
    assert run("simulate", "--config", cfg, "--seed", 5, "--out", out) == 0
    data = load_panel(out)
    assert data.n == 30 and data.T == 4
    out2 = workdir / "sim2.csv"
    assert run("simulate", "--config", cfg, "--seed", 5, "--out", out2) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_decode_csv(workdir, fitted):
    cfg = write_config(workdir / "dec.yaml", {"data": "panel.csv", "decode": {"report": str(fitted)}})
    out = workdir / "dec.csv"
    assert run("decode", "--config", cfg, "--format", "csv", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 150 * 4


def test_select_picks_a_k(workdir):
    doc = {"data": "panel.csv", "model": model_doc(), "options": {"starts": 1}}
    cfg = write_config(workdir / "sel.yaml", doc)
    out = workdir / "sel.json"
    assert run("select", "--config", cfg, "--k-range", "1-3", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert [r["k"] for r in rep["rows"]] == [1, 2, 3]
    best = min(rep["rows"], key=lambda r: r["bic"])
    assert rep["selected_k"] == best["k"]


def test_select_needs_a_range(workdir):
    cfg = write_config(workdir / "sel2.yaml", {"data": "panel.csv", "model": model_doc()})
    assert run("select", "--config", cfg) == 1


def test_lrtest_chi2_and_chibar(workdir, fitted):
    free = write_config(workdir / "free.yaml", {"data": "panel.csv", "model": model_doc("free"),
                                                "options": {"starts": 1}})
    assert run("fit", "--config", free, "--out", workdir / "free.json") == 0
    cfg = write_config(workdir / "lr.yaml", {"lrtest": {"full": str(workdir / "free.json"),
                                                        "constrained": str(fitted), "distribution": "chi2"}})
    out = workdir / "lr.json"
    assert run("lrtest", "--config", cfg, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["df"] == 4
    assert 0.0 <= rep["p_value"] <= 1.0

    ident = write_config(workdir / "ident.yaml", {"data": "panel.csv",
                                                  "model": model_doc("linear", "identity"),
                                                  "options": {"starts": 1}})
    assert run("fit", "--config", ident, "--out", workdir / "ident.json") == 0
    full = write_config(workdir / "eq.yaml", {"data": "panel.csv",
                                              "model": model_doc("linear", "equal_off_diagonal"),
                                              "options": {"starts": 1}})
    assert run("fit", "--config", full, "--out", workdir / "eq.json") == 0
    cfg = write_config(workdir / "lr2.yaml", {"lrtest": {"full": str(workdir / "eq.json"),
                                                         "constrained": str(workdir / "ident.json"),
                                                         "distribution": "chibar", "weights": [0.5, 0.5]}})
    assert run("lrtest", "--config", cfg, "--out", workdir / "lr2.json") == 0


def test_lrtest_refuses_non_nested_models(workdir, fitted):
    free = workdir / "free.json"
    if not free.exists():
        pytest.skip("needs the free fit from the previous test")
    cfg = write_config(workdir / "lr_bad.yaml", {"lrtest": {"full": str(fitted), "constrained": str(free),
                                                            "distribution": "chi2"}})
    assert run("lrtest", "--config", cfg) == 1


def test_lrtest_null_key_message(workdir, fitted, capsys):
    path = workdir / "lr_null.yaml"
    path.write_text(f"lrtest: {{full: {fitted}, constrained: {fitted}, null: chi2}}\n")
    assert run("lrtest", "--config", path) == 1
    assert "distribution" in capsys.readouterr().err


def test_describe(workdir):
    cfg = write_config(workdir / "desc.yaml", {"data": "panel.csv", "model": model_doc()})
    out = workdir / "desc.json"
    assert run("describe", "--config", cfg, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["g"] == len(rep["parameters"]) == 7


def test_module_entry_point(workdir):
    cfg = write_config(workdir / "desc2.yaml", {"data": str(workdir / "panel.csv"), "model": model_doc()})
    proc = subprocess.run([sys.executable, "-m", "latentmarkov", "describe", "--config", cfg],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["n"] == 150
