"""Acceptance checks, one per numbered criterion.

Each check returns ``(passed, detail)`` and prints a ``PASS``/``FAIL`` line.
Run through pytest, or directly::

    python tests/test_acceptance.py          # all criteria
    python tests/test_acceptance.py 1 4 7    # a subset
"""
import functools
import itertools
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import brute_force_joint, central_difference, emission_of, random_params  # noqa: E402

from latentmarkov import (  # noqa: E402
    InitialSpec,
    MeasurementSpec,
    ModelParams,
    ModelSpec,
    MultilevelParams,
    MultilevelSpec,
    PanelDataset,
    TransitionSpec,
    compile_model,
    count_free_parameters,
    fit,
    fit_multilevel,
    infer,
    information_criteria,
    lr_test,
    posteriors,
    simulate_multilevel,
    simulate_panel,
    viterbi,
    write_panel,
)
from latentmarkov.cli import main as cli_main  # noqa: E402
from latentmarkov.em import e_step_states  # noqa: E402
from latentmarkov.multilevel import MultilevelModel  # noqa: E402
from latentmarkov.params import Dims  # noqa: E402

CRITERIA = {}


def criterion(number, title):
    def register(fn):
        CRITERIA[number] = (title, fn)
        return fn
    return register


def report(number, passed, detail):
    title = CRITERIA[number][0]
    print(f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {title} ({detail})", flush=True)


# ---------------------------------------------------------------------------
# 1: forward recursion against path enumeration

@criterion(1, "forward log-likelihood equals the brute-force path sum")
def likelihood_oracle():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 4))
        T = int(rng.integers(1, 7))
        levels = tuple(int(v) for v in rng.integers(2, 4, size=int(rng.integers(1, 3))))
        params = random_params(rng, k, T, levels)
        y = np.stack([rng.integers(0, lv, size=(3, T)) for lv in levels], axis=-1)
        lat = posteriors(params.pi, params.Pi, emission_of(params, y))
        for i in range(len(y)):
            exact = np.log(sum(brute_force_joint(params, y[i]).values()))
            worst = max(worst, abs(lat.log_f[i] - exact))
    elapsed = time.perf_counter() - start
    return worst < 1e-10 and elapsed < 10, f"max error {worst:.2e}, {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# 2 and 3: monotone EM across every built-in constraint, then posterior identities

def constraint_specs(k):
    M, I, Tr = MeasurementSpec, InitialSpec, TransitionSpec
    specs = {
        "free": ModelSpec(k),
        "time-invariant": ModelSpec(k, measurement=M("time_invariant")),
        "rasch": ModelSpec(k, measurement=[M("rasch", variables=(0,)), M("time_invariant", variables=(1,))]),
        "link-state-cut": ModelSpec(k, measurement=[M("time_invariant", variables=(0,)),
                                                    M("link", variables=(1,), link="global", design="state_cut")]),
        "initial-uniform": ModelSpec(k, initial=I("uniform")),
        "initial-logit": ModelSpec(k, initial=I("logit", link="global")),
        "homogeneous": ModelSpec(k, transition=Tr("homogeneous")),
        "partial": ModelSpec(k, transition=Tr("partial", t_bar=2)),
        "tridiagonal": ModelSpec(k, transition=Tr("homogeneous", structure="tridiagonal")),
        "upper-triangular": ModelSpec(k, transition=Tr("free", structure="upper_triangular")),
        "logit-multinomial": ModelSpec(k, transition=Tr("logit")),
        "logit-global": ModelSpec(k, transition=Tr("logit", link="global")),
        "covariate-measurement": ModelSpec(k, measurement=M("covariate"), covariates=("x",)),
        "covariate-latent": ModelSpec(k, initial=I("covariate"), transition=Tr("covariate"), covariates=("x",)),
        "bivariate": ModelSpec(k, measurement=M("bivariate"), covariates=("x",)),
    }
    for structure in ("equal_off_diagonal", "symmetric", "upper_triangular", "tridiagonal", "identity"):
        specs["linear-" + structure] = ModelSpec(k, transition=Tr("linear", structure=structure))
    return specs


@functools.cache
def monotonicity_fits():
    # iterations are capped: every iteration taken is checked, and covariate
    # fits on pure noise can drift towards infinite coefficients for a long time
    out = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n, T = 80, 4
        y = np.stack([rng.integers(0, 2, (n, T)), rng.integers(0, 3, (n, T))], axis=-1)
        data = PanelDataset(y, (2, 3), covariates=rng.normal(size=(n, T, 1)), covariate_names=("x",))
        k = 2 + seed % 2
        for name, spec in constraint_specs(k).items():
            res = fit(data, spec, starts=0, max_iter=20 if name == "bivariate" else 150)
            out.append((seed, name, res))
    return out


@criterion(2, "EM log-likelihood never decreases")
def em_monotone():
    fits = monotonicity_fits()
    worst = min(float(np.diff(r.trace).min()) for _, _, r in fits)
    return worst >= -1e-10, f"{len(fits)} fits, most negative step {worst:.2e}"


@criterion(3, "posterior and expected-count identities")
def posterior_identities():
    worst = 0.0
    problems = 0
    fits = monotonicity_fits()
    for _, _, res in fits:
        counts, _, lat = e_step_states(res.model, res.states)
        worst = max(worst,
                    np.max(np.abs(lat.post_state.sum(-1) - 1.0)),
                    np.max(np.abs(lat.post_pair.sum(-1) - lat.post_state[:, :-1]), initial=0.0),
                    np.max(np.abs(lat.post_pair.sum(-2) - lat.post_state[:, 1:]), initial=0.0))
        problems += len(counts.check(1e-10))
    return worst < 1e-10 and problems == 0, f"{len(fits)} fits, max deviation {worst:.2e}, {problems} count violations"


# ---------------------------------------------------------------------------
# 4: Viterbi

@criterion(4, "Viterbi path attains the brute-force maximum")
def viterbi_exact():
    misses = 0
    for seed in range(200):
        rng = np.random.default_rng(10_000 + seed)
        k, T = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        levels = (int(rng.integers(2, 4)),)
        params = random_params(rng, k, T, levels)
        y = np.stack([rng.integers(0, levels[0], size=(1, T))], axis=-1)
        res = viterbi(params.pi, params.Pi, emission_of(params, y))
        joint = brute_force_joint(params, y[0])
        best = max(joint.values())
        if not (np.isclose(np.exp(res.log_joint[0]), best, rtol=1e-10, atol=0)
                and np.isclose(joint[tuple(res.path[0])], best, rtol=1e-10, atol=0)):
            misses += 1
    phi = np.array([[[0.9, 0.1], [0.1, 0.9]]] * 2)
    worked = ModelParams(2, 2, (2,), ((0,),), np.array([0.6, 0.4]), np.array([[[0.7, 0.3], [0.2, 0.8]]]), [phi])
    y = np.array([[[1], [1]]])
    res = viterbi(worked.pi, worked.Pi, emission_of(worked, y))
    path_ok = res.path[0].tolist() == [1, 1]
    joint = float(np.exp(res.log_joint[0]))
    ok = misses == 0 and path_ok and abs(joint - 0.2592) < 1e-12
    return ok, f"{misses} misses in 200; worked path {res.path[0].tolist()} (0-based), joint {joint:.4f}"


# ---------------------------------------------------------------------------
# 5: score against finite differences

def _score_error(model, states):
    theta = model.coords(states)
    states = model.states_from_coords(theta, states)
    score = model.score_states(states)
    fd = central_difference(lambda th: model.loglik(model.states_from_coords(th, states)), theta)
    return float(np.max(np.abs(score - fd)) / np.max(np.abs(fd)))


def _clustered_panel(rng, H=30, size=6, T=3):
    y = rng.integers(0, 2, size=(H * size, T, 2))
    x = rng.normal(size=(H * size, T, 1))
    return PanelDataset(y, (2, 2), covariates=x, covariate_names=("x",), cluster=np.repeat(np.arange(H), size))


@criterion(5, "score equals central differences of the log-likelihood")
def score_check():
    rng = np.random.default_rng(55)
    data = PanelDataset(rng.integers(0, 3, size=(60, 3, 2)), (3, 3),
                        covariates=rng.normal(size=(60, 3, 1)), covariate_names=("x",))
    binary = PanelDataset(rng.integers(0, 2, size=(60, 4, 3)), (2, 2, 2))
    cases = {
        "basic": (ModelSpec(2), data),
        "rasch": (ModelSpec(3, measurement=MeasurementSpec("rasch")), binary),
        "homogeneous": (ModelSpec(2, transition=TransitionSpec("homogeneous")), data),
        "tridiagonal": (ModelSpec(3, transition=TransitionSpec("homogeneous", structure="tridiagonal")), data),
        "covariate-measurement": (ModelSpec(2, measurement=MeasurementSpec("covariate"), covariates=("x",)), data),
        "covariate-latent": (ModelSpec(2, initial=InitialSpec("covariate"), transition=TransitionSpec("covariate"),
                                       covariates=("x",)), data),
    }
    errors = {}
    for name, (spec, d) in cases.items():
        model = compile_model(spec, d)
        errors[name] = _score_error(model, model.random_start(np.random.default_rng(1)))
    ml = MultilevelModel(MultilevelSpec(2, 2, measurement=MeasurementSpec("time_invariant"), covariates=("x",)),
                         _clustered_panel(rng))
    errors["multilevel-m2"] = _score_error(ml, ml.random_start(np.random.default_rng(2)))
    worst = max(errors, key=errors.get)
    return all(e <= 1e-6 for e in errors.values()), f"{len(errors)} families, worst {worst} {errors[worst]:.1e}"


# ---------------------------------------------------------------------------
# 6 and 7

@criterion(6, "binomial information for one state and one occasion")
def binomial_information():
    y = np.zeros((100, 1, 1), dtype=int)
    y[:60] = 1
    res = fit(PanelDataset(y, (2,)), ModelSpec(1), starts=0)
    info = float(infer(res).value_information[0, 0])
    expected = 100 / (0.6 * 0.4)
    rel = abs(info - expected) / expected
    return rel < 1e-4, f"{info:.4f} vs {expected:.4f}, relative error {rel:.1e}"


@criterion(7, "Rasch against free measurement degrees of freedom")
def rasch_df():
    dims = Dims(3, 5, (2,))
    free = count_free_parameters(ModelSpec(3), dims)
    rasch = count_free_parameters(ModelSpec(3, measurement=MeasurementSpec("rasch")), dims)
    return free - rasch == 8, f"{free} - {rasch} = {free - rasch}"


# ---------------------------------------------------------------------------
# 8: boundary LR test calibration

@criterion(8, "chi-bar-squared LR test size under the null")
def chibar_calibration():
    start = time.perf_counter()
    k, T, n = 3, 4, 500
    phi = np.array([[0.8, 0.15, 0.05], [0.15, 0.7, 0.15], [0.05, 0.15, 0.8]])
    truth = ModelParams(k, T, (3, 3), ((0,), (1,)), np.full(k, 1 / k), np.tile(np.eye(k), (T - 1, 1, 1)),
                        [np.tile(phi, (T, 1, 1))] * 2)
    null = ModelSpec(k, measurement=MeasurementSpec("time_invariant"),
                     transition=TransitionSpec("linear", structure="identity"))
    full = ModelSpec(k, measurement=MeasurementSpec("time_invariant"),
                     transition=TransitionSpec("linear", structure="equal_off_diagonal"))
    rejections = 0
    reps = 500
    for rep in range(reps):
        data = simulate_panel(truth, n, seed=20_000 + rep)
        r0 = fit(data, null, starts=0)
        init = r0.params.copy()
        init.coef = {}
        init.Pi = np.tile(0.98 * np.eye(k) + 0.01 * (1 - np.eye(k)), (T - 1, 1, 1))
        r1 = fit(data, full, starts=0, init=init)
        # the null lies inside the full model, so its maximum is at least ll0
        test = lr_test(max(r1.loglik, r0.loglik), r0.loglik, "chibar", weights=(0.5, 0.5))
        rejections += test.p_value < 0.05
    rate = rejections / reps
    elapsed = time.perf_counter() - start
    return 0.03 <= rate <= 0.07 and elapsed < 600, f"rejection rate {rate:.3f}, {elapsed:.0f} s"


# ---------------------------------------------------------------------------
# 9 and 10: recovery and BIC selection

def separated_truth(T=6, items=4):
    phi = np.array([[0.9, 0.1], [0.1, 0.9]])
    return ModelParams(2, T, (2,) * items, tuple((j,) for j in range(items)), np.array([0.5, 0.5]),
                       np.tile([[0.9, 0.1], [0.1, 0.9]], (T - 1, 1, 1)), [np.tile(phi, (T, 1, 1))] * items)


@criterion(9, "parameter recovery for a well separated two-state model")
def recovery():
    truth = separated_truth()
    good = 0
    worst = []
    for seed in range(1000, 1020):
        data = simulate_panel(truth, 1000, seed=seed)
        res = fit(data, ModelSpec(2), starts=3, seed=seed)
        err = max(np.abs(res.params.pi - truth.pi).max(), np.abs(res.params.Pi - truth.Pi).max(),
                  max(np.abs(a - b).max() for a, b in zip(res.params.phi, truth.phi)))
        worst.append(err)
        good += err <= 0.05
    return good >= 18, f"{good}/20 within 0.05, largest error {max(worst):.3f}"


@criterion(10, "BIC selects the true number of states")
def bic_selection():
    truth = separated_truth()
    picks = []
    model = {"measurement": {"kind": "time_invariant"}, "initial": {"kind": "free"},
             "transition": {"kind": "homogeneous"}, "k": 1}
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for seed in range(3000, 3020):
            write_panel(simulate_panel(truth, 1000, seed=seed), tmp / "panel.csv")
            cfg = tmp / "select.yaml"
            cfg.write_text(yaml.safe_dump({"data": {"path": str(tmp / "panel.csv")}, "model": model,
                                           "options": {"starts": 2, "seed": seed, "k_range": [1, 4]}}))
            code = cli_main(["select", "--config", str(cfg), "--out", str(tmp / "select.json")])
            picks.append(json.loads((tmp / "select.json").read_text())["selected_k"] if code == 0 else None)
    hits = sum(p == 2 for p in picks)
    return hits >= 16, f"k=2 chosen in {hits}/20, picks {picks}"


# ---------------------------------------------------------------------------
# 11: nesting

@criterion(11, "nested specifications reproduce each other's log-likelihood")
def nesting():
    rng = np.random.default_rng(111)
    n, T = 120, 4
    x = rng.normal(size=(n, T, 1))
    data = PanelDataset(rng.integers(0, 3, size=(n, T, 2)), (3, 3), covariates=x, covariate_names=("x",))
    diffs = {}

    # covariate measurement with zero slopes against the time-invariant model
    plain = compile_model(ModelSpec(2, measurement=MeasurementSpec("time_invariant")), data)
    pstates = plain.random_start(rng)
    cov = compile_model(ModelSpec(2, measurement=MeasurementSpec("covariate"), covariates=("x",)), data)
    cstates = list(cov.random_start(rng))
    cstates[0], cstates[1] = pstates[0], pstates[1]
    for b in range(2):
        phi = pstates[2 + b][0]
        alpha = np.log(phi[:, 1:]) - np.log(phi[:, :1])
        cstates[2 + b] = np.concatenate([alpha.ravel(), np.zeros(2)])
    diffs["zero measurement slopes"] = abs(cov.loglik(cstates) - plain.loglik(pstates))

    # covariate initial and transition models with zero slopes against a homogeneous chain
    homog = compile_model(ModelSpec(3, transition=TransitionSpec("homogeneous")), data)
    hstates = homog.random_start(rng)
    hp = homog.params_from_states(hstates)
    lat = compile_model(ModelSpec(3, initial=InitialSpec("covariate"), transition=TransitionSpec("covariate"),
                                  covariates=("x",)), data)
    init_coef = np.concatenate([np.log(hp.pi[1:] / hp.pi[0]), np.zeros(2)])
    P = hp.Pi[0]
    trans_alpha = [np.log(P[u, v] / P[u, u]) for u in range(3) for v in range(3) if v != u]
    lstates = [init_coef, np.concatenate([trans_alpha, np.zeros(6)])] + list(hstates[2:])
    diffs["zero latent slopes"] = abs(lat.loglik(lstates) - homog.loglik(hstates))

    # one cluster class against the global-logit covariate model
    clustered = PanelDataset(data.responses, data.levels, covariates=x, covariate_names=("x",),
                             cluster=np.repeat(np.arange(30), 4))
    ml = MultilevelModel(MultilevelSpec(2, 1, measurement=MeasurementSpec("time_invariant"), covariates=("x",)),
                         clustered)
    mstates = ml.random_start(rng)
    flat = compile_model(ModelSpec(2, measurement=MeasurementSpec("time_invariant"),
                                   initial=InitialSpec("covariate", link="global"),
                                   transition=TransitionSpec("covariate", link="global"), covariates=("x",)),
                         clustered)
    diffs["single cluster class"] = abs(ml.loglik(mstates) - flat.loglik([mstates[1], mstates[2], *mstates[3:]]))

    # homogeneous and time-invariant fits evaluated in the free model
    res = fit(data, ModelSpec(2, measurement=MeasurementSpec("time_invariant"),
                              transition=TransitionSpec("homogeneous")), starts=1)
    free = compile_model(ModelSpec(2), data)
    diffs["homogeneous inside free"] = abs(free.loglik(free.states_from_params(res.params)) - res.loglik)

    worst = max(diffs, key=diffs.get)
    return all(d < 1e-10 for d in diffs.values()), f"{len(diffs)} reductions, worst {worst} {diffs[worst]:.1e}"


# ---------------------------------------------------------------------------
# 12: determinism

@criterion(12, "fits and reports are identical across runs and thread counts")
def determinism():
    truth = separated_truth(T=4, items=2)
    data = simulate_panel(truth, 300, seed=12)
    spec = ModelSpec(2, transition=TransitionSpec("homogeneous"))
    runs = [fit(data, spec, starts=3, seed=7, threads=t) for t in (1, 1, 3)]
    same_fit = all(r.loglik == runs[0].loglik and np.array_equal(r.params.flat(), runs[0].params.flat())
                   for r in runs)

    phi = np.tile([[0.85, 0.15], [0.15, 0.85]], (3, 1, 1))
    mp = MultilevelParams(2, 2, 3, (2, 2), ((0,), (1,)), np.array([0.3]), np.array([0.0, 1.0]),
                          np.array([1.5, 2.0, -2.0]), [phi, phi.copy()])
    mspec = MultilevelSpec(2, 2, measurement=MeasurementSpec("time_invariant"))
    mdata = simulate_multilevel(mp, mspec, np.repeat(np.arange(40), 5), 3)
    mruns = [fit_multilevel(mdata, mspec, starts=2, seed=4, threads=t, max_iter=200) for t in (1, 2)]
    same_ml = mruns[0].loglik == mruns[1].loglik and np.array_equal(mruns[0].params.trans_coef,
                                                                    mruns[1].params.trans_coef)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        write_panel(data, tmp / "panel.csv")
        cfg = tmp / "fit.yaml"
        cfg.write_text(yaml.safe_dump({"data": {"path": str(tmp / "panel.csv")},
                                       "model": {"k": 2, "transition": {"kind": "homogeneous"}},
                                       "options": {"starts": 3, "seed": 7}}))
        blobs = []
        for i, threads in enumerate((1, 1, 3)):
            out = tmp / f"fit{i}.json"
            cli_main(["fit", "--config", str(cfg), "--out", str(out), "--threads", str(threads)])
            blobs.append(out.read_bytes())
        same_report = len(set(blobs)) == 1 and len(blobs[0]) > 0
    ok = same_fit and same_ml and same_report
    return ok, f"fit {same_fit}, multilevel {same_ml}, CLI report {same_report}"


# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, capsys):
    passed, detail = CRITERIA[number][1]()
    with capsys.disabled():
        print()
        report(number, passed, detail)
    assert passed, detail


if __name__ == "__main__":
    wanted = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    failed = 0
    for number in wanted:
        passed, detail = CRITERIA[number][1]()
        report(number, passed, detail)
        failed += not passed
    sys.exit(1 if failed else 0)
