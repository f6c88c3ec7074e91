import numpy as np
import pytest

from latentmarkov import (
    InitialSpec,
    MeasurementSpec,
    ModelParams,
    ModelSpec,
    PanelDataset,
    TransitionSpec,
    compile_model,
    e_step,
    fit,
    m_step,
    simulate_panel,
)
from latentmarkov.em import EMError, default_threads

from conftest import brute_force_joint, random_params


def two_state_truth(T=4, r=2, sep=0.85):
    phi = np.array([[sep, 1 - sep], [1 - sep, sep]])
    return ModelParams(2, T, (2,) * r, tuple((j,) for j in range(r)), np.array([0.55, 0.45]),
                       np.tile([[0.85, 0.15], [0.2, 0.8]], (T - 1, 1, 1)), [np.tile(phi, (T, 1, 1))] * r)


@pytest.fixture(scope="module")
def panel():
    return simulate_panel(two_state_truth(), 400, seed=11)


def test_expected_counts_match_enumeration(rng):
    params = random_params(rng, 2, 3, (3,))
    y = rng.integers(0, 3, size=(6, 3, 1))
    counts, ll = e_step(params, PanelDataset(y, (3,)), ModelSpec(2))
    a1 = np.zeros(2)
    atrans = np.zeros((2, 2, 2))
    aresp = np.zeros((3, 2, 3))
    total_ll = 0.0
    for yi in y:
        joint = brute_force_joint(params, yi)
        f = sum(joint.values())
        total_ll += np.log(f)
        for path, p in joint.items():
            a1[path[0]] += p / f
            for t in range(1, 3):
                atrans[t - 1, path[t - 1], path[t]] += p / f
            for t in range(3):
                aresp[t, path[t], yi[t, 0]] += p / f
    assert ll == pytest.approx(total_ll, abs=1e-10)
    np.testing.assert_allclose(counts.a1, a1, atol=1e-12)
    np.testing.assert_allclose(counts.atrans, atrans, atol=1e-12)
    np.testing.assert_allclose(counts.aresp[0], aresp, atol=1e-12)
    assert counts.check() == []


def test_closed_form_m_step(rng):
    params = random_params(rng, 3, 4, (2, 3))
    y = np.stack([rng.integers(0, 2, (30, 4)), rng.integers(0, 3, (30, 4))], axis=-1)
    data = PanelDataset(y, (2, 3))
    counts, _ = e_step(params, data, ModelSpec(3))
    new = m_step(counts, ModelSpec(3), params, data=data)
    np.testing.assert_allclose(new.pi, counts.a1 / counts.n)
    np.testing.assert_allclose(new.Pi, counts.atrans / counts.atrans.sum(-1, keepdims=True))
    np.testing.assert_allclose(new.phi[1], counts.aresp[1] / counts.aresp[1].sum(-1, keepdims=True))


def test_homogeneous_m_step_pools_occasions(rng):
    params = random_params(rng, 2, 4, (2,))
    params.Pi = np.tile(params.Pi[0], (3, 1, 1))
    data = PanelDataset(rng.integers(0, 2, (40, 4, 1)), (2,))
    spec = ModelSpec(2, transition=TransitionSpec("homogeneous"))
    counts, _ = e_step(params, data, spec)
    new = m_step(counts, spec, params, data=data)
    pooled = counts.atrans.sum(0)
    for t in range(3):
        np.testing.assert_allclose(new.Pi[t], pooled / pooled.sum(-1, keepdims=True))


def test_zero_count_rows_keep_previous_values(rng):
    # one state never visited: its rows keep their previous probabilities
    params = random_params(rng, 2, 2, (2,))
    params.pi = np.array([1.0, 0.0])
    params.Pi = np.array([[[1.0, 0.0], [0.3, 0.7]]])
    data = PanelDataset(rng.integers(0, 2, (10, 2, 1)), (2,))
    counts, _ = e_step(params, data, ModelSpec(2))
    new = m_step(counts, ModelSpec(2), params, data=data)
    np.testing.assert_allclose(new.Pi[0, 1], [0.3, 0.7])
    np.testing.assert_allclose(new.phi[0][:, 1], params.phi[0][:, 1])


@pytest.mark.parametrize(
    "spec",
    [
        ModelSpec(2),
        ModelSpec(2, measurement=MeasurementSpec("time_invariant"), transition=TransitionSpec("homogeneous")),
        ModelSpec(2, measurement=MeasurementSpec("rasch")),
        ModelSpec(3, transition=TransitionSpec("homogeneous", structure="tridiagonal")),
        ModelSpec(3, transition=TransitionSpec("linear", structure="equal_off_diagonal")),
        ModelSpec(2, initial=InitialSpec("uniform"), transition=TransitionSpec("partial", t_bar=2)),
        ModelSpec(3, transition=TransitionSpec("logit", link="global")),
    ],
    ids=["free", "homogeneous", "rasch", "tridiagonal", "linear", "partial", "global-logit"],
)
def test_loglik_never_decreases(panel, spec):
    res = fit(panel, spec, starts=1, seed=3, max_iter=400)
    steps = np.diff(res.trace)
    assert steps.min() >= -1e-10
    assert res.loglik == pytest.approx(res.model.loglik(res.states), abs=1e-8)


def test_fit_recovers_parameters(panel):
    truth = two_state_truth()
    res = fit(panel, ModelSpec(2, measurement=MeasurementSpec("time_invariant"),
                               transition=TransitionSpec("homogeneous")), starts=3)
    assert res.converged
    np.testing.assert_allclose(res.params.phi[0][0], truth.phi[0][0], atol=0.06)
    np.testing.assert_allclose(res.params.Pi[0], truth.Pi[0], atol=0.08)


def test_canonical_order_puts_low_responders_first(panel):
    res = fit(panel, ModelSpec(2, measurement=MeasurementSpec("time_invariant"),
                               transition=TransitionSpec("homogeneous")), starts=2)
    assert res.params.phi[0][0, 0, 1] < res.params.phi[0][0, 1, 1]


def test_occasionwise_relabelling_of_the_free_model(panel):
    model = compile_model(ModelSpec(2), panel)
    res = fit(panel, ModelSpec(2), starts=1, model=model)
    # swap the labels at occasion 2 only: same likelihood, canonical form restores it
    perms = np.array([[0, 1], [0, 1], [1, 0], [0, 1]])
    swapped = [c.permute_occasions(s, perms) for c, s in zip(model.components, res.states)]
    assert model.loglik(swapped) == pytest.approx(res.loglik, abs=1e-9)
    back, _ = model.canonicalize(swapped)
    for a, b in zip(back, res.states):
        np.testing.assert_allclose(a, b)


def test_nested_fits_are_ordered(panel):
    free = fit(panel, ModelSpec(2), starts=2)
    homog = fit(panel, ModelSpec(2, transition=TransitionSpec("homogeneous")), starts=2)
    assert free.loglik >= homog.loglik - 1e-8


def test_same_seed_same_result_and_threads_do_not_matter(panel):
    spec = ModelSpec(2, transition=TransitionSpec("homogeneous"))
    a = fit(panel, spec, starts=3, seed=5, threads=1)
    b = fit(panel, spec, starts=3, seed=5, threads=3)
    assert a.loglik == b.loglik
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())
    assert [s.loglik for s in a.start_summaries] == [s.loglik for s in b.start_summaries]


def test_thread_default_from_environment(monkeypatch):
    monkeypatch.setenv("LATENTMARKOV_THREADS", "4")
    assert default_threads() == 4
    monkeypatch.setenv("LATENTMARKOV_THREADS", "many")
    assert default_threads() == 1


def test_max_iter_reports_non_convergence(panel):
    res = fit(panel, ModelSpec(2), starts=0, max_iter=1)
    assert not res.converged
    assert res.iterations == 1


def test_start_summaries(panel):
    res = fit(panel, ModelSpec(2), starts=2, seed=1)
    assert [s.start for s in res.start_summaries] == ["deterministic", "random-1", "random-2"]
    assert res.loglik == pytest.approx(max(s.loglik for s in res.start_summaries if s.converged), abs=1e-8)


def test_aggregated_and_subject_likelihoods_agree(panel):
    spec = ModelSpec(2, transition=TransitionSpec("homogeneous"))
    agg = compile_model(spec, panel, aggregate=True)
    subj = compile_model(spec, panel, aggregate=False)
    assert len(agg.units.weights) < panel.n
    states = agg.deterministic_start()
    assert agg.loglik(states) == pytest.approx(subj.loglik(states), abs=1e-9)


def test_weights_act_as_replication(rng):
    y = rng.integers(0, 2, (5, 3, 1))
    w = np.array([1.0, 2.0, 3.0, 1.0, 2.0])
    weighted = PanelDataset(y, (2,), weights=w)
    replicated = PanelDataset(np.repeat(y, w.astype(int), axis=0), (2,))
    params = random_params(rng, 2, 3, (2,))
    _, ll_w = e_step(params, weighted, ModelSpec(2))
    _, ll_r = e_step(params, replicated, ModelSpec(2))
    assert ll_w == pytest.approx(ll_r, abs=1e-10)


def test_zero_probability_pattern_is_reported(rng):
    params = random_params(rng, 2, 2, (2,))
    params.phi = [np.tile([[1.0, 0.0], [1.0, 0.0]], (2, 1, 1))]
    data = PanelDataset(np.array([[[0], [1]]]), (2,))
    with pytest.raises(EMError, match="zero probability"):
        e_step(params, data, ModelSpec(2))


def test_fisher_scoring_leaves_rows_without_counts_alone():
    from latentmarkov.blocks import LinkBlock, fisher_scoring, block_information

    # two rows with their own logit; the second row has no expected counts
    D = np.zeros((2, 2, 2))
    D[0, 1, 0] = 1.0
    D[1, 1, 1] = 1.0
    block = LinkBlock(D, "multinomial")
    counts = np.array([[30.0, 10.0], [0.0, 0.0]])
    theta0 = np.array([0.0, 0.7])
    assert np.linalg.matrix_rank(block_information(block, theta0, counts)) == 1
    theta, _, _ = fisher_scoring(block, counts, theta0)
    assert theta[0] == pytest.approx(np.log(10 / 30), abs=1e-8)
    assert theta[1] == pytest.approx(0.7)


def test_information_stays_finite_for_vanishing_probabilities():
    from latentmarkov.blocks import LinkBlock, block_information

    D = np.zeros((1, 3, 1))
    D[0, 1, 0] = 1.0
    D[0, 2, 0] = 2.0
    block = LinkBlock(D, "multinomial")
    F = block_information(block, np.array([-300.0]), np.array([[5.0, 0.0, 0.0]]))
    assert np.all(np.isfinite(F))


def test_state_list_must_match_the_components(panel):
    model = compile_model(ModelSpec(2), panel)
    states = model.deterministic_start()
    with pytest.raises(ValueError, match="component states"):
        model.loglik(states[:-1])
