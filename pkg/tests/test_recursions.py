"""Forward-backward against exhaustive path enumeration."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmarkov.recursions import backward, forward, posteriors

from conftest import brute_force_joint, brute_force_loglik, emission_of, random_params, sample_responses


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 3), T=st.integers(1, 5), l=st.integers(2, 3), seed=st.integers(0, 2**31))
def test_log_manifest_matches_enumeration(k, T, l, seed):
    rng = np.random.default_rng(seed)
    params = random_params(rng, k, T, (l, 2))
    y = sample_responses(rng, 4, T, (l, 2))
    _, _, log_f = forward(params.pi, params.Pi, emission_of(params, y))
    np.testing.assert_allclose(log_f, brute_force_loglik(params, y), rtol=0, atol=1e-10)


def test_posteriors_match_enumeration(rng):
    params = random_params(rng, 3, 4, (3,))
    y = sample_responses(rng, 5, 4, (3,))
    lat = posteriors(params.pi, params.Pi, emission_of(params, y))
    for i in range(5):
        joint = brute_force_joint(params, y[i])
        total = sum(joint.values())
        state = np.zeros((4, 3))
        pair = np.zeros((3, 3, 3))
        for path, p in joint.items():
            for t in range(4):
                state[t, path[t]] += p / total
            for t in range(1, 4):
                pair[t - 1, path[t - 1], path[t]] += p / total
        np.testing.assert_allclose(lat.post_state[i], state, atol=1e-12)
        np.testing.assert_allclose(lat.post_pair[i], pair, atol=1e-12)


def test_posterior_identities(rng):
    params = random_params(rng, 3, 6, (2, 3))
    y = sample_responses(rng, 50, 6, (2, 3))
    lat = posteriors(params.pi, params.Pi, emission_of(params, y))
    np.testing.assert_allclose(lat.post_state.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(lat.post_pair.sum(-1), lat.post_state[:, :-1], atol=1e-12)
    np.testing.assert_allclose(lat.post_pair.sum(-2), lat.post_state[:, 1:], atol=1e-12)


def test_backward_scaling_recovers_tail_probabilities(rng):
    params = random_params(rng, 2, 4, (2,))
    y = sample_responses(rng, 3, 4, (2,))
    em = emission_of(params, y)
    fwd, log_scale, _ = forward(params.pi, params.Pi, em)
    bwd = backward(params.Pi, em, log_scale)
    lat = posteriors(params.pi, params.Pi, em)
    tail = bwd * np.exp(lat.log_backward_scale)[..., None]
    # P(y_{t+1:T} | U_t) by brute force for t = 0
    for i in range(3):
        for u in range(2):
            sub = params.copy()
            sub.pi = np.eye(2)[u]
            e0 = em[i, 0, u]
            total = sum(brute_force_joint(sub, y[i]).values())
            assert tail[i, 0, u] == pytest.approx(total / e0, rel=1e-12)


def test_single_occasion():
    pi = np.array([0.3, 0.7])
    em = np.array([[[0.5, 0.1]]])
    lat = posteriors(pi, np.zeros((0, 2, 2)), em)
    assert lat.log_f[0] == pytest.approx(np.log(0.15 + 0.07))
    assert lat.post_pair.shape == (1, 0, 2, 2)
    np.testing.assert_allclose(lat.post_state[0, 0], [0.15 / 0.22, 0.07 / 0.22])


def test_impossible_sequence_has_minus_infinite_loglik():
    pi = np.array([1.0, 0.0])
    Pi = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    em = np.array([[[1.0, 1.0], [0.0, 1.0]]])
    with np.errstate(divide="ignore"):
        _, _, log_f = forward(pi, Pi, em)
    assert np.isneginf(log_f[0])


def test_long_sequences_do_not_underflow(rng):
    params = random_params(rng, 3, 400, (4, 4, 4))
    y = sample_responses(rng, 2, 400, (4, 4, 4))
    lat = posteriors(params.pi, params.Pi, emission_of(params, y))
    assert np.all(np.isfinite(lat.log_f))
    assert np.all(lat.log_f < -500)
    np.testing.assert_allclose(lat.post_state.sum(-1), 1.0, atol=1e-10)


def test_per_unit_parameters_broadcast(rng):
    params = [random_params(rng, 2, 3, (2,)) for _ in range(4)]
    y = sample_responses(rng, 4, 3, (2,))
    em = np.concatenate([emission_of(p, y[i:i + 1]) for i, p in enumerate(params)])
    lat = posteriors(np.stack([p.pi for p in params]), np.stack([p.Pi for p in params]), em)
    for i, p in enumerate(params):
        assert lat.log_f[i] == pytest.approx(brute_force_loglik(p, y[i:i + 1])[0], abs=1e-12)
