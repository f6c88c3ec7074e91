import itertools

import numpy as np
import pytest

from latentmarkov import ModelParams


def random_simplex(rng, shape, concentration=1.0):
    g = rng.gamma(concentration, size=shape)
    return g / g.sum(axis=-1, keepdims=True)


def random_params(rng, k, T, levels, concentration=1.0):
    """Valid parameters with one measurement block per variable."""
    pi = random_simplex(rng, (k,), concentration)
    Pi = random_simplex(rng, (max(T - 1, 0), k, k), concentration)
    phi = [random_simplex(rng, (T, k, lv), concentration) for lv in levels]
    return ModelParams(k, T, tuple(levels), tuple((j,) for j in range(len(levels))), pi, Pi, phi)


def emission_of(params, y):
    """(n, T, k) response probabilities given each state, by direct indexing."""
    n, T, r = y.shape
    out = np.ones((n, T, params.k))
    for j in range(r):
        ph = params.phi[j]
        for t in range(T):
            out[:, t] *= ph[t][:, y[:, t, j]].T
    return out


def brute_force_joint(params, y_single):
    """Dict path -> p(path, y) for one subject, summing nothing."""
    k, T = params.k, params.T
    out = {}
    em = emission_of(params, y_single[None])[0]
    for path in itertools.product(range(k), repeat=T):
        p = params.pi[path[0]] * em[0, path[0]]
        for t in range(1, T):
            p *= params.Pi[t - 1][path[t - 1], path[t]] * em[t, path[t]]
        out[path] = p
    return out


def brute_force_loglik(params, y):
    return np.array([np.log(sum(brute_force_joint(params, yi).values())) for yi in y])


def sample_responses(rng, n, T, levels):
    return np.stack([rng.integers(0, lv, size=(n, T)) for lv in levels], axis=-1)


def central_difference(fun, theta, h=1e-6):
    theta = np.asarray(theta, dtype=float)
    out = np.zeros(theta.size)
    for j in range(theta.size):
        e = np.zeros(theta.size)
        e[j] = h
        out[j] = (fun(theta + e) - fun(theta - e)) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def worked_example():
    k, T = 2, 2
    pi = np.array([0.6, 0.4])
    Pi = np.array([[[0.7, 0.3], [0.2, 0.8]]])
    phi = [np.array([[[0.9, 0.1], [0.1, 0.9]]] * T)]
    return ModelParams(k, T, (2,), ((0,),), pi, Pi, phi), np.array([[[1], [1]]])
