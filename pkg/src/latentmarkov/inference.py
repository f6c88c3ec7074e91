"""Inference after a fit: score, observed information, standard errors, model choice and LR tests.

The score at ``theta`` is the gradient of the expected complete-data
log-likelihood computed with posteriors at ``theta`` itself, which equals the
gradient of the observed log-likelihood. The observed information is minus
the central-difference derivative of that score.

Coordinates are unconstrained: multinomial logits for free probabilities
(reference category 0, the diagonal for transition rows) and the raw
coefficients for link and linear models.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

logger = logging.getLogger(__name__)

__all__ = [
    "InferenceError",
    "InferenceReport",
    "LRTestResult",
    "em_score",
    "observed_information",
    "standard_errors",
    "probability_scale",
    "identifiability",
    "information_criteria",
    "lr_test",
    "chibar_weights",
    "infer",
    "probability_standard_errors",
]

IDENT_TOL = 1e-8


class InferenceError(ValueError):
    pass


def _states(model, params_or_states):
    from .params import ModelParams

    if isinstance(params_or_states, ModelParams) or type(params_or_states).__name__ == "MultilevelParams":
        return model.states_from_params(params_or_states)
    return params_or_states


def em_score(params, data=None, spec=None, *, model=None) -> np.ndarray:
    """Score vector in the model's coordinates."""
    if model is None:
        from .model import compile_model
        model = compile_model(spec, data)
    return model.score_states(_states(model, params))


def _step(theta, rel):
    return np.maximum(rel, rel * np.abs(theta))


def observed_information(params, data=None, spec=None, *, model=None, step: float = 1e-6) -> np.ndarray:
    """Minus the central-difference Jacobian of the score, symmetrised.

    Step for coordinate ``j`` is ``max(step, step * |theta_j|)``.
    """
    if model is None:
        from .model import compile_model
        model = compile_model(spec, data)
    states = _states(model, params)
    theta = model.coords(states)
    n = theta.size
    J = np.zeros((n, n))
    h = _step(theta, step)
    for j in range(n):
        up, dn = theta.copy(), theta.copy()
        up[j] += h[j]
        dn[j] -= h[j]
        s_up = model.score_states(model.states_from_coords(up, states))
        s_dn = model.score_states(model.states_from_coords(dn, states))
        J[:, j] = -(s_up - s_dn) / (2 * h[j])
    return 0.5 * (J + J.T)


def identifiability(J, tol: float = IDENT_TOL):
    """``(identifiable, rank, smallest singular value, ratio to the largest)``."""
    J = np.asarray(J, dtype=float)
    if J.size == 0:
        return True, 0, 0.0, 1.0
    sv = np.linalg.svd(J, compute_uv=False)
    ratio = float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0
    rank = int(np.sum(sv > tol * sv[0])) if sv[0] > 0 else 0
    return ratio > tol, rank, float(sv[-1]), ratio


def standard_errors(J):
    """``sqrt(diag(J^-1))``, or None when ``J`` is singular or not positive definite."""
    J = np.asarray(J, dtype=float)
    if J.size == 0:
        return np.zeros(0)
    ok, _, _, _ = identifiability(J)
    if not ok:
        return None
    try:
        cov = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(cov)
    if np.any(d <= 0):
        return None
    return np.sqrt(d)


def probability_scale(J, jacobians):
    """Information on the reported scale: ``G' J G`` with ``G`` block-diagonal ``d coords / d values``."""
    sizes = [g.shape[0] for g in jacobians]
    G = np.zeros((sum(sizes), sum(sizes)))
    pos = 0
    for g in jacobians:
        m = g.shape[0]
        G[pos:pos + m, pos:pos + m] = g
        pos += m
    return G.T @ J @ G


def probability_standard_errors(model, states, J):
    """Delta-method standard errors of every shared probability array.

    Returns ``{name: array}`` shaped like the arrays (None when ``J`` is singular).
    """
    if standard_errors(J) is None:
        return None
    cov = np.linalg.inv(J)
    theta = model.coords(states)
    h = _step(theta, 1e-6)

    def arrays(th):
        st = model.states_from_coords(th, states)
        out = {}
        for comp, s in zip(model.components, st):
            if comp.per_unit:
                continue
            out[comp.name] = np.asarray(comp.probs(s), dtype=float)
        return out

    base = arrays(theta)
    D = {name: np.zeros(a.shape + (theta.size,)) for name, a in base.items()}
    for j in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[j] += h[j]
        dn[j] -= h[j]
        au, ad = arrays(up), arrays(dn)
        for name in D:
            D[name][..., j] = (au[name] - ad[name]) / (2 * h[j])
    out = {}
    for name, d in D.items():
        flat = d.reshape(-1, theta.size)
        var = np.einsum("ij,jk,ik->i", flat, cov, flat)
        out[name] = np.sqrt(np.maximum(var, 0.0)).reshape(base[name].shape)
    return out


def information_criteria(loglik: float, g: int, n: float):
    """``(AIC, BIC)`` with ``AIC = -2 ll + 2 g`` and ``BIC = -2 ll + g log n``."""
    return -2.0 * loglik + 2.0 * g, -2.0 * loglik + g * np.log(n)


@dataclass
class InferenceReport:
    labels: list
    estimates: np.ndarray
    score: np.ndarray
    information: np.ndarray
    se: np.ndarray | None
    value_labels: list
    values: np.ndarray
    value_information: np.ndarray
    value_se: np.ndarray | None
    identifiable: bool
    rank: int
    min_singular: float
    singular_ratio: float
    aic: float
    bic: float
    g: int
    n: float
    loglik: float
    probability_se: dict | None = None


def infer(fit_result, *, step: float = 1e-6, probability_ses: bool = True) -> InferenceReport:
    """Score, information, standard errors and criteria for a fitted model."""
    model = fit_result.model
    states = fit_result.states
    theta = model.coords(states)
    score = model.score_states(states)
    J = observed_information(states, model=model, step=step)
    ok, rank, smin, ratio = identifiability(J)
    se = standard_errors(J)
    Jv = probability_scale(J, model.coord_jacobians(states))
    vse = standard_errors(Jv)
    aic, bic = information_criteria(fit_result.loglik, model.n_free, model.bic_n)
    pse = None
    if probability_ses and se is not None and hasattr(model, "components"):
        pse = probability_standard_errors(model, states, J)
    return InferenceReport(
        labels=model.coord_labels(),
        estimates=theta,
        score=score,
        information=J,
        se=se,
        value_labels=model.coord_labels(),
        values=model.reported_values(states),
        value_information=Jv,
        value_se=vse,
        identifiable=ok,
        rank=rank,
        min_singular=smin,
        singular_ratio=ratio,
        aic=aic,
        bic=bic,
        g=model.n_free,
        n=model.bic_n,
        loglik=fit_result.loglik,
        probability_se=pse,
    )


# ---------------------------------------------------------------------------
# likelihood-ratio tests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LRTestResult:
    statistic: float
    p_value: float
    null: str
    df: int | None = None
    weights: tuple | None = None
    weights_se: tuple | None = None


def chibar_weights(cov, n_draws: int = 10_000, seed: int = 0):
    """Monte Carlo weights of a chi-bar-squared law for the cone ``theta >= 0``.

    Draws ``Z ~ N(0, cov)``, projects onto the non-negative orthant in the
    metric ``cov^-1`` and records how many components stay positive.
    Returns ``(weights, standard errors)``, each of length ``q + 1``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    q = cov.shape[0]
    rng = np.random.default_rng(seed)
    Z = rng.multivariate_normal(np.zeros(q), cov, size=n_draws, method="cholesky")
    prec = np.linalg.inv(cov)
    R = np.linalg.cholesky(prec).T  # prec = R' R
    counts = np.zeros(q + 1)
    for z in Z:
        x, _ = optimize.nnls(R, R @ z)
        counts[int(np.sum(x > 1e-10))] += 1
    w = counts / n_draws
    return w, np.sqrt(w * (1 - w) / n_draws)


def _chibar_p(D, weights):
    p = 0.0
    for j, w in enumerate(weights):
        if j == 0:
            p += w * (1.0 if D <= 0 else 0.0)
        else:
            p += w * stats.chi2.sf(D, j)
    return float(p)


def lr_test(loglik_full: float, loglik_constrained: float, null: str = "chi2", *, df: int | None = None,
            weights=None, cov=None, n_draws: int = 10_000, seed: int = 0, tol: float = 1e-6) -> LRTestResult:
    """Likelihood-ratio statistic ``D = -2 (ll_constrained - ll_full)`` and its p-value.

    ``null`` is ``"chi2"`` (needs ``df``), ``"chibar"`` (needs ``weights``
    ``w_0..w_q``, ``w_0`` being the point mass at zero) or
    ``"chibar-mc"`` (weights simulated from ``cov``, the covariance of the
    constrained coefficients).
    """
    D = -2.0 * (loglik_constrained - loglik_full)
    if D < -tol:
        raise InferenceError(
            f"negative LR statistic {D:.3g}: models are not nested or a fit did not converge"
        )
    D = max(D, 0.0)
    if null == "chi2":
        if df is None or df < 1:
            raise InferenceError("chi-squared null needs df >= 1")
        return LRTestResult(D, float(stats.chi2.sf(D, df)) if D > 0 else 1.0, null, df=int(df))
    if null == "chibar":
        if weights is None:
            raise InferenceError("chi-bar null needs mixture weights")
        w = np.asarray(weights, dtype=float)
        if abs(w.sum() - 1) > 1e-8 or np.any(w < 0):
            raise InferenceError("chi-bar weights must be non-negative and sum to 1")
        return LRTestResult(D, _chibar_p(D, w), null, weights=tuple(w.tolist()))
    if null == "chibar-mc":
        if cov is None:
            raise InferenceError("Monte Carlo chi-bar null needs the covariance of the constrained coefficients")
        w, se = chibar_weights(cov, n_draws=n_draws, seed=seed)
        return LRTestResult(D, _chibar_p(D, w), null, weights=tuple(w.tolist()), weights_se=tuple(se.tolist()))
    raise InferenceError(f"unknown null distribution {null!r}")
