"""Subject-specific probabilities from covariate designs.

Covariates enter either the measurement model (response probabilities
depend on the state and on ``x``) or the latent model (initial and
transition probabilities depend on ``x``). Each builder returns a
:class:`CovariateDesign` whose rows are indexed by subject (and occasion,
and state where relevant); coefficient layouts are listed in
``CovariateDesign.labels``.

The joint model for a binary and a three-category response is handled by
:func:`bivariate_inverse` and :func:`bivariate_map`. Joint cells are ordered
row-major: cell ``3 * y1 + y2``. The predictor vector is::

    [logit P(Y1=1),
     log P(Y2>=1)/P(Y2<1), log P(Y2>=2)/P(Y2<2),
     log-odds ratio of (Y1=1) vs (Y2>=1), log-odds ratio of (Y1=1) vs (Y2>=2)]

i.e. ``C @ log(M @ p)`` with ``M`` the 14 x 6 marginalisation matrix and
``C`` the 5 x 14 contrast matrix below.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from . import links
from .blocks import LinkBlock

__all__ = [
    "CovariateError",
    "CovariateDesign",
    "lag_columns",
    "measurement_design",
    "bivariate_design",
    "initial_design",
    "transition_design",
    "resolve_measurement",
    "resolve_latent",
    "bivariate_map",
    "bivariate_inverse",
    "bivariate_jacobian",
    "bivariate_marginal",
    "MARGINAL_M",
    "MARGINAL_C",
]


class CovariateError(ValueError):
    """Invalid covariate design or failed probability resolution."""


# ---------------------------------------------------------------------------
# bivariate marginal parameterisation
# ---------------------------------------------------------------------------

def _marginal_matrices():
    y1, y2 = np.divmod(np.arange(6), 3)
    rows = [y1 == 0, y1 == 1, y2 < 1, y2 >= 1, y2 < 2, y2 >= 2]
    for cut in (1, 2):
        rows += [(y1 == 0) & (y2 < cut), (y1 == 0) & (y2 >= cut),
                 (y1 == 1) & (y2 < cut), (y1 == 1) & (y2 >= cut)]
    M = np.array(rows, dtype=float)
    C = np.zeros((5, 14))
    C[0, [0, 1]] = [-1, 1]
    C[1, [2, 3]] = [-1, 1]
    C[2, [4, 5]] = [-1, 1]
    # log [P(1, >=y) P(0, <y)] - log [P(1, <y) P(0, >=y)]
    for j, base in ((3, 6), (4, 10)):
        C[j, base + 0] = 1
        C[j, base + 1] = -1
        C[j, base + 2] = -1
        C[j, base + 3] = 1
    return M, C


MARGINAL_M, MARGINAL_C = _marginal_matrices()


def bivariate_map(p):
    """``C log(M p)`` over the last axis (6 cells -> 5 predictors)."""
    p = np.asarray(p, dtype=float)
    return np.log(p @ MARGINAL_M.T) @ MARGINAL_C.T


def _map_jacobian_softmax(p):
    # d eta / d theta where p = softmax([0, theta])
    mp = p @ MARGINAL_M.T
    deta_dp = (MARGINAL_C * (1.0 / mp)[..., None, :]) @ MARGINAL_M
    dp_dth = links.multinomial_jacobian(p)[..., :, 1:]
    return deta_dp @ dp_dth, dp_dth


def _independence_start(eta):
    p1 = expit(eta[..., 0])
    with np.errstate(invalid="ignore"):
        p2 = links.global_inverse(eta[..., 1:3])
    p = np.stack([1.0 - p1, p1], axis=-1)[..., :, None] * p2[..., None, :]
    return p.reshape(eta.shape[:-1] + (6,))


def bivariate_inverse(eta, *, tol: float = 1e-10, max_iter: int = 100, strict: bool = False):
    """Joint probabilities whose marginal logits and log-odds ratios equal ``eta``.

    Damped Newton iteration on the softmax coordinates of ``p`` from the
    independence solution. Rows that do not converge (incompatible
    predictors) come back as NaN, or raise :class:`CovariateError` when
    ``strict``.
    """
    eta = np.asarray(eta, dtype=float)
    shape = eta.shape[:-1]
    e = eta.reshape(-1, 5)
    p = _independence_start(e)
    bad = ~np.all(np.isfinite(p), axis=-1) | np.any(p <= 0, axis=-1)
    p[bad] = 1.0 / 6.0
    theta = np.log(p[:, 1:]) - np.log(p[:, :1])
    res = bivariate_map(p) - e
    err = np.max(np.abs(res), axis=-1)
    active = err >= tol
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        jac, _ = _map_jacobian_softmax(p[idx])
        try:
            step = np.linalg.solve(jac, -res[idx][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(j, -r, rcond=None)[0] for j, r in zip(jac, res[idx])])
        scale = np.ones(len(idx))
        todo = np.ones(len(idx), dtype=bool)
        new_theta = theta[idx].copy()
        new_p = p[idx].copy()
        new_res = res[idx].copy()
        new_err = err[idx].copy()
        for _ in range(40):
            if not np.any(todo):
                break
            cand = theta[idx][todo] + scale[todo, None] * step[todo]
            cp = links.multinomial_inverse(np.concatenate([np.zeros((len(cand), 1)), cand], axis=1))
            with np.errstate(divide="ignore", invalid="ignore"):
                cr = bivariate_map(cp) - e[idx][todo]
            ce = np.max(np.abs(cr), axis=-1)
            ok = np.isfinite(ce) & (ce < err[idx][todo])
            sel = np.flatnonzero(todo)[ok]
            new_theta[sel], new_p[sel], new_res[sel], new_err[sel] = cand[ok], cp[ok], cr[ok], ce[ok]
            todo[np.flatnonzero(todo)[ok]] = False
            scale[todo] *= 0.5
        stalled = idx[todo]
        theta[idx], p[idx], res[idx], err[idx] = new_theta, new_p, new_res, new_err
        active = err >= tol
        active[stalled] = False
    failed = err >= tol
    if np.any(failed):
        if strict:
            raise CovariateError(
                f"marginal parameterisation could not be inverted (residual {err[failed].max():.3g}); "
                "predictors are incompatible"
            )
        p[failed] = np.nan
    return p.reshape(shape + (6,))


def bivariate_jacobian(eta, p=None):
    """``d p / d eta`` (shape ``(..., 6, 5)``) at the joint solution."""
    if p is None:
        p = bivariate_inverse(eta)
    jac, dp_dth = _map_jacobian_softmax(p)
    try:
        return dp_dth @ np.linalg.inv(jac)
    except np.linalg.LinAlgError:
        # degenerate rows (cells underflowing to zero) have a singular map
        return dp_dth @ np.linalg.pinv(jac)


def bivariate_marginal(beta, xi, covariates, i, t, u):
    """Joint ``(Y1, Y2)`` probabilities of subject ``i`` at occasion ``t`` in state ``u``.

    ``xi`` is ``(k, 3)`` (state effects on the three marginal logits),
    ``beta`` is ``(b1, b2, b3, b4, b5)`` with ``b1..b3`` covariate slopes and
    ``b4, b5`` the constant log-odds ratios; ``covariates`` is ``(n, T, p)``.
    """
    xi = np.asarray(xi, dtype=float)
    b1, b2, b3, b4, b5 = beta
    x = np.asarray(covariates, dtype=float)[i, t] if covariates is not None else np.zeros(0)
    eta = np.array([
        xi[u, 0] + x @ np.atleast_1d(b1) if x.size else xi[u, 0],
        xi[u, 1] + x @ np.atleast_1d(b2) if x.size else xi[u, 1],
        xi[u, 2] + x @ np.atleast_1d(b3) if x.size else xi[u, 2],
        float(b4),
        float(b5),
    ], dtype=float)
    return bivariate_inverse(eta, strict=True)


# ---------------------------------------------------------------------------
# designs
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CovariateDesign:
    """Design array for covariate-dependent probabilities.

    ``design`` has shape ``rows + (m, P)``: ``rows`` is ``(n, T, k)`` for the
    measurement placement, ``(n,)`` for initial and ``(n, T-1, k)`` for
    transition probabilities (row ``t`` of the latter is the move into
    occasion ``t + 1``, 0-based).
    """

    placement: str
    family: str
    design: np.ndarray
    labels: list[str]
    theta0: np.ndarray
    free: np.ndarray | None = None
    reference: np.ndarray | None = None
    permute: Callable | None = None
    lags: bool = False
    transform: Callable | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_coef(self) -> int:
        return self.design.shape[-1]

    def block(self) -> LinkBlock:
        return LinkBlock(self.design, self.family, free=self.free, reference=self.reference,
                         permute=self.permute, theta0=self.theta0, transform=self.transform)

    def probs(self, theta):
        return self.block().probs(theta)

    def row(self, theta, index):
        """Probability vector of a single design row."""
        index = tuple(int(i) for i in index)
        sub = self.design[index]
        free = None if self.free is None else self.free[index]
        ref = None if self.reference is None else self.reference[index]
        blk = LinkBlock(sub, self.family, free=free, reference=ref, transform=self.transform)
        p = blk.probs(theta)
        if not blk.valid(p):
            raise CovariateError(f"invalid probabilities at row {index} (non-monotone global predictors?)")
        return p


def lag_columns(codes, L: int) -> np.ndarray:
    """One-hot indicators of the previous response (categories ``1..L-1``), zero at the first occasion."""
    codes = np.asarray(codes)
    n, T = codes.shape
    out = np.zeros((n, T, L - 1))
    if T > 1:
        prev = codes[:, :-1]
        for y in range(1, L):
            out[:, 1:, y - 1] = prev == y
    return out


def column_names(names, q: int) -> list[str]:
    """Coefficient labels for ``q`` covariate columns; unnamed columns become ``x1, x2, ...``."""
    names = list(names or ())
    return names[:q] + [f"x{c + 1}" for c in range(len(names), q)]


def _check_x(x, n_rows):
    x = np.asarray(x, dtype=float)
    if x.ndim != 3:
        raise CovariateError("covariates must be a subject x occasion x column array")
    return x


def measurement_design(x, k: int, L: int, link: str = "multinomial", *, lag_codes=None, names=None) -> CovariateDesign:
    """Response probabilities depending on the state and on covariates.

    multinomial (reference category 0)
        ``log p_y/p_0 = alpha[u, y] + x' beta[y]``; coefficients
        ``alpha`` (k x (L-1), state-major) then ``beta`` ((L-1) x q).
    global / continuation
        ``eta_y = tau[y] + xi[u] + x' beta`` with ``xi[0] = 0``; coefficients
        ``tau`` (L-1), ``xi[1:]`` (k-1), ``beta`` (q).

    ``lag_codes`` (subject x occasion category codes of the same response)
    appends one-hot lagged responses to the covariates.
    """
    x = _check_x(x, None)
    lags = lag_codes is not None
    names = column_names(names, x.shape[-1])
    if lags:
        x = np.concatenate([x, lag_columns(lag_codes, L)], axis=-1)
        names += [f"prev={y}" for y in range(1, L)]
    n, T, q = x.shape
    if link == "multinomial":
        P = k * (L - 1) + (L - 1) * q
        design = np.zeros((n, T, k, L, P))
        labels = [f"alpha[{u},{y}]" for u in range(k) for y in range(1, L)]
        labels += [f"beta[{y},{nm}]" for y in range(1, L) for nm in names]
        for u in range(k):
            for y in range(1, L):
                design[:, :, u, y, u * (L - 1) + y - 1] = 1.0
                start = k * (L - 1) + (y - 1) * q
                design[:, :, u, y, start:start + q] = x
        theta0 = np.zeros(P)
        # states ordered by increasing propensity for higher categories
        for u in range(k):
            for y in range(1, L):
                theta0[u * (L - 1) + y - 1] = (u - (k - 1) / 2.0) * y * 0.5

        def permute(theta, perm, k=k, L=L):
            out = theta.copy()
            a = theta[: k * (L - 1)].reshape(k, L - 1)
            out[: k * (L - 1)] = a[perm].ravel()
            return out

        return CovariateDesign("measurement", "multinomial", design, labels, theta0, permute=permute, lags=lags)
    if link not in ("global", "continuation"):
        raise CovariateError(f"unsupported measurement link {link!r}")
    m = L - 1
    P = m + (k - 1) + q
    design = np.zeros((n, T, k, m, P))
    labels = [f"tau[{y}]" for y in range(1, L)] + [f"xi[{u}]" for u in range(1, k)] + [f"beta[{nm}]" for nm in names]
    for y in range(m):
        design[..., y, y] = 1.0
    for u in range(1, k):
        design[:, :, u, :, m + u - 1] = 1.0
    design[..., m + k - 1:] = x[:, :, None, None, :]
    theta0 = np.zeros(P)
    theta0[:m] = np.linspace(1.0, -1.0, m) if m > 1 else 0.0
    theta0[m:m + k - 1] = np.arange(1, k) * 1.0

    def permute(theta, perm, k=k, m=m):
        xi = np.concatenate([[0.0], theta[m:m + k - 1]])[perm]
        out = theta.copy()
        out[:m] = theta[:m] + xi[0]
        out[m:m + k - 1] = xi[1:] - xi[0]
        return out

    return CovariateDesign("measurement", link, design, labels, theta0, permute=permute, lags=lags)


def bivariate_design(x, k: int, *, lag_codes=None, names=None) -> CovariateDesign:
    """Joint binary / three-category responses with state and covariate effects.

    Coefficients: ``xi`` (k x 3, state-major), slopes ``b1, b2, b3`` (q
    each) on the three marginal logits, then the two constant log-odds ratios.
    """
    x = _check_x(x, None)
    lags = lag_codes is not None
    names = column_names(names, x.shape[-1])
    if lags:
        x = np.concatenate([x, lag_columns(lag_codes, 6)], axis=-1)
        names += [f"prev={y}" for y in range(1, 6)]
    n, T, q = x.shape
    P = 3 * k + 3 * q + 2
    design = np.zeros((n, T, k, 5, P))
    labels = [f"xi[{u},{j}]" for u in range(k) for j in range(3)]
    labels += [f"b{j + 1}[{nm}]" for j in range(3) for nm in names] + ["b4", "b5"]
    for u in range(k):
        for j in range(3):
            design[:, :, u, j, 3 * u + j] = 1.0
            design[:, :, u, j, 3 * k + j * q:3 * k + (j + 1) * q] = x
    design[..., 3, 3 * k + 3 * q] = 1.0
    design[..., 4, 3 * k + 3 * q + 1] = 1.0
    theta0 = np.zeros(P)
    for u in range(k):
        s = (u - (k - 1) / 2.0)
        theta0[3 * u:3 * u + 3] = [s, 0.7 + s, -0.7 + s]

    def permute(theta, perm, k=k):
        out = theta.copy()
        out[:3 * k] = theta[:3 * k].reshape(k, 3)[perm].ravel()
        return out

    return CovariateDesign("measurement", "bivariate", design, labels, theta0, permute=permute, lags=lags)


def initial_design(x1, k: int, link: str = "multinomial", *, names=None) -> CovariateDesign:
    """Initial probabilities from first-occasion covariates ``x1`` (n x q).

    multinomial (reference state 0): ``log pi_v/pi_0 = alpha[v] + x' delta[v]``,
    coefficients ``alpha`` (k-1) then ``delta`` ((k-1) x q).
    global: ``eta_v = alpha[v] + x' delta``, coefficients ``alpha`` (k-1, decreasing)
    then ``delta`` (q).
    """
    x1 = np.asarray(x1, dtype=float)
    n, q = x1.shape
    names = column_names(names, q)
    if link == "multinomial":
        P = (k - 1) * (1 + q)
        design = np.zeros((n, k, P))
        labels = [f"alpha[{v}]" for v in range(1, k)] + [f"delta[{v},{nm}]" for v in range(1, k) for nm in names]
        for v in range(1, k):
            design[:, v, v - 1] = 1.0
            start = (k - 1) + (v - 1) * q
            design[:, v, start:start + q] = x1

        def permute(theta, perm, k=k, q=q):
            coef = np.zeros((k, 1 + q))
            coef[1:, 0] = theta[:k - 1]
            coef[1:, 1:] = theta[k - 1:].reshape(k - 1, q)
            coef = coef[perm] - coef[perm[0]]
            return np.concatenate([coef[1:, 0], coef[1:, 1:].ravel()])

        return CovariateDesign("latent", "multinomial", design, labels, np.zeros(P), permute=permute)
    if link != "global":
        raise CovariateError(f"unsupported initial link {link!r}")
    m = k - 1
    P = m + q
    design = np.zeros((n, m, P))
    for v in range(m):
        design[:, v, v] = 1.0
    design[:, :, m:] = x1[:, None, :]
    labels = [f"alpha[{v}]" for v in range(1, k)] + [f"delta[{nm}]" for nm in names]
    theta0 = np.zeros(P)
    if m > 1:
        theta0[:m] = np.linspace(1.0, -1.0, m)
    return CovariateDesign("latent", "global", design, labels, theta0)


def transition_design(x, k: int, link: str = "multinomial", mask=None, *, names=None) -> CovariateDesign:
    """Transition probabilities from covariates ``x`` (n x (T-1) x q) at the arrival occasion.

    multinomial (reference: the diagonal): ``log pi_uv/pi_uu = alpha[u,v] + x' delta[u,v]``
    for every allowed ``v != u``; coefficients ``alpha`` per allowed pair
    then ``delta`` per pair (q each).
    global: ``eta_{u,v} = alpha[u,v] + x' delta`` (v = 1..k-1 cuts) with a
    common slope; coefficients ``alpha`` (k x (k-1)) then ``delta`` (q).
    """
    x = np.asarray(x, dtype=float)
    n, Tm1, q = x.shape
    names = column_names(names, q)
    mask = np.ones((k, k), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if link == "multinomial":
        if not np.all(np.diag(mask)):
            raise CovariateError("diagonal-reference transition logits need every diagonal entry allowed")
        pairs = [(u, v) for u in range(k) for v in range(k) if u != v and mask[u, v]]
        npair = len(pairs)
        P = npair * (1 + q)
        design = np.zeros((n, Tm1, k, k, P))
        labels = [f"alpha[{u},{v}]" for u, v in pairs] + [f"delta[{u},{v},{nm}]" for u, v in pairs for nm in names]
        for j, (u, v) in enumerate(pairs):
            design[:, :, u, v, j] = 1.0
            start = npair + j * q
            design[:, :, u, v, start:start + q] = x
        reference = np.broadcast_to(np.arange(k), (n, Tm1, k))
        free = np.broadcast_to(mask, (n, Tm1, k, k))
        theta0 = np.zeros(P)
        theta0[:npair] = -1.0

        def permute(theta, perm, pairs=pairs, q=q):
            if not np.array_equal(mask[np.ix_(perm, perm)], mask):
                raise NotImplementedError("transition mask is not invariant under the relabelling")
            pos = {pr: j for j, pr in enumerate(pairs)}
            a = theta[:npair]
            d = theta[npair:].reshape(npair, q)
            src = [pos[(int(perm[u]), int(perm[v]))] for u, v in pairs]
            return np.concatenate([a[src], d[src].ravel()])

        return CovariateDesign("latent", "multinomial", design, labels, theta0, free=free,
                               reference=reference, permute=permute)
    if link != "global":
        raise CovariateError(f"unsupported transition link {link!r}")
    if not np.all(mask):
        raise CovariateError("global transition logits do not support structural zeros; use the multinomial link")
    m = k - 1
    P = k * m + q
    design = np.zeros((n, Tm1, k, m, P))
    for u in range(k):
        for v in range(m):
            design[:, :, u, v, u * m + v] = 1.0
    design[..., k * m:] = x[:, :, None, None, :]
    labels = [f"alpha[{u},{v}]" for u in range(k) for v in range(1, k)] + [f"delta[{nm}]" for nm in names]
    theta0 = np.zeros(P)
    for u in range(k):
        # favour staying in u: large P(U >= v) for v <= u
        theta0[u * m:(u + 1) * m] = np.linspace(1.0, -1.0, m) + (u - (k - 1) / 2.0) * 1.5 if m > 1 else (u - (k - 1) / 2.0) * 1.5
    return CovariateDesign("latent", "global", design, labels, theta0)


# ---------------------------------------------------------------------------
# single-row resolution
# ---------------------------------------------------------------------------

def resolve_measurement(beta, design: CovariateDesign, i: int, t: int, u: int) -> np.ndarray:
    """Response probabilities of subject ``i`` at occasion ``t`` (0-based) in state ``u``."""
    if design.placement != "measurement":
        raise CovariateError("design is not a measurement design")
    return design.row(beta, (i, t, u))


def resolve_latent(delta1, delta2, designs, i: int):
    """Initial vector and ``(T-1, k, k)`` transition matrices of subject ``i``.

    ``designs`` is ``(initial_design, transition_design)``; either may be
    None together with its coefficients, in which case that part is skipped
    (returned as None).
    """
    ini, tra = designs
    pi = None if ini is None else ini.row(delta1, (i,))
    Pi = None
    if tra is not None:
        Tm1, k = tra.design.shape[1], tra.design.shape[2]
        Pi = np.stack([np.stack([tra.row(delta2, (i, t, u)) for u in range(k)]) for t in range(Tm1)]) \
            if Tm1 else np.zeros((0, k, k))
    return pi, Pi
