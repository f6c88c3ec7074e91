"""Parametric families of categorical rows and their Fisher-scoring maximiser.

A block maps a coefficient vector ``theta`` to an array of probability rows
(shape ``rows + (K,)``) together with the Jacobian ``dp/dtheta``. Expected
counts of the same shape define the objective ``sum c * log p`` maximised at
each M-step; score and expected information follow from the Jacobian:

    s = sum_rows J' (c / p),        F = sum_rows N J' diag(1 / p) J

with ``N`` the row total of the counts.
"""
from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from . import links

logger = logging.getLogger(__name__)

__all__ = ["FisherScoringError", "LinkBlock", "AffineBlock", "fisher_scoring", "block_objective"]


class FisherScoringError(RuntimeError):
    """Singular information or failure of the inner maximisation."""


class LinkBlock:
    """Rows whose link predictors are linear in (a transform of) ``theta``.

    Parameters
    ----------
    design : array, shape ``rows + (m, P)``
        ``m`` is ``K`` for the multinomial family (reference and structurally
        zero slots are ignored) and the predictor length otherwise.
    family : {"multinomial", "global", "continuation", "bivariate"}
    free : bool array ``rows + (K,)``, optional
        Allowed categories (multinomial only); others get probability 0.
    reference : int array ``rows``, optional
        Reference category per row (multinomial only, default 0).
    transform : callable, optional
        ``theta -> (coef, dcoef/dtheta)``; the predictor is ``design @ coef``.
    permute : callable, optional
        ``(theta, perm) -> theta`` relabelling the latent states.
    theta0 : array, optional
        A coefficient vector giving valid probabilities.
    """

    def __init__(self, design, family: str, *, K: int | None = None, free=None, reference=None,
                 transform: Callable | None = None, permute: Callable | None = None, theta0=None,
                 n_theta: int | None = None):
        design = np.asarray(design, dtype=float)
        self.family = family
        if family == "multinomial":
            K = design.shape[-2]
        elif family == "bivariate":
            K = 6
        else:
            K = design.shape[-2] + 1
        self.K = K
        self.rows = design.shape[:-2]
        if family == "multinomial":
            free = np.ones(self.rows + (K,), dtype=bool) if free is None else np.broadcast_to(free, self.rows + (K,))
            ref = np.zeros(self.rows, dtype=np.int64) if reference is None else np.broadcast_to(reference, self.rows)
            if np.any(~np.take_along_axis(free, ref[..., None], axis=-1)):
                raise ValueError("reference category must be an allowed category")
            active = free & (np.arange(K) != ref[..., None])
            design = design * active[..., None]
            self.free = np.array(free)
            self.reference = np.array(ref)
        else:
            if free is not None and not np.all(free):
                raise ValueError(f"structural zeros are only supported with multinomial links, not {family}")
            self.free = np.ones(self.rows + (K,), dtype=bool)
            self.reference = None
        self.design = design
        self.transform = transform
        self._permute = permute
        n_coef = design.shape[-1]
        self.n_theta = n_coef if n_theta is None else n_theta
        if transform is None and self.n_theta != n_coef:
            raise ValueError("n_theta differs from design width without a transform")
        self.theta0 = np.zeros(self.n_theta) if theta0 is None else np.asarray(theta0, dtype=float)

    # -- evaluation ---------------------------------------------------------
    def coef(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.transform is None:
            return theta, None
        return self.transform(theta)

    def eta(self, theta):
        coef, _ = self.coef(theta)
        return self.design @ coef

    def probs(self, theta):
        eta = self.eta(theta)
        fam = self.family
        if fam == "multinomial":
            return links.multinomial_inverse(eta, self.free)
        if fam == "global":
            return links.global_inverse(eta)
        if fam == "continuation":
            return links.continuation_inverse(eta)
        from .covariates import bivariate_inverse
        return bivariate_inverse(eta)

    def jacobian(self, theta, p=None):
        """``dp/dtheta`` with shape ``rows + (K, n_theta)``."""
        coef, dcoef = self.coef(theta)
        eta = self.design @ coef
        fam = self.family
        if fam == "multinomial":
            p = links.multinomial_inverse(eta, self.free) if p is None else p
            dp_deta = links.multinomial_jacobian(p)
        elif fam == "global":
            dp_deta = links.global_jacobian(eta)
        elif fam == "continuation":
            dp_deta = links.continuation_jacobian(eta)
        else:
            from .covariates import bivariate_jacobian
            dp_deta = bivariate_jacobian(eta, p)
        jac = np.einsum("...km,...mp->...kp", dp_deta, self.design)
        if dcoef is not None:
            jac = jac @ dcoef
        return jac

    def permute(self, theta, perm):
        if self._permute is None:
            raise NotImplementedError("this design does not support relabelling the states")
        return self._permute(np.asarray(theta, dtype=float), np.asarray(perm))

    def valid(self, p) -> bool:
        return bool(np.all(np.isfinite(p)) and np.all(p >= 0))


class AffineBlock:
    """Rows affine in ``theta``: ``p = base + D theta`` (linear transition models).

    Entries with zero base and zero design rows are structural zeros.
    """

    family = "affine"

    def __init__(self, base, design, *, permute: Callable | None = None, theta0=None, eps: float = 1e-8):
        self.base = np.asarray(base, dtype=float)
        self.design = np.asarray(design, dtype=float)
        self.rows = self.base.shape[:-1]
        self.K = self.base.shape[-1]
        self.n_theta = self.design.shape[-1]
        self.free = (self.base != 0) | np.any(self.design != 0, axis=-1)
        self._permute = permute
        self.eps = eps
        self.theta0 = np.zeros(self.n_theta) if theta0 is None else np.asarray(theta0, dtype=float)

    def probs(self, theta):
        return self.base + self.design @ np.asarray(theta, dtype=float)

    def jacobian(self, theta, p=None):
        return self.design

    def permute(self, theta, perm):
        if self._permute is None:
            raise NotImplementedError("this design does not support relabelling the states")
        return self._permute(np.asarray(theta, dtype=float), np.asarray(perm))

    def valid(self, p) -> bool:
        return bool(np.all(np.isfinite(p)) and np.all(p >= 0) and np.all(p <= 1))

    def feasible_start(self, target=None, scale: float = 0.5):
        """Coefficients close to ``target`` probabilities that keep every row valid."""
        if self.n_theta == 0:
            return np.zeros(0)
        if target is None:
            target = np.where(self.free, 1.0, 0.0)
            target = target / target.sum(axis=-1, keepdims=True)
        A = self.design.reshape(-1, self.n_theta)
        b = (np.asarray(target) - self.base).reshape(-1)
        theta = np.linalg.lstsq(A, b, rcond=None)[0]
        for _ in range(60):
            p = self.probs(theta)
            if self.valid(p) and np.all(p[self.free] > self.eps):
                return theta
            theta = theta * scale
        raise FisherScoringError("could not find feasible coefficients for the linear transition model")


def block_objective(block, theta, counts) -> float:
    p = block.probs(theta)
    if not block.valid(p):
        return -np.inf
    pos = counts > 0
    if np.any(p[pos] <= 0):
        return -np.inf
    return float(np.sum(counts[pos] * np.log(p[pos])))


def block_score(block, theta, counts, p=None, jac=None):
    if block.n_theta == 0:
        return np.zeros(0)
    p = block.probs(theta) if p is None else p
    jac = block.jacobian(theta, p) if jac is None else jac
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(counts > 0, counts / np.where(p > 0, p, 1.0), 0.0)
    K = ratio.shape[-1]
    return np.einsum("rk,rkp->p", ratio.reshape(-1, K), np.broadcast_to(jac, ratio.shape + jac.shape[-1:]).reshape(-1, K, jac.shape[-1]))


def block_information(block, theta, counts, p=None, jac=None):
    if block.n_theta == 0:
        return np.zeros((0, 0))
    p = block.probs(theta) if p is None else p
    jac = block.jacobian(theta, p) if jac is None else jac
    N = counts.sum(axis=-1)
    # scale the Jacobian by sqrt(N / p) first: jac^2 / p underflows to 0 * inf for tiny p
    tiny = np.finfo(float).tiny
    with np.errstate(divide="ignore", over="ignore"):
        root = np.where(p > tiny, np.sqrt(N[..., None] / np.where(p > tiny, p, 1.0)), 0.0)
    K, P = root.shape[-1], jac.shape[-1]
    scaled = np.broadcast_to(jac, root.shape + (P,)).reshape(-1, K, P) * root.reshape(-1, K, 1)
    scaled = scaled.reshape(-1, P)
    return scaled.T @ scaled


def fisher_scoring(block, counts, theta0, *, max_iter: int = 100, max_halving: int = 20,
                   tol: float = 1e-11):
    """Maximise ``sum counts * log p(theta)`` by Fisher scoring with step halving.

    A step is accepted only if it does not decrease the objective (invalid
    probabilities count as ``-inf``), so the result is never worse than
    ``theta0``. A singular expected information (for instance a state
    with no expected counts) gives a minimum-norm step. Raises
    :class:`FisherScoringError` when the information is not finite.

    Returns ``(theta, objective, iterations)``.
    """
    counts = np.asarray(counts, dtype=float)
    theta = np.array(theta0, dtype=float)
    if block.n_theta == 0:
        return theta, block_objective(block, theta, counts), 0
    obj = block_objective(block, theta, counts)
    if not np.isfinite(obj):
        raise FisherScoringError("starting coefficients give invalid probabilities")
    it = 0
    for it in range(1, max_iter + 1):
        p = block.probs(theta)
        jac = block.jacobian(theta, p)
        s = block_score(block, theta, counts, p, jac)
        F = block_information(block, theta, counts, p, jac)
        if not np.all(np.isfinite(F)) or not np.all(np.isfinite(s)):
            raise FisherScoringError("non-finite expected information (coefficients diverging)")
        # rows with no expected counts leave directions unidentified: the
        # minimum-norm solution moves only the identified ones
        step = np.linalg.lstsq(F, s, rcond=1e-12)[0]
        t = 1.0
        accepted = False
        for _ in range(max_halving + 1):
            cand = theta + t * step
            new = block_objective(block, cand, counts)
            if new >= obj:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gain = new - obj
        theta, obj = cand, new
        if gain <= tol * max(1.0, abs(obj)) and np.max(np.abs(t * step)) < 1e-7:
            break
        if gain <= 1e-14 * max(1.0, abs(obj)):
            break
    return theta, obj, it
