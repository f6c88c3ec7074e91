"""Link functions between categorical probability vectors and linear predictors.

The vectorised helpers (``*_inverse`` / ``*_jacobian``) act on the last axis
and are what the estimation code uses; :func:`apply_link` and
:func:`invert_link` are the single-vector public interface.

Families
--------
``binary-logit``
    ``eta = log(p1 / p0)``; only for two categories.
``multinomial``
    reference-category logits ``eta_y = log(p_y / p_ref)``, ``y != ref``.
``transition-diagonal-reference``
    multinomial logits of a transition row taken against its diagonal
    entry; ``reference`` is the row (origin state) index.
``global``
    cumulative logits ``eta_y = log P(Y >= y) / P(Y < y)``, ``y = 1..l-1``.
``continuation``
    ``eta_y = log P(Y >= y) / P(Y = y - 1)``, ``y = 1..l-1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

__all__ = [
    "FAMILIES",
    "LinkError",
    "LinkKind",
    "apply_link",
    "invert_link",
    "link_jacobian",
    "rasch_probability",
    "multinomial_inverse",
    "multinomial_jacobian",
    "global_inverse",
    "global_jacobian",
    "continuation_inverse",
    "continuation_jacobian",
]

FAMILIES = (
    "binary-logit",
    "multinomial",
    "global",
    "continuation",
    "transition-diagonal-reference",
)

CLAMP = 1e-12


class LinkError(ValueError):
    """Raised when a link cannot be evaluated or inverted."""


@dataclass(frozen=True)
class LinkKind:
    family: str
    reference: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise LinkError(f"unknown link family {self.family!r}")

    def check_arity(self, n_categories: int) -> None:
        if self.family == "binary-logit" and n_categories != 2:
            raise LinkError("binary-logit link needs exactly two categories")
        if n_categories < 2:
            raise LinkError("a link needs at least two categories")
        if not 0 <= self.reference < n_categories:
            raise LinkError(f"reference {self.reference} out of range for {n_categories} categories")


# ---------------------------------------------------------------------------
# vectorised kernels (last axis)
# ---------------------------------------------------------------------------

def multinomial_inverse(lam, free=None):
    """Softmax over the last axis; entries with ``free == False`` get probability 0.

    ``lam`` holds the log-odds against the reference (the reference slot must
    be 0). Rows without any free entry are not allowed.
    """
    lam = np.asarray(lam, dtype=float)
    if free is not None:
        lam = np.where(free, lam, -np.inf)
    shift = np.max(lam, axis=-1, keepdims=True)
    ex = np.exp(lam - shift)
    return ex / ex.sum(axis=-1, keepdims=True)


def multinomial_jacobian(p):
    """d p / d lam for the softmax: ``diag(p) - p p'``."""
    p = np.asarray(p, dtype=float)
    jac = -p[..., :, None] * p[..., None, :]
    idx = np.arange(p.shape[-1])
    jac[..., idx, idx] += p
    return jac


def global_inverse(eta):
    """Probabilities from cumulative logits (length ``l - 1`` -> ``l``).

    Returns NaN rows where ``eta`` is not strictly decreasing.
    """
    eta = np.asarray(eta, dtype=float)
    surv = expit(eta)  # P(Y >= y), y = 1..l-1
    shape = eta.shape[:-1]
    upper = np.concatenate([np.ones(shape + (1,)), surv], axis=-1)
    lower = np.concatenate([surv, np.zeros(shape + (1,))], axis=-1)
    p = upper - lower
    if eta.shape[-1] > 1:
        bad = np.any(np.diff(eta, axis=-1) >= 0, axis=-1)
        if np.any(bad):
            p = np.where(bad[..., None], np.nan, p)
    return p


def global_jacobian(eta):
    """d p / d eta for cumulative logits, shape ``(..., l, l - 1)``."""
    eta = np.asarray(eta, dtype=float)
    s = expit(eta)
    ds = s * (1.0 - s)
    m = eta.shape[-1]
    jac = np.zeros(eta.shape[:-1] + (m + 1, m))
    idx = np.arange(m)
    # p_y = S_y - S_{y+1} with S_0 = 1, S_l = 0 and S_y = expit(eta_y)
    jac[..., idx + 1, idx] = ds
    jac[..., idx, idx] -= ds
    return jac


def continuation_inverse(eta):
    """Probabilities from continuation logits: ``P(Y >= y) = prod_{z <= y} expit(eta_z)``."""
    eta = np.asarray(eta, dtype=float)
    surv = np.cumprod(expit(eta), axis=-1)
    shape = eta.shape[:-1]
    upper = np.concatenate([np.ones(shape + (1,)), surv], axis=-1)
    lower = np.concatenate([surv, np.zeros(shape + (1,))], axis=-1)
    return upper - lower


def continuation_jacobian(eta):
    eta = np.asarray(eta, dtype=float)
    sig = expit(eta)
    surv = np.cumprod(sig, axis=-1)
    m = eta.shape[-1]
    # dS_y / d eta_z = S_y (1 - sig_z) for z <= y
    tri = np.tril(np.ones((m, m)))
    dsurv = surv[..., :, None] * (1.0 - sig)[..., None, :] * tri
    shape = eta.shape[:-1]
    zero = np.zeros(shape + (1, m))
    upper = np.concatenate([zero, dsurv], axis=-2)
    lower = np.concatenate([dsurv, zero], axis=-2)
    return upper - lower


# ---------------------------------------------------------------------------
# single-vector interface
# ---------------------------------------------------------------------------

def _check_simplex(p):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise LinkError("expected a single probability vector")
    if np.any(p <= 0):
        raise LinkError("link undefined for a probability vector with a zero component")
    if abs(p.sum() - 1.0) > 1e-8:
        raise LinkError(f"probabilities sum to {p.sum():.6g}, not 1")
    return p


def apply_link(kind: LinkKind, p) -> np.ndarray:
    """Map a strictly positive probability vector to its predictor vector."""
    p = _check_simplex(p)
    kind.check_arity(p.size)
    p = np.clip(p, CLAMP, 1.0 - CLAMP)
    fam = kind.family
    if fam in ("binary-logit", "multinomial", "transition-diagonal-reference"):
        lp = np.log(p)
        return np.delete(lp - lp[kind.reference], kind.reference)
    upper = np.cumsum(p[::-1])[::-1][1:]  # P(Y >= y), y = 1..l-1
    if fam == "global":
        return np.log(upper) - np.log1p(-upper)
    # continuation
    return np.log(upper) - np.log(p[:-1])


def invert_link(kind: LinkKind, eta, n_categories: int | None = None) -> np.ndarray:
    """Inverse of :func:`apply_link`."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if eta.ndim != 1:
        raise LinkError("expected a single predictor vector")
    n_cat = eta.size + 1 if n_categories is None else n_categories
    if n_cat != eta.size + 1:
        raise LinkError("predictor length must be number of categories minus one")
    kind.check_arity(n_cat)
    fam = kind.family
    if fam in ("binary-logit", "multinomial", "transition-diagonal-reference"):
        lam = np.insert(eta, kind.reference, 0.0)
        return multinomial_inverse(lam)
    if fam == "global":
        if np.any(np.diff(eta) >= 0):
            raise LinkError("global logits must be strictly decreasing")
        return global_inverse(eta)
    return continuation_inverse(eta)


def link_jacobian(kind: LinkKind, eta) -> np.ndarray:
    """Jacobian ``d p / d eta`` (``l x (l-1)``) of :func:`invert_link` at ``eta``."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    fam = kind.family
    if fam in ("binary-logit", "multinomial", "transition-diagonal-reference"):
        p = invert_link(kind, eta)
        return np.delete(multinomial_jacobian(p), kind.reference, axis=1)
    if fam == "global":
        return global_jacobian(eta)
    return continuation_jacobian(eta)


def rasch_probability(ability, difficulty):
    """Success probability ``expit(ability - difficulty)``; broadcasts."""
    return expit(np.asarray(ability, dtype=float) - np.asarray(difficulty, dtype=float))


def logit_clamped(p):
    p = np.clip(np.asarray(p, dtype=float), CLAMP, 1.0 - CLAMP)
    return logit(p)
