"""Scaled forward-backward recursions for latent Markov chains.

All functions work on a batch of ``U`` independent sequences at once:

``pi``        ``(k,)`` or ``(U, k)`` initial probabilities
``Pi``        ``(T-1, k, k)`` or ``(U, T-1, k, k)``; ``Pi[t-1, u, v]`` is the
              probability of moving from ``u`` to ``v`` at occasion ``t``
``emission``  ``(U, T, k)``; probability of the observed responses at each
              occasion given each state (products over variables already taken)

Forward vectors are renormalised at every occasion and the log normalisers
kept, so nothing underflows for long sequences. The backward vectors reuse the
forward normalisers, which makes ``forward * backward`` the state posterior
directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = ["LatticeResult", "forward", "backward", "posteriors"]


@dataclass(frozen=True)
class LatticeResult:
    """Forward/backward quantities and posteriors for a batch of sequences.

    ``post_state[i, t, u]`` is ``P(U_t = u | y_i)`` and ``post_pair[i, t-1, u, v]``
    is ``P(U_{t-1} = u, U_t = v | y_i)`` for ``t = 1..T-1`` (0-based).
    """

    log_f: np.ndarray
    forward: np.ndarray
    log_scale: np.ndarray
    backward: np.ndarray
    post_state: np.ndarray
    transitions: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)  # emission * backward / scale at t >= 1

    @cached_property
    def post_pair(self) -> np.ndarray:
        U, T, k = self.post_state.shape
        if T == 1:
            return np.zeros((U, 0, k, k))
        return self.forward[:, :-1, :, None] * self.transitions * self.right[:, :, None, :]

    def pair_totals(self, weights=None) -> np.ndarray:
        """``sum_i w_i post_pair[i]``, shape ``(T-1, k, k)``, without the per-sequence array."""
        U, T, k = self.post_state.shape
        if T == 1:
            return np.zeros((0, k, k))
        fw = self.forward[:, :-1] if weights is None else self.forward[:, :-1] * np.asarray(weights)[:, None, None]
        if self.transitions.shape[0] == 1:
            outer = np.matmul(fw.transpose(1, 2, 0), self.right.transpose(1, 0, 2))
            return outer * self.transitions[0]
        return np.einsum("utk,utkl,utl->tkl", fw, self.transitions, self.right)

    @property
    def log_backward_scale(self) -> np.ndarray:
        """Log factor turning ``backward`` into unnormalised ``P(y_{t+1:T} | U_t)``."""
        tail = np.cumsum(self.log_scale[:, ::-1], axis=1)[:, ::-1]
        return np.concatenate([tail[:, 1:], np.zeros_like(tail[:, :1])], axis=1)


def _batch(pi, Pi, emission):
    """Arrays with a leading unit axis; ``Pi`` keeps length 1 there when shared."""
    emission = np.asarray(emission, dtype=float)
    if emission.ndim != 3:
        raise ValueError("emission must have shape (U, T, k)")
    U, T, k = emission.shape
    pi = np.broadcast_to(np.asarray(pi, dtype=float), (U, k))
    if T > 1:
        Pi = np.asarray(Pi, dtype=float)
        if Pi.ndim == 3:
            Pi = Pi[None]
        if Pi.shape[0] not in (1, U) or Pi.shape[1:] != (T - 1, k, k):
            raise ValueError(f"transition array of shape {Pi.shape} does not fit {U} sequences of length {T}")
    else:
        Pi = np.zeros((1, 0, k, k))
    return pi, Pi, emission


def _step(vec, trans):
    # vec (U, k), trans (U or 1, k, k) -> (U, k): sum_u vec[u] * trans[u, v]
    if trans.shape[0] == 1:
        return vec @ trans[0]
    return np.einsum("uk,ukl->ul", vec, trans)


def _back_step(vec, trans):
    # sum_v trans[u, v] * vec[v]
    if trans.shape[0] == 1:
        return vec @ trans[0].T
    return np.einsum("ukl,ul->uk", trans, vec)


def forward(pi, Pi, emission):
    """Normalised forward vectors.

    Returns ``(forward, log_scale, log_f)`` where ``forward[:, t]`` is
    ``P(U_t | y_1..y_t)``, ``log_scale[:, t]`` is ``log P(y_t | y_1..y_{t-1})``
    and ``log_f`` their sum, the log manifest probability. A sequence that is
    impossible under the parameters gets ``log_f = -inf`` and zero forward
    vectors from that occasion on.
    """
    pi, Pi, emission = _batch(pi, Pi, emission)
    U, T, k = emission.shape
    fwd = np.zeros((U, T, k))
    log_scale = np.zeros((U, T))
    q = pi * emission[:, 0]
    for t in range(T):
        if t > 0:
            q = _step(fwd[:, t - 1], Pi[:, t - 1]) * emission[:, t]
        c = q.sum(axis=1)
        ok = c > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            fwd[:, t] = np.where(ok[:, None], q / np.where(ok, c, 1.0)[:, None], 0.0)
            log_scale[:, t] = np.where(ok, np.log(np.where(ok, c, 1.0)), -np.inf)
    return fwd, log_scale, log_scale.sum(axis=1)


def backward(Pi, emission, log_scale):
    """Backward vectors scaled by the forward normalisers.

    ``backward[:, T-1]`` is all ones; earlier vectors follow
    ``b_t = Pi_{t+1} diag(e_{t+1}) b_{t+1} / c_{t+1}``.
    """
    emission = np.asarray(emission, dtype=float)
    U, T, k = emission.shape
    _, Pi, _ = _batch(np.full(k, 1.0 / k), Pi, emission)
    scale = np.exp(np.asarray(log_scale, dtype=float))
    bwd = np.ones((U, T, k))
    for t in range(T - 2, -1, -1):
        nxt = emission[:, t + 1] * bwd[:, t + 1]
        c = scale[:, t + 1]
        ok = c > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            val = _back_step(nxt, Pi[:, t]) / np.where(ok, c, 1.0)[:, None]
        bwd[:, t] = np.where(ok[:, None], val, 0.0)
    return bwd


def posteriors(pi, Pi, emission) -> LatticeResult:
    """Forward-backward pass returning state and pair posteriors."""
    pi, Pi, emission = _batch(pi, Pi, emission)
    U, T, k = emission.shape
    fwd, log_scale, log_f = forward(pi, Pi, emission)
    bwd = backward(Pi, emission, log_scale)
    post = fwd * bwd
    if T > 1:
        scale = np.exp(log_scale[:, 1:])
        ok = scale > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            right = emission[:, 1:] * bwd[:, 1:] / np.where(ok, scale, 1.0)[..., None]
        right = np.where(ok[..., None], right, 0.0)
    else:
        right = np.zeros((U, 0, k))
    return LatticeResult(log_f, fwd, log_scale, bwd, post, Pi, right)
