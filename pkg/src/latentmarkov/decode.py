"""Most likely latent paths.

:func:`viterbi` finds the sequence maximising the joint probability of
states and responses (equivalently the posterior of the path); ties are
broken toward the smallest state index. :func:`local_decode` picks the most
likely state at each occasion separately.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .recursions import LatticeResult

__all__ = ["DecodeError", "DecodedPath", "viterbi", "local_decode", "decode_fit"]


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class DecodedPath:
    """Decoded states for a batch of sequences (0-based states).

    ``path`` (U, T), ``log_joint`` (U,) the log of ``p(path, y)``,
    ``local`` (U, T) the per-occasion posterior modes and ``local_mass``
    their posterior probabilities (None when posteriors were not supplied).
    """

    path: np.ndarray
    log_joint: np.ndarray
    local: np.ndarray | None = None
    local_mass: np.ndarray | None = None


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(a, dtype=float))


def viterbi(pi, Pi, emission, lattice: LatticeResult | None = None) -> DecodedPath:
    """Global decoding by dynamic programming in log space.

    Shapes follow :mod:`latentmarkov.recursions`: ``pi`` (k,) or (U, k),
    ``Pi`` (T-1, k, k) or (U, T-1, k, k), ``emission`` (U, T, k).
    """
    emission = np.asarray(emission, dtype=float)
    if emission.ndim == 2:
        emission = emission[None]
    U, T, k = emission.shape
    lpi = np.broadcast_to(_log(pi), (U, k))
    lPi = np.broadcast_to(_log(Pi), (U, T - 1, k, k)) if T > 1 else None
    le = _log(emission)
    delta = lpi + le[:, 0]
    back = np.zeros((U, T, k), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, :, None] + lPi[:, t - 1]  # (U, from, to)
        back[:, t] = np.argmax(cand, axis=1)
        delta = np.take_along_axis(cand, back[:, t][:, None, :], axis=1)[:, 0] + le[:, t]
    if np.any(np.all(np.isneginf(delta), axis=1)):
        bad = int(np.flatnonzero(np.all(np.isneginf(delta), axis=1))[0])
        raise DecodeError(f"sequence {bad} has zero probability under the parameters")
    path = np.zeros((U, T), dtype=np.int64)
    path[:, T - 1] = np.argmax(delta, axis=1)
    best = delta[np.arange(U), path[:, T - 1]]
    for t in range(T - 1, 0, -1):
        path[:, t - 1] = back[np.arange(U), t, path[:, t]]
    local = mass = None
    if lattice is not None:
        local, mass = local_decode(lattice)
    return DecodedPath(path, best, local, mass)


def local_decode(lattice: LatticeResult):
    """Per-occasion posterior modes ``(states, mass)``, each (U, T)."""
    post = lattice.post_state
    states = np.argmax(post, axis=-1)
    mass = np.take_along_axis(post, states[..., None], axis=-1)[..., 0]
    return states, mass


def decode_fit(model, states_or_params, subjects: bool = True) -> DecodedPath:
    """Decode every unit of a compiled model; with ``subjects`` map patterns back to subjects."""
    from .params import ModelParams

    states = (model.states_from_params(states_or_params)
              if isinstance(states_or_params, ModelParams) else states_or_params)
    pi, Pi, phi = model.resolve(states)
    em = model.emission(phi)
    lat = model.lattice(states)
    res = viterbi(pi, Pi, em, lat)
    idx = model.units.index
    if subjects and idx is not None:
        res = DecodedPath(res.path[idx], res.log_joint[idx], res.local[idx], res.local_mass[idx])
    return res
