"""Expectation-maximisation for latent Markov models.

:func:`fit` runs EM from a deterministic start plus ``starts`` random ones
and keeps the best converged run. Every iteration is one E-step (forward-
backward posteriors turned into expected counts) and one M-step per model
component: closed-form for unconstrained probabilities, one Fisher-scoring
maximisation for link or linear models.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .blocks import FisherScoringError, LinkBlock, AffineBlock, fisher_scoring
from .data import PanelDataset, PatternTable
from .model import LatentMarkovModel, compile_model
from .params import ModelParams, ModelSpec
from .recursions import LatticeResult, posteriors

logger = logging.getLogger(__name__)

__all__ = [
    "EMError",
    "ExpectedCounts",
    "FitResult",
    "StartSummary",
    "e_step",
    "m_step",
    "fisher_scoring_measurement",
    "fisher_scoring_transition",
    "fit",
    "default_threads",
]

THREADS_ENV = "LATENTMARKOV_THREADS"


class EMError(RuntimeError):
    """Estimation failure (zero-likelihood data, every start failing, ...)."""


@dataclass
class ExpectedCounts:
    """Expected sufficient statistics from one E-step.

    Aggregated arrays: ``a1`` (k,), ``at`` (T, k), ``atrans`` (T-1, k, k)
    indexed by arrival occasion, ``aresp[b]`` (T, k, L_b). Per-unit arrays
    (``unit_state``, ``unit_pair``) already include the unit weights; ``unit_pair``
    is only formed when a per-unit transition model needs it.
    """

    n: float
    a1: np.ndarray
    at: np.ndarray
    atrans: np.ndarray
    aresp: list
    unit_state: np.ndarray
    unit_pair: np.ndarray | None
    codes: list
    levels: list

    def unit_resp(self, b: int) -> np.ndarray:
        """Per-unit state-response counts ``(U, T, k, L_b)``."""
        onehot = np.eye(self.levels[b])[self.codes[b]]
        return self.unit_state[..., None] * onehot[:, :, None, :]

    def check(self, tol: float = 1e-10) -> list[str]:
        """Violated consistency identities (empty when all hold)."""
        out = []
        scale = max(1.0, self.n)
        if abs(self.a1.sum() - self.n) > tol * scale:
            out.append(f"initial counts sum {self.a1.sum()} != {self.n}")
        if self.atrans.size and np.max(np.abs(self.atrans.sum(axis=2) - self.at[:-1])) > tol * scale:
            out.append("transition counts do not add up to occupancies")
        for b, ar in enumerate(self.aresp):
            if np.max(np.abs(ar.sum(axis=2) - self.at)) > tol * scale:
                out.append(f"response counts of block {b} do not add up to occupancies")
        if np.any(self.a1 < 0) or np.any(self.atrans < 0):
            out.append("negative expected counts")
        return out


@dataclass(frozen=True)
class StartSummary:
    start: str
    loglik: float
    iterations: int
    converged: bool
    error: str | None = None


@dataclass(eq=False)
class FitResult:
    params: ModelParams
    loglik: float
    iterations: int
    converged: bool
    counts: ExpectedCounts
    start_summaries: list
    model: LatentMarkovModel
    trace: list = field(default_factory=list)
    states: list | None = None

    @property
    def n_free(self) -> int:
        return self.model.n_free

    def posteriors(self) -> LatticeResult:
        return self.model.lattice(self.states)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# E and M steps
# ---------------------------------------------------------------------------

def _model(data, spec, model):
    if model is not None:
        return model
    return compile_model(spec, data)


def e_step_states(model: LatentMarkovModel, states):
    lat = model.lattice(states)
    w = model.units.weights
    bad = ~np.isfinite(lat.log_f)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        what = "subject" if model.units.subjects else "pattern"
        raise EMError(
            f"{what} {i} with responses {model.units.responses[i].tolist()} has zero probability "
            "under the current parameters"
        )
    us = lat.post_state * w[:, None, None]
    need_pairs = any(c.per_unit and c.name == "transition" for c in model.components)
    up = lat.post_pair * w[:, None, None, None] if need_pairs else None
    aresp = []
    ust = us.transpose(1, 2, 0)  # (T, k, U)
    for b, codes in enumerate(model.codes):
        onehot = np.eye(model.block_levels[b])[codes]
        aresp.append(np.matmul(ust, onehot.transpose(1, 0, 2)))
    counts = ExpectedCounts(
        n=float(w.sum()),
        a1=us[:, 0].sum(axis=0),
        at=us.sum(axis=0),
        atrans=lat.pair_totals(w),
        aresp=aresp,
        unit_state=us,
        unit_pair=up,
        codes=model.codes,
        levels=list(model.block_levels),
    )
    return counts, float(np.sum(w * lat.log_f)), lat


def e_step(params: ModelParams, data, spec: ModelSpec | None = None, *, model=None):
    """Expected counts and log-likelihood at ``params``."""
    model = _model(data, spec, model)
    counts, ll, _ = e_step_states(model, model.states_from_params(params))
    return counts, ll


def m_step_states(model: LatentMarkovModel, counts: ExpectedCounts, states):
    return [comp.m_step(model.component_counts(comp, counts), st) for comp, st in zip(model.components, states)]


def m_step(counts: ExpectedCounts, spec: ModelSpec | None, current: ModelParams, *, data=None, model=None):
    """Parameters maximising the expected complete-data log-likelihood given ``counts``.

    Needs either a compiled ``model`` or the ``data`` the counts came from.
    """
    if model is None:
        if data is None:
            raise ValueError("m_step needs the compiled model or the data")
        model = compile_model(spec, data)
    new = m_step_states(model, counts, model.states_from_params(current))
    return model.params_from_states(new)


def fisher_scoring_measurement(counts, design, beta0, *, link="multinomial", max_iter=100):
    """Maximise ``sum counts * log phi(beta)`` for a measurement design.

    ``counts`` has shape ``rows + (l,)`` and ``design`` ``rows + (m, p)``
    (``m = l`` for multinomial logits with reference category 0, ``l - 1``
    for global or continuation logits).
    """
    fam = "multinomial" if link in ("multinomial", "binary-logit") else link
    blk = LinkBlock(design, fam)
    beta, _, _ = fisher_scoring(blk, counts, beta0, max_iter=max_iter)
    return beta


def fisher_scoring_transition(counts, design, delta0, *, model="logit", mask=None, max_iter=100):
    """Maximise ``sum counts * log Pi(delta)`` for transition rows.

    ``model="logit"``: diagonal-reference logits, ``design`` (T-1, k, k, p),
    optional ``mask`` of allowed transitions. ``model="linear"``:
    off-diagonal probabilities ``design @ delta`` (diagonal entries ignored;
    they take the remaining mass).
    """
    counts = np.asarray(counts, dtype=float)
    design = np.asarray(design, dtype=float)
    Tm1, k = design.shape[:2]
    if model == "logit":
        free = None if mask is None else np.broadcast_to(np.asarray(mask, bool), (Tm1, k, k))
        blk = LinkBlock(design, "multinomial", free=free, reference=np.broadcast_to(np.arange(k), (Tm1, k)))
    elif model == "linear":
        W = design.copy()
        idx = np.arange(k)
        W[:, idx, idx, :] = 0.0
        W[:, idx, idx, :] = -W.sum(axis=2)
        blk = AffineBlock(np.broadcast_to(np.eye(k), (Tm1, k, k)), W)
    else:
        raise ValueError(f"unknown transition model {model!r}")
    delta, _, _ = fisher_scoring(blk, counts, delta0, max_iter=max_iter)
    return delta


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class _Run:
    label: str
    states: list | None
    loglik: float
    iterations: int
    converged: bool
    trace: list
    counts: ExpectedCounts | None
    error: str | None = None


def run_em(model: LatentMarkovModel, states, *, tol=1e-8, param_tol=1e-6, max_iter=5000, label="start"):
    """EM iterations from ``states``; returns a :class:`_Run`.

    Stops when the relative log-likelihood change is below ``tol`` and the
    largest parameter change below ``param_tol``. The reported parameters are
    those at which the final log-likelihood was evaluated.
    """
    trace = []
    counts, ll, _ = e_step_states(model, states)
    trace.append(ll)
    flat = model.flat(states)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new_states = m_step_states(model, counts, states)
        new_counts, new_ll, _ = e_step_states(model, new_states)
        new_flat = model.flat(new_states)
        dl = abs(new_ll - ll) / max(1.0, abs(ll))
        dp = float(np.max(np.abs(new_flat - flat))) if flat.size else 0.0
        if new_ll < ll - 1e-10 * max(1.0, abs(ll)):
            logger.warning("%s: log-likelihood decreased by %.3g at iteration %d", label, ll - new_ll, it)
        states, counts, ll, flat = new_states, new_counts, new_ll, new_flat
        trace.append(ll)
        if dl < tol and dp < param_tol:
            converged = True
            break
    return _Run(label, states, ll, it, converged, trace, counts)


def _safe_run(model, make_states, kw, label):
    try:
        states = make_states()
        return run_em(model, states, label=label, **kw)
    except (FisherScoringError, EMError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.info("%s failed: %s", label, exc)
        return _Run(label, None, -np.inf, 0, False, [], None, str(exc))


def fit(data, spec: ModelSpec, *, starts: int = 9, seed: int = 0, tol: float = 1e-8, param_tol: float = 1e-6,
        max_iter: int = 5000, init: ModelParams | None = None, threads: int | None = None,
        aggregate: bool = True, canonical: bool = True, model: LatentMarkovModel | None = None) -> FitResult:
    """Maximum likelihood fit by EM with multiple starts.

    The deterministic start (or ``init`` when given) is run first, followed
    by ``starts`` random starts seeded from ``seed``. The best run (highest
    log-likelihood among converged runs, or among all runs if none
    converged; ties go to the earliest start) is returned after relabelling
    the states in increasing order of their expected responses.
    """
    if model is None:
        model = compile_model(spec, data, aggregate=aggregate)
    kw = dict(tol=tol, param_tol=param_tol, max_iter=max_iter)
    seeds = np.random.SeedSequence(seed).spawn(starts)
    jobs = []
    if init is not None:
        jobs.append(("init", lambda: model.states_from_params(init)))
    else:
        jobs.append(("deterministic", model.deterministic_start))
    for j, ss in enumerate(seeds):
        jobs.append((f"random-{j + 1}", lambda ss=ss: model.random_start(np.random.default_rng(ss))))
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(lambda job: _safe_run(model, job[1], kw, job[0]), jobs))
    else:
        runs = [_safe_run(model, make, kw, label) for label, make in jobs]
    ok = [r for r in runs if r.states is not None]
    if not ok:
        raise EMError("every start failed: " + "; ".join(f"{r.label}: {r.error}" for r in runs))
    pool_ = [r for r in ok if r.converged] or ok
    best = pool_[0]
    for r in pool_[1:]:
        if r.loglik > best.loglik:
            best = r
    states = best.states
    if canonical:
        states, perm = model.canonicalize(states)
        if not np.all(perm == np.arange(model.k)):
            counts, ll, _ = e_step_states(model, states)
        else:
            counts, ll = best.counts, best.loglik
    else:
        counts, ll = best.counts, best.loglik
    summaries = [StartSummary(r.label, float(r.loglik), r.iterations, r.converged, r.error) for r in runs]
    return FitResult(
        params=model.params_from_states(states),
        loglik=float(ll),
        iterations=best.iterations,
        converged=best.converged,
        counts=counts,
        start_summaries=summaries,
        model=model,
        trace=best.trace,
        states=states,
    )
