"""Compile a :class:`ModelSpec` against a dataset into estimable components.

Each of the three parts of the model (initial probabilities, transition
probabilities, one piece per measurement block) becomes a *component* that
knows how to

* produce its probability array from a state (probabilities or coefficients),
* update the state from expected counts (closed form or Fisher scoring),
* map the state to unconstrained coordinates and back,
* give the gradient of the expected complete-data log-likelihood in those
  coordinates.

Components whose probabilities depend on covariates or lagged responses are
*per unit*: their arrays carry a leading subject axis and they consume
per-subject counts.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import links
from .blocks import AffineBlock, FisherScoringError, LinkBlock, block_score, fisher_scoring
from .covariates import bivariate_design, initial_design, measurement_design, transition_design
from .data import DataError, PanelDataset, PatternTable
from .params import (
    Dims,
    MeasurementSpec,
    ModelParams,
    ModelSpec,
    SpecError,
    spec_mask,
    validate_spec,
)
from .recursions import LatticeResult, posteriors

logger = logging.getLogger(__name__)

__all__ = ["compile_model", "LatentMarkovModel", "FreeComponent", "FixedComponent", "BlockComponent"]

ZERO_DENOMINATOR = 1e-10
COORD_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------

class FreeComponent:
    """Unconstrained categorical rows, possibly pooled (equality constraints) and masked.

    ``row_map`` assigns each row of the full array to a pooled row; rows in
    the same pool share their probabilities. Coordinates are multinomial
    logits against ``ref`` for every allowed non-reference category.
    """

    per_unit = False
    squeeze = False

    def __init__(self, name, role, rows, K, row_map, free, ref, permute=None):
        self.name, self.role = name, role
        self.rows, self.K = tuple(rows), K
        self.row_map = np.asarray(row_map, dtype=np.int64).reshape(-1)
        self.R = int(self.row_map.max()) + 1 if self.row_map.size else 0
        self.free = np.asarray(free, dtype=bool).reshape(self.R, K)
        self.ref = np.asarray(ref, dtype=np.int64).reshape(self.R)
        self.active = self.free & (np.arange(K) != self.ref[:, None])
        self.rep = np.array([np.flatnonzero(self.row_map == r)[0] for r in range(self.R)], dtype=np.int64)
        self.n_free = int(self.active.sum())
        self._permute = permute

    @property
    def shape(self):
        return self.rows + (self.K,)

    def probs(self, state):
        return state

    def pooled(self, state):
        return np.asarray(state).reshape(-1, self.K)[self.rep]

    def expand(self, pooled):
        return pooled[self.row_map].reshape(self.shape)

    def pool(self, counts):
        out = np.zeros((self.R, self.K))
        np.add.at(out, self.row_map, np.asarray(counts).reshape(-1, self.K))
        return out

    def m_step(self, counts, state):
        c = self.pool(counts) * self.free
        N = c.sum(axis=1)
        old = self.pooled(state)
        ok = N >= ZERO_DENOMINATOR
        new = np.where(ok[:, None], c / np.where(ok, N, 1.0)[:, None], old)
        return self.expand(new)

    def coords(self, state):
        p = np.maximum(self.pooled(state), COORD_FLOOR)
        lam = np.log(p) - np.log(p[np.arange(self.R), self.ref])[:, None]
        return lam[self.active]

    def from_coords(self, theta, state=None):
        lam = np.zeros((self.R, self.K))
        lam[self.active] = theta
        return self.expand(links.multinomial_inverse(lam, self.free))

    def gradient(self, counts, state):
        c = self.pool(counts)
        p = self.pooled(state)
        g = c - c.sum(axis=1, keepdims=True) * p
        return g[self.active]

    def coord_jacobian(self, state):
        """``d coords / d p`` for the free non-reference probabilities (reference implied)."""
        p = np.maximum(self.pooled(state), COORD_FLOOR)
        n = self.n_free
        G = np.zeros((n, n))
        pos = 0
        for r in range(self.R):
            idx = np.flatnonzero(self.active[r])
            m = len(idx)
            if m:
                G[pos:pos + m, pos:pos + m] = np.diag(1.0 / p[r, idx]) + 1.0 / p[r, self.ref[r]]
            pos += m
        return G

    def free_probabilities(self, state):
        return self.pooled(state)[self.active]

    def free_labels(self):
        out = []
        for r in range(self.R):
            full = np.unravel_index(self.rep[r], self.rows) if self.rows else ()
            for y in np.flatnonzero(self.active[r]):
                out.append(f"{self.name}{list(map(int, full)) + [int(y)]}")
        return out

    def start(self, target):
        target = np.broadcast_to(np.asarray(target, dtype=float), self.shape)
        c = self.pool(target) * self.free
        c = c + 1e-6 * self.free
        return self.expand(c / c.sum(axis=1, keepdims=True))

    def random(self, rng):
        p = np.zeros((self.R, self.K))
        for r in range(self.R):
            idx = np.flatnonzero(self.free[r])
            p[r, idx] = rng.dirichlet(np.ones(len(idx)))
        return self.expand(p)

    def permute(self, state, perm):
        if self._permute is None:
            raise NotImplementedError(f"{self.name} cannot be relabelled")
        new = self._permute(np.asarray(state), perm)
        # pooling and masks must be compatible with the relabelling
        if not np.allclose(self.expand(self.pooled(new)), new, atol=1e-12, rtol=0):
            raise NotImplementedError(f"{self.name}: constraints not invariant under relabelling")
        if np.any(new.reshape(-1, self.K)[~self.free[self.row_map]] > 0):
            raise NotImplementedError(f"{self.name}: structural zeros not invariant under relabelling")
        return new

    def permute_occasions(self, state, perms):
        """Relabel the states separately at each occasion; ``perms[t]`` maps new to old labels."""
        state = np.asarray(state)
        if self.role == "initial":
            new = state[perms[0]]
        elif self.role == "transition":
            new = np.stack([state[t][perms[t]][:, perms[t + 1]] for t in range(state.shape[0])])
        else:
            new = np.stack([state[t][perms[t]] for t in range(state.shape[0])])
        if not np.allclose(self.expand(self.pooled(new)), new, atol=1e-12, rtol=0):
            raise NotImplementedError(f"{self.name}: constraints not invariant under relabelling")
        if np.any(new.reshape(-1, self.K)[~self.free[self.row_map]] > 0):
            raise NotImplementedError(f"{self.name}: structural zeros not invariant under relabelling")
        return new

    def flat(self, state):
        return np.ravel(state)

    def stored(self, state):
        return state, None

    def load(self, prob, coef):
        if prob is None:
            raise SpecError(f"{self.name} probabilities missing from parameters")
        prob = np.asarray(prob, dtype=float)
        if prob.shape != self.shape:
            raise SpecError(f"{self.name} probabilities have shape {prob.shape}, expected {self.shape}")
        return prob


class FixedComponent:
    """Probabilities held fixed (uniform initial distribution, empty transitions)."""

    per_unit = False
    squeeze = False
    n_free = 0

    def __init__(self, name, role, value):
        self.name, self.role = name, role
        self.value = np.asarray(value, dtype=float)
        self.shape = self.value.shape

    def probs(self, state):
        return self.value

    def m_step(self, counts, state):
        return state

    def coords(self, state):
        return np.zeros(0)

    def from_coords(self, theta, state=None):
        return self.value

    def gradient(self, counts, state):
        return np.zeros(0)

    def coord_jacobian(self, state):
        return np.zeros((0, 0))

    def free_probabilities(self, state):
        return np.zeros(0)

    def free_labels(self):
        return []

    def start(self, target):
        return self.value

    def random(self, rng):
        return self.value

    def permute(self, state, perm):
        return self.value

    def flat(self, state):
        return np.zeros(0)

    def stored(self, state):
        return self.value, None

    def load(self, prob, coef):
        return self.value


class BlockComponent:
    """Probabilities given by a parametric block; the state is its coefficient vector.

    ``per_unit`` blocks have a leading subject axis. ``squeeze`` blocks have
    a dummy leading axis of length 1 that is dropped from the probabilities.
    """

    def __init__(self, name, role, block, *, per_unit=False, squeeze=False, labels=None):
        self.name, self.role = name, role
        self.block = block
        self.per_unit = per_unit
        self.squeeze = squeeze
        self.n_free = block.n_theta
        self.labels = labels

    @property
    def target_shape(self):
        rows = self.block.rows[1:] if (self.per_unit or self.squeeze) else self.block.rows
        return rows + (self.block.K,)

    def probs(self, state):
        p = self.block.probs(state)
        return p[0] if self.squeeze else p

    def _counts(self, counts):
        return np.asarray(counts)[None] if self.squeeze else counts

    def m_step(self, counts, state):
        theta, _, _ = fisher_scoring(self.block, self._counts(counts), state)
        return theta

    def coords(self, state):
        return np.asarray(state, dtype=float)

    def from_coords(self, theta, state=None):
        return np.asarray(theta, dtype=float)

    def gradient(self, counts, state):
        return block_score(self.block, state, self._counts(counts))

    def coord_jacobian(self, state):
        return np.eye(self.n_free)

    def free_probabilities(self, state):
        return np.asarray(state, dtype=float)

    def free_labels(self):
        if self.labels is not None:
            return [f"{self.name}.{lab}" for lab in self.labels]
        return [f"{self.name}.coef[{j}]" for j in range(self.n_free)]

    def _valid_theta0(self):
        blk = self.block
        th = np.asarray(blk.theta0, dtype=float)
        if blk.valid(blk.probs(th)):
            return th
        if isinstance(blk, AffineBlock):
            return blk.feasible_start()
        # least-squares fit of the predictors of a uniform distribution
        K = blk.K
        if blk.family == "global":
            eta = links.apply_link(links.LinkKind("global"), np.full(K, 1.0 / K))
            A = blk.design.reshape(-1, blk.design.shape[-1])
            b = np.broadcast_to(eta, blk.design.shape[:-1]).reshape(-1)
            if blk.transform is None:
                th = np.linalg.lstsq(A, b, rcond=None)[0]
                if blk.valid(blk.probs(th)):
                    return th
        raise SpecError(f"{self.name}: no valid starting coefficients for the design")

    def start(self, target):
        blk = self.block
        target = np.asarray(target, dtype=float)
        counts = np.broadcast_to(target, blk.rows + (blk.K,)) * 1.0
        counts = np.where(blk.free, counts + 1e-3, 0.0)
        theta0 = self._valid_theta0()
        if isinstance(blk, AffineBlock):
            tgt = counts / counts.sum(axis=-1, keepdims=True)
            try:
                theta0 = blk.feasible_start(tgt)
            except FisherScoringError:
                pass
        try:
            theta, _, _ = fisher_scoring(blk, counts, theta0)
        except FisherScoringError as exc:
            logger.debug("start for %s kept default coefficients: %s", self.name, exc)
            theta = theta0
        return theta

    def random(self, rng):
        blk = self.block
        theta = rng.uniform(-1.0, 1.0, blk.n_theta)
        p = blk.probs(theta)
        if blk.valid(p) and np.all(p[blk.free] > 0):
            return theta
        shape = self.target_shape
        target = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
        return self.start(target)

    def permute(self, state, perm):
        return self.block.permute(state, perm)

    def flat(self, state):
        return np.asarray(state, dtype=float)

    def stored(self, state):
        if self.per_unit:
            return None, np.asarray(state, dtype=float)
        return self.probs(state), np.asarray(state, dtype=float)

    def load(self, prob, coef):
        if coef is None and prob is not None and not self.per_unit:
            # only probabilities given: fit the coefficients to them
            return self.start(prob)
        if coef is None:
            raise SpecError(f"{self.name} coefficients missing from parameters")
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (self.n_free,):
            raise SpecError(f"{self.name} has {coef.size} coefficients, expected {self.n_free}")
        return coef


# ---------------------------------------------------------------------------
# design helpers
# ---------------------------------------------------------------------------

def column_permutation(design, permuted):
    """``sigma`` with ``permuted[..., j] == design[..., sigma[j]]``; None if no bijection exists."""
    P = design.shape[-1]
    if P == 0:
        return np.zeros(0, dtype=np.int64)
    A = design.reshape(-1, P)
    B = permuted.reshape(-1, P)
    used = np.zeros(P, dtype=bool)
    sigma = np.empty(P, dtype=np.int64)
    for j in range(P):
        hits = [i for i in range(P) if not used[i] and np.array_equal(A[:, i], B[:, j])]
        if not hits:
            return None
        sigma[j] = hits[0]
        used[hits[0]] = True
    return sigma


def _design_permuter(design, state_axes):
    """Relabelling via a column permutation of a design whose rows carry state axes."""

    def permute(theta, perm):
        d = design
        for ax in state_axes:
            d = np.take(d, perm, axis=ax)
        sigma = column_permutation(design, d)
        if sigma is None:
            raise NotImplementedError("design is not closed under relabelling the states")
        out = np.empty_like(theta)
        out[sigma] = theta
        return out

    return permute


def _family(link: str) -> str:
    if link in ("multinomial", "binary-logit"):
        return "multinomial"
    if link in ("global", "continuation"):
        return link
    raise SpecError(f"unsupported link {link!r}")


def _measurement_link_block(ms: MeasurementSpec, T, k, L, name):
    fam = _family(ms.link)
    m = L if fam == "multinomial" else L - 1
    design = ms.design if ms.design is not None else ("rasch" if ms.kind == "rasch" else "saturated")
    labels = None
    theta0 = None
    if isinstance(design, str):
        if design == "saturated":
            if fam == "multinomial":
                P = T * k * (L - 1)
                D = np.zeros((T, k, L, P))
                for t in range(T):
                    for u in range(k):
                        for y in range(1, L):
                            D[t, u, y, (t * k + u) * (L - 1) + y - 1] = 1.0
                labels = [f"lambda[{t},{u},{y}]" for t in range(T) for u in range(k) for y in range(1, L)]
            else:
                P = T * k * m
                D = np.zeros((T, k, m, P))
                theta0 = np.zeros(P)
                for t in range(T):
                    for u in range(k):
                        for y in range(m):
                            j = (t * k + u) * m + y
                            D[t, u, y, j] = 1.0
                            theta0[j] = (m - 1) / 2.0 - y if fam == "global" else 0.0
                labels = [f"eta[{t},{u},{y}]" for t in range(T) for u in range(k) for y in range(1, L)]
        elif design in ("rasch", "state_cut"):
            n_time = T - 1 if design == "rasch" else 0
            n_cut = L - 2 if L > 2 else 0
            P = k + n_time + n_cut
            D = np.zeros((T, k, m, P))
            labels = [f"ability[{u}]" for u in range(k)]
            labels += [f"difficulty[{t}]" for t in range(1, T)] if design == "rasch" else []
            labels += [f"cut[{y}]" for y in range(2, L)]
            slots = [1] if fam == "multinomial" else list(range(m))
            if fam == "multinomial" and L > 2:
                raise SpecError("Rasch-type designs with more than two categories need a global or continuation link")
            for u in range(k):
                D[:, u, slots, u] = 1.0
            for t in range(1, T):
                if design == "rasch":
                    D[t, :, slots, k + t - 1] = -1.0
            for y in range(1, m if fam != "multinomial" else 1):
                D[:, :, y, k + n_time + y - 1] = -1.0
            theta0 = np.zeros(P)
            theta0[:k] = np.linspace(-1.0, 1.0, k) if k > 1 else 0.0
            if fam == "global":
                theta0[k + n_time:] = np.arange(1, n_cut + 1) * 1.0
        else:
            raise SpecError(f"unknown measurement design {design!r}")
    else:
        D = np.asarray(design, dtype=float)
        if D.ndim != 4 or D.shape[:3] != (T, k, m):
            raise SpecError(f"{name}: explicit design must have shape ({T}, {k}, {m}, p)")
    blk = LinkBlock(D, fam, theta0=theta0)
    blk._permute = _design_permuter(D, (1,))
    return BlockComponent(name, "measurement", blk, labels=labels)


def _transition_logit_block(tr, T, k, mask, name):
    fam = _family(tr.link)
    Tm1 = T - 1
    tv = tr.time_varying
    nper = Tm1 if tv else 1
    theta0 = None
    if tr.design is not None:
        D = np.asarray(tr.design, dtype=float)
        m = k if fam == "multinomial" else k - 1
        if D.ndim != 4 or D.shape[:3] != (Tm1, k, m):
            raise SpecError(f"explicit transition design must have shape ({Tm1}, {k}, {m}, p)")
        labels = None
    elif fam == "multinomial":
        if not np.all(np.diag(mask)):
            raise SpecError("diagonal-reference transition logits need every diagonal entry allowed")
        pairs = [(u, v) for u in range(k) for v in range(k) if u != v and mask[u, v]]
        P = nper * len(pairs)
        D = np.zeros((Tm1, k, k, P))
        for t in range(Tm1):
            g = t if tv else 0
            for j, (u, v) in enumerate(pairs):
                D[t, u, v, g * len(pairs) + j] = 1.0
        theta0 = np.full(P, -1.0)
        labels = [f"{'t%d,' % g if tv else ''}{u}->{v}" for g in range(nper) for u, v in pairs]
    else:
        if not np.all(mask):
            raise SpecError("global transition logits do not support structural zeros; use the multinomial link")
        m = k - 1
        P = nper * k * m
        D = np.zeros((Tm1, k, m, P))
        theta0 = np.zeros(P)
        for t in range(Tm1):
            g = t if tv else 0
            for u in range(k):
                for v in range(m):
                    j = (g * k + u) * m + v
                    D[t, u, v, j] = 1.0
                    theta0[j] = (m - 1) / 2.0 - v + (u - (k - 1) / 2.0) * 1.5
        labels = [f"cut[{'t%d,' % g if tv else ''}{u},{v}]" for g in range(nper) for u in range(k) for v in range(1, k)]
    if fam == "multinomial":
        blk = LinkBlock(D, fam, free=np.broadcast_to(mask, (Tm1, k, k)),
                        reference=np.broadcast_to(np.arange(k), (Tm1, k)), theta0=theta0)
    else:
        blk = LinkBlock(D, fam, theta0=theta0)
    blk._permute = _design_permuter(D, (1, 2)) if fam == "multinomial" else None
    return BlockComponent(name, "transition", blk, labels=labels)


LINEAR_STRUCTURES = ("equal_off_diagonal", "symmetric", "upper_triangular", "tridiagonal", "identity")


def linear_transition_design(structure, k, Tm1, time_varying=False):
    """Coefficient loadings ``W`` (Tm1, k, k, p) of the off-diagonal transition probabilities."""
    if structure == "identity":
        cells = []
    elif structure == "equal_off_diagonal":
        cells = [[(u, v) for u in range(k) for v in range(k) if u != v]]
    elif structure == "symmetric":
        cells = [[(u, v), (v, u)] for u in range(k) for v in range(u + 1, k)]
    elif structure == "upper_triangular":
        cells = [[(u, v)] for u in range(k) for v in range(u + 1, k)]
    elif structure == "tridiagonal":
        cells = [[(u, v)] for u in range(k) for v in range(k) if abs(u - v) == 1]
    else:
        raise SpecError(f"unknown linear transition structure {structure!r}")
    nper = Tm1 if time_varying else 1
    W = np.zeros((Tm1, k, k, nper * len(cells)))
    for t in range(Tm1):
        g = t if time_varying else 0
        for j, group in enumerate(cells):
            for u, v in group:
                W[t, u, v, g * len(cells) + j] = 1.0
    return W


def _transition_linear_block(tr, T, k, name):
    Tm1 = T - 1
    if tr.design is not None:
        W = np.asarray(tr.design, dtype=float)
        if W.ndim != 4 or W.shape[:3] != (Tm1, k, k):
            raise SpecError(f"explicit linear transition design must have shape ({Tm1}, {k}, {k}, p)")
    else:
        W = linear_transition_design(tr.structure or "equal_off_diagonal", k, Tm1, tr.time_varying)
    idx = np.arange(k)
    W = W.copy()
    W[:, idx, idx, :] = 0.0
    W[:, idx, idx, :] = -W.sum(axis=2)
    base = np.broadcast_to(np.eye(k), (Tm1, k, k)).copy()
    blk = AffineBlock(base, W)
    blk._permute = _design_permuter(W, (1, 2))
    target = np.broadcast_to(0.8 * np.eye(k) + 0.2 / k, (Tm1, k, k))
    if blk.n_theta:
        blk.theta0 = blk.feasible_start(np.where(blk.free, target, 0.0) / np.where(blk.free, target, 0.0).sum(-1, keepdims=True))
    return BlockComponent(name, "transition", blk)


def _initial_logit_block(ini, k, name):
    fam = _family(ini.link)
    des = initial_design(np.zeros((1, 0)), k, "global" if fam == "global" else "multinomial")
    if fam == "continuation":
        raise SpecError("initial probabilities support multinomial or global logits")
    return BlockComponent(name, "initial", des.block(), squeeze=True, labels=des.labels)


# ---------------------------------------------------------------------------
# the compiled model
# ---------------------------------------------------------------------------

@dataclass
class Units:
    """Sequences the likelihood is summed over: subjects or distinct patterns."""

    responses: np.ndarray  # (U, T, r)
    weights: np.ndarray  # (U,)
    index: np.ndarray | None  # subject -> unit (aggregated data)
    subjects: bool


def _units(data, aggregate: bool) -> Units:
    if isinstance(data, PatternTable):
        return Units(np.asarray(data.patterns), np.asarray(data.counts, dtype=float), data.index, False)
    if not aggregate:
        return Units(data.responses, data.subject_weights, None, True)
    flat = data.responses.reshape(data.n, -1)
    uniq, index = np.unique(flat, axis=0, return_inverse=True)
    index = index.reshape(-1)
    w = np.bincount(index, weights=data.subject_weights, minlength=len(uniq))
    return Units(uniq.reshape(-1, data.T, data.r), w, index, False)


class LatentMarkovModel:
    """A specification bound to the response layout (and covariates) of a dataset."""

    def __init__(self, spec: ModelSpec, data, aggregate: bool = True):
        if isinstance(data, PatternTable):
            levels, T = tuple(data.levels), data.patterns.shape[1]
        elif isinstance(data, PanelDataset):
            levels, T = data.levels, data.T
        else:
            raise DataError("data must be a PanelDataset or PatternTable")
        self.spec = spec
        self.k = k = spec.k
        self.T = T
        self.levels = levels
        problems = validate_spec(spec, Dims(k, T, levels, len(spec.covariates)))
        if problems:
            raise SpecError("; ".join(problems))
        placement = spec.covariate_placement
        self.placement = placement
        self.block_specs = spec.measurement_blocks(len(levels))
        self.blocks = tuple(tuple(m.variables) for m in self.block_specs)
        self.block_levels = [int(np.prod([levels[v] for v in b])) for b in self.blocks]

        x = None
        if spec.covariates or placement != "none" or any(m.lags for m in self.block_specs):
            if isinstance(data, PatternTable):
                raise DataError("covariate models need subject-level data, not a pattern table")
            if spec.covariates:
                x = data.select_covariates(spec.covariates)
            else:
                x = np.zeros((data.n, T, 0))
        self.x = x

        # response codes are needed for lag designs before choosing units
        subj_codes = None
        if isinstance(data, PanelDataset):
            subj_codes = [self._codes(data.responses, b) for b in range(len(self.blocks))]

        comps_meas = []
        for b, ms in enumerate(self.block_specs):
            comps_meas.append(self._measurement_component(b, ms, x, subj_codes))
        self.measurement = comps_meas
        self.initial = self._initial_component(x)
        self.transition = self._transition_component(x)
        self.components = [self.initial, self.transition, *self.measurement]
        per_unit = any(c.per_unit for c in self.components)
        self.per_unit = per_unit
        if per_unit and isinstance(data, PatternTable):
            raise DataError("covariate models need subject-level data, not a pattern table")
        self.units = _units(data, aggregate and not per_unit)
        self.codes = [self._codes(self.units.responses, b) for b in range(len(self.blocks))]
        self.n_free = sum(c.n_free for c in self.components)
        self.n_obs = float(self.units.weights.sum())

    # -- construction ---------------------------------------------------------
    def _codes(self, responses, b):
        vars_ = self.blocks[b]
        code = np.zeros(responses.shape[:2], dtype=np.int64)
        for v in vars_:
            code = code * self.levels[v] + responses[:, :, v]
        return code

    def _measurement_component(self, b, ms, x, subj_codes):
        T, k, L = self.T, self.k, self.block_levels[b]
        name = f"measurement[{b}]"
        kind = ms.kind
        ident = lambda s, perm: s[:, perm]  # noqa: E731
        if kind in ("free", "time_invariant"):
            rows = np.arange(T * k).reshape(T, k) if kind == "free" else np.broadcast_to(np.arange(k), (T, k))
            R = T * k if kind == "free" else k
            return FreeComponent(name, "measurement", (T, k), L, rows, np.ones((R, L), bool),
                                 np.zeros(R, np.int64), permute=ident)
        if kind in ("link", "rasch"):
            return _measurement_link_block(ms, T, k, L, name)
        lag_codes = subj_codes[b] if ms.lags else None
        if kind == "covariate":
            des = measurement_design(x, k, L, _family(ms.link), lag_codes=lag_codes, names=self.spec.covariates)
        elif kind == "bivariate":
            des = bivariate_design(x if x is not None else np.zeros((1, T, 0)), k, lag_codes=lag_codes,
                                      names=self.spec.covariates)
        else:
            raise SpecError(f"unknown measurement kind {kind!r}")
        unit_free = des.design.shape[-1] == 0 or not self._depends_on_unit(des.design)
        if unit_free:
            blk = LinkBlock(des.design[:1], des.family, permute=des.permute, theta0=des.theta0)
            return BlockComponent(name, "measurement", blk, squeeze=True, labels=des.labels)
        return BlockComponent(name, "measurement", des.block(), per_unit=True, labels=des.labels)

    @staticmethod
    def _depends_on_unit(design):
        return not np.all(design == design[:1])

    def _initial_component(self, x):
        k, ini = self.k, self.spec.initial
        name = "initial"
        if ini.kind == "free":
            return FreeComponent(name, "initial", (), k, np.zeros(1), np.ones((1, k), bool), [0],
                                 permute=lambda s, perm: s[perm])
        if ini.kind == "uniform":
            return FixedComponent(name, "initial", np.full(k, 1.0 / k))
        if ini.kind == "logit":
            return _initial_logit_block(ini, k, name)
        if ini.kind == "covariate":
            des = initial_design(x[:, 0], k, _family(ini.link), names=self.spec.covariates)
            return BlockComponent(name, "initial", des.block(), per_unit=True, labels=des.labels)
        raise SpecError(f"unknown initial kind {ini.kind!r}")

    def _transition_component(self, x):
        k, T, tr = self.k, self.T, self.spec.transition
        name = "transition"
        Tm1 = T - 1
        if Tm1 == 0 or k == 1:
            return FixedComponent(name, "transition", np.ones((Tm1, k, k)) if k == 1 else np.zeros((0, k, k)))
        mask = spec_mask(tr, k)
        swap = lambda s, perm: s[:, perm][:, :, perm]  # noqa: E731
        if tr.kind in ("free", "homogeneous", "partial"):
            if tr.kind == "free":
                rows = np.arange(Tm1 * k).reshape(Tm1, k)
            elif tr.kind == "homogeneous":
                rows = np.broadcast_to(np.arange(k), (Tm1, k))
            else:
                seg = (np.arange(Tm1) >= tr.t_bar - 1).astype(np.int64)
                rows = seg[:, None] * k + np.arange(k)[None, :]
                used = np.unique(rows)
                rows = np.searchsorted(used, rows)
            R = int(rows.max()) + 1
            origin = np.empty(R, dtype=np.int64)
            origin[rows.reshape(-1)] = np.broadcast_to(np.arange(k), (Tm1, k)).reshape(-1)
            free = mask[origin]
            ref = np.where(free[np.arange(R), origin], origin, free.argmax(axis=1))
            return FreeComponent(name, "transition", (Tm1, k), k, rows, free, ref, permute=swap)
        if tr.kind == "linear":
            return _transition_linear_block(tr, T, k, name)
        if tr.kind == "logit":
            return _transition_logit_block(tr, T, k, mask, name)
        if tr.kind == "covariate":
            des = transition_design(x[:, 1:], k, _family(tr.link), mask=mask, names=self.spec.covariates)
            return BlockComponent(name, "transition", des.block(), per_unit=True, labels=des.labels)
        raise SpecError(f"unknown transition kind {tr.kind!r}")

    # -- states <-> parameters ---------------------------------------------------
    def states_from_params(self, params: ModelParams):
        if params.k != self.k or params.T != self.T or tuple(params.levels) != tuple(self.levels):
            raise SpecError("parameters do not match the model dimensions")
        if tuple(map(tuple, params.blocks)) != self.blocks:
            raise SpecError("parameters use a different measurement block layout")
        coef = params.coef
        states = [
            self.initial.load(params.pi, coef.get("initial")),
            self.transition.load(params.Pi, coef.get("transition")),
        ]
        for b, comp in enumerate(self.measurement):
            states.append(comp.load(params.phi[b], coef.get(comp.name)))
        return states

    def params_from_states(self, states) -> ModelParams:
        coef = {}
        arrays = []
        for comp, st in zip(self.components, states):
            prob, c = comp.stored(st)
            arrays.append(None if prob is None else np.array(prob, dtype=float))
            if c is not None:
                coef[comp.name] = np.array(c, dtype=float)
        return ModelParams(self.k, self.T, self.levels, self.blocks, arrays[0], arrays[1], arrays[2:], coef)

    def resolve(self, params_or_states):
        """Probability arrays ``(pi, Pi, phi)`` with a leading unit axis (length 1 or ``U``)."""
        states = (self.states_from_params(params_or_states)
                  if isinstance(params_or_states, ModelParams) else params_or_states)
        if len(states) != len(self.components):
            raise ValueError(f"expected {len(self.components)} component states, got {len(states)}")
        out = []
        for comp, st in zip(self.components, states):
            p = comp.probs(st)
            out.append(p if comp.per_unit else p[None])
        return out[0], out[1], out[2:]

    def emission(self, phi):
        U = len(self.units.weights)
        e = np.ones((U, self.T, self.k))
        tidx = np.arange(self.T)[None, :]
        for ph, codes in zip(phi, self.codes):
            if ph.shape[0] == 1:
                e = e * ph[0][tidx, :, codes]
            else:
                e = e * ph[np.arange(U)[:, None], tidx, :, codes]
        return e

    def lattice(self, states) -> LatticeResult:
        pi, Pi, phi = self.resolve(states)
        return posteriors(pi, Pi, self.emission(phi))

    def loglik(self, params_or_states) -> float:
        states = (self.states_from_params(params_or_states)
                  if isinstance(params_or_states, ModelParams) else params_or_states)
        pi, Pi, phi = self.resolve(states)
        from .recursions import forward
        _, _, log_f = forward(pi, Pi, self.emission(phi))
        return float(np.sum(self.units.weights * log_f))

    # -- coordinates -------------------------------------------------------------
    def coords(self, states):
        return np.concatenate([c.coords(s) for c, s in zip(self.components, states)])

    def states_from_coords(self, theta, like=None):
        out, pos = [], 0
        for i, comp in enumerate(self.components):
            n = comp.n_free
            out.append(comp.from_coords(theta[pos:pos + n], None if like is None else like[i]))
            pos += n
        return out

    def score_states(self, states):
        """Gradient of the log-likelihood in coordinates, via the expected complete-data score."""
        from .em import e_step_states

        counts, _, _ = e_step_states(self, states)
        return np.concatenate([c.gradient(self.component_counts(c, counts), s)
                               for c, s in zip(self.components, states)])

    def coord_jacobians(self, states):
        """Per-component ``d coords / d (reported free values)`` blocks."""
        return [c.coord_jacobian(s) for c, s in zip(self.components, states)]

    def reported_values(self, states):
        return np.concatenate([c.free_probabilities(s) for c, s in zip(self.components, states)])

    @property
    def bic_n(self) -> float:
        return self.n_obs

    def coord_labels(self):
        return [lab for c in self.components for lab in c.free_labels()]

    def flat(self, states):
        return np.concatenate([c.flat(s) for c, s in zip(self.components, states)])

    # -- starting values ---------------------------------------------------------------
    def deterministic_targets(self):
        """Start probabilities: response distributions of k quantile groups of occasion-1 scores."""
        k, T = self.k, self.T
        y = self.units.responses
        w = self.units.weights
        scale = np.array([lv - 1 for lv in self.levels], dtype=float)
        first = (y[:, 0, :] / scale).mean(axis=1)
        overall = (y / scale).mean(axis=(1, 2))
        order = np.lexsort((np.arange(len(w)), overall, first))
        cum = np.cumsum(w[order]) / w.sum()
        group = np.empty(len(w), dtype=np.int64)
        group[order] = np.minimum((cum - 0.5 * w[order] / w.sum()) * k, k - 1).astype(np.int64)
        phi = []
        for b, codes in enumerate(self.codes):
            L = self.block_levels[b]
            tab = np.full((T, k, L), 0.5)
            for g in range(k):
                sel = group == g
                for t in range(T):
                    tab[t, g] += np.bincount(codes[sel, t], weights=w[sel], minlength=L)
            phi.append(tab / tab.sum(axis=-1, keepdims=True))
        mask = spec_mask(self.spec.transition, k) if k > 1 else np.ones((1, 1), bool)
        P = np.where(mask, 0.8 * np.eye(k) + 0.2 / k, 0.0)
        P = P / P.sum(axis=1, keepdims=True)
        Pi = np.broadcast_to(P, (T - 1, k, k)).copy()
        return [np.full(k, 1.0 / k), Pi, *phi]

    def deterministic_start(self):
        return [c.start(t) for c, t in zip(self.components, self.deterministic_targets())]

    def random_start(self, rng):
        return [c.random(rng) for c in self.components]

    # -- label switching ---------------------------------------------------------------
    def state_scores(self, states, per_occasion: bool = False):
        """Mean standardised expected response of each state, ``(k,)`` or ``(T, k)``."""
        _, _, phi = self.resolve(states)
        score = np.zeros((self.T, self.k))
        for b, ph in enumerate(phi):
            lv = [self.levels[v] for v in self.blocks[b]]
            cells = np.array(np.unravel_index(np.arange(self.block_levels[b]), lv)).T  # (L, nvar)
            vals = (cells / (np.array(lv) - 1.0)).mean(axis=1)
            score += np.einsum("utkl,l->tk", ph, vals) / ph.shape[0]
        score /= max(len(phi), 1)
        return score if per_occasion else score.mean(axis=0)

    def canonicalize(self, states):
        """Relabel states in increasing order of :meth:`state_scores` (no-op if not relabellable).

        When every component is free per occasion, labels are only identified
        occasion by occasion, and each occasion is ordered separately; the
        returned permutation is then ``(T, k)``.
        """
        if all(isinstance(c, (FreeComponent, FixedComponent)) for c in self.components):
            perms = np.argsort(self.state_scores(states, per_occasion=True), axis=1, kind="stable")
            if not np.all(perms == perms[0]):
                try:
                    new = [c.permute_occasions(s, perms) if isinstance(c, FreeComponent) else c.permute(s, perms[0])
                           for c, s in zip(self.components, states)]
                    return new, perms
                except NotImplementedError as exc:
                    logger.debug("occasion-wise relabelling skipped: %s", exc)
        perm = np.argsort(self.state_scores(states), kind="stable")
        if np.array_equal(perm, np.arange(self.k)):
            return states, perm
        try:
            new = [c.permute(s, perm) for c, s in zip(self.components, states)]
        except NotImplementedError as exc:
            logger.debug("state relabelling skipped: %s", exc)
            return states, np.arange(self.k)
        return new, perm

    # -- expected counts for one component ----------------------------------------------
    def component_counts(self, comp, counts):
        role = comp.role
        if role == "initial":
            return counts.unit_state[:, 0] if comp.per_unit else counts.a1
        if role == "transition":
            return counts.unit_pair if comp.per_unit else counts.atrans
        b = self.measurement.index(comp)
        if comp.per_unit:
            return counts.unit_resp(b)
        return counts.aresp[b]


def compile_model(spec: ModelSpec, data, aggregate: bool = True) -> LatentMarkovModel:
    """Bind ``spec`` to ``data``; ``aggregate`` collapses identical response patterns when allowed."""
    return LatentMarkovModel(spec, data, aggregate=aggregate)
