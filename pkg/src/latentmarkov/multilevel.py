"""Multilevel latent Markov model with a discrete cluster-level random effect.

Subjects are grouped in clusters ``h``. Each cluster carries a latent class
``W_h`` with ``m`` support points (probabilities from a multinomial logit on
cluster covariates ``z_h``). Given ``W_h = w`` every member follows its own
latent Markov chain with global-logit initial and transition probabilities:

    initial:     logit P(U >= v)       = init_shift[w] + init_cut[v] + x' init_slope
    transition:  logit P(U_t >= v | u) = trans_shift[w] + trans_cut[u, v] + x_t' trans_slope

for cut ``v = 1..k-1`` (0-based states), with ``init_shift[0] = trans_shift[0] = 0``.
Cut intercepts must decrease in ``v``; they are stored as a level and the
logs of the successive gaps, so any real coefficient vector is valid.
The measurement model is shared across classes and estimated in closed form
(or by Fisher scoring for link designs).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .blocks import LinkBlock, block_score, fisher_scoring, FisherScoringError
from .data import DataError, PanelDataset, subject_generators
from .decode import DecodedPath, viterbi
from .em import EMError, StartSummary, default_threads
from .model import compile_model
from .params import InitialSpec, MeasurementSpec, ModelSpec, SpecError, TransitionSpec
from .recursions import posteriors

logger = logging.getLogger(__name__)

__all__ = [
    "ClusterStructure",
    "MultilevelSpec",
    "MultilevelParams",
    "MultilevelModel",
    "MultilevelFit",
    "cluster_structure",
    "ordered_cuts",
    "resolve_cluster_mixture",
    "resolve_member_chain",
    "cluster_loglik",
    "fit_multilevel",
    "simulate_multilevel",
    "decode_multilevel",
    "canonical_classes",
    "canonical_states",
    "reverse_states",
]


@dataclass(frozen=True, eq=False)
class ClusterStructure:
    """``labels`` (H,), ``members`` list of subject-index arrays, ``assign`` (n,) cluster index, ``z`` (H, qz)."""

    labels: np.ndarray
    members: list
    assign: np.ndarray
    z: np.ndarray

    @property
    def H(self) -> int:
        return len(self.labels)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])


def cluster_structure(data: PanelDataset, cluster_covariates=()) -> ClusterStructure:
    if data.cluster is None:
        raise DataError("multilevel model needs a cluster column")
    labels, assign = np.unique(np.asarray(data.cluster).astype(str), return_inverse=True)
    assign = assign.reshape(-1)
    members = [np.flatnonzero(assign == h) for h in range(len(labels))]
    qz = len(cluster_covariates)
    z = np.zeros((len(labels), qz))
    if qz:
        zc = data.select_covariates(cluster_covariates)[:, 0, :]
        for h, mem in enumerate(members):
            if np.any(np.abs(zc[mem] - zc[mem[0]]) > 0):
                raise DataError(f"cluster covariate varies within cluster {labels[h]}")
            z[h] = zc[mem[0]]
    return ClusterStructure(labels, members, assign, z)


def ordered_cuts(raw):
    """Decreasing cut intercepts from ``[level, log-gap_1, ...]`` and the Jacobian."""
    raw = np.asarray(raw, dtype=float)
    m = raw.size
    gaps = np.exp(raw[1:])
    cuts = raw[0] - np.concatenate([[0.0], np.cumsum(gaps)])
    jac = np.zeros((m, m))
    jac[:, 0] = 1.0
    for v in range(1, m):
        jac[v, 1:v + 1] = -gaps[:v]
    return cuts, jac


def raw_from_cuts(cuts):
    cuts = np.asarray(cuts, dtype=float)
    d = -np.diff(cuts)
    if np.any(d <= 0):
        raise SpecError("cut intercepts must be strictly decreasing")
    return np.concatenate([cuts[:1], np.log(d)])


@dataclass(eq=False)
class MultilevelSpec:
    """``k`` states, ``m`` cluster classes, shared ``measurement`` model.

    ``covariates`` enter the member chains, ``cluster_covariates`` the class
    probabilities. ``time_varying`` adds one shift of the transition cut
    intercepts per transition occasion after the first.
    """

    k: int
    m: int = 1
    measurement: object = field(default_factory=MeasurementSpec)
    covariates: tuple = ()
    cluster_covariates: tuple = ()
    time_varying: bool = False


@dataclass(eq=False)
class MultilevelParams:
    """Raw coefficient vectors (see :class:`MultilevelModel` for layouts) and measurement states."""

    k: int
    m: int
    T: int
    levels: tuple
    blocks: tuple
    class_coef: np.ndarray
    init_coef: np.ndarray
    trans_coef: np.ndarray
    phi: list
    measurement_coef: dict = field(default_factory=dict)

    def copy(self):
        import copy
        return copy.deepcopy(self)


def resolve_cluster_mixture(gamma, z, m: int):
    """Class probabilities ``rho`` (H, m): ``log rho_w / rho_0 = gamma0[w] + z' gamma1[w]``.

    ``gamma`` is ``[gamma0 (m-1), gamma1 ((m-1) x qz, class-major)]``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    gamma = np.asarray(gamma, dtype=float)
    qz = z.shape[1]
    if m == 1:
        return np.ones((z.shape[0], 1))
    g0 = gamma[:m - 1]
    g1 = gamma[m - 1:].reshape(m - 1, qz)
    lam = np.zeros((z.shape[0], m))
    lam[:, 1:] = g0 + z @ g1.T
    lam -= lam.max(axis=1, keepdims=True)
    e = np.exp(lam)
    return e / e.sum(axis=1, keepdims=True)


def resolve_member_chain(init_coef, trans_coef, w: int, x, *, k: int, m: int, time_varying: bool = False):
    """Initial (k,) and transition (T-1, k, k) probabilities of one member given class ``w``.

    ``x`` is the member's (T, q) covariate matrix; transitions into occasion
    ``t`` use ``x[t]``. Coefficient layouts:

    * ``init_coef = [shift (m-1), level, log-gaps (k-2), slope (q)]``
    * ``trans_coef = [shift (m-1), per origin u: level, log-gaps (k-2), slope (q), time shifts (T-2 if time_varying)]``
    """
    x = np.asarray(x, dtype=float)
    T, q = x.shape
    ini = _chain_design(k, m, x[None], time_varying)
    pi = ini[0].probs(init_coef)[w, 0]
    Pi = ini[1].probs(trans_coef)[w, 0] if T > 1 else np.zeros((0, k, k))
    return pi, Pi


def _cut_transform(k, n_blocks, lead, tail):
    """Transform for ``[lead, blocks of (level, log-gaps), tail]`` to ``[lead, cuts..., tail]``."""
    mcut = k - 1

    def transform(theta):
        theta = np.asarray(theta, dtype=float)
        coef = theta.copy()
        jac = np.eye(theta.size)
        for j in range(n_blocks):
            s = lead + j * mcut
            cuts, J = ordered_cuts(theta[s:s + mcut])
            coef[s:s + mcut] = cuts
            jac[s:s + mcut, s:s + mcut] = J
        return coef, jac

    return transform


def _chain_design(k, m, x, time_varying):
    """Initial and transition blocks for members with covariates ``x`` (N, T, q); rows carry a class axis."""
    N, T, q = x.shape
    mc = k - 1
    # initial: rows (m, N), predictors (k-1)
    P0 = (m - 1) + mc + q
    D0 = np.zeros((m, N, mc, P0))
    for w in range(1, m):
        D0[w, :, :, w - 1] = 1.0
    for v in range(mc):
        D0[:, :, v, (m - 1) + v] = 1.0
    D0[..., (m - 1) + mc:] = x[None, :, 0, None, :]
    ini = LinkBlock(D0, "global", transform=_cut_transform(k, 1, m - 1, q))
    ini.theta0 = np.zeros(P0)
    # transition: rows (m, N, T-1, k)
    Tm1 = T - 1
    ntv = max(Tm1 - 1, 0) if time_varying else 0
    P1 = (m - 1) + k * mc + q + ntv
    D1 = np.zeros((m, N, Tm1, k, mc, P1))
    for w in range(1, m):
        D1[w, ..., w - 1] = 1.0
    for u in range(k):
        for v in range(mc):
            D1[:, :, :, u, v, (m - 1) + u * mc + v] = 1.0
    base = (m - 1) + k * mc
    if Tm1:
        D1[..., base:base + q] = x[None, :, 1:, None, None, :]
    for t in range(1, Tm1 if time_varying else 0):
        D1[:, :, t, :, :, base + q + t - 1] = 1.0
    tra = LinkBlock(D1, "global", transform=_cut_transform(k, k, m - 1, q + ntv))
    tra.theta0 = np.zeros(P1)
    return ini, tra


def _default_chain_coef(k, m, q, T, time_varying):
    mc = k - 1
    gaps = np.log(np.full(max(mc - 1, 0), 1.0))
    init = np.concatenate([np.arange(1, m) * 0.5, [0.5 * (mc - 1)] if mc else [], gaps, np.zeros(q)])
    blocks = []
    for u in range(k):
        lvl = (mc - 1) / 2.0 + (u - (k - 1) / 2.0) * 3.0
        blocks.append(np.concatenate([[lvl], gaps]) if mc else np.zeros(0))
    ntv = max(T - 2, 0) if time_varying else 0
    trans = np.concatenate([np.arange(1, m) * 0.5, *blocks, np.zeros(q), np.zeros(ntv)])
    return init, trans


class MultilevelModel:
    """Compiled multilevel model bound to a clustered dataset."""

    def __init__(self, spec: MultilevelSpec, data: PanelDataset):
        if not isinstance(data, PanelDataset):
            raise DataError("multilevel model needs subject-level data")
        if data.weights is not None:
            raise DataError("subject weights are not supported by the multilevel model")
        if spec.m < 1 or spec.k < 1:
            raise SpecError("k and m must be positive")
        self.spec = spec
        self.k, self.m, self.T = spec.k, spec.m, data.T
        self.levels = data.levels
        self.clusters = cluster_structure(data, spec.cluster_covariates)
        self.x = data.select_covariates(spec.covariates)
        self.q = self.x.shape[2]
        meas = spec.measurement if isinstance(spec.measurement, (list, tuple)) else [spec.measurement]
        if any(getattr(ms, "kind", None) in ("covariate", "bivariate") for ms in meas):
            raise SpecError("multilevel model supports measurement models without covariates")
        inner = ModelSpec(spec.k, measurement=spec.measurement)
        base = compile_model(inner, data, aggregate=False)
        if any(c.per_unit for c in base.measurement):
            raise SpecError("multilevel model supports measurement models without covariates")
        self.base = base
        self.measurement = base.measurement
        self.blocks = base.blocks
        self.codes = base.codes
        self.block_levels = base.block_levels
        if self.k > 1:
            self.init_block, self.trans_block = _chain_design(self.k, self.m, self.x, spec.time_varying)
        else:
            self.init_block = self.trans_block = None
        qz = self.clusters.z.shape[1]
        if self.m > 1:
            D = np.zeros((self.clusters.H, self.m, (self.m - 1) * (1 + qz)))
            for w in range(1, self.m):
                D[:, w, w - 1] = 1.0
                s = (self.m - 1) + (w - 1) * qz
                D[:, w, s:s + qz] = self.clusters.z
            self.class_block = LinkBlock(D, "multinomial")
        else:
            self.class_block = None
        self.n_class = 0 if self.class_block is None else self.class_block.n_theta
        self.n_init = 0 if self.init_block is None else self.init_block.n_theta
        self.n_trans = 0 if self.trans_block is None else self.trans_block.n_theta
        self.n_free = self.n_class + self.n_init + self.n_trans + sum(c.n_free for c in self.measurement)
        self.n_obs = float(data.n)

    @property
    def bic_n(self) -> float:
        return float(self.clusters.H)

    # -- states: [class_coef, init_coef, trans_coef, *measurement states] -------------
    def states_from_params(self, p: MultilevelParams):
        meas = [c.load(p.phi[b], p.measurement_coef.get(c.name)) for b, c in enumerate(self.measurement)]
        return [np.asarray(p.class_coef, float), np.asarray(p.init_coef, float), np.asarray(p.trans_coef, float), *meas]

    def params_from_states(self, states) -> MultilevelParams:
        phi, mcoef = [], {}
        for c, s in zip(self.measurement, states[3:]):
            prob, coef = c.stored(s)
            phi.append(np.array(prob, dtype=float))
            if coef is not None:
                mcoef[c.name] = np.array(coef, dtype=float)
        return MultilevelParams(self.k, self.m, self.T, self.levels, self.blocks,
                                np.array(states[0], float), np.array(states[1], float),
                                np.array(states[2], float), phi, mcoef)

    def chain_probs(self, states):
        """``rho`` (H, m), ``pi`` (m, N, k), ``Pi`` (m, N, T-1, k, k)."""
        N, T, k, m = self.x.shape[0], self.T, self.k, self.m
        rho = np.ones((self.clusters.H, 1)) if self.class_block is None else self.class_block.probs(states[0])
        if k == 1:
            return rho, np.ones((m, N, 1)), np.ones((m, N, T - 1, 1, 1))
        pi = self.init_block.probs(states[1])
        Pi = self.trans_block.probs(states[2]) if T > 1 else np.zeros((m, N, 0, k, k))
        return rho, pi, Pi

    def emission(self, states):
        phi = [c.probs(s)[None] for c, s in zip(self.measurement, states[3:])]
        return self.base.emission(phi)

    def _lattices(self, states):
        rho, pi, Pi = self.chain_probs(states)
        em = self.emission(states)
        lats = [posteriors(pi[w], Pi[w], em) for w in range(self.m)]
        return rho, lats

    def cluster_terms(self, states):
        """``log rho + sum of member log-likelihoods`` (H, m) and the lattices."""
        rho, lats = self._lattices(states)
        H = self.clusters.H
        member = np.stack([lat.log_f for lat in lats], axis=1)  # (N, m)
        terms = np.zeros((H, self.m))
        np.add.at(terms, self.clusters.assign, member)
        with np.errstate(divide="ignore"):
            terms = terms + np.log(rho)
        return terms, lats

    def loglik(self, states_or_params) -> float:
        states = self.states_from_params(states_or_params) if isinstance(states_or_params, MultilevelParams) \
            else states_or_params
        terms, _ = self.cluster_terms(states)
        return float(np.sum(logsumexp(terms, axis=1)))

    def e_step(self, states):
        terms, lats = self.cluster_terms(states)
        logf = logsumexp(terms, axis=1)
        if np.any(~np.isfinite(logf)):
            h = int(np.flatnonzero(~np.isfinite(logf))[0])
            raise EMError(f"cluster {self.clusters.labels[h]} has zero probability under the parameters")
        b = np.exp(terms - logf[:, None])  # (H, m)
        bm = b[self.clusters.assign]  # (N, m)
        init = np.stack([bm[:, w, None] * lats[w].post_state[:, 0] for w in range(self.m)])
        trans = np.stack([bm[:, w, None, None, None] * lats[w].post_pair for w in range(self.m)])
        state = sum(bm[:, w, None, None] * lats[w].post_state for w in range(self.m))
        aresp = []
        for bl, codes in enumerate(self.codes):
            onehot = np.eye(self.block_levels[bl])[codes]
            aresp.append(np.einsum("utk,utl->tkl", state, onehot))
        return dict(b=b, init=init, trans=trans, state=state, aresp=aresp), float(logf.sum())

    def m_step(self, counts, states):
        new = list(states)
        if self.class_block is not None:
            new[0] = fisher_scoring(self.class_block, counts["b"], states[0])[0]
        if self.k > 1:
            new[1] = fisher_scoring(self.init_block, counts["init"], states[1])[0]
            if self.T > 1:
                new[2] = fisher_scoring(self.trans_block, counts["trans"], states[2])[0]
        for j, c in enumerate(self.measurement):
            new[3 + j] = c.m_step(counts["aresp"][j], states[3 + j])
        return new

    def score_states(self, states):
        counts, _ = self.e_step(states)
        parts = []
        if self.class_block is not None:
            parts.append(block_score(self.class_block, states[0], counts["b"]))
        if self.k > 1:
            parts.append(block_score(self.init_block, states[1], counts["init"]))
            parts.append(block_score(self.trans_block, states[2], counts["trans"]) if self.T > 1
                         else np.zeros(self.n_trans))
        for j, c in enumerate(self.measurement):
            parts.append(c.gradient(counts["aresp"][j], states[3 + j]))
        return np.concatenate(parts) if parts else np.zeros(0)

    # -- coordinates ------------------------------------------------------------------
    def coords(self, states):
        parts = [states[0], states[1], states[2]] if self.k > 1 else [states[0]]
        parts += [c.coords(s) for c, s in zip(self.measurement, states[3:])]
        return np.concatenate([np.asarray(p, float) for p in parts])

    def states_from_coords(self, theta, like=None):
        pos = 0
        out = []
        for n in (self.n_class, self.n_init, self.n_trans):
            out.append(np.asarray(theta[pos:pos + n], float))
            pos += n
        for j, c in enumerate(self.measurement):
            out.append(c.from_coords(theta[pos:pos + c.n_free], None if like is None else like[3 + j]))
            pos += c.n_free
        return out

    def coord_labels(self):
        qz, q, k, m = self.clusters.z.shape[1], self.q, self.k, self.m
        labels = [f"class.shift[{w}]" for w in range(1, m)]
        zn = list(self.spec.cluster_covariates)[:qz] + [f"z{c + 1}" for c in range(len(self.spec.cluster_covariates), qz)]
        xn = list(self.spec.covariates)[:q] + [f"x{c + 1}" for c in range(len(self.spec.covariates), q)]
        labels += [f"class.slope[{w},{zn[c]}]" for w in range(1, m) for c in range(qz)]
        if k > 1:
            labels += [f"initial.shift[{w}]" for w in range(1, m)] + ["initial.cut_level"]
            labels += [f"initial.log_gap[{v}]" for v in range(2, k)] + [f"initial.slope[{xn[c]}]" for c in range(q)]
            labels += [f"transition.shift[{w}]" for w in range(1, m)]
            for u in range(k):
                labels += [f"transition.cut_level[{u}]"] + [f"transition.log_gap[{u},{v}]" for v in range(2, k)]
            labels += [f"transition.slope[{xn[c]}]" for c in range(q)]
            ntv = self.n_trans - ((m - 1) + k * (k - 1) + q)
            labels += [f"transition.time_shift[{t + 2}]" for t in range(ntv)]
        for c in self.measurement:
            labels += c.free_labels()
        return labels

    def coord_jacobians(self, states):
        n_chain = self.n_class + self.n_init + self.n_trans
        return [np.eye(n_chain)] + [c.coord_jacobian(s) for c, s in zip(self.measurement, states[3:])]

    def reported_values(self, states):
        return np.concatenate([self.coords(states)[:self.n_class + self.n_init + self.n_trans]]
                              + [c.free_probabilities(s) for c, s in zip(self.measurement, states[3:])])

    # -- starts -------------------------------------------------------------------------
    def deterministic_start(self):
        targets = self.base.deterministic_targets()
        meas = [c.start(t) for c, t in zip(self.measurement, targets[2:])]
        init, trans = _default_chain_coef(self.k, self.m, self.q, self.T, self.spec.time_varying)
        if self.k == 1:
            init, trans = np.zeros(0), np.zeros(0)
        return [np.zeros(self.n_class), init, trans, *meas]

    def random_start(self, rng):
        meas = [c.random(rng) for c in self.measurement]
        return [rng.uniform(-1, 1, self.n_class), rng.uniform(-1, 1, self.n_init),
                rng.uniform(-1, 1, self.n_trans), *meas]

    def flat(self, states):
        return np.concatenate([np.asarray(states[0], float), np.asarray(states[1], float),
                               np.asarray(states[2], float)] + [c.flat(s) for c, s in zip(self.measurement, states[3:])])


@dataclass(eq=False)
class MultilevelFit:
    params: MultilevelParams
    loglik: float
    iterations: int
    converged: bool
    class_posteriors: np.ndarray
    start_summaries: list
    model: MultilevelModel
    trace: list
    states: list

    @property
    def n_free(self) -> int:
        return self.model.n_free


def cluster_loglik(params: MultilevelParams, data: PanelDataset, spec: MultilevelSpec, *, model=None):
    """Log manifest probability of every cluster, (H,)."""
    model = model or MultilevelModel(spec, data)
    terms, _ = model.cluster_terms(model.states_from_params(params))
    return logsumexp(terms, axis=1)


def _reverse_cut_block(raw):
    # reversing the states maps cuts c_1 > ... > c_{k-1} to -c_{k-1} > ... > -c_1
    cuts, _ = ordered_cuts(raw)
    return raw_from_cuts(-cuts[::-1])


def reverse_states(model: MultilevelModel, states):
    """Relabel the latent states in reverse order (the one relabelling global logits allow)."""
    m, k, q = model.m, model.k, model.q
    mc = k - 1
    init = -np.asarray(states[1], dtype=float)
    init[m - 1:m - 1 + mc] = _reverse_cut_block(states[1][m - 1:m - 1 + mc])
    old = np.asarray(states[2], dtype=float)
    trans = -old
    for u in range(k):
        s_new = (m - 1) + u * mc
        s_old = (m - 1) + (k - 1 - u) * mc
        trans[s_new:s_new + mc] = _reverse_cut_block(old[s_old:s_old + mc])
    perm = np.arange(k)[::-1]
    meas = [c.permute(st, perm) for c, st in zip(model.measurement, states[3:])]
    return [np.asarray(states[0], dtype=float), init, trans if old.size else old, *meas]


def canonical_states(model: MultilevelModel, states):
    """Reverse the state labels when the first state has the higher expected response."""
    if model.k == 1:
        return states, False
    base = model.base.deterministic_start()
    score = model.base.state_scores([base[0], base[1], *states[3:]])
    if score[0] <= score[-1]:
        return states, False
    return reverse_states(model, states), True


def canonical_classes(model: MultilevelModel, states):
    """Reorder the cluster classes so the initial-state shifts are non-decreasing.

    The class with the smallest shift becomes the reference. Its shift is
    folded into the cut levels, and class logits are re-referenced to it.
    Returns ``(states, perm)`` where new class ``j`` is old class ``perm[j]``.
    """
    m, k = model.m, model.k
    if m == 1 or k == 1:
        return states, np.arange(m)
    mc = k - 1
    init = np.asarray(states[1], dtype=float).copy()
    shifts = np.concatenate([[0.0], init[:m - 1]])
    perm = np.argsort(shifts, kind="stable")
    if np.all(perm == np.arange(m)):
        return states, perm
    base = shifts[perm[0]]
    init[:m - 1] = (shifts[perm] - base)[1:]
    init[m - 1] += base
    trans = np.asarray(states[2], dtype=float).copy()
    if trans.size:
        tshift = np.concatenate([[0.0], trans[:m - 1]])
        tbase = tshift[perm[0]]
        trans[:m - 1] = (tshift[perm] - tbase)[1:]
        for u in range(k):
            trans[(m - 1) + u * mc] += tbase
    gamma = np.asarray(states[0], dtype=float).copy()
    if gamma.size:
        qz = model.clusters.z.shape[1]
        g0 = np.concatenate([[0.0], gamma[:m - 1]])
        g1 = np.vstack([np.zeros((1, qz)), gamma[m - 1:].reshape(m - 1, qz)])
        g0 = g0[perm] - g0[perm[0]]
        g1 = g1[perm] - g1[perm[0]]
        gamma = np.concatenate([g0[1:], g1[1:].ravel()])
    return [gamma, init, trans, *states[3:]], perm


def _run(model, states, tol, param_tol, max_iter, label):
    counts, ll = model.e_step(states)
    trace = [ll]
    flat = model.flat(states)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = model.m_step(counts, states)
        new_counts, new_ll = model.e_step(new)
        new_flat = model.flat(new)
        dl = abs(new_ll - ll) / max(1.0, abs(ll))
        dp = float(np.max(np.abs(new_flat - flat))) if flat.size else 0.0
        states, counts, ll, flat = new, new_counts, new_ll, new_flat
        trace.append(ll)
        if dl < tol and dp < param_tol:
            converged = True
            break
    return states, counts, ll, it, converged, trace


def fit_multilevel(data: PanelDataset, spec: MultilevelSpec, *, starts: int = 9, seed: int = 0,
                   tol: float = 1e-8, param_tol: float = 1e-6, max_iter: int = 5000,
                   init: MultilevelParams | None = None, threads: int | None = None) -> MultilevelFit:
    """EM for the multilevel model, best of a deterministic (or ``init``) start and ``starts`` random ones."""
    model = MultilevelModel(spec, data)
    jobs = [("init", lambda: model.states_from_params(init))] if init is not None else \
        [("deterministic", model.deterministic_start)]
    for j, ss in enumerate(np.random.SeedSequence(seed).spawn(starts)):
        jobs.append((f"random-{j + 1}", lambda ss=ss: model.random_start(np.random.default_rng(ss))))

    def run(job):
        label, make = job
        try:
            return label, _run(model, make(), tol, param_tol, max_iter, label), None
        except (FisherScoringError, EMError, np.linalg.LinAlgError) as exc:
            return label, None, str(exc)

    threads = default_threads() if threads is None else max(1, int(threads))
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    ok = [r for r in results if r[1] is not None]
    if not ok:
        raise EMError("every start failed: " + "; ".join(f"{lab}: {err}" for lab, _, err in results))
    conv = [r for r in ok if r[1][4]] or ok
    best = conv[0]
    for r in conv[1:]:
        if r[1][2] > best[1][2]:
            best = r
    states, counts, ll, it, converged, trace = best[1]
    states, _ = canonical_states(model, states)
    states, perm = canonical_classes(model, states)
    summaries = [StartSummary(lab, float(res[2]) if res else -np.inf, res[3] if res else 0,
                              bool(res[4]) if res else False, err) for lab, res, err in results]
    return MultilevelFit(model.params_from_states(states), ll, it, converged, counts["b"][:, perm], summaries,
                         model, trace, states)


def simulate_multilevel(params: MultilevelParams, spec: MultilevelSpec, clusters, seed: int, *,
                        covariates=None, covariate_names=(), return_latent: bool = False):
    """Draw a clustered panel; ``clusters`` gives the cluster label of each subject.

    Returns the dataset, plus ``(classes (H,), paths (n, T))`` when ``return_latent``.
    """
    clusters = np.asarray(clusters)
    n, T, k, m = len(clusters), params.T, params.k, params.m
    names = tuple(covariate_names) or tuple(spec.covariates) + tuple(
        c for c in spec.cluster_covariates if c not in spec.covariates)
    x = np.zeros((n, T, len(names))) if covariates is None else np.asarray(covariates, float)
    y0 = np.zeros((n, T, len(params.levels)), dtype=np.int64)
    data0 = PanelDataset(y0, params.levels, covariates=x if names else None, covariate_names=names,
                         cluster=clusters)
    model = MultilevelModel(spec, data0)
    states = model.states_from_params(params)
    rho, pi, Pi = model.chain_probs(states)
    H = model.clusters.H
    cgens = subject_generators(seed + 1, H)
    classes = np.array([int(np.searchsorted(np.cumsum(rho[h]), g.random(), side="right")) for h, g in enumerate(cgens)])
    classes = np.minimum(classes, m - 1)
    cls = classes[model.clusters.assign]
    from .data import _inverse_cdf, _uniforms
    u = _uniforms(seed, n, T, 1 + len(params.blocks))
    paths = np.zeros((n, T), dtype=np.int64)
    y = np.zeros_like(y0)
    idx = np.arange(n)
    phi = [c.probs(s) for c, s in zip(model.measurement, states[3:])]
    for t in range(T):
        probs = pi[cls, idx] if t == 0 else Pi[cls, idx, t - 1, paths[:, t - 1]]
        paths[:, t] = _inverse_cdf(probs, u[:, t, 0])
        for b, vars_ in enumerate(params.blocks):
            code = _inverse_cdf(phi[b][t, paths[:, t]], u[:, t, 1 + b])
            for v, c in zip(vars_, np.unravel_index(code, tuple(params.levels[v] for v in vars_))):
                y[:, t, v] = c
    data = PanelDataset(y, params.levels, covariates=x if names else None, covariate_names=names, cluster=clusters)
    return (data, classes, paths) if return_latent else data


def decode_multilevel(model: MultilevelModel, states_or_params):
    """Joint MAP over the cluster class and every member path.

    Returns ``(classes (H,), DecodedPath for all subjects)``.
    """
    states = model.states_from_params(states_or_params) if isinstance(states_or_params, MultilevelParams) \
        else states_or_params
    rho, pi, Pi = model.chain_probs(states)
    em = model.emission(states)
    res = [viterbi(pi[w], Pi[w], em) for w in range(model.m)]
    H = model.clusters.H
    tot = np.zeros((H, model.m))
    for w in range(model.m):
        np.add.at(tot[:, w], model.clusters.assign, res[w].log_joint)
    with np.errstate(divide="ignore"):
        tot = tot + np.log(rho)
    classes = np.argmax(tot, axis=1)
    cls = classes[model.clusters.assign]
    n = em.shape[0]
    path = np.stack([res[cls[i]].path[i] for i in range(n)]) if n else np.zeros((0, model.T), np.int64)
    lj = np.array([res[cls[i]].log_joint[i] for i in range(n)])
    return classes, DecodedPath(path, lj)
