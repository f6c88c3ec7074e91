"""Model specifications and parameter containers.

A :class:`ModelSpec` says *which* constraints apply; a :class:`ModelParams`
holds the values. Unconstrained pieces are stored as probabilities,
structured pieces as coefficient vectors (``ModelParams.coef``) from which
the probabilities are derived.

States are labelled ``0..k-1`` and categories ``0..l-1`` throughout.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace
from typing import Any, Sequence

import numpy as np

__all__ = [
    "SpecError",
    "MeasurementSpec",
    "InitialSpec",
    "TransitionSpec",
    "ModelSpec",
    "ModelParams",
    "Dims",
    "transition_mask",
    "validate_params",
    "count_free_parameters",
    "spec_to_dict",
    "spec_from_dict",
    "params_to_dict",
    "params_from_dict",
]

MEASUREMENT_KINDS = ("free", "time_invariant", "link", "rasch", "covariate", "bivariate")
INITIAL_KINDS = ("free", "uniform", "logit", "covariate")
TRANSITION_KINDS = ("free", "homogeneous", "partial", "linear", "logit", "covariate")
STRUCTURES = (None, "tridiagonal", "upper_triangular", "equal_off_diagonal", "symmetric", "identity")
SIMPLEX_TOL = 1e-8


class SpecError(ValueError):
    """Invalid or unsupported model specification."""


@dataclass(eq=False)
class MeasurementSpec:
    """Conditional distribution of the responses given the latent state.

    kind
        ``free`` (time-varying probabilities), ``time_invariant``, ``link``
        (linear predictor through ``link`` with ``design``), ``rasch``,
        ``covariate`` (link model with subject covariates), ``bivariate``
        (joint marginal model for a binary and a three-category variable).
    design
        For ``link``: ``"saturated"``, ``"rasch"``, ``"state_cut"`` or an
        explicit array of shape ``(T, k, n_eta, p)``. For ``covariate``:
        ``"state_intercepts"``.
    lags
        Add one-hot lagged responses of the same block to covariate designs.
    """

    kind: str = "free"
    variables: tuple[int, ...] | None = None
    link: str = "multinomial"
    design: Any = None
    lags: bool = False


@dataclass(eq=False)
class InitialSpec:
    kind: str = "free"
    link: str = "multinomial"


@dataclass(eq=False)
class TransitionSpec:
    """Distribution of the transitions.

    ``structure`` names a zero pattern (``tridiagonal``, ``upper_triangular``)
    for ``free``/``homogeneous``/``logit`` kinds, or a linear design
    (``equal_off_diagonal``, ``symmetric``, ``upper_triangular``,
    ``tridiagonal``, ``identity``) for the ``linear`` kind. ``design`` may be
    an explicit array; ``time_varying`` gives structured designs one
    coefficient set per occasion instead of a single homogeneous one.
    """

    kind: str = "free"
    t_bar: int | None = None
    structure: str | None = None
    link: str = "multinomial"
    design: Any = None
    mask: Any = None
    time_varying: bool = False


@dataclass(eq=False)
class ModelSpec:
    k: int
    measurement: Any = field(default_factory=MeasurementSpec)
    initial: InitialSpec = field(default_factory=InitialSpec)
    transition: TransitionSpec = field(default_factory=TransitionSpec)
    covariates: tuple[str, ...] = ()

    def measurement_blocks(self, r: int) -> list[MeasurementSpec]:
        """One spec per measurement block, with ``variables`` filled in."""
        ms = self.measurement
        if isinstance(ms, MeasurementSpec):
            if ms.kind == "bivariate":
                return [replace(ms, variables=ms.variables or (0, 1))]
            return [replace(ms, variables=(j,)) for j in range(r)]
        out = []
        for j, m in enumerate(ms):
            out.append(m if m.variables is not None else replace(m, variables=(j,)))
        seen = sorted(v for m in out for v in m.variables)
        if seen != list(range(r)):
            raise SpecError(f"measurement blocks cover variables {seen}, expected 0..{r - 1}")
        return out

    @property
    def covariate_placement(self) -> str:
        """``none``, ``measurement`` or ``latent``; raises if both are requested."""
        ms = [self.measurement] if isinstance(self.measurement, MeasurementSpec) else list(self.measurement)
        meas = any(m.kind == "covariate" or (m.kind == "bivariate" and self.covariates) for m in ms)
        lat = self.initial.kind == "covariate" or self.transition.kind == "covariate"
        if meas and lat:
            raise SpecError(
                "covariates may enter either the measurement model or the latent model, not both "
                "(adopt only one scheme)"
            )
        if meas:
            return "measurement"
        if lat:
            return "latent"
        return "none"


@dataclass
class Dims:
    k: int
    T: int
    levels: tuple[int, ...]
    n_covariates: int = 0


@dataclass(eq=False)
class ModelParams:
    """Parameter values of a latent Markov model.

    ``pi`` is ``(k,)``, ``Pi`` is ``(T-1, k, k)`` with rows indexing the
    origin state, ``phi[b]`` is ``(T, k, L_b)`` for measurement block ``b``
    whose joint categories are the row-major cells of its variables.
    Entries are ``None`` when they depend on covariates.
    """

    k: int
    T: int
    levels: tuple[int, ...]
    blocks: tuple[tuple[int, ...], ...]
    pi: np.ndarray | None
    Pi: np.ndarray | None
    phi: list
    coef: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def flat(self) -> np.ndarray:
        """All stored values as one vector (convergence checks)."""
        parts = []
        for name in sorted(self.coef):
            parts.append(np.ravel(self.coef[name]))
        for a in (self.pi, self.Pi, *self.phi):
            if a is not None:
                parts.append(np.ravel(a))
        return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def transition_mask(structure: str | None, k: int) -> np.ndarray:
    """Boolean ``k x k`` pattern of allowed transitions."""
    if structure in (None, "equal_off_diagonal", "symmetric"):
        return np.ones((k, k), dtype=bool)
    if structure == "tridiagonal":
        i = np.arange(k)
        return np.abs(i[:, None] - i[None, :]) <= 1
    if structure == "upper_triangular":
        return np.triu(np.ones((k, k), dtype=bool))
    if structure == "identity":
        return np.eye(k, dtype=bool)
    raise SpecError(f"unknown transition structure {structure!r}")


def spec_mask(spec: TransitionSpec, k: int) -> np.ndarray:
    if spec.mask is not None:
        mask = np.asarray(spec.mask, dtype=bool)
        if mask.shape != (k, k):
            raise SpecError(f"transition mask must be {k} x {k}")
        return mask
    if spec.kind == "linear":
        return np.ones((k, k), dtype=bool) if spec.design is not None else transition_mask(spec.structure, k)
    return transition_mask(spec.structure, k)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _simplex_violations(arr, what: str, axis_names: Sequence[str], tol=SIMPLEX_TOL) -> list[str]:
    out = []
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        return [f"{what} contain non-finite values"]
    if np.any(arr < -tol):
        idx = tuple(int(i) for i in np.argwhere(arr < -tol)[0])
        out.append(f"{what} negative at {idx}")
    sums = arr.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > tol)
    for b in bad[:3]:
        loc = ", ".join(f"{a}={int(i)}" for a, i in zip(axis_names, b))
        s = float(sums[tuple(b)])
        out.append(f"{what} sum {s:.6g} != 1" + (f" ({loc})" if loc else ""))
    return out


def validate_params(params: ModelParams, spec: ModelSpec | None = None) -> list[str]:
    """List every violated invariant; an empty list means the parameters are valid."""
    report: list[str] = []
    k, T = params.k, params.T
    if params.pi is not None:
        pi = np.asarray(params.pi, dtype=float)
        if pi.shape != (k,):
            report.append(f"initial probabilities have shape {pi.shape}, expected ({k},)")
        else:
            report += _simplex_violations(pi, "initial probabilities", ())
    if params.Pi is not None:
        Pi = np.asarray(params.Pi, dtype=float)
        if Pi.shape != (max(T - 1, 0), k, k):
            report.append(f"transition matrices have shape {Pi.shape}, expected {(max(T - 1, 0), k, k)}")
        else:
            report += _simplex_violations(Pi, "transition row", ("t", "u"))
    if len(params.phi) != len(params.blocks):
        report.append("one response-probability array per measurement block required")
    for b, (ph, vars_) in enumerate(zip(params.phi, params.blocks)):
        if ph is None:
            continue
        L = int(np.prod([params.levels[v] for v in vars_]))
        ph = np.asarray(ph, dtype=float)
        if ph.shape != (T, k, L):
            report.append(f"response probabilities of block {b} have shape {ph.shape}, expected {(T, k, L)}")
            continue
        report += _simplex_violations(ph, f"response probabilities of block {b}", ("t", "u"))
    if spec is not None:
        report += validate_spec(spec, Dims(k, T, params.levels))
        if params.Pi is not None and not report:
            mask = spec_mask(spec.transition, k)
            if np.any(np.asarray(params.Pi)[:, ~mask] > SIMPLEX_TOL):
                report.append("transition probability nonzero where the structure fixes it to 0")
    return report


def validate_spec(spec: ModelSpec, dims: Dims) -> list[str]:
    report: list[str] = []
    k, T = spec.k, dims.T
    if k < 1:
        report.append("k must be at least 1")
        return report
    try:
        spec.covariate_placement
    except SpecError as exc:
        report.append(str(exc))
    try:
        blocks = spec.measurement_blocks(len(dims.levels))
    except SpecError as exc:
        report.append(str(exc))
        blocks = []
    for m in blocks:
        if m.kind not in MEASUREMENT_KINDS:
            report.append(f"unknown measurement kind {m.kind!r}")
        if m.kind == "rasch" and any(dims.levels[v] != 2 for v in m.variables) and m.link == "multinomial":
            report.append("Rasch measurement with more than two categories needs a global or continuation link")
        if m.kind == "bivariate":
            if len(m.variables) != 2 or tuple(dims.levels[v] for v in m.variables) != (2, 3):
                report.append("bivariate marginal model needs a binary and a three-category variable")
    ini, tr = spec.initial, spec.transition
    if ini.kind not in INITIAL_KINDS:
        report.append(f"unknown initial kind {ini.kind!r}")
    if tr.kind not in TRANSITION_KINDS:
        report.append(f"unknown transition kind {tr.kind!r}")
    if tr.structure not in STRUCTURES:
        report.append(f"unknown transition structure {tr.structure!r}")
    if tr.kind == "partial":
        if tr.t_bar is None or not 2 <= tr.t_bar <= T:
            report.append(f"partial homogeneity needs t_bar in [2, {T}], got {tr.t_bar}")
    try:
        mask = spec_mask(tr, k)
    except SpecError as exc:
        report.append(str(exc))
    else:
        dead = np.flatnonzero(~mask.any(axis=1))
        for u in dead:
            report.append(f"unreachable row: transition row {int(u)} has no allowed entry")
    if tr.kind in ("free", "homogeneous", "partial") and tr.structure in ("equal_off_diagonal", "symmetric"):
        report.append(f"structure {tr.structure!r} needs the linear transition kind")
    return report


def count_free_parameters(spec: ModelSpec, dims: Dims) -> int:
    """Number of non-redundant parameters ``g`` of ``spec`` for dimensions ``dims``."""
    from .model import compile_model
    from .data import PanelDataset

    problems = validate_spec(spec, dims)
    if problems:
        raise SpecError("; ".join(problems))
    n_cov = max(dims.n_covariates, len(spec.covariates))
    names = tuple(spec.covariates) or tuple(f"x{c + 1}" for c in range(n_cov))
    y = np.zeros((1, dims.T, len(dims.levels)), dtype=np.int64)
    data = PanelDataset(
        y, dims.levels,
        covariates=np.zeros((1, dims.T, len(names))) if names else None,
        covariate_names=names,
    )
    if names and not spec.covariates:
        spec = replace(spec, covariates=names)
    return compile_model(spec, data).n_free


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    return v


def spec_to_dict(spec: ModelSpec) -> dict:
    def sub(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}

    ms = spec.measurement
    meas = sub(ms) if isinstance(ms, MeasurementSpec) else [sub(m) for m in ms]
    return {
        "k": spec.k,
        "measurement": meas,
        "initial": sub(spec.initial),
        "transition": sub(spec.transition),
        "covariates": list(spec.covariates),
    }


def _build(cls, d):
    if d is None:
        return cls()
    if isinstance(d, str):
        return cls(kind=d)
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise SpecError(f"unknown {cls.__name__} field(s): {', '.join(sorted(extra))}")
    kw = dict(d)
    if "variables" in kw and kw["variables"] is not None:
        kw["variables"] = tuple(kw["variables"])
    for key in ("design", "mask"):
        if isinstance(kw.get(key), list):
            kw[key] = np.asarray(kw[key])
    return cls(**kw)


def spec_from_dict(d: dict) -> ModelSpec:
    if "k" not in d:
        raise SpecError("model spec needs k")
    extra = set(d) - {"k", "measurement", "initial", "transition", "covariates"}
    if extra:
        raise SpecError(f"unknown model spec field(s): {', '.join(sorted(extra))}")
    meas = d.get("measurement")
    if isinstance(meas, list):
        meas = tuple(_build(MeasurementSpec, m) for m in meas)
    else:
        meas = _build(MeasurementSpec, meas)
    return ModelSpec(
        k=int(d["k"]),
        measurement=meas,
        initial=_build(InitialSpec, d.get("initial")),
        transition=_build(TransitionSpec, d.get("transition")),
        covariates=tuple(d.get("covariates") or ()),
    )


def params_to_dict(params: ModelParams) -> dict:
    return {
        "k": params.k,
        "T": params.T,
        "levels": list(params.levels),
        "blocks": [list(b) for b in params.blocks],
        "pi": _jsonable(params.pi),
        "Pi": _jsonable(params.Pi),
        "phi": [_jsonable(p) for p in params.phi],
        "coef": {name: _jsonable(v) for name, v in sorted(params.coef.items())},
    }


def params_from_dict(d: dict) -> ModelParams:
    def arr(v):
        return None if v is None else np.asarray(v, dtype=float)

    T, k = int(d["T"]), int(d["k"])
    Pi = arr(d["Pi"])
    if Pi is not None and Pi.size == 0:
        Pi = np.zeros((max(T - 1, 0), k, k))
    return ModelParams(
        k=k,
        T=T,
        levels=tuple(d["levels"]),
        blocks=tuple(tuple(b) for b in d["blocks"]),
        pi=arr(d["pi"]),
        Pi=Pi,
        phi=[arr(p) for p in d["phi"]],
        coef={name: np.asarray(v, dtype=float) for name, v in d.get("coef", {}).items()},
    )
