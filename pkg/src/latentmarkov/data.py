"""Longitudinal categorical panels: loading, aggregation and simulation."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "DataError",
    "PanelDataset",
    "PatternTable",
    "load_panel",
    "write_panel",
    "aggregate_patterns",
    "simulate_panel",
    "subject_generators",
]


class DataError(ValueError):
    """Invalid or unsupported panel data."""


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced panel of ``n`` subjects, ``T`` occasions and ``r`` categorical responses.

    ``responses[i, t, j]`` is the 0-based category of variable ``j`` for
    subject ``i`` at occasion ``t``. ``labels[j]`` keeps the source label of
    each category code.
    """

    responses: np.ndarray
    levels: tuple[int, ...]
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    cluster: np.ndarray | None = None
    weights: np.ndarray | None = None
    ids: tuple = ()
    response_names: tuple[str, ...] = ()
    labels: tuple[tuple, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.responses)
        if y.ndim != 3:
            raise DataError("responses must be a subject x occasion x variable array")
        if not np.issubdtype(y.dtype, np.integer):
            raise DataError("responses must be integer category codes")
        n, T, r = y.shape
        if n < 1 or T < 1 or r < 1:
            raise DataError("need at least one subject, occasion and response variable")
        levels = tuple(int(v) for v in self.levels)
        if len(levels) != r:
            raise DataError(f"{len(levels)} level counts for {r} response variables")
        for j, lj in enumerate(levels):
            if lj < 2:
                raise DataError(f"response variable {j} has {lj} categories; at least 2 required")
            col = y[:, :, j]
            if col.min() < 0 or col.max() >= lj:
                raise DataError(f"response variable {j} has codes outside 0..{lj - 1}")
        object.__setattr__(self, "responses", y.astype(np.int64, copy=False))
        object.__setattr__(self, "levels", levels)
        if self.covariates is not None:
            x = np.asarray(self.covariates, dtype=float)
            if x.ndim != 3 or x.shape[:2] != (n, T):
                raise DataError("covariates must be a subject x occasion x column array")
            names = tuple(self.covariate_names) or tuple(f"x{c + 1}" for c in range(x.shape[2]))
            if len(names) != x.shape[2]:
                raise DataError("covariate_names does not match covariate columns")
            object.__setattr__(self, "covariates", x)
            object.__setattr__(self, "covariate_names", names)
        if self.cluster is not None:
            c = np.asarray(self.cluster)
            if c.shape != (n,):
                raise DataError("cluster must hold one label per subject")
            object.__setattr__(self, "cluster", c)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (n,) or np.any(w <= 0):
                raise DataError("weights must be positive, one per subject")
            object.__setattr__(self, "weights", w)
        if not self.ids:
            object.__setattr__(self, "ids", tuple(range(1, n + 1)))
        if not self.response_names:
            object.__setattr__(self, "response_names", tuple(f"y{j + 1}" for j in range(r)))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(tuple(range(lj)) for lj in levels))

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def T(self) -> int:
        return self.responses.shape[1]

    @property
    def r(self) -> int:
        return self.responses.shape[2]

    @property
    def subject_weights(self) -> np.ndarray:
        return np.ones(self.n) if self.weights is None else self.weights

    def covariate(self, name: str) -> np.ndarray:
        try:
            c = self.covariate_names.index(name)
        except ValueError:
            raise DataError(f"unknown covariate column {name!r}") from None
        return self.covariates[:, :, c]

    def select_covariates(self, names: Iterable[str]) -> np.ndarray:
        names = list(names)
        if not names:
            return np.zeros((self.n, self.T, 0))
        if self.covariates is None:
            raise DataError("dataset has no covariate columns")
        return np.stack([self.covariate(nm) for nm in names], axis=-1)

    def subset(self, index) -> "PanelDataset":
        index = np.asarray(index)
        return PanelDataset(
            responses=self.responses[index],
            levels=self.levels,
            covariates=None if self.covariates is None else self.covariates[index],
            covariate_names=self.covariate_names,
            cluster=None if self.cluster is None else self.cluster[index],
            weights=None if self.weights is None else self.weights[index],
            ids=tuple(np.asarray(self.ids, dtype=object)[index]),
            response_names=self.response_names,
            labels=self.labels,
        )

    def equals(self, other: "PanelDataset") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(np.asarray(a), np.asarray(b))

        return (
            self.levels == other.levels
            and np.array_equal(self.responses, other.responses)
            and same(self.covariates, other.covariates)
            and self.covariate_names == other.covariate_names
            and same(self.cluster, other.cluster)
            and same(self.weights, other.weights)
            and tuple(map(str, self.ids)) == tuple(map(str, other.ids))
            and self.response_names == other.response_names
            and tuple(tuple(map(str, lab)) for lab in self.labels)
            == tuple(tuple(map(str, lab)) for lab in other.labels)
        )


@dataclass(frozen=True, eq=False)
class PatternTable:
    """Distinct response configurations with their (weighted) frequencies."""

    patterns: np.ndarray  # (P, T, r)
    counts: np.ndarray  # (P,)
    levels: tuple[int, ...]
    index: np.ndarray | None = field(default=None)  # subject -> pattern

    @property
    def n(self) -> float:
        return float(self.counts.sum())

    @property
    def T(self) -> int:
        return self.patterns.shape[1]

    @property
    def r(self) -> int:
        return self.patterns.shape[2]

    def as_dict(self) -> dict[tuple, float]:
        return {
            tuple(map(tuple, p.tolist())) if p.shape[1] > 1 else tuple(p[:, 0].tolist()): c
            for p, c in zip(self.patterns, self.counts.tolist())
        }


def aggregate_patterns(data: PanelDataset) -> PatternTable:
    """Collapse subjects sharing a response configuration.

    Only valid when the manifest distribution is the same for every subject,
    i.e. without covariates or cluster structure.
    """
    if data.covariates is not None:
        raise DataError(
            "dataset carries covariates; manifest probabilities are subject specific, "
            "use the per-subject likelihood instead of pattern aggregation"
        )
    if data.cluster is not None:
        raise DataError("dataset carries clusters; aggregate within the multilevel model instead")
    flat = data.responses.reshape(data.n, -1)
    uniq, index = np.unique(flat, axis=0, return_inverse=True)
    index = index.reshape(-1)
    counts = np.bincount(index, weights=data.subject_weights, minlength=len(uniq))
    if data.weights is None:
        counts = counts.astype(np.int64)
    return PatternTable(uniq.reshape(-1, data.T, data.r), counts, data.levels, index)


# ---------------------------------------------------------------------------
# delimited text I/O
# ---------------------------------------------------------------------------

_ROLES = ("id", "time", "responses", "covariates", "cluster", "weight", "delimiter", "categories")


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            return fh.read()
    return source.read()


def _as_int(value: str, column: str, row: int) -> int:
    try:
        f = float(value)
    except ValueError:
        raise DataError(f"non-integer response {value!r} in column {column!r} (row {row})") from None
    if not f.is_integer():
        raise DataError(f"non-integer response {value!r} in column {column!r} (row {row})")
    return int(f)


def load_panel(source, schema: Mapping | None = None) -> PanelDataset:
    """Read a long-format panel (one row per subject and occasion).

    Parameters
    ----------
    source : path or text stream
        Delimited text with a header row.
    schema : mapping, optional
        Column roles: ``id`` (default ``"id"``), ``time`` (default ``"time"``),
        ``responses`` (default: every ``y<j>`` column), ``covariates``,
        ``cluster``, ``weight`` and ``delimiter`` (sniffed from the header when
        absent). ``categories`` may map a response column to its full list of
        category codes, for codes that never occur in the file.
    """
    schema = dict(schema or {})
    unknown = set(schema) - set(_ROLES)
    if unknown:
        raise DataError(f"unknown column role(s): {', '.join(sorted(unknown))}")
    text = _open_text(source)
    header_line = text.splitlines()[0] if text else ""
    delimiter = schema.get("delimiter")
    if delimiter is None:
        counts = {d: header_line.count(d) for d in (",", "\t", ";")}
        delimiter = max(counts, key=counts.get) if any(counts.values()) else ","
    reader = csv.DictReader(io.StringIO(text), delimiter=delimiter)
    header = reader.fieldnames or []
    id_col = schema.get("id", "id")
    time_col = schema.get("time", "time")
    resp_cols = list(schema.get("responses") or [c for c in header if c[:1] == "y" and c[1:].isdigit()])
    cov_cols = list(schema.get("covariates") or [])
    cluster_col = schema.get("cluster")
    weight_col = schema.get("weight")
    needed = [id_col, time_col, *resp_cols, *cov_cols] + [c for c in (cluster_col, weight_col) if c]
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"column(s) not found in header: {', '.join(missing)}")
    if not resp_cols:
        raise DataError("no response columns")

    rows: dict[str, dict[int, dict]] = {}
    order: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        sid = row[id_col]
        t = _as_int(row[time_col], time_col, lineno)
        if sid not in rows:
            rows[sid] = {}
            order.append(sid)
        if t in rows[sid]:
            raise DataError(f"subject {sid} has occasion {t} twice")
        rows[sid][t] = row
    if not order:
        raise DataError("no data rows")
    T = max(max(r) for r in rows.values())
    for sid in order:
        if set(rows[sid]) != set(range(1, T + 1)):
            gap = sorted(set(range(1, T + 1)) - set(rows[sid]))
            raise DataError(f"unbalanced panel: subject {sid} lacks occasion(s) {gap}")

    n, r = len(order), len(resp_cols)
    raw = np.empty((n, T, r), dtype=np.int64)
    for i, sid in enumerate(order):
        for t in range(T):
            row = rows[sid][t + 1]
            for j, col in enumerate(resp_cols):
                raw[i, t, j] = _as_int(row[col], col, i)
    responses = np.empty_like(raw)
    labels, levels = [], []
    cats = schema.get("categories") or {}
    for j, col in enumerate(resp_cols):
        codes = sorted(int(c) for c in cats[col]) if col in cats else sorted(np.unique(raw[:, :, j]).tolist())
        if len(codes) < 2:
            raise DataError(f"response column {col!r} has {len(codes)} category; at least 2 required")
        lookup = {c: q for q, c in enumerate(codes)}
        try:
            responses[:, :, j] = np.vectorize(lookup.__getitem__, otypes=[np.int64])(raw[:, :, j])
        except KeyError as exc:
            raise DataError(f"code {exc.args[0]} of column {col!r} not among declared categories") from None
        labels.append(tuple(codes))
        levels.append(len(codes))

    covariates = None
    if cov_cols:
        covariates = np.empty((n, T, len(cov_cols)))
        for i, sid in enumerate(order):
            for t in range(T):
                for c, col in enumerate(cov_cols):
                    try:
                        covariates[i, t, c] = float(rows[sid][t + 1][col])
                    except ValueError:
                        raise DataError(f"non-numeric covariate in column {col!r}, subject {sid}") from None
    cluster = None
    if cluster_col:
        cluster = np.array([rows[sid][1][cluster_col] for sid in order], dtype=object)
        for i, sid in enumerate(order):
            if any(rows[sid][t][cluster_col] != cluster[i] for t in rows[sid]):
                raise DataError(f"subject {sid} changes cluster across occasions")
        cluster = _maybe_numeric(cluster)
    weights = None
    if weight_col:
        weights = np.array([float(rows[sid][1][weight_col]) for sid in order])

    return PanelDataset(
        responses=responses,
        levels=tuple(levels),
        covariates=covariates,
        covariate_names=tuple(cov_cols),
        cluster=cluster,
        weights=weights,
        ids=tuple(_maybe_numeric(np.array(order, dtype=object)).tolist()),
        response_names=tuple(resp_cols),
        labels=tuple(labels),
    )


def _maybe_numeric(values: np.ndarray) -> np.ndarray:
    try:
        as_int = np.array([int(v) for v in values])
    except (TypeError, ValueError):
        return np.array([str(v) for v in values], dtype=object)
    if all(str(a) == str(v) for a, v in zip(as_int, values)):
        return as_int
    return np.array([str(v) for v in values], dtype=object)


def write_panel(data: PanelDataset, dest=None, delimiter: str = ",") -> str | None:
    """Write ``data`` in the long format read by :func:`load_panel`.

    Returns the text when ``dest`` is None.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    header = ["id", "time", *data.response_names, *data.covariate_names]
    if data.cluster is not None:
        header.append("cluster")
    if data.weights is not None:
        header.append("weight")
    writer.writerow(header)
    for i in range(data.n):
        for t in range(data.T):
            row = [data.ids[i], t + 1]
            row += [data.labels[j][data.responses[i, t, j]] for j in range(data.r)]
            if data.covariates is not None:
                row += [repr(float(v)) for v in data.covariates[i, t]]
            if data.cluster is not None:
                row.append(data.cluster[i])
            if data.weights is not None:
                row.append(repr(float(data.weights[i])))
            writer.writerow(row)
    text = buf.getvalue()
    if dest is None:
        return text
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    else:
        dest.write(text)
    return None


def schema_for(data: PanelDataset) -> dict:
    """Schema that reloads a file produced by :func:`write_panel`."""
    schema: dict = {"responses": list(data.response_names)}
    if data.covariate_names:
        schema["covariates"] = list(data.covariate_names)
    if data.cluster is not None:
        schema["cluster"] = "cluster"
    if data.weights is not None:
        schema["weight"] = "weight"
    schema["categories"] = {c: list(lab) for c, lab in zip(data.response_names, data.labels)}
    return schema


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def subject_generators(seed: int, n: int) -> list[np.random.Generator]:
    """Independent counter-based (Philox) streams, one per subject."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _uniforms(seed: int, n: int, T: int, width: int) -> np.ndarray:
    gens = subject_generators(seed, n)
    return np.stack([g.random((T, width)) for g in gens]) if n else np.empty((0, T, width))


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draw; ``probs`` (..., K), ``u`` (...)."""
    cdf = np.cumsum(probs, axis=-1)
    draw = (u[..., None] >= cdf[..., :-1]).sum(axis=-1)
    return draw.astype(np.int64)


def simulate_panel(params, n: int, seed: int, *, spec=None, covariates=None,
                   covariate_names=(), return_paths: bool = False):
    """Draw ``n`` subjects from a latent Markov model.

    Each subject gets its own Philox stream derived from ``seed``, so the
    draw for subject ``i`` does not depend on ``n`` or on the other subjects.
    The chain is sampled from the initial and transition probabilities and the
    responses from the conditional response probabilities, all by inverse CDF.

    ``params`` is a :class:`~latentmarkov.params.ModelParams`. Models whose
    probabilities depend on covariates need ``spec`` and a ``covariates``
    array of shape ``(n, T, p)``; lagged-response designs are handled by
    simulating occasion by occasion.

    Returns the dataset, and the ``(n, T)`` latent paths when ``return_paths``.
    """
    from .params import ModelParams, validate_params

    if not isinstance(params, ModelParams):
        raise DataError("params must be a ModelParams instance")
    if n < 1:
        raise DataError("n must be positive")
    report = validate_params(params, spec)
    if report:
        raise DataError("invalid parameters: " + "; ".join(report))
    T, k = params.T, params.k
    blocks = params.blocks
    r = len(params.levels)
    u = _uniforms(seed, n, T, 1 + len(blocks))
    paths = np.empty((n, T), dtype=np.int64)
    y = np.zeros((n, T, r), dtype=np.int64)

    needs_model = params.pi is None or params.Pi is None or any(p is None for p in params.phi)
    # a spec with covariates makes the coefficients authoritative
    needs_model = needs_model or (spec is not None and covariates is not None and bool(spec.covariates))
    names = tuple(covariate_names)
    if covariates is not None and not needs_model:
        covariates = np.asarray(covariates, dtype=float)
        if covariates.shape[:2] != (n, T) or len(names) != covariates.shape[2]:
            raise DataError("covariates must have shape (n, T, p) with one name per column")
    if needs_model:
        if spec is None or covariates is None:
            raise DataError("covariate-dependent parameters need spec and covariates to simulate")
        covariates = np.asarray(covariates, dtype=float)
        if covariates.shape[:2] != (n, T):
            raise DataError("covariates must have shape (n, T, p)")
        names = tuple(covariate_names) or tuple(spec.covariates)
        from .model import compile_model

    def resolved(upto):
        if not needs_model:
            return params.pi[None], params.Pi[None] if T > 1 else None, [p[None] for p in params.phi]
        data = PanelDataset(y, params.levels, covariates=covariates, covariate_names=names)
        model = compile_model(spec, data, aggregate=False)
        return model.resolve(params)

    pi, Pi, phi = resolved(0)
    for t in range(T):
        if t == 0:
            probs = np.broadcast_to(pi, (n, k))
        else:
            probs = np.broadcast_to(Pi[:, t - 1], (n, k, k))[np.arange(n), paths[:, t - 1]]
        paths[:, t] = _inverse_cdf(probs, u[:, t, 0])
        for b, vars_ in enumerate(blocks):
            ph = np.broadcast_to(phi[b][:, t], (n,) + phi[b].shape[2:])
            code = _inverse_cdf(ph[np.arange(n), paths[:, t]], u[:, t, 1 + b])
            shape = tuple(params.levels[v] for v in vars_)
            for v, c in zip(vars_, np.unravel_index(code, shape)):
                y[:, t, v] = c
        if needs_model and t + 1 < T:
            _, Pi, phi = resolved(t + 1)
    data = PanelDataset(
        y, params.levels,
        covariates=covariates,
        covariate_names=names if covariates is not None else (),
    )
    return (data, paths) if return_paths else data
