"""Command-line interface.

Every command reads one declarative config document (YAML or JSON);
flags override scalar options only. Reports are JSON with sorted keys and no
timestamps, so identical inputs give byte-identical files.

Config layout::

    data:        {path: panel.csv, schema: {...}}      # column roles, see load_panel
    model:       {k: 2, measurement: ..., initial: ..., transition: ..., covariates: [...]}
    multilevel:  {m: 2, cluster_covariates: [...], time_varying: false}   # optional
    options:     {starts: 9, seed: 0, tol: 1e-8, max_iter: 5000, threads: 1, k_range: [1, 4]}
    simulate:    {report: fit.json, n: 500}             # or {params: {...}, model: ...}
    decode:      {report: fit.json}
    lrtest:      {full: a.json, constrained: b.json, distribution: chi2 | chibar | chibar-mc,
                  weights: [...], boundary: [labels], draws: 10000}

Exit status: 0 success, 1 input error, 2 non-convergence (results still written).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .blocks import FisherScoringError
from .covariates import CovariateError
from .data import DataError, PanelDataset, load_panel, simulate_panel, write_panel
from .decode import decode_fit
from .em import EMError, fit
from .inference import InferenceError, infer, lr_test
from .links import LinkError
from .multilevel import (
    MultilevelParams,
    MultilevelSpec,
    decode_multilevel,
    fit_multilevel,
    simulate_multilevel,
)
from .params import (
    MeasurementSpec,
    SpecError,
    params_from_dict,
    params_to_dict,
    spec_from_dict,
    spec_to_dict,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
INPUT_ERRORS = (DataError, SpecError, CovariateError, LinkError, InferenceError, FileNotFoundError,
                yaml.YAMLError, json.JSONDecodeError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config and serialisation helpers
# ---------------------------------------------------------------------------

def load_document(path) -> dict:
    text = Path(path).read_text()
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_report(doc) -> str:
    return json.dumps(_jsonify(doc), sort_keys=True, indent=2) + "\n"


def _write(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def data_digest(data: PanelDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.responses).tobytes())
    if data.covariates is not None:
        h.update(np.ascontiguousarray(data.covariates).tobytes())
    if data.cluster is not None:
        h.update("|".join(map(str, data.cluster)).encode())
    return h.hexdigest()[:16]


def _options(cfg, args) -> dict:
    opts = dict(cfg.get("options") or {})
    known = {"starts", "seed", "tol", "param_tol", "max_iter", "threads", "k_range", "step"}
    extra = set(opts) - known
    if extra:
        raise ConfigError(f"unknown option field(s): {', '.join(sorted(extra))}")
    for name in ("starts", "seed", "threads"):
        v = getattr(args, name, None)
        if v is not None:
            opts[name] = v
    if getattr(args, "k_range", None):
        opts["k_range"] = _parse_range(args.k_range)
    opts.setdefault("starts", 9)
    opts.setdefault("seed", 0)
    return opts


def _parse_range(text):
    text = str(text)
    for sep in ("-", ":", ","):
        if sep in text:
            a, b = text.split(sep, 1)
            return [int(a), int(b)]
    return [int(text), int(text)]


def _load_data(cfg, args) -> PanelDataset:
    dcfg = cfg.get("data") or {}
    if isinstance(dcfg, str):
        dcfg = {"path": dcfg}
    path = args.data or dcfg.get("path")
    if not path:
        raise ConfigError("data.path is required (or pass --data)")
    base = Path(getattr(args, "config_dir", ".") or ".")
    p = Path(path)
    if not p.is_absolute() and not p.exists() and (base / p).exists():
        p = base / p
    return load_panel(p, dcfg.get("schema"))


def _model_spec(cfg, args):
    mdoc = cfg.get("model")
    if mdoc is None:
        raise ConfigError("model section is required")
    mdoc = dict(mdoc)
    if getattr(args, "k", None) is not None:
        mdoc["k"] = args.k
    return spec_from_dict(mdoc)


def _multilevel_spec(cfg, spec):
    ml = cfg.get("multilevel")
    if not ml:
        return None
    ml = dict(ml)
    extra = set(ml) - {"m", "cluster_covariates", "time_varying"}
    if extra:
        raise ConfigError(f"unknown multilevel field(s): {', '.join(sorted(extra))}")
    meas = spec.measurement
    if not isinstance(meas, MeasurementSpec):
        raise ConfigError("multilevel model needs a single measurement spec")
    return MultilevelSpec(spec.k, int(ml.get("m", 1)), measurement=meas, covariates=tuple(spec.covariates),
                          cluster_covariates=tuple(ml.get("cluster_covariates") or ()),
                          time_varying=bool(ml.get("time_varying", False)))


def ml_params_to_dict(p: MultilevelParams) -> dict:
    return {"k": p.k, "m": p.m, "T": p.T, "levels": list(p.levels), "blocks": [list(b) for b in p.blocks],
            "class_coef": p.class_coef, "init_coef": p.init_coef, "trans_coef": p.trans_coef,
            "phi": p.phi, "measurement_coef": dict(sorted(p.measurement_coef.items()))}


def ml_params_from_dict(d: dict) -> MultilevelParams:
    arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
    return MultilevelParams(int(d["k"]), int(d["m"]), int(d["T"]), tuple(d["levels"]),
                            tuple(tuple(b) for b in d["blocks"]), arr(d["class_coef"]), arr(d["init_coef"]),
                            arr(d["trans_coef"]), [arr(p) for p in d["phi"]],
                            {k: arr(v) for k, v in d.get("measurement_coef", {}).items()})


def _fit_kwargs(opts):
    kw = {k: opts[k] for k in ("starts", "seed", "tol", "param_tol", "max_iter", "threads") if k in opts}
    for k in ("tol", "param_tol"):
        if k in kw:
            kw[k] = float(kw[k])
    for k in ("starts", "seed", "max_iter", "threads"):
        if k in kw:
            kw[k] = int(kw[k])
    return kw


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _fit_document(data, spec, ml_spec, opts, *, inference=True):
    kw = _fit_kwargs(opts)
    if ml_spec is not None:
        res = fit_multilevel(data, ml_spec, **kw)
        params_doc = ml_params_to_dict(res.params)
    else:
        res = fit(data, spec, **kw)
        params_doc = params_to_dict(res.params)
    doc = {
        "command": "fit",
        "data_digest": data_digest(data),
        "spec": spec_to_dict(spec),
        "multilevel": None if ml_spec is None else {
            "m": ml_spec.m, "cluster_covariates": list(ml_spec.cluster_covariates),
            "time_varying": ml_spec.time_varying},
        "converged": bool(res.converged),
        "iterations": int(res.iterations),
        "loglik": float(res.loglik),
        "params": params_doc,
        "starts": [{"start": s.start, "loglik": s.loglik, "iterations": s.iterations,
                    "converged": s.converged, "error": s.error} for s in res.start_summaries],
        "convergence_log": res.trace[-10:],
    }
    if ml_spec is not None:
        doc["class_posteriors"] = res.class_posteriors
    if inference:
        rep = infer(res, step=float(opts.get("step", 1e-6)))
        doc.update({
            "g": rep.g, "n": rep.n, "aic": rep.aic, "bic": rep.bic,
            "identifiable": rep.identifiable, "information_rank": rep.rank,
            "min_singular_value": rep.min_singular,
            "score_max_abs": float(np.max(np.abs(rep.score))) if rep.score.size else 0.0,
            "estimates": [
                {"name": lab, "coordinate": float(c), "value": float(v),
                 "se": None if rep.value_se is None else float(rep.value_se[j])}
                for j, (lab, c, v) in enumerate(zip(rep.labels, rep.estimates, rep.values))
            ],
            "information": rep.information,
            "probability_se": rep.probability_se,
        })
    return res, doc


def _estimates_csv(doc) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "se"])
    for e in doc.get("estimates", []):
        w.writerow([e["name"], repr(e["value"]), "" if e["se"] is None else repr(e["se"])])
    return buf.getvalue()


def cmd_fit(cfg, args) -> int:
    data = _load_data(cfg, args)
    spec = _model_spec(cfg, args)
    ml = _multilevel_spec(cfg, spec)
    opts = _options(cfg, args)
    res, doc = _fit_document(data, spec, ml, opts)
    _write(_estimates_csv(doc) if args.format == "csv" else dump_report(doc), args.out)
    if not res.converged:
        print("warning: EM did not converge within max_iter", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_select(cfg, args) -> int:
    data = _load_data(cfg, args)
    spec = _model_spec(cfg, args)
    opts = _options(cfg, args)
    if "k_range" not in opts:
        raise ConfigError("options.k_range is required for select (or pass --k-range)")
    lo, hi = (int(v) for v in opts["k_range"])
    if lo < 1 or hi < lo:
        raise ConfigError(f"options.k_range must be a non-empty range of positive integers, got {lo}..{hi}")
    rows = []
    for k in range(lo, hi + 1):
        sk = replace(spec, k=k)
        row = {"k": k}
        try:
            ml = _multilevel_spec(cfg, sk)
            kw = _fit_kwargs(opts)
            res = fit_multilevel(data, ml, **kw) if ml is not None else fit(data, sk, **kw)
            from .inference import information_criteria
            aic, bic = information_criteria(res.loglik, res.model.n_free, res.model.bic_n)
            row.update(g=res.model.n_free, loglik=res.loglik, aic=aic, bic=bic, converged=res.converged, error=None)
        except (EMError, FisherScoringError, SpecError, DataError) as exc:
            row.update(g=None, loglik=None, aic=None, bic=None, converged=False, error=str(exc))
        rows.append(row)
    valid = [r for r in rows if r["bic"] is not None]
    best = min(valid, key=lambda r: (r["bic"], r["k"]))["k"] if valid else None
    for r in rows:
        r["bic_min"] = r["k"] == best
    doc = {"command": "select", "data_digest": data_digest(data), "spec": spec_to_dict(spec),
           "rows": rows, "selected_k": best}
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "g", "loglik", "aic", "bic", "bic_min", "converged"])
        for r in rows:
            w.writerow([r["k"], r["g"], r["loglik"], r["aic"], r["bic"], int(r["bic_min"]), int(r["converged"])])
        _write(buf.getvalue(), args.out)
    else:
        _write(dump_report(doc), args.out)
    return EXIT_OK


def _report_model(report_path):
    rep = load_document(report_path)
    if "params" not in rep or "spec" not in rep:
        raise ConfigError(f"{report_path}: not a fit report (needs params and spec)")
    spec = spec_from_dict(rep["spec"])
    ml = rep.get("multilevel")
    if ml:
        ml_spec = MultilevelSpec(spec.k, int(ml["m"]), measurement=spec.measurement,
                                 covariates=tuple(spec.covariates),
                                 cluster_covariates=tuple(ml.get("cluster_covariates") or ()),
                                 time_varying=bool(ml.get("time_varying", False)))
        return rep, spec, ml_spec, ml_params_from_dict(rep["params"])
    return rep, spec, None, params_from_dict(rep["params"])


def cmd_decode(cfg, args) -> int:
    dcfg = cfg.get("decode") or {}
    if "report" not in dcfg:
        raise ConfigError("decode.report (a fit report) is required")
    _, spec, ml_spec, params = _report_model(dcfg["report"])
    data = _load_data(cfg, args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if ml_spec is not None:
        from .multilevel import MultilevelModel
        model = MultilevelModel(ml_spec, data)
        classes, path = decode_multilevel(model, params)
        w.writerow(["id", "time", "cluster_class", "state"])
        cls = classes[model.clusters.assign]
        for i in range(data.n):
            for t in range(data.T):
                w.writerow([data.ids[i], t + 1, int(cls[i]), int(path.path[i, t])])
    else:
        from .model import compile_model
        model = compile_model(spec, data)
        res = decode_fit(model, params)
        w.writerow(["id", "time", "state", "local_state", "local_mass"])
        for i in range(data.n):
            for t in range(data.T):
                w.writerow([data.ids[i], t + 1, int(res.path[i, t]), int(res.local[i, t]),
                            repr(float(res.local_mass[i, t]))])
    _write(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_simulate(cfg, args) -> int:
    scfg = cfg.get("simulate") or {}
    if "report" not in scfg:
        raise ConfigError("simulate.report (a fit report with params) is required")
    if "n" not in scfg and not scfg.get("clusters"):
        raise ConfigError("simulate.n is required")
    _, spec, ml_spec, params = _report_model(scfg["report"])
    seed = int(args.seed if args.seed is not None else (cfg.get("options") or {}).get("seed", 0))
    if ml_spec is not None:
        sizes = scfg.get("clusters")
        if not sizes:
            raise ConfigError("simulate.clusters (list of cluster sizes) is required for multilevel models")
        clusters = np.repeat(np.arange(1, len(sizes) + 1), sizes)
        if ml_spec.covariates or ml_spec.cluster_covariates:
            raise ConfigError("simulating multilevel models with covariates needs the Python API")
        data = simulate_multilevel(params, ml_spec, clusters, seed)
    else:
        if spec.covariates:
            raise ConfigError("simulating covariate models needs covariate values; use the Python API")
        data = simulate_panel(params, int(scfg["n"]), seed)
    _write(write_panel(data), args.out)
    return EXIT_OK


_MEAS_ORDER = {("time_invariant", "free"), ("rasch", "free"), ("link", "free"), ("link", "time_invariant"),
               ("rasch", "time_invariant"), ("time_invariant", "covariate"), ("free", "covariate")}
_TRANS_ORDER = {("homogeneous", "free"), ("partial", "free"), ("homogeneous", "partial"),
                ("linear", "homogeneous"), ("linear", "free"), ("linear", "partial"), ("logit", "free"),
                ("homogeneous", "logit"), ("logit", "homogeneous"), ("homogeneous", "covariate"),
                ("logit", "covariate"), ("linear", "linear"), ("homogeneous", "homogeneous"),
                ("free", "free")}
_INIT_ORDER = {("uniform", "free"), ("logit", "free"), ("free", "logit"), ("uniform", "logit"),
               ("free", "covariate"), ("logit", "covariate"), ("uniform", "covariate")}


def _nested(c: dict, f: dict) -> tuple[bool, str]:
    """Conservative structural check that spec document ``c`` restricts ``f``."""
    if c["k"] != f["k"]:
        return False, "different numbers of latent states"
    if c == f:
        return False, "identical specifications"
    cm, fm = c["measurement"], f["measurement"]
    if isinstance(cm, list) or isinstance(fm, list):
        if cm != fm:
            return False, "multi-block measurement specs must match"
    elif cm != fm and (cm["kind"], fm["kind"]) not in _MEAS_ORDER:
        return False, f"measurement {cm['kind']} is not a restriction of {fm['kind']}"
    if c["initial"] != f["initial"] and (c["initial"]["kind"], f["initial"]["kind"]) not in _INIT_ORDER:
        return False, f"initial {c['initial']['kind']} is not a restriction of {f['initial']['kind']}"
    ct, ft = c["transition"], f["transition"]
    if ct != ft:
        if (ct["kind"], ft["kind"]) not in _TRANS_ORDER:
            return False, f"transition {ct['kind']} is not a restriction of {ft['kind']}"
        order = {None: 0, "equal_off_diagonal": 0, "symmetric": 0, "upper_triangular": 1, "tridiagonal": 1,
                 "identity": 2}
        if ct["kind"] == ft["kind"] == "linear":
            if not (ft["structure"] in ("equal_off_diagonal", "symmetric", None) and ct["structure"] == "identity"):
                if ct["structure"] != ft["structure"]:
                    return False, "linear transition structures are not nested"
        elif ft["structure"] is not None and ct["structure"] != ft["structure"]:
            if order.get(ct["structure"], 0) <= order.get(ft["structure"], 0):
                return False, "transition structures are not nested"
    if not set(c.get("covariates", [])) <= set(f.get("covariates", [])):
        return False, "constrained model uses covariates absent from the full model"
    return True, ""


def cmd_lrtest(cfg, args) -> int:
    lcfg = cfg.get("lrtest") or {}
    if None in lcfg:
        raise ConfigError("lrtest: 'null' is read as an empty YAML key; name the reference law with 'distribution'")
    for key in ("full", "constrained"):
        if key not in lcfg:
            raise ConfigError(f"lrtest.{key} (a fit report) is required")
    full = load_document(lcfg["full"])
    cons = load_document(lcfg["constrained"])
    for name, rep in (("full", full), ("constrained", cons)):
        if "loglik" not in rep or "spec" not in rep:
            raise ConfigError(f"lrtest.{name}: not a fit report")
    if full.get("data_digest") != cons.get("data_digest"):
        raise ConfigError("lrtest: the two reports were fitted to different data")
    if (full.get("multilevel") or None) != (cons.get("multilevel") or None):
        raise ConfigError("lrtest: multilevel settings differ")
    ok, why = _nested(cons["spec"], full["spec"])
    if not ok:
        raise ConfigError(f"lrtest: specifications are not nested ({why})")
    null = lcfg.get("distribution", "chi2")
    df = None
    if "g" in full and "g" in cons:
        df = int(full["g"]) - int(cons["g"])
    kw = {}
    if null == "chi2":
        kw["df"] = int(lcfg.get("df", df))
    elif null == "chibar":
        kw["weights"] = lcfg.get("weights")
    elif null == "chibar-mc":
        labels = [e["name"] for e in full.get("estimates", [])]
        boundary = lcfg.get("boundary")
        if not boundary:
            raise ConfigError("lrtest.boundary (names of the boundary coefficients) is required for chibar-mc")
        missing = [b for b in boundary if b not in labels]
        if missing:
            raise ConfigError(f"lrtest.boundary names not in the full report: {', '.join(missing)}")
        J = np.asarray(full["information"], dtype=float)
        idx = [labels.index(b) for b in boundary]
        kw["cov"] = np.linalg.inv(J)[np.ix_(idx, idx)]
        kw["n_draws"] = int(lcfg.get("draws", 10_000))
        kw["seed"] = int(args.seed if args.seed is not None else lcfg.get("seed", 0))
    res = lr_test(float(full["loglik"]), float(cons["loglik"]), null, **kw)
    doc = {"command": "lrtest", "statistic": res.statistic, "p_value": res.p_value, "null": res.null,
           "df": res.df, "weights": res.weights, "weights_se": res.weights_se,
           "loglik_full": full["loglik"], "loglik_constrained": cons["loglik"]}
    _write(dump_report(doc), args.out)
    return EXIT_OK


def cmd_describe(cfg, args) -> int:
    data = _load_data(cfg, args)
    spec = _model_spec(cfg, args)
    ml = _multilevel_spec(cfg, spec)
    if ml is not None:
        from .multilevel import MultilevelModel
        model = MultilevelModel(ml, data)
        extra = {"m": ml.m, "clusters": model.clusters.H}
    else:
        from .model import compile_model
        model = compile_model(spec, data)
        extra = {"units": int(len(model.units.weights)), "aggregated": not model.units.subjects,
                 "covariate_placement": model.placement}
    doc = {"command": "describe", "n": data.n, "T": data.T, "levels": list(data.levels),
           "response_names": list(data.response_names), "covariate_names": list(data.covariate_names),
           "spec": spec_to_dict(spec), "g": model.n_free, "parameters": model.coord_labels(), **extra}
    _write(dump_report(doc), args.out)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "decode": cmd_decode, "select": cmd_select,
            "lrtest": cmd_lrtest, "describe": cmd_describe}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentmarkov", description="Latent Markov models for categorical panels.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML or JSON config document")
        s.add_argument("--data", help="panel data file (overrides data.path)")
        s.add_argument("--out", help="output file (default: stdout)")
        s.add_argument("--seed", type=int)
        s.add_argument("--starts", type=int)
        s.add_argument("--threads", type=int, help="worker threads (default: $LATENTMARKOV_THREADS or 1)")
        s.add_argument("--k", type=int)
        s.add_argument("--k-range", dest="k_range", help="e.g. 1-4")
        s.add_argument("--format", choices=("report", "csv"), default="report")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_document(args.config)
        args.config_dir = str(Path(args.config).parent)
        return COMMANDS[args.command](cfg, args)
    except INPUT_ERRORS + (ConfigError, EMError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TypeError as exc:
        # malformed config values (e.g. a mapping where a number is expected)
        print(f"error: invalid config value: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
