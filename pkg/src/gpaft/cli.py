"""Command-line interface: ``gpaft fit|predict|evaluate|simulate``.

Exit codes: 0 success, 1 numerical or convergence failure, 2 input/schema
problems. Option precedence is command-line flag, then ``--config`` JSON
file, then built-in default; the effective settings are echoed into every
JSON output.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
import warnings
import zipfile
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist, squareform

from .data import (ConfounderFit, SurvivalDataset, apply_confounder_adjustment,
                   load_covariates, load_expression, load_survival_table, preprocess_expression,
                   residualize_confounders)
from .errors import (CannotFitError, DataValidationError, DegenerateKernelError,
                     NumericalError, SchemaError)
from .kernels import GramMatrix, KernelStack, normalized_rbf, pathway_stack
from .mcem import FitResult, McemConfig, fit
from .metrics import EvalConfig, evaluate
from .predict import predict_log_time, survival_probability
from .simulate import METHODS, SimConfig, run_study, summarize

log = logging.getLogger("gpaft")

EXIT_OK, EXIT_NUMERIC, EXIT_IO = 0, 1, 2

# every overridable option and its default; flags default to None so that a
# config file value can show through
DEFAULTS = {
    "kernel": "genome", "genes_as": "cols", "raw_counts": False, "min_q75": 20.0,
    "include_complement": True, "m1_fastpath": True,
    "s1": 500, "s_max": 100_000, "z_crit": 1.96, "thin": 10, "burnin": 100,
    "mstep_tol": 1e-8, "max_iter": 200, "seed": 0,
    "tau": None, "oracle_censoring": False, "times": None,
    "model": 1, "reps": 50, "n": 250, "p": 1000, "train_size": 200, "test_size": 50,
    "methods": list(METHODS), "jobs": 1, "full_scale": False,
}


class UsageError(Exception):
    pass


def _schema(name):
    text = resources.files("gpaft").joinpath("schemas", name).read_text()
    return json.loads(text)


def _write_json(path: Path, obj, schema=None):
    if schema is not None:
        jsonschema.validate(obj, _schema(schema))
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _save_npz(path: Path, arrays: dict):
    # np.savez stamps the current time into the zip; fix it for reproducibility
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def _require_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = _require_file(args.config, "config")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise SchemaError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _mcem_config(cfg) -> McemConfig:
    return McemConfig(s1=int(cfg["s1"]), s_max=int(cfg["s_max"]), z_crit=float(cfg["z_crit"]),
                      thin=int(cfg["thin"]), burnin=int(cfg["burnin"]),
                      mstep_tol=float(cfg["mstep_tol"]), max_iter=int(cfg["max_iter"]),
                      fastpath=bool(cfg["m1_fastpath"]), seed=int(cfg["seed"]))


def _load_pathways(path, genes):
    p = _require_file(path, "pathways")
    try:
        spec = json.loads(p.read_text())
        jsonschema.validate(spec, _schema("pathways.schema.json"))
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise SchemaError(f"{p}: {exc}") from exc
    index = {g: i for i, g in enumerate(genes)}
    masks, names = [], []
    for entry in spec:
        idx = sorted({index[g] for g in entry["genes"] if g in index})
        if not idx:
            warnings.warn(f"pathway {entry['name']!r} has no genes in the data; skipped")
            continue
        masks.append(np.array(idx, dtype=int))
        names.append(entry["name"])
    if not masks:
        raise DataValidationError(f"{p}: no pathway overlaps the expression genes")
    return masks, names


def _expression(args, cfg, ids, prep=None):
    """Expression matrix for ``ids`` after the training-time preprocessing.

    ``prep`` is None when fitting (preprocessing is estimated and returned)
    and the stored bundle when predicting.
    """
    path = _require_file(args.expression, "expression")
    X, genes = load_expression(path, ids, genes_as=cfg["genes_as"])
    if prep is None:
        prep = {"genes": genes, "raw_counts": bool(cfg["raw_counts"]),
                "min_q75": float(cfg["min_q75"])}
        if prep["raw_counts"]:
            X, kept = preprocess_expression(X, prep["min_q75"])
            prep["genes"] = [genes[k] for k in kept]
        return X, prep
    if prep["raw_counts"]:
        # sample-level normalizer uses all genes; keep the training gene set
        q = np.percentile(X, 75, axis=1)
        if np.any(q <= 0):
            raise DataValidationError("a sample has a zero 75th-percentile count")
        X = np.log10((X + 1.0) / q[:, None])
    pos = {g: i for i, g in enumerate(genes)}
    missing = [g for g in prep["genes"] if g not in pos]
    if missing:
        raise SchemaError(f"{path}: training gene {missing[0]!r} absent")
    return X[:, [pos[g] for g in prep["genes"]]], prep


def _confounders(path, ids):
    C, names = load_covariates(_require_file(path, "confounders"), ids)
    return C[:, 1:], names


def _ids_of(args, genes_as):
    if getattr(args, "survival", None):
        return load_survival_table(_require_file(args.survival, "survival")).ids
    path = _require_file(args.expression, "expression")
    df = pd.read_csv(path, skipinitialspace=True, nrows=0 if genes_as == "rows" else None)
    if genes_as == "rows":
        return [str(c).strip() for c in df.columns[1:]]
    return df["id"].astype(str).str.strip().tolist()


def cmd_fit(args) -> int:
    cfg = effective_config(args)
    ds = load_survival_table(_require_file(args.survival, "survival"))
    if args.covariates:
        Z, z_names = load_covariates(_require_file(args.covariates, "covariates"), ds.ids)
    else:
        Z, z_names = np.ones((ds.n, 1)), []
    X, prep = _expression(args, cfg, ds.ids)
    conf = None
    if args.confounders:
        C, c_names = _confounders(args.confounders, ds.ids)
        X, cfit = residualize_confounders(X, C, return_coef=True)
        conf = {"names": c_names, "coef": cfit.coef, "add_intercept": cfit.add_intercept}
    ds = SurvivalDataset(ids=ds.ids, time=ds.time, event=ds.event, lower=ds.lower,
                         upper=ds.upper, Z=Z, X=X, z_names=["intercept"] + z_names,
                         genes=prep["genes"])
    if cfg["kernel"] == "genome":
        stack = KernelStack((normalized_rbf(X),))
    elif cfg["kernel"] == "pathway":
        masks, names = _load_pathways(args.pathways, prep["genes"])
        stack = pathway_stack(X, masks, include_complement=cfg["include_complement"],
                              names=names)
    else:
        raise UsageError(f"unknown kernel {cfg['kernel']!r}")
    mcfg = _mcem_config(cfg)
    res = fit(ds, stack, mcfg)
    out = _outdir(args)
    doc = res.to_dict()
    doc["run_config"] = _echo(cfg)
    doc["subjects"] = list(ds.ids)
    doc["covariates"] = ds.z_names
    _write_json(out / "fit.json", doc, "fit.schema.json")
    arrays = {"X": X, "Z": Z, "T_bar": res.T_bar,
              "norm_denominator": np.array([k.norm_denominator for k in stack])}
    for i, k in enumerate(stack):
        arrays[f"mask{i}"] = np.arange(X.shape[1]) if k.mask is None else k.mask
    if conf is not None:
        arrays["confounder_coef"] = conf["coef"]
    _save_npz(out / "model.npz", arrays)
    bundle = {"preprocessing": prep, "kernel_names": stack.names,
              "masked": [k.mask is not None for k in stack],
              "covariate_columns": z_names,
              "confounders": None if conf is None else
              {"names": conf["names"], "add_intercept": conf["add_intercept"]}}
    _write_json(out / "bundle.json", bundle)
    (out / "summary.txt").write_text(_fit_summary(res))
    print(_fit_summary(res), end="")
    return EXIT_OK


def _fit_summary(res: FitResult) -> str:
    lines = ["variance component shares:"]
    for name, share in res.variance_shares.items():
        lines.append(f"  {name:<16s} {share:8.4f}")
    lines.append(f"fixed effects: {np.array2string(res.params.beta, precision=5)}")
    lines.append(f"MC log-likelihood: {res.loglik:.6f}")
    lines.append(f"outer iterations: {len(res.sr_history)}; final sample size: "
                 f"{res.sr_history[-1] if res.sr_history else 0}; "
                 f"{'terminated at sample cap' if res.converged else 'stopped early'}")
    return "\n".join(lines) + "\n"


def _load_bundle(model_dir):
    d = Path(model_dir)
    for name in ("fit.json", "bundle.json", "model.npz"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"model file not found: {d / name}")
    fit_doc = json.loads((d / "fit.json").read_text())
    bundle = json.loads((d / "bundle.json").read_text())
    with np.load(d / "model.npz") as z:
        arrays = {k: z[k] for k in z.files}
    return FitResult.from_dict(fit_doc), bundle, arrays, fit_doc


def _rebuild_stack(bundle, arrays):
    X = arrays["X"]
    kernels = []
    for i, (name, masked) in enumerate(zip(bundle["kernel_names"], bundle["masked"])):
        mask = arrays[f"mask{i}"] if masked else None
        den = float(arrays["norm_denominator"][i])
        Xi = X if mask is None else X[:, mask]
        d2 = squareform(pdist(Xi, "sqeuclidean"))
        kernels.append(GramMatrix(np.exp(-d2 / den), name, den, mask))
    return KernelStack(tuple(kernels))


def cmd_predict(args) -> int:
    cfg = effective_config(args)
    if args.model_dir is None:
        raise UsageError("--model is required")
    res, bundle, arrays, fit_doc = _load_bundle(args.model_dir)
    ids = _ids_of(args, cfg["genes_as"])
    X_new, _ = _expression(args, cfg, ids, prep=bundle["preprocessing"])
    if bundle["confounders"] is not None:
        C, _ = _confounders(args.confounders, ids)
        cfit = ConfounderFit(arrays["confounder_coef"], bundle["confounders"]["add_intercept"])
        X_new = apply_confounder_adjustment(X_new, C, cfit)
    cols = bundle["covariate_columns"]
    if cols:
        Z_new, _ = load_covariates(_require_file(args.covariates, "covariates"), ids,
                                   columns=cols)
    else:
        Z_new = np.ones((len(ids), 1))
    stack = _rebuild_stack(bundle, arrays)
    pred = predict_log_time(res, stack, arrays["Z"], Z_new, X_new, arrays["X"])
    mean = np.atleast_1d(pred.mean_log_time)
    var = np.atleast_1d(pred.var_log_time)
    table = pd.DataFrame({"id": ids, "mean_log_time": mean, "sd_log_time": np.sqrt(var),
                          "risk_score": -mean})
    times = cfg["times"]
    if times:
        times = np.sort(np.asarray(times, dtype=float))
        S = np.atleast_2d(survival_probability(mean, var, times))
        for j, t in enumerate(times):
            table[f"S({t:g})"] = S[:, j]
    out = _outdir(args)
    table.to_csv(out / "predictions.csv", index=False, float_format="%.10g")
    _write_json(out / "predict_config.json", {"run_config": _echo(cfg),
                                              "model": str(args.model_dir),
                                              "fit_seed": fit_doc["seed"]})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = effective_config(args)
    pred = pd.read_csv(_require_file(args.predictions, "predictions"))
    for col in ("id", "mean_log_time", "sd_log_time", "risk_score"):
        if col not in pred.columns:
            raise SchemaError(f"{args.predictions}: missing column {col!r}")
    truth = load_survival_table(_require_file(args.survival, "survival"))
    pred["id"] = pred["id"].astype(str).str.strip()
    pred = pred.set_index("id")
    missing = [i for i in truth.ids if i not in pred.index]
    if missing:
        raise SchemaError(f"{args.predictions}: no prediction for id {missing[0]!r}")
    pred = pred.loc[truth.ids]
    events = (truth.event == 1).astype(int)
    if np.any((truth.event != 0) & (truth.event != 1)):
        raise DataValidationError("evaluation needs right-censored or exact times")
    ev = EvalConfig.for_test_set(truth.time, events, bool(cfg["oracle_censoring"]),
                                 tau=cfg["tau"])
    mean = pred["mean_log_time"].to_numpy(float)
    var = pred["sd_log_time"].to_numpy(float) ** 2
    scores = evaluate(pred["risk_score"].to_numpy(float),
                      lambda t: survival_probability(mean, var, t),
                      truth.time, events, ev)
    scores["run_config"] = _echo(cfg)
    out = _outdir(args)
    _write_json(out / "metrics.json", scores, "metrics.schema.json")
    print(json.dumps({k: v for k, v in scores.items() if k != "run_config"}, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = effective_config(args)
    if cfg["full_scale"]:
        cfg.update(n=513, p=20483, train_size=413, test_size=100)
        if args.reps is None:
            cfg["reps"] = 500
        warnings.warn("full-scale simulation: expect days of CPU time", stacklevel=1)
    sim = SimConfig(n=int(cfg["n"]), p=int(cfg["p"]), model=int(cfg["model"]),
                    kernel_truth=cfg["kernel"], train_size=int(cfg["train_size"]),
                    test_size=int(cfg["test_size"]), seed=int(cfg["seed"]))
    methods = cfg["methods"]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown method {unknown[0]!r}; choose from {list(METHODS)}")
    records = run_study(sim, int(cfg["reps"]), methods, _mcem_config(cfg), int(cfg["jobs"]))
    out = _outdir(args)
    pd.DataFrame(records).to_csv(out / "replications.csv", index=False,
                                 float_format="%.10g")
    summary = summarize(records)
    summary["sim_config"] = asdict(sim)
    summary["run_config"] = _echo(cfg)
    _write_json(out / "summary.json", summary, "simulate_summary.schema.json")
    return EXIT_OK


def _echo(cfg) -> dict:
    # "jobs" only changes scheduling, never results; leave it out so outputs
    # are byte-identical across job counts
    return {k: v for k, v in sorted(cfg.items()) if k != "jobs"}


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpaft", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int)

    def mcem_opts(p):
        p.add_argument("--s1", type=int, help="initial Monte Carlo sample size")
        p.add_argument("--s-max", type=int, help="Monte Carlo sample size cap")
        p.add_argument("--z-crit", type=float)
        p.add_argument("--thin", type=int)
        p.add_argument("--burnin", type=int)
        p.add_argument("--mstep-tol", type=float)
        p.add_argument("--max-iter", type=int)
        p.add_argument("--m1-fastpath", action=argparse.BooleanOptionalAction, default=None,
                       help="eigenbasis M-step when there is a single kernel")

    def expr_opts(p):
        p.add_argument("--expression")
        p.add_argument("--genes-as", choices=("rows", "cols"))
        p.add_argument("--raw-counts", action=argparse.BooleanOptionalAction, default=None,
                       help="filter and upper-quartile normalize read counts")
        p.add_argument("--min-q75", type=float)
        p.add_argument("--confounders", help="CSV of confounders to regress out of X")

    p = sub.add_parser("fit", help="fit the model by Monte Carlo EM")
    p.add_argument("--survival")
    p.add_argument("--covariates")
    expr_opts(p)
    p.add_argument("--kernel", choices=("genome", "pathway"))
    p.add_argument("--pathways", help='JSON list of {"name": ..., "genes": [...]}')
    p.add_argument("--include-complement", action=argparse.BooleanOptionalAction,
                   default=None)
    mcem_opts(p)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict log-times and survival curves")
    p.add_argument("--model", dest="model_dir", help="output directory of a fit run")
    p.add_argument("--survival", help="optional; only its ids are used")
    p.add_argument("--covariates")
    expr_opts(p)
    p.add_argument("--times", type=float, nargs="+", help="times for S(t) columns")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against survival data")
    p.add_argument("--predictions")
    p.add_argument("--survival")
    p.add_argument("--tau", type=float)
    p.add_argument("--oracle-censoring", action=argparse.BooleanOptionalAction,
                   default=None, help="test times are uncensored truths")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--model", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--kernel", choices=("genome", "pathway"), help="true covariance")
    p.add_argument("--reps", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--methods", nargs="+")
    p.add_argument("--jobs", type=int)
    p.add_argument("--full-scale", action="store_true", default=None,
                   help="n=513, p=20483, 413/100 split, 500 replications")
    mcem_opts(p)
    common(p)
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, SchemaError,
            DataValidationError, UsageError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, CannotFitError, DegenerateKernelError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
