"""Command-line experiment harness.

    mnar-robust synth   --out synth.csv
    mnar-robust inject  --dataset adult.data adult.test --schema adult --out train.csv
    mnar-robust train   --dataset ... --schema ... --method biascorr --gs probit --gy logit
    mnar-robust analyze --dataset ... --schema ... --gs probit
    mnar-robust sweep   --dataset ... --schema ... --axis eta --grid 0.5,0.6,0.7
    mnar-robust eval    --dataset ... --schema ... --model model.json

Reports go to stdout as a table and, with ``--out``, to a JSON file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bias_analysis
from .biascorr import run_biascorr
from .biascorr_star import run_biascorr_star
from .core import FitConfig, OptimizationError, PredictorParams, fit_binary_classifier
from .data import (
    BiasRule,
    DataLoadError,
    SynthSpec,
    generate_synthetic,
    inject_mnar_bias,
    load_csv_dataset,
    load_schema,
    missingness_ratio,
    rule_for_target_eta,
    synthetic_schema,
    train_test_split,
    write_dataset_csv,
)
from .greene import GreeneParams, fit_greene

log = logging.getLogger("mnar_robust")

METHODS = ("nobias", "ssbias", "greene", "biascorr", "biascorr_star")
EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def metrics(predictions, labels):
    """Accuracy and F1, both in percent."""
    p = np.asarray(predictions).astype(int)
    t = np.asarray(labels).astype(int)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty prediction vector")
    acc = float(np.mean(p == t)) * 100.0
    tp = float(np.sum((p == 1) & (t == 1)))
    precision = tp / p.sum() if p.sum() else 0.0
    recall = tp / t.sum() if t.sum() else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return acc, f1 * 100.0


@dataclass
class ExperimentReport:
    method: str
    g_s_kind: str | None
    g_y_kind: str | None
    seeds: list
    train_accuracy: tuple
    test_accuracy: tuple
    f1: tuple
    eta: float
    s_bar: float | None
    threshold: float | None
    converged: bool
    config: dict
    config_hash: str
    per_seed: list = field(default_factory=list)
    grid_value: float | None = None
    wall_time: float | None = None

    def to_dict(self):
        d = asdict(self)
        if d["wall_time"] is None:
            d.pop("wall_time")
        if d["grid_value"] is None:
            d.pop("grid_value")
        return d


# --- argument handling --------------------------------------------------------

def parse_seeds(text):
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise UsageError("--seeds is empty")
    return sorted(set(seeds))


def parse_floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse number list {text!r}") from exc


def fit_config(args, seed=0):
    try:
        return FitConfig(learning_rate=args.lr, weight_decay=args.weight_decay, stop_pct=args.stop_pct,
                         max_iters=args.max_iters, R=args.draws, seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def config_dict(args, extra=None):
    keys = ("dataset", "schema", "method", "gs", "gy", "eta", "sbar", "seeds", "lr", "weight_decay",
            "draws", "stop_pct", "max_iters", "split", "split_seed", "fraction", "pool")
    d = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    d["dataset"] = [str(p) for p in d.get("dataset") or []]
    d.update(extra or {})
    return d


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def add_data_args(p):
    p.add_argument("--dataset", nargs="+", required=True, help="CSV file(s), concatenated in order")
    p.add_argument("--schema", required=True, help="schema JSON path or bundled name (adult, german, drug)")
    p.add_argument("--split", choices=("ordered", "shuffle"), default="ordered",
                   help="ordered: first fraction of rows is the training split")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.7)
    p.add_argument("--eta", type=float, default=None,
                   help="re-threshold the bias rule to reach this missingness ratio")


def add_fit_args(p):
    p.add_argument("--gs", choices=("probit", "logit"), default="probit")
    p.add_argument("--gy", choices=("logit", "mlp"), default="logit")
    p.add_argument("--seeds", default="0-4")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--draws", type=int, default=200, help="random draws R per sample")
    p.add_argument("--stop-pct", type=float, default=0.05)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--sbar", type=float, default=None, help="fix the soft selection value (skips g_s)")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--timing", action="store_true", help="record wall time (reports stop being bitwise reproducible)")


# --- data preparation ---------------------------------------------------------

@dataclass
class Prepared:
    schema: object
    train: object
    test: object
    rule: BiasRule | None


def prepare(args, eta=None):
    schema = load_schema(args.schema)
    ds = load_csv_dataset(args.dataset, schema)
    train, test = train_test_split(ds, args.fraction, seed=args.split_seed, shuffle=args.split == "shuffle",
                                   standardize_features=schema.standardize)
    eta = args.eta if eta is None else eta
    rule = schema.bias_rule
    if eta is not None:
        if rule is None:
            raise UsageError("--eta needs a schema with a bias_rule")
        rule = rule_for_target_eta(train, rule, schema, eta)
    if rule is not None and (schema.selection_column is None or eta is not None):
        train = inject_mnar_bias(train, rule, schema)
    elif train.s is None:
        raise UsageError("schema has neither a bias_rule nor a selection_column")
    return Prepared(schema, train, test, rule)


# --- training -----------------------------------------------------------------

def _fit_once(method, prep, cfg, args, s_bar=None):
    """Train one method with one seed; returns (predict_fn, info)."""
    train, test = prep.train, prep.test
    labeled = train.s == 1
    info = {"converged": True, "s_bar": None}
    if method in ("nobias", "ssbias"):
        rows = slice(None) if method == "nobias" else labeled
        clf = fit_binary_classifier("logit", train.x_pred[rows], train.y[rows], cfg)
        info["converged"] = clf.converged or clf.status != "ok"
        info["model"] = {"kind": "predictor", "params": clf.to_dict()}
        return clf.predict, info
    sd = train.to_selection_data()
    if method == "greene":
        fit = fit_greene(sd, cfg)
        h, info["converged"] = fit.params, fit.converged
    elif method == "biascorr":
        out = run_biascorr(sd, args.gs, args.gy, cfg, s_bar=s_bar)
        h, info["converged"], info["s_bar"] = out.h_params, out.converged, out.s_bar
    elif method == "biascorr_star":
        d_s = sd.subset(np.flatnonzero(labeled))
        pool = test.x_sel if args.pool == "test" else train.x_sel[~labeled]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out, plan = run_biascorr_star(d_s, pool, train.n, args.gs, args.gy, cfg)
        for w in caught:
            log.warning("%s", w.message)
        h, info["converged"], info["s_bar"] = out.h_params, out.converged, out.s_bar
        info["augmented"] = int(len(plan.added))
    else:
        raise UsageError(f"unknown method {method!r}")
    info["model"] = {"kind": "greene", "params": h.to_dict()}
    return (lambda X: h.predict(X)), info


def run_method(method, prep, args, seeds, s_bar=None, grid_value=None):
    train, test = prep.train, prep.test
    labeled = train.s == 1
    per_seed = []
    t0 = time.perf_counter()
    for seed in seeds:
        cfg = fit_config(args, seed)
        predict, info = _fit_once(method, prep, cfg, args, s_bar=s_bar)
        rows = slice(None) if method == "nobias" else labeled
        tr_acc, _ = metrics(predict(train.x_pred[rows]), train.y[rows])
        te_acc, f1 = metrics(predict(test.x_pred), test.y)
        per_seed.append({"seed": seed, "train_accuracy": tr_acc, "test_accuracy": te_acc, "f1": f1,
                         "s_bar": info["s_bar"], "converged": bool(info["converged"]), "model": info["model"]})
    elapsed = time.perf_counter() - t0
    col = lambda k: np.array([r[k] for r in per_seed], dtype=float)
    stat = lambda k: (float(col(k).mean()), float(col(k).std()))
    sbars = [r["s_bar"] for r in per_seed if r["s_bar"] is not None]
    sb = float(np.mean(sbars)) if sbars else s_bar
    uses_models = method in ("biascorr", "biascorr_star")
    cfg = config_dict(args, {"method": method, "grid_value": grid_value,
                             "rule": prep.rule.to_dict() if prep.rule else None})
    return ExperimentReport(
        method=method, g_s_kind=args.gs if uses_models and s_bar is None else None,
        g_y_kind=args.gy if uses_models else None, seeds=list(seeds),
        train_accuracy=stat("train_accuracy"), test_accuracy=stat("test_accuracy"), f1=stat("f1"),
        eta=missingness_ratio(train), s_bar=sb,
        threshold=bias_analysis.eta_threshold(sb) if sb is not None and sb < 1 else None,
        converged=all(r["converged"] for r in per_seed), config=cfg, config_hash=config_hash(cfg),
        per_seed=per_seed, grid_value=grid_value, wall_time=elapsed if args.timing else None)


def format_reports(reports):
    head = f"{'method':<22}{'grid':>7}{'train acc':>17}{'test acc':>17}{'F1':>17}{'eta':>8}{'s_bar':>8}{'1/(2-s)':>9}  conv"
    lines = [head, "-" * len(head)]
    for r in reports:
        name = r.method + (f" ({r.g_s_kind or '-'},{r.g_y_kind})" if r.g_y_kind else "")
        fmt = lambda t: f"{t[0]:7.2f} ± {t[1]:5.2f}"
        opt = lambda v, w=8: f"{v:{w}.4f}" if v is not None else f"{'-':>{w}}"
        grid = f"{r.grid_value:7.3f}" if r.grid_value is not None else f"{'':>7}"
        lines.append(f"{name:<22}{grid}{fmt(r.train_accuracy):>17}{fmt(r.test_accuracy):>17}{fmt(r.f1):>17}"
                     f"{r.eta:8.4f}{opt(r.s_bar)}{opt(r.threshold, 9)}  {'yes' if r.converged else 'NO'}")
    return "\n".join(lines)


def _emit(payload, out):
    if out:
        Path(out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _strip_models(reports):
    out = []
    for r in reports:
        d = r.to_dict()
        for row in d["per_seed"]:
            row.pop("model", None)
        out.append(d)
    return out


def cmd_train(args):
    seeds = parse_seeds(args.seeds)
    prep = prepare(args)
    report = run_method(args.method, prep, args, seeds, s_bar=args.sbar)
    print(format_reports([report]))
    _emit({"reports": _strip_models([report])}, args.out)
    if args.save_model:
        model = report.per_seed[0]["model"]
        model.update({"method": args.method, "seed": seeds[0], "schema": str(args.schema)})
        Path(args.save_model).write_text(json.dumps(model, indent=2, sort_keys=True) + "\n")
    return [report]


def cmd_sweep(args):
    seeds = parse_seeds(args.seeds)
    grid = parse_floats(args.grid)
    if not grid:
        raise UsageError("--grid is empty")
    methods = [m.strip() for m in args.methods.split(",")]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}")
    reports = []
    for value in grid:
        if args.axis == "eta":
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                prep = prepare(args, eta=value)
            for w in caught:
                log.warning("eta=%s: %s", value, w.message)
            for m in methods:
                reports.append(run_method(m, prep, args, seeds, s_bar=args.sbar, grid_value=value))
        else:
            if not 0 <= value <= 1:
                raise UsageError("s_bar grid values must lie in [0, 1]")
            prep = prepare(args)
            reports.append(run_method("biascorr", prep, args, seeds, s_bar=value, grid_value=value))
    print(format_reports(reports))
    _emit({"axis": args.axis, "reports": _strip_models(reports)}, args.out)
    return reports


def cmd_analyze(args):
    prep = prepare(args)
    train = prep.train
    eta = missingness_ratio(train)
    sd = train.to_selection_data()
    if args.sbar is not None:
        s_bar = args.sbar
    else:
        cfg = fit_config(args, parse_seeds(args.seeds)[0])
        g_s = fit_binary_classifier(args.gs, sd.x_sel, sd.s, cfg)
        s_bar = float(np.mean(g_s.predict_proba(sd.x_sel[sd.s == 0]))) if np.any(sd.s == 0) else 0.0
    note = None
    if train.truth is None:
        if args.oracle:
            raise UsageError("oracle bias analysis needs generator-known selection and label "
                             "probabilities; real datasets only support eta, s_bar and 1/(2-s_bar)")
        report = bias_analysis.BiasReport(eta, s_bar, bias_analysis.eta_threshold(s_bar))
    else:
        try:
            oracle = bias_analysis.OracleModels.perfect(train.truth.p_s, train.truth.f_y, s_bar, eta)
            report = bias_analysis.analyze(oracle, s_bar, eta)
        except ValueError as exc:
            if args.oracle:
                raise
            note = f"oracle biases undefined: {exc}"
            print(f"warning: {note}", file=sys.stderr)
            report = bias_analysis.BiasReport(eta, s_bar, bias_analysis.eta_threshold(s_bar))
    d = report.to_dict()
    if note:
        d["oracle_note"] = note
    d["g_s_kind"] = None if args.sbar is not None else args.gs
    d["regime"] = eta > report.threshold
    for k, v in d.items():
        print(f"{k:>17}: {v}")
    _emit({"bias_report": d, "config": config_dict(args)}, args.out)
    return report


def cmd_eval(args):
    model = json.loads(Path(args.model).read_text())
    prep = prepare(args)
    if model["kind"] == "greene":
        predict = GreeneParams.from_dict(model["params"]).predict
    else:
        predict = PredictorParams.from_dict(model["params"]).predict
    acc, f1 = metrics(predict(prep.test.x_pred), prep.test.y)
    d = {"test_accuracy": acc, "f1": f1, "n_test": int(prep.test.n), "method": model.get("method")}
    for k, v in d.items():
        print(f"{k:>14}: {v}")
    _emit(d, args.out)
    return d


def cmd_inject(args):
    prep = prepare(args)
    eta = missingness_ratio(prep.train)
    print(f"train={prep.train.n} test={prep.test.n} unlabeled={int(np.sum(prep.train.s != 1))} eta={eta:.4f}")
    if args.out:
        write_dataset_csv(prep.train, args.out)
    return eta


def cmd_synth(args):
    try:
        spec = SynthSpec(args.n, tuple(parse_floats(args.beta)), tuple(parse_floats(args.gamma)),
                         tuple(int(v) for v in parse_floats(args.pred_idx)), sigma=args.sigma, rho=args.rho,
                         seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = generate_synthetic(spec)
    write_dataset_csv(ds, args.out)
    schema_path = Path(args.out).with_suffix(".schema.json")
    schema_path.write_text(json.dumps(synthetic_schema(ds).to_dict(), indent=2) + "\n")
    print(f"wrote {ds.n} samples to {args.out} (eta={missingness_ratio(ds):.4f}); schema {schema_path}")
    return ds


def build_parser():
    parser = argparse.ArgumentParser(prog="mnar-robust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic MNAR dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--beta", default="-1.5,1.0,-0.8", help="prediction coefficients (first is the intercept)")
    p.add_argument("--gamma", default="-0.8,0.6,0.5,1.0,-0.8", help="selection coefficients")
    p.add_argument("--pred-idx", default="0,1,2", help="selection columns used for prediction")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inject", help="split a dataset and mask labels with its bias rule")
    add_data_args(p)
    p.add_argument("--out", default=None, help="CSV of the biased training split with an s column")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="train one method over several seeds")
    add_data_args(p)
    add_fit_args(p)
    p.add_argument("--method", choices=METHODS, default="biascorr")
    p.add_argument("--pool", choices=("test", "unlabeled"), default="test",
                   help="unbiased pool for biascorr_star")
    p.add_argument("--save-model", default=None, help="write the first seed's fitted model as JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="missingness ratio, s_bar and (synthetic only) the oracle biases")
    add_data_args(p)
    add_fit_args(p)
    p.add_argument("--oracle", action="store_true", help="require oracle-mode biases")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="sensitivity sweep over eta or s_bar")
    add_data_args(p)
    add_fit_args(p)
    p.add_argument("--axis", choices=("eta", "s_bar"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--methods", default="ssbias,greene,biascorr")
    p.add_argument("--pool", choices=("test", "unlabeled"), default="test")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a saved model on the test split")
    add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataLoadError, OptimizationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if args.command in ("train", "sweep") and not all(r.converged for r in result):
        print("warning: at least one fit hit max_iters before the stopping rule fired", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
