"""Dataset ingestion, MNAR bias injection and the synthetic generator.

A dataset is described by a JSON schema naming the raw columns, how each
feature is encoded, which encoded columns feed the selection and the
prediction models, the target, and (optionally) the rule that decides
which training labels stay observed.
"""

from __future__ import annotations

import json
import math
import operator
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import special

from .greene import SelectionData

FEATURE_TYPES = ("continuous", "categorical", "binary", "ordinal")
COMPARATORS = {">": operator.gt, ">=": operator.ge, "<": operator.lt, "<=": operator.le}
_COMPARATOR_ALIASES = {"≥": ">=", "≤": "<=", "gt": ">", "ge": ">=", "lt": "<", "le": "<="}
VAR_FLOOR = 1e-12


class DataLoadError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    type: str
    levels: tuple | None = None
    positive: tuple | None = None  # values mapped to 1 for binary features

    def __post_init__(self):
        if self.type not in FEATURE_TYPES:
            raise ValueError(f"feature {self.name!r}: unknown type {self.type!r}")
        if self.type == "ordinal" and not self.levels:
            raise ValueError(f"ordinal feature {self.name!r} needs an ordered level list")
        if self.type == "binary" and not self.positive:
            raise ValueError(f"binary feature {self.name!r} needs its positive values")


@dataclass(frozen=True)
class BiasRule:
    """A training sample keeps its label iff ``feature <comparator> threshold``."""

    feature: str
    comparator: str
    threshold: float

    def __post_init__(self):
        comp = _COMPARATOR_ALIASES.get(self.comparator, self.comparator)
        if comp not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        object.__setattr__(self, "comparator", comp)

    def holds(self, values):
        return COMPARATORS[self.comparator](np.asarray(values, dtype=float), self.threshold)

    def to_dict(self):
        return {"feature": self.feature, "comparator": self.comparator, "threshold": self.threshold}


@dataclass
class DatasetSchema:
    name: str
    features: list
    selection: list
    prediction: list
    target_column: str
    target_positive: tuple
    columns: list | None = None  # raw column names for headerless files
    header: bool = True
    sep: str = ","
    na_values: tuple = ("?",)
    comment: str | None = None
    intercept: bool = True
    standardize: bool = True
    preprocess: str | None = None
    bias_rule: BiasRule | None = None
    selection_column: str | None = None  # pre-masked files (e.g. synthetic)
    truth_columns: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names in schema")
        missing = set(self.prediction) - set(self.selection)
        if missing:
            raise ValueError(f"prediction features must also be selection features: {sorted(missing)}")
        if self.bias_rule is not None and self.bias_rule.feature not in names:
            raise ValueError(f"bias rule feature {self.bias_rule.feature!r} is not a schema feature")

    def feature(self, name):
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    @classmethod
    def from_dict(cls, d):
        feats = [FeatureSpec(f["name"], f["type"],
                             tuple(f["levels"]) if f.get("levels") is not None else None,
                             tuple(f["positive"]) if f.get("positive") is not None else None)
                 for f in d["features"]]
        rule = d.get("bias_rule")
        rule = BiasRule(rule["feature"], rule["comparator"], float(rule["threshold"])) if rule else None
        target = d["target"]
        return cls(
            name=d.get("name", "dataset"), features=feats,
            selection=list(d["selection"]), prediction=list(d["prediction"]),
            target_column=target["column"], target_positive=tuple(target["positive"]),
            columns=d.get("columns"), header=d.get("header", True), sep=d.get("sep", ","),
            na_values=tuple(d.get("na_values", ("?",))), comment=d.get("comment"),
            intercept=d.get("intercept", True), standardize=d.get("standardize", True),
            preprocess=d.get("preprocess"), bias_rule=rule,
            selection_column=d.get("selection_column"), truth_columns=d.get("truth_columns", {}))

    def to_dict(self):
        out = {
            "name": self.name,
            "features": [{k: v for k, v in (("name", f.name), ("type", f.type),
                                            ("levels", list(f.levels) if f.levels else None),
                                            ("positive", list(f.positive) if f.positive else None))
                          if v is not None} for f in self.features],
            "selection": self.selection, "prediction": self.prediction,
            "target": {"column": self.target_column, "positive": list(self.target_positive)},
            "header": self.header, "sep": self.sep, "na_values": list(self.na_values),
            "intercept": self.intercept, "standardize": self.standardize,
        }
        for key in ("columns", "comment", "preprocess", "selection_column"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.bias_rule is not None:
            out["bias_rule"] = self.bias_rule.to_dict()
        if self.truth_columns:
            out["truth_columns"] = self.truth_columns
        return out


def load_schema(path_or_name):
    """Load a schema from a JSON file, or a bundled one by name (adult, german, drug)."""
    p = Path(path_or_name)
    if p.suffix != ".json" and not p.exists():
        text = resources.files("mnar_robust.schemas").joinpath(f"{path_or_name}.json").read_text()
    else:
        text = p.read_text()
    return DatasetSchema.from_dict(json.loads(text))


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    mask: np.ndarray

    @classmethod
    def fit(cls, X, mask):
        X = np.asarray(X, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        mean = np.where(mask, X.mean(axis=0), 0.0)
        var = X.var(axis=0)
        scale = np.where(mask, np.sqrt(np.maximum(var, VAR_FLOOR)), 1.0)
        return cls(mean, scale, mask)

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=float) * self.scale + self.mean


@dataclass
class GroundTruth:
    """Latent quantities of a synthetic draw (one entry per sample)."""

    eps: np.ndarray
    v: np.ndarray
    u_sel: np.ndarray
    p_s: np.ndarray  # P(s=1 | x_sel)
    p_y1: np.ndarray  # P(y=1 | x_pred), noise integrated out
    f_y: np.ndarray  # P(Y = y_i | x_pred) at the realized label


@dataclass
class Dataset:
    """Encoded dataset. ``X`` holds every encoded column; ``sel_idx`` and
    ``pred_idx`` index the selection and prediction columns of ``X``.

    ``s`` is the observed-label indicator (None before bias injection) and
    ``raw`` keeps the decoded raw columns that bias rules are evaluated on.
    """

    X: np.ndarray
    columns: list
    y: np.ndarray
    sel_idx: np.ndarray
    pred_idx: np.ndarray
    continuous: np.ndarray
    raw: pd.DataFrame | None = None
    s: np.ndarray | None = None
    truth: GroundTruth | None = None
    standardizer: Standardizer | None = None
    name: str = "dataset"

    @property
    def n(self):
        return self.X.shape[0]

    def __len__(self):
        return self.n

    @property
    def x_sel(self):
        return self.X[:, self.sel_idx]

    @property
    def x_pred(self):
        return self.X[:, self.pred_idx]

    @property
    def pred_in_sel(self):
        """Positions of the prediction columns inside the selection block."""
        where = {c: i for i, c in enumerate(self.sel_idx)}
        return np.array([where[c] for c in self.pred_idx], dtype=int)

    def take(self, idx):
        idx = np.asarray(idx)
        truth = None
        if self.truth is not None:
            truth = GroundTruth(*(getattr(self.truth, k)[idx] for k in
                                  ("eps", "v", "u_sel", "p_s", "p_y1", "f_y")))
        return replace(self, X=self.X[idx], y=self.y[idx],
                       raw=None if self.raw is None else self.raw.iloc[idx].reset_index(drop=True),
                       s=None if self.s is None else self.s[idx], truth=truth)

    def with_selection(self, s):
        return replace(self, s=np.asarray(s, dtype=float))

    @property
    def labeled(self):
        if self.s is None:
            raise ValueError("no selection mask; inject bias first")
        return self.s == 1

    def to_selection_data(self):
        """Greene input: labels visible only where s = 1."""
        s = np.ones(self.n) if self.s is None else self.s
        y = np.where(s == 1, self.y.astype(float), np.nan)
        return SelectionData(self.x_sel, self.pred_in_sel, y, s)

    def to_frame(self):
        df = pd.DataFrame(self.X, columns=self.columns)
        df["y"] = self.y
        if self.s is not None:
            df["s"] = self.s.astype(int)
        return df


# --- loading -----------------------------------------------------------------

def _read_raw(paths, schema):
    if isinstance(paths, (str, Path)):
        paths = [paths]
    frames = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise DataLoadError(f"{p}: file not found")
        try:
            df = pd.read_csv(p, sep=schema.sep, header=0 if schema.header else None,
                             names=None if schema.header else schema.columns,
                             na_values=list(schema.na_values), skipinitialspace=True,
                             comment=schema.comment, dtype=str, keep_default_na=False)
        except pd.errors.EmptyDataError as exc:
            raise DataLoadError(f"{p}: empty file") from exc
        except pd.errors.ParserError as exc:
            raise DataLoadError(f"{p}: {exc}") from exc
        if df.empty:
            raise DataLoadError(f"{p}: empty file")
        df = df.apply(lambda col: col.str.strip())
        df = df.replace(list(schema.na_values), np.nan)
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def preprocess_adult(raw):
    """Adult clean-up: drop incomplete rows, binarize marital status,
    collapse rare countries, drop the final-weight and race columns."""
    need = {"workclass", "marital-status", "native-country", "income", "fnlwgt", "race"}
    missing = need - set(raw.columns)
    if missing:
        raise DataLoadError(f"not an Adult file; missing columns {sorted(missing)}")
    df = raw.dropna().reset_index(drop=True).copy()
    df["income"] = df["income"].str.rstrip(".")
    df["marital-status"] = np.where(df["marital-status"].str.startswith("Married"), "married", "not-married")
    counts = df["native-country"].value_counts()
    rare = counts[counts <= 150].index
    df.loc[df["native-country"].isin(rare), "native-country"] = "Other"
    return df.drop(columns=["fnlwgt", "race"])


PREPROCESSORS = {"adult": preprocess_adult}


def _parse_numeric(col, name):
    values = pd.to_numeric(col, errors="coerce")
    bad = values.isna() & col.notna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataLoadError(f"row {row}, column {name!r}: cannot parse {col.iloc[row]!r} as a number")
    if values.isna().any():
        row = int(np.flatnonzero(values.isna().to_numpy())[0])
        raise DataLoadError(f"row {row}, column {name!r}: missing value")
    # to_numeric's fast parser can be off by an ulp; astype parses exactly
    return col.astype(float).to_numpy()


def _decode(raw, spec):
    """Numeric value of a raw feature used by bias rules (ordinal -> level index)."""
    col = raw[spec.name]
    if spec.type == "ordinal":
        pos = {lvl: i for i, lvl in enumerate(spec.levels)}
        out = col.map(pos)
        if out.isna().any():
            row = int(np.flatnonzero(out.isna().to_numpy())[0])
            raise DataLoadError(f"row {row}, column {spec.name!r}: unknown level {col.iloc[row]!r}")
        return out.to_numpy(dtype=float)
    if spec.type == "binary":
        return col.isin(spec.positive).to_numpy(dtype=float)
    if spec.type == "continuous":
        return _parse_numeric(col, spec.name)
    raise DataLoadError(f"categorical feature {spec.name!r} has no numeric value")


def _resolve(entries, columns):
    out = []
    for e in entries:
        if e in columns:
            out.append(columns.index(e))
            continue
        group = [i for i, c in enumerate(columns) if c.startswith(e + "_")]
        if not group:
            raise DataLoadError(f"schema refers to unknown feature {e!r}")
        out.extend(group)
    return out


def encode(raw, schema):
    """Encode raw columns into a Dataset (not standardized)."""
    missing = [f.name for f in schema.features if f.name not in raw.columns]
    if schema.target_column not in raw.columns:
        missing.append(schema.target_column)
    if missing:
        raise DataLoadError(f"missing columns {missing}")
    n = len(raw)
    blocks, names, cont = [], [], []
    if schema.intercept:
        blocks.append(np.ones((n, 1)))
        names.append("const")
        cont.append(False)
    for spec in schema.features:
        if spec.type == "categorical":
            col = raw[spec.name]
            if col.isna().any():
                row = int(np.flatnonzero(col.isna().to_numpy())[0])
                raise DataLoadError(f"row {row}, column {spec.name!r}: missing value")
            levels = spec.levels or tuple(sorted(col.unique()))
            for lvl in levels:
                blocks.append((col == lvl).to_numpy(dtype=float)[:, None])
                names.append(f"{spec.name}_{lvl}")
                cont.append(False)
        else:
            blocks.append(_decode(raw, spec)[:, None])
            names.append(spec.name)
            cont.append(spec.type in ("continuous", "ordinal"))
    X = np.hstack(blocks) if blocks else np.zeros((n, 0))
    sel = _resolve(schema.selection, names)
    pred = _resolve(schema.prediction, names)
    if schema.intercept:
        sel = [0] + [i for i in sel if i != 0]
        pred = [0] + [i for i in pred if i != 0]
    if not set(pred) <= set(sel):
        raise DataLoadError("prediction features must be a subset of selection features")
    y = raw[schema.target_column].isin(schema.target_positive).to_numpy(dtype=int)
    s = None
    if schema.selection_column:
        s = _parse_numeric(raw[schema.selection_column], schema.selection_column)
    truth = None
    if schema.truth_columns:
        tc = schema.truth_columns
        p_s = _parse_numeric(raw[tc["p_s"]], tc["p_s"])
        p_y1 = _parse_numeric(raw[tc["p_y1"]], tc["p_y1"])
        nan = np.full(n, np.nan)
        truth = GroundTruth(nan, nan, nan, p_s, p_y1, np.where(y == 1, p_y1, 1.0 - p_y1))
    return Dataset(X, names, y, np.array(sel), np.array(pred), np.array(cont), raw=raw.reset_index(drop=True),
                   s=s, truth=truth, name=schema.name)


def load_csv_dataset(paths, schema):
    """Read one or more CSV files (concatenated in order) and encode them.

    Continuous features stay in raw units here; ``train_test_split``
    standardizes with training statistics.
    """
    raw = _read_raw(paths, schema)
    if schema.preprocess:
        raw = PREPROCESSORS[schema.preprocess](raw)
    return encode(raw, schema)


def standardize(dataset, standardizer=None):
    st = standardizer or Standardizer.fit(dataset.X, dataset.continuous)
    return replace(dataset, X=st.transform(dataset.X), standardizer=st)


def train_test_split(dataset, fraction=0.7, seed=0, shuffle=True, standardize_features=True):
    """Split into train/test; standardization statistics come from train only.

    With ``shuffle=False`` the first ``floor(fraction * n)`` rows form the
    training split.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = dataset.n
    n_train = int(math.floor(fraction * n + 1e-9))
    if n_train == 0 or n_train == n:
        raise ValueError(f"fraction {fraction} leaves an empty split for n={n}")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    train, test = dataset.take(order[:n_train]), dataset.take(order[n_train:])
    if standardize_features:
        st = Standardizer.fit(train.X, train.continuous)
        train, test = standardize(train, st), standardize(test, st)
    return train, test


# --- bias injection ------------------------------------------------------------

def rule_values(dataset, schema, feature):
    if dataset.raw is None:
        raise ValueError("dataset has no raw columns to evaluate a rule on")
    names = [f.name for f in schema.features]
    if feature not in names:
        if feature in dataset.columns:
            raise ValueError(f"bias rules apply to raw features, not encoded column {feature!r}")
        raise ValueError(f"unknown rule feature {feature!r}")
    return _decode(dataset.raw, schema.feature(feature))


def inject_mnar_bias(dataset, rule, schema):
    """Mask labels of samples that violate ``rule`` (evaluated on raw values)."""
    keep = rule.holds(rule_values(dataset, schema, rule.feature))
    return dataset.with_selection(keep.astype(float))


def missingness_ratio(dataset):
    """|D_u| / |D_tr|."""
    if dataset.n == 0:
        raise ValueError("empty dataset")
    s = np.ones(dataset.n) if dataset.s is None else dataset.s
    return float(np.mean(s != 1))


def rule_for_target_eta(dataset, rule, schema, eta):
    """Re-threshold ``rule`` so that the unlabeled fraction is as close to ``eta`` as possible."""
    vals = rule_values(dataset, schema, rule.feature)
    cands = np.unique(vals)
    # midpoints plus the extremes, so every achievable split is reachable
    thr = np.r_[cands[0] - 1.0, (cands[:-1] + cands[1:]) / 2.0, cands[-1] + 1.0]
    best, best_gap = None, math.inf
    for t in thr:
        r = BiasRule(rule.feature, rule.comparator, float(t))
        gap = abs(float(np.mean(~r.holds(vals))) - eta)
        if gap < best_gap - 1e-12:
            best, best_gap = r, gap
    if best_gap > 0.01:
        warnings.warn(f"target eta={eta} not achievable on {rule.feature!r}; closest gap {best_gap:.4f}",
                      stacklevel=2)
    return best


# --- synthetic generator --------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the bivariate-normal selection model.

    ``gamma`` has one entry per selection feature; ``pred_idx`` maps the
    prediction features into the selection features and ``beta`` has one
    entry per prediction feature. With ``intercept`` a constant column is
    prepended (index 0) and must be included in ``pred_idx``.
    """

    n: int
    beta: tuple
    gamma: tuple
    pred_idx: tuple
    sigma: float = 1.0
    rho: float = 0.6
    intercept: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if len(self.beta) != len(self.pred_idx):
            raise ValueError("beta needs one entry per prediction feature")
        if len(set(self.pred_idx)) != len(self.pred_idx) or any(
                not 0 <= i < len(self.gamma) for i in self.pred_idx):
            raise ValueError("pred_idx must index distinct selection features")
        if self.intercept and 0 not in self.pred_idx:
            raise ValueError("with an intercept, column 0 must be a prediction feature")

    def to_dict(self):
        return {"n": self.n, "beta": list(self.beta), "gamma": list(self.gamma),
                "pred_idx": list(self.pred_idx), "sigma": self.sigma, "rho": self.rho,
                "intercept": self.intercept, "seed": self.seed}


def outcome_prob(index, sigma, nodes=60):
    """P(y=1 | x) = E_eps[sigmoid(index + sigma eps)] by Gauss-Hermite."""
    t, w = np.polynomial.hermite.hermgauss(nodes)
    z = np.asarray(index, dtype=float)[..., None] + sigma * math.sqrt(2.0) * t
    return special.expit(z) @ w / math.sqrt(math.pi)


def generate_synthetic(spec):
    """Draw a dataset from the selection model; labels are masked where s = 0."""
    rng = np.random.default_rng(spec.seed)
    d = len(spec.gamma)
    n_free = d - 1 if spec.intercept else d
    X = rng.standard_normal((spec.n, n_free))
    if spec.intercept:
        X = np.hstack([np.ones((spec.n, 1)), X])
    eps = rng.standard_normal(spec.n)
    v = rng.standard_normal(spec.n)
    u_sel = spec.rho * eps + math.sqrt(1.0 - spec.rho ** 2) * v
    gamma = np.asarray(spec.gamma, dtype=float)
    beta = np.asarray(spec.beta, dtype=float)
    pred_idx = np.asarray(spec.pred_idx, dtype=int)
    sel_index = X @ gamma
    s = (sel_index + u_sel > 0).astype(float)
    pred_index = X[:, pred_idx] @ beta
    y = (rng.random(spec.n) < special.expit(pred_index + spec.sigma * eps)).astype(int)
    p_y1 = outcome_prob(pred_index, spec.sigma)
    truth = GroundTruth(eps, v, u_sel, special.ndtr(sel_index), p_y1, np.where(y == 1, p_y1, 1.0 - p_y1))
    cols = (["const"] if spec.intercept else []) + [f"x{i}" for i in range(1, n_free + 1)]
    cont = np.array([c != "const" for c in cols])
    raw = pd.DataFrame(X, columns=cols)
    return Dataset(X, cols, y, np.arange(d), pred_idx, cont, raw=raw, s=s, truth=truth, name="synthetic")


def synthetic_schema(dataset):
    """Schema that reloads a CSV written by ``write_dataset_csv`` for a synthetic set."""
    feats = [c for c in dataset.columns if c != "const"]
    pred = [dataset.columns[i] for i in dataset.pred_idx if dataset.columns[i] != "const"]
    return DatasetSchema(
        name="synthetic", features=[FeatureSpec(c, "continuous") for c in feats],
        selection=feats, prediction=pred, target_column="y", target_positive=("1",),
        intercept="const" in dataset.columns, standardize=False, selection_column="s",
        truth_columns={"p_s": "p_s", "p_y1": "p_y1"} if dataset.truth is not None else {})


def write_dataset_csv(dataset, path):
    df = dataset.to_frame()
    if "const" in df.columns:
        df = df.drop(columns=["const"])
    if dataset.truth is not None:
        df["p_s"] = dataset.truth.p_s
        df["p_y1"] = dataset.truth.p_y1
    df.to_csv(path, index=False, float_format="%.17g")
