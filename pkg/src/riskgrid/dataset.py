"""Feature schema, CSV I/O, preprocessing and the synthetic cohort generator."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import (ConfigurationError, DataError, ShapeError,
                         StratificationError)

CONTINUOUS, CATEGORICAL, BINARY = "continuous", "categorical", "binary"
RISK_STATES = ("low", "medium", "high", "attack")
ATTACK = 3
PAPER_CLASS_COUNTS = (7221, 5868, 5475, 1967)
LABEL_COLUMN = "risk_state"


@dataclass(frozen=True)
class FeatureDef:
    abbrev: str
    kind: str
    name: str = ""
    normal_range: tuple[float, float] | None = None
    units: str = ""
    categories: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL, BINARY):
            raise ConfigurationError(f"unknown feature kind {self.kind!r}")
        if self.normal_range is not None and self.kind != CONTINUOUS:
            raise ConfigurationError(
                f"{self.abbrev}: normal_range only allowed on continuous "
                "features")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureDef, ...]

    def __post_init__(self):
        names = [f.abbrev for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigurationError("feature abbreviations must be unique")

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    @property
    def names(self) -> list[str]:
        return [f.abbrev for f in self.features]

    @property
    def kinds(self) -> list[str]:
        return [f.kind for f in self.features]

    def index(self, abbrev: str) -> int:
        try:
            return self.names.index(abbrev)
        except ValueError:
            raise KeyError(f"no feature named {abbrev!r}") from None

    def indices(self, abbrevs: Iterable[str]) -> list[int]:
        return [self.index(a) for a in abbrevs]

    def subset(self, idx: Sequence[int]) -> "FeatureSchema":
        return FeatureSchema(tuple(self.features[i] for i in idx))

    def fingerprint(self) -> str:
        payload = json.dumps([[f.abbrev, f.kind] for f in self.features])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> list[dict]:
        return [{"abbrev": f.abbrev, "kind": f.kind} for f in self.features]


def _c(abbrev, name, lo=None, hi=None, units=""):
    rng = None if lo is None else (float(lo), float(hi))
    return FeatureDef(abbrev, CONTINUOUS, name, rng, units)


def _b(abbrev, name):
    return FeatureDef(abbrev, BINARY, name, categories=(0, 1))


def _k(abbrev, name, cats):
    return FeatureDef(abbrev, CATEGORICAL, name, categories=tuple(cats))


N_FILLERS = 11


def default_schema() -> FeatureSchema:
    """The 34-feature stroke screening schema.

    Clinical entries carry the documented normal ranges; ``F01``..``F11``
    are neutral standard-normal fillers.
    """
    clinical = [
        _b("Arhm", "arrhythmia"),
        _c("BMI", "body mass index", 20, 25, "kg/m2"),
        _k("Edu", "education", range(1, 6)),
        _b("Exs", "lack of exercise"),
        _c("FA", "filling age", units="years"),
        _c("FBG", "fasting blood glucose", 3.9, 6.1, "mmol/L"),
        _c("HbA1c", "glycosylated hemoglobin", 4, 6, "%"),
        _c("Hcy", "homocysteine", 5, 15, "umol/L"),
        _c("HDL-C", "high density lipoprotein cholesterol", 1.16, 1.55,
           "mmol/L"),
        _b("HEH", "history of hypertension"),
        _b("HS", "history of stroke"),
        _c("Ht", "height", units="cm"),
        _c("Wt", "weight", units="kg"),
        _c("LDBP", "left diastolic blood pressure", 60, 89, "mmHg"),
        _c("LDL-C", "low density lipoprotein cholesterol", 0, 3.37,
           "mmol/L"),
        _c("LSBP", "left systolic blood pressure", 80, 140, "mmHg"),
        _c("RSBP", "right systolic blood pressure", 80, 140, "mmHg"),
        _k("MV", "meat and vegetable", (1, 2, 3)),
        _b("Ret", "retired"),
        _k("Sm", "smoking", (0, 1, 2)),
        _c("TC", "total cholesterol", 3, 5.2, "mmol/L"),
        _c("TG", "triglyceride", 0.6, 1.7, "mmol/L"),
        _c("Ys", "years of smoking", units="years"),
    ]
    fillers = [_c(f"F{i:02d}", "neutral filler") for i in range(1, N_FILLERS + 1)]
    return FeatureSchema(tuple(clinical + fillers))


DEFAULT_QI_FEATURES = ("LSBP", "Exs", "Sm", "LDBP", "RSBP", "HbA1c", "HS")


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    mode: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "mode": self.mode.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(*(np.asarray(d[k], dtype=float)
                     for k in ("mean", "std", "mode")))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Row-major samples with four-state labels.

    ``X`` holds NaN for missing cells. ``stroke`` is derived from
    ``risk_state`` and never stored separately.
    """
    schema: FeatureSchema
    X: np.ndarray
    risk_state: np.ndarray
    sample_ids: np.ndarray = None
    stats: NormalizationStats | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.risk_state, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != len(self.schema):
            raise ShapeError(
                f"X has shape {X.shape}, schema has {len(self.schema)} "
                "features")
        if y.shape != (X.shape[0],):
            raise ShapeError("one risk_state per row required")
        if y.size and (y.min() < 0 or y.max() > ATTACK):
            raise DataError("risk_state outside 0..3")
        ids = (np.arange(X.shape[0]) if self.sample_ids is None
               else np.asarray(self.sample_ids, dtype=np.int64))
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "risk_state", _readonly(y))
        object.__setattr__(self, "sample_ids", _readonly(ids))

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def stroke(self) -> np.ndarray:
        return (self.risk_state == ATTACK).astype(np.int64)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return replace(self, X=self.X[rows], risk_state=self.risk_state[rows],
                       sample_ids=self.sample_ids[rows])

    def select_features(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        stats = self.stats
        if stats is not None:
            stats = NormalizationStats(stats.mean[idx], stats.std[idx],
                                       stats.mode[idx])
        return replace(self, schema=self.schema.subset(idx),
                       X=self.X[:, idx], stats=stats)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.risk_state, minlength=4)

    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.X)


# -- CSV ----------------------------------------------------------------------

def load_csv(path, schema: FeatureSchema | None = None) -> Dataset:
    schema = schema or default_schema()
    expected = schema.names + [LABEL_COLUMN]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", row=1) from None
        for pos, name in enumerate(header):
            if pos >= len(expected) or name != expected[pos]:
                raise DataError(f"unexpected column {name!r}",
                                row=1, column=name)
        if len(header) != len(expected):
            raise DataError(
                f"missing columns {expected[len(header):]}", row=1)
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(expected):
                raise DataError(f"expected {len(expected)} fields, "
                                f"got {len(rec)}", row=lineno)
            vals = []
            for name, cell in zip(schema.names, rec):
                cell = cell.strip()
                if cell == "":
                    vals.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"non-numeric value {cell!r}",
                                    row=lineno, column=name) from None
                if not math.isfinite(v):
                    raise DataError(f"non-finite value {cell!r}",
                                    row=lineno, column=name)
                vals.append(v)
            label = rec[-1].strip()
            if label not in ("0", "1", "2", "3"):
                raise DataError(f"risk_state must be 0..3, got {label!r}",
                                row=lineno, column=LABEL_COLUMN)
            rows.append(vals)
            labels.append(int(label))
    X = np.array(rows, dtype=float).reshape(len(rows), len(schema))
    return Dataset(schema, X, np.array(labels, dtype=np.int64))


def format_number(v: float) -> str:
    if math.isnan(v):
        return ""
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def csv_text(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ds.schema.names + [LABEL_COLUMN])
    for row, label in zip(ds.X, ds.risk_state):
        w.writerow([format_number(v) for v in row] + [int(label)])
    return buf.getvalue()


def write_csv(ds: Dataset, path) -> None:
    Path(path).write_text(csv_text(ds), encoding="utf-8")


# -- preprocessing ------------------------------------------------------------

def fit_stats(ds: Dataset) -> NormalizationStats:
    """Per-feature mean/std (continuous) and mode from non-missing cells."""
    return _fit_stats(ds.X, ds.schema.kinds, ds.schema.names)


def _fit_stats(X, kinds, names=None) -> NormalizationStats:
    p = X.shape[1]
    mean, std, mode = np.zeros(p), np.ones(p), np.zeros(p)
    for j in range(p):
        col = X[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            label = names[j] if names is not None else j
            raise ConfigurationError(
                f"feature {label!r} is entirely missing in the training data")
        mean[j] = col.mean()
        s = col.std()
        std[j] = s if s > 0 else 1.0
        vals, counts = np.unique(col, return_counts=True)
        mode[j] = vals[np.argmax(counts)]
    return NormalizationStats(mean, std, mode)


def infer_kinds(X, max_levels: int = 10) -> tuple[str, ...]:
    """Guess feature kinds for a bare matrix.

    Integer-valued columns with at most ``max_levels`` distinct values are
    treated as categorical (binary when the levels are a subset of {0, 1}).
    """
    X = np.asarray(X, dtype=float)
    kinds = []
    for j in range(X.shape[1]):
        col = X[:, j][~np.isnan(X[:, j])]
        levels = np.unique(col)
        if levels.size <= max_levels and np.all(levels == np.round(levels)):
            kinds.append(BINARY if set(levels) <= {0.0, 1.0} else CATEGORICAL)
        else:
            kinds.append(CONTINUOUS)
    return tuple(kinds)


def reference_point(X, kinds=None) -> np.ndarray:
    """Column means for continuous features and modes for the rest.

    This is the baseline that stands in for absent features in
    explanations.
    """
    X = np.asarray(X, dtype=float)
    kinds = infer_kinds(X) if kinds is None else tuple(kinds)
    if len(kinds) != X.shape[1]:
        raise ShapeError(f"{len(kinds)} kinds for {X.shape[1]} columns")
    stats = _fit_stats(X, kinds)
    return np.where(np.array(kinds) == CONTINUOUS, stats.mean, stats.mode)


def _impute_array(X, kinds, stats) -> np.ndarray:
    X = np.array(X, dtype=float)
    fill = np.where(np.array(kinds) == CONTINUOUS, stats.mean, stats.mode)
    r, c = np.nonzero(np.isnan(X))
    X[r, c] = fill[c]
    return X


def _normalize_array(X, kinds, stats) -> np.ndarray:
    X = np.array(X, dtype=float)
    cont = np.array(kinds) == CONTINUOUS
    X[:, cont] = (X[:, cont] - stats.mean[cont]) / stats.std[cont]
    return X


def impute(ds: Dataset, stats: NormalizationStats | None = None) -> Dataset:
    """Fill missing continuous cells with the training mean, others with the mode."""
    stats = stats or ds.stats or fit_stats(ds)
    return replace(ds, X=_impute_array(ds.X, ds.schema.kinds, stats),
                   stats=stats)


def normalize(ds: Dataset, stats: NormalizationStats | None = None) -> Dataset:
    """Z-score continuous columns; categorical and binary keep raw codes."""
    stats = stats or ds.stats or fit_stats(ds)
    return replace(ds, X=_normalize_array(ds.X, ds.schema.kinds, stats),
                   stats=stats)


def prepare(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Fit stats on ``train`` and impute + normalize it and ``others``."""
    stats = fit_stats(train)
    return tuple(normalize(impute(d, stats), stats) for d in (train,) + others)


class Preprocessor(TransformerMixin, BaseEstimator):
    """Mean/mode imputation followed by z-scoring of continuous columns.

    Parameters
    ----------
    kinds : sequence of str, optional
        Per-column feature kind. Defaults to the 34-feature schema when the
        input has 34 columns, otherwise every column is continuous.
    """

    def __init__(self, kinds=None):
        self.kinds = kinds

    def fit(self, X, y=None):
        X = check_array(X, ensure_all_finite="allow-nan")
        kinds = self.kinds
        if kinds is None:
            kinds = (default_schema().kinds if X.shape[1] == 34
                     else [CONTINUOUS] * X.shape[1])
        if len(kinds) != X.shape[1]:
            raise ShapeError(f"{len(kinds)} kinds for {X.shape[1]} columns")
        self.kinds_ = list(kinds)
        self.stats_ = _fit_stats(X, self.kinds_)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        X = check_array(X, ensure_all_finite="allow-nan")
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(
                f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        X = _impute_array(X, self.kinds_, self.stats_)
        return _normalize_array(X, self.kinds_, self.stats_)


# -- splitting ----------------------------------------------------------------

def stratified_indices(labels, test_fraction: float, seed,
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class contributes round(f * n_c) rows."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        if rows.size < 2:
            raise StratificationError(
                f"class {int(c)} has {rows.size} sample(s); need at least 2")
        rows = rows[rng.permutation(rows.size)]
        k = int(np.floor(test_fraction * rows.size + 0.5))
        k = min(max(k, 1), rows.size - 1)
        test.append(rows[:k])
        train.append(rows[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split(ds: Dataset, test_fraction: float = 0.15, seed=0,
          ) -> tuple[Dataset, Dataset]:
    tr, te = stratified_indices(ds.risk_state, test_fraction, seed)
    return ds.take(tr), ds.take(te)


# -- synthetic cohort -----------------------------------------------------------

# name: (mean, sd) of the raw clinical scale
_CONTINUOUS_DIST = {
    "BMI": (24.0, 3.5), "FA": (58.0, 10.0), "FBG": (5.4, 1.2),
    "HbA1c": (5.6, 0.9), "Hcy": (12.0, 4.0), "HDL-C": (1.35, 0.3),
    "Ht": (163.0, 8.0), "Wt": (65.0, 11.0), "LDBP": (82.0, 11.0),
    "LDL-C": (2.9, 0.8), "LSBP": (135.0, 18.0), "TC": (4.8, 0.9),
    "TG": (1.6, 0.8),
}
_BINARY_P = {"Arhm": 0.08, "Exs": 0.45, "HEH": 0.35, "HS": 0.12, "Ret": 0.4}
_CATEGORICAL_P = {
    "Edu": ((1, 2, 3, 4, 5), (0.3, 0.3, 0.2, 0.15, 0.05)),
    "MV": ((1, 2, 3), (0.5, 0.25, 0.25)),
    "Sm": ((0, 1, 2), (0.6, 0.1, 0.3)),
}

CAUSAL_FEATURES = ("LSBP", "Exs", "Sm", "Wt", "TC")
_CAUSAL_WEIGHTS = (1.0, 1.2, 0.7, 0.8, 0.7)
DEFAULT_PAIRS = (("LSBP", "TC"), ("Wt", "LDBP"), ("HbA1c", "LDL-C"))
DEFAULT_PAIR_WEIGHTS = (1.0, 1.0, 1.2)


@dataclass(frozen=True)
class SynthConfig:
    """Planted-rule cohort configuration.

    The risk score is a fixed linear rule over :data:`CAUSAL_FEATURES`
    (continuous ones standardized, codes raw) plus
    ``interaction_strength`` times the pairwise products listed in
    ``pairs``. The last pair, together with an HbA1c main effect of weight
    ``attack_weight`` (also scaled by ``interaction_strength``), only
    enters the score that decides the attack state. Class sizes follow
    ``class_ratios`` exactly; ``noise`` is the fraction of rows whose
    labels are shuffled among themselves.
    """
    n: int = 20531
    class_ratios: tuple[float, ...] = PAPER_CLASS_COUNTS
    interaction_strength: float = 1.0
    noise: float = 0.02
    seed: int = 7
    pairs: tuple[tuple[str, str], ...] = DEFAULT_PAIRS
    pair_weights: tuple[float, ...] = DEFAULT_PAIR_WEIGHTS
    attack_pairs: int = 1
    attack_weight: float = 0.5

    def validate(self) -> None:
        if self.n < 40:
            raise ConfigurationError("n must be at least 40")
        if len(self.class_ratios) != 4 or min(self.class_ratios) <= 0:
            raise ConfigurationError("need four positive class ratios")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigurationError("noise must lie in [0, 1]")
        if self.interaction_strength < 0:
            raise ConfigurationError("interaction_strength must be >= 0")
        if len(self.pairs) != len(self.pair_weights):
            raise ConfigurationError("one weight per pair required")
        if not 0 <= self.attack_pairs <= len(self.pairs):
            raise ConfigurationError("attack_pairs out of range")


def class_sizes(n: int, ratios: Sequence[float]) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` rows to ``ratios``."""
    r = np.asarray(ratios, dtype=float)
    quota = n * r / r.sum()
    sizes = np.floor(quota).astype(np.int64)
    short = n - sizes.sum()
    order = np.argsort(-(quota - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes


def _standardized(schema: FeatureSchema, raw: np.ndarray, name: str):
    j = schema.index(name)
    if name in _CONTINUOUS_DIST:
        mu, sd = _CONTINUOUS_DIST[name]
        return (raw[:, j] - mu) / sd
    if name == "RSBP":
        mu, sd = _CONTINUOUS_DIST["LSBP"]
        return (raw[:, j] - mu) / sd
    return np.nan_to_num(raw[:, j])


def planted_scores(raw: np.ndarray, config: SynthConfig,
                   schema: FeatureSchema | None = None,
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(risk_score, attack_score)`` for raw generator rows."""
    schema = schema or default_schema()
    z = {name: _standardized(schema, raw, name)
         for name in set(CAUSAL_FEATURES).union(*config.pairs, {"HbA1c"})}
    risk = sum(w * z[f] for f, w in zip(CAUSAL_FEATURES, _CAUSAL_WEIGHTS))
    s = config.interaction_strength
    n_risk = len(config.pairs) - config.attack_pairs
    attack = np.zeros_like(risk)
    for k, ((a, b), w) in enumerate(zip(config.pairs, config.pair_weights)):
        term = s * w * z[a] * z[b]
        if k < n_risk:
            risk = risk + term
        else:
            attack = attack + term
    attack = attack + s * config.attack_weight * z["HbA1c"]
    return risk, risk + attack


def _raw_features(schema: FeatureSchema, n: int, rng) -> np.ndarray:
    raw = np.empty((n, len(schema)))
    for j, f in enumerate(schema):
        if f.abbrev in _CONTINUOUS_DIST:
            mu, sd = _CONTINUOUS_DIST[f.abbrev]
            raw[:, j] = rng.normal(mu, sd, n)
        elif f.abbrev in _BINARY_P:
            raw[:, j] = rng.random(n) < _BINARY_P[f.abbrev]
        elif f.abbrev in _CATEGORICAL_P:
            cats, p = _CATEGORICAL_P[f.abbrev]
            raw[:, j] = rng.choice(cats, size=n, p=p)
        elif f.abbrev in ("RSBP", "Ys"):
            continue
        else:
            raw[:, j] = rng.standard_normal(n)
    lsbp = schema.index("LSBP")
    raw[:, schema.index("RSBP")] = raw[:, lsbp] + rng.normal(0.0, 6.0, n)
    years = np.clip(rng.normal(20.0, 10.0, n), 1.0, None).round()
    smoker = raw[:, schema.index("Sm")] > 0
    raw[:, schema.index("Ys")] = np.where(smoker, years, np.nan)
    # physical measurements reported at clinical precision
    for name in ("BMI", "FBG", "HbA1c", "HDL-C", "LDL-C", "TC", "TG"):
        raw[:, schema.index(name)] = raw[:, schema.index(name)].round(2)
    for name in ("LSBP", "RSBP", "LDBP", "Ht", "Wt", "FA", "Hcy"):
        raw[:, schema.index(name)] = raw[:, schema.index(name)].round(1)
    return raw


def synth(config: SynthConfig | None = None) -> Dataset:
    """Generate a cohort whose labels follow the planted scoring rule."""
    config = config or SynthConfig()
    config.validate()
    schema = default_schema()
    rng = np.random.default_rng(config.seed)
    raw = _raw_features(schema, config.n, rng)
    risk, attack_score = planted_scores(raw, config, schema)

    sizes = class_sizes(config.n, config.class_ratios)
    labels = np.empty(config.n, dtype=np.int64)
    # attack: the top rows by attack score; the rest ranked by risk score
    by_attack = np.argsort(-attack_score, kind="stable")
    attack_rows = by_attack[:sizes[ATTACK]]
    labels[attack_rows] = ATTACK
    rest = by_attack[sizes[ATTACK]:]
    rest = rest[np.argsort(risk[rest], kind="stable")]
    bounds = np.cumsum(sizes[:3])
    for c, chunk in enumerate(np.split(rest, bounds[:-1])):
        labels[chunk] = c

    n_noisy = int(round(config.noise * config.n))
    if n_noisy:
        rows = rng.choice(config.n, size=n_noisy, replace=False)
        labels[rows] = labels[rows][rng.permutation(n_noisy)]
    return Dataset(schema, raw, labels)
