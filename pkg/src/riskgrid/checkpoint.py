"""JSON checkpoints: architecture, weights, preprocessing and training metadata."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models as M
from .dataset import (CONTINUOUS, LABEL_COLUMN, Dataset, FeatureDef,
                      FeatureSchema, NormalizationStats, _impute_array,
                      _normalize_array, load_csv)
from .exceptions import CompatibilityError, ShapeError, UnsupportedModelError

FORMAT_VERSION = 1


def schema_from_dict(items: list[dict]) -> FeatureSchema:
    return FeatureSchema(tuple(FeatureDef(d["abbrev"], d["kind"])
                               for d in items))


@dataclass
class Checkpoint:
    """A trained model plus everything needed to feed it raw rows.

    ``schema`` and ``stats`` describe the full data file the model was
    trained from; ``feature_indices`` picks the model inputs out of it.
    """
    spec: M.ModelSpec
    params: dict[str, ad.Param]
    schema: FeatureSchema
    stats: NormalizationStats
    feature_indices: tuple[int, ...]
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        self.feature_indices = tuple(int(i) for i in self.feature_indices)
        if len(self.feature_indices) != M.input_dim(self.spec):
            raise ShapeError(
                f"model expects {M.input_dim(self.spec)} inputs, checkpoint "
                f"selects {len(self.feature_indices)} features")

    @property
    def model_kind(self) -> str:
        return M.model_kind(self.spec)

    @property
    def feature_names(self) -> list[str]:
        return [self.schema.names[i] for i in self.feature_indices]

    def check_schema(self, schema: FeatureSchema) -> None:
        if schema.fingerprint() != self.schema.fingerprint():
            raise CompatibilityError(
                "data columns do not match the schema the model was trained "
                f"on (fingerprint {schema.fingerprint()} vs "
                f"{self.schema.fingerprint()})")

    def read_csv(self, path) -> Dataset:
        """Load a data file, refusing one whose columns differ from training."""
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        if header and header != self.schema.names + [LABEL_COLUMN]:
            raise CompatibilityError(
                f"{path}: columns do not match the schema the model was "
                f"trained on (fingerprint {self.schema.fingerprint()})")
        return load_csv(path, self.schema)

    def inputs(self, ds: Dataset) -> np.ndarray:
        """Impute, normalize and select model inputs from raw rows."""
        self.check_schema(ds.schema)
        X = _impute_array(ds.X, self.schema.kinds, self.stats)
        X = _normalize_array(X, self.schema.kinds, self.stats)
        return X[:, list(self.feature_indices)]

    def baseline(self) -> np.ndarray:
        """Training mean/mode reference point in model-input space."""
        kinds = np.array(self.schema.kinds)
        raw = np.where(kinds == CONTINUOUS, self.stats.mean, self.stats.mode)
        x = _normalize_array(raw[None, :], self.schema.kinds, self.stats)[0]
        return x[list(self.feature_indices)]

    def logits(self, X) -> np.ndarray:
        return M.logits(self.spec, self.params, X).data

    def probabilities(self, X) -> np.ndarray:
        return ad.softmax(self.logits(X)).data

    def stroke_probability(self, X) -> np.ndarray:
        if not isinstance(self.spec, M.MMOESpec):
            raise UnsupportedModelError(
                f"{self.model_kind} has no stroke head")
        return M.mmoe_forward(self.spec, self.params, X)[0]

    def viz(self, X) -> np.ndarray:
        """``[n, 8]`` visualization-layer activations."""
        if isinstance(self.spec, M.BaseDNNSpec):
            return M.base_dnn_logits(self.spec, self.params, X).viz.data
        if isinstance(self.spec, M.QIDNNSpec) and self.spec.viz_layer:
            return M.qidnn_logits(self.spec, self.params, X).viz.data
        raise UnsupportedModelError(
            f"{self.model_kind} checkpoint has no visualization layer")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_kind": self.model_kind,
            "spec": M.spec_to_dict(self.spec),
            "schema": self.schema.to_dict(),
            "schema_fingerprint": self.schema.fingerprint(),
            "normalization_stats": self.stats.to_dict(),
            "feature_indices": list(self.feature_indices),
            "parameters": {k: p.data.ravel().tolist()
                           for k, p in self.params.items()},
            "training": self.training,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise CompatibilityError(
                f"unsupported checkpoint format version {version!r}")
        try:
            spec = M.spec_from_dict(d["model_kind"], d["spec"])
            schema = schema_from_dict(d["schema"])
            if schema.fingerprint() != d["schema_fingerprint"]:
                raise CompatibilityError("schema fingerprint does not match "
                                         "the stored schema")
            stats = NormalizationStats.from_dict(d["normalization_stats"])
            params = M.params_from_arrays(spec, d["parameters"])
            indices = d["feature_indices"]
        except (KeyError, TypeError) as exc:
            raise CompatibilityError(f"malformed checkpoint: {exc}") from None
        if any(a.size != len(schema) for a in (stats.mean, stats.std,
                                               stats.mode)):
            raise ShapeError("normalization stats do not cover the schema")
        return cls(spec, params, schema, stats, indices, d.get("training", {}))


def dumps(ckpt: Checkpoint) -> str:
    return json.dumps(ckpt.to_dict(), indent=1, sort_keys=True) + "\n"


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(dumps(ckpt), encoding="utf-8")


def load(path) -> Checkpoint:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CompatibilityError(f"{path}: not a JSON checkpoint ({exc})") \
            from None
    return Checkpoint.from_dict(d)


def from_estimator(est, schema: FeatureSchema, stats: NormalizationStats,
                   feature_indices=None, **training) -> Checkpoint:
    """Wrap a fitted network estimator."""
    if feature_indices is None:
        feature_indices = range(len(schema))
    meta = {"estimator": type(est).__name__, "params": _plain(est.get_params())}
    trace = getattr(est, "trace_", None)
    if trace is not None:
        meta.update(trace.to_dict())
    meta.update(training)
    return Checkpoint(est.spec_, est.params_, schema, stats,
                      tuple(feature_indices), meta)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
