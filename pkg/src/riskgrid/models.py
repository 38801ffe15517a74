"""BaseDNN, QIDNN and MMOE as pure functions of (spec, params, X).

Every forward runs on the autodiff primitives, so the same code serves
training (inside a :class:`~riskgrid.autodiff.Tape`) and inference.
Inputs are 2-D ``[batch, features]`` arrays of imputed, normalized values.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .dataset import DEFAULT_QI_FEATURES, default_schema
from .exceptions import ConfigurationError, ShapeError

Params = Mapping[str, ad.Param]


# -- specs ----------------------------------------------------------------------

@dataclass(frozen=True)
class BaseDNNSpec:
    input_dim: int = 34
    hidden_dim: int = 17
    viz_dim: int = 8
    num_classes: int = 4

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ConfigurationError("input_dim and hidden_dim must be >= 1")
        if self.viz_dim % 2 or self.num_classes != self.viz_dim // 2:
            raise ConfigurationError(
                "viz_dim must be even with two coordinates per class")


@dataclass(frozen=True)
class QISpec:
    """Order-2 interaction block over ``selected`` input columns.

    ``pairs`` optionally restricts the interactions to specific column
    pairs (input indices, each inside ``selected``). Without it every pair
    of selected columns interacts. ``mode="summed"`` yields one scalar,
    ``"per_pair"`` one unit per pair.
    """
    selected: tuple[int, ...] = field(default_factory=lambda: tuple(
        default_schema().indices(DEFAULT_QI_FEATURES)))
    latent_len: int = 4
    mode: str = "summed"
    pairs: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(int(i) for i in self.selected))
        if self.pairs is not None:
            object.__setattr__(self, "pairs", tuple(
                (int(a), int(b)) for a, b in self.pairs))
        if len(self.selected) < 2:
            raise ConfigurationError("the QI block needs at least 2 features")
        if len(set(self.selected)) != len(self.selected):
            raise ConfigurationError("selected QI features must be distinct")
        if self.latent_len < 1:
            raise ConfigurationError("latent_len must be >= 1")
        if self.mode not in ("summed", "per_pair"):
            raise ConfigurationError(f"unknown QI mode {self.mode!r}")
        if self.pairs is not None:
            if not self.pairs:
                raise ConfigurationError("pairs must not be empty")
            for a, b in self.pairs:
                if a == b or a not in self.selected or b not in self.selected:
                    raise ConfigurationError(f"invalid QI pair {(a, b)}")

    @classmethod
    def from_pairs(cls, pairs, latent_len: int = 4,
                   mode: str = "summed") -> "QISpec":
        pairs = tuple((int(a), int(b)) for a, b in pairs)
        selected = tuple(sorted({i for p in pairs for i in p}))
        return cls(selected, latent_len, mode, pairs)

    @property
    def n(self) -> int:
        return len(self.selected)

    def local_pairs(self) -> list[tuple[int, int]]:
        """Pairs as positions into ``selected``."""
        if self.pairs is None:
            return list(combinations(range(self.n), 2))
        pos = {f: i for i, f in enumerate(self.selected)}
        return [(pos[a], pos[b]) for a, b in self.pairs]

    @property
    def out_dim(self) -> int:
        return 1 if self.mode == "summed" else len(self.local_pairs())


@dataclass(frozen=True)
class QIDNNSpec:
    trunk: BaseDNNSpec = field(default_factory=BaseDNNSpec)
    qi: QISpec = field(default_factory=QISpec)
    viz_layer: bool = True

    def __post_init__(self):
        if max(self.qi.selected) >= self.trunk.input_dim:
            raise ConfigurationError("QI feature index beyond input_dim")


@dataclass(frozen=True)
class MMOESpec:
    """Two-objective mixture of experts with the towers removed.

    ``experts`` lists expert kinds: ``"mlp"`` (one hidden ReLU layer) or
    ``"qidnn"`` (deep trunk plus QI block, projected). Every expert must
    emit a representation of the same width.
    """
    input_dim: int = 20
    experts: tuple[str, ...] = ("mlp", "qidnn")
    expert_widths: tuple[int, ...] = (11, 11)
    trunk_hidden: int = 17
    qi: QISpec = field(default_factory=lambda: QISpec.from_pairs(
        [(0, 1), (0, 2), (1, 2)]))
    viz_layer: bool = True
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "expert_widths", tuple(self.expert_widths))
        if len(self.experts) < 1 or len(self.experts) != len(self.expert_widths):
            raise ConfigurationError("one width per expert required")
        if len(set(self.expert_widths)) != 1:
            raise ConfigurationError(
                f"expert representations must share a width, got "
                f"{self.expert_widths}")
        for kind in self.experts:
            if kind not in ("mlp", "qidnn"):
                raise ConfigurationError(f"unknown expert kind {kind!r}")
        if max(self.qi.selected) >= self.input_dim:
            raise ConfigurationError("QI feature index beyond input_dim")

    @property
    def width(self) -> int:
        return self.expert_widths[0]

    @property
    def num_gates(self) -> int:
        return 2

    def trunk(self) -> BaseDNNSpec:
        return BaseDNNSpec(self.input_dim, self.trunk_hidden, 2 * self.num_classes,
                           self.num_classes)


ModelSpec = BaseDNNSpec | QIDNNSpec | MMOESpec

MODEL_KINDS = {BaseDNNSpec: "base-dnn", QIDNNSpec: "qidnn", MMOESpec: "mmoe"}


def model_kind(spec: ModelSpec) -> str:
    return MODEL_KINDS[type(spec)]


def spec_to_dict(spec: ModelSpec) -> dict:
    return asdict(spec)


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def spec_from_dict(kind: str, d: dict) -> ModelSpec:
    if kind == "base-dnn":
        return BaseDNNSpec(**d)
    qi = d["qi"]
    qi = QISpec(tuple(qi["selected"]), qi["latent_len"], qi["mode"],
                _tuplify(qi["pairs"]) if qi.get("pairs") is not None else None)
    if kind == "qidnn":
        return QIDNNSpec(BaseDNNSpec(**d["trunk"]), qi, d["viz_layer"])
    if kind == "mmoe":
        rest = {k: _tuplify(v) for k, v in d.items() if k != "qi"}
        return MMOESpec(qi=qi, **rest)
    raise ConfigurationError(f"unknown model kind {kind!r}")


# -- parameter shapes and init ------------------------------------------------------

def _trunk_shapes(prefix: str, t: BaseDNNSpec, viz: bool) -> dict:
    shapes = {f"{prefix}W1": (t.input_dim, t.hidden_dim),
              f"{prefix}b1": (t.hidden_dim,)}
    last = t.hidden_dim
    if viz:
        shapes[f"{prefix}Wv"] = (t.hidden_dim, t.viz_dim)
        shapes[f"{prefix}bv"] = (t.viz_dim,)
        last = t.viz_dim
    shapes[f"{prefix}Wo"] = (last, t.num_classes)
    shapes[f"{prefix}bo"] = (t.num_classes,)
    return shapes


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map implied by ``spec``."""
    if isinstance(spec, BaseDNNSpec):
        return _trunk_shapes("", spec, True)
    if isinstance(spec, QIDNNSpec):
        shapes = _trunk_shapes("", spec.trunk, spec.viz_layer)
        shapes["V"] = (spec.qi.n, spec.qi.latent_len)
        shapes["Wf"] = (spec.trunk.num_classes + spec.qi.out_dim,
                        spec.trunk.num_classes)
        shapes["bf"] = (spec.trunk.num_classes,)
        return shapes
    if isinstance(spec, MMOESpec):
        shapes = {}
        for e, (kind, w) in enumerate(zip(spec.experts, spec.expert_widths)):
            p = f"e{e}_"
            if kind == "mlp":
                shapes[p + "W1"] = (spec.input_dim, w)
                shapes[p + "b1"] = (w,)
            else:
                t = spec.trunk()
                shapes.update(_trunk_shapes(p, t, spec.viz_layer))
                shapes[p + "V"] = (spec.qi.n, spec.qi.latent_len)
                shapes[p + "Wp"] = (t.num_classes + spec.qi.out_dim, w)
                shapes[p + "bp"] = (w,)
        n_exp = len(spec.experts)
        for g in range(spec.num_gates):
            shapes[f"g{g}_W"] = (spec.input_dim, n_exp)
            shapes[f"g{g}_b"] = (n_exp,)
        shapes["h0_W"] = (spec.width, 1)
        shapes["h0_b"] = (1,)
        shapes["h1_W"] = (spec.width, spec.num_classes)
        shapes["h1_b"] = (spec.num_classes,)
        return shapes
    raise TypeError(f"not a model spec: {spec!r}")


def count_params(spec: ModelSpec) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


OUTPUT_LAYERS = {"Wo", "bo", "Wf", "bf", "h0_W", "h0_b", "h1_W", "h1_b"}


def output_layer_names(spec: ModelSpec) -> set[str]:
    names = set(param_shapes(spec))
    if isinstance(spec, QIDNNSpec):
        return names & {"Wf", "bf"}
    return names & OUTPUT_LAYERS


def init_params(spec: ModelSpec, seed=0, zero_output: bool = False,
                ) -> dict[str, ad.Param]:
    """Glorot-uniform weights, zero biases; fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    zero = output_layer_names(spec) if zero_output else set()
    params = {}
    for name, shape in param_shapes(spec).items():
        if len(shape) == 1 or name in zero:
            value = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, shape)
        params[name] = ad.Param(value, name)
    return params


def params_from_arrays(spec: ModelSpec, arrays: Mapping[str, np.ndarray],
                       ) -> dict[str, ad.Param]:
    shapes = param_shapes(spec)
    missing = set(shapes) - set(arrays)
    extra = set(arrays) - set(shapes)
    if missing or extra:
        raise ShapeError(f"parameter names differ: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    out = {}
    for name, shape in shapes.items():
        a = np.asarray(arrays[name], dtype=float)
        if a.size != int(np.prod(shape)):
            raise ShapeError(f"{name}: expected {shape}, got {a.size} values")
        out[name] = ad.Param(a.reshape(shape), name)
    return out


# -- forward passes -------------------------------------------------------------------

def _check_input(X, dim: int) -> ad.Tensor:
    X = ad.as_tensor(X)
    if X.data.ndim == 1:
        X = ad.Tensor(X.data[None, :])
    if X.data.ndim != 2 or X.shape[1] != dim:
        raise ShapeError(f"expected inputs with {dim} features, got {X.shape}")
    return X


def dense(x, W, b):
    return ad.add_bias(ad.matmul(x, W), b)


class TrunkOutput(NamedTuple):
    logits: ad.Tensor
    viz: ad.Tensor | None


def _trunk(params: Params, prefix: str, X, viz: bool) -> TrunkOutput:
    h = ad.relu(dense(X, params[prefix + "W1"], params[prefix + "b1"]))
    v = None
    if viz:
        v = ad.relu(dense(h, params[prefix + "Wv"], params[prefix + "bv"]))
        h = v
    return TrunkOutput(dense(h, params[prefix + "Wo"], params[prefix + "bo"]), v)


def base_dnn_logits(spec: BaseDNNSpec, params: Params, X) -> TrunkOutput:
    """x -> hidden (ReLU) -> 2x4 viz layer (ReLU) -> class logits."""
    X = _check_input(X, spec.input_dim)
    return _trunk(params, "", X, True)


def base_dnn_forward(spec: BaseDNNSpec, params: Params, X) -> np.ndarray:
    return ad.softmax(base_dnn_logits(spec, params, X).logits).data


def viz_coordinates(viz: np.ndarray) -> np.ndarray:
    """``[m, 8]`` viz activations -> ``[m, 4, 2]`` per-class (x, y) points."""
    viz = np.asarray(viz)
    return viz.reshape(viz.shape[0], -1, 2)


def qi_forward(V, xsel, mode: str = "summed",
               pairs: list[tuple[int, int]] | None = None) -> ad.Tensor:
    """Order-2 interaction output for ``xsel[m, n]`` and latents ``V[n, k]``.

    ``summed`` over all pairs uses the linear-time identity
    ``0.5 * sum_l[(sum_i v_il x_i)^2 - sum_i v_il^2 x_i^2]`` and returns
    ``[m, 1]``. ``per_pair`` returns ``[m, n_pairs]`` with columns
    ``<V_i, V_j> x_i x_j``. An explicit ``pairs`` list restricts the terms.
    """
    V, xsel = ad.as_tensor(V), ad.as_tensor(xsel)
    if xsel.data.ndim == 1:
        xsel = ad.Tensor(xsel.data[None, :])
    if V.data.ndim != 2:
        raise ShapeError(f"latents must be 2-D, got {V.shape}")
    n = V.shape[0]
    if n < 2:
        raise ConfigurationError("the QI block needs at least 2 features")
    if xsel.shape[1] != n:
        raise ShapeError(f"latents {V.shape} do not fit inputs {xsel.shape}")
    if mode not in ("summed", "per_pair"):
        raise ConfigurationError(f"unknown QI mode {mode!r}")
    if mode == "summed" and pairs is None:
        xv = ad.matmul(xsel, V)
        x2v2 = ad.matmul(ad.square(xsel), ad.square(V))
        return ad.scale(ad.sum_cols(ad.sub(ad.square(xv), x2v2)), 0.5)
    if pairs is None:
        pairs = list(combinations(range(n), 2))
    left = [a for a, _ in pairs]
    right = [b for _, b in pairs]
    dots = ad.sum_cols(ad.mul(ad.take_rows(V, left), ad.take_rows(V, right)))
    prods = ad.mul(ad.take_cols(xsel, left), ad.take_cols(xsel, right))
    terms = ad.mul_rowvec(prods, ad.reshape(dots, (len(pairs),)))
    if mode == "summed":
        return ad.sum_cols(terms)
    return terms


def _qi(params: Params, key: str, qi: QISpec, X) -> ad.Tensor:
    xsel = ad.take_cols(X, list(qi.selected))
    pairs = None if qi.pairs is None else qi.local_pairs()
    return qi_forward(params[key], xsel, qi.mode, pairs)


def qidnn_logits(spec: QIDNNSpec, params: Params, X) -> TrunkOutput:
    """Deep logits concatenated with the QI output, then a final linear map."""
    X = _check_input(X, spec.trunk.input_dim)
    deep = _trunk(params, "", X, spec.viz_layer)
    q = _qi(params, "V", spec.qi, X)
    z = dense(ad.concat_cols([deep.logits, q]), params["Wf"], params["bf"])
    return TrunkOutput(z, deep.viz)


def qidnn_forward(spec: QIDNNSpec, params: Params, X) -> np.ndarray:
    return ad.softmax(qidnn_logits(spec, params, X).logits).data


class MMOEOutput(NamedTuple):
    stroke_logit: ad.Tensor    # [m, 1]
    risk_logits: ad.Tensor     # [m, num_classes]
    gates: list[ad.Tensor]     # per objective, [m, n_experts]
    experts: list[ad.Tensor]   # per expert, [m, width]


def _expert(spec: MMOESpec, params: Params, e: int, X) -> ad.Tensor:
    p = f"e{e}_"
    if spec.experts[e] == "mlp":
        return ad.relu(dense(X, params[p + "W1"], params[p + "b1"]))
    deep = _trunk(params, p, X, spec.viz_layer)
    q = _qi(params, p + "V", spec.qi, X)
    return ad.relu(dense(ad.concat_cols([deep.logits, q]),
                         params[p + "Wp"], params[p + "bp"]))


def mmoe_logits(spec: MMOESpec, params: Params, X,
                gate_override: np.ndarray | None = None) -> MMOEOutput:
    """Gated expert mixture fed straight to the two output layers.

    ``gate_override`` (shape ``[n_experts]``) pins every gate to fixed
    weights; it exists for degenerate-mixture checks.
    """
    X = _check_input(X, spec.input_dim)
    experts = [_expert(spec, params, e, X) for e in range(len(spec.experts))]
    gates, mixed = [], []
    for g in range(spec.num_gates):
        if gate_override is None:
            w = ad.softmax(dense(X, params[f"g{g}_W"], params[f"g{g}_b"]))
        else:
            w = ad.Tensor(np.tile(np.asarray(gate_override, float),
                                  (X.shape[0], 1)))
        gates.append(w)
        acc = None
        for e, f in enumerate(experts):
            term = ad.mul_colvec(f, ad.take_cols(w, [e]))
            acc = term if acc is None else ad.add(acc, term)
        mixed.append(acc)
    stroke = dense(mixed[0], params["h0_W"], params["h0_b"])
    risk = dense(mixed[1], params["h1_W"], params["h1_b"])
    return MMOEOutput(stroke, risk, gates, experts)


def mmoe_forward(spec: MMOESpec, params: Params, X,
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(p_stroke[m], probs_risk[m, 4])``."""
    out = mmoe_logits(spec, params, X)
    return (ad.sigmoid(out.stroke_logit).data[:, 0],
            ad.softmax(out.risk_logits).data)


def logits(spec: ModelSpec, params: Params, X) -> ad.Tensor:
    """Class logits of the four-state objective for any model kind."""
    if isinstance(spec, BaseDNNSpec):
        return base_dnn_logits(spec, params, X).logits
    if isinstance(spec, QIDNNSpec):
        return qidnn_logits(spec, params, X).logits
    return mmoe_logits(spec, params, X).risk_logits


def input_dim(spec: ModelSpec) -> int:
    if isinstance(spec, QIDNNSpec):
        return spec.trunk.input_dim
    return spec.input_dim
