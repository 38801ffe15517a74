"""Shapley attribution against a single-reference value function.

A coalition ``S`` is evaluated by feeding the model a hybrid row that
takes features in ``S`` from the sample and every other feature from the
baseline (training means/modes). All coalitions needed for one sample are
stacked into one batch, so a model is called once per sample.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from html import escape
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, ExplanationError

MAX_EXACT_FEATURES = 12
DEFAULT_PERMUTATIONS = 128

ModelFn = Callable[[np.ndarray], np.ndarray]


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("RISKGRID_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ValueFunction:
    """``v(S)`` = model output on the hybrid of sample and baseline.

    ``model`` maps ``[m, p]`` rows to ``[m]`` or ``[m, T]`` outputs.
    ``target`` picks one output column; ``None`` keeps all of them.
    """
    model: ModelFn
    baseline: np.ndarray
    target: int | None = None
    target_names: Sequence[str] | None = None

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=float).ravel()

    @property
    def p(self) -> int:
        return self.baseline.size

    def values(self, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
        """Outputs for every coalition row of ``masks`` -> ``[m, T]``."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.p:
            raise ExplanationError(
                f"sample has {x.size} features, baseline has {self.p}")
        out = np.asarray(self.model(np.where(masks, x, self.baseline)),
                         dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        if self.target is not None:
            out = out[:, [self.target]]
        return out

    def name_of(self, t: int) -> str:
        idx = t if self.target is None else self.target
        if self.target_names is not None:
            return str(self.target_names[idx])
        return str(idx)


@dataclass
class Explanation:
    """Additive attribution: ``prediction == base_value + phi.sum()``."""
    sample_id: int
    target: str
    base_value: float
    phi: np.ndarray
    prediction: float
    values: np.ndarray | None = None
    feature_names: Sequence[str] | None = None

    def names(self) -> list[str]:
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"x{j}" for j in range(self.phi.size)]

    def additivity_gap(self) -> float:
        return abs(self.prediction - self.base_value - float(self.phi.sum()))

    def to_dict(self) -> dict:
        vals = (self.values if self.values is not None
                else np.full(self.phi.size, np.nan))
        return {
            "sample_id": int(self.sample_id),
            "target": self.target,
            "base_value": float(self.base_value),
            "prediction": float(self.prediction),
            "phi": [{"feature": n, "value": _json_float(v), "phi": float(f)}
                    for n, v, f in zip(self.names(), vals, self.phi)],
        }


def _json_float(v):
    v = float(v)
    return None if math.isnan(v) else v


# -- estimators ----------------------------------------------------------------------

def _all_masks(p: int) -> np.ndarray:
    codes = np.arange(1 << p, dtype=np.int64)
    return ((codes[:, None] >> np.arange(p)) & 1).astype(bool)


def _shapley_weights(p: int) -> np.ndarray:
    """``w[s] = s! (p - s - 1)! / p!`` for coalition sizes ``0..p-1``."""
    return np.array([math.factorial(s) * math.factorial(p - s - 1)
                     / math.factorial(p) for s in range(p)])


def exact_phi(vf: ValueFunction, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Enumerate all ``2^p`` coalitions. Returns ``(phi[T, p], base[T], pred[T])``."""
    p = vf.p
    if p > MAX_EXACT_FEATURES:
        raise ExplanationError(
            f"exact enumeration is limited to {MAX_EXACT_FEATURES} features "
            f"(got {p}); use shapley_sampled instead")
    masks = _all_masks(p)
    v = vf.values(x, masks)
    sizes = masks.sum(axis=1)
    w = _shapley_weights(p)
    codes = np.arange(1 << p, dtype=np.int64)
    phi = np.empty((v.shape[1], p))
    for j in range(p):
        without = codes[(codes >> j) & 1 == 0]
        delta = v[without | (1 << j)] - v[without]
        phi[:, j] = w[sizes[without]] @ delta
    return phi, v[0], v[-1]


def sampled_phi(vf: ValueFunction, x, n_permutations: int = DEFAULT_PERMUTATIONS,
                seed=0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Antithetic permutation sampling; each permutation is paired with its reverse."""
    if n_permutations < 2 or n_permutations % 2:
        raise ConfigurationError("n_permutations must be an even number >= 2")
    p = vf.p
    rng = np.random.default_rng(seed)
    half = np.array([rng.permutation(p) for _ in range(n_permutations // 2)])
    perms = np.concatenate([half, half[:, ::-1]])
    # masks[r, k] marks the first k features of permutation r as present
    pos = np.argsort(perms, axis=1)
    steps = np.arange(p + 1)
    masks = pos[:, None, :] < steps[None, :, None]
    v = vf.values(x, masks.reshape(-1, p)).reshape(len(perms), p + 1, -1)
    marg = np.diff(v, axis=1)                      # [R, p, T] in perm order
    phi = np.zeros((v.shape[2], p))
    for r, perm in enumerate(perms):
        phi[:, perm] += marg[r].T
    phi /= len(perms)
    return phi, v[0, 0], v[0, -1]


def _to_explanations(vf, x, sample_id, phi, base, pred, feature_names):
    return [Explanation(sample_id, vf.name_of(t), float(base[t]), phi[t],
                        float(pred[t]), np.asarray(x, dtype=float).ravel(),
                        feature_names)
            for t in range(phi.shape[0])]


def shapley_exact(vf: ValueFunction, x, sample_id: int = 0,
                  feature_names=None) -> Explanation | list[Explanation]:
    """Exact Shapley values. One Explanation when ``vf.target`` is set, else a list."""
    exps = _to_explanations(vf, x, sample_id, *exact_phi(vf, x), feature_names)
    return exps[0] if vf.target is not None else exps


def shapley_sampled(vf: ValueFunction, x, n_permutations: int = DEFAULT_PERMUTATIONS,
                    seed=0, sample_id: int = 0, feature_names=None,
                    ) -> Explanation | list[Explanation]:
    exps = _to_explanations(vf, x, sample_id,
                            *sampled_phi(vf, x, n_permutations, seed),
                            feature_names)
    return exps[0] if vf.target is not None else exps


def explain_rows(vf: ValueFunction, X, method: str = "auto",
                 n_permutations: int = DEFAULT_PERMUTATIONS, seed=0,
                 n_jobs: int | None = None) -> np.ndarray:
    """Shapley values for every row of ``X`` -> ``phi[n, T, p]``.

    Row ``i`` uses permutation seed ``(seed, i)`` so results do not depend
    on thread scheduling.
    """
    X = np.asarray(X, dtype=float)
    if method == "auto":
        method = "exact" if vf.p <= MAX_EXACT_FEATURES else "sampled"
    if method not in ("exact", "sampled"):
        raise ConfigurationError(f"unknown method {method!r}")

    def one(i):
        if method == "exact":
            return exact_phi(vf, X[i])[0]
        return sampled_phi(vf, X[i], n_permutations, [seed, i])[0]

    n_jobs = n_jobs or thread_count()
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            return np.stack(list(pool.map(one, range(len(X)))))
    return np.stack([one(i) for i in range(len(X))])


# -- global importance ------------------------------------------------------------------

@dataclass
class FeatureImportance:
    """Mean |phi| per target and feature; ``total`` stacks the targets."""
    feature_names: list[str]
    target_names: list[str]
    per_target: np.ndarray      # [T, p]

    @property
    def total(self) -> np.ndarray:
        return self.per_target.sum(axis=0)

    def order(self, target: int | None = None) -> np.ndarray:
        score = self.total if target is None else self.per_target[target]
        return np.argsort(-score, kind="stable")

    def ranking(self, target: int | None = None) -> list[tuple[str, float]]:
        score = self.total if target is None else self.per_target[target]
        return [(self.feature_names[j], float(score[j]))
                for j in self.order(target)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "total"] + list(self.target_names))
        for j in self.order():
            w.writerow([self.feature_names[j], repr(float(self.total[j]))]
                       + [repr(float(v)) for v in self.per_target[:, j]])
        return buf.getvalue()


def _subsample(n: int, n_samples: int | None, seed) -> np.ndarray:
    if n_samples is None or n_samples >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=n_samples, replace=False))


def importance(model: ModelFn, X, baseline, n_samples: int | None = 200,
               method: str = "auto", n_permutations: int = DEFAULT_PERMUTATIONS,
               seed=0, feature_names=None, target_names=None,
               ) -> FeatureImportance:
    """Rank features by mean absolute Shapley value over a seeded subsample."""
    X = np.asarray(X, dtype=float)
    rows = _subsample(len(X), n_samples, seed)
    vf = ValueFunction(model, baseline)
    phi = explain_rows(vf, X[rows], method, n_permutations, seed)
    per_target = np.abs(phi).mean(axis=0)
    p = X.shape[1]
    names = list(feature_names) if feature_names is not None else [
        f"x{j}" for j in range(p)]
    tnames = list(target_names) if target_names is not None else [
        str(t) for t in range(per_target.shape[0])]
    return FeatureImportance(names, tnames, per_target)


# -- pairwise interactions -------------------------------------------------------------

def _pair_weights(p: int) -> np.ndarray:
    """``s! (p - s - 2)! / (p - 1)!`` for ``s = 0..p-2``."""
    return np.array([math.factorial(s) * math.factorial(p - s - 2)
                     / math.factorial(p - 1) for s in range(p - 1)])


def exact_interactions(vf: ValueFunction, x) -> np.ndarray:
    """Shapley interaction index for all pairs -> ``[T, p, p]``, zero diagonal."""
    p = vf.p
    if p > MAX_EXACT_FEATURES:
        raise ExplanationError(
            f"exact interaction index is limited to {MAX_EXACT_FEATURES} "
            f"features (got {p})")
    masks = _all_masks(p)
    v = vf.values(x, masks)
    sizes = masks.sum(axis=1)
    w = _pair_weights(p)
    codes = np.arange(1 << p, dtype=np.int64)
    out = np.zeros((v.shape[1], p, p))
    for i, j in combinations(range(p), 2):
        bi, bj = 1 << i, 1 << j
        S = codes[(codes & (bi | bj)) == 0]
        delta = v[S | bi | bj] - v[S | bi] - v[S | bj] + v[S]
        out[:, i, j] = out[:, j, i] = w[sizes[S]] @ delta
    return out


def sampled_interactions(vf: ValueFunction, x, n_draws: int = 16,
                         seed=0) -> np.ndarray:
    """Monte Carlo Shapley interaction index -> ``[T, p, p]``.

    For a uniform permutation, the features ahead of ``i`` (excluding
    ``j``) form a coalition drawn with exactly the interaction-index
    weights, so the plain average of second differences is unbiased. The
    roles of ``i`` and ``j`` alternate between draws.
    """
    p = vf.p
    rng = np.random.default_rng(seed)
    pairs = np.array(list(combinations(range(p), 2)))
    P = len(pairs)
    blocks = []
    for d in range(n_draws):
        pos = rng.permutation(p)
        lead, other = (pairs[:, 0], pairs[:, 1]) if d % 2 == 0 else (
            pairs[:, 1], pairs[:, 0])
        S = pos[None, :] < pos[lead][:, None]
        S[np.arange(P), other] = False
        Si, Sj, Sij = S.copy(), S.copy(), S.copy()
        Si[np.arange(P), pairs[:, 0]] = True
        Sj[np.arange(P), pairs[:, 1]] = True
        Sij[np.arange(P), pairs[:, 0]] = True
        Sij[np.arange(P), pairs[:, 1]] = True
        blocks.append(np.concatenate([Sij, Si, Sj, S]))
    v = vf.values(x, np.concatenate(blocks))
    v = v.reshape(n_draws, 4, P, -1)
    delta = (v[:, 0] - v[:, 1] - v[:, 2] + v[:, 3]).mean(axis=0)   # [P, T]
    out = np.zeros((v.shape[-1], p, p))
    out[:, pairs[:, 0], pairs[:, 1]] = delta.T
    out[:, pairs[:, 1], pairs[:, 0]] = delta.T
    return out


@dataclass
class InteractionMatrix:
    """Mean |interaction index| per pair, summed over targets."""
    matrix: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def ranked(self) -> list[tuple[int, int, float]]:
        p = self.matrix.shape[0]
        iu = np.triu_indices(p, k=1)
        vals = self.matrix[iu]
        order = np.argsort(-vals, kind="stable")
        return [(int(iu[0][k]), int(iu[1][k]), float(vals[k])) for k in order]

    def top(self, m: int) -> list[tuple[int, int]]:
        p = self.matrix.shape[0]
        if not 1 <= m <= p * (p - 1) // 2:
            raise ConfigurationError(
                f"top_m must lie in 1..{p * (p - 1) // 2}, got {m}")
        return [(i, j) for i, j, _ in self.ranked()[:m]]


def interaction_matrix(model: ModelFn, X, baseline, n_samples: int | None = 64,
                       method: str = "auto", n_draws: int = 16, seed=0,
                       feature_names=None) -> InteractionMatrix:
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    if method == "auto":
        method = "exact" if p <= MAX_EXACT_FEATURES else "sampled"
    rows = _subsample(len(X), n_samples, seed)
    vf = ValueFunction(model, baseline)

    def one(i):
        if method == "exact":
            return np.abs(exact_interactions(vf, X[i])).sum(axis=0)
        return np.abs(sampled_interactions(vf, X[i], n_draws,
                                           [seed, int(i)])).sum(axis=0)

    n_jobs = thread_count()
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            mats = list(pool.map(one, rows))
    else:
        mats = [one(i) for i in rows]
    names = list(feature_names) if feature_names is not None else [
        f"x{j}" for j in range(p)]
    return InteractionMatrix(np.mean(mats, axis=0), names)


def interaction_screen(model: ModelFn, X, baseline, top_m: int,
                       **kwargs) -> list[tuple[int, int]]:
    """The ``top_m`` feature pairs with the largest mean interaction magnitude."""
    p = np.asarray(X).shape[1]
    if not 1 <= top_m <= p * (p - 1) // 2:
        raise ConfigurationError(
            f"top_m must lie in 1..{p * (p - 1) // 2}, got {top_m}")
    return interaction_matrix(model, X, baseline, **kwargs).top(top_m)


# -- dependence export ---------------------------------------------------------------------

def dependence_triples(phi: np.ndarray, X, feature: int, interacting: int,
                       ) -> np.ndarray:
    """``[n, 3]`` rows of (feature value, its phi, interacting feature value).

    ``phi`` is ``[n, p]`` for one target.
    """
    X = np.asarray(X, dtype=float)
    return np.column_stack([X[:, feature], phi[:, feature], X[:, interacting]])


def dependence_csv(triples: np.ndarray, feature: str, interacting: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([feature, f"phi_{feature}", interacting])
    for row in triples:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# -- force plots ---------------------------------------------------------------------------------

@dataclass
class Force:
    feature: str
    value: float
    phi: float

    @property
    def direction(self) -> str:
        return "increase" if self.phi > 0 else "decrease"


@dataclass
class ForceData:
    target: str
    base_value: float
    prediction: float
    forces: list[Force]

    def to_dict(self) -> dict:
        return {"target": self.target, "base_value": self.base_value,
                "prediction": self.prediction,
                "forces": [{"feature": f.feature, "value": _json_float(f.value),
                            "phi": f.phi, "direction": f.direction}
                           for f in self.forces]}

    def to_text(self) -> str:
        lines = [f"target {self.target}: base {self.base_value:.4f} -> "
                 f"prediction {self.prediction:.4f}"]
        for f in self.forces:
            sign = "+" if f.phi > 0 else "-"
            lines.append(f"  {sign} {f.feature} = {f.value:.4g}  "
                         f"({f.phi:+.4f}, {f.direction})")
        return "\n".join(lines)

    def to_svg(self, width: int = 800, label_top: int = 6) -> str:
        return force_svg(self, width, label_top)


def force_data(exp: Explanation) -> ForceData:
    """Forces ordered by |phi|, zero contributions dropped."""
    names = exp.names()
    vals = exp.values if exp.values is not None else np.full(exp.phi.size, np.nan)
    order = np.argsort(-np.abs(exp.phi), kind="stable")
    forces = [Force(names[j], float(vals[j]), float(exp.phi[j]))
              for j in order if exp.phi[j] != 0.0]
    return ForceData(exp.target, float(exp.base_value), float(exp.prediction),
                     forces)


RED, BLUE = "#ff0051", "#008bfb"


def force_svg(fd: ForceData, width: int = 800, label_top: int = 6) -> str:
    """SVG 1.1 bar: red segments push up to the prediction, blue push down."""
    pos = [f for f in fd.forces if f.phi > 0]
    neg = [f for f in fd.forces if f.phi < 0]
    lo = fd.prediction - sum(f.phi for f in pos)
    hi = fd.prediction - sum(f.phi for f in neg)
    lo, hi = min(lo, fd.base_value, fd.prediction), max(hi, fd.base_value,
                                                         fd.prediction)
    span = hi - lo if hi > lo else 1.0
    margin, bar_y, bar_h = 20.0, 50.0, 24.0
    scale = (width - 2 * margin) / span

    def X(v):
        return margin + (v - lo) * scale

    labelled = {f.feature for f in fd.forces[:label_top]}
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="130" viewBox="0 0 {width} 130">',
        f'<text x="{margin:.2f}" y="20" font-family="sans-serif" '
        f'font-size="12">{escape(fd.target)}: base {fd.base_value:.4f}, '
        f'prediction {fd.prediction:.4f}</text>',
    ]

    def segment(f, a, b, color):
        x0, x1 = sorted((X(a), X(b)))
        parts.append(f'<rect x="{x0:.2f}" y="{bar_y:.2f}" '
                     f'width="{max(x1 - x0, 0.5):.2f}" height="{bar_h:.2f}" '
                     f'fill="{color}" stroke="white" stroke-width="0.5">'
                     f'<title>{escape(f.feature)} {f.phi:+.4f}</title></rect>')
        if f.feature in labelled:
            parts.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{bar_y + bar_h + 16:.2f}" '
                         f'font-family="sans-serif" font-size="10" '
                         f'text-anchor="middle" fill="{color}">'
                         f'{escape(f.feature)}</text>')

    cursor = fd.prediction
    for f in pos:
        segment(f, cursor - f.phi, cursor, RED)
        cursor -= f.phi
    cursor = fd.prediction
    for f in neg:
        segment(f, cursor, cursor - f.phi, BLUE)
        cursor -= f.phi
    for v, label, y in ((fd.base_value, "base", bar_y - 6),
                        (fd.prediction, "f(x)", bar_y - 6)):
        parts.append(f'<line x1="{X(v):.2f}" y1="{bar_y - 4:.2f}" '
                     f'x2="{X(v):.2f}" y2="{bar_y + bar_h + 4:.2f}" '
                     f'stroke="black" stroke-width="1"/>')
        parts.append(f'<text x="{X(v):.2f}" y="{y:.2f}" font-family="sans-serif" '
                     f'font-size="10" text-anchor="middle">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def transition_tendency(scores, threshold: float = 0.5,
                        ) -> tuple[int, int, bool]:
    """``(top, runner_up, flagged)``: flagged when runner-up >= threshold * top."""
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    top, second = int(order[0]), int(order[1])
    flagged = scores[top] > 0 and scores[second] >= threshold * scores[top]
    return top, second, bool(flagged)
