"""Losses, Adam, and the early-stopping mini-batch training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as M
from .dataset import ATTACK, stratified_indices
from .exceptions import ConfigurationError, DataError, TrainingError
from .metrics import auc as _auc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 64
    patience: int = 10
    seed: int = 0
    validation_fraction: float = 0.1
    objective_weights: tuple[float, float] = (1.0, 1.0)
    zero_init_output: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "objective_weights",
                           tuple(float(w) for w in self.objective_weights))
        for name in ("learning_rate", "max_epochs", "batch_size", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_losses: tuple[float, ...] = ()
    val_losses: tuple[float, ...] = ()
    val_auc: float | None = None


@dataclass
class TrainTrace:
    """Per-epoch losses. Epoch 0 is the evaluation before any update."""
    records: list[EpochRecord] = field(default_factory=list)
    stopped_at_epoch: int = 0
    best_epoch: int = 0
    early_stopped: bool = False

    @property
    def val_losses(self) -> np.ndarray:
        return np.array([r.val_loss for r in self.records])

    def to_csv(self) -> str:
        n_obj = max((len(r.val_losses) for r in self.records), default=0)
        header = ["epoch", "train_loss", "val_loss"]
        for k in range(n_obj):
            header += [f"train_loss_obj{k + 1}", f"val_loss_obj{k + 1}"]
        header.append("val_auc")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in self.records:
            row = [r.epoch, repr(r.train_loss), repr(r.val_loss)]
            for k in range(n_obj):
                row += [repr(r.train_losses[k]), repr(r.val_losses[k])]
            row.append("" if r.val_auc is None else repr(r.val_auc))
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"stopped_at_epoch": self.stopped_at_epoch,
                "best_epoch": self.best_epoch,
                "early_stopped": self.early_stopped,
                "final_train_loss": self.records[-1].train_loss,
                "best_val_loss": self.records[self.best_epoch].val_loss}


# -- losses ------------------------------------------------------------------------

def cross_entropy(logits, labels) -> ad.Tensor:
    """Mean four-class cross entropy from pre-softmax ``logits[m, C]``."""
    return ad.mean(ad.softmax_cross_entropy(logits, labels))


def binary_cross_entropy(logit, y) -> ad.Tensor:
    """Mean BCE from a pre-sigmoid ``logit[m, 1]`` column."""
    return ad.mean(ad.sigmoid_binary_cross_entropy(logit, y))


def check_label_consistency(stroke, risk) -> None:
    stroke = np.asarray(stroke)
    risk = np.asarray(risk)
    bad = np.flatnonzero((stroke == 1) != (risk == ATTACK))
    if bad.size:
        raise DataError(
            f"stroke label disagrees with risk_state on {bad.size} row(s)",
            row=int(bad[0]))


def mmoe_loss(out: M.MMOEOutput, stroke, risk,
              weights: tuple[float, float] = (1.0, 1.0),
              ) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Batch-mean BCE (stroke) plus batch-mean CE (risk state).

    Returns ``(total, bce, ce)``; with unit weights ``total == bce + ce``.
    """
    check_label_consistency(stroke, risk)
    bce = binary_cross_entropy(out.stroke_logit, stroke)
    ce = cross_entropy(out.risk_logits, risk)
    w1, w2 = weights
    total = ad.add(bce if w1 == 1.0 else ad.scale(bce, w1),
                   ce if w2 == 1.0 else ad.scale(ce, w2))
    return total, bce, ce


def objective_losses(spec: M.ModelSpec, params, X, y,
                     weights=(1.0, 1.0)) -> tuple[ad.Tensor, tuple[ad.Tensor, ...]]:
    """Total loss and the per-objective parts for a batch."""
    if isinstance(spec, M.MMOESpec):
        out = M.mmoe_logits(spec, params, X)
        total, bce, ce = mmoe_loss(out, (y == ATTACK).astype(float), y, weights)
        return total, (bce, ce)
    ce = cross_entropy(M.logits(spec, params, X), y)
    return ce, (ce,)


# -- optimizer ---------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- training loop -------------------------------------------------------------------

def evaluate(spec, params, X, y, weights=(1.0, 1.0)):
    total, parts = objective_losses(spec, params, X, y, weights)
    return float(total.data), tuple(float(p.data) for p in parts)


def _snapshot(params) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def train(spec: M.ModelSpec, X, y, config: TrainConfig | None = None,
          validation: tuple[np.ndarray, np.ndarray] | None = None,
          params=None, batch_callback=None):
    """Fit ``spec`` to ``(X, y)`` with Adam and early stopping.

    ``y`` holds four-state labels; the MMOE stroke target is derived from
    it. A stratified validation split is carved from the training rows
    unless ``validation`` is given. Returns ``(params, trace)`` where
    ``params`` are those of the best validation epoch.

    ``batch_callback(epoch, rows, total, parts)`` is called after every
    batch's forward pass, before the update.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if validation is None:
        tr, va = stratified_indices(y, config.validation_fraction,
                                    config.seed)
        X, y, X_val, y_val = X[tr], y[tr], X[va], y[va]
    else:
        X_val, y_val = (np.asarray(a) for a in validation)
    if params is None:
        params = M.init_params(spec, config.seed, config.zero_init_output)
    opt = Adam(params.values(), config.learning_rate, config.beta1,
               config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    w = config.objective_weights
    is_mmoe = isinstance(spec, M.MMOESpec)

    def val_record(epoch, train_loss, train_parts):
        val_loss, val_parts = evaluate(spec, params, X_val, y_val, w)
        if not math.isfinite(val_loss):
            raise TrainingError("validation loss is not finite", epoch)
        val_auc = None
        if is_mmoe:
            p_stroke, _ = M.mmoe_forward(spec, params, X_val)
            stroke = (y_val == ATTACK).astype(int)
            if 0 < stroke.sum() < stroke.size:
                val_auc = _auc(p_stroke, stroke)
        return EpochRecord(epoch, train_loss, val_loss,
                           train_parts if is_mmoe else (),
                           val_parts if is_mmoe else (), val_auc)

    trace = TrainTrace()
    tl, tparts = evaluate(spec, params, X, y, w)
    trace.records.append(val_record(0, tl, tparts))
    best_loss, best_state, wait = trace.records[0].val_loss, _snapshot(params), 0
    n = X.shape[0]
    bs = config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(1 + (2 if is_mmoe else 1))
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            opt.zero_grad()
            with ad.Tape() as tape:
                total, parts = objective_losses(spec, params, X[rows],
                                                y[rows], w)
            if not np.isfinite(total.data):
                raise TrainingError("training loss is not finite", epoch)
            if batch_callback is not None:
                batch_callback(epoch, rows, total, parts)
            tape.backward(total)
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step()
            if not all(np.isfinite(p.data).all() for p in opt.params):
                raise TrainingError("parameters became non-finite", epoch)
            sums += rows.size * np.array(
                [float(total.data)] + [float(p.data) for p in parts])
        sums /= n
        rec = val_record(epoch, float(sums[0]), tuple(sums[1:]))
        trace.records.append(rec)
        logger.debug("epoch %d train %.5f val %.5f", epoch, rec.train_loss,
                     rec.val_loss)
        if rec.val_loss < best_loss:
            best_loss, best_state, wait = rec.val_loss, _snapshot(params), 0
            trace.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                trace.early_stopped = True
                break
    trace.stopped_at_epoch = trace.records[-1].epoch
    for k, p in params.items():
        p.data[...] = best_state[k]
    return params, trace
