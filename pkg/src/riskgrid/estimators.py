"""scikit-learn style wrappers around the three networks.

Estimators expect imputed, normalized inputs (see
:class:`riskgrid.dataset.Preprocessor`) and four-state labels ``0..3``.
They compose with ``sklearn.pipeline.Pipeline`` and support
``get_params``/``set_params``/``clone``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from . import explain
from . import models as M
from .dataset import DEFAULT_QI_FEATURES, default_schema, reference_point
from .exceptions import ConfigurationError, DataError, UnsupportedModelError
from .training import TrainConfig, train

NUM_CLASSES = 4


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (not np.all(np.equal(np.mod(y, 1), 0))
                   or y.min() < 0 or y.max() >= NUM_CLASSES):
        raise DataError("labels must be integer risk states 0..3")
    return y.astype(np.int64)


def parse_pairs_option(value) -> int | None:
    """``"auto:N"`` -> ``N``; anything else -> ``None``."""
    if isinstance(value, str):
        if not value.startswith("auto:"):
            raise ConfigurationError(
                f"qi_pairs must be 'auto:N' or a list of pairs, got {value!r}")
        try:
            n = int(value[5:])
        except ValueError:
            raise ConfigurationError(f"bad pair count in {value!r}") from None
        if n < 1:
            raise ConfigurationError("auto pair count must be >= 1")
        return n
    return None


class _NetworkClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses supply ``_build_spec``."""

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, max_epochs=self.max_epochs,
            batch_size=self.batch_size, patience=self.patience,
            seed=self.random_state, validation_fraction=self.validation_fraction,
            zero_init_output=self.zero_init_output,
            **({"objective_weights": self.objective_weights}
               if hasattr(self, "objective_weights") else {}))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = _check_labels(y)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.arange(NUM_CLASSES)
        self.spec_ = self._build_spec(X, y)
        self.params_, self.trace_ = train(self.spec_, X, y,
                                          self._train_config())
        return self

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got "
                            f"{X.shape[1]}")
        return X

    def decision_function(self, X) -> np.ndarray:
        """Pre-softmax class scores ``[n, 4]``."""
        return M.logits(self.spec_, self.params_, self._check_X(X)).data

    def predict_proba(self, X) -> np.ndarray:
        return ad.softmax(self.decision_function(X)).data

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def project(self, X) -> np.ndarray:
        """Activations of the 2x4 visualization layer, ``[n, 8]``."""
        raise UnsupportedModelError(
            f"{type(self).__name__} has no visualization layer")

    def n_params(self) -> int:
        check_is_fitted(self, "spec_")
        return M.count_params(self.spec_)


_TRAIN_DEFAULTS = dict(learning_rate=1e-3, max_epochs=200, batch_size=64,
                       patience=10, validation_fraction=0.1, random_state=0,
                       zero_init_output=False)


class BaseDNNClassifier(_NetworkClassifier):
    """Four-class MLP: hidden ReLU layer, 2x4 visualization layer, softmax.

    Parameters
    ----------
    hidden_dim : int, default=17
    viz_dim : int, default=8
        Two coordinates per risk state.
    learning_rate, max_epochs, batch_size, patience, validation_fraction,
    random_state, zero_init_output
        Forwarded to :class:`riskgrid.training.TrainConfig`.
    """

    def __init__(self, hidden_dim=17, viz_dim=8, learning_rate=1e-3,
                 max_epochs=200, batch_size=64, patience=10,
                 validation_fraction=0.1, random_state=0,
                 zero_init_output=False):
        self.hidden_dim = hidden_dim
        self.viz_dim = viz_dim
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.zero_init_output = zero_init_output

    def _build_spec(self, X, y):
        return M.BaseDNNSpec(X.shape[1], self.hidden_dim, self.viz_dim,
                             NUM_CLASSES)

    def project(self, X) -> np.ndarray:
        out = M.base_dnn_logits(self.spec_, self.params_, self._check_X(X))
        return out.viz.data

    def transform(self, X) -> np.ndarray:
        return self.project(X)


def screen_pairs(X, y, n_pairs: int, random_state=0, train_kwargs=None,
                 n_samples: int = 64, n_draws: int = 16) -> list[tuple[int, int]]:
    """Fit a BaseDNN on ``(X, y)`` and return its strongest interacting pairs."""
    probe = BaseDNNClassifier(random_state=random_state,
                              **(train_kwargs or {})).fit(X, y)
    X = np.asarray(X, dtype=float)
    baseline = reference_point(X)
    return explain.interaction_screen(
        probe.decision_function, X, baseline, n_pairs, n_samples=n_samples,
        n_draws=n_draws, seed=random_state)


def _resolve_qi(self, X, y, default_features):
    n_auto = parse_pairs_option(self.qi_pairs)
    if n_auto is not None:
        kwargs = {k: getattr(self, k) for k in _TRAIN_DEFAULTS
                  if k != "random_state"}
        pairs = screen_pairs(X, y, n_auto, self.random_state, kwargs,
                             self.screen_samples)
        self.qi_pairs_ = pairs
        return M.QISpec.from_pairs(pairs, self.latent_len, self.qi_mode)
    if self.qi_pairs is not None:
        self.qi_pairs_ = [tuple(map(int, p)) for p in self.qi_pairs]
        return M.QISpec.from_pairs(self.qi_pairs_, self.latent_len,
                                   self.qi_mode)
    features = self.qi_features
    if features is None:
        features = default_features(X)
    self.qi_pairs_ = None
    return M.QISpec(tuple(features), self.latent_len, self.qi_mode)


def _default_qi_features(X):
    if X.shape[1] != 34:
        raise ConfigurationError(
            "qi_features or qi_pairs must be given for inputs that do not "
            "follow the 34-feature schema")
    return default_schema().indices(DEFAULT_QI_FEATURES)


class QIDNNClassifier(_NetworkClassifier):
    """Deep trunk plus an order-2 interaction block over selected features.

    Parameters
    ----------
    qi_features : sequence of int, optional
        Columns whose pairwise products enter the QI block. Defaults to the
        seven clinical features LSBP, Exs, Sm, LDBP, RSBP, HbA1c and HS.
    qi_pairs : "auto:N" or sequence of (int, int), optional
        Explicit pairs, or ``"auto:N"`` to pick the N pairs with the
        largest Shapley interaction in a probe BaseDNN. Overrides
        ``qi_features``.
    latent_len : int, default=4
    qi_mode : {"summed", "per_pair"}, default="summed"
    viz_layer : bool, default=True
        Keep the 2x4 visualization layer in the deep trunk.
    """

    def __init__(self, qi_features=None, qi_pairs=None, latent_len=4,
                 qi_mode="summed", viz_layer=True, hidden_dim=17,
                 screen_samples=64, learning_rate=1e-3, max_epochs=200,
                 batch_size=64, patience=10, validation_fraction=0.1,
                 random_state=0, zero_init_output=False):
        self.qi_features = qi_features
        self.qi_pairs = qi_pairs
        self.latent_len = latent_len
        self.qi_mode = qi_mode
        self.viz_layer = viz_layer
        self.hidden_dim = hidden_dim
        self.screen_samples = screen_samples
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.zero_init_output = zero_init_output

    def _build_spec(self, X, y):
        qi = _resolve_qi(self, X, y, _default_qi_features)
        trunk = M.BaseDNNSpec(X.shape[1], self.hidden_dim, 2 * NUM_CLASSES,
                              NUM_CLASSES)
        return M.QIDNNSpec(trunk, qi, self.viz_layer)

    def project(self, X) -> np.ndarray:
        check_is_fitted(self, "spec_")
        if not self.spec_.viz_layer:
            raise UnsupportedModelError(
                "this QIDNN was built without a visualization layer")
        return M.qidnn_logits(self.spec_, self.params_, self._check_X(X)).viz.data


class MMOEClassifier(_NetworkClassifier):
    """Multi-gate mixture of experts for stroke occurrence and risk state.

    ``fit`` takes four-state labels; the binary stroke target is derived
    (attack -> 1). ``predict``/``predict_proba`` refer to the risk-state
    head, :meth:`predict_stroke_proba` to the stroke head.
    """

    def __init__(self, qi_pairs="auto:3", qi_features=None, latent_len=4,
                 qi_mode="summed", expert_width=11, trunk_hidden=17,
                 experts=("mlp", "qidnn"), viz_layer=True,
                 objective_weights=(1.0, 1.0), screen_samples=64,
                 learning_rate=1e-3, max_epochs=200, batch_size=64,
                 patience=10, validation_fraction=0.1, random_state=0,
                 zero_init_output=False):
        self.qi_pairs = qi_pairs
        self.qi_features = qi_features
        self.latent_len = latent_len
        self.qi_mode = qi_mode
        self.expert_width = expert_width
        self.trunk_hidden = trunk_hidden
        self.experts = experts
        self.viz_layer = viz_layer
        self.objective_weights = objective_weights
        self.screen_samples = screen_samples
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.zero_init_output = zero_init_output

    def _build_spec(self, X, y):
        def first_three(X):
            return [0, 1, 2]
        qi = _resolve_qi(self, X, y, first_three)
        experts = tuple(self.experts)
        return M.MMOESpec(X.shape[1], experts,
                          (self.expert_width,) * len(experts),
                          self.trunk_hidden, qi, self.viz_layer, NUM_CLASSES)

    def _outputs(self, X) -> M.MMOEOutput:
        return M.mmoe_logits(self.spec_, self.params_, self._check_X(X))

    def decision_function(self, X) -> np.ndarray:
        return self._outputs(X).risk_logits.data

    def stroke_logit(self, X) -> np.ndarray:
        return self._outputs(X).stroke_logit.data[:, 0]

    def predict_stroke_proba(self, X) -> np.ndarray:
        return ad.sigmoid(self.stroke_logit(X)).data

    def gate_weights(self, X) -> list[np.ndarray]:
        return [g.data for g in self._outputs(X).gates]

    def explain_outputs(self, X) -> np.ndarray:
        """``[n, 5]``: the stroke logit followed by the four risk logits."""
        out = self._outputs(X)
        return np.column_stack([out.stroke_logit.data, out.risk_logits.data])


class TopFeatureSelector(TransformerMixin, BaseEstimator):
    """Keep the ``k`` columns with the largest mean |Shapley| in a probe BaseDNN."""

    def __init__(self, k=20, n_samples=200, n_permutations=32, random_state=0,
                 train_kwargs=None):
        self.k = k
        self.n_samples = n_samples
        self.n_permutations = n_permutations
        self.random_state = random_state
        self.train_kwargs = train_kwargs

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not 1 <= self.k <= X.shape[1]:
            raise ConfigurationError(f"k must lie in 1..{X.shape[1]}")
        probe = BaseDNNClassifier(random_state=self.random_state,
                                  **(self.train_kwargs or {})).fit(X, y)
        self.importance_ = explain.importance(
            probe.decision_function, X, reference_point(X), self.n_samples,
            n_permutations=self.n_permutations, seed=self.random_state)
        self.support_ = np.sort(self.importance_.order()[:self.k])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "support_")
        X = check_array(X, dtype=np.float64)
        return X[:, self.support_]
