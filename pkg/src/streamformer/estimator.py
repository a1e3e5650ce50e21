"""scikit-learn style front end.

``fit`` does no training: it reads the feature width off ``X`` and draws
seeded weights, so the encoder can sit inside a :class:`~sklearn.pipeline.Pipeline`
as a fixed feature transform.
"""

from __future__ import annotations

import dataclasses
from typing import List

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ModelConfig
from .encoder import encoder_forward_parallel, stream_flush, stream_open, stream_push
from .numerics import precision
from .weights import ModelWeights, gen_weights


class StreamingEncoder(TransformerMixin, BaseEstimator):
    """Block-processing streaming encoder.

    ``transform`` maps one utterance ``X`` of shape ``(T, n_features)`` to
    ``(T // stack_factor, model_dim)`` using the whole-utterance path;
    :meth:`stream` gives an incremental session with identical output.
    """

    def __init__(
        self,
        stack_factor=2,
        model_dim=16,
        ffn_dim=32,
        num_layers=3,
        num_heads=4,
        block_size=4,
        lookahead=1,
        left_context=8,
        memory_slots=2,
        memory_offset=2,
        kernel=3,
        use_conv=True,
        use_macaron=True,
        use_talking_heads=True,
        precision="float64",
        random_state=0,
    ):
        self.stack_factor = stack_factor
        self.model_dim = model_dim
        self.ffn_dim = ffn_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.block_size = block_size
        self.lookahead = lookahead
        self.left_context = left_context
        self.memory_slots = memory_slots
        self.memory_offset = memory_offset
        self.kernel = kernel
        self.use_conv = use_conv
        self.use_macaron = use_macaron
        self.use_talking_heads = use_talking_heads
        self.precision = precision
        self.random_state = random_state

    def _config(self, input_dim: int) -> ModelConfig:
        fields = {f.name for f in dataclasses.fields(ModelConfig)} - {"input_dim"}
        params = {k: v for k, v in self.get_params().items() if k in fields}
        return ModelConfig(input_dim=input_dim, **params)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.config_ = self._config(X.shape[1])
        self.weights_ = gen_weights(self.config_, self.random_state if self.random_state is not None else 0)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_weights(cls, weights: ModelWeights) -> "StreamingEncoder":
        cfg = weights.config
        est = cls(**{k: v for k, v in cfg.to_dict().items() if k != "input_dim"})
        est.config_ = cfg
        est.weights_ = weights
        est.n_features_in_ = cfg.input_dim
        return est

    def _validate(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, encoder was fitted with {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._validate(X)
        with precision(self.config_.precision):
            return encoder_forward_parallel(X, self.config_, self.weights_)

    def stream(self) -> "Stream":
        check_is_fitted(self, "weights_")
        return Stream(self)


class Stream:
    """Incremental session: push frames as they arrive, flush at the end."""

    def __init__(self, encoder: StreamingEncoder):
        self._encoder = encoder
        with precision(encoder.config_.precision):
            self._state = stream_open(encoder.config_, encoder.weights_)

    def push(self, frames) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, self._encoder.n_features_in_)
        with precision(self._encoder.config_.precision):
            return self._join(stream_push(self._state, frames))

    def flush(self) -> np.ndarray:
        with precision(self._encoder.config_.precision):
            return self._join(stream_flush(self._state))

    def _join(self, outs: List[np.ndarray]) -> np.ndarray:
        if not outs:
            return np.zeros((0, self._encoder.config_.model_dim), dtype=self._state.pending.dtype)
        return np.concatenate(outs)
