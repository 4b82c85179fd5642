"""Estimator-style wrapper around model construction, DQN training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_contexts, check_probability, check_token_slices
from .model import ModelConfig, QModel, init_params
from .numerics.optim import OptimizerState
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train


class InContextQLearner(BaseEstimator):
    """Causal transformer Q-function fit by double DQN on token slices.

    ``fit`` takes a :class:`~icrl.datagen.Dataset` or an (n_slices, slice_len)
    token array. ``predict_q`` and ``predict`` take token contexts that end at
    an action position.
    """

    def __init__(self, n_layers=4, n_heads=4, d_model=128, d_ff=512, max_context=1024, dropout=0.0,
                 gamma=0.9, reward_scale=30.0, alpha=0.1, base_lr=1e-2, warmup_batches=10,
                 batch_slices=10, total_batches=20_000, grad_clip=0.0, random_state=0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.max_context = max_context
        self.dropout = dropout
        self.gamma = gamma
        self.reward_scale = reward_scale
        self.alpha = alpha
        self.base_lr = base_lr
        self.warmup_batches = warmup_batches
        self.batch_slices = batch_slices
        self.total_batches = total_batches
        self.grad_clip = grad_clip
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, n_heads=self.n_heads, d_model=self.d_model, d_ff=self.d_ff,
                           max_context=self.max_context, dropout=self.dropout)

    def train_config(self, slice_len: int) -> TrainConfig:
        check_probability("alpha", self.alpha, open_low=True)
        return TrainConfig(gamma=self.gamma, reward_scale=self.reward_scale, alpha=self.alpha,
                           base_lr=self.base_lr, warmup_batches=self.warmup_batches,
                           batch_slices=self.batch_slices, slice_len=slice_len,
                           total_batches=self.total_batches, seed=self.random_state, grad_clip=self.grad_clip)

    def fit(self, X, y=None, on_batch=None):
        tokens = getattr(X, "tokens", X)
        tokens = check_token_slices(tokens)
        cfg = self.model_config()
        tcfg = self.train_config(tokens.shape[1])
        state = train(tokens, cfg, tcfg, on_batch=on_batch)
        self.config_ = cfg
        self.params_ = state.params
        self.target_params_ = state.target
        self.optimizer_state_ = state.opt
        self.history_ = state.log
        self.n_features_in_ = tokens.shape[1]
        return self

    def init(self):
        """Fitted-state attributes from fresh random parameters, without training."""
        cfg = self.model_config()
        self.config_ = cfg
        self.params_ = init_params(cfg, np.random.default_rng(self.random_state))
        self.target_params_ = self.params_
        self.optimizer_state_ = OptimizerState(base_lr=self.base_lr, warmup_batches=self.warmup_batches)
        self.history_ = []
        self.n_features_in_ = cfg.max_context
        return self

    def to_model(self) -> QModel:
        check_is_fitted(self, "params_")
        return QModel(self.params_, self.config_)

    def predict_q(self, X) -> np.ndarray:
        """Q-values (n_contexts, 4) at the final position of each context."""
        model = self.to_model()
        out = []
        for ctx in check_contexts(X):
            dec = model.decoder()
            out.append(dec.extend(ctx))
        return np.asarray(out)

    def predict(self, X) -> np.ndarray:
        """Greedy action per context; ties go to the lowest action index."""
        return np.argmax(self.predict_q(X), axis=1)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.config_, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "InContextQLearner":
        params, cfg, header = load_checkpoint(path)
        est = cls(**header.get("estimator", {}))
        est.config_ = cfg
        est.params_ = params
        est.target_params_ = params
        est.history_ = []
        est.n_features_in_ = cfg.max_context
        return est
