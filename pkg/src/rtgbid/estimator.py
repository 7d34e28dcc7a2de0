"""scikit-learn style wrappers around training, inference and the improvement loop.

``X`` is always a :class:`~rtgbid.trajdata.TrainingSet` (or a sequence of
trajectories for the prediction methods); there is no separate ``y`` since
targets live inside the trajectories.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .auction import OpportunityModel, default_roster
from .errors import ContractError, ShapeError
from .pipeline import MODES, ModelPolicy, NoiseConfig, TrainConfig, WindowSampler, evaluate_loss, iterate, train
from .seqmodel import ModelConfig, TokenBatch
from .trajdata import STATE_DIM, Trajectory, TrainingSet


def check_training_set(X) -> TrainingSet:
    """Reject anything that is not a non-empty TrainingSet of equal-length episodes."""
    if not isinstance(X, TrainingSet):
        raise ContractError(f"expected a TrainingSet, got {type(X).__name__}")
    if len(X) == 0:
        raise ContractError("training set is empty")
    lengths = {len(t.steps) for t in X}
    if len(lengths) != 1:
        raise ShapeError(f"episodes have unequal lengths {sorted(lengths)}")
    return X


def check_trajectories(X) -> list[Trajectory]:
    trajs = list(X)
    if not trajs or not all(isinstance(t, Trajectory) for t in trajs):
        raise ContractError("expected a non-empty sequence of Trajectory")
    if len({len(t.steps) for t in trajs}) != 1:
        raise ShapeError("trajectories must have equal lengths")
    if trajs[0].states.shape[1] != STATE_DIM:
        raise ShapeError(f"states must have {STATE_DIM} features")
    return trajs


class DecisionTransformerBidder(BaseEstimator):
    """One decision transformer bidding model.

    ``mode`` is one of ``rdt`` (RTG regressed with MSE), ``rhat`` (quantile
    loss upper-bound RTG), ``bc`` (no RTG) or ``dt_baseline`` (externally
    scheduled RTG; needs ``initial_rtg`` when acting).
    """

    def __init__(self, mode: str = "rhat", n_layers: int = 2, n_heads: int = 2, embed_dim: int = 32,
                 context_steps: int = 10, quantile_lambda: float = 0.05, epochs: int = 10,
                 steps_per_epoch: int = 20, batch_size: int = 32, learning_rate: float = 1e-3,
                 weight_decay: float = 1e-4, grad_clip: float = 1.0, initial_rtg: Optional[float] = None,
                 random_state: int = 0):
        self.mode = mode
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.embed_dim = embed_dim
        self.context_steps = context_steps
        self.quantile_lambda = quantile_lambda
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.initial_rtg = initial_rtg
        self.random_state = random_state

    def _configs(self) -> tuple[ModelConfig, TrainConfig]:
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        mc = ModelConfig(n_layers=self.n_layers, n_heads=self.n_heads, embed_dim=self.embed_dim,
                         context_steps=self.context_steps, quantile_lambda=self.quantile_lambda)
        tc = TrainConfig(epochs=self.epochs, steps_per_epoch=self.steps_per_epoch, batch_size=self.batch_size,
                         learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                         grad_clip=self.grad_clip)
        return mc, tc

    def fit(self, X, y=None):
        ts = check_training_set(X)
        mc, tc = self._configs()
        self.train_run_, self.checkpoint_ = train(self.mode, mc, tc, ts, int(self.random_state))
        self.loss_curve_ = list(self.train_run_.loss_curve)
        self.rtg_scale_ = ts.rtg_scale
        self.n_features_in_ = STATE_DIM
        return self

    def _teacher_forced(self, X):
        """Per-step model outputs with recorded RTGs and actions as context: (rtg, action), each (n, T)."""
        check_is_fitted(self, "checkpoint_")
        trajs = check_trajectories(X)
        ckpt = self.checkpoint_
        states = np.stack([t.states for t in trajs])
        rtgs = np.stack([t.rtgs for t in trajs]) / ckpt.rtg_scale
        if self.mode == "bc":
            rtgs = np.zeros_like(rtgs)
        actions = np.stack([t.actions for t in trajs])
        n, T = actions.shape
        K = ckpt.config.context_steps
        rtg_out = np.zeros((n, T))
        act_out = np.zeros((n, T))
        for t in range(T):
            lo = max(0, t - K + 1)
            batch = TokenBatch(states[:, lo:t + 1], rtgs[:, lo:t + 1], actions[:, lo:t + 1],
                               np.tile(np.arange(lo, t + 1), (n, 1)))
            out = ckpt.forward(batch)
            if out.rtg_pred is not None:
                rtg_out[:, t] = out.rtg_pred.values[:, -1, 0] * ckpt.rtg_scale
            act_out[:, t] = ckpt.config.a_max * out.action_pred.values[:, -1, 0].astype(np.float64)
        return rtg_out, act_out

    def predict(self, X) -> np.ndarray:
        """Action (bid coefficient) at every step, shape (n_trajectories, T)."""
        return self._teacher_forced(X)[1]

    def predict_rtg(self, X) -> np.ndarray:
        """Predicted return-to-go at every state token, raw units, shape (n_trajectories, T)."""
        if self.mode == "dt_baseline":
            raise ContractError("dt_baseline has no RTG head")
        return self._teacher_forced(X)[0]

    def score(self, X, y=None) -> float:
        """Negative training loss on every window of ``X`` (higher is better)."""
        check_is_fitted(self, "checkpoint_")
        ts = check_training_set(X)
        sampler = WindowSampler(ts, self.checkpoint_.config.context_steps, self.checkpoint_.rtg_scale,
                                zero_rtg=(self.mode == "bc"))
        batch = sampler.batch(np.arange(sampler.n_windows))
        return -float(evaluate_loss(self.checkpoint_, batch, self.mode)["total"])

    def policy(self, sigma: float = 0.0, noise_seed: int = 0) -> ModelPolicy:
        """A fresh lockstep batch policy for :func:`rtgbid.auction.run_episodes`."""
        check_is_fitted(self, "checkpoint_")
        return ModelPolicy(self.checkpoint_, self.mode, sigma=sigma, noise_seed=noise_seed,
                           initial_rtg=self.initial_rtg)


class RStarBidder(DecisionTransformerBidder):
    """The quantile-loss model refined by ``rounds`` rounds of generate, select and retrain.

    ``fit`` needs the simulator to generate episodes; by default it uses the
    default opportunity model and advertiser roster.
    """

    def __init__(self, rounds: int = 3, percentile: float = 70.0, n_generate: int = 16, sigma0: float = 0.1,
                 noise_decay: float = 0.8, opportunity_model: Optional[OpportunityModel] = None,
                 roster: Optional[Sequence] = None, n_layers: int = 2, n_heads: int = 2, embed_dim: int = 32,
                 context_steps: int = 10, quantile_lambda: float = 0.05, epochs: int = 10,
                 steps_per_epoch: int = 20, batch_size: int = 32, learning_rate: float = 1e-3,
                 weight_decay: float = 1e-4, grad_clip: float = 1.0, random_state: int = 0):
        self.rounds = rounds
        self.percentile = percentile
        self.n_generate = n_generate
        self.sigma0 = sigma0
        self.noise_decay = noise_decay
        self.opportunity_model = opportunity_model
        self.roster = roster
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.embed_dim = embed_dim
        self.context_steps = context_steps
        self.quantile_lambda = quantile_lambda
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.random_state = random_state

    # fixed for this estimator rather than hyperparameters
    mode = "rhat"
    initial_rtg = None

    def fit(self, X, y=None):
        ts = check_training_set(X)
        mc, tc = self._configs()
        model = self.opportunity_model or OpportunityModel()
        roster = list(self.roster) if self.roster is not None else default_roster()
        self.result_ = iterate(self.rounds, model, roster, mc, tc, NoiseConfig(self.sigma0, self.noise_decay),
                               int(self.random_state), self.percentile, self.n_generate, initial=ts)
        self.checkpoint_ = self.result_.checkpoint
        self.train_run_ = self.result_.runs[-1]
        self.loss_curve_ = list(self.train_run_.loss_curve)
        self.training_set_ = self.result_.training_sets[-1]
        self.rtg_scale_ = self.checkpoint_.rtg_scale
        self.n_features_in_ = STATE_DIM
        return self
