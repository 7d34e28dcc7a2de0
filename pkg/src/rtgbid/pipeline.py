"""Training, noisy policy rollouts, and the generate-select-retrain loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .auction import AdvertiserConfig, EpisodeHistory, OpportunityModel, run_episodes
from .errors import ConfigError, ContractError, NumericError
from .numcore import DTYPE, Adam, Tape, backward, clip_grad_norm
from .seqmodel import (
    ORDER_RSA, ORDER_SRA, Checkpoint, ModelConfig, TokenBatch, forward, init_params, training_loss,
)
from .trajdata import (
    Trajectory, TrainingSet, derive_seed, generate_behavior_dataset, merge, select_top,
    selection_thresholds,
)
from .trajdata.generation import STREAM_GENERATED

log = logging.getLogger(__name__)

MODES = ("rdt", "rhat", "bc", "dt_baseline")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    probe_windows: int = 128

    def __post_init__(self):
        if min(self.epochs, self.steps_per_epoch, self.batch_size, self.probe_windows) < 1:
            raise ConfigError("epochs, steps_per_epoch, batch_size and probe_windows must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")


@dataclass(frozen=True)
class NoiseConfig:
    sigma0: float = 0.1
    decay: float = 0.8
    per_step: bool = True

    def __post_init__(self):
        if self.sigma0 < 0:
            raise ConfigError("sigma0 must be >= 0")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")

    def sigma(self, iteration: int) -> float:
        return self.sigma0 * self.decay ** (iteration - 1)


@dataclass
class TrainRun:
    mode: str
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    dataset_digest: str
    loss_curve: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None


# --------------------------------------------------------------------------------------------
# data windows


def model_config_for(mode: str, config: ModelConfig) -> ModelConfig:
    order = ORDER_RSA if mode == "dt_baseline" else ORDER_SRA
    return dataclasses.replace(config, token_order=order) if config.token_order != order else config


class WindowSampler:
    """Uniform sampling of K-step windows over (trajectory, start offset)."""

    def __init__(self, ts: TrainingSet, context_steps: int, rtg_scale: float, zero_rtg: bool = False):
        if len(ts) == 0:
            raise ContractError("training set is empty")
        T = min(len(t.steps) for t in ts)
        self.K = min(context_steps, T)
        self.states = np.stack([t.states for t in ts])[:, :T]
        rtgs = np.stack([t.rtgs for t in ts])[:, :T] / rtg_scale
        self.rtgs = np.zeros_like(rtgs, dtype=DTYPE) if zero_rtg else rtgs.astype(DTYPE)
        self.actions = np.stack([t.actions for t in ts])[:, :T]
        self.n_offsets = T - self.K + 1
        self.n_windows = len(ts) * self.n_offsets

    def batch(self, flat_ids: np.ndarray) -> TokenBatch:
        traj = flat_ids // self.n_offsets
        off = flat_ids % self.n_offsets
        idx = off[:, None] + np.arange(self.K)[None, :]
        return TokenBatch(
            states=self.states[traj[:, None], idx],
            rtgs=self.rtgs[traj[:, None], idx],
            actions=self.actions[traj[:, None], idx],
            timesteps=idx,
        )

    def sample(self, rng: np.random.Generator, size: int) -> TokenBatch:
        return self.batch(rng.integers(0, self.n_windows, size=size))

    def probe(self, n: int, seed: int) -> TokenBatch:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0BE]))
        n = min(n, self.n_windows)
        return self.batch(np.sort(rng.choice(self.n_windows, size=n, replace=False)))


def evaluate_loss(ckpt: Checkpoint, batch: TokenBatch, mode: Optional[str] = None) -> dict:
    mode = mode or ckpt.mode
    out = ckpt.forward(batch)
    _, parts = training_loss(mode, out, batch, ckpt.config.quantile_lambda, ckpt.config.a_max)
    return parts


def train(mode: str, config: ModelConfig, train_config: TrainConfig, ts: TrainingSet, seed: int,
          checkpoint_path=None) -> tuple[TrainRun, Checkpoint]:
    """Minibatch Adam training of one model on ``ts``; deterministic for a fixed seed."""
    if mode not in MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    if len(ts) == 0:
        raise ContractError("cannot train on an empty training set")
    config = model_config_for(mode, config)
    params = init_params(config, seed)
    ckpt = Checkpoint(config, params, rtg_scale=ts.rtg_scale, mode=mode,
                      meta={"seed": seed, "dataset_digest": ts.digest})
    sampler = WindowSampler(ts, config.context_steps, ts.rtg_scale, zero_rtg=(mode == "bc"))
    probe = sampler.probe(train_config.probe_windows, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
    drop_rng = rng if config.dropout > 0 else None
    opt = Adam(params, lr=train_config.learning_rate, weight_decay=train_config.weight_decay)
    run = TrainRun(mode, train_config.epochs, train_config.batch_size, train_config.learning_rate, seed, ts.digest)

    for epoch in range(train_config.epochs):
        for b in range(train_config.steps_per_epoch):
            batch = sampler.sample(rng, train_config.batch_size)
            with Tape() as tape:
                out = forward(config, params, batch, drop_rng)
                loss, _ = training_loss(mode, out, batch, config.quantile_lambda, config.a_max)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward(tape, loss)
            if train_config.grad_clip:
                clip_grad_norm(params, train_config.grad_clip)
            opt.step()
        probe_loss = evaluate_loss(ckpt, probe)["total"]
        if not math.isfinite(probe_loss):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch {train_config.steps_per_epoch - 1}")
        run.loss_curve.append(probe_loss)
        log.debug("%s epoch %d loss %.6f", mode, epoch, probe_loss)
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
        run.checkpoint_path = str(checkpoint_path)
    return run, ckpt


# --------------------------------------------------------------------------------------------
# acting


@dataclass
class RtgSchedule:
    """Preset RTG for the classic decision transformer: start high, subtract realized rewards."""

    initial: float

    def value(self, rewards_so_far: Sequence[float]) -> float:
        return self.initial - float(sum(rewards_so_far))


def _window(arrs, K):
    return [a[:, -K:] for a in arrs]


def infer_batch(ckpt: Checkpoint, states: np.ndarray, rtgs_prev: np.ndarray, actions_prev: np.ndarray,
                timesteps: np.ndarray, mode: Optional[str] = None, noise: Optional[np.ndarray] = None,
                rtg_now: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Predict ``(R_t, a_t)`` for a batch of equal-length histories.

    ``states`` holds ``s_0..s_t`` (B, t+1, d_s); ``rtgs_prev`` and
    ``actions_prev`` hold the RTG tokens and actions already fed for steps
    before t, in raw units. ``rtg_now`` supplies R_t directly (the classic
    decision transformer); otherwise it comes from the model plus ``noise``
    (normalized units).
    """
    mode = mode or ckpt.mode
    cfg = ckpt.config
    scale = ckpt.rtg_scale
    B, n, _ = states.shape
    if rtgs_prev.shape != (B, n - 1) or actions_prev.shape != (B, n - 1) or timesteps.shape != (B, n):
        raise ContractError("history lengths are inconsistent")
    K = cfg.context_steps
    rtg_in = np.concatenate([rtgs_prev / scale, np.zeros((B, 1))], axis=1)
    act_in = np.concatenate([actions_prev, np.zeros((B, 1))], axis=1)
    s, r, a, ts = _window([states, rtg_in, act_in, timesteps], K)

    if mode == "bc":
        out = ckpt.forward(TokenBatch(s, np.zeros_like(r), a, ts))
        return np.zeros(B), cfg.a_max * out.action_pred.values[:, -1, 0].astype(np.float64)

    if rtg_now is None:
        if mode == "dt_baseline":
            raise ConfigError("dt_baseline needs an RTG schedule")
        out = ckpt.forward(TokenBatch(s, r, a, ts))
        r_hat = out.rtg_pred.values[:, -1, 0].astype(np.float64)
        if noise is not None:
            r_hat = r_hat + noise
    else:
        r_hat = np.asarray(rtg_now, dtype=np.float64) / scale
    r = r.copy()
    r[:, -1] = r_hat
    out = ckpt.forward(TokenBatch(s, r, a, ts))
    action = cfg.a_max * out.action_pred.values[:, -1, 0].astype(np.float64)
    return r_hat * scale, action


def infer_action(ckpt: Checkpoint, states, rtgs_prev, actions_prev, mode: Optional[str] = None,
                 noise: float = 0.0, rtg_schedule: Optional[RtgSchedule] = None,
                 rewards_prev: Sequence[float] = ()) -> tuple[float, float]:
    """Single-history convenience wrapper around :func:`infer_batch`."""
    mode = mode or ckpt.mode
    states = np.asarray(states, dtype=DTYPE)[None]
    n = states.shape[1]
    rtg_now = None
    if mode == "dt_baseline":
        if rtg_schedule is None:
            raise ConfigError("dt_baseline needs an RTG schedule")
        rtg_now = np.array([rtg_schedule.value(rewards_prev)])
    r, a = infer_batch(ckpt, states, np.asarray(rtgs_prev, dtype=np.float64).reshape(1, n - 1),
                       np.asarray(actions_prev, dtype=np.float64).reshape(1, n - 1), np.arange(n)[None],
                       mode, None if not noise else np.array([noise]), rtg_now)
    return float(r[0]), float(a[0])


class ModelPolicy:
    """Lockstep batch policy driving simulator rollouts from a checkpoint.

    ``rtg_tokens`` records the RTG values actually fed to the model; for the
    RTG-predicting modes they are the (noised) predictions, never the
    realized returns.
    """

    def __init__(self, ckpt: Checkpoint, mode: Optional[str] = None, sigma: float = 0.0, per_step: bool = True,
                 noise_seed: int = 0, initial_rtg: Optional[float] = None):
        self.ckpt = ckpt
        self.mode = mode or ckpt.mode
        self.sigma = sigma
        self.per_step = per_step
        self.rng = np.random.default_rng(np.random.SeedSequence([int(noise_seed), 0x401CE]))
        self.initial_rtg = initial_rtg
        if self.mode == "dt_baseline" and initial_rtg is None:
            raise ConfigError("dt_baseline needs an initial RTG")
        self.rtg_tokens: list[list[float]] = []
        self.predicted: list[list[float]] = []
        self._episode_noise = None

    def __call__(self, histories: list[EpisodeHistory]) -> list[float]:
        B = len(histories)
        t = histories[0].t
        if t == 0:
            self.rtg_tokens = [[] for _ in range(B)]
            self.predicted = [[] for _ in range(B)]
            self._episode_noise = self.sigma * self.rng.standard_normal(B) if self.sigma else None
        states = np.array([h.states for h in histories], dtype=DTYPE)
        actions = np.array([h.actions for h in histories], dtype=np.float64).reshape(B, t)
        rtgs = np.array(self.rtg_tokens, dtype=np.float64).reshape(B, t)
        timesteps = np.tile(np.arange(t + 1), (B, 1))
        noise = None
        if self.sigma:
            noise = self.sigma * self.rng.standard_normal(B) if self.per_step else self._episode_noise
        rtg_now = None
        if self.mode == "dt_baseline":
            rtg_now = np.array([self.initial_rtg - sum(h.rewards) for h in histories])
        r, a = infer_batch(self.ckpt, states, rtgs, actions, timesteps, self.mode, noise, rtg_now)
        for i in range(B):
            self.rtg_tokens[i].append(float(r[i]))
            self.predicted[i].append(float(r[i]))
        return [float(min(max(x, 0.0), self.ckpt.config.a_max)) for x in a]


def generate_trajectories(ckpt: Checkpoint, model: OpportunityModel, roster: Sequence[AdvertiserConfig], n: int,
                          noise: NoiseConfig, seed: int, iteration: int = 1,
                          keep_events: bool = True) -> list[Trajectory]:
    """Roll out ``n`` noisy episodes per advertiser, tagged ``generated:iter=<iteration>``.

    Stored RTGs are suffix sums of the realized rewards.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    advs, seeds = [], []
    for a_idx, adv in enumerate(roster):
        for j in range(n):
            advs.append(adv)
            seeds.append(derive_seed(seed, STREAM_GENERATED, iteration, a_idx, j))
    policy = ModelPolicy(ckpt, "rhat" if ckpt.mode not in ("rdt", "rhat") else ckpt.mode,
                         sigma=noise.sigma(iteration), per_step=noise.per_step,
                         noise_seed=derive_seed(seed, STREAM_GENERATED, iteration, 0x0ED))
    return run_episodes(policy, model, advs, seeds, f"generated:iter={iteration}", keep_events=keep_events)


# --------------------------------------------------------------------------------------------
# iteration


@dataclass
class IterationRecord:
    k: int
    dataset_size: int
    median_return: float
    mean_return: float
    return_quantiles: list
    generated: int = 0
    selected: int = 0
    threshold: Optional[float] = None
    bucket_thresholds: dict = field(default_factory=dict)
    eval_score: Optional[float] = None
    probe_rtg: Optional[float] = None
    dataset_digest: str = ""
    train_loss: Optional[float] = None


@dataclass
class IterationLog:
    records: list = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [r.dataset_size for r in self.records]

    @property
    def medians(self) -> list[float]:
        return [r.median_return for r in self.records]


@dataclass
class IterationResult:
    log: IterationLog
    checkpoint: Checkpoint  # the final model
    checkpoints: list  # one per round, round 1 is the plain quantile-loss model
    training_sets: list  # T(1) .. T(k_max)
    runs: list


RETURN_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def probe_batch(ts: TrainingSet, n_steps: int = 1) -> tuple:
    """First-step states of every trajectory in ``ts``: a fixed probe for tracking predicted RTG."""
    states = np.stack([t.states[:n_steps] for t in ts])
    return states


def mean_predicted_rtg(ckpt: Checkpoint, probe_states: np.ndarray) -> float:
    B = probe_states.shape[0]
    out = ckpt.forward(TokenBatch(probe_states, np.zeros((B, probe_states.shape[1], 1)),
                                  np.zeros((B, probe_states.shape[1], 1)),
                                  np.tile(np.arange(probe_states.shape[1]), (B, 1))))
    return float(out.rtg_pred.values[:, 0, 0].astype(np.float64).mean() * ckpt.rtg_scale)


def iterate(rounds: int, model: OpportunityModel, roster: Sequence[AdvertiserConfig], model_config: ModelConfig,
            train_config: TrainConfig, noise: NoiseConfig, seed: int, percentile: float = 70.0,
            n_generate: int = 16, n_behavior: int = 2, initial: Optional[TrainingSet] = None,
            checkpoint_dir=None, score_fn=None) -> IterationResult:
    """Alternate quantile-loss training with augmentation by selected self-generated episodes.

    Round k trains on T(k); for k < rounds its noisy rollouts are filtered by
    :func:`select_top` and merged into T(k+1). With ``rounds == 1`` the
    result is the plain quantile-loss model on T(1).
    """
    if rounds < 1:
        raise ContractError("rounds must be >= 1")
    ts = initial if initial is not None else generate_behavior_dataset(model, roster, n_behavior, seed)
    probe_states = probe_batch(ts)
    result = IterationResult(IterationLog(), None, [], [], [])
    for k in range(1, rounds + 1):
        path = None
        if checkpoint_dir is not None:
            path = f"{checkpoint_dir}/round{k}.ckpt"
        run, ckpt = train("rhat", model_config, train_config, ts, seed + 1000 * (k - 1), path)
        returns = ts.returns
        rec = IterationRecord(
            k=k, dataset_size=len(ts), median_return=float(np.median(returns)), mean_return=float(returns.mean()),
            return_quantiles=[float(q) for q in np.quantile(returns, RETURN_QUANTILES)],
            dataset_digest=ts.digest, train_loss=run.loss_curve[-1],
            probe_rtg=mean_predicted_rtg(ckpt, probe_states),
        )
        result.training_sets.append(ts)
        result.checkpoints.append(ckpt)
        result.runs.append(run)
        if k < rounds:
            gen = generate_trajectories(ckpt, model, roster, n_generate, noise, seed, iteration=ts.iteration)
            thresholds = selection_thresholds(ts, percentile)
            selected = select_top(gen, ts, percentile)
            rec.generated = len(gen)
            rec.selected = len(selected)
            rec.threshold = thresholds[None]
            rec.bucket_thresholds = {f"{b[0]:g}/{b[1]:g}": v for b, v in thresholds.items() if b is not None}
            if score_fn is not None:
                rec.eval_score = score_fn(gen)
            ts = merge(ts, selected)
            log.info("round %d: generated %d, selected %d, dataset %d", k, len(gen), len(selected), len(ts))
        result.log.records.append(rec)
    result.checkpoint = result.checkpoints[-1]
    return result
