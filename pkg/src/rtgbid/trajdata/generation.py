"""Synthetic mixed-quality behavior data."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..auction import A_MAX, AdvertiserConfig, EpisodeHistory, OpportunityModel, run_episodes
from ..errors import ContractError
from .records import TrainingSet, scale_from_returns

STREAM_BEHAVIOR = 1
STREAM_GENERATED = 2
STREAM_EVAL = 3


def derive_seed(master: int, stream: int, *ids: int) -> int:
    """Stable 63-bit episode seed for ``(master, stream, *ids)``."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, stream, *ids])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class ConstantPolicy:
    coefficient: float

    @property
    def name(self) -> str:
        return f"const-{self.coefficient:g}"

    def __call__(self, history: EpisodeHistory, rng=None) -> float:
        return self.coefficient


@dataclass(frozen=True)
class PacingPolicy:
    """Proportional controller steering cumulative spend toward an even schedule."""

    start: float = 1.0
    gain: float = 2.0

    @property
    def name(self) -> str:
        return "pacer"

    def __call__(self, history: EpisodeHistory, rng=None) -> float:
        if not history.actions:
            return self.start
        s = history.sim_state
        adv = history.adv
        planned = s.step / adv.episode_steps
        spent = s.cum_cost / adv.budget
        coef = history.actions[-1] * math.exp(self.gain * (planned - spent))
        return float(min(max(coef, 0.0), A_MAX))


@dataclass(frozen=True)
class NoisyPolicy:
    """Adds N(0, sigma^2) to a base policy each step, clipped to [0, A_MAX]."""

    base: object
    sigma: float = 0.3

    @property
    def name(self) -> str:
        return f"noisy-{self.base.name}"

    def __call__(self, history: EpisodeHistory, rng=None) -> float:
        value = self.base(history, rng) + self.sigma * float(rng.normal())
        return float(min(max(value, 0.0), A_MAX))


def default_palette() -> list:
    bases = [ConstantPolicy(0.3), ConstantPolicy(0.8), ConstantPolicy(1.5), PacingPolicy()]
    return bases + [NoisyPolicy(b, 0.3) for b in bases]


def _policy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))


def rollout_policy(policy, model: OpportunityModel, advs: Sequence[AdvertiserConfig],
                   seeds: Sequence[int], provenance: str, keep_events: bool = False):
    """Run a per-episode behavior policy over many episodes in lockstep."""
    rngs = [_policy_rng(s) for s in seeds]
    return run_episodes(lambda hs: [policy(h, rngs[i]) for i, h in enumerate(hs)],
                        model, advs, seeds, provenance, keep_events=keep_events)


def generate_behavior_dataset(model: OpportunityModel, roster: Sequence[AdvertiserConfig],
                              n_episodes_per_policy: int, seed: int, palette=None,
                              env_digest: str = "") -> TrainingSet:
    """First-iteration training set from a palette of mixed-quality policies."""
    if n_episodes_per_policy < 1:
        raise ContractError("n_episodes_per_policy must be >= 1")
    palette = default_palette() if palette is None else list(palette)
    trajs = []
    for a_idx, adv in enumerate(roster):
        for p_idx, policy in enumerate(palette):
            seeds = [derive_seed(seed, STREAM_BEHAVIOR, a_idx, p_idx, j) for j in range(n_episodes_per_policy)]
            trajs.extend(rollout_policy(policy, model, [adv] * len(seeds), seeds, f"behavior:{policy.name}"))
    return TrainingSet(iteration=1, trajectories=tuple(trajs),
                       rtg_scale=scale_from_returns(t.episode_return for t in trajs), env_digest=env_digest)
