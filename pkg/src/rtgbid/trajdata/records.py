"""Step, trajectory and training-set records plus state featurization."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..auction import AdvertiserConfig, SimState
from ..errors import ContractError

STATE_DIM = 6
CPA_RATIO_CAP = 5.0
PROVENANCE_RE = re.compile(r"^(behavior:[A-Za-z0-9_.+\-=]+|generated:iter=\d+)$")


def f32(x: float) -> float:
    """Round to the nearest float32 value, returned as a Python float."""
    return float(np.float32(x))


def featurize(state: SimState, adv: AdvertiserConfig) -> tuple[float, ...]:
    """Six-feature observation of an advertiser before it acts at ``state.step``.

    (elapsed fraction, remaining budget fraction, spend rate relative to an
    even schedule, realized CPA over target, recent win rate, recent mean
    opponent price over target CPA).
    """
    T = adv.episode_steps
    B = adv.budget
    t = state.step
    spend_rate = state.cum_cost / (B * max(t, 1) / T)
    if state.cum_conversions > 0:
        cpa_ratio = min(state.cum_cost / state.cum_conversions / adv.cpa, CPA_RATIO_CAP)
    else:
        cpa_ratio = 0.0
    opps = sum(s.opportunities for s in state.recent)
    if opps:
        win_rate = sum(s.wins for s in state.recent) / opps
        price = sum(s.price_sum for s in state.recent) / opps / adv.cpa
    else:
        win_rate = price = 0.0
    return tuple(f32(v) for v in (t / T, state.remaining_budget / B, spend_rate, cpa_ratio, win_rate, price))


def format_number(x: float) -> str:
    return format(float(x), ".9g")


@dataclass(frozen=True)
class Step:
    state: tuple[float, ...]
    action: float
    reward: float
    rtg: float

    def __post_init__(self):
        object.__setattr__(self, "state", tuple(f32(v) for v in self.state))
        object.__setattr__(self, "action", f32(self.action))
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "rtg", float(self.rtg))
        if len(self.state) != STATE_DIM:
            raise ContractError(f"state needs {STATE_DIM} features, got {len(self.state)}")


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    adv: AdvertiserConfig
    provenance: str
    seed: int
    events: tuple | None = field(default=None, compare=False, repr=False)
    final_state: SimState | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not PROVENANCE_RE.match(self.provenance):
            raise ContractError(f"malformed provenance tag {self.provenance!r}")
        if not self.steps:
            raise ContractError("a trajectory needs at least one step")

    @property
    def episode_return(self) -> float:
        return self.steps[0].rtg

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    @property
    def actions(self) -> np.ndarray:
        return np.array([s.action for s in self.steps], dtype=np.float32)

    @property
    def states(self) -> np.ndarray:
        return np.array([s.state for s in self.steps], dtype=np.float32)

    @property
    def rtgs(self) -> np.ndarray:
        return np.array([s.rtg for s in self.steps])

    @property
    def iteration(self) -> int | None:
        if self.provenance.startswith("generated:iter="):
            return int(self.provenance.split("=", 1)[1])
        return None

    def canonical(self) -> str:
        a = self.adv
        head = "|".join([self.provenance, str(self.seed), a.name, format_number(a.budget),
                         format_number(a.target_cpa), format_number(a.cpa_multiplier),
                         str(a.episode_steps)])
        body = ";".join(
            ",".join(format_number(v) for v in (*s.state, s.action, s.reward, s.rtg)) for s in self.steps
        )
        return head + "#" + body

    @cached_property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


@dataclass(frozen=True)
class TrainingSet:
    """An iteration-indexed collection of trajectories.

    ``rtg_scale`` is the largest episode return of the first-iteration set
    and is carried unchanged through every merge.
    """

    iteration: int
    trajectories: tuple[Trajectory, ...]
    parent_digest: str = ""
    rtg_scale: float = 1.0
    env_digest: str = ""

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if self.iteration < 0:
            raise ContractError("iteration must be non-negative")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.trajectories:
            h.update(t.digest.encode())
        return h.hexdigest()

    @property
    def returns(self) -> np.ndarray:
        return np.array([t.episode_return for t in self.trajectories])

    def contains(self, other: "TrainingSet") -> bool:
        mine = {t.digest for t in self.trajectories}
        return all(t.digest in mine for t in other.trajectories)


def scale_from_returns(returns) -> float:
    returns = list(returns)
    top = max(returns) if returns else 0.0
    return float(top) if top > 0 else 1.0
