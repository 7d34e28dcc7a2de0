"""Stochastic budget-constrained auction environment.

Each decision step draws a Poisson number of impression opportunities. The
advertiser bids ``coefficient * pcvr * target_cpa`` on every one of them,
wins when the bid strictly exceeds the opponent eCPM, pays its own bid on
exposure, and converts with probability pcvr. All random draws for a step
are taken before the bids are known, so two policies run with the same seed
face identical traffic.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, EpisodeOverError

A_MAX = 4.0
EPISODE_STEPS = 48
RECENT_WINDOW = 3


@dataclass(frozen=True)
class OpportunityModel:
    opportunities_per_step: float = 60.0
    opponent_ecpm_mu: float = 1.25
    opponent_ecpm_sigma: float = 0.5
    p_exposure: float = 0.85
    pcvr_alpha: float = 2.0
    pcvr_beta: float = 48.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.opportunities_per_step > 0:
            raise ConfigError("opportunities_per_step must be > 0")
        if not self.opponent_ecpm_sigma > 0:
            raise ConfigError("opponent_ecpm_sigma must be > 0")
        if not 0.0 <= self.p_exposure <= 1.0:
            raise ConfigError("p_exposure must lie in [0, 1]")
        if not (self.pcvr_alpha > 0 and self.pcvr_beta > 0):
            raise ConfigError("pcvr_alpha and pcvr_beta must be > 0")


@dataclass(frozen=True)
class AdvertiserConfig:
    budget: float
    target_cpa: float
    episode_steps: int = EPISODE_STEPS
    cpa_multiplier: float = 1.0
    name: str = ""

    def __post_init__(self):
        if not self.budget > 0:
            raise ConfigError("budget must be > 0")
        if not self.target_cpa > 0:
            raise ConfigError("target_cpa must be > 0")
        if not self.cpa_multiplier > 0:
            raise ConfigError("cpa_multiplier must be > 0")
        if self.episode_steps < 1:
            raise ConfigError("episode_steps must be >= 1")

    @property
    def cpa(self) -> float:
        """Target CPA in force, after the dataset-variant multiplier."""
        return self.target_cpa * self.cpa_multiplier

    @property
    def bucket(self) -> tuple[float, float]:
        return (self.budget, self.cpa_multiplier)

    def with_multiplier(self, multiplier: float) -> "AdvertiserConfig":
        return dataclasses.replace(self, cpa_multiplier=multiplier)


@dataclass(frozen=True)
class AuctionEvent:
    bid: float
    opponent_price: float
    won: int
    exposed: int
    converted: int
    cost: float
    pcvr: float


@dataclass(frozen=True)
class StepStats:
    wins: int
    opportunities: int
    price_sum: float


@dataclass(frozen=True)
class SimState:
    budget: float
    step: int = 0
    remaining_budget: float = None
    cum_cost: float = 0.0
    cum_conversions: int = 0
    cum_wins: int = 0
    cum_exposures: int = 0
    cum_opportunities: int = 0
    recent: tuple[StepStats, ...] = ()

    def __post_init__(self):
        if self.remaining_budget is None:
            object.__setattr__(self, "remaining_budget", float(self.budget))

    @classmethod
    def initial(cls, adv: AdvertiserConfig) -> "SimState":
        return cls(budget=float(adv.budget))


@dataclass
class Opportunities:
    """Pre-drawn randomness for one step's impression opportunities."""

    pcvr: np.ndarray
    opponent_price: np.ndarray
    exposure_u: np.ndarray
    conversion_u: np.ndarray

    def __len__(self):
        return len(self.pcvr)


def draw_opportunities(model: OpportunityModel, rng: np.random.Generator) -> Opportunities:
    n = int(rng.poisson(model.opportunities_per_step))
    return Opportunities(
        pcvr=rng.beta(model.pcvr_alpha, model.pcvr_beta, size=n),
        opponent_price=rng.lognormal(model.opponent_ecpm_mu, model.opponent_ecpm_sigma, size=n),
        exposure_u=rng.random(n),
        conversion_u=rng.random(n),
    )


@dataclass(frozen=True)
class EventBatch:
    """Column-wise auction events of one step; iterating yields :class:`AuctionEvent`."""

    bid: np.ndarray
    opponent_price: np.ndarray
    won: np.ndarray
    exposed: np.ndarray
    converted: np.ndarray
    cost: np.ndarray
    pcvr: np.ndarray

    def __len__(self):
        return len(self.bid)

    def __iter__(self):
        for i in range(len(self.bid)):
            yield AuctionEvent(float(self.bid[i]), float(self.opponent_price[i]), int(self.won[i]),
                               int(self.exposed[i]), int(self.converted[i]), float(self.cost[i]),
                               float(self.pcvr[i]))


def resolve_step(state: SimState, coefficient: float, opps: Opportunities, model: OpportunityModel,
                 adv: AdvertiserConfig) -> tuple[EventBatch, int, SimState]:
    """Resolve one step's auctions given already-drawn opportunities."""
    if not math.isfinite(coefficient) or coefficient < 0:
        raise ContractError(f"bid coefficient must be finite and non-negative, got {coefficient}")
    if not 0 <= state.step < adv.episode_steps:
        raise EpisodeOverError(f"step {state.step} is outside the episode of {adv.episode_steps} steps")

    bids = coefficient * opps.pcvr * adv.cpa
    won = bids > opps.opponent_price
    exposed = won & (opps.exposure_u < model.p_exposure)
    remaining = state.remaining_budget
    cum_cost = state.cum_cost
    # budget is consumed in arrival order; a bid it cannot cover is a forced loss
    for i in np.flatnonzero(won):
        bid = float(bids[i])
        if bid > remaining:
            won[i] = exposed[i] = False
        elif exposed[i]:
            remaining = remaining - bid
            cum_cost = cum_cost + bid
    converted = exposed & (opps.conversion_u < opps.pcvr)
    cost = np.where(exposed, bids, 0.0)
    events = EventBatch(bids, opps.opponent_price, won.astype(np.int8), exposed.astype(np.int8),
                        converted.astype(np.int8), cost, opps.pcvr)

    wins = int(won.sum())
    conversions = int(converted.sum())
    stats = StepStats(wins, len(opps), float(opps.opponent_price.sum()))
    nxt = dataclasses.replace(
        state,
        step=state.step + 1,
        remaining_budget=remaining,
        cum_cost=cum_cost,
        cum_conversions=state.cum_conversions + conversions,
        cum_wins=state.cum_wins + wins,
        cum_exposures=state.cum_exposures + int(exposed.sum()),
        cum_opportunities=state.cum_opportunities + len(opps),
        recent=(state.recent + (stats,))[-RECENT_WINDOW:],
    )
    return events, conversions, nxt


def run_step(state: SimState, coefficient: float, model: OpportunityModel, adv: AdvertiserConfig,
             rng: np.random.Generator) -> tuple[EventBatch, int, SimState]:
    """Advance one decision step; returns (events, conversions, next state)."""
    if not math.isfinite(coefficient) or coefficient < 0:
        raise ContractError(f"bid coefficient must be finite and non-negative, got {coefficient}")
    if not 0 <= state.step < adv.episode_steps:
        raise EpisodeOverError(f"step {state.step} is outside the episode of {adv.episode_steps} steps")
    return resolve_step(state, coefficient, draw_opportunities(model, rng), model, adv)


def compute_rtg(rewards: Sequence[float]) -> list[float]:
    """Suffix sums: ``R_t = sum(rewards[t:])``."""
    if len(rewards) == 0:
        raise ContractError("compute_rtg needs at least one reward")
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc += float(rewards[t])
        out[t] = acc
    return out


@dataclass
class EpisodeHistory:
    """What a policy may observe before choosing the coefficient for step ``t``."""

    adv: AdvertiserConfig
    sim_state: SimState
    states: list = field(default_factory=list)  # featurized s_0..s_t
    actions: list = field(default_factory=list)  # a_0..a_{t-1}
    rewards: list = field(default_factory=list)  # r_0..r_{t-1}

    @property
    def t(self) -> int:
        return self.sim_state.step


Policy = Callable[[EpisodeHistory], float]
BatchPolicy = Callable[[list], Sequence[float]]


def episode_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def run_episodes(batch_policy: BatchPolicy, model: OpportunityModel, advs: Sequence[AdvertiserConfig],
                 seeds: Sequence[int], provenance: str, keep_events: bool = True) -> list:
    """Roll out several independent episodes in lockstep.

    ``batch_policy`` receives the list of histories of all episodes at step
    ``t`` and returns one coefficient per episode; this lets a sequence model
    score every episode in a single forward pass.
    """
    from .trajdata.records import Step, Trajectory, featurize

    if len(advs) != len(seeds):
        raise ContractError("advs and seeds must have equal length")
    n = len(advs)
    if n == 0:
        return []
    steps = advs[0].episode_steps
    if any(a.episode_steps != steps for a in advs):
        raise ContractError("lockstep rollout needs equal episode lengths")
    rngs = [episode_rng(s) for s in seeds]
    hist = [EpisodeHistory(adv, SimState.initial(adv)) for adv in advs]
    events: list[list[EventBatch]] = [[] for _ in range(n)]
    for _ in range(steps):
        for h in hist:
            h.states.append(featurize(h.sim_state, h.adv))
        coefs = [float(c) for c in batch_policy(hist)]
        for i, h in enumerate(hist):
            ev, reward, nxt = run_step(h.sim_state, coefs[i], model, h.adv, rngs[i])
            if keep_events:
                events[i].append(ev)
            h.actions.append(coefs[i])
            h.rewards.append(float(reward))
            h.sim_state = nxt

    out = []
    for i, h in enumerate(hist):
        rtg = compute_rtg(h.rewards)
        traj_steps = tuple(
            Step(state=h.states[t], action=h.actions[t], reward=h.rewards[t], rtg=rtg[t])
            for t in range(steps)
        )
        out.append(Trajectory(steps=traj_steps, adv=h.adv, provenance=provenance, seed=int(seeds[i]),
                              events=tuple(events[i]) if keep_events else None,
                              final_state=h.sim_state))
    return out


def run_episode(policy: Policy, model: OpportunityModel, adv: AdvertiserConfig, seed: int,
                provenance: str = "behavior:custom"):
    """Roll out one full episode of ``adv.episode_steps`` steps."""
    return run_episodes(lambda hs: [policy(hs[0])], model, [adv], [seed], provenance)[0]


# environment parameter file ----------------------------------------------------------------


def strict_build(cls, data: dict, where: str):
    """Instantiate dataclass ``cls`` from a mapping; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def default_roster() -> list[AdvertiserConfig]:
    return [
        AdvertiserConfig(budget=2400.0, target_cpa=100.0, name="adv0"),
        AdvertiserConfig(budget=3200.0, target_cpa=80.0, name="adv1"),
        AdvertiserConfig(budget=4000.0, target_cpa=120.0, name="adv2"),
        AdvertiserConfig(budget=4800.0, target_cpa=150.0, name="adv3"),
    ]


def environment_to_dict(model: OpportunityModel, roster: Sequence[AdvertiserConfig]) -> dict:
    return {
        "opportunity_model": dataclasses.asdict(model),
        "roster": [dataclasses.asdict(a) for a in roster],
    }


def load_environment(path) -> tuple[OpportunityModel, list[AdvertiserConfig]]:
    """Read an environment file: ``{"opportunity_model": {...}, "roster": [{...}, ...]}``.

    Omitted opportunity-model keys take their defaults.
    """
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    unknown = sorted(set(data) - {"opportunity_model", "roster"})
    if unknown:
        raise ConfigError(f"{path}: unknown key {unknown[0]!r}")
    model = strict_build(OpportunityModel, data.get("opportunity_model", {}), "opportunity_model")
    roster_data = data.get("roster")
    if roster_data is None:
        roster = default_roster()
    else:
        roster = [strict_build(AdvertiserConfig, r, f"roster[{i}]") for i, r in enumerate(roster_data)]
    if not roster:
        raise ConfigError("roster: at least one advertiser is required")
    return model, roster


def environment_digest(model: OpportunityModel, roster: Sequence[AdvertiserConfig]) -> str:
    import hashlib
    blob = json.dumps(environment_to_dict(model, roster), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
