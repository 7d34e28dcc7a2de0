"""Scoring with a CPA penalty, and policy evaluation across target-CPA variants."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .auction import AdvertiserConfig, EventBatch, OpportunityModel, run_episodes
from .errors import ConfigError, ContaminationError, ContractError
from .trajdata.generation import STREAM_EVAL, ConstantPolicy, derive_seed

VARIANTS = {"ds1": 1.0, "ds2_high_cpa": 1.5, "ds3_low_cpa": 0.6}


def penalty(c_a: float, c_t: float) -> float:
    """``min((c_t / c_a)^2, 1)``: 1 at or under target CPA, quadratic decay above it."""
    if not c_t > 0:
        raise ConfigError(f"target CPA must be > 0, got {c_t}")
    if c_a <= c_t:
        return 1.0
    return min((c_t / c_a) ** 2, 1.0)


@dataclass(frozen=True)
class EpisodeScore:
    score: float
    conversions: float
    budget_ratio: float
    c_a: float
    penalty: float
    spend: float


def _event_sums(events) -> tuple[float, float]:
    """(spend, conversions) over either AuctionEvents or EventBatches.

    Spend is accumulated one event at a time in arrival order, the same order
    the simulator charges the budget in, so the two agree exactly.
    """
    spend = 0.0
    conv = 0
    for ev in events:
        if isinstance(ev, EventBatch):
            paid = (ev.won * ev.exposed).astype(bool)
            for b in ev.bid[paid].tolist():
                spend += b
            conv += int(np.sum(ev.converted[paid]))
        else:
            spend += ev.bid * ev.won * ev.exposed
            conv += ev.won * ev.exposed * ev.converted
    return spend, float(conv)


def score_episode(events: Iterable, adv: AdvertiserConfig) -> EpisodeScore:
    spend, conversions = _event_sums(events)
    c_a = spend / conversions if conversions > 0 else 0.0
    p = penalty(c_a, adv.cpa)
    return EpisodeScore(score=p * conversions, conversions=conversions, budget_ratio=spend / adv.budget,
                        c_a=c_a, penalty=p, spend=spend)


@dataclass
class EvalReport:
    variant: str
    episodes: int
    score: float
    conversions: float
    budget_ratio: float
    c_a: float
    penalty: float
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(variant: str, rows: Sequence[dict]) -> EvalReport:
    if not rows:
        return EvalReport(variant, 0, 0.0, 0.0, 0.0, 0.0, 1.0, [])
    arr = lambda k: np.array([r[k] for r in rows], dtype=np.float64)  # noqa: E731
    spend, conv = arr("spend").sum(), arr("conversions").sum()
    return EvalReport(
        variant=variant,
        episodes=len(rows),
        score=float(arr("score").mean()),
        conversions=float(arr("conversions").mean()),
        budget_ratio=float(arr("budget_ratio").mean()),
        c_a=float(spend / conv) if conv > 0 else 0.0,
        penalty=float(arr("penalty").mean()),
        rows=list(rows),
    )


def average_reports(per_seed: Sequence[dict]) -> dict[str, EvalReport]:
    """Variant-wise means of EvalReports from several seeds; rows are dropped."""
    out = {}
    for variant in per_seed[0] if per_seed else ():
        reps = [d[variant] for d in per_seed if variant in d]
        mean = lambda k: float(np.mean([getattr(r, k) for r in reps]))  # noqa: E731
        out[variant] = EvalReport(variant, sum(r.episodes for r in reps), mean("score"), mean("conversions"),
                                  mean("budget_ratio"), mean("c_a"), mean("penalty"))
    return out


def eval_seeds(seed: int, n_advertisers: int, n_episodes: int) -> list[list[int]]:
    return [[derive_seed(seed, STREAM_EVAL, a, j) for j in range(n_episodes)] for a in range(n_advertisers)]


def evaluate_policy(policy_factory, model: OpportunityModel, roster: Sequence[AdvertiserConfig],
                    variants: Optional[dict] = None, n_episodes: int = 8, seed: int = 0,
                    training_seeds: Optional[set] = None, label: str = "policy") -> dict[str, EvalReport]:
    """Roll a policy out on held-out seeds for every CPA variant.

    ``policy_factory()`` must return a fresh lockstep batch policy (see
    :class:`rtgbid.pipeline.ModelPolicy`) or a per-episode policy wrapped by
    :func:`batch_from_episode_policy`.
    """
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    variants = VARIANTS if variants is None else variants
    seeds = eval_seeds(seed, len(roster), n_episodes)
    flat = [s for per_adv in seeds for s in per_adv]
    if training_seeds:
        overlap = set(flat) & set(training_seeds)
        if overlap:
            raise ContaminationError(f"{len(overlap)} evaluation seed(s) were used to build training data")
    reports = {}
    for name, mult in variants.items():
        advs = [adv.with_multiplier(adv.cpa_multiplier * mult) for adv in roster for _ in range(n_episodes)]
        trajs = run_episodes(policy_factory(), model, advs, flat, f"behavior:{label}")
        rows = []
        for traj in trajs:
            sc = score_episode(traj.events, traj.adv)
            rows.append({"advertiser": traj.adv.name, "seed": traj.seed, **asdict(sc)})
        reports[name] = aggregate(name, rows)
    return reports


def batch_from_episode_policy(policy):
    return lambda hs: [policy(h) for h in hs]


def best_constant(model: OpportunityModel, roster: Sequence[AdvertiserConfig], grid=None, n_episodes: int = 8,
                  seed: int = 0, variant: str = "ds1") -> tuple[float, float]:
    """Brute-force the best fixed bid coefficient on one variant; returns (coefficient, score)."""
    grid = np.round(np.arange(0.1, 2.01, 0.1), 2) if grid is None else grid
    best = (None, -np.inf)
    for c in grid:
        rep = evaluate_policy(lambda: batch_from_episode_policy(ConstantPolicy(float(c))), model, roster,
                              {variant: VARIANTS[variant]}, n_episodes, seed)[variant]
        if rep.score > best[1]:
            best = (float(c), rep.score)
    return best


# report files --------------------------------------------------------------------------------


def write_report(path, reports: dict, meta: Optional[dict] = None) -> None:
    """JSON report: per-variant summary plus per-episode audit rows."""
    doc = {"meta": meta or {}, "variants": {k: r.to_dict() for k, r in reports.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_report(path) -> tuple[dict, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    reports = {k: EvalReport(**v) for k, v in doc["variants"].items()}
    return reports, doc.get("meta", {})


def write_plot_data(path, records) -> None:
    """CSV of iteration vs return quantiles of the training set at that iteration."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "dataset_size", "q0", "q25", "q50", "q75", "q100", "mean", "probe_rtg"])
        for r in records:
            w.writerow([r.k, r.dataset_size, *(f"{q:.6g}" for q in r.return_quantiles), f"{r.mean_return:.6g}",
                        "" if r.probe_rtg is None else f"{r.probe_rtg:.6g}"])


METHOD_ORDER = ("dt_baseline", "bc", "rdt", "rhat", "rstar")


def comparison_table(results: dict, variants: Sequence[str] = tuple(VARIANTS)) -> str:
    """Text table, one row per method, Score/Conv/Budget per variant."""
    head1 = "| Method | " + " | ".join(f"{v} Score | {v} Conv | {v} Budget" for v in variants) + " |"
    sep = "|---" * (1 + 3 * len(variants)) + "|"
    lines = [head1, sep]
    for method in [m for m in METHOD_ORDER if m in results] + [m for m in results if m not in METHOD_ORDER]:
        reps = results[method]
        cells = []
        for v in variants:
            r = reps.get(v)
            cells += ["-"] * 3 if r is None else [f"{r.score:.2f}", f"{r.conversions:.2f}",
                                                   f"{100 * r.budget_ratio:.2f}%"]
        lines.append(f"| {method} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
