"""Desk-scale benchmark: the iteration loop plus baselines, evaluated on every CPA variant.

Everything here is a thin composition of :mod:`rtgbid.pipeline`,
:mod:`rtgbid.trajdata` and :mod:`rtgbid.evaluation`. Artifacts are written so
that two runs with the same config and seeds are byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence


from .auction import AdvertiserConfig, OpportunityModel, default_roster, environment_digest, strict_build
from .errors import ConfigError
from .evaluation import VARIANTS, average_reports, comparison_table, evaluate_policy, write_plot_data, write_report
from .pipeline import IterationResult, ModelPolicy, NoiseConfig, TrainConfig, iterate, train
from .seqmodel import Checkpoint, ModelConfig
from .trajdata import generate_behavior_dataset, save

log = logging.getLogger(__name__)


def desk_model_config() -> ModelConfig:
    return ModelConfig(n_layers=2, n_heads=2, embed_dim=32, context_steps=10)


@dataclass(frozen=True)
class DeskConfig:
    """Sizes small enough for a laptop CPU; see README for the timing budget."""

    model: ModelConfig = field(default_factory=desk_model_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    rounds: int = 3
    percentile: float = 70.0
    n_behavior: int = 4
    n_generate: int = 16
    n_eval: int = 16
    # initial RTG for the plain decision transformer, as fractions of the largest behavior return
    rtg_sweep: tuple = (0.5, 0.7, 0.9, 0.99, 1.2)
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds: must be >= 1")
        if not 0 <= self.percentile < 100:
            raise ConfigError("percentile: must lie in [0, 100)")
        for name in ("n_behavior", "n_generate", "n_eval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if not self.rtg_sweep or min(self.rtg_sweep) <= 0:
            raise ConfigError("rtg_sweep: needs at least one positive fraction")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        object.__setattr__(self, "rtg_sweep", tuple(float(x) for x in self.rtg_sweep))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DeskConfig":
        data = dict(data)
        sub = {"model": ModelConfig, "train": TrainConfig, "noise": NoiseConfig}
        for key, typ in sub.items():
            if key in data:
                if not isinstance(data[key], dict):
                    raise ConfigError(f"{key}: expected an object")
                data[key] = strict_build(typ, data[key], key)
        return strict_build(cls, data, "config")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class SeedResult:
    seed: int
    iteration: IterationResult
    reports: dict  # method -> variant -> EvalReport
    dt_baseline_rtg: float
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    seconds: dict = field(default_factory=dict)  # wall time per phase, kept out of the summary

    @property
    def medians(self) -> list[float]:
        return self.iteration.log.medians

    def score(self, method: str, variant: str = "ds1") -> float:
        return self.reports[method][variant].score


def _eval(ckpt: Checkpoint, mode: str, model, roster, variants, cfg: DeskConfig, seed: int, training_seeds,
          initial_rtg: Optional[float] = None) -> dict:
    factory = lambda: ModelPolicy(ckpt, mode, initial_rtg=initial_rtg)  # noqa: E731
    return evaluate_policy(factory, model, roster, variants, cfg.n_eval, seed, training_seeds, label=mode)


def run_seed(seed: int, cfg: DeskConfig = DeskConfig(), model: Optional[OpportunityModel] = None,
             roster: Optional[Sequence[AdvertiserConfig]] = None, out_dir=None,
             evaluate: bool = True) -> SeedResult:
    """One seed of the benchmark.

    Builds T(1), runs the loop for ``cfg.rounds`` rounds, trains the rdt, bc and
    dt_baseline models on T(1), and evaluates rdt, bc, dt_baseline, the
    round-1 quantile model (rhat) and the final model (rstar).
    """
    model = OpportunityModel() if model is None else model
    roster = default_roster() if roster is None else list(roster)
    start = time.perf_counter()
    env = environment_digest(model, roster)
    ts = generate_behavior_dataset(model, roster, cfg.n_behavior, seed, env_digest=env)
    ckpt_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = out_dir
    log.info("seed %d: iterating %d rounds on %d behavior episodes", seed, cfg.rounds, len(ts))
    res = iterate(cfg.rounds, model, roster, cfg.model, cfg.train, cfg.noise, seed, cfg.percentile,
                  cfg.n_generate, cfg.n_behavior, initial=ts, checkpoint_dir=ckpt_dir)
    result = SeedResult(seed, res, {}, float("nan"))
    if out_dir is not None:
        for k, t in enumerate(res.training_sets, start=1):
            save(t, os.path.join(out_dir, f"dataset_T{k}.jsonl"))
        write_plot_data(os.path.join(out_dir, "plot_data.csv"), res.log.records)
    result.seconds["iterate"] = time.perf_counter() - start
    if not evaluate:
        _record_artifacts(result, out_dir)
        return result

    training_seeds = {t.seed for t in res.training_sets[-1]}
    baselines = {}
    for offset, mode in enumerate(("rdt", "bc", "dt_baseline"), start=1):
        path = None if out_dir is None else os.path.join(out_dir, f"{mode}.ckpt")
        log.info("seed %d: training %s", seed, mode)
        _, baselines[mode] = train(mode, cfg.model, cfg.train, ts, seed + 7 * offset, path)

    reports = {}
    log.info("seed %d: evaluating", seed)
    # the plain decision transformer gets its best initial RTG on ds1
    best = None
    for frac in cfg.rtg_sweep:
        rtg0 = frac * float(ts.returns.max())
        rep = _eval(baselines["dt_baseline"], "dt_baseline", model, roster, {"ds1": VARIANTS["ds1"]}, cfg, seed,
                    training_seeds, rtg0)["ds1"]
        if best is None or rep.score > best[1]:
            best = (rtg0, rep.score)
    result.dt_baseline_rtg = best[0]
    reports["dt_baseline"] = _eval(baselines["dt_baseline"], "dt_baseline", model, roster, VARIANTS, cfg, seed,
                                   training_seeds, best[0])
    reports["bc"] = _eval(baselines["bc"], "bc", model, roster, VARIANTS, cfg, seed, training_seeds)
    reports["rdt"] = _eval(baselines["rdt"], "rdt", model, roster, VARIANTS, cfg, seed, training_seeds)
    reports["rhat"] = _eval(res.checkpoints[0], "rhat", model, roster, VARIANTS, cfg, seed, training_seeds)
    reports["rstar"] = _eval(res.checkpoint, "rhat", model, roster, VARIANTS, cfg, seed, training_seeds)
    result.reports = reports
    if out_dir is not None:
        for method, reps in reports.items():
            meta = {"method": method, "seed": seed, "episodes_per_advertiser": cfg.n_eval}
            if method == "dt_baseline":
                meta["initial_rtg"] = best[0]
            write_report(os.path.join(out_dir, f"report_{method}.json"), reps, meta)
    result.seconds["total"] = time.perf_counter() - start
    _record_artifacts(result, out_dir)
    return result


def _record_artifacts(result: SeedResult, out_dir) -> None:
    if out_dir is None:
        return
    for name in sorted(os.listdir(out_dir)):
        path = os.path.join(out_dir, name)
        if os.path.isfile(path):
            result.artifacts[name] = file_digest(path)


def mean_reports(results: Sequence[SeedResult]) -> dict:
    """Per method and variant, an EvalReport whose numbers are means over seeds."""
    return {m: average_reports([r.reports[m] for r in results]) for m in results[0].reports}


def summarize(results: Sequence[SeedResult]) -> dict:
    """Machine-readable summary of a multi-seed run (no timings, so it is reproducible)."""
    doc = {"seeds": {}}
    for r in results:
        doc["seeds"][str(r.seed)] = {
            "medians": r.medians,
            "dataset_sizes": r.iteration.log.sizes,
            "probe_rtg": [rec.probe_rtg for rec in r.iteration.log.records],
            "dt_baseline_rtg": r.dt_baseline_rtg,
            "scores_ds1": {m: reps["ds1"].score for m, reps in r.reports.items()},
            "artifacts": r.artifacts,
        }
    if results and results[0].reports:
        doc["mean"] = {m: {v: rep.score for v, rep in reps.items()} for m, reps in mean_reports(results).items()}
    return doc


def write_summary(path, results: Sequence[SeedResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summarize(results), fh, indent=1, sort_keys=True)
        fh.write("\n")
    if results and results[0].reports:
        table = comparison_table(mean_reports(results))
        with open(os.path.splitext(path)[0] + "_table.md", "w", encoding="utf-8") as fh:
            fh.write(table)

