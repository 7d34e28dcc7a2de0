"""Return-based trajectory selection and nested training-set growth."""

from __future__ import annotations

import warnings
from collections import defaultdict
from typing import Sequence

import numpy as np

from ..errors import ContractError, DuplicationError
from .records import Trajectory, TrainingSet


class SelectionWarning(UserWarning):
    pass


def selection_thresholds(reference: TrainingSet, percentile: float = 70.0) -> dict:
    """Per-bucket return threshold, keyed by ``(budget, cpa_multiplier)``, plus ``None`` for the global one."""
    if not 0 < percentile < 100:
        raise ContractError(f"percentile must lie in (0, 100), got {percentile}")
    buckets = defaultdict(list)
    for t in reference:
        buckets[t.adv.bucket].append(t.episode_return)
    out = {k: float(np.percentile(v, percentile)) for k, v in buckets.items()}
    returns = [t.episode_return for t in reference]
    out[None] = float(np.percentile(returns, percentile)) if returns else float("-inf")
    return out


def select_top(candidates: Sequence[Trajectory], reference: TrainingSet,
               percentile: float = 70.0) -> list[Trajectory]:
    """Keep candidates whose return strictly exceeds the reference percentile of their bucket.

    Buckets group advertisers by budget and CPA multiplier; a candidate whose
    bucket is absent from ``reference`` is judged against the global
    percentile and a :class:`SelectionWarning` is emitted.
    """
    if not candidates:
        raise ContractError("select_top needs at least one candidate")
    thresholds = selection_thresholds(reference, percentile)
    kept = []
    for t in candidates:
        thr = thresholds.get(t.adv.bucket)
        if thr is None:
            warnings.warn(f"no reference trajectories for bucket {t.adv.bucket}; using global threshold",
                          SelectionWarning, stacklevel=2)
            thr = thresholds[None]
        if t.episode_return > thr:
            kept.append(t)
    return sorted(kept, key=lambda t: (t.seed, t.provenance, t.digest))


def merge(parent: TrainingSet, selected: Sequence[Trajectory]) -> TrainingSet:
    """Child set ``parent + selected`` at iteration ``parent.iteration + 1``."""
    seen = {(t.seed, t.provenance) for t in parent}
    for t in selected:
        key = (t.seed, t.provenance)
        if key in seen:
            raise DuplicationError(f"trajectory with seed {t.seed} and provenance {t.provenance!r} already present")
        seen.add(key)
    for t in selected:
        if t.iteration != parent.iteration:
            raise ContractError(
                f"selected trajectory tagged {t.provenance!r}, expected generated:iter={parent.iteration}"
            )
    return TrainingSet(
        iteration=parent.iteration + 1,
        trajectories=parent.trajectories + tuple(selected),
        parent_digest=parent.digest,
        rtg_scale=parent.rtg_scale,
        env_digest=parent.env_digest,
    )


def check_nesting(parent: TrainingSet, child: TrainingSet) -> bool:
    return child.parent_digest == parent.digest and child.contains(parent)
