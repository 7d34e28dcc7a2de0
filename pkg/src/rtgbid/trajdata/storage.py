"""Line-oriented dataset files and the CSV import/export adapter.

A dataset file is newline-delimited JSON: one header record, then for every
trajectory a ``traj`` record followed by one ``step`` record per step. Reals
are written with 9 significant digits, which round-trips float32 exactly.
"""

from __future__ import annotations

import csv
import json
import warnings
from collections import OrderedDict
from pathlib import Path


from ..auction import AdvertiserConfig, SimState, StepStats, compute_rtg
from ..errors import LoadError, SchemaError
from .records import Step, Trajectory, TrainingSet, featurize, format_number, scale_from_returns

SCHEMA_VERSION = 1
FEATURE_NAMES = ("time_frac", "budget_frac", "spend_rate", "cpa_ratio", "win_rate", "price_ratio")


def _num(x) -> str:
    return format_number(x)


def _adv_json(adv: AdvertiserConfig) -> str:
    return ('{"name":%s,"budget":%s,"target_cpa":%s,"cpa_multiplier":%s,"episode_steps":%d}'
            % (json.dumps(adv.name), _num(adv.budget), _num(adv.target_cpa), _num(adv.cpa_multiplier),
               adv.episode_steps))


def dump_lines(ts: TrainingSet):
    yield ('{"kind":"header","schema_version":%d,"iteration":%d,"parent_digest":%s,"env_digest":%s,'
           '"rtg_scale":%s,"n_trajectories":%d,"digest":%s}'
           % (SCHEMA_VERSION, ts.iteration, json.dumps(ts.parent_digest), json.dumps(ts.env_digest),
              _num(ts.rtg_scale), len(ts), json.dumps(ts.digest)))
    for traj in ts:
        yield ('{"kind":"traj","provenance":%s,"seed":%d,"adv":%s,"n_steps":%d,"episode_return":%s}'
               % (json.dumps(traj.provenance), traj.seed, _adv_json(traj.adv), len(traj.steps),
                  _num(traj.episode_return)))
        for t, s in enumerate(traj.steps):
            yield ('{"kind":"step","t":%d,"state":[%s],"action":%s,"reward":%s,"rtg":%s}'
                   % (t, ",".join(_num(v) for v in s.state), _num(s.action), _num(s.reward), _num(s.rtg)))


def save(ts: TrainingSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in dump_lines(ts):
            fh.write(line)
            fh.write("\n")


def _require(rec: dict, keys, lineno: int, kind: str):
    for k in keys:
        if k not in rec:
            raise LoadError(f"{kind} record misses field {k!r}", lineno)


def load(path) -> TrainingSet:
    """Read a dataset file written by :func:`save`, verifying schema and digests."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        # missing trailing newline: the last line was cut short
        if lines:
            raise LoadError("file truncated (no terminating newline)", len(lines))

    def parse(i: int) -> dict:
        if i >= len(lines):
            raise LoadError("unexpected end of file", i + 1)
        try:
            rec = json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise LoadError(f"malformed record ({exc.msg})", i + 1) from None
        if not isinstance(rec, dict) or "kind" not in rec:
            raise LoadError("malformed record", i + 1)
        return rec

    head = parse(0)
    if head["kind"] != "header":
        raise LoadError("first record must be the header", 1)
    _require(head, ("schema_version", "iteration", "parent_digest", "rtg_scale", "n_trajectories", "digest"), 1,
             "header")
    if head["schema_version"] != SCHEMA_VERSION:
        raise LoadError(f"schema version {head['schema_version']} is not {SCHEMA_VERSION}", 1)

    trajs = []
    i = 1
    for _ in range(head["n_trajectories"]):
        rec = parse(i)
        if rec["kind"] != "traj":
            raise LoadError(f"expected a traj record, got {rec['kind']!r}", i + 1)
        _require(rec, ("provenance", "seed", "adv", "n_steps"), i + 1, "traj")
        traj_line = i + 1
        try:
            adv = AdvertiserConfig(**rec["adv"])
        except (TypeError, ValueError) as exc:
            raise LoadError(f"bad advertiser record ({exc})", traj_line) from None
        steps = []
        i += 1
        for t in range(rec["n_steps"]):
            srec = parse(i)
            if srec["kind"] != "step" or srec.get("t") != t:
                raise LoadError(f"expected step {t}", i + 1)
            _require(srec, ("state", "action", "reward", "rtg"), i + 1, "step")
            try:
                steps.append(Step(tuple(srec["state"]), srec["action"], srec["reward"], srec["rtg"]))
            except (TypeError, ValueError) as exc:
                raise LoadError(f"bad step record ({exc})", i + 1) from None
            i += 1
        rewards = [s.reward for s in steps]
        if steps and [s.rtg for s in steps] != compute_rtg(rewards):
            raise LoadError("rtg column is not the suffix sum of rewards", traj_line)
        try:
            trajs.append(Trajectory(tuple(steps), adv, rec["provenance"], int(rec["seed"])))
        except ValueError as exc:
            raise LoadError(str(exc), traj_line) from None
    if i != len(lines):
        raise LoadError("trailing records after the declared trajectories", i + 1)

    ts = TrainingSet(iteration=head["iteration"], trajectories=tuple(trajs), parent_digest=head["parent_digest"],
                     rtg_scale=float(head["rtg_scale"]), env_digest=head.get("env_digest", ""))
    if ts.digest != head["digest"]:
        raise LoadError("content digest does not match the header", 1)
    return ts


# ---------------------------------------------------------------------------------------------
# external per-step tables

IDENTITY_FIELDS = ("episode_id", "step", *FEATURE_NAMES, "action", "reward", "provenance", "seed",
                   "adv_name", "budget", "target_cpa", "cpa_multiplier")
RAW_COUNTERS = ("remaining_budget", "cum_cost", "cum_conversions", "step_wins", "step_opportunities",
                "step_price_sum")
KNOWN_FIELDS = set(IDENTITY_FIELDS) | set(RAW_COUNTERS) | {"rtg"}


def export_csv(ts: TrainingSet, path) -> None:
    """Write one row per step with the canonical field names as headers."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IDENTITY_FIELDS)
        for ep, traj in enumerate(ts):
            a = traj.adv
            for t, s in enumerate(traj.steps):
                w.writerow([ep, t, *(_num(v) for v in s.state), _num(s.action), _num(s.reward), traj.provenance,
                            traj.seed, a.name, _num(a.budget), _num(a.target_cpa), _num(a.cpa_multiplier)])


def identity_mapping() -> dict:
    return {f: f for f in IDENTITY_FIELDS}


def load_mapping(path) -> dict:
    """Column-mapping file: JSON object ``{"source column": "field name"}``."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise SchemaError("column mapping must be a JSON object")
    return data


class ImportReport(list):
    """Warnings raised while importing; ``skipped`` counts rejected episodes."""

    skipped = 0


def import_external(path, schema_map: dict, episode_steps: int = 48, default_budget=None,
                    default_target_cpa=None, rtg_scale=None):
    """Build a first-iteration training set from a per-step CSV table.

    ``schema_map`` maps source column names to field names. Required fields
    are ``episode_id``, ``step``, ``action`` and ``reward``, plus either the
    six state features or the raw counters (``remaining_budget``,
    ``cum_cost``, ``cum_conversions`` before acting, and ``step_wins``,
    ``step_opportunities``, ``step_price_sum`` during the step) from which the
    features are derived. Any ``rtg`` column is ignored and recomputed.

    Returns ``(training_set, report)``.
    """
    bad = sorted(set(schema_map.values()) - KNOWN_FIELDS)
    if bad:
        raise SchemaError(f"unknown target field {bad[0]!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        missing_src = [c for c in schema_map if c not in columns]
        if missing_src:
            raise SchemaError(f"mapped column {missing_src[0]!r} not in file")
        rows = [{schema_map[c]: v for c, v in row.items() if c in schema_map} for row in reader]

    fields = set(schema_map.values())
    for req in ("episode_id", "step", "action", "reward"):
        if req not in fields:
            raise SchemaError(f"required field {req!r} is not mapped")
    has_features = all(f in fields for f in FEATURE_NAMES)
    if not has_features:
        need = set(RAW_COUNTERS) | {"budget", "target_cpa"}
        if default_budget is not None:
            need.discard("budget")
        if default_target_cpa is not None:
            need.discard("target_cpa")
        absent = sorted(need - fields)
        if absent:
            raise SchemaError(f"state features unmapped and raw field {absent[0]!r} unavailable")

    episodes: "OrderedDict[str, list]" = OrderedDict()
    for r in rows:
        episodes.setdefault(r["episode_id"], []).append(r)

    report = ImportReport()
    trajs = []
    for ep_id, ep_rows in episodes.items():
        ep_rows.sort(key=lambda r: int(r["step"]))
        if len(ep_rows) != episode_steps or [int(r["step"]) for r in ep_rows] != list(range(episode_steps)):
            report.skipped += 1
            report.append(f"episode {ep_id}: {len(ep_rows)} steps, expected {episode_steps}")
            continue
        first = ep_rows[0]
        adv = AdvertiserConfig(
            budget=float(first.get("budget", default_budget)),
            target_cpa=float(first.get("target_cpa", default_target_cpa)),
            episode_steps=episode_steps,
            cpa_multiplier=float(first.get("cpa_multiplier", 1.0)),
            name=first.get("adv_name", ""),
        )
        rewards = [float(r["reward"]) for r in ep_rows]
        rtg = compute_rtg(rewards)
        if has_features:
            states = [tuple(float(r[f]) for f in FEATURE_NAMES) for r in ep_rows]
        else:
            states = _featurize_raw(ep_rows, adv)
        steps = tuple(Step(states[t], float(ep_rows[t]["action"]), rewards[t], rtg[t]) for t in range(episode_steps))
        seed = int(first["seed"]) if "seed" in first else _seed_from_id(ep_id)
        provenance = first.get("provenance") or "behavior:imported"
        trajs.append(Trajectory(steps, adv, provenance, seed))
    if report.skipped:
        warnings.warn(f"skipped {report.skipped} malformed episode(s)", stacklevel=2)
    scale = rtg_scale if rtg_scale is not None else scale_from_returns(t.episode_return for t in trajs)
    return TrainingSet(iteration=1, trajectories=tuple(trajs), rtg_scale=scale), report


def _seed_from_id(ep_id: str) -> int:
    try:
        return int(ep_id)
    except ValueError:
        import hashlib
        return int.from_bytes(hashlib.sha256(ep_id.encode()).digest()[:8], "little") >> 1


def _featurize_raw(rows, adv: AdvertiserConfig):
    out = []
    recent: tuple = ()
    for r in rows:
        state = SimState(budget=adv.budget, step=int(r["step"]), remaining_budget=float(r["remaining_budget"]),
                         cum_cost=float(r["cum_cost"]), cum_conversions=int(float(r["cum_conversions"])),
                         recent=recent)
        out.append(featurize(state, adv))
        recent = (recent + (StepStats(int(float(r["step_wins"])), int(float(r["step_opportunities"])),
                                      float(r["step_price_sum"])),))[-3:]
    return out
