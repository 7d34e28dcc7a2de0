"""Command-line entry point: ``rtgbid <subcommand> [flags]``.

Every invocation writes one self-describing run directory under the output
root (``--output-root``, else ``$RTGBID_OUTPUT_ROOT``, else ``./runs``):
machine-readable artifacts, copies of the input config files, and
``manifest.json`` with the resolved configuration and sha256 digests of
inputs and outputs. Progress goes to standard error.

Exit codes: 0 success, 1 usage or validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .auction import (
    AdvertiserConfig, OpportunityModel, default_roster, environment_digest, load_environment, strict_build,
)
from .errors import ConfigError, LoadError, RtgBidError, SchemaError
from .evaluation import (
    VARIANTS, average_reports, comparison_table, evaluate_policy, read_report, write_plot_data, write_report,
)
from .experiment import DeskConfig, file_digest, run_seed
from .pipeline import MODES, IterationRecord, ModelPolicy, generate_trajectories, iterate, train
from .seqmodel import Checkpoint, check_gradients, toy_config
from .trajdata import TrainingSet, export_csv, generate_behavior_dataset, load, save

log = logging.getLogger("rtgbid")

OUTPUT_ROOT_ENV = "RTGBID_OUTPUT_ROOT"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with exit status 1 (not 2) for usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# configuration --------------------------------------------------------------------------------


def _read_json(path: str, what: str):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what}: file {path!r} does not exist")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what}: malformed JSON in {path!r} ({exc})") from None


def load_run_config(path: Optional[str]) -> DeskConfig:
    if path is None:
        return DeskConfig()
    data = _read_json(path, "--config")
    if not isinstance(data, dict):
        raise ConfigError("--config: expected a JSON object")
    return DeskConfig.from_dict(data)


def load_roster(path: str) -> list[AdvertiserConfig]:
    data = _read_json(path, "--roster")
    if not isinstance(data, list) or not data:
        raise ConfigError("--roster: expected a non-empty JSON list of advertisers")
    return [strict_build(AdvertiserConfig, r, f"roster[{i}]") for i, r in enumerate(data)]


def _environment(args) -> tuple[OpportunityModel, list[AdvertiserConfig]]:
    if args.env is not None:
        if not Path(args.env).is_file():
            raise ConfigError(f"--env: file {args.env!r} does not exist")
        model, roster = load_environment(args.env)
    else:
        model, roster = OpportunityModel(), default_roster()
    if args.roster is not None:
        roster = load_roster(args.roster)
    return model, roster


def _require_file(path: str, flag: str) -> str:
    if not Path(path).is_file():
        raise ConfigError(f"{flag}: file {path!r} does not exist")
    return path


def _overrides(cfg: DeskConfig, args) -> DeskConfig:
    changes = {}
    for name in ("rounds", "percentile", "n_behavior", "n_generate", "n_eval"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "seeds", None):
        changes["seeds"] = tuple(args.seeds)
    return dataclasses.replace(cfg, **changes) if changes else cfg


# run directory --------------------------------------------------------------------------------


class RunDir:
    def __init__(self, args, command: str, resolved: dict, inputs: dict):
        root = Path(args.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")
        blob = json.dumps({"command": command, "config": resolved, "inputs": inputs}, sort_keys=True)
        name = args.run_name or f"{command}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}"
        self.path = root / name
        if self.path.exists() and any(self.path.iterdir()):
            if not args.overwrite:
                raise ConfigError(f"--run-name: run directory {str(self.path)!r} exists; pass --overwrite")
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.resolved = resolved
        self.inputs = inputs

    def file(self, name: str) -> str:
        return str(self.path / name)

    def copy_in(self, src: Optional[str], name: str, default: Optional[dict] = None) -> None:
        """Copy a config file into the run directory, or write the defaults that were used."""
        if src is not None:
            shutil.copyfile(src, self.file(name))
        elif default is not None:
            _write_json(self.file(name), default)

    def finish(self, extra: Optional[dict] = None) -> None:
        outputs = {}
        for p in sorted(self.path.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                outputs[str(p.relative_to(self.path))] = file_digest(p)
        manifest = {"version": __version__, "command": self.command, "config": self.resolved,
                    "inputs": self.inputs, "outputs": outputs, **(extra or {})}
        _write_json(self.file("manifest.json"), manifest)
        log.info("run directory: %s", self.path)


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _inputs(**paths) -> dict:
    return {k: {"path": v, "sha256": file_digest(v)} for k, v in paths.items() if v is not None}


def _env_dict(model, roster) -> dict:
    return {"opportunity_model": dataclasses.asdict(model), "roster": [dataclasses.asdict(a) for a in roster]}


def _copy_env(run: RunDir, args, model, roster) -> None:
    run.copy_in(args.env, "env.json", _env_dict(model, roster) if args.roster is None else None)
    run.copy_in(args.roster, "roster.json")
    if args.env is None and args.roster is not None:
        _write_json(run.file("env.json"), {"opportunity_model": dataclasses.asdict(model)})


# subcommands ----------------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = _overrides(load_run_config(args.config), args)
    model, roster = _environment(args)
    resolved = {"desk": cfg.to_dict(), "environment": _env_dict(model, roster), "seed": args.seed,
                "csv": args.csv}
    run = RunDir(args, "gen-data", resolved, _inputs(config=args.config, env=args.env, roster=args.roster))
    run.copy_in(args.config, "config.json", cfg.to_dict())
    _copy_env(run, args, model, roster)
    log.info("generating %d episodes per policy per advertiser", cfg.n_behavior)
    ts = generate_behavior_dataset(model, roster, cfg.n_behavior, args.seed,
                                   env_digest=environment_digest(model, roster))
    save(ts, run.file("dataset.jsonl"))
    if args.csv:
        export_csv(ts, run.file("dataset.csv"))
    run.finish({"dataset_digest": ts.digest, "n_trajectories": len(ts)})


def cmd_train(args) -> None:
    cfg = load_run_config(args.config)
    _require_file(args.data, "--data")
    ts = load(args.data)
    resolved = {"desk": cfg.to_dict(), "mode": args.mode, "seed": args.seed}
    run = RunDir(args, "train", resolved, _inputs(config=args.config, data=args.data))
    run.copy_in(args.config, "config.json", cfg.to_dict())
    log.info("training %s on %d trajectories", args.mode, len(ts))
    tr, ckpt = train(args.mode, cfg.model, cfg.train, ts, args.seed, run.file("model.ckpt"))
    _write_json(run.file("train_run.json"), dataclasses.asdict(dataclasses.replace(tr, checkpoint_path="model.ckpt")))
    run.finish({"dataset_digest": ts.digest, "final_loss": tr.loss_curve[-1]})


def cmd_generate(args) -> None:
    cfg = load_run_config(args.config)
    model, roster = _environment(args)
    ckpt = Checkpoint.load(_require_file(args.checkpoint, "--checkpoint"))
    resolved = {"desk": cfg.to_dict(), "environment": _env_dict(model, roster), "seed": args.seed,
                "n": args.n, "iteration": args.iteration}
    run = RunDir(args, "generate", resolved, _inputs(config=args.config, env=args.env, roster=args.roster,
                                                     checkpoint=args.checkpoint))
    run.copy_in(args.config, "config.json", cfg.to_dict())
    _copy_env(run, args, model, roster)
    trajs = generate_trajectories(ckpt, model, roster, args.n, cfg.noise, args.seed, args.iteration,
                                  keep_events=False)
    ts = TrainingSet(iteration=args.iteration, trajectories=tuple(trajs), rtg_scale=ckpt.rtg_scale,
                     env_digest=environment_digest(model, roster))
    save(ts, run.file("generated.jsonl"))
    run.finish({"n_trajectories": len(ts), "mean_return": float(ts.returns.mean())})


def _iteration_log_doc(records: list[IterationRecord]) -> list[dict]:
    return [dataclasses.asdict(r) for r in records]


def cmd_iterate(args) -> None:
    cfg = _overrides(load_run_config(args.config), args)
    model, roster = _environment(args)
    if args.data is not None:
        _require_file(args.data, "--data")
    resolved = {"desk": cfg.to_dict(), "environment": _env_dict(model, roster), "baselines": args.baselines}
    run = RunDir(args, "iterate", resolved, _inputs(config=args.config, env=args.env, roster=args.roster,
                                                    data=args.data))
    run.copy_in(args.config, "config.json", cfg.to_dict())
    _copy_env(run, args, model, roster)
    logs = {}
    for seed in cfg.seeds:
        out = run.path / f"seed{seed}"
        if args.baselines:
            if args.data is not None:
                raise ConfigError("--data: cannot be combined with --baselines (T(1) is generated per seed)")
            res = run_seed(seed, cfg, model, roster, out_dir=str(out))
            records = res.iteration.log.records
        else:
            out.mkdir(parents=True, exist_ok=True)
            initial = load(args.data) if args.data is not None else None
            result = iterate(cfg.rounds, model, roster, cfg.model, cfg.train, cfg.noise, seed, cfg.percentile,
                             cfg.n_generate, cfg.n_behavior, initial=initial, checkpoint_dir=str(out))
            for k, ts in enumerate(result.training_sets, start=1):
                save(ts, str(out / f"dataset_T{k}.jsonl"))
            write_plot_data(str(out / "plot_data.csv"), result.log.records)
            records = result.log.records
        _write_json(str(out / "iteration_log.json"), _iteration_log_doc(records))
        logs[str(seed)] = [r.median_return for r in records]
        log.info("seed %d: medians %s", seed, logs[str(seed)])
    run.finish({"medians": logs})


def cmd_eval(args) -> None:
    cfg = _overrides(load_run_config(args.config), args)
    model, roster = _environment(args)
    ckpt = Checkpoint.load(_require_file(args.checkpoint, "--checkpoint"))
    mode = args.mode or ckpt.mode
    if mode == "dt_baseline" and args.initial_rtg is None:
        raise ConfigError("--initial-rtg: required for dt_baseline checkpoints")
    variants = {v: VARIANTS[v] for v in (args.variants or list(VARIANTS))}
    training_seeds = None
    if args.training_data is not None:
        training_seeds = {t.seed for t in load(_require_file(args.training_data, "--training-data"))}
    resolved = {"desk": cfg.to_dict(), "environment": _env_dict(model, roster), "mode": mode, "seed": args.seed,
                "variants": variants, "initial_rtg": args.initial_rtg}
    run = RunDir(args, "eval", resolved, _inputs(config=args.config, env=args.env, roster=args.roster,
                                                 checkpoint=args.checkpoint, training_data=args.training_data))
    run.copy_in(args.config, "config.json", cfg.to_dict())
    _copy_env(run, args, model, roster)
    reports = evaluate_policy(lambda: ModelPolicy(ckpt, mode, initial_rtg=args.initial_rtg), model, roster,
                              variants, cfg.n_eval, args.seed, training_seeds, label=mode)
    meta = {"method": args.label or mode, "seed": args.seed, "episodes_per_advertiser": cfg.n_eval}
    if args.initial_rtg is not None:
        meta["initial_rtg"] = args.initial_rtg
    write_report(run.file("report.json"), reports, meta)
    for name, rep in reports.items():
        log.info("%s: score %.3f conversions %.2f budget %.1f%%", name, rep.score, rep.conversions,
                 100 * rep.budget_ratio)
    run.finish({"scores": {k: r.score for k, r in reports.items()}})


def cmd_gradcheck(args) -> None:
    cfg = load_run_config(args.config)
    config = toy_config() if args.toy else cfg.model
    modes = args.modes or ["rdt", "rhat"]
    resolved = {"model": dataclasses.asdict(config), "modes": modes, "seed": args.seed, "tol": args.tol}
    run = RunDir(args, "gradcheck", resolved, _inputs(config=args.config))
    results = {}
    for mode in modes:
        rep = check_gradients(mode, config, seed=args.seed, tol=args.tol)
        results[mode] = {"ok": rep.ok, "worst": rep.worst, "max_rel_error": rep.max_rel_error}
        log.info("%s: worst relative error %.3g (%s)", mode, rep.worst, "ok" if rep.ok else "FAILED")
    _write_json(run.file("gradcheck.json"), results)
    run.finish({"ok": all(r["ok"] for r in results.values())})
    failed = [m for m, r in results.items() if not r["ok"]]
    if failed:
        raise RtgBidError(f"gradient check failed for {', '.join(failed)}")


def _collect_reports(run_dirs: list[str]):
    """method -> list of per-seed report dicts, plus per-seed iteration records."""
    per_method: dict[str, list] = {}
    iteration_logs = []
    for d in run_dirs:
        root = Path(d)
        if not root.is_dir():
            raise ConfigError(f"--runs: directory {d!r} does not exist")
        for path in sorted(root.rglob("report*.json")):
            reports, meta = read_report(path)
            method = meta.get("method") or path.stem.replace("report_", "")
            per_method.setdefault(method, []).append(reports)
        for path in sorted(root.rglob("iteration_log.json")):
            iteration_logs.append((str(path.parent.relative_to(root)),
                                   [IterationRecord(**r) for r in json.loads(path.read_text())]))
    if not per_method and not iteration_logs:
        raise ConfigError("--runs: no report or iteration log files found")
    return per_method, iteration_logs


def cmd_report(args) -> None:
    per_method, iteration_logs = _collect_reports(args.runs)
    resolved = {"runs": args.runs}
    run = RunDir(args, "report", resolved, {})
    means = {method: average_reports(seeds) for method, seeds in per_method.items()}
    table = comparison_table(means) if means else ""
    with open(run.file("table.md"), "w", encoding="utf-8") as fh:
        fh.write(table)
    for name, records in iteration_logs:
        write_plot_data(run.file(f"plot_data_{name.replace(os.sep, '_') or 'run'}.csv"), records)
    if table:
        sys.stderr.write(table)
    run.finish({"methods": sorted(means), "iteration_series": [n for n, _ in iteration_logs]})


# argument parsing -----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, env: bool = True, desk: bool = False) -> None:
    g = p.add_argument_group("run directory")
    g.add_argument("--output-root", help=f"parent of the run directory (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    g.add_argument("--run-name", help="run directory name (default: <command>-<config digest>)")
    g.add_argument("--overwrite", action="store_true", help="replace an existing run directory of the same name")
    g.add_argument("--threads", type=int, default=None, help="cap on numeric library worker threads")
    g.add_argument("-v", "--verbose", action="store_true", help="debug-level progress on standard error")
    g.add_argument("--config", help="JSON run config (desk defaults when omitted); unknown keys are errors")
    if env:
        g.add_argument("--env", help="JSON environment file with opportunity_model and optional roster")
        g.add_argument("--roster", help="JSON list of advertisers; overrides the roster of --env")
    if desk:
        g.add_argument("--seeds", type=int, nargs="+", help="master seeds (overrides config)")
        g.add_argument("--rounds", type=int, help="iteration rounds (overrides config)")
        g.add_argument("--percentile", type=float, help="selection percentile (overrides config)")
        g.add_argument("--n-behavior", type=int, help="behavior episodes per policy and advertiser")
        g.add_argument("--n-generate", type=int, help="generated episodes per advertiser and round")
        g.add_argument("--n-eval", type=int, help="evaluation episodes per advertiser and variant")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rtgbid", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"rtgbid {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the first-iteration behavior dataset",
                       description="Roll out the behavior policy palette and save T(1) as JSONL.")
    p.add_argument("--seed", type=int, required=True, help="master seed")
    p.add_argument("--n-behavior", type=int, help="episodes per policy and advertiser (overrides config)")
    p.add_argument("--csv", action="store_true", help="also export a flat CSV of every step")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model on a dataset",
                       description="Train a model of the given mode on a saved dataset.")
    p.add_argument("--data", required=True, help="dataset JSONL file")
    p.add_argument("--mode", required=True, choices=MODES, help="training objective")
    p.add_argument("--seed", type=int, required=True, help="initialization and minibatch seed")
    _common(p, env=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="roll out a checkpoint with RTG noise",
                       description="Generate noisy self-rollouts of a checkpoint as a dataset file.")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.add_argument("--n", type=int, required=True, help="episodes per advertiser")
    p.add_argument("--seed", type=int, required=True, help="master seed")
    p.add_argument("--iteration", type=int, default=1, help="iteration tag and noise level index (default 1)")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("iterate", help="run the generate-select-retrain loop",
                       description="Run the improvement loop for every seed; with --baselines also train "
                                   "and evaluate every comparison method.")
    p.add_argument("--data", help="initial dataset (default: generated per seed)")
    p.add_argument("--baselines", action="store_true",
                   help="also train rdt, bc and dt_baseline and write per-method evaluation reports")
    _common(p, desk=True)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the CPA variants",
                       description="Evaluate a checkpoint on held-out seeds for each target-CPA variant.")
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.add_argument("--seed", type=int, required=True, help="evaluation master seed")
    p.add_argument("--mode", choices=MODES, help="acting mode (default: the checkpoint's mode)")
    p.add_argument("--initial-rtg", type=float, help="starting RTG for dt_baseline")
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS), help="variants to run (default: all)")
    p.add_argument("--training-data", help="dataset whose seeds must not be reused for evaluation")
    p.add_argument("--label", help="method name recorded in the report (default: the mode)")
    _common(p, desk=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check",
                       description="Compare analytic gradients of the training loss with central differences.")
    p.add_argument("--toy", action="store_true", help="use the 1-layer, width-8 toy model")
    p.add_argument("--modes", nargs="+", choices=MODES, help="losses to check (default: rdt rhat)")
    p.add_argument("--seed", type=int, default=0, help="parameter and batch seed (default 0)")
    p.add_argument("--tol", type=float, default=1e-3, help="maximum relative error (default 1e-3)")
    _common(p, env=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render comparison table and plot data",
                       description="Collect evaluation reports and iteration logs into a comparison table "
                                   "and quantile series.")
    p.add_argument("--runs", nargs="+", required=True, help="run directories to collect from")
    _common(p, env=False)
    p.set_defaults(func=cmd_report)
    return parser


def _run(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            args.func(args)
    else:
        args.func(args)
    return EXIT_OK


def main(argv: Optional[list] = None) -> int:
    """Parse ``argv`` and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return _run(args)
    except (ConfigError, SchemaError, LoadError) as exc:
        sys.stderr.write(f"rtgbid {args.command}: invalid input: {exc}\n")
        return EXIT_VALIDATION
    except (RtgBidError, OSError, ValueError) as exc:
        sys.stderr.write(f"rtgbid {args.command}: error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
