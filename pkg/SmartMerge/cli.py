"""Command line entry point: ``smartmerge {train,eval,rollout,sweep,inspect}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .baselines import Controller, make_controller
from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig, load_config, override
from .errors import CheckpointError, ConfigError, ScenarioError, SmartMergeError, UnknownMethodError, UsageError
from .evaluation import (
    LEARNED_METHODS,
    METHODS,
    SCENE_FAMILIES,
    SceneFamily,
    build_scene,
    check_methods,
    driver_type_sweep,
    export_profiles,
    run_benchmark,
    run_scenes,
    scenario_seeds,
    sweep_table,
    sweep_trend,
)
from .networks import PolicyNet, load_policy
from .rollout import PolicyController, run_episode
from .scenario import ScenarioSpec, build_world
from .trajectory import trajectory_frame, write_trajectory
from .training import train_direct, train_stage1, train_stage2
from .utils import RunManifest, check_path, resolve_output_dir

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
USAGE_ERRORS = (ConfigError, ScenarioError, UnknownMethodError, UsageError)
BASELINES = ("idm", "fsm_idm", "robot", "random")
CHECKPOINT_NAMES = {"idas": "stage2.ckpt", "idas-v": "stage1.ckpt", "idas-direct": "direct.ckpt"}


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def _checkpoint_arg(value: Optional[str]) -> Optional[Checkpoint]:
    return load_checkpoint(value) if value else None


def _start(command: str, config: RunConfig, seed: int, out: Path) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    return RunManifest(command=command, config_path=str(config.path) if config.path else None,
                       seed=int(seed), output_dir=str(out))


# --- train -----------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    config = override(config, seed=args.seed, workers=args.workers)
    train = config.train
    out = resolve_output_dir(args.out)
    resume = _checkpoint_arg(args.resume)
    start = _checkpoint_arg(args.checkpoint)
    progress = not args.quiet

    if args.stage == "2" and resume is None and start is None:
        raise UsageError("stage 2 needs a stage-1 checkpoint: pass --checkpoint PATH or --resume PATH")

    manifest = _start(f"train --stage {args.stage}", config, train.seed, out)
    if args.stage == "1":
        train_stage1(train, out, resume=resume, progress=progress)
    elif args.stage == "direct":
        train_direct(train, out, resume=resume, progress=progress)
    elif args.stage == "2":
        train_stage2(resume if resume is not None else start, train, out, progress=progress)
    else:
        if resume is not None and resume.stage == "stage2":
            first = None
        else:
            first = train_stage1(train, out, resume=resume, progress=progress)
        train_stage2(first if first is not None else resume, train, out, progress=progress)
    manifest.finish(0).write()
    log.info("training outputs written to %s", out)
    return 0


# --- eval ------------------------------------------------------------------------

def _checkpoint_file(source: Path, method: str, explicit: Optional[str]) -> Optional[Path]:
    if explicit:
        return check_path(explicit)
    if source.is_dir():
        path = source / CHECKPOINT_NAMES[method]
        return path if path.exists() else None
    return source if method == "idas" else None


def load_policies(checkpoint: str, methods: Sequence[str], extra: Dict[str, Optional[str]]) -> Dict[str, PolicyNet]:
    """Policies for ``idas`` and every learned method requested.

    ``checkpoint`` is either a stage-2 checkpoint file or a training output directory
    holding ``stage2.ckpt``, ``stage1.ckpt`` and ``direct.ckpt``.
    """
    source = check_path(checkpoint)
    policies: Dict[str, PolicyNet] = {}
    for method in ["idas"] + [m for m in methods if m in LEARNED_METHODS and m != "idas"]:
        path = _checkpoint_file(source, method, extra.get(method))
        if path is None:
            raise CheckpointError(
                f"method '{method}' needs a {LEARNED_METHODS[method]} checkpoint, none found under {source}"
            )
        policies[method] = load_policy(load_checkpoint(path))
        log.info("%s policy loaded from %s", method, path)
    return policies


def _methods(text: Optional[str], default: Sequence[str]) -> List[str]:
    if not text:
        return list(default)
    return check_methods([m.strip() for m in text.split(",") if m.strip()])


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    values = {k: v for k, v in (("seed", args.seed), ("scenarios", args.scenarios), ("workers", args.workers))
              if v is not None}
    evaluation = replace(config.eval, **values).validate() if values else config.eval
    methods = _methods(args.methods, evaluation.methods)
    policies = load_policies(args.checkpoint, methods, {"idas-v": args.idas_v, "idas-direct": args.idas_direct})
    out = resolve_output_dir(args.out)
    manifest = _start("eval", config, evaluation.seed, out)

    if args.scene_family:
        family = SceneFamily(args.scene_family, evaluation.epsilon_s)
        seeds = scenario_seeds(evaluation.seed, evaluation.scene_count)
        table = run_scenes(policies, methods, family, seeds, evaluation.max_steps, out)
        log.info("%d scenes of family %s written to %s", len(table), family.tag, out)
    else:
        _, summary = run_benchmark(policies, methods, evaluation, out, save_logs=args.save_trajectories,
                                   progress=not args.quiet)
        print(summary.to_string(index=False))
    manifest.finish(0).write()
    return 0


# --- rollout -----------------------------------------------------------------------

def rollout_controllers(spec: ScenarioSpec, driver: str, rng: np.random.Generator) -> Dict[int, Controller]:
    """Vehicles tagged ``policy`` follow ``driver``; the rest follow their own tag."""
    if driver in BASELINES:
        main: Controller = make_controller(driver, rng)
    else:
        main = PolicyController(load_policy(load_checkpoint(driver)), rng)
    shared: Dict[str, Controller] = {}
    controllers: Dict[int, Controller] = {}
    for vid, entry in enumerate(spec.vehicles):
        if entry.controller == "policy":
            controllers[vid] = main
        else:
            if entry.controller not in shared:
                shared[entry.controller] = make_controller(entry.controller, rng)
            controllers[vid] = shared[entry.controller]
    return controllers


def cmd_rollout(args: argparse.Namespace) -> int:
    spec = ScenarioSpec.load(args.scenario)
    seed = spec.seed if args.seed is None else args.seed
    controllers = rollout_controllers(spec, args.driver, np.random.default_rng(seed))
    out = resolve_output_dir(args.out)
    manifest = RunManifest(command=f"rollout {args.driver}", config_path=str(args.scenario), seed=int(seed),
                           output_dir=str(out))

    world = build_world(spec)
    result = run_episode(world, controllers, args.max_steps, watch=[v.id for v in world.vehicles])
    frame = trajectory_frame(result)
    write_trajectory(frame, out / "trajectory.csv")
    export_profiles(frame, out / "profiles")
    log.info("episode ended by %s after %d steps", result.terminated_by, len(result.steps))
    manifest.finish(0).write()
    return 0


# --- sweep -------------------------------------------------------------------------

def cmd_sweep(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    evaluation = config.eval
    seed = evaluation.seed if args.seed is None else args.seed
    repetitions = args.repetitions or evaluation.repetitions
    points = args.points or evaluation.sweep_points
    policy = load_policy(load_checkpoint(check_path(args.checkpoint)))
    out = resolve_output_dir(args.out)
    manifest = _start("sweep", config, seed, out)

    base = build_scene(SceneFamily("s3", evaluation.epsilon_s), seed)
    grid = np.linspace(-2.0, 2.0, points)
    rows = driver_type_sweep(policy, base, grid, repetitions, seed, evaluation.max_steps, out)
    rows.to_csv(out / "sweep_runs.csv", index=False)
    table = sweep_table(rows)
    table.to_csv(out / "sweep.csv", index=False)
    trend = sweep_trend(rows, evaluation.bootstrap_samples, seed)
    pd.DataFrame([trend]).to_csv(out / "sweep_trend.csv", index=False)
    print(table.to_string(index=False))
    print(f"spearman rho {trend['rho']:.3f} [{trend['ci_low']:.3f}, {trend['ci_high']:.3f}]")
    manifest.finish(0).write()
    return 0


# --- inspect -----------------------------------------------------------------------

def cmd_inspect(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(check_path(args.checkpoint))
    print(f"version {checkpoint.version}")
    print(f"stage {checkpoint.stage}")
    print(f"step {checkpoint.step} episodes {checkpoint.episodes}")
    print(f"networks {', '.join(checkpoint.families())}")
    for name, data in checkpoint.blocks.items():
        if name.startswith("opt.") and not args.all:
            continue
        print(f"{name:48s} {str(tuple(data.shape)):20s} norm {float(np.linalg.norm(data)):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smartmerge",
                                     description="Interaction-aware merging: train, evaluate, inspect")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="run the curriculum stages")
    train.add_argument("config", nargs="?", default=None, help="JSON config, defaults to the built-in constants")
    train.add_argument("--stage", choices=("1", "2", "all", "direct"), default="all")
    train.add_argument("--resume", default=None, help="checkpoint to continue the same stage from")
    train.add_argument("--checkpoint", default=None, help="stage-1 checkpoint stage 2 starts from")
    train.add_argument("--out", default="runs/train")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--workers", type=int, default=None)
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="benchmark methods or run representative scenes")
    evaluate.add_argument("checkpoint", help="stage-2 checkpoint or training output directory")
    evaluate.add_argument("--config", default=None)
    evaluate.add_argument("--methods", default=None, help=f"comma separated, from {', '.join(METHODS)}")
    group = evaluate.add_mutually_exclusive_group()
    group.add_argument("--scenarios", type=int, default=None)
    group.add_argument("--scene-family", choices=SCENE_FAMILIES, default=None)
    evaluate.add_argument("--idas-v", default=None, help="stage-1 checkpoint for idas-v")
    evaluate.add_argument("--idas-direct", default=None, help="direct checkpoint for idas-direct")
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--workers", type=int, default=None)
    evaluate.add_argument("--save-trajectories", action="store_true")
    evaluate.add_argument("--out", default="results")
    evaluate.set_defaults(handler=cmd_eval)

    rollout = commands.add_parser("rollout", help="run one scenario spec and export its trajectory")
    rollout.add_argument("driver", help=f"checkpoint path or baseline ({', '.join(BASELINES)})")
    rollout.add_argument("scenario", help="scenario spec JSON")
    rollout.add_argument("--seed", type=int, default=None, help="sampling seed, defaults to the spec seed")
    rollout.add_argument("--max-steps", type=int, default=600)
    rollout.add_argument("--out", default="results/rollout")
    rollout.set_defaults(handler=cmd_rollout)

    sweep = commands.add_parser("sweep", help="merge time against the merging driver's type")
    sweep.add_argument("checkpoint")
    sweep.add_argument("--config", default=None)
    sweep.add_argument("--points", type=int, default=None)
    sweep.add_argument("--repetitions", type=int, default=None)
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--out", default="results/sweep")
    sweep.set_defaults(handler=cmd_sweep)

    inspect = commands.add_parser("inspect", help="print a checkpoint's header and blocks")
    inspect.add_argument("checkpoint")
    inspect.add_argument("--all", action="store_true", help="include optimizer state blocks")
    inspect.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except USAGE_ERRORS as err:
        log.error("%s", err)
        return 2
    except (SmartMergeError, OSError) as err:
        log.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
