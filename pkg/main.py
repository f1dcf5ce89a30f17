"""
Command-line entry point for engine training, replay and cycle analysis.

Subcommands:
    train    Train the hybrid SAC agent and write logs, checkpoints and a report
    replay   Replay a baseline cycle or a checkpoint's deterministic policy
    fit      Fit Boltzmann sigmoids to the work strokes of a periodic trajectory
    compare  Replay several baseline cycles and tabulate their power
    overlay  Merge training logs of several seeds into one curve table
    info     Print the effective configuration and derived constants

Exit codes: 0 success, 1 unexpected failure or interrupt, 2 configuration or
unreadable input, 3 training divergence, 4 no period or no work segment,
5 efficiency undefined (the report is still written).
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
import yaml

from agent.sac import PolicyController, SacAgent
from agent.trainer import TrainingDivergedError, evaluate_policy, train
from analysis.fit import (
    FitConvergenceError,
    FitUnderdeterminedError,
    NoPeriodError,
    NoWorkSegmentError,
    build_fitted_cycle,
    fit_report_frame,
    fit_segments,
    segment_trajectory,
)
from analysis.thermo import (
    BaselineTag,
    UnknownCycleError,
    build_baseline_cycle,
    build_report,
    compare_cycles,
    period_balance,
)
from engine.environment import DiscountDomainError, QuantumHeatEngineEnv, Rollout, RolloutError, run_schedule
from engine.qdyn import drive_frequency
from engine.schedule import ScheduleError
from shared.checkpoint import (
    Checkpoint,
    CheckpointIntegrityError,
    CheckpointVersionError,
    checkpoint_load,
    checkpoint_save,
)
from shared.config import get_logger, setup_logger, teardown_logger
from shared.settings import ConfigError, RunConfig, build_config, config_echo, load_config

logger = get_logger("qhe")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_NO_PATTERN = 4
EXIT_UNDEFINED_EFFICIENCY = 5

FLOAT_FORMAT = "%.17g"
CHECKPOINT_PREFIX = "checkpoint:"

INPUT_ERRORS = (
    ConfigError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    UnknownCycleError,
    ScheduleError,
    DiscountDomainError,
)
NO_PATTERN_ERRORS = (NoPeriodError, NoWorkSegmentError, FitUnderdeterminedError, FitConvergenceError)


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_report(report: Dict[str, Any], out_dir: Path) -> int:
    """Write report.json, append the row to reports.csv, return the exit code"""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    csv_path = out_dir / "reports.csv"
    pd.DataFrame([report]).to_csv(
        csv_path, mode="a", header=not csv_path.exists(), index=False, float_format=FLOAT_FORMAT,
    )
    logger.info(
        f"Report: <P> = {report['power']:.6f}, sigma = {report['sigma']:.6f}, "
        f"eta = {report['eta']}, ratio vs steady = {report['ratio_vs_steady']:.4f}"
    )
    if report["status"] != "ok":
        if report["steps"] and report["power"] <= 0.0:
            logger.warning(
                f"<P> = {report['power']:.6f} <= 0: the cycle consumes work instead of producing it "
                f"(heat-pump or dissipative regime), so no efficiency is reported"
            )
        return EXIT_UNDEFINED_EFFICIENCY
    return EXIT_OK


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    updates: Dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["output_dir"] = Path(args.out)
    return config.model_copy(update=updates) if updates else config


def _report_with_balance(rollout: Rollout, config: RunConfig, period: Optional[int], **extra: Any) -> Dict[str, Any]:
    report = build_report(rollout, config.engine, config.eval.steady_reference)
    report.update(extra)
    if period and len(rollout.records) >= period:
        balance = period_balance(rollout.records, period, config.engine)
        report.update({
            "period": period,
            "period_work_out": balance.work_out,
            "period_heat_hot": balance.heat_hot,
            "period_heat_cold": balance.heat_cold,
            "period_energy_residual": balance.energy_residual,
            "period_direct_efficiency": balance.direct_efficiency,
        })
    return report


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = Path(config.output_dir)
    setup_logger("qhe", log_file=str(out_dir / "qhe.log"))
    echo = config_echo(config)

    def save_periodic(checkpoint: Checkpoint) -> None:
        checkpoint_save(out_dir / f"checkpoint_{checkpoint.step:07d}.json", checkpoint)

    env = QuantumHeatEngineEnv(config.engine)
    try:
        result = train(config.train, env, config.seed, config_echo=echo, on_checkpoint=save_periodic)
    except TrainingDivergedError as e:
        path = checkpoint_save(out_dir / "checkpoint_diverged.json", e.checkpoint)
        logger.error(f"{e}; last finite state saved to {path}")
        return EXIT_DIVERGED

    write_csv(result.log, out_dir / "training_log.csv")
    write_csv(result.snapshots, out_dir / "policy_snapshots.csv")
    checkpoint_save(out_dir / "checkpoint_final.json", result.checkpoint)

    agent = result.agent
    if result.best_checkpoint is not None:
        checkpoint_save(out_dir / "checkpoint_best.json", result.best_checkpoint)
        agent = SacAgent.from_checkpoint(result.best_checkpoint, config.train, config.engine)
        logger.info(f"Best evaluation: <P> = {result.best_eval_power:.6f} at step {result.best_step}")

    rollout = evaluate_policy(agent, config.eval.rollout_steps, config.eval.gamma)
    write_csv(rollout.to_frame(), out_dir / "trajectory_best.csv")
    report = build_report(rollout, config.engine, config.eval.steady_reference)
    report.update({"source": "train", "seed": config.seed, "best_step": result.best_step})
    return write_report(report, out_dir)


def _replay_source(cycle: str, config: RunConfig):
    """Schedule or policy controller for a --cycle value, and its period if known"""
    if cycle.startswith(CHECKPOINT_PREFIX):
        checkpoint = checkpoint_load(cycle[len(CHECKPOINT_PREFIX):])
        run_config = build_config(checkpoint.config) if checkpoint.config else config
        agent = SacAgent.from_checkpoint(checkpoint, run_config.train, run_config.engine)
        return PolicyController(agent.policy, agent.spec), None
    baseline = build_baseline_cycle(cycle, config.baselines)
    return baseline.schedule, baseline.schedule.period


def cmd_replay(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = Path(config.output_dir)
    setup_logger("qhe", log_file=str(out_dir / "qhe.log"))
    gamma = config.eval.gamma if args.gamma is None else args.gamma
    steps = config.eval.rollout_steps if args.steps is None else args.steps

    source, period = _replay_source(args.cycle, config)
    rollout = run_schedule(source, steps, gamma, config.engine)
    write_csv(rollout.to_frame(), out_dir / "trajectory.csv")
    report = _report_with_balance(rollout, config, period, source=args.cycle)
    return write_report(report, out_dir)


def cmd_fit(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = Path(config.output_dir)
    setup_logger("qhe", log_file=str(out_dir / "qhe.log"))
    traj_path = Path(args.traj)
    if not traj_path.is_file():
        raise ConfigError(f"trajectory file not found: {traj_path}")
    try:
        trajectory = pd.read_csv(traj_path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read trajectory {traj_path}: {e}") from e
    missing = {"d", "u"} - set(trajectory.columns)
    if missing:
        raise ConfigError(f"trajectory {traj_path} lacks columns {sorted(missing)}")

    segments = segment_trajectory(trajectory, window=config.fit.scan_window, decimals=config.fit.decimals)
    fits = fit_segments(segments, config.fit.working_1_width, config.fit.working_2_width)
    cycle = build_fitted_cycle(segments, fits)

    table = fit_report_frame(fits)
    print(table.to_string(index=False))
    document = {
        "trajectory": str(traj_path),
        "period": sum(segment.duration for segment in segments),
        "segments": [
            {"tag": s.tag, "process": s.process.value, "duration": s.duration, "t_first": s.times[0], "t_last": s.times[-1]}
            for s in segments
        ],
        "fits": [fit.model_dump(mode="json") for fit in fits],
        "fitted_cycle": cycle.model_dump(mode="json") if cycle else None,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "fit_report.json", "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
    logger.info(f"Fit report saved to: {out_dir / 'fit_report.json'}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = Path(config.output_dir)
    setup_logger("qhe", log_file=str(out_dir / "qhe.log"))
    gamma = config.eval.gamma if args.gamma is None else args.gamma
    steps = config.eval.rollout_steps if args.steps is None else args.steps
    frame = compare_cycles(args.cycles, steps, gamma, config.engine, config.baselines)
    print(frame.to_string(index=False))
    write_csv(frame, out_dir / "cycle_comparison.csv")
    return EXIT_OK


def overlay_logs(paths: Sequence[Path]) -> pd.DataFrame:
    """Per-step mean, std, min and max of eval_avg_power across training logs"""
    frames = []
    for index, path in enumerate(paths):
        if not Path(path).is_file():
            raise ConfigError(f"training log not found: {path}")
        frame = pd.read_csv(path)
        if not {"step", "eval_avg_power"} <= set(frame.columns):
            raise ConfigError(f"{path} is not a training log (needs step, eval_avg_power)")
        frames.append(frame[["step", "eval_avg_power"]].assign(run=index))
    merged = pd.concat(frames, ignore_index=True)
    grouped = merged.groupby("step")["eval_avg_power"]
    return pd.DataFrame({
        "step": grouped.mean().index,
        "n_runs": grouped.count().to_numpy(),
        "mean": grouped.mean().to_numpy(),
        "std": grouped.std(ddof=0).to_numpy(),
        "min": grouped.min().to_numpy(),
        "max": grouped.max().to_numpy(),
    })


def cmd_overlay(args: argparse.Namespace) -> int:
    setup_logger("qhe", log_file=None)
    frame = overlay_logs([Path(p) for p in args.logs])
    path = write_csv(frame, Path(args.output))
    logger.info(f"Overlay of {len(args.logs)} logs saved to: {path}")
    return EXIT_OK


def cmd_info(args: argparse.Namespace) -> int:
    config = _load(args)
    setup_logger("qhe", log_file=None)
    spec = config.engine
    derived = {
        "eta_carnot": spec.eta_carnot,
        "eta_curzon_ahlborn": spec.eta_curzon_ahlborn,
        "drive_frequency_u_min": drive_frequency(spec, spec.u_min),
        "drive_frequency_u_max": drive_frequency(spec, spec.u_max),
        "steady_reference_power": config.eval.steady_reference,
        "substep": spec.substep,
    }
    print(yaml.safe_dump({"config": config_echo(config), "derived": derived}, sort_keys=False))
    return EXIT_OK


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Three-level quantum heat engine: SAC training, cycle replay and analysis"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="YAML config file (default: built-in defaults)")
        p.add_argument("--out", type=str, default=None, help="Output directory (overrides output_dir)")

    p_train = sub.add_parser("train", help="Train the SAC agent")
    add_common(p_train)
    p_train.add_argument("--seed", type=int, default=None, help="Run seed (overrides seed)")
    p_train.set_defaults(handler=cmd_train)

    p_replay = sub.add_parser("replay", help="Replay a cycle or a checkpoint policy")
    add_common(p_replay)
    p_replay.add_argument(
        "--cycle", type=str, default=BaselineTag.FITTED_OTTO.value,
        help="fitted, cycle1, cycle2, cycle3 or checkpoint:PATH",
    )
    p_replay.add_argument("--steps", type=int, default=None, help="Rollout length (default: eval.rollout_steps)")
    p_replay.add_argument("--gamma", type=float, default=None, help="Discount factor (default: eval.gamma)")
    p_replay.set_defaults(handler=cmd_replay)

    p_fit = sub.add_parser("fit", help="Fit the work strokes of a trajectory CSV")
    add_common(p_fit)
    p_fit.add_argument("--traj", type=str, required=True, help="Trajectory CSV written by replay")
    p_fit.set_defaults(handler=cmd_fit)

    p_compare = sub.add_parser("compare", help="Compare baseline cycles")
    add_common(p_compare)
    p_compare.add_argument(
        "--cycles", nargs="+", default=[BaselineTag.CYCLE1.value, BaselineTag.CYCLE2.value, BaselineTag.CYCLE3_RL.value],
        help="Cycle tags to replay",
    )
    p_compare.add_argument("--steps", type=int, default=None)
    p_compare.add_argument("--gamma", type=float, default=None)
    p_compare.set_defaults(handler=cmd_compare)

    p_overlay = sub.add_parser("overlay", help="Merge training logs of several seeds")
    p_overlay.add_argument("logs", nargs="+", help="training_log.csv files")
    p_overlay.add_argument("--output", type=str, default="overlay.csv", help="Output CSV")
    p_overlay.set_defaults(handler=cmd_overlay)

    p_info = sub.add_parser("info", help="Show configuration and derived constants")
    p_info.add_argument("--config", type=str, default=None)
    p_info.set_defaults(handler=cmd_info)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Command-line entry point"""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except INPUT_ERRORS as e:
        logger.error(str(e))
        return EXIT_INPUT
    except NO_PATTERN_ERRORS as e:
        logger.error(str(e))
        return EXIT_NO_PATTERN
    except RolloutError as e:
        logger.error(str(e))
        return EXIT_FAILURE
    except KeyboardInterrupt:
        logger.warning("\nInterrupted by user")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Command failed: {e}", exc_info=True)
        return EXIT_FAILURE
    finally:
        teardown_logger("qhe")


if __name__ == "__main__":
    sys.exit(main())
