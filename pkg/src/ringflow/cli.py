"""Experiment front-end.

Subcommands
-----------
train     curriculum (or single-stage) policy optimization over seeds
eval      deterministic ring episodes for a checkpoint or human baseline
transfer  zero-shot highway run; delay metrics + lane-tagged trajectories
plotdata  time-space plot triplets from a trajectory CSV, one file per lane
baseline  eval/transfer without a checkpoint

Every run writes its manifest before any compute, listing each output
file exactly once. All failures exit nonzero with a one-line
``error: ...`` diagnostic on stderr. For a fixed (config, seed) every
output file is byte-identical across invocations.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__, seeding
from .config import (ConfigError, ExperimentConfig, RunManifest, config_hash,
                     load_config, parse_config_text, serialize_config,
                     version_hash, write_manifest)
from .highway_env import HighwaySim, write_highway_trace
from .policy import GaussianPolicy, load_checkpoint
from .ring_env import RingEnv
from .trpo import (CurriculumSchedule, TRAIN_LOG_HEADER, ValueFunction,
                   run_curriculum, train_stage, write_training_log)

TRANSFER_METRICS_HEADER = ("policy_id,seed,avg_stopped_time,mean_speed,"
                           "throughput,collisions")
EVAL_METRICS_HEADER = "policy_id,episode,env_seed,metric_m"


class CliError(Exception):
    """Raised for any user-facing failure; message is a single line."""


def _load(args) -> ExperimentConfig:
    overrides = args.override or []
    if args.config is None:
        return parse_config_text("", overrides=overrides)
    return load_config(args.config, overrides=overrides)


def _out_root(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, cfg.run_id)


def _seed_list(cfg: ExperimentConfig, n_override: int | None) -> list[int]:
    n = cfg.n_seeds if n_override is None else n_override
    if n < 1:
        raise CliError("seed count must be >= 1")
    return [cfg.seed + i for i in range(n)]


def _load_policy(checkpoint: str | None, obs_dim: int):
    """Returns (policy, params, policy_id); human baseline when no
    checkpoint is given."""
    if checkpoint is None:
        return None, None, "human"
    try:
        policy, params = load_checkpoint(checkpoint)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {checkpoint}: {exc}")
    except ValueError as exc:
        raise CliError(f"bad checkpoint {checkpoint}: {exc}")
    if policy.obs_dim != obs_dim:
        raise CliError(
            f"architecture mismatch: checkpoint expects {policy.obs_dim} "
            f"observation inputs, config produces {obs_dim}")
    stem = os.path.splitext(os.path.basename(checkpoint))[0]
    return policy, params, stem


def _start_run(cfg: ExperimentConfig, outputs: list[str],
               seeds: list[int]) -> str:
    """Create the run directory and write config + manifest up front."""
    root = _out_root(cfg)
    os.makedirs(root, exist_ok=True)
    for rel in outputs:
        os.makedirs(os.path.dirname(os.path.join(root, rel)) or ".",
                    exist_ok=True)
    with open(os.path.join(root, "config.cfg"), "w", newline="") as fh:
        fh.write(serialize_config(cfg))
    manifest = RunManifest(
        experiment_id=cfg.run_id, config_hash=config_hash(cfg),
        version=__version__, version_hash=version_hash(),
        seeds=tuple(seeds), outputs=tuple(["config.cfg"] + outputs))
    write_manifest(os.path.join(root, "manifest.json"), manifest)
    return root


# -- train -------------------------------------------------------------------

def _checkpoint_names(stage: int, iterations: int) -> list[str]:
    names = [f"policy_stage{stage}_iter{i:04d}.txt"
             for i in range(50, iterations + 1, 50)]
    names.append(f"policy_stage{stage}_final.txt")
    return names


def cmd_train(args) -> int:
    cfg = _load(args)
    seeds = _seed_list(cfg, args.seeds)
    n_av = cfg.ring_env.n_av
    if cfg.curriculum_enabled:
        schedule = CurriculumSchedule.build(
            n_av, n_pretrain=cfg.n_pretrain, n_train=cfg.n_train)
    else:
        schedule = None
        single_iters = cfg.n_pretrain * (n_av - 1) + cfg.n_train

    outputs = []
    for k in seeds:
        outputs.append(f"seed{k}/training_log.csv")
        outputs.append(f"seed{k}/policy_final.txt")
        if schedule is not None:
            for s, st in enumerate(schedule.stages, start=1):
                outputs += [f"seed{k}/checkpoints/{n}"
                            for n in _checkpoint_names(s, st.iterations)]
        else:
            outputs += [f"seed{k}/checkpoints/{n}"
                        for n in _checkpoint_names(1, single_iters)]
    root = _start_run(cfg, outputs, seeds)

    for k in seeds:
        seed_dir = os.path.join(root, f"seed{k}")
        ckpt_dir = os.path.join(seed_dir, "checkpoints")
        policy = GaussianPolicy(obs_dim=cfg.ring_env.obs_dim)
        if schedule is not None:
            result = run_curriculum(policy, schedule, cfg.ring_env,
                                    cfg.train, seed=k,
                                    checkpoint_dir=ckpt_dir)
            params, log_rows = result.final_params, result.log_rows
        else:
            rng = seeding.substream(k, seeding.TRAIN)
            params = policy.init_params(rng)
            value_fn = ValueFunction(policy.obs_dim,
                                     cfg.train.value_hidden, rng)
            log_rows = []
            stage = train_stage(policy, params, value_fn, cfg.ring_env,
                                cfg.train, iterations=single_iters, seed=k,
                                log_rows=log_rows, checkpoint_dir=ckpt_dir)
            params = stage.end_params
        write_training_log(log_rows,
                           os.path.join(seed_dir, "training_log.csv"))
        from .policy import save_checkpoint
        save_checkpoint(os.path.join(seed_dir, "policy_final.txt"),
                        policy, params)
        last_m = log_rows[-1].metric_m if log_rows else float("nan")
        print(f"seed {k}: {len(log_rows)} iterations, "
              f"final batch m={last_m:.4f}")
    print(f"wrote {root}")
    return 0


# -- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _load(args)
    policy, params, policy_id = _load_policy(args.checkpoint,
                                             cfg.ring_env.obs_dim)
    episodes = args.episodes
    if episodes < 1:
        raise CliError("--episodes must be >= 1")
    outputs = ["eval_metrics.csv"] + [
        f"eval_trace_ep{e}.csv" for e in range(episodes)]
    root = _start_run(cfg, outputs, [cfg.seed])

    chash = config_hash(cfg)
    ms = []
    for e in range(episodes):
        env_seed = seeding.derive_seed(cfg.seed, seeding.POLICY, e)
        env = RingEnv(cfg.ring_env, seed=env_seed, record=True,
                      config_hash=chash)
        obs = env.reset()
        done = False
        while not done:
            if policy is None:
                obs, _, done, _ = env.step(None)
            else:
                mean, _ = policy.forward(params, obs)
                obs, _, done, _ = env.step(mean[:, 0])
        ms.append((e, env_seed, env.metric()))
        env.trace.write_csv(os.path.join(root, f"eval_trace_ep{e}.csv"))
    with open(os.path.join(root, "eval_metrics.csv"), "w",
              newline="") as fh:
        fh.write(EVAL_METRICS_HEADER + "\n")
        for e, env_seed, m in ms:
            fh.write(f"{policy_id},{e},{env_seed},{m!r}\n")
    values = np.array([m for _, _, m in ms])
    print(f"policy={policy_id} episodes={episodes} "
          f"m_mean={values.mean():.6f} m_std={values.std():.6f}")
    print(f"wrote {root}")
    return 0


# -- transfer ----------------------------------------------------------------

def cmd_transfer(args) -> int:
    cfg = _load(args)
    hw = cfg.highway
    if args.warmup is not None:
        hw = replace(hw, warmup_duration=float(args.warmup))
    if args.eval is not None:
        hw = replace(hw, eval_duration=float(args.eval))
    policy, params, policy_id = _load_policy(args.checkpoint, hw.obs_dim)
    seeds = _seed_list(cfg, args.seeds)
    outputs = ["transfer_metrics.csv"] + [
        f"transfer_trace_seed{k}.csv" for k in seeds]
    root = _start_run(cfg, outputs, seeds)

    lines = []
    for k in seeds:
        sim = HighwaySim(hw, seed=k, policy=policy, params=params)
        sim.run(hw.warmup_steps)
        try:
            metrics, rows = sim.run_eval(record_trace=True)
        except ValueError as exc:
            raise CliError(str(exc))
        write_highway_trace(
            rows, os.path.join(root, f"transfer_trace_seed{k}.csv"))
        lines.append(f"{policy_id},{k},{metrics.avg_stopped_time!r},"
                     f"{metrics.mean_speed!r},{metrics.throughput!r},"
                     f"{metrics.collisions}")
        print(f"seed {k}: stopped={metrics.avg_stopped_time:.2f}s "
              f"speed={metrics.mean_speed:.2f} "
              f"throughput={metrics.throughput:.0f} "
              f"collisions={metrics.collisions}")
    with open(os.path.join(root, "transfer_metrics.csv"), "w",
              newline="") as fh:
        fh.write(TRANSFER_METRICS_HEADER + "\n")
        for line in lines:
            fh.write(line + "\n")
    print(f"wrote {root}")
    return 0


# -- plotdata ----------------------------------------------------------------

def _read_trace(path):
    """Trajectory CSV -> {lane: {vehicle_id: [(t, x, v), ...]}}.

    Accepts the ring schema (no lane column; everything is lane 0) and
    the highway schema. Diagnostics carry 1-based line numbers.
    """
    lanes: dict[int, dict[int, list]] = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise CliError(f"cannot read trace {path}: {exc}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CliError(f"{path}:1: empty trace file")
        cols = {name: i for i, name in enumerate(header)}
        for need in ("time", "vehicle_id", "position", "speed"):
            if need not in cols:
                raise CliError(f"{path}:1: missing column '{need}'")
        lane_col = cols.get("lane")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t = float(row[cols["time"]])
                vid = int(row[cols["vehicle_id"]])
                x = float(row[cols["position"]])
                v = float(row[cols["speed"]])
                lane = int(row[lane_col]) if lane_col is not None else 0
            except (ValueError, IndexError):
                raise CliError(f"{path}:{lineno}: malformed row "
                               f"{','.join(row)!r}")
            lanes.setdefault(lane, {}).setdefault(vid, []).append((t, x, v))
    if not lanes:
        raise CliError(f"{path}: trace holds no data rows")
    return lanes


def cmd_plotdata(args) -> int:
    lanes = _read_trace(args.trace)
    out_dir = args.out or (os.path.dirname(os.path.abspath(args.trace)))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.trace))[0]
    written = []
    for lane in sorted(lanes):
        out_path = os.path.join(out_dir, f"{stem}_timespace_lane{lane}.txt")
        with open(out_path, "w", newline="") as fh:
            fh.write("# time position speed\n")
            for vid in sorted(lanes[lane]):
                rows = sorted(lanes[lane][vid])
                start = 0
                for i in range(1, len(rows) + 1):
                    # split on ring wrap (position jumps backward)
                    if i == len(rows) or rows[i][1] < rows[i - 1][1]:
                        for t, x, v in rows[start:i]:
                            fh.write(f"{t!r} {x!r} {v!r}\n")
                        fh.write("\n")
                        start = i
        written.append(out_path)
    for p in written:
        print(f"wrote {p}")
    return 0


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ringflow",
        description="Mixed-autonomy ring training and highway transfer.")
    parser.add_argument("--version", action="version",
                        version=f"ringflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--override", action="append", metavar="SEC.KEY=V",
                       help="config override, repeatable")

    p = sub.add_parser("train", help="optimize a policy over seeds")
    common(p)
    p.add_argument("--seeds", type=int, default=None,
                   help="number of independent seeds (default run.n_seeds)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="deterministic ring evaluation")
    common(p)
    p.add_argument("--checkpoint", help="policy checkpoint (omit for "
                                        "human baseline)")
    p.add_argument("--episodes", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="zero-shot highway evaluation")
    common(p)
    p.add_argument("--checkpoint", help="policy checkpoint (omit for "
                                        "human baseline)")
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--warmup", type=float, default=None,
                   help="override highway warmup duration (s)")
    p.add_argument("--eval", type=float, default=None,
                   help="override highway eval duration (s)")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("plotdata", help="export plot-ready data")
    p.add_argument("--trace", required=True, help="trajectory CSV")
    p.add_argument("--kind", choices=["timespace"], default="timespace")
    p.add_argument("--out", help="output directory (default: trace's)")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("baseline",
                       help="eval or transfer without a checkpoint")
    common(p)
    p.add_argument("--target", choices=["ring", "highway"],
                   default="ring")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--warmup", type=float, default=None)
    p.add_argument("--eval", type=float, default=None)
    p.set_defaults(func=cmd_baseline)
    return parser


def cmd_baseline(args) -> int:
    args.checkpoint = None
    if args.target == "ring":
        return cmd_eval(args)
    return cmd_transfer(args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
