"""Command-line pipeline: collect datasets, train, evaluate, sweep, export.

Configuration is one JSON document with sections ``env``, ``behavior``,
``trainer``, ``eval``, ``collect``, ``sweep`` and ``paths``. Unknown keys
anywhere are errors. All randomness flows from seeds in the config (no
wall-clock seeding); outputs are written to temp names and renamed, so a
partially written file never shadows a good one.
"""

from __future__ import annotations

import argparse
import datetime
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import evaluate as evalmod
from .algos import AgentHeads, TrainerConfig, make_greedy_policies, train
from .dataset import (BehaviorConfig, load_dataset, save_dataset, subsample,
                      train_behavior_policy)
from .env import EnvConfig, make_env_config, write_trajectory_csv
from .errors import ConfigError, OffmarlError
from .evaluate import evaluate_heads, pareto_sweep, run_episode
from .kernels import backend_name
from .nets import MlpNet
from .seeding import STREAM_SUBSAMPLE, substream

_TOP_KEYS = {"env", "behavior", "trainer", "eval", "collect", "sweep", "paths"}
_EVAL_KEYS = {"episodes", "xi"}
_COLLECT_KEYS = {"fractions"}
_SWEEP_KEYS = {"lambdas", "risk_penalty"}
_PATH_KEYS = {"dataset", "out_dir"}


def atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def atomic_write_bytes(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config root")
    for section, allowed in (("eval", _EVAL_KEYS), ("collect", _COLLECT_KEYS),
                             ("sweep", _SWEEP_KEYS), ("paths", _PATH_KEYS)):
        if section in cfg:
            _check_keys(cfg[section], allowed, f"config section '{section}'")
    return cfg


def build_env_config(cfg: dict) -> EnvConfig:
    section = dict(cfg.get("env", {}))
    known = set(EnvConfig._FIELDS)
    _check_keys(section, known, "config section 'env'")
    if "risk_rect" in section:
        section["risk_rect"] = tuple(int(v) for v in section["risk_rect"])
    if "device_positions" in section:
        section["device_positions"] = tuple(
            (float(x), float(y)) for x, y in section["device_positions"])
    seed = int(section.pop("seed", 0))
    return make_env_config(seed=seed, **section)


def build_trainer_config(cfg: dict, algorithm_override=None, seed_override=None) -> TrainerConfig:
    section = dict(cfg.get("trainer", {}))
    if algorithm_override is not None:
        section["algorithm"] = algorithm_override
    if seed_override is not None:
        section["seed"] = seed_override
    if "algorithm" not in section:
        raise ConfigError("config section 'trainer' must specify 'algorithm'")
    if "hidden_dims" in section:
        section["hidden_dims"] = tuple(int(v) for v in section["hidden_dims"])
    if "grad_clip" in section and section["grad_clip"] is not None:
        section["grad_clip"] = float(section["grad_clip"])
    return TrainerConfig.from_json_dict(section)


def build_behavior_config(cfg: dict) -> BehaviorConfig:
    return BehaviorConfig.from_json_dict(dict(cfg.get("behavior", {})))


def _eval_settings(cfg: dict):
    section = cfg.get("eval", {})
    return int(section.get("episodes", 100)), float(section.get("xi", 0.15))


def _out_dir(cfg: dict, override=None) -> str:
    out = override or cfg.get("paths", {}).get("out_dir")
    if not out:
        raise ConfigError("no output directory: set paths.out_dir or pass --out-dir")
    os.makedirs(out, exist_ok=True)
    return out


def _fraction_label(fraction: float) -> str:
    return f"{fraction:g}".replace(".", "p")


# -- commands ---------------------------------------------------------------------


def cmd_collect(cfg: dict, out_dir: str, seed_override=None) -> int:
    env_config = build_env_config(cfg)
    behavior = build_behavior_config(cfg)
    fractions = [float(f) for f in cfg.get("collect", {}).get("fractions", [1.0])]
    seed = int(seed_override if seed_override is not None else env_config.seed)
    created = datetime.datetime.now(datetime.timezone.utc).isoformat()

    nets, log, returns = train_behavior_policy(env_config, behavior, seed, created_at=created)
    outputs = {}
    for fraction in fractions:
        ds = subsample(log, fraction, substream(seed, STREAM_SUBSAMPLE,
                                                int(round(fraction * 1_000_000))))
        path = os.path.join(out_dir, f"dataset_{_fraction_label(fraction)}.bin")
        from .dataset import dataset_to_bytes
        atomic_write_bytes(path, dataset_to_bytes(ds))
        outputs[path] = {"fraction": fraction, "transitions": len(ds),
                         "content_hash": ds.content_hash()}
    summary = {
        "env_config_hash": env_config.config_hash(),
        "collection_seed": seed,
        "episodes_played": len(returns),
        "transitions_logged": len(log),
        "behavior_returns": returns,
        "datasets": outputs,
    }
    atomic_write_text(os.path.join(out_dir, "collect_summary.json"),
                      json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"collected {len(log)} transitions over {len(returns)} episodes; "
          f"wrote {len(outputs)} dataset file(s) to {out_dir}")
    return 0


def cmd_train(cfg: dict, out_dir: str, algorithm_override=None, seed_override=None) -> int:
    env_config = build_env_config(cfg)
    trainer = build_trainer_config(cfg, algorithm_override, seed_override)
    dataset_path = cfg.get("paths", {}).get("dataset")
    if not dataset_path:
        raise ConfigError("cmd train requires paths.dataset")
    ds = load_dataset(dataset_path)
    ds.validate_against(env_config)

    result = train(ds, trainer, env_config)
    for i, heads in enumerate(result.heads):
        atomic_write_bytes(os.path.join(out_dir, f"agent_{i}.ckpt"),
                           heads.online.to_bytes(include_adam=True))

    lines = ["step,iteration,loss"]
    for step, loss in enumerate(result.loss_per_step):
        lines.append(f"{step},{step // trainer.grad_steps_per_iter},{loss!r}")
    atomic_write_text(os.path.join(out_dir, "loss.csv"), "\n".join(lines) + "\n")

    per_iter = [float(np.mean(chunk)) for chunk in
                np.split(result.loss_per_step, trainer.iterations)] \
        if trainer.iterations and len(result.loss_per_step) else []
    manifest = {
        "trainer": trainer.to_json_dict(),
        "env_config_hash": env_config.config_hash(),
        "dataset_hash": ds.content_hash(),
        "dataset_path": dataset_path,
        "iteration_mean_loss": per_iter,
        "kernel_backend": backend_name(),
        "checkpoints": [f"agent_{i}.ckpt" for i in range(len(result.heads))],
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"trained {trainer.algorithm} for {trainer.iterations} iterations; "
          f"checkpoints in {out_dir}")
    return 0


def _load_heads(checkpoint_paths, env_config: EnvConfig, trainer: TrainerConfig):
    paths = list(checkpoint_paths)
    if len(paths) == 1 and os.path.isdir(paths[0]):
        directory = paths[0]
        paths = sorted(
            os.path.join(directory, f) for f in os.listdir(directory)
            if f.startswith("agent_") and f.endswith(".ckpt"))
    if len(paths) != env_config.num_uavs:
        raise ConfigError(f"expected {env_config.num_uavs} checkpoints, got {len(paths)}")
    heads = []
    expected_out = env_config.num_actions * trainer.head_quantiles
    for path in paths:
        net = MlpNet.load(path)
        if net.in_dim != env_config.state_dim or net.out_dim != expected_out:
            raise ConfigError(
                f"checkpoint {path} has dims {net.in_dim}->{net.out_dim}, "
                f"expected {env_config.state_dim}->{expected_out}")
        heads.append(AgentHeads(online=net, target=net.clone()))
    return heads


def cmd_eval(cfg: dict, checkpoints, out_dir: str, algorithm_override=None,
             seed_override=None) -> int:
    env_config = build_env_config(cfg)
    trainer = build_trainer_config(cfg, algorithm_override, seed_override)
    episodes, xi = _eval_settings(cfg)
    heads = _load_heads(checkpoints, env_config, trainer)
    report = evaluate_heads(env_config, heads, trainer, episodes,
                            seed=trainer.seed, xi_eval=xi)
    payload = report.to_json_dict()
    if not all(np.isfinite(v) for v in (report.avg_return, report.cvar_return,
                                        report.violation_pct)):
        raise OffmarlError("evaluation produced non-finite metrics")
    atomic_write_text(os.path.join(out_dir, "eval_report.json"),
                      json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(f"avg_return={report.avg_return:.4f} "
          f"cvar{xi:g}_return={report.cvar_return:.4f} "
          f"violations={report.violation_pct:.2f}%")
    return 0


def _parse_risk_penalty_rule(spec):
    """'lambda/2.5' -> coupled rule; a number -> constant; None -> config value."""
    if spec is None:
        return None
    if isinstance(spec, (int, float)):
        return lambda lam: float(spec)
    text = str(spec).replace(" ", "")
    if text.startswith("lambda/"):
        divisor = float(text.split("/", 1)[1])
        return lambda lam: lam / divisor
    raise ConfigError(f"cannot parse risk_penalty rule {spec!r}")


def cmd_sweep(cfg: dict, out_dir: str, lambdas_arg=None, algorithm_override=None,
              seed_override=None) -> int:
    env_config = build_env_config(cfg)
    trainer = build_trainer_config(cfg, algorithm_override, seed_override)
    episodes, xi = _eval_settings(cfg)
    sweep_cfg = cfg.get("sweep", {})
    if lambdas_arg is not None:
        lambdas = [float(v) for v in lambdas_arg]
    else:
        lambdas = [float(v) for v in sweep_cfg.get("lambdas", [])]
    rule = _parse_risk_penalty_rule(sweep_cfg.get("risk_penalty"))
    dataset_path = cfg.get("paths", {}).get("dataset")
    if not dataset_path:
        raise ConfigError("cmd sweep requires paths.dataset")

    csv_path = os.path.join(out_dir, "pareto.csv")
    completed = {}
    if os.path.exists(csv_path):
        with open(csv_path) as fh:
            for line in fh.read().splitlines()[1:]:
                if line:
                    completed[line.split(",", 1)[0]] = line

    ordered, seen = [], set()
    for lam in lambdas:
        lam = float(lam)
        if lam not in seen:
            seen.add(lam)
            ordered.append(lam)

    todo = [lam for lam in ordered if repr(lam) not in completed]
    if todo:
        points = pareto_sweep(env_config, lambda: load_dataset(dataset_path), trainer,
                              todo, risk_penalty_rule=rule, eval_episodes=episodes,
                              xi_eval=xi, include_idle=False)
        for p in points:
            completed[repr(p.lam)] = f"{p.lam!r},{p.mean_sum_aoi!r},{p.mean_sum_power!r}"

    lines = ["lambda,mean_sum_aoi,mean_sum_power"]
    lines += [completed[repr(lam)] for lam in ordered]
    if ordered:
        idle = evalmod.ParetoPoint(math.inf, float(env_config.a_max), 0.0)
        lines.append(f"{idle.lam!r},{idle.mean_sum_aoi!r},{idle.mean_sum_power!r}")
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    print(f"sweep complete: {len(ordered)} lambda value(s) plus idle point -> {csv_path}")
    return 0


def cmd_export_traj(cfg: dict, checkpoints, out_dir: str, episodes: int,
                    algorithm_override=None, seed_override=None) -> int:
    env_config = build_env_config(cfg)
    trainer = build_trainer_config(cfg, algorithm_override, seed_override)
    heads = _load_heads(checkpoints, env_config, trainer)
    policies = make_greedy_policies(heads, env_config, trainer)
    rng = substream(trainer.seed, 99)
    for ep in range(episodes):
        _, records = run_episode(env_config, policies, rng, trainer.gamma,
                                 record_steps=True)
        write_trajectory_csv(os.path.join(out_dir, f"trajectory_ep{ep}.csv"),
                             records, env_config)
    print(f"wrote {episodes} trajectory file(s) to {out_dir}")
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="offmarl",
        description="Offline conservative / distributional MARL pipeline for UAV data collection")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out-dir", default=None, help="override paths.out_dir")
        p.add_argument("--seed-override", type=int, default=None,
                       help="override the trainer/collection seed")
        p.add_argument("--algorithm-override", default=None,
                       help="override trainer.algorithm")

    p = sub.add_parser("collect", help="train the behavior policy and write datasets")
    common(p)
    p = sub.add_parser("train", help="offline-train a variant on a dataset")
    common(p)
    p = sub.add_parser("eval", help="evaluate checkpoints over test episodes")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True,
                   help="per-agent checkpoint files (ordered) or one directory")
    p = sub.add_parser("sweep", help="lambda sweep producing the AoI/power curve")
    common(p)
    p.add_argument("--lambdas", nargs="*", type=float, default=None,
                   help="override sweep.lambdas")
    p = sub.add_parser("export-traj", help="export greedy trajectories as CSV")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--episodes", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        out_dir = _out_dir(cfg, args.out_dir)
        if args.command == "collect":
            return cmd_collect(cfg, out_dir, seed_override=args.seed_override)
        if args.command == "train":
            return cmd_train(cfg, out_dir, algorithm_override=args.algorithm_override,
                             seed_override=args.seed_override)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoints, out_dir,
                            algorithm_override=args.algorithm_override,
                            seed_override=args.seed_override)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, lambdas_arg=args.lambdas,
                             algorithm_override=args.algorithm_override,
                             seed_override=args.seed_override)
        if args.command == "export-traj":
            return cmd_export_traj(cfg, args.checkpoints, out_dir, args.episodes,
                                   algorithm_override=args.algorithm_override,
                                   seed_override=args.seed_override)
        raise ConfigError(f"unknown command {args.command}")
    except OffmarlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
