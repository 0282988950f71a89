"""Online rollout evaluation and risk metrics for trained policies.

Reports the three headline metrics: average discounted return over test
episodes, the CVaR of the per-episode return distribution at a tolerance
level ``xi`` (mean of the worst episodes), and the percentage of timesteps
with at least one UAV inside the risk region. Also provides the
AoI/power trade-off sweep over the reward weight ``lambda``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import env as envmod
from .algos import TrainerConfig, make_greedy_policies, train
from .dataset import Dataset, relabel_rewards
from .env import EnvConfig
from .errors import ConfigError
from .seeding import STREAM_EVAL, substream


@dataclass
class EpisodeTrace:
    rewards: np.ndarray
    discounted_return: float
    risk_flags: np.ndarray       # per step: any UAV inside the risk region
    sum_aoi: np.ndarray          # per step: sum of device AoI
    sum_power: np.ndarray        # per step: total transmit power (W)


def run_episode(env_config: EnvConfig, policies, rng: np.random.Generator,
                gamma: float, record_steps: bool = False):
    """One fixed-horizon greedy episode; optionally keeps per-step records."""
    state = envmod.reset(env_config, rng)
    rewards, flags, aois, powers = [], [], [], []
    records = [] if record_steps else None
    ret = 0.0
    for t in range(env_config.episode_len):
        joint = [int(policy(state)) for policy in policies]
        next_state, reward, info = envmod.step(state, joint, env_config, rng)
        rewards.append(reward)
        flags.append(info["in_risk"])
        aois.append(info["sum_aoi"])
        powers.append(info["sum_power"])
        ret += (gamma ** t) * reward
        if record_steps:
            serves = [envmod.decode_action(a, env_config.num_devices)[1] for a in joint]
            records.append({
                "step": t,
                "uav_cells": next_state.uav_cells,
                "serves": serves,
                "aoi": next_state.aoi,
                "reward": reward,
                "in_risk": info["in_risk"],
            })
        state = next_state
    trace = EpisodeTrace(np.array(rewards), ret, np.array(flags, dtype=bool),
                         np.array(aois), np.array(powers))
    return (trace, records) if record_steps else trace


def rollout(env_config: EnvConfig, policies, episodes: int, rng: np.random.Generator,
            gamma: float):
    """Independent fixed-horizon episodes under the given greedy policies."""
    return [run_episode(env_config, policies, rng, gamma) for _ in range(episodes)]


def cvar_of(returns, xi: float) -> float:
    """Empirical CVaR: mean of the ceil(xi * n) smallest returns."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size == 0:
        raise ConfigError("CVaR of an empty return list")
    if not 0.0 < xi <= 1.0:
        raise ConfigError(f"xi must lie in (0, 1], got {xi}")
    k = int(np.ceil(xi * returns.size))
    return float(np.sort(returns)[:k].mean())


def violation_pct(traces) -> float:
    """Percentage of timesteps with any UAV in the risk region (counted once)."""
    if not traces:
        raise ConfigError("violation percentage of an empty trace list")
    total = sum(t.risk_flags.size for t in traces)
    hits = sum(int(t.risk_flags.sum()) for t in traces)
    return 100.0 * hits / total


@dataclass
class EvalReport:
    avg_return: float
    cvar_return: float
    xi_eval: float
    violation_pct: float
    mean_sum_aoi: float     # time-averaged per-device AoI (saturates at a_max)
    mean_sum_power: float   # time-averaged total transmit power (W)
    episodes: int
    returns: list

    def __post_init__(self):
        if self.cvar_return > self.avg_return + 1e-9:
            raise ConfigError("CVaR return cannot exceed the average return")
        if not 0.0 <= self.violation_pct <= 100.0:
            raise ConfigError("violation percentage outside [0, 100]")
        if self.episodes != len(self.returns):
            raise ConfigError("episode count does not match the returns list")

    def to_json_dict(self) -> dict:
        return {
            "avg_return": self.avg_return,
            "cvar_return": self.cvar_return,
            "xi_eval": self.xi_eval,
            "violation_pct": self.violation_pct,
            "mean_sum_aoi": self.mean_sum_aoi,
            "mean_sum_power": self.mean_sum_power,
            "episodes": self.episodes,
            "returns": list(self.returns),
        }


def report_from_traces(traces, xi_eval: float, num_devices: int) -> EvalReport:
    returns = [t.discounted_return for t in traces]
    mean_aoi = float(np.mean(np.concatenate([t.sum_aoi for t in traces]))) / num_devices
    mean_power = float(np.mean(np.concatenate([t.sum_power for t in traces])))
    return EvalReport(
        avg_return=float(np.mean(returns)),
        cvar_return=cvar_of(returns, xi_eval),
        xi_eval=xi_eval,
        violation_pct=violation_pct(traces),
        mean_sum_aoi=mean_aoi,
        mean_sum_power=mean_power,
        episodes=len(traces),
        returns=returns,
    )


def evaluate_policies(env_config: EnvConfig, policies, episodes: int, seed: int,
                      gamma: float, xi_eval: float = 0.15) -> EvalReport:
    rng = substream(seed, STREAM_EVAL)
    traces = rollout(env_config, policies, episodes, rng, gamma)
    return report_from_traces(traces, xi_eval, env_config.num_devices)


def evaluate_heads(env_config: EnvConfig, heads, trainer: TrainerConfig,
                   episodes: int, seed: int, xi_eval: float = 0.15) -> EvalReport:
    policies = make_greedy_policies(heads, env_config, trainer)
    return evaluate_policies(env_config, policies, episodes, seed, trainer.gamma, xi_eval)


# -- AoI/power trade-off sweep ----------------------------------------------------


@dataclass
class ParetoPoint:
    lam: float
    mean_sum_aoi: float
    mean_sum_power: float


def _lambda_tag(lam: float) -> int:
    return zlib.crc32(repr(float(lam)).encode())


def pareto_sweep(env_config: EnvConfig, dataset_builder, trainer: TrainerConfig,
                 lambda_list, risk_penalty_rule=None, eval_episodes: int = 100,
                 xi_eval: float = 0.15, include_idle: bool = True):
    """Retrain and evaluate per lambda; returns trade-off points plus the
    analytic idle point (zero power, AoI saturated at a_max).

    Stored dataset rewards are recomputed from (state, action, next_state)
    under each lambda rather than recollected, with the in-region risk draw
    re-sampled from a per-lambda seed. ``risk_penalty_rule`` optionally maps
    lambda to the risk penalty (e.g. ``lambda lam: lam / 2.5``).
    """
    for lam in lambda_list:
        if lam < 0:
            raise ConfigError(f"lambda values must be non-negative, got {lam}")
    base = dataset_builder()
    points = []
    seen = set()
    for lam in lambda_list:
        lam = float(lam)
        if lam in seen:
            continue
        seen.add(lam)
        penalty = env_config.risk_penalty if risk_penalty_rule is None else float(risk_penalty_rule(lam))
        cfg = replace(env_config, lam=lam, risk_penalty=penalty)
        ds = relabel_rewards(base, cfg, seed=trainer.seed + _lambda_tag(lam))
        result = train(ds, trainer, cfg)
        report = evaluate_heads(cfg, result.heads, trainer, eval_episodes,
                                seed=trainer.seed + _lambda_tag(lam), xi_eval=xi_eval)
        points.append(ParetoPoint(lam, report.mean_sum_aoi, report.mean_sum_power))
    if include_idle:
        points.append(ParetoPoint(math.inf, float(env_config.a_max), 0.0))
    return points
