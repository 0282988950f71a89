"""Independent oracles used by the test suite.

Exact finite-horizon value iteration over fully enumerated single-UAV grid
worlds (deterministic when p_risk = 0), plus exact greedy-policy rollouts.
These never share code paths with the trainers they check.
"""

import itertools

import numpy as np

from offmarl import env as envmod
from offmarl.env import EnvConfig, EnvState


def enumerate_states(config: EnvConfig):
    """All states of a single-UAV world (cells x AoI tuples)."""
    assert config.num_uavs == 1, "oracle enumerates single-UAV worlds only"
    cells = [(x, y) for x in range(config.grid_w) for y in range(config.grid_h)]
    aois = list(itertools.product(range(1, config.a_max + 1),
                                  repeat=config.num_devices))
    return [EnvState((c,), a) for c in cells for a in aois]


def transition_tables(config: EnvConfig):
    """(states, index, next_index[n, A], reward[n, A]) for a deterministic world."""
    assert config.p_risk == 0.0, "oracle requires a deterministic environment"
    states = enumerate_states(config)
    index = {s: i for i, s in enumerate(states)}
    n, num_actions = len(states), config.num_actions
    nxt = np.empty((n, num_actions), dtype=np.int64)
    rew = np.empty((n, num_actions))
    rng = np.random.default_rng(0)  # never consulted with p_risk = 0
    for i, s in enumerate(states):
        for a in range(num_actions):
            s2, r, _ = envmod.step(s, [a], config, rng)
            nxt[i, a] = index[s2]
            rew[i, a] = r
    return states, index, nxt, rew


def finite_horizon_vi(config: EnvConfig, gamma: float, horizon: int):
    """Exact optimal discounted value over ``horizon`` steps for every state."""
    states, index, nxt, rew = transition_tables(config)
    values = np.zeros(len(states))
    for _ in range(horizon):
        values = (rew + gamma * values[nxt]).max(axis=1)
    return values, states, index


def initial_states(config: EnvConfig):
    """All reset-reachable states: any cell, all AoI at 1."""
    fresh = (1,) * config.num_devices
    return [EnvState(((x, y),), fresh)
            for x in range(config.grid_w) for y in range(config.grid_h)]


def greedy_return(config: EnvConfig, policy, gamma: float, horizon: int,
                  start: EnvState) -> float:
    """Exact discounted return of a deterministic policy from ``start``."""
    rng = np.random.default_rng(0)  # never consulted with p_risk = 0
    state = start
    total = 0.0
    for t in range(horizon):
        state, r, _ = envmod.step(state, [int(policy(state))], config, rng)
        total += (gamma ** t) * r
    return total


def mean_greedy_return(config: EnvConfig, policy, gamma: float, horizon: int) -> float:
    starts = initial_states(config)
    return float(np.mean([greedy_return(config, policy, gamma, horizon, s)
                          for s in starts]))


def optimal_mean_return(config: EnvConfig, gamma: float, horizon: int) -> float:
    values, _, index = finite_horizon_vi(config, gamma, horizon)
    starts = initial_states(config)
    return float(np.mean([values[index[s]] for s in starts]))
