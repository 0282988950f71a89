"""Offline transition store: collection, subsampling, persistence, sampling.

A dataset is an ordered set of (state, joint_action, reward, next_state)
records plus metadata pinning the environment it came from. Collection runs
online independent DQN agents (the behavior policy) and logs every
transition observed during training; offline experiments then subsample a
fraction of that log.

File format (all little-endian):
  magic "OFMDSET1" | u32 meta_len | meta JSON (canonical, utf-8) |
  u64 n | u32 state_dim | u32 num_agents |
  n fixed-width records (state f64[D], actions i32[I], reward f64,
  next_state f64[D]) | u32 CRC-32 of everything before it
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import namedtuple
from dataclasses import asdict, dataclass

import numpy as np

from . import env as envmod
from .env import EnvConfig, EnvState, encode_states
from .errors import ConfigError, DataFormatError, DivergenceError
from .nets import MlpNet
from .seeding import (STREAM_BATCH, STREAM_ENV_RESET, STREAM_ENV_STEP,
                      STREAM_EPSILON, STREAM_NET_INIT, STREAM_RELABEL,
                      STREAM_REPLAY, substream)

_DS_MAGIC = b"OFMDSET1"

Transition = namedtuple("Transition", ["state", "joint_action", "reward", "next_state"])
Batch = namedtuple("Batch", ["states", "actions", "rewards", "next_states"])


class Dataset:
    """Immutable transition arrays plus collection metadata."""

    def __init__(self, states, actions, rewards, next_states, meta: dict):
        self.states = np.ascontiguousarray(states, dtype=np.float64)
        self.actions = np.ascontiguousarray(actions, dtype=np.int64)
        self.rewards = np.ascontiguousarray(rewards, dtype=np.float64)
        self.next_states = np.ascontiguousarray(next_states, dtype=np.float64)
        self.meta = meta
        n = len(self.rewards)
        if not (self.states.shape[0] == self.actions.shape[0] == self.next_states.shape[0] == n):
            raise ConfigError("dataset arrays have inconsistent lengths")
        if self.states.shape != self.next_states.shape:
            raise ConfigError("state and next_state arrays differ in shape")

    def __len__(self) -> int:
        return len(self.rewards)

    def transition(self, idx: int) -> Transition:
        return Transition(self.states[idx], tuple(self.actions[idx]),
                          float(self.rewards[idx]), self.next_states[idx])

    @property
    def env_config(self) -> EnvConfig:
        return EnvConfig.from_json_dict(self.meta["env_config"])

    def content_hash(self) -> str:
        """Hash of the transition payload and provenance, excluding wall-clock."""
        import hashlib
        h = hashlib.sha256()
        h.update(self.meta.get("env_config_hash", "").encode())
        h.update(struct.pack("<dq", float(self.meta.get("fraction", 1.0)),
                             int(self.meta.get("collection_seed", -1))))
        for arr in (self.states, self.actions, self.rewards, self.next_states):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def validate_against(self, config: EnvConfig) -> None:
        """Refuse datasets whose geometry or config hash disagree with ``config``."""
        if self.meta.get("env_config_hash") != config.config_hash():
            raise ConfigError("dataset env config hash does not match the run config")
        if self.states.shape[1] != config.state_dim:
            raise ConfigError("dataset state dimension does not match the environment")


# -- persistence ---------------------------------------------------------------


def _record_dtype(state_dim: int, num_agents: int) -> np.dtype:
    return np.dtype([("state", "<f8", (state_dim,)),
                     ("actions", "<i4", (num_agents,)),
                     ("reward", "<f8"),
                     ("next_state", "<f8", (state_dim,))])


def dataset_to_bytes(ds: Dataset) -> bytes:
    meta_blob = json.dumps(ds.meta, sort_keys=True, separators=(",", ":")).encode()
    n = len(ds)
    state_dim = ds.states.shape[1]
    num_agents = ds.actions.shape[1]
    rec = np.empty(n, dtype=_record_dtype(state_dim, num_agents))
    rec["state"] = ds.states
    rec["actions"] = ds.actions
    rec["reward"] = ds.rewards
    rec["next_state"] = ds.next_states
    body = b"".join([
        _DS_MAGIC,
        struct.pack("<I", len(meta_blob)),
        meta_blob,
        struct.pack("<QII", n, state_dim, num_agents),
        rec.tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < len(_DS_MAGIC) + 4 + 4:
        raise DataFormatError("dataset file too short")
    if blob[:8] != _DS_MAGIC:
        raise DataFormatError("not a dataset file (bad magic / unsupported version)")
    stored_crc, = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise DataFormatError("dataset checksum mismatch (corrupt file)")
    off = 8
    meta_len, = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + meta_len].decode())
    off += meta_len
    n, state_dim, num_agents = struct.unpack_from("<QII", blob, off)
    off += struct.calcsize("<QII")
    dtype = _record_dtype(state_dim, num_agents)
    expected = off + n * dtype.itemsize + 4
    if len(blob) != expected:
        raise DataFormatError(f"truncated dataset: {len(blob)} bytes, expected {expected}")
    rec = np.frombuffer(blob, dtype=dtype, count=n, offset=off)
    return Dataset(rec["state"], rec["actions"].astype(np.int64), rec["reward"],
                   rec["next_state"], meta)


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# -- sampling ------------------------------------------------------------------


def subsample(ds: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """Uniform sample without replacement of floor(fraction * len) records."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    k = int(np.floor(fraction * len(ds)))
    if k == 0:
        raise ConfigError(f"subsample of {len(ds)} transitions at {fraction} is empty")
    idx = rng.permutation(len(ds))[:k]
    meta = dict(ds.meta)
    meta["fraction"] = float(fraction) * float(ds.meta.get("fraction", 1.0))
    meta["source_size"] = len(ds)
    return Dataset(ds.states[idx], ds.actions[idx], ds.rewards[idx],
                   ds.next_states[idx], meta)


def sample_batch(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform with replacement; deterministic under a seeded generator."""
    if len(ds) == 0:
        raise ConfigError("cannot sample from an empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be at least 1, got {batch_size}")
    idx = rng.integers(0, len(ds), size=batch_size)
    return Batch(ds.states[idx], ds.actions[idx], ds.rewards[idx], ds.next_states[idx])


# -- behavior policy -------------------------------------------------------------


@dataclass(frozen=True)
class BehaviorConfig:
    """Online independent-DQN collection settings (recorded in dataset meta)."""

    episodes: int = 3000
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_anneal_frac: float = 0.5       # fraction of episodes to anneal over
    replay_capacity: int = 100_000
    target_sync_every: int = 200       # gradient steps between target copies
    lr: float = 1e-4
    gamma: float = 0.99
    batch_size: int = 128
    hidden_dims: tuple = (256, 256)
    train_every: int = 1               # env steps per gradient step
    stagnation_window: int = 100
    stagnation_span: int = 500
    stagnation_tol: float = 0.01

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "BehaviorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown behavior config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "hidden_dims" in kwargs:
            kwargs["hidden_dims"] = tuple(int(v) for v in kwargs["hidden_dims"])
        return cls(**kwargs)


def _epsilon(behavior: BehaviorConfig, episode: int) -> float:
    anneal = max(1, int(round(behavior.eps_anneal_frac * behavior.episodes)))
    frac = min(1.0, episode / anneal)
    return behavior.eps_start + (behavior.eps_final - behavior.eps_start) * frac


def train_behavior_policy(env_config: EnvConfig, behavior: BehaviorConfig, seed: int,
                          created_at: str = ""):
    """Train online independent DQN agents and log every transition observed.

    Returns (per-agent nets, full transition log as a Dataset, per-episode
    discounted returns). Training may stop early once the moving-average
    return stagnates; the log then covers the episodes actually played.
    """
    n_agents = env_config.num_uavs
    n_actions = env_config.num_actions
    dims = [env_config.state_dim, *behavior.hidden_dims, n_actions]

    rng_init = substream(seed, STREAM_NET_INIT)
    rng_eps = substream(seed, STREAM_EPSILON)
    rng_replay = substream(seed, STREAM_REPLAY)
    rng_reset = substream(seed, STREAM_ENV_RESET)
    rng_step = substream(seed, STREAM_ENV_STEP)

    online = [MlpNet.he_uniform(dims, rng_init) for _ in range(n_agents)]
    targets = [net.clone() for net in online]

    cap = behavior.replay_capacity
    d = env_config.state_dim
    buf_s = np.empty((cap, d))
    buf_a = np.empty((cap, n_agents), dtype=np.int64)
    buf_r = np.empty(cap)
    buf_s2 = np.empty((cap, d))
    buf_size = 0
    buf_ptr = 0

    log_s, log_a, log_r, log_s2 = [], [], [], []
    episode_returns = []
    grad_steps = 0
    env_steps = 0
    gamma = behavior.gamma

    for episode in range(behavior.episodes):
        eps = _epsilon(behavior, episode)
        state = envmod.reset(env_config, rng_reset)
        ep_return = 0.0
        for t in range(env_config.episode_len):
            svec = state.to_vector()
            enc = encode_states(svec, env_config)
            joint = []
            for i in range(n_agents):
                if rng_eps.random() < eps:
                    joint.append(int(rng_eps.integers(0, n_actions)))
                else:
                    joint.append(int(np.argmax(online[i].forward(enc))))
            next_state, reward, _ = envmod.step(state, joint, env_config, rng_step)
            s2vec = next_state.to_vector()
            ep_return += (gamma ** t) * reward

            log_s.append(svec)
            log_a.append(joint)
            log_r.append(reward)
            log_s2.append(s2vec)

            buf_s[buf_ptr] = svec
            buf_a[buf_ptr] = joint
            buf_r[buf_ptr] = reward
            buf_s2[buf_ptr] = s2vec
            buf_ptr = (buf_ptr + 1) % cap
            buf_size = min(buf_size + 1, cap)

            env_steps += 1
            if buf_size >= behavior.batch_size and env_steps % behavior.train_every == 0:
                idx = rng_replay.integers(0, buf_size, size=behavior.batch_size)
                bs = encode_states(buf_s[idx], env_config)
                bs2 = encode_states(buf_s2[idx], env_config)
                br = buf_r[idx]
                for i in range(n_agents):
                    q_next = targets[i].forward_batch(bs2)
                    y = br + gamma * q_next.max(axis=1)
                    q, acts = online[i].forward_batch_cached(bs)
                    taken = buf_a[idx, i]
                    residual = y - q[np.arange(len(idx)), taken]
                    loss = 0.5 * float(np.mean(residual ** 2))
                    if not np.isfinite(loss):
                        raise DivergenceError(
                            f"behavior DQN diverged (agent {i}, episode {episode})")
                    g = np.zeros_like(q)
                    g[np.arange(len(idx)), taken] = -residual / len(idx)
                    grads = online[i].backward_batch(bs, g, acts=acts)
                    online[i].adam_step(grads, behavior.lr)
                grad_steps += 1
                if grad_steps % behavior.target_sync_every == 0:
                    targets = [net.clone() for net in online]
            state = next_state
        episode_returns.append(ep_return)

        # stagnation stop on the moving-average return
        w, span = behavior.stagnation_window, behavior.stagnation_span
        e = len(episode_returns)
        if e >= w + span:
            ma_now = float(np.mean(episode_returns[e - w:e]))
            ma_past = float(np.mean(episode_returns[e - span - w:e - span]))
            if abs(ma_now - ma_past) < behavior.stagnation_tol * abs(ma_past):
                break

    meta = {
        "env_config": env_config.to_json_dict(),
        "env_config_hash": env_config.config_hash(),
        "behavior": {"kind": "independent-dqn", **behavior.to_json_dict(),
                     "episodes_played": len(episode_returns)},
        "collection_seed": int(seed),
        "created_at": created_at,
        "fraction": 1.0,
        "source_size": len(log_r),
        "normalization": "cells/grid_size, aoi/a_max",
    }
    if log_r:
        log = Dataset(np.array(log_s), np.array(log_a, dtype=np.int64),
                      np.array(log_r), np.array(log_s2), meta)
    else:
        log = Dataset(np.zeros((0, d)), np.zeros((0, n_agents), dtype=np.int64),
                      np.zeros(0), np.zeros((0, d)), meta)
    return online, log, episode_returns


# -- reward relabeling (lambda / risk-penalty sweeps) ----------------------------


def relabel_rewards(ds: Dataset, new_config: EnvConfig, seed: int) -> Dataset:
    """Recompute rewards of stored transitions under a new trade-off config.

    The deterministic reward part is a function of the stored next_state
    (post-move cells, post-update AoI) and the serve components of the
    stored actions; the in-region risk Bernoulli is re-drawn from ``seed``.
    Geometry (grid, devices, agent count) must be unchanged.
    """
    old = ds.env_config
    if (old.grid_w, old.grid_h, old.num_uavs, old.num_devices) != \
            (new_config.grid_w, new_config.grid_h, new_config.num_uavs, new_config.num_devices):
        raise ConfigError("relabeling requires identical grid geometry and agent counts")
    if old.device_positions != new_config.device_positions:
        raise ConfigError("relabeling requires identical device positions")

    rng = substream(seed, STREAM_RELABEL)
    n_agents = new_config.num_uavs
    rewards = np.empty(len(ds))
    for k in range(len(ds)):
        nxt = EnvState.from_vector(ds.next_states[k], n_agents)
        served_pairs = []
        for i in range(n_agents):
            _, serve = envmod.decode_action(int(ds.actions[k, i]), new_config.num_devices)
            if serve > 0:
                served_pairs.append((i, serve))
        r = envmod.base_reward(nxt.aoi, served_pairs, nxt.uav_cells, new_config)
        if any(envmod.in_risk_region(c, new_config) for c in nxt.uav_cells) \
                and new_config.p_risk > 0.0:
            if rng.random() < new_config.p_risk:
                r -= new_config.risk_penalty
        rewards[k] = r
    meta = dict(ds.meta)
    meta["env_config"] = new_config.to_json_dict()
    meta["env_config_hash"] = new_config.config_hash()
    meta["relabeled_from"] = ds.meta.get("env_config_hash", "")
    meta["relabel_seed"] = int(seed)
    return Dataset(ds.states, ds.actions, rewards, ds.next_states, meta)
