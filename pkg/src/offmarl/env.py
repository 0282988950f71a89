"""Multi-UAV data-collection grid world.

UAVs move on a rectangular cell grid and collect update packets from fixed
ground devices over line-of-sight links. Each device carries an age of
information (AoI) that resets to 1 when served and otherwise increments up
to a cap. The per-step reward is
``-(1/M) * sum_m AoI_m - lambda * sum_(i,m) P_im`` with the transmit power
``P_im = (2^(E/B) - 1) * sigma^2 / g_im`` and channel gain
``g_im = g0 / (h^2 + dist2d^2)``. A rectangular risk region subtracts an
extra penalty with probability ``p_risk`` per step while any UAV is inside.

Episodes are fixed-horizon time limits: no terminal states, no done flags.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .seeding import STREAM_DEVICE_LAYOUT, substream

MOVES = ("north", "south", "east", "west", "hover")
_MOVE_DELTAS = {
    "north": (0, 1),
    "south": (0, -1),
    "east": (1, 0),
    "west": (-1, 0),
    "hover": (0, 0),
}
NUM_MOVES = len(MOVES)


def centered_rect(grid_w: int, grid_h: int, rect_w: int, rect_h: int):
    """Cell rectangle (x0, y0, w, h) centered on the grid."""
    return ((grid_w - rect_w) // 2, (grid_h - rect_h) // 2, rect_w, rect_h)


@dataclass(frozen=True)
class EnvConfig:
    """Static scenario description; all physical quantities in SI units."""

    grid_w: int = 10
    grid_h: int = 10
    cell_len: float = 100.0            # m
    num_uavs: int = 2
    num_devices: int = 10
    height: float = 100.0              # m
    g0: float = 1000.0                 # linear gain at 1 m (30 dB)
    bandwidth: float = 1e6             # Hz
    packet_bits: float = 5e6           # bits per update
    noise_power: float = 1e-13         # W (-100 dBm)
    lam: float = 500.0                 # AoI/power trade-off weight
    a_max: int = 100
    risk_rect: tuple = (2, 3, 5, 4)    # (x0, y0, w, h) in cells
    p_risk: float = 0.1
    risk_penalty: float = 100.0
    episode_len: int = 100
    device_positions: tuple = ()       # ((x_m, y_m) in meters, one per device)
    seed: int = 0

    def __post_init__(self):
        if self.grid_w < 1 or self.grid_h < 1 or self.num_uavs < 1 or self.num_devices < 1:
            raise ConfigError("grid dims, num_uavs and num_devices must be positive")
        for name in ("cell_len", "height", "g0", "bandwidth", "noise_power"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.packet_bits < 0 or self.lam < 0 or self.risk_penalty < 0:
            raise ConfigError("packet_bits, lam and risk_penalty must be non-negative")
        if not 0.0 <= self.p_risk <= 1.0:
            raise ConfigError(f"p_risk must lie in [0, 1], got {self.p_risk}")
        if self.a_max < 1 or self.episode_len < 1:
            raise ConfigError("a_max and episode_len must be at least 1")
        x0, y0, w, h = self.risk_rect
        if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > self.grid_w or y0 + h > self.grid_h:
            raise ConfigError(f"risk_rect {self.risk_rect} not inside the grid")
        if len(self.device_positions) != self.num_devices:
            raise ConfigError(
                f"expected {self.num_devices} device positions, got {len(self.device_positions)}")
        for x, y in self.device_positions:
            if not (0.0 <= x <= self.grid_w * self.cell_len and 0.0 <= y <= self.grid_h * self.cell_len):
                raise ConfigError(f"device position ({x}, {y}) outside the grid area")

    # -- derived dimensions --------------------------------------------------

    @property
    def num_actions(self) -> int:
        """Per-agent action count: 5 moves x (num_devices + 1) serve choices."""
        return NUM_MOVES * (self.num_devices + 1)

    @property
    def state_dim(self) -> int:
        return 2 * self.num_uavs + self.num_devices

    # -- serialization -------------------------------------------------------

    _FIELDS = ("grid_w", "grid_h", "cell_len", "num_uavs", "num_devices", "height",
               "g0", "bandwidth", "packet_bits", "noise_power", "lam", "a_max",
               "risk_rect", "p_risk", "risk_penalty", "episode_len",
               "device_positions", "seed")

    def to_json_dict(self) -> dict:
        d = {}
        for name in self._FIELDS:
            value = getattr(self, name)
            if name == "risk_rect":
                value = list(value)
            elif name == "device_positions":
                value = [[float(x), float(y)] for x, y in value]
            d[name] = value
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "EnvConfig":
        unknown = set(d) - set(cls._FIELDS)
        if unknown:
            raise ConfigError(f"unknown env config keys: {sorted(unknown)}")
        missing = set(cls._FIELDS) - set(d)
        if missing:
            raise ConfigError(f"missing env config keys: {sorted(missing)}")
        kwargs = dict(d)
        kwargs["risk_rect"] = tuple(int(v) for v in d["risk_rect"])
        kwargs["device_positions"] = tuple((float(x), float(y)) for x, y in d["device_positions"])
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def make_env_config(seed: int = 0, **overrides) -> EnvConfig:
    """Build a config with device positions drawn uniformly from the seed.

    The layout is frozen into the config so dataset collection and
    evaluation share identical device placement. Explicit
    ``device_positions`` in ``overrides`` win over the draw.
    """
    base = dict(seed=seed)
    base.update(overrides)
    if "device_positions" not in base:
        probe = {k: v for k, v in base.items() if k != "device_positions"}
        grid_w = probe.get("grid_w", EnvConfig.grid_w)
        grid_h = probe.get("grid_h", EnvConfig.grid_h)
        cell_len = probe.get("cell_len", EnvConfig.cell_len)
        num_devices = probe.get("num_devices", EnvConfig.num_devices)
        rng = substream(seed, STREAM_DEVICE_LAYOUT)
        pts = rng.uniform((0.0, 0.0), (grid_w * cell_len, grid_h * cell_len),
                          size=(num_devices, 2))
        base["device_positions"] = tuple((float(x), float(y)) for x, y in pts)
    return EnvConfig(**base)


@dataclass(frozen=True)
class EnvState:
    """Full observable state: UAV cell coordinates plus per-device AoI."""

    uav_cells: tuple   # ((x, y), ...) cell indices
    aoi: tuple         # per-device ints in [1, a_max]

    def to_vector(self) -> np.ndarray:
        flat = [float(c) for cell in self.uav_cells for c in cell]
        flat.extend(float(a) for a in self.aoi)
        return np.array(flat, dtype=np.float64)

    @classmethod
    def from_vector(cls, vec, num_uavs: int) -> "EnvState":
        vec = np.asarray(vec)
        cells = tuple((int(round(vec[2 * i])), int(round(vec[2 * i + 1])))
                      for i in range(num_uavs))
        aoi = tuple(int(round(a)) for a in vec[2 * num_uavs:])
        return cls(cells, aoi)


@dataclass(frozen=True)
class AgentAction:
    """One UAV decision: a move direction and a served device id (0 = none)."""

    move: str
    serve: int

    def to_index(self, num_devices: int) -> int:
        return MOVES.index(self.move) * (num_devices + 1) + self.serve

    @classmethod
    def from_index(cls, index: int, num_devices: int) -> "AgentAction":
        move_idx, serve = divmod(int(index), num_devices + 1)
        return cls(MOVES[move_idx], serve)


def encode_action(move_idx: int, serve: int, num_devices: int) -> int:
    return move_idx * (num_devices + 1) + serve


def decode_action(index: int, num_devices: int):
    return divmod(int(index), num_devices + 1)


# -- physics ------------------------------------------------------------------


def update_aoi(prev: int, served: bool, a_max: int) -> int:
    """AoI transition: reset to 1 when served, else increment capped at a_max."""
    if served:
        return 1
    return min(a_max, prev + 1)


def channel_gain(g0: float, height: float, dist2d: float) -> float:
    """LoS gain at planar distance ``dist2d`` for a UAV at altitude ``height``."""
    return g0 / (height * height + dist2d * dist2d)


def tx_power(gain: float, packet_bits: float, bandwidth: float, noise_power: float) -> float:
    """Power (W) needed to deliver the packet within one slot at Shannon capacity."""
    if gain <= 0.0:
        raise ConfigError(f"channel gain must be positive, got {gain}")
    return (2.0 ** (packet_bits / bandwidth) - 1.0) * noise_power / gain


def uav_position_m(cell, cell_len: float):
    """Planar position of a UAV hovering over the center of ``cell``."""
    return ((cell[0] + 0.5) * cell_len, (cell[1] + 0.5) * cell_len)


def pair_tx_power(uav_cell, device_idx: int, config: EnvConfig) -> float:
    ux, uy = uav_position_m(uav_cell, config.cell_len)
    dx, dy = config.device_positions[device_idx]
    dist2d = float(np.hypot(ux - dx, uy - dy))
    gain = channel_gain(config.g0, config.height, dist2d)
    return tx_power(gain, config.packet_bits, config.bandwidth, config.noise_power)


def base_reward(next_aoi, served_pairs, uav_cells, config: EnvConfig) -> float:
    """Deterministic reward part: negative mean AoI minus weighted service power.

    ``served_pairs`` holds (uav_index, device_id) with 1-based device ids;
    powers use each UAV's post-move cell.
    """
    aoi_cost = float(np.mean(np.asarray(next_aoi, dtype=np.float64)))
    power_cost = 0.0
    for uav_idx, device_id in served_pairs:
        power_cost += pair_tx_power(uav_cells[uav_idx], device_id - 1, config)
    return -aoi_cost - config.lam * power_cost


def in_risk_region(cell, config: EnvConfig) -> bool:
    """Closed-rectangle membership of a cell in the risk region."""
    x0, y0, w, h = config.risk_rect
    return x0 <= cell[0] <= x0 + w - 1 and y0 <= cell[1] <= y0 + h - 1


# -- dynamics -----------------------------------------------------------------


def reset(config: EnvConfig, rng: np.random.Generator) -> EnvState:
    """Uniform random UAV cells, all AoI at the freshest value 1."""
    cells = tuple((int(rng.integers(0, config.grid_w)), int(rng.integers(0, config.grid_h)))
                  for _ in range(config.num_uavs))
    return EnvState(cells, (1,) * config.num_devices)


def step(state: EnvState, joint_action, config: EnvConfig, rng: np.random.Generator):
    """Advance one timestep; returns (next_state, reward, info).

    Moves clamp at grid borders. A device's AoI resets if any UAV serves it;
    power is charged for every (UAV, device) service selection. While any
    UAV's post-move cell is in the risk region, one Bernoulli(p_risk) draw
    decides whether the risk penalty is subtracted this step.
    """
    if len(joint_action) != config.num_uavs:
        raise ConfigError(f"joint action needs {config.num_uavs} entries")
    new_cells = []
    served_pairs = []
    served_devices = set()
    for i, action_idx in enumerate(joint_action):
        if not 0 <= int(action_idx) < config.num_actions:
            raise ConfigError(f"action index {action_idx} out of range for agent {i}")
        move_idx, serve = decode_action(action_idx, config.num_devices)
        dx, dy = _MOVE_DELTAS[MOVES[move_idx]]
        x, y = state.uav_cells[i]
        new_cells.append((min(config.grid_w - 1, max(0, x + dx)),
                          min(config.grid_h - 1, max(0, y + dy))))
        if serve > 0:
            served_pairs.append((i, serve))
            served_devices.add(serve)
    new_cells = tuple(new_cells)

    next_aoi = tuple(update_aoi(a, (m + 1) in served_devices, config.a_max)
                     for m, a in enumerate(state.aoi))
    reward = base_reward(next_aoi, served_pairs, new_cells, config)

    in_risk = any(in_risk_region(c, config) for c in new_cells)
    risk_triggered = False
    if in_risk and config.p_risk > 0.0:
        risk_triggered = bool(rng.random() < config.p_risk)
        if risk_triggered:
            reward -= config.risk_penalty

    sum_power = 0.0
    for uav_idx, device_id in served_pairs:
        sum_power += pair_tx_power(new_cells[uav_idx], device_id - 1, config)
    info = {
        "sum_aoi": float(sum(next_aoi)),
        "sum_power": sum_power,
        "in_risk": in_risk,
        "risk_triggered": risk_triggered,
    }
    return EnvState(new_cells, next_aoi), reward, info


# -- network featurization ------------------------------------------------------


def state_scale(config: EnvConfig) -> np.ndarray:
    """Per-component normalization: cells by grid size, AoI by a_max."""
    scale = np.empty(config.state_dim)
    for i in range(config.num_uavs):
        scale[2 * i] = 1.0 / config.grid_w
        scale[2 * i + 1] = 1.0 / config.grid_h
    scale[2 * config.num_uavs:] = 1.0 / config.a_max
    return scale


def encode_states(states: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Normalize raw state vectors (1-D or batched 2-D) for network input."""
    return np.ascontiguousarray(np.asarray(states, dtype=np.float64) * state_scale(config))


# -- trajectory export ----------------------------------------------------------


def trajectory_csv_header(config: EnvConfig) -> str:
    cols = ["step"]
    for i in range(config.num_uavs):
        cols += [f"uav{i}_x", f"uav{i}_y", f"uav{i}_serve"]
    cols += [f"aoi{m}" for m in range(config.num_devices)]
    cols += ["reward", "in_risk"]
    return ",".join(cols)


def write_trajectory_csv(path, records, config: EnvConfig) -> None:
    """Write one episode of step records (as produced by evaluate.run_episode)."""
    lines = [trajectory_csv_header(config)]
    for rec in records:
        cols = [str(rec["step"])]
        for i in range(config.num_uavs):
            x, y = rec["uav_cells"][i]
            cols += [str(x), str(y), str(rec["serves"][i])]
        cols += [str(a) for a in rec["aoi"]]
        cols += [repr(rec["reward"]), "1" if rec["in_risk"] else "0"]
        lines.append(",".join(cols))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
