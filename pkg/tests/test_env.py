"""Grid-world dynamics, channel/power arithmetic, reward and risk region."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offmarl import env as envmod
from offmarl.env import (AgentAction, EnvConfig, EnvState, base_reward,
                         centered_rect, channel_gain, encode_action,
                         encode_states, in_risk_region, make_env_config,
                         tx_power, update_aoi)
from offmarl.errors import ConfigError
from offmarl.seeding import substream


def tiny_config(**overrides):
    defaults = dict(seed=5, grid_w=4, grid_h=4, num_uavs=2, num_devices=3,
                    risk_rect=(1, 1, 2, 2), episode_len=10)
    defaults.update(overrides)
    return make_env_config(**defaults)


def hover_noserve(config):
    return [encode_action(4, 0, config.num_devices)] * config.num_uavs


# -- AoI ------------------------------------------------------------------------


def test_update_aoi_served_resets_to_one():
    assert update_aoi(5, True, 100) == 1


def test_update_aoi_saturates_at_cap():
    assert update_aoi(100, False, 100) == 100


def test_update_aoi_increments():
    assert update_aoi(7, False, 100) == 8


# -- channel and power ------------------------------------------------------------


def test_channel_gain_reference_values():
    assert channel_gain(1000.0, 100.0, 0.0) == pytest.approx(0.1, abs=1e-15)
    assert channel_gain(1000.0, 1.0, 0.0) == pytest.approx(1000.0)


def test_channel_gain_inverse_square():
    g1 = channel_gain(1000.0, 100.0, 100.0)
    g2 = channel_gain(1000.0, 100.0, np.sqrt(3) * 100.0)  # doubles h^2 + d^2
    assert g2 == pytest.approx(g1 / 2.0, rel=1e-12)


def test_tx_power_reference_value():
    # (2^5 - 1) * 1e-13 / 0.1 = 3.1e-11 W
    assert tx_power(0.1, 5e6, 1e6, 1e-13) == pytest.approx(3.1e-11, rel=1e-12)


def test_tx_power_zero_packet():
    assert tx_power(0.5, 0.0, 1e6, 1e-13) == 0.0


def test_tx_power_inverse_in_gain():
    p1 = tx_power(0.1, 5e6, 1e6, 1e-13)
    p2 = tx_power(0.2, 5e6, 1e6, 1e-13)
    assert p2 == pytest.approx(p1 / 2.0, rel=1e-12)


def test_tx_power_rejects_nonpositive_gain():
    with pytest.raises(ConfigError):
        tx_power(0.0, 5e6, 1e6, 1e-13)


# -- reward --------------------------------------------------------------------


def served_power_config():
    # device 0 exactly under the (0, 0) cell center -> dist2d = 0, gain = 0.1
    return make_env_config(seed=1, grid_w=10, grid_h=10, num_uavs=1, num_devices=10,
                           device_positions=tuple((50.0, 50.0) for _ in range(10)))


def test_base_reward_mean_aoi_only():
    cfg = served_power_config()
    r = base_reward([5] * 10, [], [(0, 0)], cfg)
    assert r == pytest.approx(-5.0, abs=1e-12)


def test_base_reward_lambda_zero_is_pure_aoi():
    cfg = make_env_config(seed=1, lam=0.0, num_uavs=1)
    r = base_reward([3] * 10, [(0, 1)], [(0, 0)], cfg)
    assert r == pytest.approx(-3.0, abs=1e-12)


def test_base_reward_with_one_served_pair():
    cfg = served_power_config()
    r = base_reward([5] * 10, [(0, 1)], [(0, 0)], cfg)
    assert r == pytest.approx(-5.0 - 500.0 * 3.1e-11, rel=1e-12)


# -- risk region ----------------------------------------------------------------


def test_risk_region_default_layout():
    cfg = make_env_config(seed=0)
    assert cfg.risk_rect == centered_rect(10, 10, 5, 4)
    assert in_risk_region((5, 5), cfg)       # middle of the grid
    assert not in_risk_region((0, 0), cfg)
    x0, y0, w, h = cfg.risk_rect
    assert in_risk_region((x0, y0), cfg)     # closed boundary
    assert in_risk_region((x0 + w - 1, y0 + h - 1), cfg)
    assert not in_risk_region((x0 - 1, y0), cfg)


# -- reset ----------------------------------------------------------------------


def test_reset_reproducible_and_fresh():
    cfg = tiny_config()
    s1 = envmod.reset(cfg, substream(9, 4))
    s2 = envmod.reset(cfg, substream(9, 4))
    assert s1 == s2
    assert s1.aoi == (1,) * cfg.num_devices


def test_reset_cells_uniform_within_three_sigma():
    cfg = make_env_config(seed=0, num_uavs=1)
    rng = substream(42, 4)
    counts = np.zeros((10, 10))
    n = 10_000
    for _ in range(n):
        s = envmod.reset(cfg, rng)
        counts[s.uav_cells[0]] += 1
    expected = n / 100.0
    sigma = np.sqrt(n * 0.01 * 0.99)
    assert np.all(np.abs(counts - expected) <= 3.0 * sigma)


# -- step ------------------------------------------------------------------------


def test_hover_noserve_keeps_positions_and_ages():
    cfg = tiny_config()
    state = EnvState(((1, 2), (3, 0)), (1, 4, 2))
    nxt, reward, info = envmod.step(state, hover_noserve(cfg), cfg, substream(0, 5))
    assert nxt.uav_cells == state.uav_cells
    assert nxt.aoi == (2, 5, 3)
    assert reward == pytest.approx(-np.mean([2, 5, 3]))
    assert info["sum_power"] == 0.0


def test_border_clamp_north():
    cfg = tiny_config()
    state = EnvState(((0, 3), (0, 0)), (1, 1, 1))
    north = encode_action(0, 0, cfg.num_devices)
    south = encode_action(1, 0, cfg.num_devices)
    nxt, _, _ = envmod.step(state, [north, south], cfg, substream(0, 5))
    assert nxt.uav_cells[0] == (0, 3)   # clamped at the top edge
    assert nxt.uav_cells[1] == (0, 0)   # clamped at the bottom edge


def test_risk_penalty_applied_when_triggered():
    cfg = tiny_config(p_risk=1.0, risk_penalty=50.0)
    state = EnvState(((1, 1), (3, 3)), (1, 1, 1))
    nxt, reward, info = envmod.step(state, hover_noserve(cfg), cfg, substream(0, 5))
    assert info["in_risk"] and info["risk_triggered"]
    assert reward == pytest.approx(-2.0 - 50.0)


def test_step_deterministic_when_riskless():
    for overrides in (dict(p_risk=0.0), dict(risk_penalty=0.0)):
        cfg = tiny_config(**overrides)
        state = envmod.reset(cfg, substream(3, 4))
        a = [encode_action(2, 1, cfg.num_devices), encode_action(0, 2, cfg.num_devices)]
        out1 = envmod.step(state, a, cfg, np.random.default_rng(111))
        out2 = envmod.step(state, a, cfg, np.random.default_rng(999))
        assert out1[0] == out2[0]
        assert out1[1] == out2[1]


def test_serve_then_idle_ramps_aoi():
    cfg = tiny_config(p_risk=0.0)
    state = EnvState(((0, 0), (3, 3)), (4, 4, 4))
    serve1 = [encode_action(4, 1, cfg.num_devices), encode_action(4, 0, cfg.num_devices)]
    state, _, _ = envmod.step(state, serve1, cfg, substream(0, 5))
    seen = [state.aoi[0]]
    for _ in range(4):
        state, _, _ = envmod.step(state, hover_noserve(cfg), cfg, substream(0, 5))
        seen.append(state.aoi[0])
    assert seen == [1, 2, 3, 4, 5]


def test_multiple_uavs_serving_same_device():
    cfg = tiny_config(p_risk=0.0)
    state = EnvState(((0, 0), (3, 3)), (5, 5, 5))
    both = [encode_action(4, 2, cfg.num_devices)] * 2
    nxt, reward, info = envmod.step(state, both, cfg, substream(0, 5))
    assert nxt.aoi == (6, 1, 6)          # one reset, charged twice
    p0 = envmod.pair_tx_power((0, 0), 1, cfg)
    p1 = envmod.pair_tx_power((3, 3), 1, cfg)
    assert info["sum_power"] == pytest.approx(p0 + p1, rel=1e-12)
    assert reward == pytest.approx(-np.mean([6, 1, 6]) - cfg.lam * (p0 + p1), rel=1e-12)


def test_step_does_not_mutate_input_state():
    cfg = tiny_config()
    state = EnvState(((1, 1), (2, 2)), (3, 3, 3))
    snapshot = EnvState(state.uav_cells, state.aoi)
    envmod.step(state, hover_noserve(cfg), cfg, substream(0, 5))
    assert state == snapshot


def test_all_devices_served_every_step_with_lambda_zero():
    cfg = make_env_config(seed=2, grid_w=4, grid_h=4, num_uavs=2, num_devices=2,
                          lam=0.0, p_risk=0.0, risk_rect=(1, 1, 2, 2))
    state = envmod.reset(cfg, substream(1, 4))
    actions = [encode_action(4, 1, 2), encode_action(4, 2, 2)]
    for _ in range(5):
        state, reward, _ = envmod.step(state, actions, cfg, substream(0, 5))
        assert reward == -1.0


def test_fuzz_bounds_and_reward_sign():
    cfg = tiny_config(p_risk=0.3, risk_penalty=10.0)
    rng = substream(77, 5)
    act_rng = np.random.default_rng(78)
    state = envmod.reset(cfg, rng)
    for k in range(100_000):
        joint = act_rng.integers(0, cfg.num_actions, size=cfg.num_uavs)
        state, reward, _ = envmod.step(state, joint, cfg, rng)
        assert reward <= 0.0
        for (x, y) in state.uav_cells:
            assert 0 <= x < cfg.grid_w and 0 <= y < cfg.grid_h
        for a in state.aoi:
            assert 1 <= a <= cfg.a_max
        if k % 200 == 0:
            state = envmod.reset(cfg, rng)


def test_step_rejects_bad_actions():
    cfg = tiny_config()
    state = envmod.reset(cfg, substream(0, 4))
    with pytest.raises(ConfigError):
        envmod.step(state, [0], cfg, substream(0, 5))
    with pytest.raises(ConfigError):
        envmod.step(state, [0, cfg.num_actions], cfg, substream(0, 5))


# -- actions ------------------------------------------------------------------------


def test_agent_action_round_trip():
    for idx in range(tiny_config().num_actions):
        action = AgentAction.from_index(idx, 3)
        assert action.to_index(3) == idx
    assert AgentAction("hover", 0).to_index(3) == 4 * 4 + 0


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=4), st.integers(min_value=0, max_value=7))
def test_encode_decode_action_inverse(move, serve):
    idx = encode_action(move, serve, 7)
    assert envmod.decode_action(idx, 7) == (move, serve)


# -- config -------------------------------------------------------------------------


def test_env_config_json_round_trip():
    cfg = tiny_config()
    blob = json.dumps(cfg.to_json_dict())
    back = EnvConfig.from_json_dict(json.loads(blob))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_env_config_unknown_key_rejected():
    d = tiny_config().to_json_dict()
    d["grdi_w"] = 3
    with pytest.raises(ConfigError):
        EnvConfig.from_json_dict(d)


def test_env_config_validation():
    with pytest.raises(ConfigError):
        make_env_config(seed=0, p_risk=1.5)
    with pytest.raises(ConfigError):
        make_env_config(seed=0, risk_rect=(8, 8, 5, 5))
    with pytest.raises(ConfigError):
        make_env_config(seed=0, num_devices=2,
                        device_positions=((0.0, 0.0), (5000.0, 0.0)))


def test_device_layout_seeded():
    a = make_env_config(seed=4, num_devices=5)
    b = make_env_config(seed=4, num_devices=5)
    c = make_env_config(seed=5, num_devices=5)
    assert a.device_positions == b.device_positions
    assert a.device_positions != c.device_positions


def test_encode_states_normalization():
    cfg = tiny_config()
    state = EnvState(((2, 4 - 1), (0, 0)), (50, 1, 100))
    enc = encode_states(state.to_vector(), cfg)
    assert enc[0] == pytest.approx(2 / 4)
    assert enc[1] == pytest.approx(3 / 4)
    assert enc[4] == pytest.approx(50 / 100)


def test_trajectory_csv(tmp_path):
    cfg = tiny_config()
    records = [{"step": 0, "uav_cells": ((1, 1), (2, 2)), "serves": [0, 3],
                "aoi": (1, 2, 3), "reward": -2.0, "in_risk": False}]
    path = tmp_path / "traj.csv"
    envmod.write_trajectory_csv(path, records, cfg)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("step,uav0_x,uav0_y,uav0_serve,uav1_x")
    assert lines[1] == "0,1,1,0,2,2,3,1,2,3,-2.0,0"
