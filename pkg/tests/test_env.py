import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carml import env
from carml.env import FORWARD, LEFT, RIGHT, AgentState, EnvConfig


def rng(seed=0):
    return np.random.default_rng(seed)


def state_facing_east(cfg, x, y):
    # spawn faces -y; three left turns of 30 degrees face +x
    layout = env.fixed_layout(cfg)
    turns = 3
    return AgentState(x, y, float(env.heading_from_turns(cfg, turns)), 0, layout, turns)


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(horizon=1)
    with pytest.raises(ValueError):
        EnvConfig(step_size=2.0)
    with pytest.raises(ValueError):
        EnvConfig(layout_mode="maze")
    assert EnvConfig().step_size == pytest.approx(0.05)


def test_observation_dims():
    assert EnvConfig().obs_dim == 12 * 6
    assert EnvConfig(obs_mode="pose").obs_dim == 4
    s, o = env.reset(EnvConfig(), rng())
    assert o.shape == (72,) and np.isfinite(o).all()


def test_fixed_layout_reset_is_deterministic():
    cfg = EnvConfig()
    a, _ = env.reset(cfg, rng(1))
    b, _ = env.reset(cfg, rng(2))
    assert a.layout == b.layout


def test_random_layouts_differ_across_seeds():
    cfg = EnvConfig(layout_mode="random")
    a, _ = env.reset(cfg, rng(1))
    b, _ = env.reset(cfg, rng(2))
    assert not np.array_equal(a.layout.positions, b.layout.positions)


def test_spawn_pose_constant():
    for mode in ("fixed", "random"):
        cfg = EnvConfig(layout_mode=mode)
        for seed in range(3):
            s, _ = env.reset(cfg, rng(seed))
            assert (s.x, s.y, s.heading) == (0.5, 0.95, 1.5 * math.pi)
            assert s.t == 0


def test_forward_east_moves_x_only():
    cfg = EnvConfig()
    s = state_facing_east(cfg, 0.3, 0.4)
    assert s.heading == pytest.approx(0.0, abs=1e-12) or s.heading == pytest.approx(2 * math.pi)
    n, _, _ = env.step(s, FORWARD, cfg)
    assert n.x == pytest.approx(0.3 + cfg.step_size, abs=1e-15)
    assert n.y == pytest.approx(0.4, abs=1e-15)


def test_left_then_right_restores_heading_bitwise():
    cfg = EnvConfig()
    s, _ = env.reset(cfg, rng())
    for first, second in ((LEFT, RIGHT), (RIGHT, LEFT)):
        a, _, _ = env.step(s, first, cfg)
        b, _, _ = env.step(a, second, cfg)
        assert b.heading == s.heading
        assert (b.x, b.y) == (s.x, s.y)


def test_forward_into_wall_clips():
    cfg = EnvConfig()
    s, _ = env.reset(cfg, rng())
    s = dataclasses.replace(s, y=0.01)  # facing -y at the bottom wall
    n, _, _ = env.step(s, FORWARD, cfg)
    assert n.y == 0.0
    assert n.heading == s.heading


def test_step_past_horizon_rejected():
    cfg = EnvConfig(horizon=3)
    s, _ = env.reset(cfg, rng())
    dones = []
    for _ in range(3):
        s, _, d = env.step(s, FORWARD, cfg)
        dones.append(d)
    assert dones == [False, False, True]
    with pytest.raises(ValueError):
        env.step(s, FORWARD, cfg)
    with pytest.raises(ValueError):
        env.step(env.reset(cfg, rng())[0], 7, cfg)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=2, max_size=60), st.integers(0, 2 ** 32 - 1))
def test_position_stays_in_room_and_heading_wrapped(actions, seed):
    cfg = EnvConfig(horizon=len(actions), layout_mode="random")
    s, _ = env.reset(cfg, rng(seed))
    for i, a in enumerate(actions):
        s, o, done = env.step(s, a, cfg)
        assert 0.0 <= s.x <= cfg.room_size and 0.0 <= s.y <= cfg.room_size
        assert 0.0 <= s.heading < 2 * math.pi
        assert np.isfinite(o).all() and o.shape == (cfg.obs_dim,)
        assert done == (i == len(actions) - 1)


def test_position_fuzz_batched():
    # 10^4 random action sequences run in lockstep
    cfg = EnvConfig()
    g = rng(5)
    B = 10_000
    x, y, turns = np.full(B, 0.5), np.full(B, 0.95), np.zeros(B, dtype=np.int64)
    for _ in range(cfg.horizon):
        x, y, turns = env.move(cfg, x, y, turns, g.integers(3, size=B))
        assert (x >= 0).all() and (x <= 1).all() and (y >= 0).all() and (y <= 1).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_seeded_observation_sequences_identical(seed):
    cfg = EnvConfig(layout_mode="random")
    acts = rng(seed).integers(3, size=cfg.horizon)
    seqs = []
    for _ in range(2):
        s, o = env.reset(cfg, rng(seed))
        obs = [o]
        for a in acts:
            s, o, _ = env.step(s, int(a), cfg)
            obs.append(o)
        seqs.append(np.stack(obs))
    assert np.array_equal(seqs[0], seqs[1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8))
def test_min_separation_in_random_layouts(seed, n):
    cfg = EnvConfig(layout_mode="random", n_landmarks=n)
    for split in ("train", "test"):
        lay = env.make_layout(cfg, rng(seed), split)
        p = lay.positions
        d = np.linalg.norm(p[:, None] - p[None], axis=2) + np.eye(n) * 10
        assert d.min() >= cfg.min_separation * cfg.room_size - 1e-12
        assert ((p >= 0) & (p <= cfg.room_size)).all()


def test_random_rollout_length_and_batch_equivalence():
    cfg = EnvConfig()
    layout = env.fixed_layout(cfg)
    tr = env.random_rollout(cfg, layout, rng(3))
    assert len(tr) == cfg.horizon and tr.obs.shape == (cfg.horizon, cfg.obs_dim)
    s, _ = env.reset(cfg, rng(), layout=layout)
    for t, a in enumerate(tr.actions):
        s, o, _ = env.step(s, int(a), cfg)
        np.testing.assert_array_equal(o, tr.obs[t])
        assert (s.x, s.y, s.heading) == tuple(tr.poses[t])


def test_rays_see_landmark_ahead():
    cfg = EnvConfig(n_landmarks=1)
    layout = env.Layout(np.array([[0.5, 0.5]]), np.array([0]))
    o = env.observe(cfg, 0.5, 0.95, 1.5 * math.pi, layout.positions[None], layout.kinds[None])[0]
    rays = o.reshape(cfg.n_rays, 2)
    centre = [cfg.n_rays // 2 - 1, cfg.n_rays // 2]
    assert rays[centre, 1].max() == 1.0
    assert rays[0, 1] == 0.0 and rays[-1, 1] == 0.0


def test_pose_observation_normalized():
    cfg = EnvConfig(obs_mode="pose")
    o = env.observe(cfg, 1.0, 0.0, 0.0, np.zeros((1, 5, 2)), np.zeros((1, 5), dtype=int))[0]
    np.testing.assert_allclose(o, [1.0, -1.0, 1.0, 0.0])


def test_test_reward_formula():
    cfg = EnvConfig()
    tasks = env.make_test_tasks(cfg, rng())
    t = tasks[0]
    assert env.test_reward(np.array(t.target_position), t) == pytest.approx(1.0 / 0.1)
    p = np.array(t.target_position) + np.array([0.4, 0.0])
    assert env.test_reward(p, t) == pytest.approx(2.0)
    closer = np.array(t.target_position) + np.array([0.2, 0.0])
    assert env.test_reward(p, t) < env.test_reward(closer, t)


def test_fixed_mode_one_task_per_landmark():
    cfg = EnvConfig()
    tasks = env.make_test_tasks(cfg, rng())
    assert [t.target_landmark for t in tasks] == list(range(5))
    assert all(t.success_radius == cfg.success_radius * cfg.room_size for t in tasks)
    lay = env.fixed_layout(cfg)
    for t in tasks:
        assert tuple(lay.positions[t.target_landmark]) == t.target_position


def test_random_mode_tasks_use_held_out_identities():
    cfg = EnvConfig(layout_mode="random")
    tasks = env.make_test_tasks(cfg, rng(4), n_tasks=30)
    train_kinds = set(env.make_layout(cfg, rng(0), "train").kinds.tolist())
    assert train_kinds == set(range(cfg.n_landmarks))
    for t in tasks:
        kind = int(t.layout.kinds[t.target_landmark])
        assert kind >= cfg.n_landmarks and kind not in train_kinds
