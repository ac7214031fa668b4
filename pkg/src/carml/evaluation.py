"""Test-time evaluation and diagnostics: transfer, fine-tuning, skill maps, diversity."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import env as envmod
from .env import EnvConfig, TestTask, Trajectory
from .metapolicy import (
    MetaPolicy,
    PolicyConfig,
    compute_advantages,
    make_optimizer,
    policy_update,
    run_trials,
)
from .reward import NormalizerRegistry, RewardShaper
from .scaffold import TaskScaffold, assign_trajectories

TEST_KEY = "test"


# transfer ------------------------------------------------------------------------------

@dataclass
class TransferReport:
    success: list  # per trial
    success_rate: float
    episode_returns: np.ndarray  # (n_trials, E), raw test rewards
    sample_count: int
    task_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"success": [bool(s) for s in self.success], "success_rate": self.success_rate,
                "episode_returns": np.asarray(self.episode_returns).tolist(),
                "sample_count": self.sample_count, "task_ids": list(self.task_ids)}


def episode_success(poses: np.ndarray, task: TestTask) -> bool:
    """True if any pose (T, >=2) lies within the task's success radius of the target."""
    d = np.linalg.norm(np.asarray(poses)[:, :2] - np.asarray(task.target_position), axis=1)
    return bool((d <= task.success_radius).any())


def test_reward_fn(tasks: Sequence[TestTask]):
    targets = np.array([t.target_position for t in tasks], dtype=np.float64)
    eps = np.array([t.reward_eps for t in tasks], dtype=np.float64)
    return lambda obs, xy: 1.0 / (eps + np.linalg.norm(xy - targets, axis=1))


def run_test_trials(policy: MetaPolicy, tasks: Sequence[TestTask], episodes: int, rng: np.random.Generator,
                    env_config: EnvConfig, registry: NormalizerRegistry | None = None):
    """Frozen-weights trials; test rewards are whitened with one normalizer shared by all tasks."""
    registry = registry if registry is not None else NormalizerRegistry()
    shaper = RewardShaper([TEST_KEY] * len(tasks), registry, window=None)
    return run_trials(policy, env_config, [t.layout for t in tasks], test_reward_fn(tasks), shaper,
                      episodes, rng, task_ids=[t.target_landmark for t in tasks])


def _report(batch, tasks: Sequence[TestTask]) -> TransferReport:
    T, E = batch.horizon, batch.episodes
    final = slice((E - 1) * T, E * T)
    success = [episode_success(batch.poses[b, final], t) for b, t in enumerate(tasks)]
    returns = batch.raw_rewards.reshape(len(tasks), E, T).sum(axis=2)
    return TransferReport(success, float(np.mean(success)), returns, int(batch.n_steps),
                          [t.target_landmark for t in tasks])


def direct_transfer(policy: MetaPolicy, test_tasks: Sequence[TestTask], episodes: int, rng: np.random.Generator,
                    env_config: EnvConfig, repeats: int = 1,
                    registry: NormalizerRegistry | None = None) -> TransferReport:
    """One trial per task (``repeats`` times each) with no parameter updates."""
    tasks = [t for t in test_tasks for _ in range(repeats)]
    batch = run_test_trials(policy, tasks, episodes, rng, env_config, registry)
    return _report(batch, tasks)


def random_action_transfer(test_tasks: Sequence[TestTask], episodes: int, rng: np.random.Generator,
                           env_config: EnvConfig, repeats: int = 1) -> TransferReport:
    """Baseline that ignores everything and acts uniformly at random."""
    tasks = [t for t in test_tasks for _ in range(repeats)]
    B, T = len(tasks), env_config.horizon
    returns = np.zeros((B, episodes))
    reward = test_reward_fn(tasks)
    success = np.zeros(B, dtype=bool)
    sx, sy, _ = env_config.spawn
    for e in range(episodes):
        x, y, turns = np.full(B, sx), np.full(B, sy), np.zeros(B, dtype=np.int64)
        hit = np.zeros(B, dtype=bool)
        for _ in range(T):
            x, y, turns = envmod.move(env_config, x, y, turns, rng.integers(envmod.N_ACTIONS, size=B))
            xy = np.stack([x, y], axis=1)
            returns[:, e] += reward(None, xy)
            hit |= np.linalg.norm(xy - np.array([t.target_position for t in tasks]), axis=1) \
                <= np.array([t.success_radius for t in tasks])
        success = hit
    return TransferReport(success.tolist(), float(success.mean()), returns, B * episodes * T,
                          [t.target_landmark for t in tasks])


# fine-tuning ---------------------------------------------------------------------------

def finetune(policy_init: MetaPolicy, test_task: TestTask, update_budget: int, policy_config: PolicyConfig,
             env_config: EnvConfig, rng: np.random.Generator, trials_per_update: int = 8) -> list[dict]:
    """Continue meta-policy updates on one test task.

    Returns one point per batch collected: ``update`` (updates applied before
    the batch), cumulative test-reward ``samples`` and the batch's mean raw
    trial return and success rate. A zero budget yields the single
    direct-transfer point. ``policy_init`` is not modified.
    """
    if update_budget < 0:
        raise ValueError("update_budget must be >= 0")
    policy = policy_init.copy()
    opt = make_optimizer(policy, policy_config)
    registry = NormalizerRegistry()
    tasks = [test_task] * trials_per_update
    E = policy_config.episodes_per_trial
    curve, samples = [], 0
    for u in range(update_budget + 1):
        batch = run_test_trials(policy, tasks, E, rng, env_config, registry)
        samples += batch.n_steps
        rep = _report(batch, tasks)
        curve.append({"update": u, "samples": samples,
                      "mean_return": float(batch.raw_rewards.sum(axis=1).mean()),
                      "success_rate": rep.success_rate})
        if u < update_budget:
            compute_advantages(batch, policy_config.gamma, policy_config.gae_lambda,
                               policy_config.bootstrap_across_episodes)
            policy_update(policy, opt, batch, policy_config, rng)
    return curve


def trailing_mean(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def samples_to_reach(curve: list[dict], target: float, window: int) -> int | None:
    """Samples consumed when the trailing-window mean return first reaches ``target``."""
    tm = trailing_mean([p["mean_return"] for p in curve], window)
    hit = np.nonzero(tm >= target)[0]
    return None if len(hit) == 0 else int(curve[hit[0]]["samples"])


# skill maps ----------------------------------------------------------------------------

@dataclass
class SkillMap:
    """Per-component lists of (T, 3) pose arrays: x, y, heading."""

    panels: list

    @property
    def n_components(self) -> int:
        return len(self.panels)

    def __eq__(self, other):
        if not isinstance(other, SkillMap) or len(self.panels) != len(other.panels):
            return False
        return all(len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
                   for a, b in zip(self.panels, other.panels))


def skill_map(scaffold: TaskScaffold, trajectories: Sequence[Trajectory]) -> SkillMap:
    """Group trajectories by their most likely component; always K panels."""
    panels: list = [[] for _ in range(scaffold.n_components)]
    if trajectories:
        labels = assign_trajectories(scaffold, np.stack([t.obs for t in trajectories]))
        for tr, k in zip(trajectories, labels):
            panels[int(k)].append(np.asarray(tr.poses, dtype=np.float64))
    return SkillMap(panels)


def render_records(m: SkillMap) -> str:
    lines = [json.dumps({"format_version": 1, "kind": "skillmap", "n_components": m.n_components})]
    for k, panel in enumerate(m.panels):
        for i, poses in enumerate(panel):
            lines.append(json.dumps({"component": k, "index": i, "poses": poses.tolist()}))
    return "\n".join(lines) + "\n"


def parse_records(text: str) -> SkillMap:
    from .artifacts import loads_record

    lines = [l for l in text.splitlines() if l.strip()]
    head = loads_record(lines[0], "skillmap")
    panels: list = [[] for _ in range(head["n_components"])]
    for line in lines[1:]:
        r = json.loads(line)
        panels[r["component"]].append(np.array(r["poses"], dtype=np.float64).reshape(-1, 3))
    return SkillMap(panels)


def _heading_color(h: float) -> str:
    # hue follows heading around the colour wheel
    hue = (h % (2 * math.pi)) / (2 * math.pi)
    r, g, b = (int(255 * (0.5 + 0.5 * math.cos(2 * math.pi * (hue - off)))) for off in (0.0, 1 / 3, 2 / 3))
    return f"#{r:02x}{g:02x}{b:02x}"


def render_svg(m: SkillMap, room_size: float = 1.0, landmarks: np.ndarray | None = None,
               panel_px: int = 160, columns: int = 4) -> str:
    """One square panel per component; path segments coloured by heading."""
    K = m.n_components
    cols = max(1, min(columns, K))
    rows = max(1, math.ceil(K / cols))
    pad = 6
    W, H = cols * (panel_px + pad) + pad, rows * (panel_px + pad + 14) + pad
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           '<rect width="100%" height="100%" fill="white"/>']
    s = panel_px / room_size
    for k, panel in enumerate(m.panels):
        ox = pad + (k % cols) * (panel_px + pad)
        oy = pad + (k // cols) * (panel_px + pad + 14) + 14
        out.append(f'<text x="{ox}" y="{oy - 3}" font-size="11" font-family="sans-serif">'
                   f'z={k} (n={len(panel)})</text>')
        out.append(f'<rect x="{ox}" y="{oy}" width="{panel_px}" height="{panel_px}" fill="none" stroke="black"/>')
        if landmarks is not None:
            for lx, ly in np.asarray(landmarks):
                out.append(f'<circle cx="{ox + lx * s:.2f}" cy="{oy + (room_size - ly) * s:.2f}" r="3" fill="gray"/>')
        for poses in panel:
            for (x0, y0, _), (x1, y1, h1) in zip(poses[:-1], poses[1:]):
                out.append(f'<line x1="{ox + x0 * s:.2f}" y1="{oy + (room_size - y0) * s:.2f}" '
                           f'x2="{ox + x1 * s:.2f}" y2="{oy + (room_size - y1) * s:.2f}" '
                           f'stroke="{_heading_color(h1)}" stroke-width="1" stroke-opacity="0.6"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# diversity -----------------------------------------------------------------------------

@dataclass(frozen=True)
class DiversityMetrics:
    usage_entropy: float
    effective_components: float
    coverage_entropy: float
    n_components: int
    grid_n: int

    def __post_init__(self):
        if not 1.0 - 1e-9 <= self.effective_components <= self.n_components + 1e-9:
            raise ValueError("effective component count outside [1, K]")
        if self.coverage_entropy > math.log(self.grid_n ** 2) + 1e-9:
            raise ValueError("coverage entropy above log(cells)")

    def to_dict(self) -> dict:
        return {"usage_entropy": self.usage_entropy, "effective_components": self.effective_components,
                "coverage_entropy": self.coverage_entropy, "n_components": self.n_components,
                "grid_n": self.grid_n}


def entropy(counts) -> float:
    c = np.asarray(counts, dtype=np.float64)
    c = c[c > 0]
    if c.size == 0:
        return 0.0
    p = c / c.sum()
    return float(-(p * np.log(p)).sum())


def coverage_entropy(positions: np.ndarray, grid_n: int = 16, room_size: float = 1.0) -> float:
    """Entropy of the grid_n x grid_n visitation histogram of (M, 2) positions."""
    xy = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    cells = np.clip(np.floor(xy / room_size * grid_n).astype(np.int64), 0, grid_n - 1)
    return entropy(np.bincount(cells[:, 0] * grid_n + cells[:, 1], minlength=grid_n * grid_n))


def diversity_metrics(assignments, trajectories, grid_n: int = 16, n_components: int | None = None,
                      room_size: float = 1.0) -> DiversityMetrics:
    """Component-usage and state-coverage entropies.

    ``trajectories`` are :class:`Trajectory` objects or (T, >=2) pose arrays.
    """
    a = np.asarray(assignments, dtype=np.int64)
    K = int(n_components if n_components is not None else (a.max() + 1 if a.size else 1))
    h_use = entropy(np.bincount(a, minlength=K)) if a.size else 0.0
    poses = [np.asarray(t.poses if isinstance(t, Trajectory) else t)[:, :2] for t in trajectories]
    h_cov = coverage_entropy(np.concatenate(poses), grid_n, room_size) if poses else 0.0
    return DiversityMetrics(h_use, float(math.exp(h_use)), h_cov, K, grid_n)
