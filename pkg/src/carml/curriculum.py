"""The outer loop: fit the scaffold to the reservoir, meta-train on its tasks, repeat."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts
from . import autodiff as ad
from .config import RunConfig, config_to_dict, build_config, serialize_config
from .env import EnvConfig, Trajectory, fixed_layout, make_layout, random_rollout
from .metapolicy import (
    ContextualPolicy,
    MetaPolicy,
    compute_advantages,
    contextual_forward,
    make_optimizer,
    ppo_update,
    recurrent_forward,
    run_contextual_episodes,
    run_trials,
)
from .reward import NormalizerRegistry, RewardShaper, batch_task_rewards
from .scaffold import TaskScaffold, fit_scaffold, sample_task_latent


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k)
    return zlib.crc32(str(k).encode())


def derive_rng(seed: int, *key) -> np.random.Generator:
    """Independent generator for ``key`` under ``seed`` (counter-style, order independent)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in key)))


@dataclass
class Reservoir:
    capacity: int
    items: list = field(default_factory=list)
    n_seen: int = 0

    def __len__(self) -> int:
        return len(self.items)

    def obs_array(self) -> np.ndarray:
        return np.stack([t.obs for t in self.items])

    def poses_array(self) -> np.ndarray:
        return np.stack([t.poses for t in self.items])

    def actions_array(self) -> np.ndarray:
        return np.stack([t.actions for t in self.items])


def reservoir_add(reservoir: Reservoir, trajectory, rng: np.random.Generator) -> Reservoir:
    """Single-pass uniform reservoir sampling (each of n seen items kept w.p. min(1, R/n))."""
    reservoir.n_seen += 1
    if len(reservoir.items) < reservoir.capacity:
        reservoir.items.append(trajectory)
    else:
        j = int(rng.integers(reservoir.n_seen))
        if j < reservoir.capacity:
            reservoir.items[j] = trajectory
    return reservoir


def seed_reservoir(env_config: EnvConfig, n_episodes: int, rng: np.random.Generator,
                   capacity: int | None = None) -> Reservoir:
    """Reservoir filled with uniform-random-action episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    res = Reservoir(capacity if capacity is not None else n_episodes)
    for i in range(n_episodes):
        layout = make_layout(env_config, rng, "train")
        tr = random_rollout(env_config, layout, rng)
        tr.episode_id = i
        reservoir_add(res, tr, rng)
    return res


class CarmlTrainer:
    """Resumable state machine over (iteration, update).

    Each iteration starts with an E-step (scaffold refit on the reservoir)
    followed by ``policy_updates_per_iteration`` M-step updates. All
    randomness is derived from ``(seed, purpose, iteration, update)`` so a
    run restored from a checkpoint continues bit-for-bit.
    """

    kind = "carml"

    def __init__(self, cfg: RunConfig, run_dir: str | Path | None = None):
        self.cfg = cfg
        self.iteration = 0
        self.update = 0
        self.reservoir: Reservoir | None = None
        self.scaffold: TaskScaffold | None = None
        self.scaffold_history: list[TaskScaffold] = []
        self.normalizers = NormalizerRegistry(cfg.reward.eps)
        self.metrics: list[dict] = []
        self.policy = self._init_policy()
        self.optimizer = make_optimizer(self.policy, cfg.policy)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._metrics_writer = None

    # setup ----------------------------------------------------------------------------

    def _init_policy(self):
        rng = self.rng("policy-init")
        ec = self.cfg.env
        if self.cfg.curriculum.learner == "rl2":
            return MetaPolicy.init(ec.obs_dim, self.cfg.policy.hidden_size, rng)
        return ContextualPolicy.init(ec.obs_dim, self.cfg.scaffold.n_components, self.cfg.policy.hidden_size, rng)

    def rng(self, *key) -> np.random.Generator:
        return derive_rng(self.cfg.seed, *key)

    @property
    def done(self) -> bool:
        return self.iteration >= self.cfg.curriculum.outer_iterations

    def seed_reservoir(self) -> None:
        cc = self.cfg.curriculum
        self.reservoir = seed_reservoir(self.cfg.env, cc.seed_episodes, self.rng("seed-reservoir"),
                                        capacity=cc.reservoir_capacity)

    # E-step -------------------------------------------------------------------------------

    def e_step(self) -> None:
        warm = self.cfg.curriculum.encoder_warm_start and self.scaffold is not None
        self.scaffold = fit_scaffold(self.reservoir.obs_array(), self.cfg.scaffold,
                                     self.rng("fit", self.iteration),
                                     encoder=self.scaffold.encoder if warm else None)
        self.scaffold_history.append(self.scaffold)

    # M-step -------------------------------------------------------------------------------

    def sample_latents(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(sample_task_latent(self.scaffold, rng, size=n))

    def reward_fn(self, latents: np.ndarray):
        scaffold = self.scaffold
        lam = self.cfg.reward.lam
        return lambda obs, xy: batch_task_rewards(scaffold, obs, latents, lam)

    def collect(self, rng: np.random.Generator):
        cfg = self.cfg
        n = cfg.curriculum.tasks_per_update
        E = cfg.policy.episodes_per_trial
        z = self.sample_latents(rng, n)
        if cfg.curriculum.learner == "rl2":
            layouts = [make_layout(cfg.env, rng, "train") for _ in range(n)]
            shaper = RewardShaper([int(k) for k in z], self.normalizers, cfg.reward.window, cfg.reward.smooth_first)
            return run_trials(self.policy, cfg.env, layouts, self.reward_fn(z), shaper, E, rng,
                              task_ids=[int(k) for k in z])
        zz = np.repeat(z, E)
        layouts = [make_layout(cfg.env, rng, "train") for _ in range(len(zz))]
        shaper = RewardShaper([int(k) for k in zz], self.normalizers, cfg.reward.window, cfg.reward.smooth_first)
        return run_contextual_episodes(self.policy, cfg.env, layouts, zz, self.reward_fn(zz), shaper, rng)

    def after_collect(self, batch, rng: np.random.Generator) -> dict:
        """Hook for variants that learn from each batch; returns extra metrics."""
        return {}

    def m_update(self) -> dict:
        cfg = self.cfg
        rng = self.rng("update", self.iteration, self.update)
        scaffold_id = self.scaffold.fingerprint()
        batch = self.collect(rng)
        compute_advantages(batch, cfg.policy.gamma, cfg.policy.gae_lambda, cfg.policy.bootstrap_across_episodes)
        forward = recurrent_forward if cfg.curriculum.learner == "rl2" else contextual_forward
        stats = ppo_update(self.policy.params, forward, self.optimizer, batch, cfg.policy, rng)
        stats.update(self.after_collect(batch, rng))
        res_rng = self.rng("reservoir", self.iteration, self.update)
        for tr in batch.trajectories():
            tr.meta = {"iteration": self.iteration, "update": self.update}
            reservoir_add(self.reservoir, tr, res_rng)
        if self.scaffold.fingerprint() != scaffold_id:
            raise RuntimeError("scaffold changed during an M-step")
        return {"iteration": self.iteration, "update": self.update, "scaffold_id": scaffold_id,
                "n_seen": self.reservoir.n_seen, **stats}

    # driver -------------------------------------------------------------------------------

    def step(self) -> dict | None:
        """Advance by one unit of work (an E-step and/or one policy update)."""
        if self.done:
            return None
        if self.reservoir is None:
            self.seed_reservoir()
        if len(self.scaffold_history) <= self.iteration:
            self.e_step()
            self._on_e_step()
        rec = None
        if self.update < self.cfg.curriculum.policy_updates_per_iteration:
            rec = self.m_update()
            self.metrics.append(rec)
            if self._metrics_writer is not None:
                self._metrics_writer.write(rec)
            self.update += 1
        if self.update >= self.cfg.curriculum.policy_updates_per_iteration:
            self._on_iteration_end()
            self.iteration += 1
            self.update = 0
        return rec

    def _on_e_step(self) -> None:
        if self.run_dir is not None:
            artifacts.write_json(self.run_dir / f"scaffold_{self.iteration:03d}.json", "scaffold",
                                 self.scaffold.to_dict())

    def _on_iteration_end(self) -> None:
        if self.run_dir is not None:
            self.save(self.run_dir / f"checkpoint_{self.iteration:03d}.npz")

    def run(self, max_steps: int | None = None) -> "CarmlTrainer":
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            cfg_path = self.run_dir / "config.toml"
            if not cfg_path.exists():
                cfg_path.write_text(serialize_config(self.cfg))
            self._metrics_writer = artifacts.JsonlWriter(self.run_dir / "metrics.jsonl", "metrics",
                                                         append=bool(self.metrics))
        steps = 0
        try:
            while not self.done and (max_steps is None or steps < max_steps):
                self.step()
                steps += 1
        except Exception:
            if self.run_dir is not None:
                self.save(self.run_dir / "checkpoint_partial.npz")
            raise
        finally:
            if self._metrics_writer is not None:
                self._metrics_writer.close()
                self._metrics_writer = None
        if self.done and self.run_dir is not None:
            artifacts.dump_trajectories(self.run_dir / "reservoir.jsonl", self.reservoir.items)
        return self

    # persistence -------------------------------------------------------------------------

    def extra_state(self) -> tuple[dict, dict]:
        return {}, {}

    def load_extra_state(self, arrays: dict, meta: dict) -> None:
        pass

    def save(self, path) -> None:
        arrays = {f"param_{k}": t.data for k, t in self.policy.params.items()}
        opt = self.optimizer.state_dict()
        for i, (m, v) in enumerate(zip(opt["m"], opt["v"])):
            arrays[f"adam_m_{i}"] = m
            arrays[f"adam_v_{i}"] = v
        if self.reservoir is not None and len(self.reservoir):
            arrays["res_obs"] = self.reservoir.obs_array()
            arrays["res_poses"] = self.reservoir.poses_array()
            arrays["res_actions"] = self.reservoir.actions_array()
        extra_arrays, extra_meta = self.extra_state()
        arrays.update({f"extra_{k}": v for k, v in extra_arrays.items()})
        meta = {
            "kind": self.kind,
            "config": config_to_dict(self.cfg),
            "iteration": self.iteration,
            "update": self.update,
            "adam_t": opt["t"],
            "reservoir": None if self.reservoir is None else {
                "capacity": self.reservoir.capacity, "n_seen": self.reservoir.n_seen,
                "task_ids": [int(t.task_id) for t in self.reservoir.items],
                "episode_ids": [int(t.episode_id) for t in self.reservoir.items],
                "meta": [t.meta for t in self.reservoir.items],
            },
            "scaffold_history": [s.to_dict() for s in self.scaffold_history],
            "normalizers": self.normalizers.state(),
            "metrics": self.metrics,
            "extra": extra_meta,
        }
        artifacts.save_npz(path, arrays, meta)

    @classmethod
    def load(cls, path, run_dir: str | Path | None = None) -> "CarmlTrainer":
        arrays, meta = artifacts.load_npz(path)
        if meta.get("kind") != cls.kind:
            raise ValueError(f"checkpoint kind {meta.get('kind')!r} does not match {cls.kind!r}")
        cfg = build_config(meta["config"])
        tr = cls(cfg, run_dir=run_dir)
        for k, t in tr.policy.params.items():
            t.data = np.array(arrays[f"param_{k}"], dtype=np.float64)
        n = len(tr.optimizer.params)
        tr.optimizer.load_state_dict({"t": meta["adam_t"], "m": [arrays[f"adam_m_{i}"] for i in range(n)],
                                      "v": [arrays[f"adam_v_{i}"] for i in range(n)]})
        tr.iteration, tr.update = meta["iteration"], meta["update"]
        rmeta = meta["reservoir"]
        if rmeta is not None:
            res = Reservoir(rmeta["capacity"], n_seen=rmeta["n_seen"])
            if "res_obs" in arrays:
                for i in range(len(arrays["res_obs"])):
                    res.items.append(Trajectory(arrays["res_obs"][i], arrays["res_poses"][i],
                                                arrays["res_actions"][i], rmeta["task_ids"][i],
                                                rmeta["episode_ids"][i], rmeta["meta"][i]))
            tr.reservoir = res
        tr.scaffold_history = [TaskScaffold.from_dict(d) for d in meta["scaffold_history"]]
        tr.scaffold = tr.scaffold_history[-1] if tr.scaffold_history else None
        tr.normalizers.load_state(meta["normalizers"])
        tr.metrics = list(meta["metrics"])
        tr.load_extra_state({k[len("extra_"):]: v for k, v in arrays.items() if k.startswith("extra_")},
                            meta["extra"])
        return tr


def carml_train(cfg: RunConfig, run_dir: str | Path | None = None):
    """Full curriculum run; returns (policy, final scaffold, scaffold history, trainer)."""
    trainer = CarmlTrainer(cfg, run_dir=run_dir).run()
    if trainer.scaffold is None:
        trainer.seed_reservoir()
        trainer.e_step()
    return trainer.policy, trainer.scaffold, trainer.scaffold_history, trainer
