"""Recurrent meta-learner trained with a clipped policy-gradient objective.

The policy is a gated recurrent cell reading ``(observation, previous
action, previous reward, previous done)``. A trial is ``E`` consecutive
episodes of one task; the hidden state is zeroed at the trial start and
carried across episode boundaries. Updates backpropagate through the whole
trial.

Rollouts run in plain numpy; the update rebuilds the trial graph with
:mod:`carml.autodiff`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import env as envmod
from .env import EnvConfig, Layout, Trajectory

N_ACTIONS = envmod.N_ACTIONS


@dataclass(frozen=True)
class PolicyConfig:
    hidden_size: int = 64
    episodes_per_trial: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    value_coef: float = 0.1
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    epochs_per_update: int = 4
    tasks_per_update: int = 16
    minibatches: int = 4
    max_grad_norm: float = 0.5
    bootstrap_across_episodes: bool = False
    normalize_advantages: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("hidden_size", "episodes_per_trial", "epochs_per_update", "tasks_per_update", "minibatches"):
            if getattr(self, name) < 1:
                raise ValueError(f"policy.{name} must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("policy.gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("policy.gae_lambda must lie in [0, 1]")
        if not 0 < self.clip_ratio < 1:
            raise ValueError("policy.clip_ratio must lie in (0, 1)")
        for name in ("value_coef", "entropy_coef", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"policy.{name} must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("policy.learning_rate must be positive")


def input_dim(obs_dim: int) -> int:
    return obs_dim + N_ACTIONS + 2


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class MetaPolicy:
    PARAM_NAMES = ("wx", "bx", "wh", "bh", "wa", "ba", "wv", "bv")

    def __init__(self, params: dict):
        self.params = {k: ad.parameter(params[k]) for k in self.PARAM_NAMES}

    @classmethod
    def init(cls, obs_dim: int, hidden: int, rng: np.random.Generator) -> "MetaPolicy":
        I = input_dim(obs_dim)
        wh = np.concatenate([_orthogonal(rng, hidden, hidden) for _ in range(3)], axis=1)
        wx = np.concatenate([_orthogonal(rng, I, hidden) for _ in range(3)], axis=1)
        return cls({
            "wx": wx, "bx": np.zeros(3 * hidden), "wh": wh, "bh": np.zeros(3 * hidden),
            "wa": _orthogonal(rng, hidden, N_ACTIONS, gain=0.01), "ba": np.zeros(N_ACTIONS),
            "wv": _orthogonal(rng, hidden, 1), "bv": np.zeros(1),
        })

    @classmethod
    def zeros(cls, obs_dim: int, hidden: int) -> "MetaPolicy":
        I = input_dim(obs_dim)
        shapes = {"wx": (I, 3 * hidden), "bx": (3 * hidden,), "wh": (hidden, 3 * hidden), "bh": (3 * hidden,),
                  "wa": (hidden, N_ACTIONS), "ba": (N_ACTIONS,), "wv": (hidden, 1), "bv": (1,)}
        return cls({k: np.zeros(s) for k, s in shapes.items()})

    @property
    def hidden_size(self) -> int:
        return self.params["wh"].shape[0]

    @property
    def input_dim(self) -> int:
        return self.params["wx"].shape[0]

    def parameters(self) -> list[ad.Tensor]:
        return [self.params[k] for k in self.PARAM_NAMES]

    def snapshot(self) -> dict:
        return {k: self.params[k].data.copy() for k in self.PARAM_NAMES}

    def copy(self) -> "MetaPolicy":
        return MetaPolicy(self.snapshot())


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def policy_step(policy: MetaPolicy, hidden: np.ndarray, inputs: np.ndarray):
    """One recurrent step: returns (action probabilities, value, new hidden)."""
    p = {k: t.data for k, t in policy.params.items()}
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[-1] != p["wx"].shape[0]:
        raise ValueError(f"input dim {inputs.shape[-1]} != policy input dim {p['wx'].shape[0]}")
    H = p["wh"].shape[0]
    xp = inputs @ p["wx"] + p["bx"]
    hp = hidden @ p["wh"] + p["bh"]
    z = _sigmoid(xp[..., :H] + hp[..., :H])
    r = _sigmoid(xp[..., H:2 * H] + hp[..., H:2 * H])
    n = np.tanh(xp[..., 2 * H:] + r * hp[..., 2 * H:])
    h_new = n + z * (hidden - n)
    logits = h_new @ p["wa"] + p["ba"]
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=-1, keepdims=True)
    value = (h_new @ p["wv"] + p["bv"])[..., 0]
    return probs, value, h_new


def make_inputs(obs, prev_action, prev_reward, prev_done) -> np.ndarray:
    obs = np.atleast_2d(obs)
    B = obs.shape[0]
    onehot = np.zeros((B, N_ACTIONS))
    prev_action = np.broadcast_to(np.asarray(prev_action), (B,))
    valid = prev_action >= 0
    onehot[np.flatnonzero(valid), prev_action[valid]] = 1.0
    return np.concatenate([obs, onehot, np.broadcast_to(prev_reward, (B,))[:, None],
                           np.broadcast_to(prev_done, (B,))[:, None].astype(np.float64)], axis=1)


@dataclass
class TrialBatch:
    """Per-step records of B parallel trials, each E episodes of T steps (L = E*T)."""

    inputs: np.ndarray  # (B, L, I)
    actions: np.ndarray  # (B, L)
    logp: np.ndarray  # (B, L)
    values: np.ndarray  # (B, L)
    rewards: np.ndarray  # (B, L) reward used for learning (shaped)
    raw_rewards: np.ndarray  # (B, L)
    dones: np.ndarray  # (B, L) 1 at each episode's last step
    next_obs: np.ndarray  # (B, L, D)
    poses: np.ndarray  # (B, L, 3)
    hidden_in: np.ndarray  # (B, L, H)
    hidden_out: np.ndarray  # (B, L, H)
    horizon: int
    episodes: int
    task_ids: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def n_trials(self) -> int:
        return self.actions.shape[0]

    @property
    def n_steps(self) -> int:
        return int(self.actions.size)

    def trajectories(self) -> list[Trajectory]:
        out = []
        T = self.horizon
        for b in range(self.n_trials):
            for e in range(self.episodes):
                sl = slice(e * T, (e + 1) * T)
                tid = self.task_ids[b] if self.task_ids else -1
                out.append(Trajectory(self.next_obs[b, sl].copy(), self.poses[b, sl].copy(),
                                      self.actions[b, sl].copy(), task_id=tid, episode_id=e))
        return out

    def subset(self, idx) -> "TrialBatch":
        def pick(a):
            return None if a is None else a[idx]
        return TrialBatch(self.inputs[idx], self.actions[idx], self.logp[idx], self.values[idx],
                          self.rewards[idx], self.raw_rewards[idx], self.dones[idx], self.next_obs[idx],
                          self.poses[idx], self.hidden_in[idx], self.hidden_out[idx], self.horizon,
                          self.episodes, [self.task_ids[i] for i in np.atleast_1d(np.arange(self.n_trials)[idx])]
                          if self.task_ids else [], pick(self.advantages), pick(self.returns))


RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def run_trials(policy: MetaPolicy, env_config: EnvConfig, layouts: Sequence[Layout], reward_fn: RewardFn,
               shaper, episodes: int, rng: np.random.Generator, task_ids: Sequence | None = None) -> TrialBatch:
    """Roll out one trial per layout in lockstep.

    ``reward_fn(next_obs, next_xy)`` gives raw per-trial rewards for the
    states just reached; ``shaper`` (see :class:`carml.reward.RewardShaper`)
    turns them into the learning/feedback signal, or ``None`` to use raw
    rewards directly.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    B = len(layouts)
    T = env_config.horizon
    L = episodes * T
    H = policy.hidden_size
    positions = np.stack([l.positions for l in layouts])
    kinds = np.stack([l.kinds for l in layouts])
    sx, sy, _ = env_config.spawn

    I = policy.input_dim
    D = env_config.obs_dim
    rec = {
        "inputs": np.zeros((B, L, I)), "actions": np.zeros((B, L), dtype=np.int64),
        "logp": np.zeros((B, L)), "values": np.zeros((B, L)), "rewards": np.zeros((B, L)),
        "raw": np.zeros((B, L)), "dones": np.zeros((B, L)), "next_obs": np.zeros((B, L, D)),
        "poses": np.zeros((B, L, 3)), "hin": np.zeros((B, L, H)), "hout": np.zeros((B, L, H)),
    }
    h = np.zeros((B, H))
    prev_a = np.full(B, -1)
    prev_r = np.zeros(B)
    prev_d = np.zeros(B)
    for e in range(episodes):
        x = np.full(B, sx)
        y = np.full(B, sy)
        turns = np.zeros(B, dtype=np.int64)
        obs = envmod.observe(env_config, x, y, envmod.heading_from_turns(env_config, turns), positions, kinds)
        if shaper is not None:
            shaper.episode_start()
        for t in range(T):
            i = e * T + t
            inp = make_inputs(obs, prev_a, prev_r, prev_d)
            probs, value, h_new = policy_step(policy, h, inp)
            u = rng.random(B)
            a = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), N_ACTIONS - 1)
            x, y, turns = envmod.move(env_config, x, y, turns, a)
            heading = envmod.heading_from_turns(env_config, turns)
            obs = envmod.observe(env_config, x, y, heading, positions, kinds)
            raw = np.asarray(reward_fn(obs, np.stack([x, y], axis=1)), dtype=np.float64)
            r = raw if shaper is None else shaper(raw)[1]
            rec["inputs"][:, i] = inp
            rec["actions"][:, i] = a
            rec["logp"][:, i] = np.log(probs[np.arange(B), a])
            rec["values"][:, i] = value
            rec["rewards"][:, i] = r
            rec["raw"][:, i] = raw
            rec["next_obs"][:, i] = obs
            rec["poses"][:, i] = np.stack([x, y, heading], axis=1)
            rec["hin"][:, i] = h
            rec["hout"][:, i] = h_new
            h = h_new
            prev_a, prev_r, prev_d = a, r, np.zeros(B)
        rec["dones"][:, (e + 1) * T - 1] = 1.0
        prev_d = np.ones(B)
    return TrialBatch(rec["inputs"], rec["actions"], rec["logp"], rec["values"], rec["rewards"], rec["raw"],
                      rec["dones"], rec["next_obs"], rec["poses"], rec["hin"], rec["hout"], T, episodes,
                      list(task_ids) if task_ids is not None else [])


def run_trial(policy: MetaPolicy, env_config: EnvConfig, layout: Layout, reward_fn: RewardFn, episodes: int,
              rng: np.random.Generator, shaper=None) -> TrialBatch:
    """Single-task convenience wrapper around :func:`run_trials`."""
    return run_trials(policy, env_config, [layout], reward_fn, shaper, episodes, rng)


def compute_advantages(batch: TrialBatch, gamma: float, gae_lambda: float,
                       bootstrap_across_episodes: bool = False) -> TrialBatch:
    """Generalized advantage estimates over each trial; fills ``advantages`` and ``returns``.

    Value bootstrapping stops at every episode end unless
    ``bootstrap_across_episodes``, in which case only the trial end stops it.
    """
    r, v = batch.rewards, batch.values
    B, L = r.shape
    if bootstrap_across_episodes:
        stop = np.zeros(L)
        stop[-1] = 1.0
        stop = np.broadcast_to(stop, (B, L))
    else:
        stop = batch.dones
    adv = np.zeros((B, L))
    last = np.zeros(B)
    for t in range(L - 1, -1, -1):
        next_v = v[:, t + 1] if t + 1 < L else np.zeros(B)
        cont = 1.0 - stop[:, t]
        delta = r[:, t] + gamma * next_v * cont - v[:, t]
        last = delta + gamma * gae_lambda * cont * last
        adv[:, t] = last
    batch.advantages = adv
    batch.returns = adv + v
    return batch


# loss ----------------------------------------------------------------------------------

def recurrent_forward(params: dict, inputs: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
    """Unrolled graph over whole trials: inputs (b, L, I) -> log-probs (b, L, A), values (b, L)."""
    b, L, _ = inputs.shape
    H = params["wh"].shape[0]
    xp = ad.matmul(inputs, params["wx"]) + params["bx"]
    h = ad.Tensor(np.zeros((b, H)))
    hs = []
    for t in range(L):
        h = ad.gru_cell(xp[:, t], h, params["wh"], params["bh"])
        hs.append(h)
    hseq = ad.stack(hs, axis=1)
    logp = ad.log_softmax(ad.matmul(hseq, params["wa"]) + params["ba"], axis=-1)
    values = (ad.matmul(hseq, params["wv"]) + params["bv"]).reshape(b, L)
    return logp, values


def ppo_loss(logp_all: ad.Tensor, values: ad.Tensor, actions: np.ndarray, old_logp: np.ndarray,
             advantages: np.ndarray, returns: np.ndarray, config: PolicyConfig):
    """Clipped surrogate + value regression - entropy bonus. Returns (loss, stats)."""
    onehot = np.zeros(actions.shape + (N_ACTIONS,))
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    new_logp = (logp_all * onehot).sum(axis=-1)
    ratio = ad.exp(new_logp - old_logp)
    surr1 = ratio * advantages
    surr2 = ad.clip(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio) * advantages
    policy_loss = -ad.minimum(surr1, surr2).mean()
    value_loss = (ad.square(values - returns) * 0.5).mean()
    entropy = -(ad.exp(logp_all) * logp_all).sum(axis=-1).mean()
    loss = policy_loss + value_loss * config.value_coef - entropy * config.entropy_coef
    r = ratio.data
    stats = {
        "policy_loss": float(policy_loss.data), "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "approx_kl": float(np.mean(old_logp - new_logp.data)),
        "clip_fraction": float(np.mean(np.abs(r - 1.0) > config.clip_ratio)),
    }
    return loss, stats


def make_optimizer(policy, config: PolicyConfig) -> ad.Adam:
    return ad.Adam(policy.parameters(), lr=config.learning_rate, max_grad_norm=config.max_grad_norm)


def ppo_update(params: dict, forward, optimizer: ad.Adam, batch: TrialBatch, config: PolicyConfig,
               rng: np.random.Generator) -> dict:
    """Shared optimization loop: ``forward(params, inputs) -> (logp_all, values)``."""
    if batch.advantages is None:
        raise ValueError("compute advantages before updating")
    adv = batch.advantages
    if config.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = batch.n_trials
    n_mb = min(config.minibatches, n)
    log = []
    first_clip = None
    for _ in range(config.epochs_per_update):
        perm = rng.permutation(n)
        for chunk in np.array_split(perm, n_mb):
            logp_all, values = forward(params, batch.inputs[chunk])
            loss, stats = ppo_loss(logp_all, values, batch.actions[chunk], batch.logp[chunk],
                                   adv[chunk], batch.returns[chunk], config)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite loss in policy update: {stats}")
            if first_clip is None:
                first_clip = stats["clip_fraction"]
            ad.zero_grad(params.values())
            loss.backward()
            stats["grad_norm"] = optimizer.step()
            log.append(stats)
    metrics = {k: float(np.mean([s[k] for s in log])) for k in log[0]}
    metrics["first_clip_fraction"] = first_clip
    metrics["mean_return"] = float(batch.raw_rewards.sum(axis=1).mean())
    metrics["mean_shaped_return"] = float(batch.rewards.sum(axis=1).mean())
    return metrics


def policy_update(policy: MetaPolicy, optimizer: ad.Adam, batch: TrialBatch, config: PolicyConfig,
                  rng: np.random.Generator) -> dict:
    """Clipped-ratio update of the recurrent policy with full-trial backpropagation."""
    if batch.advantages is None:
        compute_advantages(batch, config.gamma, config.gae_lambda, config.bootstrap_across_episodes)
    return ppo_update(policy.params, recurrent_forward, optimizer, batch, config, rng)


# contextual (non-recurrent) policy ------------------------------------------------------

class ContextualPolicy:
    """Feed-forward policy on ``observation ⊕ one-hot(z)``; no memory across steps."""

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "wa", "ba", "wv", "bv")

    def __init__(self, params: dict, n_latents: int):
        self.params = {k: ad.parameter(params[k]) for k in self.PARAM_NAMES}
        self.n_latents = n_latents

    @classmethod
    def init(cls, obs_dim: int, n_latents: int, hidden: int, rng: np.random.Generator) -> "ContextualPolicy":
        I = obs_dim + n_latents
        return cls({
            "w1": _orthogonal(rng, I, hidden, math.sqrt(2)), "b1": np.zeros(hidden),
            "w2": _orthogonal(rng, hidden, hidden, math.sqrt(2)), "b2": np.zeros(hidden),
            "wa": _orthogonal(rng, hidden, N_ACTIONS, 0.01), "ba": np.zeros(N_ACTIONS),
            "wv": _orthogonal(rng, hidden, 1), "bv": np.zeros(1),
        }, n_latents)

    def parameters(self) -> list[ad.Tensor]:
        return [self.params[k] for k in self.PARAM_NAMES]

    def make_inputs(self, obs: np.ndarray, z: np.ndarray) -> np.ndarray:
        onehot = np.zeros((len(z), self.n_latents))
        onehot[np.arange(len(z)), z] = 1.0
        return np.concatenate([obs, onehot], axis=1)

    def step(self, inputs: np.ndarray):
        p = {k: t.data for k, t in self.params.items()}
        h = np.tanh(inputs @ p["w1"] + p["b1"])
        h = np.tanh(h @ p["w2"] + p["b2"])
        logits = h @ p["wa"] + p["ba"]
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True), (h @ p["wv"] + p["bv"])[..., 0]


def contextual_forward(params: dict, inputs: np.ndarray):
    h = ad.tanh(ad.matmul(inputs, params["w1"]) + params["b1"])
    h = ad.tanh(ad.matmul(h, params["w2"]) + params["b2"])
    logp = ad.log_softmax(ad.matmul(h, params["wa"]) + params["ba"], axis=-1)
    values = ad.matmul(h, params["wv"]) + params["bv"]
    return logp, values.reshape(values.shape[:-1])


def run_contextual_episodes(policy: ContextualPolicy, env_config: EnvConfig, layouts: Sequence[Layout],
                            latents: np.ndarray, reward_fn: RewardFn, shaper,
                            rng: np.random.Generator) -> TrialBatch:
    """One episode per (layout, latent); returned as a TrialBatch with E=1."""
    B = len(layouts)
    T = env_config.horizon
    positions = np.stack([l.positions for l in layouts])
    kinds = np.stack([l.kinds for l in layouts])
    sx, sy, _ = env_config.spawn
    x, y = np.full(B, sx), np.full(B, sy)
    turns = np.zeros(B, dtype=np.int64)
    obs = envmod.observe(env_config, x, y, envmod.heading_from_turns(env_config, turns), positions, kinds)
    I = env_config.obs_dim + policy.n_latents
    D = env_config.obs_dim
    inputs, actions = np.zeros((B, T, I)), np.zeros((B, T), dtype=np.int64)
    logp, values, rewards, raws = (np.zeros((B, T)) for _ in range(4))
    next_obs, poses = np.zeros((B, T, D)), np.zeros((B, T, 3))
    if shaper is not None:
        shaper.episode_start()
    for t in range(T):
        inp = policy.make_inputs(obs, latents)
        probs, v = policy.step(inp)
        u = rng.random(B)
        a = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), N_ACTIONS - 1)
        x, y, turns = envmod.move(env_config, x, y, turns, a)
        heading = envmod.heading_from_turns(env_config, turns)
        obs = envmod.observe(env_config, x, y, heading, positions, kinds)
        raw = np.asarray(reward_fn(obs, np.stack([x, y], axis=1)), dtype=np.float64)
        inputs[:, t], actions[:, t], logp[:, t], values[:, t] = inp, a, np.log(probs[np.arange(B), a]), v
        raws[:, t] = raw
        rewards[:, t] = raw if shaper is None else shaper(raw)[1]
        next_obs[:, t], poses[:, t] = obs, np.stack([x, y, heading], axis=1)
    dones = np.zeros((B, T))
    dones[:, -1] = 1.0
    empty = np.zeros((B, T, 0))
    return TrialBatch(inputs, actions, logp, values, rewards, raws, dones, next_obs, poses, empty, empty,
                      T, 1, [int(z) for z in latents])
