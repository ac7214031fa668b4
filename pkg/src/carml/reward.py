"""Task rewards derived from the scaffold, plus smoothing and whitening."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .scaffold import TaskScaffold


@dataclass(frozen=True)
class RewardConfig:
    lam: float = 0.99
    window: int = 10
    eps: float = 1e-8
    smooth_first: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"reward.lambda must lie in [0, 1], got {self.lam}")
        if self.window < 1:
            raise ValueError("reward.window must be >= 1")
        if not self.eps > 0:
            raise ValueError("reward.eps must be positive")


@dataclass(frozen=True)
class TaskSpec:
    z: int
    lam: float = 0.99
    normalizer_id: object = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.z < 0:
            raise ValueError("z must be non-negative")


def _check(scaffold: TaskScaffold | None, spec: TaskSpec) -> None:
    if scaffold is None:
        raise ValueError("task reward needs a fitted scaffold")
    if spec.z >= scaffold.n_components:
        raise ValueError(f"z={spec.z} out of range for K={scaffold.n_components}")


def task_reward(scaffold: TaskScaffold, observation, spec: TaskSpec):
    """lambda * log q(s|z) - log q(s)."""
    _check(scaffold, spec)
    comp = scaffold.component_log_densities(observation)
    marg = scaffold.mixture.log_marginal(scaffold.encoder.embed(observation))
    return spec.lam * comp[..., spec.z] - marg


def task_reward_alt(scaffold: TaskScaffold, observation, spec: TaskSpec):
    """(lambda - 1) * log q(s|z) + log q(z|s) - log q(z).

    Algebraically identical to :func:`task_reward`; evaluated through the
    posterior so the two serve as cross-checks of each other.
    """
    _check(scaffold, spec)
    emb = scaffold.encoder.embed(observation)
    comp = scaffold.mixture.component_log_density(emb)[..., spec.z]
    post = scaffold.mixture.log_posterior(emb)[..., spec.z]
    return (spec.lam - 1.0) * comp + post - scaffold.mixture.log_weights[spec.z]


def batch_task_rewards(scaffold: TaskScaffold, observations: np.ndarray, z: np.ndarray, lam: float) -> np.ndarray:
    """Vectorized task_reward for a batch of (observation, latent) pairs."""
    emb = scaffold.encoder.embed(observations)
    comp = scaffold.mixture.component_log_density(emb)
    marg = scaffold.mixture.log_marginal(emb)
    return lam * np.take_along_axis(comp, np.asarray(z)[:, None], axis=1)[:, 0] - marg


@dataclass
class SmoothingWindow:
    size: int = 10
    buffer: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("window size must be >= 1")
        self.buffer = deque(self.buffer, maxlen=self.size)

    def reset(self) -> None:
        self.buffer.clear()


def smooth(window: SmoothingWindow, raw: float) -> float:
    """Mean of the ``min(t, W)`` most recent raw rewards, including ``raw``."""
    window.buffer.append(float(raw))
    return math.fsum(window.buffer) / len(window.buffer)


@dataclass
class RunningNormalizer:
    """Online mean/variance (Welford) used to whiten a reward stream."""

    eps: float = 1e-8
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count > 0 else 0.0

    def update(self, r: float) -> None:
        self.count += 1
        delta = r - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (r - self.mean)

    def normalize(self, r: float) -> float:
        if self.count < 2:
            return float(r)
        return (r - self.mean) / math.sqrt(self.var + self.eps)

    def state(self) -> dict:
        return {"eps": self.eps, "count": self.count, "mean": self.mean, "m2": self.m2}

    @classmethod
    def from_state(cls, d: dict) -> "RunningNormalizer":
        return cls(float(d["eps"]), int(d["count"]), float(d["mean"]), float(d["m2"]))


def whiten(norm: RunningNormalizer, r: float) -> float:
    """Fold ``r`` into the statistics, then return it whitened (identity before 2 samples)."""
    norm.update(float(r))
    return norm.normalize(float(r))


class NormalizerRegistry(dict):
    """Normalizers keyed by task handle, created on first use."""

    def __init__(self, eps: float = 1e-8):
        super().__init__()
        self.eps = eps

    def get_or_create(self, key) -> RunningNormalizer:
        if key not in self:
            self[key] = RunningNormalizer(self.eps)
        return self[key]

    def state(self) -> dict:
        return {str(k): v.state() for k, v in self.items()}

    def load_state(self, d: dict) -> None:
        self.clear()
        for k, v in d.items():
            self[int(k) if k.lstrip("-").isdigit() else k] = RunningNormalizer.from_state(v)


class RewardShaper:
    """Smoothing + whitening pipeline for one batch of parallel trials.

    Each trial owns a smoothing window (reset at episode starts). Whitening
    statistics come from ``registry`` keyed by each trial's handle and are
    updated in trial order within a step, so shared handles stay
    deterministic.
    """

    def __init__(self, keys: list, registry: NormalizerRegistry, window: int | None,
                 smooth_first: bool = True):
        self.keys = list(keys)
        self.registry = registry
        self.windows = [SmoothingWindow(window) for _ in keys] if window else None
        self.smooth_first = smooth_first

    def episode_start(self) -> None:
        if self.windows:
            for w in self.windows:
                w.reset()

    def __call__(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (smoothed, whitened) rewards for one step of the batch."""
        smoothed = np.empty(len(raw))
        out = np.empty(len(raw))
        for i, r in enumerate(raw):
            norm = self.registry.get_or_create(self.keys[i])
            if self.smooth_first:
                s = smooth(self.windows[i], r) if self.windows else float(r)
                smoothed[i] = s
                out[i] = whiten(norm, s)
            else:
                w = whiten(norm, float(r))
                smoothed[i] = w if not self.windows else smooth(self.windows[i], w)
                out[i] = smoothed[i]
        return smoothed, out
