"""Diagonal Gaussian mixture over embedded states with trajectory-level EM.

States of one trajectory are conditionally independent given the
component, so a trajectory's component posterior is

    q_ik  ∝  pi_k * prod_t N(x_it | mu_k, diag(var_k))

and every state of the trajectory shares it. The M-step is the usual
weighted-moment update with each trajectory contributing its states with
weight q_ik / T. Everything is evaluated in log space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)
EMPTY_COMPONENT_MASS = 1e-8


@dataclass
class MixtureModel:
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)
    weights: np.ndarray  # (K,)
    var_floor: float = 1e-4

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        K, d = self.means.shape
        if self.variances.shape != (K, d) or self.weights.shape != (K,):
            raise ValueError("inconsistent mixture parameter shapes")
        with np.errstate(divide="ignore"):  # a zero weight is a component that is never drawn
            self._log_weights = np.log(self.weights)
        self._log_norm = -0.5 * (d * LOG_2PI + np.log(self.variances).sum(axis=1))
        self._inv_var = 1.0 / self.variances

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def log_weights(self) -> np.ndarray:
        return self._log_weights

    def component_log_density(self, x: np.ndarray) -> np.ndarray:
        """log N(x | k) for every component: (..., d) -> (..., K)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected embeddings of dim {self.dim}, got {x.shape[-1]}")
        if np.isnan(x).any():
            raise ValueError("NaN embedding")
        diff = x[..., None, :] - self.means
        return self._log_norm - 0.5 * np.einsum("...kd,kd->...k", diff * diff, self._inv_var)

    def log_marginal(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_density(x) + self._log_weights, axis=-1)

    def log_posterior(self, x: np.ndarray) -> np.ndarray:
        joint = self.component_log_density(x) + self._log_weights
        return joint - logsumexp(joint, axis=-1, keepdims=True)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "variances": self.variances.tolist(),
                "weights": self.weights.tolist(), "var_floor": self.var_floor}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureModel":
        return cls(np.array(d["means"]), np.array(d["variances"]), np.array(d["weights"]),
                   float(d["var_floor"]))


def trajectory_joint_loglik(mixture: MixtureModel, X: np.ndarray) -> np.ndarray:
    """log pi_k + sum_t log N(x_it | k) for trajectories X of shape (N, T, d) -> (N, K)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] == 0:
        raise ValueError("expected non-empty trajectories shaped (N, T, d)")
    return mixture.component_log_density(X).sum(axis=1) + mixture.log_weights


def trajectory_responsibilities(mixture: MixtureModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-trajectory posteriors (N, K) and per-trajectory log-likelihoods (N,)."""
    joint = trajectory_joint_loglik(mixture, X)
    top = joint.max(axis=1, keepdims=True)
    w = np.exp(joint - top)
    total = w.sum(axis=1, keepdims=True)
    return w / total, (top + np.log(total))[:, 0]


def state_responsibilities(resp: np.ndarray, T: int) -> np.ndarray:
    """Broadcast trajectory posteriors onto every state: (N, K) -> (N, T, K)."""
    return np.repeat(resp[:, None, :], T, axis=1)


def hard_assign(resp: np.ndarray) -> np.ndarray:
    """Argmax with ties going to the lowest index, as one-hot rows."""
    out = np.zeros_like(resp)
    out[np.arange(len(resp)), resp.argmax(axis=1)] = 1.0
    return out


def mixture_mle(X: np.ndarray, resp: np.ndarray, var_floor: float = 1e-4,
                traj_loglik: np.ndarray | None = None) -> MixtureModel:
    """Closed-form weighted MLE of means, diagonal variances and weights.

    A component whose total responsibility falls below 1e-8 is re-seeded at
    the mean embedding of the least likely trajectory (``traj_loglik``; the
    farthest trajectory from the grand mean when not given), with the pooled
    per-dimension variance and weight 1/N before renormalization.
    """
    X = np.asarray(X, dtype=np.float64)
    resp = np.asarray(resp, dtype=np.float64)
    N, T, d = X.shape
    K = resp.shape[1]
    traj_mean = X.mean(axis=1)  # (N, d) == (1/T) sum_t x_it
    mass = resp.sum(axis=0)  # (K,)
    empty = mass < EMPTY_COMPONENT_MASS
    safe = np.where(empty, 1.0, mass)
    means = (resp.T @ traj_mean) / safe[:, None]
    variances = np.empty((K, d))
    for k in range(K):
        sq = ((X - means[k]) ** 2).mean(axis=1)  # (N, d): (1/T) sum_t (x_it - mu_k)^2
        variances[k] = resp[:, k] @ sq / safe[k]
    variances = np.maximum(variances, var_floor)
    weights = mass / N
    if empty.any():
        pooled = np.maximum(X.reshape(-1, d).var(axis=0), var_floor)
        if traj_loglik is None:
            traj_loglik = -((traj_mean - traj_mean.mean(axis=0)) ** 2).sum(axis=1)
        order = np.argsort(traj_loglik, kind="stable")
        for j, k in enumerate(np.flatnonzero(empty)):
            means[k] = traj_mean[order[j % N]]
            variances[k] = pooled
            weights[k] = 1.0 / N
        weights = weights / weights.sum()
    return MixtureModel(means, variances, weights, var_floor)


def kmeans_pp_centers(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding over a point cloud (M, d)."""
    M = len(points)
    centers = [points[rng.integers(M)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(M)
        else:
            idx = rng.choice(M, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def init_mixture(X: np.ndarray, K: int, rng: np.random.Generator, var_floor: float = 1e-4) -> MixtureModel:
    """k-means++ centers on all states, then one hard trajectory-level MLE pass."""
    X = np.asarray(X, dtype=np.float64)
    N, T, d = X.shape
    centers = kmeans_pp_centers(X.reshape(-1, d), K, rng)
    # trajectory cost per center: sum_t ||x_it - c_k||^2
    cost = ((X[:, :, None, :] - centers[None, None]) ** 2).sum(axis=(1, 3))
    resp = hard_assign(-cost)
    mix = mixture_mle(X, resp, var_floor, traj_loglik=-cost.min(axis=1))
    empty = resp.sum(axis=0) < EMPTY_COMPONENT_MASS
    if empty.any():
        means = mix.means.copy()
        means[empty] = centers[empty]
        mix = MixtureModel(means, mix.variances, mix.weights, var_floor)
    return mix


def total_loglik(mixture: MixtureModel, X: np.ndarray) -> float:
    return float(logsumexp(trajectory_joint_loglik(mixture, X), axis=1).sum())


def em(X: np.ndarray, mixture: MixtureModel, n_iter: int, hard: bool = False) -> tuple[MixtureModel, list[float]]:
    """Run ``n_iter`` trajectory-consensus EM iterations from ``mixture``.

    Returns the final model and the data log-likelihood before each
    iteration plus after the last one (length ``n_iter + 1``).
    """
    history = []
    for _ in range(n_iter):
        resp, ll = trajectory_responsibilities(mixture, X)
        history.append(float(ll.sum()))
        if hard:
            resp = hard_assign(resp)
        mixture = mixture_mle(X, resp, mixture.var_floor, traj_loglik=ll)
    history.append(total_loglik(mixture, X))
    return mixture, history
