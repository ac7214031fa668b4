"""Task scaffold: a learned state encoder plus a Gaussian mixture in its embedding space.

The scaffold is fitted by alternating trajectory-level clustering with
supervised training of the encoder on the resulting pseudo-labels, and
ends with a mixture refit under the final encoder. It then defines the
densities ``log q(s|z)``, ``log q(s)`` and ``log q(z|s)`` that tasks are
built from.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .mixture import (
    MixtureModel,
    em,
    hard_assign,
    init_mixture,
    trajectory_responsibilities,
)

ENCODER_LAYERS = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class ScaffoldConfig:
    n_components: int = 8
    embed_dim: int = 16
    hidden: int = 64
    rounds: int = 3
    epochs: int = 5
    em_iters: int = 25
    batch_size: int = 256
    lr: float = 1e-3
    var_floor: float = 1e-4
    assignment: str = "soft"
    balanced: bool = True

    def __post_init__(self):
        for name in ("n_components", "embed_dim", "hidden", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("rounds", "epochs", "em_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.assignment not in ("soft", "hard"):
            raise ValueError("assignment must be 'soft' or 'hard'")
        if not self.lr > 0 or not self.var_floor > 0:
            raise ValueError("lr and var_floor must be positive")


@dataclass
class Encoder:
    """Two tanh hidden layers, a linear embedding, and a linear K-way head."""

    params: dict

    @classmethod
    def init(cls, obs_dim: int, hidden: int, embed_dim: int, n_classes: int,
             rng: np.random.Generator) -> "Encoder":
        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-lim, lim, size=(n_in, n_out))

        p = {
            "w1": glorot(obs_dim, hidden), "b1": np.zeros(hidden),
            "w2": glorot(hidden, hidden), "b2": np.zeros(hidden),
            "w3": glorot(hidden, embed_dim), "b3": np.zeros(embed_dim),
            "wh": glorot(embed_dim, n_classes), "bh": np.zeros(n_classes),
        }
        return cls(p)

    @property
    def obs_dim(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params["w3"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["wh"].shape[1]

    def copy(self) -> "Encoder":
        return Encoder({k: v.copy() for k, v in self.params.items()})

    def embed(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != encoder input dim {self.obs_dim}")
        p = self.params
        h = np.tanh(obs @ p["w1"] + p["b1"])
        h = np.tanh(h @ p["w2"] + p["b2"])
        return h @ p["w3"] + p["b3"]

    def logits(self, obs: np.ndarray) -> np.ndarray:
        return self.embed(obs) @ self.params["wh"] + self.params["bh"]

    def reset_head(self, n_classes: int, rng: np.random.Generator) -> None:
        lim = np.sqrt(6.0 / (self.embed_dim + n_classes))
        self.params["wh"] = rng.uniform(-lim, lim, size=(self.embed_dim, n_classes))
        self.params["bh"] = np.zeros(n_classes)

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.params.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Encoder":
        return cls({k: np.array(v, dtype=np.float64) for k, v in d.items()})


def encode(encoder: Encoder, observation: np.ndarray) -> np.ndarray:
    return encoder.embed(observation)


def _logits_graph(params: dict, x: np.ndarray) -> ad.Tensor:
    h = ad.tanh(ad.matmul(x, params["w1"]) + params["b1"])
    h = ad.tanh(ad.matmul(h, params["w2"]) + params["b2"])
    e = ad.matmul(h, params["w3"]) + params["b3"]
    return ad.matmul(e, params["wh"]) + params["bh"]


def train_classifier(encoder: Encoder, obs: np.ndarray, labels: np.ndarray, *, epochs: int,
                     batch_size: int, lr: float, rng: np.random.Generator,
                     balanced: bool = True, temperature: float = 1.0,
                     optimizer: ad.Adam | None = None) -> float:
    """Supervised cross-entropy on (observation, label) pairs, in place.

    With ``balanced`` each class contributes equally to the loss, which keeps
    large clusters from swallowing the head. Returns training accuracy after
    the last epoch.
    """
    obs = np.asarray(obs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    M = len(labels)
    K = encoder.n_classes
    counts = np.bincount(labels, minlength=K).astype(np.float64)
    if balanced:
        cw = np.where(counts > 0, M / (K * np.maximum(counts, 1.0)), 0.0)
    else:
        cw = np.ones(K)
    tensors = {k: ad.parameter(v) for k, v in encoder.params.items()}
    names = list(tensors)
    opt = optimizer or ad.Adam([tensors[k] for k in names], lr=lr)
    if optimizer is not None:
        for slot, k in enumerate(names):
            opt.params[slot] = tensors[k]
    for _ in range(epochs):
        perm = rng.permutation(M)
        for start in range(0, M, batch_size):
            idx = perm[start:start + batch_size]
            logits = _logits_graph(tensors, obs[idx]) * (1.0 / temperature)
            logp = ad.log_softmax(logits, axis=-1)
            onehot = np.zeros((len(idx), K))
            onehot[np.arange(len(idx)), labels[idx]] = cw[labels[idx]]
            loss = -(logp * onehot).sum() * (1.0 / len(idx))
            ad.zero_grad(tensors.values())
            loss.backward()
            opt.step()
    for k in names:
        encoder.params[k] = tensors[k].data
    pred = encoder.logits(obs).argmax(axis=1)
    return float((pred == labels).mean())


@dataclass(frozen=True)
class TaskScaffold:
    encoder: Encoder
    mixture: MixtureModel
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.embed_dim != self.mixture.dim:
            raise ValueError("mixture dimension must match encoder embedding dimension")
        for arr in list(self.encoder.params.values()) + [self.mixture.means, self.mixture.variances,
                                                       self.mixture.weights]:
            arr.flags.writeable = False

    @property
    def n_components(self) -> int:
        return self.mixture.n_components

    def component_log_densities(self, obs: np.ndarray) -> np.ndarray:
        """log q(s|z) for all z: (..., D) -> (..., K)."""
        return self.mixture.component_log_density(self.encoder.embed(obs))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.encoder.params):
            h.update(self.encoder.params[k].tobytes())
        for a in (self.mixture.means, self.mixture.variances, self.mixture.weights):
            h.update(a.tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "mixture": self.mixture.to_dict(), "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskScaffold":
        return cls(Encoder.from_dict(d["encoder"]), MixtureModel.from_dict(d["mixture"]), dict(d.get("meta", {})))


def _check_z(scaffold: TaskScaffold, z) -> None:
    if np.any(np.asarray(z) < 0) or np.any(np.asarray(z) >= scaffold.n_components):
        raise ValueError(f"latent {z} out of range for K={scaffold.n_components}")


def _pick(values: np.ndarray, z) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim == 0:
        return values[..., int(z)]
    return np.take_along_axis(values, z[..., None], axis=-1)[..., 0]


def log_component_density(scaffold: TaskScaffold, observation: np.ndarray, z) -> np.ndarray:
    """log q(s|z); ``z`` may be a scalar or broadcast against the batch."""
    _check_z(scaffold, z)
    return _pick(scaffold.component_log_densities(observation), z)


def log_marginal_density(scaffold: TaskScaffold, observation: np.ndarray) -> np.ndarray:
    """log q(s) = log sum_k pi_k q(s|k)."""
    return scaffold.mixture.log_marginal(scaffold.encoder.embed(observation))


def log_posterior(scaffold: TaskScaffold, observation: np.ndarray, z) -> np.ndarray:
    """log q(z|s) = log pi_z + log q(s|z) - log q(s)."""
    _check_z(scaffold, z)
    return _pick(scaffold.mixture.log_posterior(scaffold.encoder.embed(observation)), z)


def sample_task_latent(scaffold: TaskScaffold, rng: np.random.Generator, size=None):
    """z ~ q(z), the mixture weights."""
    return rng.choice(scaffold.n_components, size=size, p=scaffold.mixture.weights)


def fit_scaffold(obs: np.ndarray, config: ScaffoldConfig, rng: np.random.Generator,
                 encoder: Encoder | None = None) -> TaskScaffold:
    """Fit encoder and mixture to trajectories ``obs`` shaped (N, T, D).

    Each round clusters the embedded trajectories (k-means++ seeding, then
    EM with shared per-trajectory responsibilities), labels every state with
    its trajectory's most likely component and trains the encoder on those
    labels. After the last round a fresh mixture is fitted under the final
    encoder. ``encoder`` warm-starts the trunk; it is copied, not mutated.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 3 or len(obs) == 0:
        raise ValueError("fit_scaffold needs a non-empty (N, T, D) array of trajectories")
    N, T, D = obs.shape
    K = config.n_components
    if encoder is None:
        encoder = Encoder.init(D, config.hidden, config.embed_dim, K, rng)
    else:
        encoder = encoder.copy()
    flat = obs.reshape(-1, D)
    accuracies = []
    for _ in range(config.rounds):
        X = encoder.embed(obs)
        mix = init_mixture(X, K, rng, config.var_floor)
        mix, _ = em(X, mix, config.em_iters, hard=config.assignment == "hard")
        resp, _ = trajectory_responsibilities(mix, X)
        labels = np.repeat(hard_assign(resp).argmax(axis=1), T)
        encoder.reset_head(K, rng)
        accuracies.append(train_classifier(
            encoder, flat, labels, epochs=config.epochs, batch_size=config.batch_size,
            lr=config.lr, rng=rng, balanced=config.balanced))
    X = encoder.embed(obs)
    mix = init_mixture(X, K, rng, config.var_floor)
    mix, history = em(X, mix, config.em_iters)
    resp, _ = trajectory_responsibilities(mix, X)
    counts = np.bincount(resp.argmax(axis=1), minlength=K)
    meta = {"rounds": config.rounds, "em_iters": config.em_iters, "final_loglik": history[-1],
            "classifier_accuracy": accuracies, "n_trajectories": N, "assignment_counts": counts.tolist()}
    return TaskScaffold(encoder, mix, meta)


def assign_trajectories(scaffold: TaskScaffold, obs: np.ndarray) -> np.ndarray:
    """Most likely component for each trajectory (N, T, D) -> (N,)."""
    resp, _ = trajectory_responsibilities(scaffold.mixture, scaffold.encoder.embed(obs))
    return resp.argmax(axis=1)
