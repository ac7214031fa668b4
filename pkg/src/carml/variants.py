"""Comparison learners built on the curriculum trainer."""
from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .curriculum import CarmlTrainer, Reservoir
from .evaluation import DiversityMetrics, diversity_metrics
from .scaffold import Encoder, assign_trajectories, fit_scaffold, train_classifier


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


class DiscriminatorTrainer(CarmlTrainer):
    """Purely discriminative task acquisition.

    A classifier q_c(z|s) is trained online on (state, conditioning latent)
    pairs after every batch. Rewards are ``lam * log q_c(z|s) + (lam - 1) *
    log q_d(s)`` where q_d is a mixture fitted at each iteration start on the
    reservoir, embedded with a frozen copy of the classifier trunk. Latents
    are drawn uniformly.
    """

    kind = "discriminator"

    def __init__(self, cfg: RunConfig, run_dir=None):
        super().__init__(cfg, run_dir)
        sc = cfg.scaffold
        self.classifier = Encoder.init(cfg.env.obs_dim, sc.hidden, sc.embed_dim, sc.n_components,
                                       self.rng("classifier-init"))
        self.classifier_opt = ad.Adam([ad.parameter(v) for v in self.classifier.params.values()],
                                      lr=cfg.eval.discriminator_lr)

    @property
    def temperature(self) -> float:
        return self.cfg.eval.discriminator_temperature

    def e_step(self) -> None:
        dense_cfg = dataclasses.replace(self.cfg.scaffold, rounds=0)
        self.scaffold = fit_scaffold(self.reservoir.obs_array(), dense_cfg, self.rng("fit", self.iteration),
                                     encoder=self.classifier.copy())
        self.scaffold_history.append(self.scaffold)

    def sample_latents(self, rng, n):
        return rng.integers(self.cfg.scaffold.n_components, size=n)

    def log_q_c(self, obs: np.ndarray, classifier: Encoder | None = None) -> np.ndarray:
        return _log_softmax((classifier or self.classifier).logits(obs) / self.temperature)

    def reward_fn(self, latents):
        clf = self.classifier.copy()
        scaffold, lam = self.scaffold, self.cfg.reward.lam
        z = np.asarray(latents)

        def fn(obs, xy):
            lq = np.take_along_axis(self.log_q_c(obs, clf), z[:, None], axis=1)[:, 0]
            if lam == 1.0:
                return lq
            return lam * lq + (lam - 1.0) * scaffold.mixture.log_marginal(scaffold.encoder.embed(obs))
        return fn

    def after_collect(self, batch, rng) -> dict:
        D = batch.next_obs.shape[-1]
        obs = batch.next_obs.reshape(-1, D)
        labels = np.repeat(np.asarray(batch.task_ids, dtype=np.int64), batch.next_obs.shape[1])
        acc = train_classifier(self.classifier, obs, labels, epochs=self.cfg.eval.discriminator_epochs,
                               batch_size=self.cfg.scaffold.batch_size, lr=self.cfg.eval.discriminator_lr,
                               rng=rng, balanced=False, temperature=self.temperature,
                               optimizer=self.classifier_opt)
        return {"classifier_accuracy": acc}

    def assignments(self, trajectories) -> np.ndarray:
        """Trajectory-level argmax of summed log q_c(z|s)."""
        obs = np.stack([t.obs for t in trajectories])
        return self.log_q_c(obs).sum(axis=1).argmax(axis=1)

    def extra_state(self):
        arrays = {f"clf_{k}": v for k, v in self.classifier.params.items()}
        st = self.classifier_opt.state_dict()
        for i, (m, v) in enumerate(zip(st["m"], st["v"])):
            arrays[f"clf_m_{i}"], arrays[f"clf_v_{i}"] = m, v
        return arrays, {"clf_t": st["t"]}

    def load_extra_state(self, arrays, meta):
        for k in list(self.classifier.params):
            self.classifier.params[k] = np.array(arrays[f"clf_{k}"], dtype=np.float64)
        n = len(self.classifier.params)
        self.classifier_opt.load_state_dict({"t": meta["clf_t"], "m": [arrays[f"clf_m_{i}"] for i in range(n)],
                                             "v": [arrays[f"clf_v_{i}"] for i in range(n)]})


def carml_assignments(trainer: CarmlTrainer) -> np.ndarray:
    return assign_trajectories(trainer.scaffold, trainer.reservoir.obs_array())


def reservoir_diversity(trainer: CarmlTrainer, assignments: np.ndarray | None = None) -> DiversityMetrics:
    if assignments is None:
        assignments = (trainer.assignments(trainer.reservoir.items) if isinstance(trainer, DiscriminatorTrainer)
                       else carml_assignments(trainer))
    return diversity_metrics(assignments, trainer.reservoir.items, trainer.cfg.eval.grid_n,
                             trainer.cfg.scaffold.n_components, trainer.cfg.env.room_size)


def run_variant_online_discriminator(cfg: RunConfig, run_dir=None) -> dict:
    tr = DiscriminatorTrainer(cfg, run_dir).run()
    return {"trainer": tr, "policy": tr.policy, "scaffold": tr.scaffold, "classifier": tr.classifier,
            "diversity": reservoir_diversity(tr)}


def run_variant_pipelined(cfg: RunConfig, phase2_updates: int | None = None, run_dir=None) -> dict:
    """Phase 1: contextual policy with periodic E-steps. Phase 2: fresh RL² policy on the frozen scaffold."""
    cc = cfg.curriculum
    phase1 = CarmlTrainer(cfg.replace(curriculum={"learner": "contextual"}),
                          None if run_dir is None else f"{run_dir}/phase1").run()
    n2 = cc.outer_iterations * cc.policy_updates_per_iteration if phase2_updates is None else phase2_updates
    cfg2 = cfg.replace(curriculum={"learner": "rl2", "outer_iterations": 1, "policy_updates_per_iteration": n2})
    phase2 = CarmlTrainer(cfg2, None if run_dir is None else f"{run_dir}/phase2")
    diversity = reservoir_diversity(phase1)
    phase2.reservoir = Reservoir(phase1.reservoir.capacity, list(phase1.reservoir.items), phase1.reservoir.n_seen)
    phase2.scaffold = phase1.scaffold
    phase2.scaffold_history = [phase1.scaffold]
    phase2.run()
    return {"phase1": phase1, "phase2": phase2, "policy": phase2.policy, "scaffold": phase1.scaffold,
            "diversity": diversity}


def lambda_study(cfg: RunConfig, lambdas=None, seeds=(0, 1, 2)) -> dict:
    """Coverage entropy of the final reservoir for each lambda, per seed (contextual learner)."""
    lambdas = cfg.eval.lambda_grid if lambdas is None else lambdas
    out: dict = {}
    for lam in lambdas:
        for s in seeds:
            c = cfg.replace(reward={"lam": float(lam)}, curriculum={"learner": "contextual"}, seed=int(s))
            tr = CarmlTrainer(c).run()
            out[(float(lam), int(s))] = reservoir_diversity(tr)
    return out
