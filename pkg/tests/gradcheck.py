"""Finite-difference check of the full recurrent policy loss."""
import numpy as np

from carml import autodiff as ad
from carml.env import EnvConfig, fixed_layout
from carml.metapolicy import (
    MetaPolicy,
    PolicyConfig,
    compute_advantages,
    ppo_loss,
    recurrent_forward,
    run_trials,
)


def policy_loss_gradient_error(seed: int, hidden: int = 8, horizon: int = 5, episodes: int = 2,
                               h: float = 1e-5) -> float:
    """Largest per-tensor relative error ||g_bp - g_fd|| / max(||g_bp||, ||g_fd||)."""
    g = np.random.default_rng(seed)
    ec = EnvConfig(horizon=horizon, obs_mode="pose", n_landmarks=2)
    pc = PolicyConfig(hidden_size=hidden, episodes_per_trial=episodes, entropy_coef=0.05)
    policy = MetaPolicy.init(ec.obs_dim, hidden, g)
    for t in policy.params.values():  # move away from the tiny-actor init so every term matters
        t.data += g.normal(scale=0.3, size=t.data.shape)
    layouts = [fixed_layout(ec)] * 3
    batch = run_trials(policy, ec, layouts, lambda obs, xy: g.normal(size=len(obs)), None, episodes, g)
    compute_advantages(batch, pc.gamma, pc.gae_lambda)
    # perturbed behaviour log-probs so that some ratios fall outside the clip range
    old_logp = batch.logp + g.normal(scale=0.3, size=batch.logp.shape)
    adv = g.normal(size=batch.advantages.shape)

    def loss_value():
        logp, values = recurrent_forward(policy.params, batch.inputs)
        loss, _ = ppo_loss(logp, values, batch.actions, old_logp, adv, batch.returns, pc)
        return loss

    ad.zero_grad(policy.params.values())
    loss_value().backward()
    worst = 0.0
    for t in policy.params.values():
        num = ad.numerical_grad(lambda: float(loss_value().data), t.data, h)
        denom = max(np.linalg.norm(t.grad), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(t.grad - num) / denom))
    return worst
