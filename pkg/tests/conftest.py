import pytest

from carml.config import RunConfig


def tiny_config(seed=0, **blocks) -> RunConfig:
    """A run small enough to finish in a couple of seconds."""
    base = RunConfig(seed=seed).replace(
        env={"horizon": 6, "n_rays": 4},
        scaffold={"n_components": 3, "embed_dim": 3, "hidden": 8, "rounds": 1, "epochs": 1, "em_iters": 5,
                  "batch_size": 64},
        policy={"hidden_size": 8, "episodes_per_trial": 2, "epochs_per_update": 1, "minibatches": 2},
        curriculum={"outer_iterations": 2, "policy_updates_per_iteration": 2, "tasks_per_update": 4,
                    "reservoir_capacity": 40, "seed_episodes": 30},
        eval={"test_repeats": 1, "finetune_updates": 2, "finetune_tasks_per_update": 2, "grid_n": 4},
    )
    return base.replace(**blocks) if blocks else base


@pytest.fixture
def tiny():
    return tiny_config
