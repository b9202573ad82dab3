import numpy as np
from bppo.objective import ObjectiveConfig
from bppo.policy import PolicyConfig, PolicyParams, sample_response
from bppo.rollout import Group, make_group
from bppo.tasks import TaskSpec, gen_instance
from bppo.trainer import TrainConfig, WarmupConfig

# Small enough that every unit test runs in well under a second
TINY = PolicyConfig(
    vocab_size=32,
    context_len=32,
    d_model=16,
    n_heads=2,
    n_layers=2,
    exit_depths=(1, 2),
)


def tiny_params(seed: int = 0, init_scale: float = 0.02) -> PolicyParams:
    config = PolicyConfig(**{**TINY.to_dict(), "init_scale": init_scale})
    return PolicyParams.init(config, seed)


def tiny_train_config(**kwargs) -> TrainConfig:
    values = dict(
        algo="bppo",
        group_size=4,
        batch_prompts=3,
        steps=2,
        eval_size=5,
        eval_every=1,
        checkpoint_every=1,
        max_response_len=4,
        policy=TINY,
        warmup=WarmupConfig(batch_size=4, max_steps=3, eval_every=1, eval_size=5),
        objective=ObjectiveConfig(),
    )
    values.update(kwargs)
    return TrainConfig(**values)


def forced_group(
    params: PolicyParams,
    rewards,
    seed: int = 0,
    spec: TaskSpec = TaskSpec(),
    max_len: int = 5,
    prompt_index: int = 0
) -> Group:
    """A group sampled from params whose rewards are set by hand."""

    instance = gen_instance(spec, np.random.SeedSequence([seed, 99]))
    trajectories = [
        sample_response(
            params, instance.prompt_tokens, 1.0, max_len,
            seed=np.random.SeedSequence([seed, 98, i])
        )
        for i in range(len(rewards))
    ]
    return make_group(prompt_index, instance.prompt_tokens, trajectories, rewards)
