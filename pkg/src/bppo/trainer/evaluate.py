from typing import Optional, Sequence
from bppo.policy import PolicyParams, greedy_response
from bppo.tasks import TaskInstance, TaskSpec, gen_instances, verify

# Held-out instances come from their own stream of the seed
EVAL_STREAM = 3


def evaluate_instances(
    params: PolicyParams,
    spec: TaskSpec,
    instances: Sequence[TaskInstance],
    max_len: int,
    exit_depth: Optional[int] = None
) -> float:
    """Greedy exact-match accuracy over the given instances."""

    if len(instances) == 0:
        return 0.0

    correct = 0.0
    for instance in instances:
        response = greedy_response(params, instance.prompt_tokens, max_len, exit_depth)
        correct += verify(spec, instance.prompt_tokens, response)

    return correct / len(instances)


def evaluate(
    params: PolicyParams,
    spec: TaskSpec,
    n_instances: int,
    seed: int,
    max_len: int = 6,
    exit_depth: Optional[int] = None
) -> float:
    """Greedy exact-match accuracy over n freshly generated held-out instances."""

    instances = gen_instances(spec, n_instances, seed, stream=EVAL_STREAM)
    return evaluate_instances(params, spec, instances, max_len, exit_depth)
