from dataclasses import dataclass
import logging
from typing import Optional, Sequence, Tuple
from bppo.base.helpers import step_seed
from bppo.numerics import Tape, Tensor, backward, ops
from bppo.policy import PolicyParams, forward_logprobs
from bppo.tasks import TaskInstance, TaskSpec, gen_instances
from bppo.trainer.adam import Adam
from bppo.trainer.config import TrainConfig
from bppo.trainer.evaluate import evaluate

# Warmup training instances come from their own stream of the seed
WARMUP_STREAM = 4


@dataclass
class WarmupResult:
    """
    Outcome of supervised warmup.

    Attributes:
        params:     Best parameters seen (by held-out accuracy).
        accuracy:   Best held-out accuracy reached.
        steps:      Number of optimizer steps taken.
        reached:    True if accuracy met the target before the step cap.
    """

    params: PolicyParams
    accuracy: float
    steps: int
    reached: bool


def cross_entropy(
    params: PolicyParams,
    instances: Sequence[TaskInstance],
    exit_depth: Optional[int] = None
) -> Tensor:
    """Mean token-level cross-entropy of the oracle responses (teacher forcing)."""

    total = None
    n_tokens = 0

    for instance in instances:
        prompt, oracle = list(instance.prompt_tokens), list(instance.oracle_response)

        logp = forward_logprobs(params, prompt + oracle[:-1], exit_depth)
        rows = ops.slice_rows(logp, len(prompt) - 1, len(prompt) - 1 + len(oracle))
        nll = ops.scale(ops.reduce_sum(ops.gather(rows, oracle)), -1.0)

        total = nll if total is None else ops.add(total, nll)
        n_tokens += len(oracle)

    return ops.scale(total, 1.0 / n_tokens)


def warmup_step(
    params: PolicyParams,
    optimizer: Adam,
    instances: Sequence[TaskInstance],
    exit_depth: Optional[int] = None
) -> Tuple[PolicyParams, float]:
    """One Adam step on the cross-entropy of a batch; returns (params, loss)."""

    with Tape() as tape:
        tape.watch(params.tensors)
        loss = cross_entropy(params, instances, exit_depth)

    grads = backward(tape, loss)
    return optimizer.step(params, grads), loss.item()


def supervised_warmup(
    config: TrainConfig,
    params: PolicyParams,
    instances: Optional[Sequence[TaskInstance]] = None
) -> WarmupResult:
    """
    Minimize cross-entropy on oracle responses until held-out greedy
    accuracy reaches the target or the step cap runs out.

    Batches are drawn from freshly generated instances, or cycled from
    the given instances if provided. The returned parameters become π_ref
    and the RL starting point.
    """

    wc = config.warmup
    spec: TaskSpec = config.task
    exit_depth = config.train_exit

    optimizer = Adam(
        params,
        lr=wc.lr,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        eps=config.adam_eps
    )

    def _accuracy(p):
        return evaluate(
            p, spec, wc.eval_size, config.seed,
            max_len=config.max_response_len, exit_depth=exit_depth
        )

    best_params, best_accuracy = params, _accuracy(params)
    logging.info(f"Warmup step 0: accuracy={best_accuracy:.3f}")

    if best_accuracy >= wc.target_accuracy:
        return WarmupResult(best_params, best_accuracy, 0, True)

    for step in range(1, wc.max_steps + 1):

        if instances is None:
            batch = gen_instances(
                spec, wc.batch_size, step_seed(config.seed, step), stream=WARMUP_STREAM
            )
        else:
            start = ((step - 1) * wc.batch_size) % len(instances)
            batch = [
                instances[(start + j) % len(instances)]
                for j in range(min(wc.batch_size, len(instances)))
            ]

        params, loss = warmup_step(params, optimizer, batch, exit_depth)
        logging.debug(f"Warmup step {step}: loss={loss:.5f}")

        if step % wc.eval_every == 0 or step == wc.max_steps:

            accuracy = _accuracy(params)
            logging.info(f"Warmup step {step}: loss={loss:.5f} accuracy={accuracy:.3f}")

            if accuracy > best_accuracy:
                best_params, best_accuracy = params, accuracy

            if accuracy >= wc.target_accuracy:
                return WarmupResult(params, accuracy, step, True)

    logging.warning(
        f"Warmup did not reach {wc.target_accuracy:.3f} in {wc.max_steps} steps "
        f"(best {best_accuracy:.3f})"
    )
    return WarmupResult(best_params, best_accuracy, wc.max_steps, False)
