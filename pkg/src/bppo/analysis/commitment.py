from collections import Counter
import logging
from typing import Optional, Sequence, Tuple, Union
import numpy as np
import pandas as pd
from bppo.base.exceptions import ConfigurationException
from bppo.policy import PolicyParams, sample_response
from bppo.tasks import TaskInstance, TaskSpec, verify

# Commitment draws come from their own stream of the seed
COMMITMENT_STREAM = 9


def _keys(seed: Union[int, Sequence[int]]) -> Tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(k) for k in seed)


def prefix_commitment(
    params: PolicyParams,
    spec: TaskSpec,
    instance: TaskInstance,
    prefix_len: int,
    K: int,
    seed: Union[int, Sequence[int]],
    temperature: float = 1.0,
    max_len: int = 6,
    exit_depth: Optional[int] = None
) -> float:
    """
    Sample one response, freeze its first prefix_len tokens and resample
    K suffixes. The score is the fraction of suffix samples whose reward
    equals the majority reward.

    The base response depends only on (seed, instance), so scores for
    different prefix lengths of one seed share it.
    """

    if K < 2:
        raise ConfigurationException(f"K must be >= 2, not {K}")
    if prefix_len < 0:
        raise ConfigurationException(f"prefix_len must be >= 0, not {prefix_len}")

    keys = _keys(seed)

    base = sample_response(
        params, instance.prompt_tokens, temperature, max_len,
        seed=np.random.SeedSequence([*keys, COMMITMENT_STREAM, 0]),
        exit_depth=exit_depth
    )

    # No freedom left once the prefix covers the whole response
    if prefix_len >= len(base):
        return 1.0

    prefix = base.response_tokens[:prefix_len]
    rewards = []

    for k in range(K):
        suffix = sample_response(
            params, instance.prompt_tokens, temperature, max_len,
            seed=np.random.SeedSequence([*keys, COMMITMENT_STREAM, 1, prefix_len, k]),
            exit_depth=exit_depth,
            response_prefix=prefix
        )
        rewards.append(verify(spec, suffix.prompt_tokens, suffix.response_tokens))

    majority_count = max(Counter(rewards).values())
    return majority_count / K


def commitment_curve(
    params: PolicyParams,
    spec: TaskSpec,
    instances: Sequence[TaskInstance],
    prefix_lens: Sequence[int],
    K: int,
    seed: int,
    temperature: float = 1.0,
    max_len: int = 6,
    exit_depth: Optional[int] = None
) -> pd.DataFrame:
    """Mean commitment score over the instances, one row per prefix length."""

    rows = []
    for prefix_len in prefix_lens:

        scores = [
            prefix_commitment(
                params, spec, instance, prefix_len, K, (seed, j),
                temperature=temperature, max_len=max_len, exit_depth=exit_depth
            )
            for j, instance in enumerate(instances)
        ]
        rows.append(dict(
            prefix_len=int(prefix_len),
            mean_score=float(np.mean(scores)) if scores else float("nan"),
            n_instances=len(scores)
        ))
        logging.info(f"Commitment at prefix_len {prefix_len}: {rows[-1]['mean_score']:.3f}")

    return pd.DataFrame(rows, columns=["prefix_len", "mean_score", "n_instances"])
