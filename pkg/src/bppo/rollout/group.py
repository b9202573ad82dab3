from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
from typing import List, Optional, Sequence, Tuple
import numpy as np
from bppo.base.exceptions import ConfigurationException
from bppo.policy import PolicyParams, Trajectory, sample_response
from bppo.tasks import TaskInstance, TaskSpec, verify

ADVANTAGE_EPS = 1e-6

# Stream id separating rollout draws from every other use of the seed
ROLLOUT_STREAM = 1


@dataclass(frozen=True)
class Group:
    """
    The G responses sampled for one query under θ_old.

    Attributes:
        prompt_index:   Position of the query in its batch (seeds selection).
        prompt_tokens:  The query q.
        trajectories:   G rewarded trajectories.
        rewards:        G rewards.
        advantages:     G group-relative advantages, one per response.
    """

    prompt_index: int
    prompt_tokens: Tuple[int, ...]
    trajectories: Tuple[Trajectory, ...]
    rewards: Tuple[float, ...]
    advantages: Tuple[float, ...]

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def is_degenerate(self) -> bool:
        """True when every reward is equal (all advantages are zero)."""
        return len(set(self.rewards)) <= 1

    @property
    def positive_indices(self) -> List[int]:
        return [i for i, r in enumerate(self.rewards) if r == 1.0]

    @property
    def negative_indices(self) -> List[int]:
        return [i for i, r in enumerate(self.rewards) if r == 0.0]

    def to_dict(self) -> dict:
        return dict(
            prompt_index=self.prompt_index,
            prompt_tokens=list(self.prompt_tokens),
            rewards=list(self.rewards),
            advantages=list(self.advantages),
            trajectories=[t.to_dict() for t in self.trajectories],
        )


def compute_advantages(rewards: Sequence[float]) -> List[float]:
    """
    Standardize rewards within the group:
    (r_i - mean(r)) / (std(r) + 1e-6), population std.
    A group of equal rewards gets exact zeros.
    """

    if len(rewards) < 2:
        raise ConfigurationException("A group needs at least 2 rewards")

    r = np.asarray(rewards, dtype=np.float64)

    if np.all(r == r[0]):
        return [0.0] * len(r)

    centered = r - np.mean(r)
    return [float(a) for a in centered / (np.std(r) + ADVANTAGE_EPS)]


def make_group(
    prompt_index: int,
    prompt_tokens: Sequence[int],
    trajectories: Sequence[Trajectory],
    rewards: Optional[Sequence[float]] = None
) -> Group:
    """
    Assemble a Group from trajectories, recomputing advantages over the
    full group. Rewards default to the trajectories' own rewards.
    """

    if rewards is None:
        rewards = [t.reward for t in trajectories]

    trajectories = tuple(t.with_reward(r) for t, r in zip(trajectories, rewards))

    return Group(
        prompt_index=int(prompt_index),
        prompt_tokens=tuple(prompt_tokens),
        trajectories=trajectories,
        rewards=tuple(float(r) for r in rewards),
        advantages=tuple(compute_advantages(rewards))
    )


def collect_group(
    params_old: PolicyParams,
    spec: TaskSpec,
    instance: TaskInstance,
    G: int,
    temperature: float,
    max_len: int,
    seed: int,
    prompt_index: int = 0,
    exit_depth: Optional[int] = None
) -> Group:
    """
    Sample G responses to one prompt from θ_old and score them.
    Response i draws from the stream (seed, prompt_index, i).
    """

    if G < 2:
        raise ConfigurationException(f"Group size must be >= 2, not {G}")

    trajectories = []
    for i in range(G):
        traj = sample_response(
            params_old,
            instance.prompt_tokens,
            temperature,
            max_len,
            seed=np.random.SeedSequence([int(seed), ROLLOUT_STREAM, int(prompt_index), i]),
            exit_depth=exit_depth
        )
        trajectories.append(
            traj.with_reward(verify(spec, traj.prompt_tokens, traj.response_tokens))
        )

    group = make_group(prompt_index, instance.prompt_tokens, trajectories)

    logging.debug(
        f"Group {prompt_index}: rewards={list(group.rewards)}"
    )

    return group


def collect_batch(
    params_old: PolicyParams,
    spec: TaskSpec,
    instances: Sequence[TaskInstance],
    G: int,
    temperature: float,
    max_len: int,
    seed: int,
    exit_depth: Optional[int] = None,
    workers: int = 1
) -> List[Group]:
    """
    Collect one group per prompt. With workers > 1 the prompts are sampled
    on a thread pool; results keep prompt order and never depend on the
    number of workers.
    """

    def _collect(item):
        ix, instance = item
        return collect_group(
            params_old, spec, instance, G, temperature, max_len,
            seed, prompt_index=ix, exit_depth=exit_depth
        )

    items = list(enumerate(instances))

    if workers <= 1:
        return [_collect(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_collect, items))
