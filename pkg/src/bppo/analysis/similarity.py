from dataclasses import dataclass
import logging
from typing import List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from bppo.base.helpers import step_seed
from bppo.numerics import Tape, backward, ops
from bppo.policy import PolicyParams, Trajectory, forward_logprobs
from bppo.rollout import Group, collect_batch
from bppo.tasks import TaskSpec, gen_instances

# Redundancy groups come from their own stream of the seed
REDUNDANCY_STREAM = 8


@dataclass
class CosineMatrix:
    """
    Pairwise cosine similarity of the per-response gradients of one group.

    Attributes:
        matrix:     G x G cosines; rows and columns of undefined responses are NaN.
        labels:     "+" for reward 1, "-" otherwise, per response.
        defined:    False where the response's gradient is exactly zero.
    """

    matrix: np.ndarray
    labels: Tuple[str, ...]
    defined: Tuple[bool, ...]

    def _pairs(self, same: Optional[str] = None, cross: bool = False) -> List[float]:
        values = []
        n = len(self.labels)
        for i in range(n):
            for j in range(i + 1, n):
                if not (self.defined[i] and self.defined[j]):
                    continue
                if cross and self.labels[i] != self.labels[j]:
                    values.append(self.matrix[i, j])
                elif not cross and self.labels[i] == self.labels[j] == same:
                    values.append(self.matrix[i, j])
        return values

    @staticmethod
    def _mean(values: List[float]) -> float:
        return float(np.mean(values)) if values else float("nan")

    @property
    def intra_positive(self) -> float:
        return self._mean(self._pairs(same="+"))

    @property
    def intra_negative(self) -> float:
        return self._mean(self._pairs(same="-"))

    @property
    def intra(self) -> float:
        """Mean over every same-stratum pair."""
        return self._mean(self._pairs(same="+") + self._pairs(same="-"))

    @property
    def cross(self) -> float:
        return self._mean(self._pairs(cross=True))

    def summary(self) -> dict:
        return dict(
            intra_positive=self.intra_positive,
            intra_negative=self.intra_negative,
            intra=self.intra,
            cross=self.cross,
        )

    def to_frame(self) -> pd.DataFrame:
        names = [f"{i}{label}" for i, label in enumerate(self.labels)]
        return pd.DataFrame(self.matrix, index=names, columns=names)


def response_gradient(
    params: PolicyParams,
    trajectory: Trajectory,
    advantage: float,
    exit_depth: Optional[int] = None
) -> np.ndarray:
    """
    Flattened gradient of one response's on-policy surrogate: the ρ = 1
    term, full mask, no KL. At ρ = 1 its gradient is
    Â (1/|o|) Σ_t ∇ log π_θ(o_t | q, o_<t).
    """

    prompt, response = list(trajectory.prompt_tokens), list(trajectory.response_tokens)

    with Tape() as tape:
        tape.watch(params.tensors)
        logp = forward_logprobs(params, prompt + response[:-1], exit_depth)
        rows = ops.slice_rows(logp, len(prompt) - 1, len(prompt) - 1 + len(response))
        surrogate = ops.scale(ops.reduce_mean(ops.gather(rows, response)), advantage)

    return params.flatten(backward(tape, surrogate))


def gradient_cosine_matrix(
    group: Group,
    params: PolicyParams,
    exit_depth: Optional[int] = None
) -> CosineMatrix:
    """Cosine similarity between the per-response gradients of a group."""

    grads = np.stack([
        response_gradient(params, traj, adv, exit_depth)
        for traj, adv in zip(group.trajectories, group.advantages)
    ])

    defined = np.linalg.norm(grads, axis=1) > 0
    n = group.size
    matrix = np.full((n, n), np.nan)

    ix = np.flatnonzero(defined)
    if len(ix):
        matrix[np.ix_(ix, ix)] = 1.0 - cdist(grads[ix], grads[ix], metric="cosine")
        for i in ix:
            matrix[i, i] = 1.0

    if not np.all(defined):
        logging.debug(f"Group {group.prompt_index}: zero gradient for responses {list(np.flatnonzero(~defined))}")

    labels = tuple("+" if r == 1.0 else "-" for r in group.rewards)
    return CosineMatrix(np.clip(matrix, -1.0, 1.0), labels, tuple(bool(d) for d in defined))


def gradient_redundancy(
    params: PolicyParams,
    spec: TaskSpec,
    n_groups: int = 100,
    group_size: int = 8,
    temperature: float = 1.0,
    max_len: int = 6,
    seed: int = 0,
    exit_depth: Optional[int] = None,
    workers: int = 1,
    max_batches: int = 50
) -> pd.DataFrame:
    """
    Collect mixed-reward groups until n_groups are found (or max_batches
    batches of n_groups prompts are spent) and summarize the cosine
    matrix of each. One row per group: prompt, intra_positive,
    intra_negative, intra, cross.
    """

    rows = []

    for batch in range(max_batches):

        batch_seed = step_seed(seed, batch)
        instances = gen_instances(spec, n_groups, batch_seed, stream=REDUNDANCY_STREAM)
        groups: Sequence[Group] = collect_batch(
            params, spec, instances, group_size, temperature, max_len,
            seed=batch_seed, exit_depth=exit_depth, workers=workers
        )

        for group in groups:
            if group.is_degenerate:
                continue
            summary = gradient_cosine_matrix(group, params, exit_depth).summary()
            rows.append(dict(batch=batch, prompt=group.prompt_index, **summary))
            if len(rows) == n_groups:
                break

        if len(rows) == n_groups:
            break

    if len(rows) < n_groups:
        logging.warning(f"Found only {len(rows)} mixed groups out of {n_groups} requested")

    return pd.DataFrame(
        rows,
        columns=["batch", "prompt", "intra_positive", "intra_negative", "intra", "cross"]
    )
