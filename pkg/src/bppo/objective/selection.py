from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union
import numpy as np
from bppo.base.helpers import derive_rng
from bppo.objective.config import PrefixSpec, SelectionStrategy
from bppo.rollout import Group

# Stream id separating selection draws from rollout draws
SELECTION_STREAM = 2


def make_prefix_mask(response_len: int, prefix: PrefixSpec) -> np.ndarray:
    """Ones on the first n response positions, zeros after."""

    if response_len < 1:
        raise ValueError("response_len must be >= 1")

    mask = np.zeros(response_len, dtype=np.float64)
    mask[:prefix.n_tokens(response_len)] = 1.0
    return mask


@dataclass(frozen=True)
class ResponseSelection:
    """
    The responses of one group that receive gradient, with their masks.
    The outer weight of each response is 1 / len(indices).
    """

    indices: Tuple[int, ...]
    masks: Tuple[np.ndarray, ...]

    @property
    def weight(self) -> float:
        return 1.0 / len(self.indices)

    @property
    def grad_token_count(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks))


@dataclass(frozen=True)
class BinaryPair(ResponseSelection):
    """One positive and one negative response: indices == (positive, negative)."""

    @property
    def positive_index(self) -> int:
        return self.indices[0]

    @property
    def negative_index(self) -> int:
        return self.indices[1]


@dataclass(frozen=True)
class GroupSkipped:
    """Signal that a group has an empty stratum and contributes no update."""

    prompt_index: int
    reason: str


def _pick_extreme(group: Group, candidates: List[int], highest: bool) -> int:
    # Lowest index wins ties: strict comparison while scanning in index order
    best = candidates[0]
    for i in candidates[1:]:
        a, b = group.advantages[i], group.advantages[best]
        if (a > b) if highest else (a < b):
            best = i
    return best


def _pick_median_length(group: Group, candidates: List[int]) -> int:
    ordered = sorted(candidates, key=lambda i: (len(group.trajectories[i]), i))
    return ordered[(len(ordered) - 1) // 2]


def select_binary(
    group: Group,
    strategy: Union[SelectionStrategy, str] = SelectionStrategy.RANDOM,
    seed: int = 0,
    prefix: PrefixSpec = PrefixSpec()
) -> Union[BinaryPair, GroupSkipped]:
    """
    Keep one positive (reward 1) and one negative (reward 0) response.

    Random: uniform within each stratum, drawn from (seed, prompt_index).
    ExtremeAdvantage: highest positive / lowest negative advantage.
    MedianLength: lower-median response length per stratum.
    Ties go to the lowest index.
    """

    strategy = SelectionStrategy(strategy)
    positives = group.positive_indices
    negatives = group.negative_indices

    if not positives or not negatives:
        empty = "positive" if not positives else "negative"
        return GroupSkipped(group.prompt_index, f"empty {empty} stratum")

    if strategy == SelectionStrategy.RANDOM:
        rng = derive_rng(seed, SELECTION_STREAM, group.prompt_index)
        pos = positives[int(rng.integers(len(positives)))]
        neg = negatives[int(rng.integers(len(negatives)))]

    elif strategy == SelectionStrategy.EXTREME_ADVANTAGE:
        pos = _pick_extreme(group, positives, highest=True)
        neg = _pick_extreme(group, negatives, highest=False)

    else:
        pos = _pick_median_length(group, positives)
        neg = _pick_median_length(group, negatives)

    return BinaryPair(
        indices=(pos, neg),
        masks=tuple(
            make_prefix_mask(len(group.trajectories[i]), prefix)
            for i in (pos, neg)
        )
    )


def select_full_group(group: Group, prefix: PrefixSpec = PrefixSpec.fraction(1.0)) -> ResponseSelection:
    """Every response of the group, each with its prefix mask."""

    return select_indices(group, range(group.size), prefix)


def select_indices(group: Group, indices: Sequence[int], prefix: PrefixSpec) -> ResponseSelection:
    """An explicit subset of responses, each with its prefix mask."""

    indices = tuple(int(i) for i in indices)

    return ResponseSelection(
        indices=indices,
        masks=tuple(
            make_prefix_mask(len(group.trajectories[i]), prefix)
            for i in indices
        )
    )
