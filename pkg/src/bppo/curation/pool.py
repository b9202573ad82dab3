from dataclasses import dataclass
import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union
from bppo.base.exceptions import CurationException
from bppo.base.helpers import format_tokens, parse_tokens
from bppo.base.io import write_lines
from bppo.curation.clustering import hier_cluster
from bppo.curation.embedding import embed_prompts
from bppo.curation.selection import greedy_diverse_select
from bppo.policy import PolicyParams
from bppo.tasks import TaskInstance

Prompt = Tuple[int, ...]


def read_prompt_pool(path: Union[str, Path]) -> List[Prompt]:
    """One prompt per line, token ids separated by spaces. Blank lines are skipped."""

    path = Path(path)
    if not path.exists():
        raise CurationException(f"Prompt pool not found: {path}")

    prompts = []
    with open(path, "r") as handle:
        for line in handle:
            if line.strip():
                prompts.append(tuple(parse_tokens(line)))

    return prompts


def write_prompt_pool(path: Union[str, Path], prompts: Sequence[Sequence[int]]) -> None:
    write_lines(path, [format_tokens(prompt) for prompt in prompts])


def pool_instances(prompts: Sequence[Sequence[int]]) -> List[TaskInstance]:
    """Wrap pool prompts as task instances (no oracle response)."""

    return [TaskInstance(tuple(prompt)) for prompt in prompts]


@dataclass
class CurationResult:
    """
    Attributes:
        indices:    Pool index of each selected prompt, ordered by (cluster, greedy rank).
        labels:     Cluster label of every pool prompt.
        prompts:    The selected prompts, in the order of indices.
    """

    indices: List[int]
    labels: List[int]
    prompts: List[Prompt]


def curate(
    prompts: Sequence[Sequence[int]],
    k: int,
    per_cluster_m: int,
    params: PolicyParams
) -> CurationResult:
    """
    Embed the pool, cluster it into k clusters and keep up to
    per_cluster_m diverse prompts from each cluster.
    """

    n = len(prompts)
    if k < 1 or per_cluster_m < 1:
        raise CurationException("k and per_cluster_m must be >= 1")
    if k * per_cluster_m > n:
        raise CurationException(f"k * per_cluster_m ({k * per_cluster_m}) exceeds the pool size ({n})")

    embs = embed_prompts(params, prompts)
    labels = hier_cluster(embs, k)

    indices = []
    for label in range(k):

        positions = [i for i, lab in enumerate(labels) if lab == label]
        m = min(per_cluster_m, len(positions))
        picked = greedy_diverse_select(embs.subset(positions), m)

        logging.debug(f"Cluster {label}: {len(positions)} prompts, picked {picked}")
        indices.extend(picked)

    logging.info(f"Curated {len(indices)} of {n} prompts from {k} clusters")

    return CurationResult(
        indices=indices,
        labels=labels,
        prompts=[tuple(prompts[i]) for i in indices]
    )
