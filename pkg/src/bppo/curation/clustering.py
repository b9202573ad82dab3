import logging
from typing import List
import numpy as np
from scipy.spatial.distance import pdist, squareform
from bppo.base.exceptions import CurationException
from bppo.curation.embedding import EmbeddingSet

# Distances closer than this compare as equal
TIE_TOL = 1e-12


def cosine_distances(embs: EmbeddingSet) -> np.ndarray:
    """N x N matrix of 1 - cosine similarity."""

    if len(embs) == 1:
        return np.zeros((1, 1))
    return squareform(pdist(embs.vectors, metric="cosine"))


def hier_cluster(embs: EmbeddingSet, k: int) -> List[int]:
    """
    Agglomerative clustering under average linkage and cosine distance,
    merged until k clusters remain.

    A cluster is identified by its smallest member (by position in the
    set). Among merges at the minimal distance, the pair with the lowest
    (smaller id, larger id) wins. Labels number the final clusters
    0..k-1 in order of their smallest member.
    """

    n = len(embs)
    if not 1 <= k <= n:
        raise CurationException(f"k must be in [1, {n}], not {k}")

    # Pairwise distance sums between clusters; slot i holds the cluster whose smallest member is i
    sums = cosine_distances(embs)
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    members = {i: [i] for i in range(n)}
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)

    for _ in range(n - k):

        valid = upper & np.outer(active, active)
        linkage = np.where(valid, sums / np.outer(sizes, sizes), np.inf)

        best = linkage.min()
        candidates = np.argwhere(valid & (linkage <= best + TIE_TOL))

        # argwhere is row-major, so the first candidate is the lowest pair
        a, b = (int(x) for x in candidates[0])
        logging.debug(f"Merging clusters {a} and {b} at {best:.6f}")

        sums[a, :] += sums[b, :]
        sums[:, a] += sums[:, b]
        sizes[a] += sizes[b]
        active[b] = False
        members[a].extend(members.pop(b))

    labels = [0] * n
    for label, slot in enumerate(sorted(members)):
        for point in members[slot]:
            labels[point] = label

    return labels
