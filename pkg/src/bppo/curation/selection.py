from typing import List
import numpy as np
from bppo.base.exceptions import CurationException
from bppo.curation.clustering import TIE_TOL, cosine_distances
from bppo.curation.embedding import EmbeddingSet


def _argmax_lowest(values: np.ndarray, allowed: np.ndarray) -> int:
    """Position of the largest allowed value, lowest position on ties."""

    masked = np.where(allowed, values, -np.inf)
    best = masked.max()
    return int(np.flatnonzero(allowed & (masked >= best - TIE_TOL))[0])


def greedy_diverse_select(embs: EmbeddingSet, m: int) -> List[int]:
    """
    Farthest-point selection of m ids under cosine distance.

    The first pick is the point farthest from the centroid; each further
    pick maximizes its minimum distance to the points already picked.
    Ties go to the lowest position. Returns ids in pick order.
    """

    n = len(embs)
    if not 1 <= m <= n:
        raise CurationException(f"m must be in [1, {n}], not {m}")

    centroid = embs.vectors.mean(axis=0)
    norm = np.linalg.norm(centroid)

    # A centroid at the origin is equally far from every point
    if norm > 0:
        to_centroid = 1.0 - embs.vectors @ (centroid / norm)
    else:
        to_centroid = np.ones(n)

    distances = cosine_distances(embs)
    remaining = np.ones(n, dtype=bool)

    first = _argmax_lowest(to_centroid, remaining)
    picks = [first]
    remaining[first] = False
    nearest = distances[first].copy()

    while len(picks) < m:
        nxt = _argmax_lowest(nearest, remaining)
        picks.append(nxt)
        remaining[nxt] = False
        nearest = np.minimum(nearest, distances[nxt])

    return [embs.ids[p] for p in picks]
