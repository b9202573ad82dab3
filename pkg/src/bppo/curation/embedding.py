from dataclasses import dataclass
from typing import Optional, Sequence, Tuple
import numpy as np
from bppo.base.exceptions import CurationException
from bppo.numerics import ops
from bppo.policy import PolicyParams, hidden_states

UNIT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class EmbeddingSet:
    """
    Unit-norm prompt embeddings.

    Attributes:
        vectors:    N x d array, one row per prompt.
        ids:        Provenance id of each row (its index in the prompt pool).
    """

    vectors: np.ndarray
    ids: Tuple[int, ...]

    def __post_init__(self):

        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise CurationException(f"Embeddings must be a 2-d array, not {vectors.shape}")
        if len(self.ids) != vectors.shape[0]:
            raise CurationException("Need exactly one id per embedding")

        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise CurationException("Embeddings must have unit L2 norm")

        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_vectors(cls, vectors: np.ndarray, ids: Optional[Sequence[int]] = None) -> "EmbeddingSet":
        """Normalize raw vectors; ids default to 0..N-1."""

        vectors = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise CurationException("Cannot normalize a zero vector")
        if ids is None:
            ids = range(vectors.shape[0])
        return cls(vectors / norms, tuple(ids))

    def subset(self, positions: Sequence[int]) -> "EmbeddingSet":
        positions = list(positions)
        return EmbeddingSet(self.vectors[positions], tuple(self.ids[p] for p in positions))


def embed_prompt(params: PolicyParams, prompt: Sequence[int]) -> np.ndarray:
    """Mean over positions of the deepest exit's normalized hidden state (the head's input)."""

    if len(prompt) == 0:
        raise CurationException("Cannot embed an empty prompt")

    depth = params.config.deepest
    state = hidden_states(params, prompt, depth)[-1]
    normed = ops.rms_norm(state, params.tensors[f"exits.{depth}.norm"]).data

    return normed.mean(axis=0)


def embed_prompts(params: PolicyParams, prompts: Sequence[Sequence[int]]) -> EmbeddingSet:
    """Embed every prompt of a pool; row i carries id i."""

    if len(prompts) == 0:
        raise CurationException("The prompt pool is empty")

    return EmbeddingSet.from_vectors(
        np.stack([embed_prompt(params, prompt) for prompt in prompts])
    )
