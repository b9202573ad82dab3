from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple
import numpy as np
from bppo.base.exceptions import ConfigurationException
from bppo.base.helpers import derive_rng
from bppo.numerics import Tensor

MLP_RATIO = 4


@dataclass(frozen=True)
class PolicyConfig:
    """
    Shape of the multi-exit decoder.

    Attributes:
        vocab_size:     Number of token ids.
        context_len:    Maximum sequence length (prompt + response).
        d_model:        Width of the residual stream.
        n_heads:        Attention heads per block.
        n_layers:       Number of shared decoder blocks.
        exit_depths:    Sorted block counts which carry an output head.
        init_scale:     Standard deviation of the Gaussian initialization.
    """

    vocab_size: int = 32
    context_len: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    exit_depths: Tuple[int, ...] = (1, 4)
    init_scale: float = 0.02

    def __post_init__(self):

        object.__setattr__(self, "exit_depths", tuple(int(d) for d in self.exit_depths))

        for attr in ["vocab_size", "context_len", "d_model", "n_heads", "n_layers"]:
            if int(getattr(self, attr)) < 1:
                raise ConfigurationException(f"policy.{attr} must be >= 1")

        if self.d_model % self.n_heads != 0:
            msg = f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            raise ConfigurationException(msg)

        if len(self.exit_depths) == 0:
            raise ConfigurationException("policy.exit_depths cannot be empty")

        if list(self.exit_depths) != sorted(set(self.exit_depths)):
            raise ConfigurationException("policy.exit_depths must be sorted and unique")

        if self.exit_depths[0] < 1 or self.exit_depths[-1] != self.n_layers:
            msg = f"exit_depths must lie in [1, {self.n_layers}] and end at n_layers"
            raise ConfigurationException(msg)

        if self.init_scale <= 0:
            raise ConfigurationException("policy.init_scale must be positive")

    @property
    def deepest(self) -> int:
        return self.n_layers

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Name and shape of every parameter, in the fixed parameter order."""

        d, v = self.d_model, self.vocab_size
        shapes = {
            "tok_emb": (v, d),
            "pos_emb": (self.context_len, d),
        }

        for layer in range(self.n_layers):
            prefix = f"blocks.{layer}"
            shapes[f"{prefix}.attn_norm"] = (d,)
            shapes[f"{prefix}.wq"] = (d, d)
            shapes[f"{prefix}.wk"] = (d, d)
            shapes[f"{prefix}.wv"] = (d, d)
            shapes[f"{prefix}.wo"] = (d, d)
            shapes[f"{prefix}.mlp_norm"] = (d,)
            shapes[f"{prefix}.w_in"] = (d, MLP_RATIO * d)
            shapes[f"{prefix}.w_out"] = (MLP_RATIO * d, d)

        for depth in self.exit_depths:
            shapes[f"exits.{depth}.norm"] = (d,)
            shapes[f"exits.{depth}.head"] = (d, v)

        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def to_dict(self) -> dict:
        return dict(
            vocab_size=self.vocab_size,
            context_len=self.context_len,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            exit_depths=list(self.exit_depths),
            init_scale=self.init_scale,
        )

    @classmethod
    def from_dict(cls, values: Mapping) -> "PolicyConfig":
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationException(f"Invalid policy config ({str(e)})")


def _is_norm(name: str) -> bool:
    return name.endswith("norm")


@dataclass
class PolicyParams:
    """
    Every learnable tensor of the multi-exit decoder.

    θ, θ_old and π_ref are separate PolicyParams; the familial members
    of one PolicyParams share its backbone tensors (see member()).
    """

    config: PolicyConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: PolicyConfig, seed: int) -> "PolicyParams":
        """Gaussian weights with std init_scale; zero normalization offsets."""

        rng = derive_rng(seed, 0)
        tensors = {}

        for name, shape in config.param_shapes().items():
            if _is_norm(name):
                values = np.zeros(shape)
            else:
                values = rng.normal(0.0, config.init_scale, size=shape)
            tensors[name] = Tensor(values, name=name)

        return cls(config, tensors)

    @classmethod
    def from_arrays(cls, config: PolicyConfig, arrays: Mapping[str, np.ndarray]) -> "PolicyParams":

        shapes = config.param_shapes()
        if set(arrays.keys()) != set(shapes.keys()):
            raise ConfigurationException("Parameter names do not match the policy config")

        tensors = {}
        for name, shape in shapes.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                msg = f"Parameter {name} has shape {arr.shape}, expected {shape}"
                raise ConfigurationException(msg)
            tensors[name] = Tensor(arr, name=name)

        return cls(config, tensors)

    @property
    def names(self) -> List[str]:
        return list(self.tensors.keys())

    def clone(self) -> "PolicyParams":
        """Independent copy (used for θ_old snapshots and π_ref)."""

        return PolicyParams(
            self.config,
            {
                name: Tensor(t.data, name=name)
                for name, t in self.tensors.items()
            }
        )

    def replace(self, updates: Mapping[str, np.ndarray]) -> "PolicyParams":
        """Return new params with some tensors replaced; the rest are shared."""

        tensors = dict(self.tensors)
        for name, values in updates.items():
            if name not in tensors:
                raise ConfigurationException(f"Unknown parameter: {name}")
            tensors[name] = Tensor(values, name=name)

        return PolicyParams(self.config, tensors)

    def member(self, depth: int) -> "FamilyMember":
        return FamilyMember(self, depth)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def flatten(self, values: Optional[Mapping[str, np.ndarray]] = None) -> np.ndarray:
        """Concatenate arrays (the params, or e.g. gradients) in parameter order."""

        if values is None:
            values = self.arrays()
        return np.concatenate([
            np.asarray(values[name]).reshape(-1)
            for name in self.names
        ])

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


class FamilyMember:
    """
    One depth of the shared-backbone family. Holds references to the
    parent's tensors, never copies: blocks below its exit depth,
    the embeddings, and its own exit norm and head.
    """

    def __init__(self, params: PolicyParams, depth: int):

        if depth not in params.config.exit_depths:
            msg = f"Unknown exit depth {depth} (available: {list(params.config.exit_depths)})"
            raise ConfigurationException(msg)

        self.params = params
        self.depth = depth

        self.tensors: Dict[str, Tensor] = {}
        for name, tensor in params.tensors.items():
            if name.startswith("blocks."):
                if int(name.split(".")[1]) >= depth:
                    continue
            elif name.startswith("exits."):
                if int(name.split(".")[1]) != depth:
                    continue
            self.tensors[name] = tensor

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))
