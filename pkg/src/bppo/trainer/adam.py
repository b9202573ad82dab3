from dataclasses import dataclass, field
from typing import Dict, Mapping
import numpy as np
from bppo.base.exceptions import NumericsException
from bppo.policy import PolicyParams


@dataclass
class AdamState:
    """First and second moments per parameter, and the step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: PolicyParams) -> "AdamState":
        return cls(
            m={name: np.zeros(t.shape) for name, t in params.tensors.items()},
            v={name: np.zeros(t.shape) for name, t in params.tensors.items()},
            step=0
        )


class Adam:
    """
    Adam with bias correction and a constant learning rate.

    A coordinate whose gradient and moments are all zero is left
    bit-unchanged by an update.
    """

    def __init__(
        self,
        params: PolicyParams,
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.zeros(params)

    def step(self, params: PolicyParams, grads: Mapping[str, np.ndarray]) -> PolicyParams:
        """Apply one update and return the new parameters."""

        self.state.step += 1
        t = self.state.step
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t

        updates = {}
        for name in params.names:

            g = np.asarray(grads[name], dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericsException(f"Non-finite gradient for {name}")

            m = self.beta1 * self.state.m[name] + (1.0 - self.beta1) * g
            v = self.beta2 * self.state.v[name] + (1.0 - self.beta2) * g * g
            self.state.m[name] = m
            self.state.v[name] = v

            m_hat = m / correction1
            v_hat = v / correction2
            updates[name] = params.tensors[name].data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

        return params.replace(updates)
