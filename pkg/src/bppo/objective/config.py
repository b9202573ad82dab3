from dataclasses import dataclass, field
from enum import Enum
import math
from typing import Mapping, Union
from bppo.base.exceptions import ConfigurationException

# Guards ceil(f * len) against products like 0.3 * 10 = 3.0000000000000004
_CEIL_SLACK = 1e-9


@dataclass(frozen=True)
class PrefixSpec:
    """
    How many leading response tokens receive gradient.

    kind "abs": the first `value` tokens (value >= 1).
    kind "frac": the first ceil(value * |o_i|) tokens (0 < value <= 1).
    """

    kind: str = "frac"
    value: float = 0.5

    def __post_init__(self):

        if self.kind == "abs":
            if int(self.value) != self.value or self.value < 1:
                raise ConfigurationException(f"Absolute prefix must be an integer >= 1, not {self.value}")
            object.__setattr__(self, "value", int(self.value))

        elif self.kind == "frac":
            if not 0 < float(self.value) <= 1:
                raise ConfigurationException(f"Fraction prefix must be in (0, 1], not {self.value}")
            object.__setattr__(self, "value", float(self.value))

        else:
            raise ConfigurationException(f"Unknown prefix kind: {self.kind}")

    @classmethod
    def absolute(cls, n: int) -> "PrefixSpec":
        return cls("abs", n)

    @classmethod
    def fraction(cls, f: float) -> "PrefixSpec":
        return cls("frac", f)

    @classmethod
    def parse(cls, text: Union[str, "PrefixSpec"]) -> "PrefixSpec":
        """Parse 'frac:0.5' or 'abs:4'."""

        if isinstance(text, PrefixSpec):
            return text

        try:
            kind, value = str(text).split(":")
            return cls(kind.strip(), float(value))
        except ValueError:
            raise ConfigurationException(f"Could not parse prefix spec '{text}' (use frac:F or abs:N)")

    def n_tokens(self, response_len: int) -> int:
        """Number of gradient tokens for a response of this length."""

        if self.kind == "abs":
            return min(self.value, response_len)

        return min(math.ceil(self.value * response_len - _CEIL_SLACK), response_len)

    def __str__(self) -> str:
        return f"{self.kind}:{self.value}"


class SelectionStrategy(str, Enum):
    RANDOM = "Random"
    EXTREME_ADVANTAGE = "ExtremeAdvantage"
    MEDIAN_LENGTH = "MedianLength"


class KLMode(str, Enum):
    EXACT = "Exact"
    K3 = "K3Estimator"


@dataclass(frozen=True)
class ObjectiveConfig:
    """
    Attributes:
        epsilon:            Clip coefficient ε, 0 < ε < 1.
        beta:               KL weight β >= 0.
        prefix:             Prefix spec for the BPPO masks.
        selection:          How the representative responses are picked.
        kl_mode:            Exact vocabulary sum or the K3 estimator.
        log_ratio_clamp:    Bound on |log ρ| before exponentiation.
    """

    epsilon: float = 0.2
    beta: float = 0.01
    prefix: PrefixSpec = field(default_factory=PrefixSpec)
    selection: SelectionStrategy = SelectionStrategy.RANDOM
    kl_mode: KLMode = KLMode.EXACT
    log_ratio_clamp: float = 20.0

    def __post_init__(self):

        if not 0 < self.epsilon < 1:
            raise ConfigurationException(f"objective.epsilon must be in (0, 1), not {self.epsilon}")
        if self.beta < 0:
            raise ConfigurationException(f"objective.beta must be >= 0, not {self.beta}")
        if self.log_ratio_clamp <= 0:
            raise ConfigurationException("objective.log_ratio_clamp must be positive")

        object.__setattr__(self, "prefix", PrefixSpec.parse(self.prefix))

        try:
            object.__setattr__(self, "selection", SelectionStrategy(self.selection))
        except ValueError:
            raise ConfigurationException(f"Unknown selection strategy: {self.selection}")

        try:
            object.__setattr__(self, "kl_mode", KLMode(self.kl_mode))
        except ValueError:
            raise ConfigurationException(f"Unknown KL mode: {self.kl_mode}")

    def to_dict(self) -> dict:
        return dict(
            epsilon=self.epsilon,
            beta=self.beta,
            prefix=str(self.prefix),
            selection=self.selection.value,
            kl_mode=self.kl_mode.value,
            log_ratio_clamp=self.log_ratio_clamp,
        )

    @classmethod
    def from_dict(cls, values: Mapping) -> "ObjectiveConfig":
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationException(f"Invalid objective config ({str(e)})")
