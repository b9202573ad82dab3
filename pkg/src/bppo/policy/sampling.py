from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union
import numpy as np
from bppo.base.exceptions import ConfigurationException
from bppo.numerics import Tensor, ops
from bppo.policy.model import forward_logits
from bppo.policy.params import PolicyParams
from bppo.tasks import vocab


@dataclass(frozen=True)
class Trajectory:
    """
    One sampled response.

    Attributes:
        prompt_tokens:      The query q.
        response_tokens:    The response o_i (ends with EOS unless truncated).
        behavior_logprobs:  log π_θ_old of each response token, untempered.
        reward:             Verifier reward (None until assigned).
    """

    prompt_tokens: Tuple[int, ...]
    response_tokens: Tuple[int, ...]
    behavior_logprobs: Tuple[float, ...]
    reward: Optional[float] = field(default=None)

    def __post_init__(self):
        if len(self.behavior_logprobs) != len(self.response_tokens):
            raise ConfigurationException("behavior_logprobs must match response length")
        if any(lp > 0 for lp in self.behavior_logprobs):
            raise ConfigurationException("behavior_logprobs must be <= 0")

    def __len__(self) -> int:
        return len(self.response_tokens)

    def with_reward(self, reward: float) -> "Trajectory":
        return replace(self, reward=float(reward))

    def to_dict(self) -> dict:
        return dict(
            prompt_tokens=list(self.prompt_tokens),
            response_tokens=list(self.response_tokens),
            behavior_logprobs=list(self.behavior_logprobs),
            reward=self.reward,
        )


def _draw_token(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """
    Draw one token from softmax(logits / temperature).
    Temperature 0 is argmax with the lowest index winning ties.
    """

    if temperature == 0:
        return int(np.argmax(logits))

    probs = ops.softmax(Tensor(logits / temperature)).data
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def sample_response(
    params: PolicyParams,
    prompt: Sequence[int],
    temperature: float,
    max_len: int,
    seed: Union[int, Sequence[int], np.random.SeedSequence, np.random.Generator],
    exit_depth: Optional[int] = None,
    response_prefix: Sequence[int] = (),
    eos_id: int = vocab.EOS
) -> Trajectory:
    """
    Sample a response autoregressively from the policy.

    Stops at EOS, at max_len response tokens, or when the context is full.
    Tokens in response_prefix are forced (not sampled) but their
    log-probabilities are still recorded. The recorded log-probabilities
    are those of the untempered policy, whatever the sampling temperature.
    """

    if temperature < 0:
        raise ConfigurationException("temperature must be >= 0")

    config = params.config
    if exit_depth is None:
        exit_depth = config.deepest

    if len(prompt) == 0 or len(prompt) > config.context_len:
        msg = f"Prompt length {len(prompt)} leaves no room in context_len {config.context_len}"
        raise ConfigurationException(msg)

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    # Predicting response token t reads prompt + t response tokens
    limit = min(max_len, config.context_len - len(prompt) + 1)

    tokens = list(prompt)
    response, logprobs = [], []

    while len(response) < limit:

        logits = forward_logits(params, tokens, exit_depth).data[-1]
        logp = ops.log_softmax(Tensor(logits)).data

        if len(response) < len(response_prefix):
            token = int(response_prefix[len(response)])
        else:
            token = _draw_token(logits, temperature, rng)

        response.append(token)
        logprobs.append(min(float(logp[token]), 0.0))
        tokens.append(token)

        if token == eos_id:
            break

    return Trajectory(tuple(prompt), tuple(response), tuple(logprobs))


def greedy_response(
    params: PolicyParams,
    prompt: Sequence[int],
    max_len: int,
    exit_depth: Optional[int] = None
) -> Tuple[int, ...]:
    """Greedy decoding (temperature 0)."""

    return sample_response(
        params, prompt, 0.0, max_len, seed=0, exit_depth=exit_depth
    ).response_tokens
