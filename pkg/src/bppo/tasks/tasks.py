from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union
import numpy as np
from bppo.base.exceptions import TaskException
from bppo.tasks import vocab

MAX_MODULUS = 100
MAX_REVERSE_LENGTH = 12
MAX_PARITY_LENGTH = 16


class TaskKind(str, Enum):
    MOD_ADD = "ModAdd"
    REVERSE = "Reverse"
    PLAN_PARITY = "PlanParity"


@dataclass(frozen=True)
class TaskSpec:
    """
    Task kind and difficulty.

    Attributes:
        kind:       ModAdd, Reverse or PlanParity
        modulus:    ModAdd modulus m (2 <= m <= 100)
        length:     Reverse string length (<= 12) or PlanParity bit count (<= 16)
    """

    kind: TaskKind = TaskKind.MOD_ADD
    modulus: int = 10
    length: int = 4

    def __post_init__(self):

        try:
            object.__setattr__(self, "kind", TaskKind(self.kind))
        except ValueError:
            raise TaskException(f"Unknown task kind: {self.kind}")

        if self.kind == TaskKind.MOD_ADD:
            if not 2 <= self.modulus <= MAX_MODULUS:
                msg = f"ModAdd modulus must be in [2, {MAX_MODULUS}], not {self.modulus}"
                raise TaskException(msg)

        elif self.kind == TaskKind.REVERSE:
            if not 1 <= self.length <= MAX_REVERSE_LENGTH:
                msg = f"Reverse length must be in [1, {MAX_REVERSE_LENGTH}], not {self.length}"
                raise TaskException(msg)

        else:
            if not 1 <= self.length <= MAX_PARITY_LENGTH:
                msg = f"PlanParity length must be in [1, {MAX_PARITY_LENGTH}], not {self.length}"
                raise TaskException(msg)

    def to_dict(self) -> dict:
        return dict(kind=self.kind.value, modulus=self.modulus, length=self.length)


@dataclass(frozen=True)
class TaskInstance:
    """A prompt and one correct response (used for warmup supervision)."""

    prompt_tokens: Tuple[int, ...]
    oracle_response: Tuple[int, ...] = field(default=())


def _answer(kind: TaskKind, prompt_tokens: Sequence[int], modulus: int) -> Optional[List[int]]:
    """
    Recompute the canonical response from a prompt.
    Returns None when the prompt is not a well-formed prompt of this kind.
    """

    tokens = list(prompt_tokens)
    if len(tokens) < 2 or tokens[0] != vocab.BOS:
        return None

    body = tokens[1:]

    if kind == TaskKind.MOD_ADD:

        if body.count(vocab.PLUS) != 1 or body[-1:] != [vocab.EQUALS]:
            return None

        split = body.index(vocab.PLUS)
        a_digits, b_digits = body[:split], body[split + 1:-1]

        if not a_digits or not b_digits:
            return None
        if not all(t in vocab.DIGITS for t in a_digits + b_digits):
            return None

        a = int("".join(str(t) for t in a_digits))
        b = int("".join(str(t) for t in b_digits))
        return vocab.digits_of((a + b) % modulus) + [vocab.EOS]

    if body[-1:] != [vocab.SEP]:
        return None
    s = body[:-1]

    if kind == TaskKind.REVERSE:

        if not s or not all(t in vocab.DIGITS for t in s):
            return None
        return s[::-1] + [vocab.EOS]

    if not s or not all(t in (0, 1) for t in s):
        return None

    ones = sum(s)
    plan = vocab.EVEN if ones % 2 == 0 else vocab.ODD
    return [plan] + vocab.digits_of(ones) + [vocab.EOS]


def gen_instance(
    spec: TaskSpec,
    seed: Union[int, Sequence[int], np.random.SeedSequence]
) -> TaskInstance:
    """Generate one task instance, deterministic in the seed."""

    rng = np.random.default_rng(seed)

    if spec.kind == TaskKind.MOD_ADD:
        a = int(rng.integers(0, spec.modulus))
        b = int(rng.integers(0, spec.modulus))
        prompt = (
            [vocab.BOS] + vocab.digits_of(a) + [vocab.PLUS] +
            vocab.digits_of(b) + [vocab.EQUALS]
        )

    elif spec.kind == TaskKind.REVERSE:
        s = [int(d) for d in rng.integers(0, 10, size=spec.length)]
        prompt = [vocab.BOS] + s + [vocab.SEP]

    else:
        bits = [int(d) for d in rng.integers(0, 2, size=spec.length)]
        prompt = [vocab.BOS] + bits + [vocab.SEP]

    oracle = _answer(spec.kind, prompt, spec.modulus)
    return TaskInstance(tuple(prompt), tuple(oracle))


def gen_instances(spec: TaskSpec, n: int, seed: int, stream: int = 0) -> List[TaskInstance]:
    """Generate n instances, instance i seeded from (seed, stream, i)."""

    return [
        gen_instance(spec, np.random.SeedSequence([int(seed), int(stream), i]))
        for i in range(n)
    ]


def verify(
    spec: Union[TaskSpec, TaskKind, str],
    prompt_tokens: Sequence[int],
    response_tokens: Sequence[int]
) -> float:
    """
    Return 1.0 iff the response exactly equals the canonical answer,
    including EOS (and, for PlanParity, the plan token); 0.0 otherwise.
    """

    if isinstance(spec, TaskSpec):
        kind, modulus = spec.kind, spec.modulus
    else:
        kind, modulus = TaskKind(spec), 10

    expected = _answer(kind, prompt_tokens, modulus)
    if expected is None:
        return 0.0

    return 1.0 if list(response_tokens) == expected else 0.0
