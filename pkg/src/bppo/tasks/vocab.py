from typing import List, Sequence
from bppo.base.exceptions import TaskException

VOCAB_SIZE = 32

# Token ids are fixed: digits take ids 0-9 so that a digit's id is its value
DIGITS = list(range(10))
PLUS = 10
EQUALS = 11
SEP = 12
EVEN = 13
ODD = 14
BOS = 15
EOS = 16
PAD = 17

SYMBOLS = {
    PLUS: "+",
    EQUALS: "=",
    SEP: "|",
    EVEN: "E",
    ODD: "O",
    BOS: "<bos>",
    EOS: "<eos>",
    PAD: "<pad>",
}

# Remaining ids up to VOCAB_SIZE are unused padding entries
TOKENS: List[str] = [
    str(i) if i < 10 else SYMBOLS.get(i, f"<unused{i}>")
    for i in range(VOCAB_SIZE)
]

_LOOKUP = {s: i for i, s in enumerate(TOKENS)}


def decode(tokens: Sequence[int]) -> str:
    """Render token ids as a readable string."""

    return " ".join(
        TOKENS[t] if 0 <= t < VOCAB_SIZE else f"<oov{t}>"
        for t in tokens
    )


def encode(text: str) -> List[int]:
    """Parse a space-separated string of token symbols into ids."""

    ids = []
    for symbol in text.split():
        if symbol not in _LOOKUP:
            raise TaskException(f"Unknown token symbol: {symbol}")
        ids.append(_LOOKUP[symbol])
    return ids


def digits_of(value: int) -> List[int]:
    """Decimal digits of a non-negative integer as token ids."""

    return [int(c) for c in str(int(value))]
