from dataclasses import dataclass
import threading
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import numpy as np
from bppo.base.exceptions import NumericsException, TapeException


class Tensor:
    """
    Immutable dense array of 64-bit floats.

    Attributes:
        data (np.ndarray):  Read-only float64 values in row-major order.
        name (str):         Optional name, set for parameters.
    """

    __slots__ = ("data", "name", "_tape_id")

    def __init__(self, data, name: Optional[str] = None) -> None:

        arr = np.array(data, dtype=np.float64, order="C")

        if not np.all(np.isfinite(arr)):
            msg = f"Tensor {name or ''} contains non-finite values"
            raise NumericsException(msg)

        arr.setflags(write=False)
        self.data = arr
        self.name = name

        # Set when the tensor is produced by a recorded operation
        self._tape_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsException(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f"name={self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape})"


# Adjoint rule: maps the output gradient to one gradient (or None) per input
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    """One recorded primitive: its inputs, output and adjoint rule."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


_local = threading.local()


def current_tape() -> Optional["Tape"]:
    """Return the innermost tape recording on this thread, if any."""

    stack = getattr(_local, "stack", None)
    if not stack:
        return None
    return stack[-1]


class Tape:
    """
    Ordered record of the primitives applied to watched tensors.

    Usage:

        with Tape() as tape:
            tape.watch(params.tensors)
            loss = some_loss(params)
        grads = backward(tape, loss)

    Each thread keeps its own tape stack, so independent tapes may be
    recorded on independent threads.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self.watched: Dict[str, Tensor] = {}
        self._watched_ids: Dict[int, str] = {}
        self._live_ids = set()

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def watch(self, tensors: Mapping[str, Tensor]) -> None:
        """Mark tensors as parameters whose gradients backward() returns."""

        for name, tensor in tensors.items():
            self.watched[name] = tensor
            self._watched_ids[id(tensor)] = name
            self._live_ids.add(id(tensor))

    def tracks(self, tensor: Tensor) -> bool:
        """True if the tensor is watched or was produced on this tape."""

        return id(tensor) in self._live_ids

    def record(
        self,
        op: str,
        inputs: Tuple[Tensor, ...],
        output: Tensor,
        vjp: VJP
    ) -> None:
        output._tape_id = id(self)
        self._live_ids.add(id(output))
        self.entries.append(TapeEntry(op, inputs, output, vjp))

    def __len__(self) -> int:
        return len(self.entries)


def backward(
    tape: Tape,
    root: Tensor,
    params: Union[Mapping[str, Tensor], None] = None
) -> Dict[str, np.ndarray]:
    """
    Replay the tape in reverse and return d(root)/d(p) for every watched p.

    Parameters with no path to the root receive exact zeros.
    Gradients are accumulated in the fixed reverse order of the tape,
    so identical tapes yield bit-identical gradients.
    """

    if root.size != 1:
        raise TapeException(f"backward() needs a scalar root, not {root.shape}")

    if params is None:
        params = tape.watched

    # A root produced on a different tape cannot be replayed here
    if root._tape_id is not None and root._tape_id != id(tape):
        raise TapeException("Root was recorded on a different tape")

    grads: Dict[int, np.ndarray] = {}

    # A root that is not on the tape (a constant) leaves every gradient at zero
    if tape.tracks(root):
        grads[id(root)] = np.ones(root.shape, dtype=np.float64)

    for entry in reversed(tape.entries):

        g_out = grads.pop(id(entry.output), None)
        if g_out is None:
            continue

        g_inputs = entry.vjp(g_out)

        for tensor, g_in in zip(entry.inputs, g_inputs):

            if g_in is None or not tape.tracks(tensor):
                continue

            if tensor._tape_id is not None and tensor._tape_id != id(tape):
                msg = f"Dangling reference in {entry.op}: input from another tape"
                raise TapeException(msg)

            if id(tensor) in grads:
                grads[id(tensor)] = grads[id(tensor)] + g_in
            else:
                grads[id(tensor)] = np.array(g_in, dtype=np.float64)

    return {
        name: grads.get(id(tensor), np.zeros(tensor.shape, dtype=np.float64))
        for name, tensor in params.items()
    }
