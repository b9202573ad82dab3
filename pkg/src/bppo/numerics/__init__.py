from bppo.numerics.tape import Tape, Tensor, backward, current_tape # noqa
from bppo.numerics import ops # noqa
