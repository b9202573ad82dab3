"""
Finite-difference validation of the analytic gradients.

A Scenario fixes everything a loss depends on except the parameter
tensors, so the loss can be re-evaluated at perturbed coordinates.
"""
from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple
import numpy as np
from bppo.base.exceptions import ConfigurationException, NumericsException
from bppo.base.helpers import derive_rng
from bppo.numerics import Tape, Tensor, backward, ops
from bppo.objective import (
    ObjectiveConfig,
    PrefixSpec,
    ResponseSelection,
    select_binary,
    select_full_group,
    surrogate_loss
)
from bppo.policy import PolicyConfig, PolicyParams, sample_response
from bppo.rollout import Group, make_group
from bppo.tasks import TaskInstance, TaskSpec, gen_instance, gen_instances
from bppo.trainer.warmup import cross_entropy

LOSS_KINDS = ("quadratic", "warmup", "grpo", "bppo")

# Stream ids for the draws made while building and checking a scenario
SCENARIO_STREAM = 6
GRADCHECK_STREAM = 7

# Weights are drawn at this scale so that most coordinates carry signal
SCENARIO_INIT_SCALE = 0.2

# Distance of θ_old from π_ref, and of θ from θ_old
SCENARIO_PERTURBATION = 1e-3

DEFAULT_STEP = 1e-5
DEFAULT_THRESHOLD = 1e-6


@dataclass
class Scenario:
    """
    A fully seeded loss.

    Attributes:
        loss_kind:  quadratic, warmup, grpo or bppo.
        tensors:    The parameters the gradient is taken against.
        loss_fn:    Maps a tensor dict to the scalar loss.
        group:      The rollout group (grpo / bppo).
        selection:  The responses receiving gradient (grpo / bppo).
        instances:  Supervised instances (warmup).
    """

    loss_kind: str
    tensors: Dict[str, Tensor]
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor]
    group: Optional[Group] = None
    selection: Optional[ResponseSelection] = None
    instances: List[TaskInstance] = field(default_factory=list)

    def loss(self, tensors: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        return self.loss_fn(self.tensors if tensors is None else tensors)

    def gradients(self) -> Dict[str, np.ndarray]:
        """Analytic gradient of the loss at the scenario's tensors."""

        with Tape() as tape:
            tape.watch(self.tensors)
            loss = self.loss()

        return backward(tape, loss)


def _perturb(params: PolicyParams, scale: float, seed: int, stream: int) -> PolicyParams:
    rng = derive_rng(seed, SCENARIO_STREAM, stream)
    return params.replace({
        name: t.data + rng.normal(0.0, scale, size=t.shape)
        for name, t in params.tensors.items()
    })


def _quadratic_scenario(seed: int) -> Scenario:

    rng = derive_rng(seed, SCENARIO_STREAM)
    values = rng.uniform(0.5, 1.5, size=4) * rng.choice([-1.0, 1.0], size=4)

    def loss_fn(tensors):
        theta = tensors["theta"]
        return ops.reduce_sum(ops.mul(theta, theta))

    return Scenario("quadratic", {"theta": Tensor(values, name="theta")}, loss_fn)


def build_scenario(
    loss_kind: str,
    seed: int = 0,
    policy_config: Optional[PolicyConfig] = None,
    spec: Optional[TaskSpec] = None,
    cfg: Optional[ObjectiveConfig] = None,
    group_size: int = 8,
    max_len: int = 6
) -> Scenario:
    """
    Build the fixed scenario of one loss.

    Policy scenarios draw π_ref at a larger init scale, place θ_old and θ
    a small random step apart so that ρ differs from 1 but stays inside
    the clip band, and sample a group from θ_old whose rewards are forced
    to alternate 1, 0, 1, 0, ... so both strata are populated.
    """

    loss_kind = loss_kind.lower()
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationException(f"loss must be one of {LOSS_KINDS}, not {loss_kind}")

    if loss_kind == "quadratic":
        return _quadratic_scenario(seed)

    if policy_config is None:
        policy_config = PolicyConfig(init_scale=SCENARIO_INIT_SCALE)
    if spec is None:
        spec = TaskSpec()
    if cfg is None:
        cfg = ObjectiveConfig()

    config = policy_config
    exit_depth = config.deepest

    params_ref = PolicyParams.init(config, seed)
    params_old = _perturb(params_ref, SCENARIO_PERTURBATION, seed, 1)
    params = _perturb(params_old, SCENARIO_PERTURBATION, seed, 2)

    if loss_kind == "warmup":

        instances = gen_instances(spec, 4, seed, stream=SCENARIO_STREAM)

        def warmup_fn(tensors):
            return cross_entropy(PolicyParams(config, dict(tensors)), instances, exit_depth)

        return Scenario("warmup", dict(params.tensors), warmup_fn, instances=instances)

    instance = gen_instance(spec, np.random.SeedSequence([seed, SCENARIO_STREAM, 3]))
    trajectories = [
        sample_response(
            params_old,
            instance.prompt_tokens,
            1.0,
            max_len,
            seed=np.random.SeedSequence([seed, SCENARIO_STREAM, 4, i]),
            exit_depth=exit_depth
        )
        for i in range(group_size)
    ]
    rewards = [1.0 if i % 2 == 0 else 0.0 for i in range(group_size)]
    group = make_group(0, instance.prompt_tokens, trajectories, rewards)

    if loss_kind == "grpo":
        selection = select_full_group(group, PrefixSpec.fraction(1.0))
    else:
        selection = select_binary(group, cfg.selection, seed, cfg.prefix)

    def surrogate_fn(tensors):
        theta = PolicyParams(config, dict(tensors))
        loss, _ = surrogate_loss(theta, group, selection, params_ref, cfg, exit_depth)
        return loss

    return Scenario(
        loss_kind,
        dict(params.tensors),
        surrogate_fn,
        group=group,
        selection=selection,
        instances=[instance]
    )


@dataclass
class GradCheckResult:
    """
    Outcome of a finite-difference check.

    Attributes:
        loss_kind:      Which loss was checked.
        coords:         (parameter name, flat index) of each checked coordinate.
        analytic:       Analytic gradient at each coordinate.
        numeric:        Central-difference estimate at each coordinate.
        rel_errors:     |a - b| / max(|a|, |b|, 1e-8) per coordinate.
    """

    loss_kind: str
    coords: List[Tuple[str, int]]
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_errors)) if len(self.rel_errors) else 0.0

    @property
    def worst(self) -> Optional[Tuple[str, int]]:
        if len(self.rel_errors) == 0:
            return None
        return self.coords[int(np.argmax(self.rel_errors))]

    def passed(self, threshold: float = DEFAULT_THRESHOLD) -> bool:
        return self.max_rel_error < threshold


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _shifted(tensors: Mapping[str, Tensor], name: str, index: int, delta: float) -> Dict[str, Tensor]:
    arr = tensors[name].data.copy()
    arr.flat[index] += delta
    shifted = dict(tensors)
    shifted[name] = Tensor(arr, name=name)
    return shifted


def numeric_derivative(
    scenario: Scenario,
    name: str,
    index: int,
    step: float = DEFAULT_STEP
) -> float:
    """Central difference (f(x + h) - f(x - h)) / 2h; two loss evaluations."""

    hi = scenario.loss(_shifted(scenario.tensors, name, index, step)).item()
    lo = scenario.loss(_shifted(scenario.tensors, name, index, -step)).item()
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NumericsException(f"Non-finite loss perturbing {name}[{index}]")

    return (hi - lo) / (2.0 * step)


def sample_coordinates(
    tensors: Mapping[str, Tensor],
    n_coords: int,
    seed: int
) -> List[Tuple[str, int]]:
    """n_coords distinct coordinates drawn uniformly over all parameters, in parameter order."""

    names = list(tensors.keys())
    sizes = np.array([tensors[name].size for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    rng = derive_rng(seed, GRADCHECK_STREAM)
    flat = np.sort(rng.choice(total, size=min(n_coords, total), replace=False))

    coords = []
    for k in flat:
        ix = int(np.searchsorted(offsets, k, side="right")) - 1
        coords.append((names[ix], int(k - offsets[ix])))

    return coords


def check_coordinates(
    scenario: Scenario,
    coords: Sequence[Tuple[str, int]],
    step: float = DEFAULT_STEP
) -> GradCheckResult:
    """Compare analytic and numeric derivatives at the given coordinates."""

    grads = scenario.gradients()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsException(f"Non-finite analytic gradient for {name}")

    analytic = np.array([grads[name].flat[ix] for name, ix in coords], dtype=np.float64)
    numeric = np.array([
        numeric_derivative(scenario, name, ix, step)
        for name, ix in coords
    ], dtype=np.float64)

    return GradCheckResult(
        scenario.loss_kind,
        list(coords),
        analytic,
        numeric,
        relative_error(analytic, numeric)
    )


def finite_diff_check(
    loss_kind: str = "bppo",
    scenario: Optional[Scenario] = None,
    n_coords: int = 200,
    step: float = DEFAULT_STEP,
    seed: int = 0
) -> GradCheckResult:
    """
    Check the analytic gradient of a loss against central differences at
    n_coords randomly sampled parameter coordinates. The scenario is
    built from (loss_kind, seed) unless one is given.
    """

    if n_coords < 1:
        raise ConfigurationException("n_coords must be >= 1")
    if step <= 0:
        raise ConfigurationException("step must be positive")

    if scenario is None:
        scenario = build_scenario(loss_kind, seed)

    coords = sample_coordinates(scenario.tensors, n_coords, seed)
    result = check_coordinates(scenario, coords, step)

    logging.info(
        f"fdcheck {scenario.loss_kind}: {len(coords)} coordinates, "
        f"max relative error {result.max_rel_error:.3e} at {result.worst}"
    )

    return result


def masked_coordinates(scenario: Scenario) -> List[Tuple[str, int]]:
    """
    Coordinates reachable only through masked-out response tokens:
    position embeddings past the last position fed to the loss, and
    token embedding rows of tokens never fed to it.
    """

    if scenario.group is None or scenario.selection is None:
        raise ConfigurationException("Masked coordinates need a group scenario")

    fed_len = 0
    fed_tokens = set()

    for i, mask in zip(scenario.selection.indices, scenario.selection.masks):
        traj = scenario.group.trajectories[i]
        n_pos = int(np.flatnonzero(mask).max()) + 1
        fed = list(traj.prompt_tokens) + list(traj.response_tokens[:n_pos - 1])
        fed_len = max(fed_len, len(fed))
        fed_tokens.update(fed)

    pos_emb = scenario.tensors["pos_emb"]
    tok_emb = scenario.tensors["tok_emb"]
    d_model = pos_emb.shape[1]

    coords = [
        ("tok_emb", row * d_model + col)
        for row in range(tok_emb.shape[0]) if row not in fed_tokens
        for col in range(d_model)
    ]
    coords += [
        ("pos_emb", row * d_model + col)
        for row in range(fed_len, pos_emb.shape[0])
        for col in range(d_model)
    ]

    return coords


@dataclass
class MaskedCheckResult:
    """Largest analytic and numeric derivative over masked-out coordinates."""

    n_coords: int
    max_abs_analytic: float
    max_abs_numeric: float

    def passed(self, threshold: float = 1e-9) -> bool:
        return self.max_abs_analytic == 0.0 and self.max_abs_numeric < threshold


def masked_coordinate_check(
    scenario: Scenario,
    n_coords: int = 50,
    step: float = DEFAULT_STEP,
    seed: int = 0
) -> MaskedCheckResult:
    """
    Check that coordinates reachable only through masked-out tokens have
    an analytic gradient of exactly 0 and a vanishing finite difference.
    The analytic check covers every such coordinate; the numeric check a
    seeded sample of n_coords of them.
    """

    coords = masked_coordinates(scenario)
    if not coords:
        return MaskedCheckResult(0, 0.0, 0.0)

    grads = scenario.gradients()
    analytic = np.array([grads[name].flat[ix] for name, ix in coords])

    rng = derive_rng(seed, GRADCHECK_STREAM, 1)
    sample = sorted(rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False))
    numeric = np.array([
        numeric_derivative(scenario, coords[k][0], coords[k][1], step)
        for k in sample
    ])

    return MaskedCheckResult(
        len(coords),
        float(np.max(np.abs(analytic))),
        float(np.max(np.abs(numeric)))
    )
