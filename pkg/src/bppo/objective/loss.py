"""
Clipped, importance-weighted surrogate with KL regularization.

For a selection S of responses from one group, with prefix masks m:

    J = (1/|S|) sum_{i in S} (1 / sum_t m_it) sum_t m_it [
            min(ρ_it Â_i, clip(ρ_it, 1-ε, 1+ε) Â_i) - β KL_it
        ]

and the loss is -J. BPPO uses a binary pair (|S| = 2) with prefix masks;
GRPO uses the whole group with all-ones masks.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
from bppo.numerics import Tape, Tensor, backward, ops
from bppo.objective.config import KLMode, ObjectiveConfig, PrefixSpec
from bppo.objective.selection import (
    GroupSkipped,
    ResponseSelection,
    select_binary,
    select_full_group
)
from bppo.policy import PolicyParams, forward_logprobs
from bppo.rollout import Group


@dataclass
class LossStats:
    """
    Diagnostics of one loss evaluation.

    Attributes:
        loss:               Value of -J.
        ratio_mean:         Mean of ρ over masked tokens.
        ratio_min:          Minimum of ρ over masked tokens.
        ratio_max:          Maximum of ρ over masked tokens.
        clip_fraction:      Share of masked tokens taking the clipped branch.
        kl:                 KL value entering J (before β).
        grad_token_count:   Total of the masks of the updated responses.
        log_ratio_clamped:  True if some |log ρ| hit the clamp.
    """

    loss: float = 0.0
    ratio_mean: float = 1.0
    ratio_min: float = 1.0
    ratio_max: float = 1.0
    clip_fraction: float = 0.0
    kl: float = 0.0
    grad_token_count: int = 0
    log_ratio_clamped: bool = False
    n_clipped: int = field(default=0, repr=False)

    def to_dict(self) -> dict:
        return dict(
            loss=self.loss,
            ratio_mean=self.ratio_mean,
            ratio_min=self.ratio_min,
            ratio_max=self.ratio_max,
            clip_fraction=self.clip_fraction,
            kl=self.kl,
            grad_token_count=self.grad_token_count,
            log_ratio_clamped=self.log_ratio_clamped,
        )


def _response_logprobs(
    params: PolicyParams,
    prompt: Sequence[int],
    response: Sequence[int],
    n_positions: int,
    exit_depth: Optional[int]
) -> Tensor:
    """
    Log-probability rows [n_positions x vocab] predicting the first
    n_positions response tokens. Tokens after that are never fed in.
    """

    tokens = list(prompt) + list(response[:n_positions - 1])
    logp = forward_logprobs(params, tokens, exit_depth)
    return ops.slice_rows(logp, len(prompt) - 1, len(prompt) - 1 + n_positions)


def _kl_terms(
    logp_rows: Tensor,
    ref_rows: np.ndarray,
    targets: Sequence[int],
    mode: KLMode
) -> Tensor:
    """
    Per-position KL(π_θ || π_ref) estimates.

    Exact: sum_v π_θ(v) (log π_θ(v) - log π_ref(v)).
    K3: exp(log π_ref - log π_θ) - (log π_ref - log π_θ) - 1 at the realized token.
    """

    if mode == KLMode.EXACT:
        diff = ops.sub(logp_rows, ops.constant(ref_rows))
        return ops.reduce_sum(ops.mul(ops.exp(logp_rows), diff), axis=-1)

    rows = np.arange(len(targets))
    lp = ops.gather(logp_rows, targets)
    d = ops.sub(ops.constant(ref_rows[rows, targets]), lp)
    return ops.sub(ops.sub(ops.exp(d), d), ops.constant(np.ones(len(targets))))


def token_kl(
    params_theta: PolicyParams,
    params_ref: PolicyParams,
    context: Sequence[int],
    mode: Union[KLMode, str] = KLMode.EXACT,
    next_token: Optional[int] = None,
    exit_depth: Optional[int] = None
) -> float:
    """
    KL(π_θ || π_ref) of the next-token distributions after a context.
    K3 mode evaluates the estimator at next_token.
    """

    mode = KLMode(mode)
    if mode == KLMode.K3 and next_token is None:
        raise ValueError("K3 estimator needs the realized next_token")

    theta_row = forward_logprobs(params_theta, context, exit_depth).data[-1:]
    ref_row = forward_logprobs(params_ref, context, exit_depth).data[-1:]

    targets = [next_token if next_token is not None else 0]
    return float(_kl_terms(Tensor(theta_row), ref_row, targets, mode).data[0])


def surrogate_loss(
    params_theta: PolicyParams,
    group: Group,
    selection: ResponseSelection,
    params_ref: PolicyParams,
    cfg: ObjectiveConfig,
    exit_depth: Optional[int] = None
) -> Tuple[Tensor, LossStats]:
    """
    -J over the selected responses. Records onto the active tape (if any);
    gradients flow only through π_θ.
    """

    eps = cfg.epsilon
    clamp = cfg.log_ratio_clamp

    total: Optional[Tensor] = None
    ratios: List[np.ndarray] = []
    n_clipped = 0
    kl_value = 0.0
    clamped = False

    for i, mask in zip(selection.indices, selection.masks):

        traj = group.trajectories[i]
        adv = group.advantages[i]

        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (len(traj),) or mask.sum() < 1:
            raise ValueError(f"Mask for response {i} does not fit its length")

        # Positions after the last unmasked token cannot affect the loss
        n_pos = int(np.flatnonzero(mask).max()) + 1
        m = mask[:n_pos]
        targets = list(traj.response_tokens[:n_pos])
        behavior = np.asarray(traj.behavior_logprobs[:n_pos], dtype=np.float64)

        logp_rows = _response_logprobs(
            params_theta, traj.prompt_tokens, traj.response_tokens, n_pos, exit_depth
        )
        logp = ops.gather(logp_rows, targets)

        log_ratio = ops.sub(logp, ops.constant(behavior))
        if np.any(np.abs(log_ratio.data) > clamp):
            clamped = True
            logging.debug(f"Clamped log-ratio for response {i} of group {group.prompt_index}")
        ratio = ops.exp(ops.clip(log_ratio, -clamp, clamp))

        unclipped = ops.scale(ratio, adv)
        clipped = ops.scale(ops.clip(ratio, 1.0 - eps, 1.0 + eps), adv)
        per_token = ops.minimum(unclipped, clipped)

        active = m > 0
        ratios.append(ratio.data[active])
        n_clipped += int(np.sum((clipped.data < unclipped.data) & active))

        if cfg.beta > 0:
            ref_rows = _response_logprobs(
                params_ref, traj.prompt_tokens, traj.response_tokens, n_pos, exit_depth
            ).data
            kl = _kl_terms(logp_rows, ref_rows, targets, cfg.kl_mode)
            per_token = ops.sub(per_token, ops.scale(kl, cfg.beta))
            kl_value += float(np.sum(kl.data * m) / m.sum())

        term = ops.scale(
            ops.reduce_sum(ops.mul(per_token, ops.constant(m))),
            1.0 / m.sum()
        )
        total = term if total is None else ops.add(total, term)

    objective = ops.scale(total, selection.weight)
    loss = ops.scale(objective, -1.0)

    all_ratios = np.concatenate(ratios)
    stats = LossStats(
        loss=loss.item(),
        ratio_mean=float(np.mean(all_ratios)),
        ratio_min=float(np.min(all_ratios)),
        ratio_max=float(np.max(all_ratios)),
        clip_fraction=n_clipped / len(all_ratios),
        kl=kl_value * selection.weight,
        grad_token_count=selection.grad_token_count,
        log_ratio_clamped=clamped,
        n_clipped=n_clipped,
    )

    return loss, stats


def bppo_loss(
    params_theta: PolicyParams,
    group: Group,
    pair: ResponseSelection,
    params_ref: PolicyParams,
    cfg: ObjectiveConfig,
    exit_depth: Optional[int] = None
) -> Tuple[Tensor, LossStats]:
    """BPPO loss of one group over its selected pair and prefix masks."""

    return surrogate_loss(params_theta, group, pair, params_ref, cfg, exit_depth)


def grpo_loss(
    params_theta: PolicyParams,
    group: Group,
    params_ref: PolicyParams,
    cfg: ObjectiveConfig,
    exit_depth: Optional[int] = None
) -> Tuple[Tensor, LossStats]:
    """GRPO loss: every response of the group, full masks, weight 1/G."""

    selection = select_full_group(group, PrefixSpec.fraction(1.0))
    return surrogate_loss(params_theta, group, selection, params_ref, cfg, exit_depth)


@dataclass
class BatchResult:
    """Fixed-order reduction of the per-group losses and gradients."""

    loss: float
    grads: Dict[str, np.ndarray]
    stats: LossStats
    n_groups: int
    n_skipped: int
    skipped: List[GroupSkipped] = field(default_factory=list)

    @property
    def frac_skipped(self) -> float:
        return self.n_skipped / self.n_groups if self.n_groups else 0.0


def group_loss_and_gradients(
    params_theta: PolicyParams,
    group: Group,
    selection: ResponseSelection,
    params_ref: PolicyParams,
    cfg: ObjectiveConfig,
    exit_depth: Optional[int] = None
) -> Tuple[LossStats, Dict[str, np.ndarray]]:
    """
    Evaluate one group's loss on its own tape and return its gradients,
    keyed by the tensors of the trained family member only.
    """

    if exit_depth is None:
        exit_depth = params_theta.config.deepest
    member = params_theta.member(exit_depth)

    with Tape() as tape:
        tape.watch(member.tensors)
        loss, stats = surrogate_loss(
            params_theta, group, selection, params_ref, cfg, exit_depth
        )

    return stats, backward(tape, loss)


def batch_gradients(
    params_theta: PolicyParams,
    groups: Sequence[Group],
    algo: str,
    params_ref: PolicyParams,
    cfg: ObjectiveConfig,
    seed: int,
    exit_depth: Optional[int] = None,
    workers: int = 1
) -> BatchResult:
    """
    Mean loss and gradients over a batch of groups.

    Under BPPO each group is reduced to its binary pair and groups with an
    empty stratum are skipped. Groups are evaluated on independent tapes
    (optionally in parallel) and reduced in group order.
    """

    algo = algo.lower()
    selections: List[Tuple[Group, ResponseSelection]] = []
    skipped: List[GroupSkipped] = []

    for group in groups:

        if algo == "grpo":
            selections.append((group, select_full_group(group, PrefixSpec.fraction(1.0))))
            continue

        chosen = select_binary(group, cfg.selection, seed, cfg.prefix)
        if isinstance(chosen, GroupSkipped):
            logging.debug(f"Skipping group {group.prompt_index}: {chosen.reason}")
            skipped.append(chosen)
        else:
            selections.append((group, chosen))

    def _evaluate(item):
        group, selection = item
        return group_loss_and_gradients(
            params_theta, group, selection, params_ref, cfg, exit_depth
        )

    if workers > 1 and len(selections) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate, selections))
    else:
        results = [_evaluate(item) for item in selections]

    names = params_theta.names
    grads = {name: np.zeros(params_theta.tensors[name].shape) for name in names}

    if not results:
        return BatchResult(
            loss=0.0,
            grads=grads,
            stats=LossStats(),
            n_groups=len(groups),
            n_skipped=len(skipped),
            skipped=skipped
        )

    n = len(results)
    loss_total = 0.0
    for stats, group_grads in results:
        loss_total += stats.loss
        for name, g in group_grads.items():
            grads[name] = grads[name] + g

    grads = {name: g / n for name, g in grads.items()}

    n_tokens = sum(s.grad_token_count for s, _ in results)
    n_ratio_tokens = 0
    ratio_sum = 0.0
    for stats, _ in results:
        # grad_token_count equals the number of masked tokens entering the ratio stats
        ratio_sum += stats.ratio_mean * stats.grad_token_count
        n_ratio_tokens += stats.grad_token_count

    stats = LossStats(
        loss=loss_total / n,
        ratio_mean=ratio_sum / n_ratio_tokens,
        ratio_min=min(s.ratio_min for s, _ in results),
        ratio_max=max(s.ratio_max for s, _ in results),
        clip_fraction=sum(s.n_clipped for s, _ in results) / n_ratio_tokens,
        kl=sum(s.kl for s, _ in results) / n,
        grad_token_count=n_tokens,
        log_ratio_clamped=any(s.log_ratio_clamped for s, _ in results),
        n_clipped=sum(s.n_clipped for s, _ in results),
    )

    return BatchResult(
        loss=stats.loss,
        grads=grads,
        stats=stats,
        n_groups=len(groups),
        n_skipped=len(skipped),
        skipped=skipped
    )
