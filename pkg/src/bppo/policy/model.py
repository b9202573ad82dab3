import math
from typing import List, Optional, Sequence
import numpy as np
from bppo.base.exceptions import ConfigurationException
from bppo.numerics import Tensor, ops
from bppo.policy.params import PolicyParams
from bppo.tasks import vocab

# Large negative (but finite) score for attention to future positions and for PAD
MASKED_SCORE = -1e9


def _check_inputs(params: PolicyParams, tokens: Sequence[int], exit_depth: int) -> None:

    config = params.config

    if len(tokens) == 0:
        raise ConfigurationException("Cannot run the policy on an empty sequence")

    if len(tokens) > config.context_len:
        msg = f"Sequence of length {len(tokens)} overflows context_len {config.context_len}"
        raise ConfigurationException(msg)

    if exit_depth not in config.exit_depths:
        msg = f"Unknown exit depth {exit_depth} (available: {list(config.exit_depths)})"
        raise ConfigurationException(msg)

    if min(tokens) < 0 or max(tokens) >= config.vocab_size:
        raise ConfigurationException("Token id out of vocabulary")


def _attention(params: PolicyParams, layer: int, x: Tensor) -> Tensor:
    """Causal multi-head self-attention over a [T x d] input."""

    config = params.config
    p = f"blocks.{layer}"
    t_len = x.shape[0]
    dh = config.head_dim

    q = ops.matmul(x, params.tensors[f"{p}.wq"])
    k = ops.matmul(x, params.tensors[f"{p}.wk"])
    v = ops.matmul(x, params.tensors[f"{p}.wv"])

    # Position t may only attend to positions <= t
    future = np.triu(np.ones((t_len, t_len), dtype=bool), k=1)

    heads = []
    for h in range(config.n_heads):
        q_h = ops.slice_cols(q, h * dh, (h + 1) * dh)
        k_h = ops.slice_cols(k, h * dh, (h + 1) * dh)
        v_h = ops.slice_cols(v, h * dh, (h + 1) * dh)

        scores = ops.scale(ops.matmul(q_h, ops.transpose(k_h)), 1.0 / math.sqrt(dh))
        weights = ops.softmax(ops.masked_fill(scores, future, MASKED_SCORE))
        heads.append(ops.matmul(weights, v_h))

    merged = heads[0] if len(heads) == 1 else ops.concat_cols(heads)
    return ops.matmul(merged, params.tensors[f"{p}.wo"])


def _block(params: PolicyParams, layer: int, x: Tensor) -> Tensor:
    """Pre-norm decoder block: attention then GELU MLP, both residual."""

    p = f"blocks.{layer}"

    h = ops.rms_norm(x, params.tensors[f"{p}.attn_norm"])
    x = ops.add(x, _attention(params, layer, h))

    h = ops.rms_norm(x, params.tensors[f"{p}.mlp_norm"])
    h = ops.gelu(ops.matmul(h, params.tensors[f"{p}.w_in"]))
    x = ops.add(x, ops.matmul(h, params.tensors[f"{p}.w_out"]))

    return x


def hidden_states(
    params: PolicyParams,
    tokens: Sequence[int],
    depth: Optional[int] = None
) -> List[Tensor]:
    """
    Residual stream after each of the first `depth` blocks.
    Element k-1 is the state after block k.
    """

    config = params.config
    if depth is None:
        depth = config.deepest

    _check_inputs(params, tokens, config.deepest)
    if not 1 <= depth <= config.n_layers:
        raise ConfigurationException(f"depth must be in [1, {config.n_layers}]")

    x = ops.add(
        ops.embedding(params.tensors["tok_emb"], tokens),
        ops.slice_rows(params.tensors["pos_emb"], 0, len(tokens))
    )

    states = []
    for layer in range(depth):
        x = _block(params, layer, x)
        states.append(x)

    return states


def exit_head(params: PolicyParams, hidden: Tensor, exit_depth: int) -> Tensor:
    """Apply the exit norm and output head of one familial member."""

    h = ops.rms_norm(hidden, params.tensors[f"exits.{exit_depth}.norm"])
    logits = ops.matmul(h, params.tensors[f"exits.{exit_depth}.head"])

    # PAD is never emitted: its probability is exactly zero
    pad = np.zeros(logits.shape, dtype=bool)
    pad[:, vocab.PAD] = True
    return ops.masked_fill(logits, pad, MASKED_SCORE)


def forward_logits(
    params: PolicyParams,
    tokens: Sequence[int],
    exit_depth: Optional[int] = None
) -> Tensor:
    """
    Per-position logits [len x vocab_size] of the member exiting at
    exit_depth (default: the deepest member).
    """

    if exit_depth is None:
        exit_depth = params.config.deepest

    _check_inputs(params, tokens, exit_depth)

    states = hidden_states(params, tokens, depth=exit_depth)
    return exit_head(params, states[-1], exit_depth)


def forward_logprobs(
    params: PolicyParams,
    tokens: Sequence[int],
    exit_depth: Optional[int] = None
) -> Tensor:
    """Row log-softmax of forward_logits."""

    return ops.log_softmax(forward_logits(params, tokens, exit_depth))


def token_logprob(
    params: PolicyParams,
    prefix: Sequence[int],
    next_token: int,
    exit_depth: Optional[int] = None
) -> float:
    """log π(next_token | prefix) at the final position of the prefix."""

    if not 0 <= next_token < params.config.vocab_size:
        raise ConfigurationException(f"Token {next_token} out of vocabulary")

    logp = forward_logprobs(params, prefix, exit_depth)
    return float(logp.data[-1, next_token])
