"""Temporal Mix of Experts (TMOE) attention and its baselines.

Each key/value pair is a local expert tied to one token. For query ``t`` the
candidate experts are scored by scaled dot-product similarity multiplied by a
learnable temporal decay ``psi(|t - s|) = exp(-softplus(lambda_h) |t - s| / N)``,
the top ``k`` are kept, an optional shared global expert is appended, and the
survivors are gated with a softmax over their scores.

Shapes follow ``[batch, heads, tokens, d_k]``; single sequences (``[N, D]``)
are accepted everywhere and get a batch axis of one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, InvalidArgument, InvalidShape
from .numerics import (
    Rng,
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    exp,
    matmul,
    softmax,
    softplus,
    top_k_indices,
    top_k_mask,
)

VARIANTS = ("full", "random", "tmoe")
# softplus(DECAY_INIT) == 1
DECAY_INIT = math.log(math.e - 1.0)


@dataclass(frozen=True)
class TmoeConfig:
    d_model: int = 128
    num_heads: int = 8
    top_k: int = 8
    share_global: bool = True
    causal: bool = False
    attention_variant: str = "tmoe"
    # False pins psi to 1 (no temporal decay); used by the degeneration checks.
    temporal_decay: bool = True

    def __post_init__(self):
        if self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.attention_variant not in VARIANTS:
            raise ConfigError(f"unknown attention_variant {self.attention_variant!r}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TmoeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown tmoe keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SelectionTrace:
    """Routing diagnostics for one head.

    ``scores`` holds s_{t,s} with NaN for non-candidates, ``selected`` the
    local top-k mask, ``gates`` the softmax weights with the global expert (if
    any) in the last column. Leading axes are batch axes.
    """

    scores: np.ndarray
    selected: np.ndarray
    gates: np.ndarray
    has_global: bool = False
    global_scores: np.ndarray | None = None
    variant: str = "tmoe"

    @property
    def num_tokens(self) -> int:
        return self.selected.shape[-1]

    def selected_indices(self, t: int, batch: tuple = ()) -> list[int]:
        """Local indices chosen by query ``t``, plus -1 for the global expert."""
        row = self.selected[batch + (t,)]
        idx = [int(i) for i in np.flatnonzero(row)]
        return idx + [-1] if self.has_global else idx

    def gate_row(self, t: int, batch: tuple = ()) -> np.ndarray:
        """Gates aligned with :meth:`selected_indices`."""
        row = self.gates[batch + (t,)]
        local = row[: self.num_tokens][self.selected[batch + (t,)]]
        return np.append(local, row[-1]) if self.has_global else local

    def gate_sums(self) -> np.ndarray:
        return self.gates.sum(axis=-1)

    def cardinality(self) -> np.ndarray:
        return self.selected.sum(axis=-1) + int(self.has_global)


@dataclass
class AttentionParams:
    """Parameters of one multi-head TMOE layer (heads stacked on axis 0)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    decay: Tensor
    phi_w: Tensor
    phi_b: Tensor

    NAMES = ("w_q", "w_k", "w_v", "w_o", "decay", "phi_w", "phi_b")

    @classmethod
    def from_store(cls, view) -> "AttentionParams":
        return cls(**{n: view[n] for n in cls.NAMES})

    def head(self, h: int) -> dict:
        return {"w_q": self.w_q[h], "w_k": self.w_k[h], "w_v": self.w_v[h],
                "decay": self.decay[h], "phi_w": self.phi_w[h], "phi_b": self.phi_b[h]}


def init_attention_params(rng: Rng, d_model: int, num_heads: int) -> dict[str, np.ndarray]:
    d_k = d_model // num_heads
    bound = 1.0 / math.sqrt(d_model)
    return {
        "w_q": rng.uniform((num_heads, d_model, d_k), -bound, bound),
        "w_k": rng.uniform((num_heads, d_model, d_k), -bound, bound),
        "w_v": rng.uniform((num_heads, d_model, d_k), -bound, bound),
        "w_o": rng.uniform((d_model, d_model), -bound, bound),
        "decay": np.full((num_heads,), DECAY_INIT),
        "phi_w": rng.uniform((num_heads, d_model, d_k), -bound, bound),
        "phi_b": np.zeros((num_heads, d_k)),
    }


# ---- masks and small helpers ----------------------------------------------

def causal_mask(n: int) -> np.ndarray:
    """mask[t, s] is True when s <= t."""
    return np.tril(np.ones((n, n), dtype=bool))


def _candidates(n: int, causal: bool) -> np.ndarray:
    return causal_mask(n) if causal else np.ones((n, n), dtype=bool)


def _distance(n: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]).astype(np.float64)


def temporal_relevance(distance, decay, n_ctx: int) -> Tensor:
    """psi(d) = exp(-softplus(decay) * d / n_ctx); broadcasts over ``distance``."""
    if n_ctx < 1:
        raise InvalidArgument("n_ctx must be >= 1")
    decay = as_tensor(decay)
    d = np.asarray(distance, dtype=decay.dtype) / n_ctx
    return exp(-(softplus(decay) * d))


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise InvalidShape(f"expected [N, D] or [B, N, D], got {x.shape}")
    return x, False


# ---- vanilla attention -----------------------------------------------------

def vanilla_attention(q, k, v, causal: bool = False) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes; returns (Y, alpha)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n = q.shape[-2]
    if n == 0 or k.shape[-2] != n or v.shape[-2] != n or q.shape[-1] != k.shape[-1]:
        raise InvalidShape(f"attention shapes {q.shape}, {k.shape}, {v.shape}")
    logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    alpha = softmax(logits, axis=-1, mask=_candidates(n, causal))
    return matmul(alpha, v), alpha


# ---- single-query pieces (reference path, used by tests and diagnostics) ---

def local_expert_scores(q_t, k, t: int, decay, causal: bool = False,
                        temporal_decay: bool = True) -> Tensor:
    """Scores s_{t,s} for the candidate experts of query ``t``.

    Under ``causal`` only s <= t are returned (the vector has length t+1).
    """
    q_t, k = as_tensor(q_t), as_tensor(k)
    n = k.shape[0]
    if not 0 <= t < n:
        raise InvalidArgument(f"query index {t} outside [0, {n})")
    keys = k[: t + 1] if causal else k
    sim = matmul(keys, q_t) * (1.0 / math.sqrt(q_t.shape[-1]))
    if not temporal_decay:
        return sim
    dist = np.abs(t - np.arange(keys.shape[0]))
    return sim * temporal_relevance(dist, decay, n)


def select_local_experts(scores, k: int) -> np.ndarray:
    s = scores.data if isinstance(scores, Tensor) else scores
    return top_k_indices(s, k)


def global_expert_summary(x, phi_w, phi_b, causal: bool = False) -> tuple[Tensor, Tensor]:
    """Shared global expert from softmax-over-time self-pooling of ``x``.

    For every model dimension the tokens are weighted by a softmax of their
    own values in that dimension and summed; the pooled vector is projected by
    ``phi``. Non-causal output is ``[..., 1, d_k]``; causal output is
    ``[..., N, d_k]`` where row t pools tokens 0..t only. Key and value are the
    same tensor.
    """
    x = as_tensor(x)
    pooled = _pool(x, causal)
    kg = matmul(pooled, phi_w) + phi_b
    return kg, kg


def _pool(x: Tensor, causal: bool) -> Tensor:
    n = x.shape[-2]
    if not causal:
        w = softmax(x, axis=-2)
        return (w * x).sum(axis=-2, keepdims=True)
    # [..., t, s, D]: row t pools over s <= t
    lead = x.shape[:-2]
    xs = broadcast_to(x.reshape(*lead, 1, n, x.shape[-1]), (*lead, n, n, x.shape[-1]))
    w = softmax(xs, axis=-2, mask=causal_mask(n)[:, :, None])
    return (w * xs).sum(axis=-2)


# ---- core routing ----------------------------------------------------------

def _route(q: Tensor, k: Tensor, v: Tensor, decay: Tensor | None, kg: Tensor | None,
           config: TmoeConfig, rng: Rng | None) -> tuple[Tensor, list[SelectionTrace]]:
    """Shared TMOE/full/random aggregation on [B, H, N, d_k] tensors."""
    b, h, n, d_k = q.shape
    scale = 1.0 / math.sqrt(d_k)
    cand = _candidates(n, config.causal)
    sim = matmul(q, k.swapaxes(-1, -2)) * scale
    variant = config.attention_variant

    if variant == "full":
        scores, selected = sim, np.broadcast_to(cand, sim.shape)
    elif variant == "random":
        if rng is None:
            raise InvalidArgument("random attention needs an Rng")
        scores = sim
        selected = top_k_mask(rng.uniform(sim.shape), config.top_k, cand)
    else:
        scores = sim
        if config.temporal_decay:
            psi = temporal_relevance(_distance(n), decay.reshape(h, 1, 1), n)
            scores = sim * psi
        selected = top_k_mask(scores.data, config.top_k, cand)

    use_global = variant == "tmoe" and config.share_global
    if use_global:
        g_scores = (q * kg).sum(axis=-1, keepdims=True) * scale
        logits = concat([scores, g_scores], axis=-1)
        mask = np.concatenate([selected, np.ones((b, h, n, 1), dtype=bool)], axis=-1)
    else:
        logits, mask = scores, np.concatenate(
            [selected, np.zeros((b, h, n, 1), dtype=bool)], axis=-1)
        logits = concat([logits, Tensor(np.zeros((b, h, n, 1)), dtype=logits.dtype)], axis=-1)

    gates = softmax(logits, axis=-1, mask=mask)
    y = matmul(gates[..., :n], v)
    if use_global:
        y = y + gates[..., n:] * kg

    score_view = np.where(cand, scores.data, np.nan)
    traces = []
    for head in range(h):
        traces.append(SelectionTrace(
            scores=score_view[:, head],
            selected=np.array(selected[:, head]),
            gates=gates.data[:, head],
            has_global=use_global,
            global_scores=g_scores.data[:, head, :, 0] if use_global else None,
            variant=variant,
        ))
    return y, traces


def tmoe_head_forward(x, head: Mapping, config: TmoeConfig,
                      rng: Rng | None = None) -> tuple[Tensor, SelectionTrace]:
    """One TMOE head. ``head`` holds w_q, w_k, w_v ([D, d_k]), decay, phi_w, phi_b."""
    x, squeeze = _as_batched(x)
    q = matmul(x, head["w_q"]).reshape(x.shape[0], 1, x.shape[1], -1)
    k = matmul(x, head["w_k"]).reshape(q.shape)
    v = matmul(x, head["w_v"]).reshape(q.shape)
    kg = None
    if config.attention_variant == "tmoe" and config.share_global:
        kg, _ = global_expert_summary(x, head["phi_w"], head["phi_b"], config.causal)
        kg = kg.reshape(x.shape[0], 1, kg.shape[-2], kg.shape[-1])
    decay = as_tensor(head["decay"]).reshape(1)
    y, traces = _route(q, k, v, decay, kg, config, rng)
    y = y.reshape(x.shape[0], x.shape[1], -1)
    trace = traces[0]
    if squeeze:
        y = y.reshape(y.shape[1:])
        trace = _squeeze_trace(trace)
    return y, trace


def multi_head_tmoe(x, params: AttentionParams, config: TmoeConfig,
                    rng: Rng | None = None) -> tuple[Tensor, list[SelectionTrace]]:
    """All heads at once, concatenated and projected by ``w_o``."""
    x, squeeze = _as_batched(x)
    b, n, d = x.shape
    if d != config.d_model:
        raise InvalidShape(f"input width {d} != d_model {config.d_model}")
    h = config.num_heads
    x4 = x.reshape(b, 1, n, d)
    q = matmul(x4, params.w_q)
    k = matmul(x4, params.w_k)
    v = matmul(x4, params.w_v)
    kg = None
    if config.attention_variant == "tmoe" and config.share_global:
        pooled = _pool(x, config.causal).reshape(b, 1, -1, d)
        kg = matmul(pooled, params.phi_w) + params.phi_b.reshape(1, h, 1, -1)
    y, traces = _route(q, k, v, params.decay, kg, config, rng)
    y = y.transpose(0, 2, 1, 3).reshape(b, n, d)
    y = matmul(y, params.w_o)
    if squeeze:
        y = y.reshape(n, d)
        traces = [_squeeze_trace(t) for t in traces]
    return y, traces


def random_attention_forward(q, k, v, top_k: int, rng: Rng, causal: bool = False) -> Tensor:
    """Ablation baseline: each query gates over ``top_k`` uniformly drawn candidates."""
    if top_k < 1:
        raise InvalidArgument("k must be >= 1")
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n = q.shape[-2]
    selected = top_k_mask(rng.uniform(q.shape[:-1] + (n,)), top_k, _candidates(n, causal))
    logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(logits, axis=-1, mask=selected), v)


def _squeeze_trace(trace: SelectionTrace) -> SelectionTrace:
    return SelectionTrace(
        scores=trace.scores[0], selected=trace.selected[0], gates=trace.gates[0],
        has_global=trace.has_global,
        global_scores=None if trace.global_scores is None else trace.global_scores[0],
        variant=trace.variant,
    )


def selection_gap(traces: list[SelectionTrace], k: int) -> float:
    """Smallest score margin between the k-th kept and the best dropped candidate.

    Returns ``inf`` when no query drops anything. Used to pick gradient-check
    probe points where the discrete selection is stable.
    """
    gap = math.inf
    for tr in traces:
        s = np.where(np.isnan(tr.scores), -np.inf, tr.scores)
        kept = np.where(tr.selected, s, np.inf).min(axis=-1)
        dropped = np.where(~tr.selected & np.isfinite(s), s, -np.inf).max(axis=-1)
        margin = kept - dropped
        if np.isfinite(margin).any():
            gap = min(gap, float(margin[np.isfinite(margin)].min()))
    return gap
