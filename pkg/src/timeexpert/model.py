"""TimeExpert (patch encoder + flatten head) and TimeExpert-G (causal, segment tokens).

Both models are channel independent: a ``[B, L, C]`` batch is reshaped to
``B*C`` univariate series that share every weight.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from .attention import AttentionParams, SelectionTrace, TmoeConfig, init_attention_params, multi_head_tmoe
from .errors import ConfigError, InvalidArgument, InvalidShape
from .numerics import (
    ParamStore,
    Rng,
    Tensor,
    as_tensor,
    concat,
    gelu,
    layer_norm,
    linear_forward,
    matmul,
    no_grad,
)
from .training import mse_loss

NORM_EPS = 1e-5
MODEL_VARIANTS = ("timeexpert", "timeexpert_g")


@dataclass(frozen=True)
class PatchConfig:
    lookback: int = 96
    patch_len: int = 16
    stride: int = 8

    def __post_init__(self):
        if self.stride < 1 or self.patch_len < 1:
            raise ConfigError("patch_len and stride must be >= 1")
        if self.patch_len > self.lookback:
            raise ConfigError(f"patch_len {self.patch_len} > lookback {self.lookback}")

    @property
    def num_tokens(self) -> int:
        return (self.lookback - self.patch_len) // self.stride + 1


@dataclass(frozen=True)
class ModelConfig:
    patch: PatchConfig = field(default_factory=PatchConfig)
    tmoe: TmoeConfig = field(default_factory=TmoeConfig)
    num_layers: int = 2
    d_ff: int | None = None
    horizon: int = 96
    dropout: float = 0.1
    variant: str = "timeexpert"
    # TimeExpert-G geometry
    segment_len: int = 96
    max_segments: int = 15

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if self.variant == "timeexpert_g" and not self.tmoe.causal:
            object.__setattr__(self, "tmoe", replace(self.tmoe, causal=True))
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 2 * self.d_model)

    @property
    def d_model(self) -> int:
        return self.tmoe.d_model

    @property
    def num_tokens(self) -> int:
        return self.patch.num_tokens if self.variant == "timeexpert" else self.max_segments

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        if "patch" in d:
            extra = set(d["patch"]) - set(PatchConfig.__dataclass_fields__)
            if extra:
                raise ConfigError(f"unknown patch keys: {sorted(extra)}")
            d["patch"] = PatchConfig(**d["patch"])
        if "tmoe" in d:
            d["tmoe"] = TmoeConfig.from_dict(d["tmoe"])
        return cls(**d)

    def with_tmoe(self, **changes) -> "ModelConfig":
        return replace(self, tmoe=replace(self.tmoe, **changes))


@dataclass
class WindowStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = NORM_EPS


# ---- normalization and patching --------------------------------------------

def instance_normalize(window, eps: float = NORM_EPS) -> tuple[Tensor, WindowStats]:
    """Normalize along the last axis with statistics treated as constants."""
    window = as_tensor(window)
    if window.shape[-1] < 1:
        raise InvalidShape("empty window")
    mu = window.data.mean(axis=-1, keepdims=True)
    sigma = window.data.std(axis=-1, keepdims=True)
    stats = WindowStats(mu, sigma, eps)
    return (window - mu) / (sigma + eps), stats


def denormalize(y_norm, stats: WindowStats) -> Tensor:
    return as_tensor(y_norm) * (stats.std + stats.eps) + stats.mean


def patchify(window, patch_len: int, stride: int) -> Tensor:
    """Sliding patches over the last axis: ``[..., L] -> [..., N, P]``."""
    window = as_tensor(window)
    length = window.shape[-1]
    if patch_len > length or patch_len < 1 or stride < 1:
        raise InvalidArgument(f"cannot cut patches of {patch_len} (stride {stride}) from length {length}")
    n = (length - patch_len) // stride + 1
    if stride == patch_len:
        return window[..., : n * patch_len].reshape(*window.shape[:-1], n, patch_len)
    idx = np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]
    return window[..., idx]


def embed_patches(tokens, w_emb, pos) -> Tensor:
    tokens, pos = as_tensor(tokens), as_tensor(pos)
    n = tokens.shape[-2]
    if n > pos.shape[0]:
        raise InvalidArgument(f"{n} tokens exceed positional table of {pos.shape[0]}")
    return matmul(tokens, w_emb) + pos[:n]


# ---- encoder ----------------------------------------------------------------

def _dropout(x: Tensor, rate: float, rng: Rng | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= rate) / (1.0 - rate)
    return x * keep.astype(x.dtype)


def encoder_block(x, params, config: ModelConfig, rng: Rng | None = None,
                  training: bool = False) -> tuple[Tensor, list[SelectionTrace]]:
    """Post-norm residual block: LN(x + drop(TMOE(x))) then LN(z + drop(FFN(z)))."""
    drop_rng = rng if training else None
    attn, traces = multi_head_tmoe(x, AttentionParams.from_store(params.scope("attn")),
                                   config.tmoe, rng)
    z = layer_norm(x + _dropout(attn, config.dropout, drop_rng),
                   params["norm1.gamma"], params["norm1.beta"])
    hidden = gelu(linear_forward(z, params["ffn.w1"], params["ffn.b1"]))
    ff = linear_forward(hidden, params["ffn.w2"], params["ffn.b2"])
    out = layer_norm(z + _dropout(ff, config.dropout, drop_rng),
                     params["norm2.gamma"], params["norm2.beta"])
    return out, traces


def _encode(x: Tensor, params: ParamStore, config: ModelConfig, rng: Rng | None,
            training: bool) -> tuple[Tensor, list[list[SelectionTrace]]]:
    traces = []
    for i in range(config.num_layers):
        x, tr = encoder_block(x, params.scope(f"layers.{i}"), config, rng, training)
        traces.append(tr)
    return x, traces


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, uniform(+-0.02) positions."""
    rng = Rng(seed)
    d, d_ff = config.d_model, config.d_ff

    def uni(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(shape, -bound, bound)

    arrays: dict[str, np.ndarray] = {}
    in_width = config.patch.patch_len if config.variant == "timeexpert" else config.segment_len
    arrays["embed.weight"] = uni((in_width, d), in_width)
    arrays["embed.pos"] = rng.uniform((config.num_tokens, d), -0.02, 0.02)
    for i in range(config.num_layers):
        p = f"layers.{i}"
        for name, arr in init_attention_params(rng, d, config.tmoe.num_heads).items():
            arrays[f"{p}.attn.{name}"] = arr
        arrays[f"{p}.norm1.gamma"] = np.ones(d)
        arrays[f"{p}.norm1.beta"] = np.zeros(d)
        arrays[f"{p}.ffn.w1"] = uni((d, d_ff), d)
        arrays[f"{p}.ffn.b1"] = np.zeros(d_ff)
        arrays[f"{p}.ffn.w2"] = uni((d_ff, d), d_ff)
        arrays[f"{p}.ffn.b2"] = np.zeros(d)
        arrays[f"{p}.norm2.gamma"] = np.ones(d)
        arrays[f"{p}.norm2.beta"] = np.zeros(d)
    if config.variant == "timeexpert":
        flat = config.num_tokens * d
        arrays["head.weight"] = uni((flat, config.horizon), flat)
        arrays["head.bias"] = np.zeros(config.horizon)
    else:
        arrays["head.weight"] = uni((d, config.segment_len), d)
        arrays["head.bias"] = np.zeros(config.segment_len)
    return ParamStore({k: Tensor(v) for k, v in arrays.items()})


# ---- TimeExpert ---------------------------------------------------------------

def _channels_first(window) -> tuple[Tensor, int, int, bool]:
    window = as_tensor(window)
    squeeze = window.ndim == 2
    if squeeze:
        window = window.reshape(1, *window.shape)
    if window.ndim != 3:
        raise InvalidShape(f"expected [L, C] or [B, L, C], got {window.shape}")
    b, length, c = window.shape
    if c < 1:
        raise InvalidShape("need at least one channel")
    series = window.transpose(0, 2, 1).reshape(b * c, length)
    return series, b, c, squeeze


def timeexpert_forward(window, params: ParamStore, config: ModelConfig, rng: Rng | None = None,
                       training: bool = False) -> tuple[Tensor, list[list[SelectionTrace]]]:
    """``[L, C]`` or ``[B, L, C]`` -> forecast ``[H, C]`` / ``[B, H, C]`` plus per-layer traces.

    Trace batch axes index ``b * C + c``.
    """
    series, b, c, squeeze = _channels_first(window)
    if series.shape[-1] != config.patch.lookback:
        raise InvalidShape(f"window length {series.shape[-1]} != lookback {config.patch.lookback}")
    normed, stats = instance_normalize(series)
    tokens = patchify(normed, config.patch.patch_len, config.patch.stride)
    x = embed_patches(tokens, params["embed.weight"], params["embed.pos"])
    x, traces = _encode(x, params, config, rng, training)
    flat = x.reshape(b * c, -1)
    y = linear_forward(flat, params["head.weight"], params["head.bias"])
    y = denormalize(y, stats)
    y = y.reshape(b, c, config.horizon).transpose(0, 2, 1)
    if squeeze:
        y = y.reshape(config.horizon, c)
    return y, traces


# ---- TimeExpert-G ---------------------------------------------------------------

def timeexpert_g_forward(context, params: ParamStore, config: ModelConfig, rng: Rng | None = None,
                         training: bool = False) -> tuple[Tensor, list[list[SelectionTrace]]]:
    """Next-segment prediction at every position.

    ``[n*S, C]`` (or batched) -> ``[n, S, C]``; output ``i`` is the forecast of
    segment ``i + 1`` and depends only on segments ``0..i``.
    """
    series, b, c, squeeze = _channels_first(context)
    seg = config.segment_len
    length = series.shape[-1]
    if length % seg or length == 0:
        raise InvalidArgument(f"context length {length} is not a multiple of segment length {seg}")
    n = length // seg
    if n > config.max_segments:
        raise InvalidArgument(f"{n} segments exceed the maximum of {config.max_segments}")
    tokens = series.reshape(b * c, n, seg)
    x = embed_patches(tokens, params["embed.weight"], params["embed.pos"])
    x, traces = _encode(x, params, config, rng, training)
    y = linear_forward(x, params["head.weight"], params["head.bias"])
    y = y.reshape(b, c, n, seg).transpose(0, 2, 3, 1)
    if squeeze:
        y = y.reshape(n, seg, c)
    return y, traces


def generate(context: np.ndarray, params: ParamStore, config: ModelConfig, horizon: int,
             rng: Rng | None = None) -> tuple[np.ndarray, int]:
    """Autoregressive rollout; returns (forecast ``[..., horizon, C]``, number of steps)."""
    ctx = np.asarray(context, dtype=np.float64)
    squeeze = ctx.ndim == 2
    if squeeze:
        ctx = ctx[None]
    seg = config.segment_len
    steps = math.ceil(horizon / seg)
    produced = []
    with no_grad():
        for _ in range(steps):
            window = ctx[:, -config.max_segments * seg:]
            pred, _ = timeexpert_g_forward(window, params, config, rng)
            nxt = pred.data[:, -1]
            produced.append(nxt)
            ctx = np.concatenate([ctx, nxt], axis=1)
    out = np.concatenate(produced, axis=1)[:, :horizon]
    return (out[0] if squeeze else out), steps


# ---- model bundle ---------------------------------------------------------------

@dataclass
class Model:
    """A config plus its parameters, with the entry points training/eval use."""

    config: ModelConfig
    params: ParamStore
    seed: int = 0

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Model":
        return cls(config, init_params(config, seed), seed)

    def forward(self, x, rng: Rng | None = None, training: bool = False):
        if self.config.variant == "timeexpert":
            return timeexpert_forward(x, self.params, self.config, rng, training)
        return timeexpert_g_forward(x, self.params, self.config, rng, training)

    def _eval_rng(self) -> Rng | None:
        return Rng(self.seed ^ 0x5EED) if self.config.tmoe.attention_variant == "random" else None

    def predict(self, x, horizon: int | None = None) -> np.ndarray:
        """Deterministic forecast ``[..., H, C]`` (dropout off)."""
        rng = self._eval_rng()
        if self.config.variant == "timeexpert":
            with no_grad():
                return self.forward(x, rng)[0].data
        return generate(x, self.params, self.config, horizon or self.config.horizon, rng)[0]

    def predict_with_traces(self, x):
        with no_grad():
            return self.forward(x, self._eval_rng())

    def loss(self, x, y, rng: Rng | None = None, training: bool = False) -> Tensor:
        """MSE against ``y``. TimeExpert-G uses the shift-by-one segment objective."""
        if rng is None:
            rng = self._eval_rng()
        if self.config.variant == "timeexpert":
            pred, _ = self.forward(x, rng, training)
            return mse_loss(pred, y)
        seg = self.config.segment_len
        x = np.asarray(x)
        y = np.asarray(y)
        full = np.concatenate([x, y[..., :seg, :]], axis=-2)
        n = x.shape[-2] // seg
        pred, _ = self.forward(x, rng, training)
        target = full[..., seg:, :].reshape(*full.shape[:-2], n, seg, full.shape[-1])
        return mse_loss(pred, target)
