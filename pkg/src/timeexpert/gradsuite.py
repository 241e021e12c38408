"""The 64-bit gradient suite behind ``timeexpert gradcheck``.

Each case looks for a seed whose top-k selection is stable under the finite
difference step (every kept/dropped score margin above ``10 h``) and then
compares analytic and central-difference gradients there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import TmoeConfig, selection_gap, tmoe_head_forward
from .errors import InvalidArgument
from .model import ModelConfig, PatchConfig, encoder_block, init_params, timeexpert_forward
from .numerics import ParamStore, Tensor, grad_check, precision

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    probe_seed: int
    num_params: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def tiny_model_config() -> ModelConfig:
    return ModelConfig(patch=PatchConfig(16, 4, 4), tmoe=TmoeConfig(8, 2, 2), horizon=4, dropout=0.0)


def _find_probe(build, k: int, h: float, tries: int):
    for seed in range(tries):
        with precision(np.float64):
            state, traces = build(seed)
        if selection_gap(traces, k) > 10 * h:
            return seed, state
    raise InvalidArgument(f"no probe point with selection gap > {10 * h} in {tries} seeds")


def head_case(h: float = 1e-5, tries: int = 200) -> CaseResult:
    cfg = TmoeConfig(d_model=4, num_heads=2, top_k=2)
    d, dk = cfg.d_model, cfg.d_k

    def build(seed):
        rng = np.random.default_rng(seed)
        store = ParamStore({
            "w_q": Tensor(rng.normal(size=(d, dk)) * 0.5, dtype=np.float64),
            "w_k": Tensor(rng.normal(size=(d, dk)) * 0.5, dtype=np.float64),
            "w_v": Tensor(rng.normal(size=(d, dk)) * 0.5, dtype=np.float64),
            "decay": Tensor(np.array(0.3), dtype=np.float64),
            "phi_w": Tensor(rng.normal(size=(d, dk)) * 0.5, dtype=np.float64),
            "phi_b": Tensor(rng.normal(size=(dk,)) * 0.1, dtype=np.float64),
        })
        x = rng.normal(size=(4, d))
        target = rng.normal(size=(4, dk))
        _, tr = tmoe_head_forward(x, dict(store.items()), cfg)
        return (store, x, target), [tr]

    seed, (store, x, target) = _find_probe(build, cfg.top_k, h, tries)

    def loss(s):
        y, _ = tmoe_head_forward(x, {n: s[n] for n in s.names()}, cfg)
        diff = y - target
        return (diff * diff).sum()

    return CaseResult("tmoe_head", grad_check(loss, store, h=h), seed, store.num_elements())


def block_case(h: float = 1e-5, tries: int = 200) -> CaseResult:
    cfg = tiny_model_config()

    def build(seed):
        params = init_params(cfg, seed).astype(np.float64)
        view = params.scope("layers.0")
        store = ParamStore({n: view[n] for n in view.names()})
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(cfg.num_tokens, cfg.d_model))
        target = rng.normal(size=x.shape)
        _, tr = encoder_block(Tensor(x), store, cfg)
        return (store, x, target), tr

    seed, (store, x, target) = _find_probe(build, cfg.tmoe.top_k, h, tries)

    def loss(s):
        y, _ = encoder_block(Tensor(x), s, cfg)
        diff = y - target
        return (diff * diff).sum()

    return CaseResult("encoder_block", grad_check(loss, store, h=h), seed, store.num_elements())


def model_case(h: float = 1e-5, tries: int = 200) -> CaseResult:
    cfg = tiny_model_config()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, cfg.patch.lookback, 2))
    y = rng.normal(size=(2, cfg.horizon, 2))

    def build(seed):
        params = init_params(cfg, seed).astype(np.float64)
        _, traces = timeexpert_forward(x, params, cfg)
        return params, [t for layer in traces for t in layer]

    seed, params = _find_probe(build, cfg.tmoe.top_k, h, tries)

    def loss(s):
        pred, _ = timeexpert_forward(x, s, cfg)
        diff = pred - y
        return (diff * diff).mean()

    return CaseResult("timeexpert_tiny", grad_check(loss, params, h=h), seed, params.num_elements())


def run_suite(h: float = 1e-5) -> list[CaseResult]:
    return [head_case(h), block_case(h), model_case(h)]
