"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..errors import NonFinite, NonFiniteLoss
from .params import ParamStore
from .tensor import Tensor, no_grad, precision


def grad_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-3,
    names: Iterable[str] | None = None,
    max_elements: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a ParamStore to a scalar Tensor. The check runs in float64 on a
    copy of ``params``. Per element the error is
    ``|a - n| / max(1e-8, |a| + |n|)``.

    ``max_elements`` caps how many entries per tensor are probed (evenly
    spaced); ``None`` probes everything.
    """
    with precision(np.float64):
        p64 = params.astype(np.float64)
        loss = _evaluate(f, p64, grad=True)
        loss.backward()
        analytic = p64.grads()

        worst = 0.0
        for name in (names if names is not None else p64.names()):
            t = p64[name]
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.unique(np.linspace(0, flat.size - 1, max_elements).astype(int))
            a_flat = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = _evaluate(f, p64).item()
                flat[i] = orig - h
                fm = _evaluate(f, p64).item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = float(a_flat[i])
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst


def _evaluate(f, params: ParamStore, grad: bool = False) -> Tensor:
    try:
        if grad:
            out = f(params)
        else:
            with no_grad():
                out = f(params)
    except NonFinite as exc:
        raise NonFiniteLoss(str(exc)) from exc
    if not np.isfinite(out.data).all():
        raise NonFiniteLoss("objective is not finite")
    return out
