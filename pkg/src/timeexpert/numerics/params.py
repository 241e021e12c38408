"""Named parameter tensors addressed by dotted hierarchical keys."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamStore:
    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._tensors[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def scope(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._tensors.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self._tensors[n].data = np.array(arr, dtype=self._tensors[n].dtype)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({n: Tensor(t.data, dtype=dtype) for n, t in self._tensors.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({n: Tensor(t.data, dtype=t.dtype) for n, t in self._tensors.items()})


class ParamView:
    """Read-only prefix view: ``store.scope("layers.0")["attn.w_q"]``."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}.{name}" in self.store

    def scope(self, prefix: str) -> "ParamView":
        return ParamView(self.store, f"{self.prefix}.{prefix}")

    def names(self) -> list[str]:
        """Names relative to the prefix."""
        head = self.prefix + "."
        return [n[len(head):] for n in self.store.names() if n.startswith(head)]
