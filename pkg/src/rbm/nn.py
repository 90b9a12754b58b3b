"""Parameter containers and the few layers both models share."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import params_digest

INIT_SCALE = 0.1


class Module:
    """Named parameter registry with a version counter bumped on every update."""

    def __init__(self, rng: np.random.Generator | None = None):
        self._params: dict[str, Tensor] = {}
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self.version = 0

    def add_param(self, name: str, shape, init: str = "uniform") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        if init == "zeros":
            data = np.zeros(shape)
        else:
            data = self._rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        p = ad.parameter(data, name=name)
        self._params[name] = p
        return p

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params

    def num_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grad(self) -> None:
        ad.zero_grads(self._params.values())

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for n, p in self._params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in self._params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()
        self.version += 1

    def digest(self) -> str:
        return params_digest(self.state_dict())


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; ``w`` maps [x; h] to the four gates ordered i, f, o, g."""
    n = h.shape[-1]
    gates = ad.add(ad.matmul(ad.concat([x, h], axis=-1), w), b)
    ifo = ad.sigmoid(gates[..., : 3 * n])
    g = ad.tanh(gates[..., 3 * n:])
    i, f, o = ifo[..., :n], ifo[..., n: 2 * n], ifo[..., 2 * n:]
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new

