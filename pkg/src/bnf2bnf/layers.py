"""Parameter containers and initialisers shared by the two model halves."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .numerics import Tensor


def xavier(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Model:
    """Named, ordered parameter directory."""

    prefix = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        full = f"{self.prefix}{name}"
        t = Tensor(value, requires_grad=True, name=full)
        self.params[full] = t
        return t

    def _dense(self, rng, name: str, n_in: int, n_out: int) -> None:
        self._add(f"{name}.weight", xavier(rng, (n_in, n_out), n_in, n_out))
        self._add(f"{name}.bias", np.zeros(n_out))

    def _conv(self, rng, name: str, k: int, c_in: int, c_out: int) -> None:
        self._add(f"{name}.weight", xavier(rng, (k, c_in, c_out), k * c_in, k * c_out))
        self._add(f"{name}.bias", np.zeros(c_out))

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}{name}"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in state]
        if missing:
            raise DimensionError(f"missing tensors: {missing[:5]}")
        for k, t in self.params.items():
            if np.shape(state[k]) != t.shape:
                raise DimensionError(f"tensor {k!r}: expected shape {t.shape}, got {np.shape(state[k])}")
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float64)
            t.zero_grad()
