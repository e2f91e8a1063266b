"""Named-layer parameter container with per-layer freeze flags."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dppt.errors import ConfigError


@dataclass
class Layer:
    name: str
    value: np.ndarray
    frozen: bool = False

    @property
    def dim(self) -> int:
        return int(self.value.size)


class ParamTree:
    """Ordered list of layers. Order is preserved through save/load."""

    def __init__(self, layers):
        self.layers = list(layers)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        self._index = {n: i for i, n in enumerate(names)}
        for layer in self.layers:
            layer.value = np.asarray(layer.value, dtype=np.float64)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name) -> Layer:
        try:
            return self.layers[self._index[name]]
        except KeyError:
            raise KeyError(f"unknown layer {name!r}") from None

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def trainable_names(self) -> list[str]:
        return [layer.name for layer in self.layers if not layer.frozen]

    @property
    def frozen_names(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.frozen]

    def dims(self, trainable_only=False) -> dict[str, int]:
        return {l.name: l.dim for l in self.layers if not (trainable_only and l.frozen)}

    @property
    def num_trainable(self) -> int:
        """M: total trainable parameter count."""
        return sum(l.dim for l in self.layers if not l.frozen)

    @property
    def num_params(self) -> int:
        return sum(l.dim for l in self.layers)

    def values(self) -> dict[str, np.ndarray]:
        return {l.name: l.value for l in self.layers}

    def copy(self) -> "ParamTree":
        return ParamTree(Layer(l.name, l.value.copy(), l.frozen) for l in self.layers)

    def set_frozen(self, names) -> "ParamTree":
        """Return a copy where exactly ``names`` are frozen."""
        names = set(names)
        unknown = names - set(self._index)
        if unknown:
            raise ConfigError(f"unknown layer(s): {sorted(unknown)}")
        return ParamTree(Layer(l.name, l.value.copy(), l.name in names) for l in self.layers)

    def equals(self, other) -> bool:
        if self.names != other.names:
            return False
        return all(
            a.frozen == b.frozen and a.value.shape == b.value.shape and np.array_equal(a.value, b.value)
            for a, b in zip(self.layers, other.layers)
        )


def flat_norm(grads) -> float:
    """L2 norm over the concatenation of all arrays in a gradient dict."""
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def pairwise_sum(arrays):
    """Tree-reduce a list of equally shaped arrays.

    The rounding error grows as log(n) instead of n, which keeps sums over
    permuted inputs within ~1e-15 relative of each other.
    """
    arrays = list(arrays)
    if not arrays:
        raise ValueError("pairwise_sum of nothing")
    while len(arrays) > 1:
        nxt = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            nxt.append(arrays[-1])
        arrays = nxt
    return np.array(arrays[0], dtype=np.float64, copy=True)


def sum_grads(grad_list):
    """Pairwise-sum a list of gradient dicts with identical keys."""
    keys = list(grad_list[0])
    return {k: pairwise_sum(g[k] for g in grad_list) for k in keys}
