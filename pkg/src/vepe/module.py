"""Parameter containers: modules register tensors by name for optimizers
and checkpoints. Names are dotted paths, stable across runs."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, gelu, matmul, standardize, take_rows


class Module:
    """Base class; attribute assignment registers parameters and children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, ModuleList):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class ModuleList(Module):
    """Sequence of submodules registered under their position index."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        self._children[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    """Affine map on the last axis of a 2-d tensor: y = x W + b."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 zero_init: bool = False, bias_init: float = 0.0):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = xavier_uniform(rng, d_in, d_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.full(d_out, float(bias_init)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return standardize(x, self.eps) * self.gamma + self.beta


class FeedForward(Module):
    """Two-layer position-wise map with GELU between; residual connections
    and normalization belong to the calling layer."""

    def __init__(self, rng: np.random.Generator, d_model: int, width: int):
        super().__init__()
        self.up = Linear(rng, d_model, width)
        self.down = Linear(rng, width, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


class Embedding(Module):
    """Learned lookup table; rows gathered by integer index."""

    def __init__(self, rng: np.random.Generator, count: int, dim: int, scale: float = 1.0):
        super().__init__()
        self.table = Tensor(rng.normal(0.0, scale, size=(count, dim)), requires_grad=True)

    def __call__(self, indices) -> Tensor:
        return take_rows(self.table, indices)
