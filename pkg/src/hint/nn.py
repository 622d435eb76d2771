"""Parameter containers and the small layer set the model is built from."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a module.

    ``init`` names the initialisation rule applied by :meth:`Module.initialize`:
    ``("uniform", fan_in)``, ``("const", value)``.
    """

    def __init__(self, shape, init=("const", 0.0), trainable: bool = True):
        super().__init__(np.zeros(shape, dtype=T.get_default_dtype()), requires_grad=trainable)
        self.init = init
        self.trainable = trainable


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class Module:
    """Base class with torch-like parameter discovery by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def initialize(self, seed: int) -> "Module":
        """Draw every parameter from its init rule.

        Each parameter gets its own generator keyed on ``(seed, name)``, so a
        parameter's initial value does not depend on which other parameters
        the model happens to contain.
        """
        for name, p in self.named_parameters():
            kind, arg = p.init
            if kind == "uniform":
                bound = 1.0 / np.sqrt(arg)
                values = _param_rng(seed, name).uniform(-bound, bound, size=p.shape)
            elif kind == "const":
                values = np.full(p.shape, arg)
            else:
                raise ValueError(f"unknown init rule {kind!r} for {name}")
            p.data = values.astype(p.dtype)
            p.grad = None
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise DimensionError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = False, stride: int = 1):
        if c_in % groups or c_out % groups:
            raise DimensionError(f"Conv2d: groups={groups} must divide c_in={c_in} and c_out={c_out}")
        fan_in = (c_in // groups) * kernel_size * kernel_size
        self.weight = Parameter((c_out, c_in // groups, kernel_size, kernel_size), ("uniform", fan_in))
        self.bias = Parameter((c_out,)) if bias else None
        self.padding = padding
        self.groups = groups
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class LayerNorm2d(Module):
    """Channel-wise layer norm with learnable gain and bias."""

    def __init__(self, channels: int):
        self.gain = Parameter((channels,), ("const", 1.0))
        self.bias = Parameter((channels,))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)
