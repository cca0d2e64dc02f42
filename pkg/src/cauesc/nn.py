"""Parameter containers and the basic layers built on :mod:`cauesc.autograd`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Value


class Module:
    """Attribute-registered parameter tree with dotted names."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, attr in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(attr, Parameter):
                yield name, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(name + ".")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, attr in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(attr, Module):
                yield from attr.modules()
            elif isinstance(attr, (list, tuple)):
                for item in attr:
                    if isinstance(item, Module):
                        yield from item.modules()


def normal(rng: np.random.Generator, shape, std: float) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int,
                 bias: bool = True, std: float = 0.02):
        self.weight = normal(rng, (n_in, n_out), std)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Value) -> Value:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, size: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(size))
        self.bias = Parameter(np.zeros(size))
        self._eps = eps

    def __call__(self, x: Value) -> Value:
        return ag.layer_norm(x, self.gain, self.bias, self._eps)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, hidden: int, inner: int, std: float = 0.02):
        self.up = Linear(rng, hidden, inner, std=std)
        self.down = Linear(rng, inner, hidden, std=std)

    def __call__(self, x: Value) -> Value:
        return self.down(ag.gelu(self.up(x)))
