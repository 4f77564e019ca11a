"""Parameter containers and the basic layers built on :mod:`egdnet.functional`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, relu


class Module:
    """Minimal module tree: parameters, BN buffers, train/eval mode."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for _, child in self.children():
            child._cast_buffers(dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = list(own) + list(buffers)
        missing = [k for k in expected if k not in state]
        if missing:
            raise KeyError(f"state is missing entries: {', '.join(missing[:5])}")
        unexpected = [k for k in state if k not in own and k not in buffers]
        if unexpected:
            raise KeyError(f"state has unknown entries: {', '.join(unexpected[:5])}")
        for name in expected:
            src = np.asarray(state[name])
            dst = own[name].data if name in own else buffers[name]
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for '{name}': stored {src.shape}, model expects {dst.shape}")
        for name, p in own.items():
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]


def count_params(module: Module) -> int:
    """Trainable scalar count (weights, biases, BN affine); running stats excluded."""
    return int(sum(p.size for p in module.parameters()))


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int | None = None,
                 dilation: int = 1, groups: int = 1, bias: bool = True, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        fan_in = in_ch // groups * kernel * kernel
        self.weight = Tensor(kaiming_normal(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = F.BatchNormState(channels, dtype)
        self.momentum, self.eps = momentum, eps

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.state.running_mean
        yield prefix + "running_var", self.state.running_var

    def _cast_buffers(self, dtype) -> None:
        self.state.running_mean = self.state.running_mean.astype(dtype)
        self.state.running_var = self.state.running_var.astype(dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.state, self.training, self.momentum, self.eps)


class ConvBnRelu(Module):
    """conv -> batch norm -> (optional) ReLU. Padding defaults to shape-preserving."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, dilation: int = 1,
                 groups: int = 1, activation: bool = True, rng=None, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, None, dilation, groups, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return relu(y) if self.activation else y


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = False, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        bound = 1 / math.sqrt(in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, (in_dim, out_dim)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)
