"""Parameters, a minimal module system and convolution layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from wisernet.autodiff import functional as F
from wisernet.autodiff.tensor import Tensor, get_default_dtype


@dataclass
class OptimizerState:
    """Adam moment buffers; created lazily on the first update."""

    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0


class Parameter(Tensor):
    """A trainable leaf tensor carrying its own optimizer state."""

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.state = OptimizerState()


class Module:
    """Container whose parameters are discovered from its attributes.

    Attribute order defines declaration order, which in turn fixes the
    checkpoint layout and the order in which the optimizer visits tensors.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        pad: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        zero_init: bool = False,
    ):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init or rng is None:
            w = np.zeros(shape)
        else:
            w = he_normal(rng, shape)
        dtype = get_default_dtype()
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype=dtype)
        self.stride = stride
        self.pad = kernel_size // 2 if pad is None else pad

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvReLUStack(Module):
    """Consecutive 3x3 conv + ReLU blocks; the first may downsample."""

    def __init__(self, in_channels: int, out_channels: int, rng, n_blocks: int = 2, first_stride: int = 1):
        self.convs = [
            Conv2d(
                in_channels if i == 0 else out_channels,
                out_channels,
                3,
                stride=first_stride if i == 0 else 1,
                rng=rng,
            )
            for i in range(n_blocks)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = F.relu(conv(x))
        return x
