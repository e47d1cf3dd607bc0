"""Parameter containers and basic layers on top of the tensor engine."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """Raised at build time when a structural constraint is violated."""


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float64) -> np.ndarray:
    """Normal samples with |z| > 2 sigma resampled (deterministic given rng)."""
    out = rng.standard_normal(shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    np.clip(out, -2.0, 2.0, out=out)
    return (out * std).astype(dtype)


class Module:
    """Minimal named-parameter container with torch-like attribute registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def census(self) -> dict[str, int]:
        """Parameter counts per direct child (own params under '<self>')."""
        out: dict[str, int] = {}
        own = sum(p.size for p in self._params.values())
        if own:
            out["<self>"] = own
        for name, m in self._modules.items():
            out[name] = m.parameter_count()
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters by exact name match."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"parameter name mismatch: missing={missing}, unexpected={unexpected}")
        for name, p in own.items():
            arr = state[name]
            if tuple(arr.shape) != p.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


class Conv2d(Module):
    """Grouped 2-D correlation layer; padding defaults to 'same' (k//2)."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, groups=1,
                 bias=True, dtype=np.float64, zero_init=False):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        if cin % groups or cout % groups:
            raise ConfigError(f"Conv2d channels ({cin} in, {cout} out) not divisible by groups={groups}")
        fan_in = (cin // groups) * k * k
        if zero_init:
            w = np.zeros((cout, cin // groups, k, k), dtype=dtype)
        else:
            w = truncated_normal(rng, (cout, cin // groups, k, k), std=fan_in ** -0.5, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding, groups=self.groups)

    def flops(self, h_out: int, w_out: int) -> int:
        # MAC = 2 flops; bias adds excluded by convention.
        return 2 * self.cout * (self.cin // self.groups) * self.k * self.k * h_out * w_out


class ConvTranspose2d(Module):
    """Stride-2 upsampler (k=2 gives exact extent doubling, no overlap)."""

    def __init__(self, cin, cout, rng, k=2, stride=2, bias=True, dtype=np.float64):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        fan_in = cin * k * k
        w = truncated_normal(rng, (cin, cout, k, k), std=fan_in ** -0.5, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)

    def flops(self, h_in: int, w_in: int) -> int:
        return 2 * self.cin * self.cout * self.k * self.k * h_in * w_in


class ChannelNorm(Module):
    """Layer norm over the channel dimension of [B, C, H, W] maps."""

    def __init__(self, channels: int, dtype=np.float64, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        moved = x.permute(0, 2, 3, 1)
        normed = ad.layer_norm(moved, self.gamma, self.beta, eps=self.eps)
        return normed.permute(0, 3, 1, 2)

    def flops(self, h: int, w: int) -> int:
        return 0  # MAC-bearing ops only


class Affine(Module):
    """Dense map y = W x + b on trailing feature vectors."""

    def __init__(self, d_in: int, d_out: int, rng, bias=True, dtype=np.float64):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        w = truncated_normal(rng, (d_out, d_in), std=d_in ** -0.5, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        # x: [..., d_in] -> [..., d_out]
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.d_in) if lead else (1, self.d_in))
        out = ad.matmul(flat, self.weight.permute(1, 0))
        if self.bias is not None:
            out = out + ad.broadcast_to(self.bias.reshape(1, self.d_out), out.shape)
        return out.reshape(lead + (self.d_out,)) if lead else out.reshape((self.d_out,))
