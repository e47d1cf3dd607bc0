"""Mixed adaptation block: parallel attention / dynamic-conv / channel-MLP
branches over a channel split, gated mutual fusion, and a post-fusion FFN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ChannelNorm, ConfigError, Conv2d, Module


@dataclass(frozen=True)
class BranchToggles:
    """Runtime ablation switches. At least one branch must stay enabled."""

    enable_att: bool = True
    enable_conv: bool = True
    enable_mlp: bool = True
    enable_fusion: bool = True

    def enabled(self) -> list[str]:
        names = []
        if self.enable_att:
            names.append("att")
        if self.enable_conv:
            names.append("conv")
        if self.enable_mlp:
            names.append("mlp")
        if not names:
            raise ConfigError("at least one branch must be enabled")
        return names


def branch_widths(channels: int, toggles: BranchToggles) -> dict[str, int]:
    """Channel share per enabled branch, largest-remainder apportionment.

    With all three branches on, ``channels`` must split evenly three ways;
    disabled branches hand their share to the remaining ones.
    """
    names = toggles.enabled()
    n = len(names)
    if n == 3 and channels % 3 != 0:
        raise ConfigError(f"channel count {channels} not divisible by 3")
    base = channels // n
    remainder = channels - base * n
    widths = {}
    for i, name in enumerate(names):
        widths[name] = base + (1 if i < remainder else 0)
    return widths


def split_channels(x: Tensor, widths: dict[str, int]) -> dict[str, Tensor]:
    """Contiguous channel ranges in branch order; concat is the exact inverse."""
    if sum(widths.values()) != x.shape[1]:
        raise ConfigError(f"branch widths {widths} do not cover {x.shape[1]} channels")
    parts = ad.split(x, list(widths.values()), axis=1)
    return dict(zip(widths.keys(), parts))


class SpatialAttention(Module):
    """Multi-head self-attention over spatial tokens of one branch.

    Tokens are pixel positions with ``width``-dim embeddings; heads split the
    embedding. No residual here; the surrounding block handles skips.
    """

    def __init__(self, width: int, rng, heads: int | None = None, dtype=np.float64):
        super().__init__()
        self.width = width
        self.heads = heads if heads is not None else max(1, width // 8)
        if width % self.heads != 0:
            raise ConfigError(f"head count {self.heads} does not divide branch width {width}")
        self.head_dim = width // self.heads
        self.norm = ChannelNorm(width, dtype=dtype)
        self.qkv = Conv2d(width, 3 * width, 1, rng, dtype=dtype)
        self.proj = Conv2d(width, width, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        n = H * W
        qkv = self.qkv(self.norm(x))
        qkv = qkv.reshape(B, 3, self.heads, self.head_dim, n)
        q, k, v = ad.split(qkv, [1, 1, 1], axis=1)
        q = q.reshape(B, self.heads, self.head_dim, n).permute(0, 1, 3, 2)
        k = k.reshape(B, self.heads, self.head_dim, n)
        v = v.reshape(B, self.heads, self.head_dim, n).permute(0, 1, 3, 2)
        scores = ad.matmul(q, k) * (self.head_dim ** -0.5)
        weights = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(weights, v)  # [B, heads, n, head_dim]
        mixed = mixed.permute(0, 1, 3, 2).reshape(B, C, H, W)
        return self.proj(mixed)

    def flops(self, h: int, w: int) -> int:
        n = h * w
        total = self.qkv.flops(h, w) + self.proj.flops(h, w)
        total += 2 * 2 * self.heads * n * n * self.head_dim  # QK^T and weights@V
        return total


class DynamicConvBranch(Module):
    """Gated local enhancement with a content-generated depthwise kernel.

    Pre-norm, 1x1 expansion to twice the width, split into gate / bypass /
    conv partitions, per-sample per-channel depthwise filtering of the conv
    partition, sigmoid gating with a learnable temperature, 1x1 output
    projection, residual.
    """

    def __init__(self, width: int, rng, kernel_size: int = 3, dtype=np.float64):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"dynamic kernel size must be odd, got {kernel_size}")
        if width % 2 != 0:
            raise ConfigError(f"conv branch width {width} must be even to split its expansion")
        self.width = width
        self.k = kernel_size
        self.gate_width = width
        self.conv_width = width // 2
        self.bypass_width = width - self.conv_width
        self.norm = ChannelNorm(width, dtype=dtype)
        self.expand = Conv2d(width, 2 * width, 1, rng, dtype=dtype)
        self.kgen_mid = Conv2d(self.conv_width, self.conv_width, 1, rng, dtype=dtype)
        self.kgen_out = Conv2d(self.conv_width, self.conv_width * kernel_size ** 2, 1, rng, dtype=dtype)
        self.out = Conv2d(width, width, 1, rng, dtype=dtype)
        self.gate_temperature = Tensor(np.ones((), dtype=dtype), requires_grad=True)

    def generate_kernels(self, conv_part: Tensor) -> Tensor:
        """Pooled context -> 1x1 -> GELU -> 1x1, reshaped to [B*C', 1, k, k]."""
        B, C, _, _ = conv_part.shape
        pooled = ad.adaptive_avg_pool(conv_part)
        hidden = ad.gelu(self.kgen_mid(pooled))
        flat = self.kgen_out(hidden)  # [B, C*k*k, 1, 1]
        return flat.reshape(B * C, 1, self.k, self.k)

    def apply_dynamic_conv(self, conv_part: Tensor, kernels: Tensor) -> Tensor:
        B, C, H, W = conv_part.shape
        flat = conv_part.reshape(1, B * C, H, W)
        filtered = ad.conv2d(flat, kernels, stride=1, padding=self.k // 2, groups=B * C)
        return filtered.reshape(B, C, H, W)

    def __call__(self, x: Tensor) -> Tensor:
        expanded = self.expand(self.norm(x))
        gate, bypass, conv_part = ad.split(
            expanded, [self.gate_width, self.bypass_width, self.conv_width], axis=1
        )
        kernels = self.generate_kernels(conv_part)
        filtered = self.apply_dynamic_conv(conv_part, kernels)
        gated = ad.sigmoid(gate / self.gate_temperature) * ad.concat([bypass, filtered], axis=1)
        return self.out(gated) + x

    def flops(self, h: int, w: int) -> int:
        total = self.expand.flops(h, w) + self.out.flops(h, w)
        total += self.kgen_mid.flops(1, 1) + self.kgen_out.flops(1, 1)
        total += 2 * self.conv_width * self.k * self.k * h * w  # depthwise pass
        return total


class ChannelMlpBranch(Module):
    """Per-position channel mixing: two pointwise maps with a GELU between,
    applied to the spatially flattened sequence, plus a residual."""

    def __init__(self, width: int, rng, hidden: int | None = None, dtype=np.float64):
        super().__init__()
        self.width = width
        self.hidden = hidden if hidden is not None else 2 * width
        self.fc1 = Conv2d(width, self.hidden, 1, rng, dtype=dtype)
        self.fc2 = Conv2d(self.hidden, width, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        seq = x.reshape(B, C, H * W, 1)
        mixed = self.fc2(ad.gelu(self.fc1(seq)))
        return mixed.reshape(B, C, H, W) + x

    def flops(self, h: int, w: int) -> int:
        return self.fc1.flops(h, w) + self.fc2.flops(h, w)


def mutual_fusion(outputs: dict[str, Tensor], lams: dict[str, Tensor]) -> dict[str, Tensor]:
    """Each branch absorbs a gated sum of the *other* pre-fusion outputs.

    All right-hand sides use pre-fusion values, so the three updates commute.
    With a single enabled branch this is the identity.
    """
    names = list(outputs.keys())
    fused = {}
    for name in names:
        others = [outputs[o] for o in names if o != name]
        if not others:
            fused[name] = outputs[name]
            continue
        acc = others[0]
        for extra in others[1:]:
            acc = acc + extra
        fused[name] = outputs[name] + lams[name] * ad.sigmoid(acc)
    return fused


class FeedForward(Module):
    """Post-fusion channel FFN: norm -> 1x1 expand -> GELU -> 1x1, residual
    handled by the caller."""

    def __init__(self, channels: int, rng, expansion: int = 2, dtype=np.float64):
        super().__init__()
        self.norm = ChannelNorm(channels, dtype=dtype)
        self.fc1 = Conv2d(channels, expansion * channels, 1, rng, dtype=dtype)
        self.fc2 = Conv2d(expansion * channels, channels, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(self.norm(x))))

    def flops(self, h: int, w: int) -> int:
        return self.fc1.flops(h, w) + self.fc2.flops(h, w)


class MixedAdaptationBlock(Module):
    """Shape-preserving block: split -> branches -> fusion -> concat ->
    1x1 projection -> FFN with residual."""

    def __init__(
        self,
        channels: int,
        rng,
        toggles: BranchToggles = BranchToggles(),
        kernel_size: int = 3,
        ffn_expansion: int = 2,
        mlp_expansion: int = 2,
        dtype=np.float64,
    ):
        super().__init__()
        self.channels = channels
        self.toggles = toggles
        self.widths = branch_widths(channels, toggles)
        if toggles.enable_att:
            self.att = SpatialAttention(self.widths["att"], rng, dtype=dtype)
        if toggles.enable_conv:
            self.conv = DynamicConvBranch(self.widths["conv"], rng, kernel_size=kernel_size, dtype=dtype)
        if toggles.enable_mlp:
            self.mlp = ChannelMlpBranch(self.widths["mlp"], rng,
                                        hidden=mlp_expansion * self.widths["mlp"], dtype=dtype)
        if toggles.enable_fusion:
            init = np.asarray(0.1, dtype=dtype)
            for name in self.widths:
                setattr(self, f"lam_{name}", Tensor(init.copy(), requires_grad=True))
        self.proj = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.ffn = FeedForward(channels, rng, expansion=ffn_expansion, dtype=dtype)

    def _branch(self, name: str) -> Module:
        return getattr(self, name)

    def branch_concat(self, x: Tensor) -> Tensor:
        """Concatenated (optionally fused) branch outputs before projection."""
        parts = split_channels(x, self.widths)
        outputs = {name: self._branch(name)(part) for name, part in parts.items()}
        if self.toggles.enable_fusion and len(outputs) > 1:
            lams = {name: getattr(self, f"lam_{name}") for name in outputs}
            outputs = mutual_fusion(outputs, lams)
        return ad.concat(list(outputs.values()), axis=1)

    def __call__(self, x: Tensor) -> Tensor:
        fused = self.proj(self.branch_concat(x))
        return self.ffn(fused) + fused

    def flops(self, h: int, w: int) -> int:
        total = self.proj.flops(h, w) + self.ffn.flops(h, w)
        for name in self.widths:
            total += self._branch(name).flops(h, w)
        return total
