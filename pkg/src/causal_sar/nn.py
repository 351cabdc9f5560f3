"""Layers, initialisation and the VGG-style backbone."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ConvBlock",
    "BackboneConfig",
    "ParamSet",
    "Backbone",
    "Linear",
    "he_init",
    "build_backbone",
    "derive_seed",
]


def derive_seed(seed, *tags: int) -> np.random.Generator:
    """Independent generator for a (seed, tag, ...) path; ``seed`` may itself be a list."""
    base = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    return np.random.default_rng([*base, *map(int, tags)])


def he_init(shape: Sequence[int], fan_in: int, seed, dtype=np.float32) -> Tensor:
    """He-normal weights: zero mean, variance ``2 / fan_in``."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape)).astype(dtype)
    return Tensor(values, tracked=True)


def zeros_param(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), tracked=True)


@dataclass(frozen=True)
class ConvBlock:
    channels: int
    kernel: int = 3
    pool: bool = True


def _default_blocks() -> tuple[ConvBlock, ...]:
    return (ConvBlock(32), ConvBlock(64), ConvBlock(64))


@dataclass(frozen=True)
class BackboneConfig:
    """Conv(same padding) -> relu -> optional 2x2 max-pool, repeated.

    The default is the desk-scale geometry: 32x32x1 input, three pooled
    blocks, giving a 4x4x64 feature map (16 stratifications of 64 channels).
    """

    input_channels: int = 1
    input_size: int = 32
    blocks: tuple[ConvBlock, ...] = field(default_factory=_default_blocks)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.blocks
        ))
        if self.input_channels < 1 or self.input_size < 1:
            raise ValueError("input_channels and input_size must be positive")
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        size = self.input_size
        for i, b in enumerate(self.blocks):
            if b.channels < 1 or b.kernel < 1 or b.kernel % 2 == 0:
                raise ValueError(f"block {i}: channels must be positive and kernel odd, got {b}")
            if b.pool:
                size //= 2
                if size < 1:
                    raise ValueError(
                        f"pooling schedule shrinks a {self.input_size}px input below 1px at block {i}"
                    )

    @property
    def final_spatial(self) -> int:
        size = self.input_size
        for b in self.blocks:
            if b.pool:
                size //= 2
        return size

    @property
    def final_channels(self) -> int:
        return self.blocks[-1].channels

    @property
    def n_strata(self) -> int:
        return self.final_spatial ** 2

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "blocks": [{"channels": b.channels, "kernel": b.kernel, "pool": b.pool} for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            input_channels=int(d.get("input_channels", 1)),
            input_size=int(d.get("input_size", 32)),
            blocks=tuple(ConvBlock(**b) for b in d["blocks"]) if "blocks" in d else _default_blocks(),
        )

    @classmethod
    def reference(cls) -> "BackboneConfig":
        """128x128 input, five pooled blocks ending in a 4x4x512 map."""
        return cls(1, 128, tuple(ConvBlock(c) for c in (64, 128, 256, 512, 512)))


class ParamSet(dict):
    """Ordered map from parameter path to tracked tensor."""

    GROUPS = ("fem", "sam", "cls")

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if k.split(".", 1)[0] == prefix}

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.items()}

    def num_values(self) -> int:
        return sum(p.size for p in self.values())


class Backbone:
    """Forward map image batch (B, C, H, W) -> feature map (B, n_c, s, s)."""

    def __init__(self, cfg: BackboneConfig, params: dict[str, Tensor], prefix: str):
        self.cfg = cfg
        self.params = params
        self.prefix = prefix

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.values.ndim != 4 or x.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
            raise ad.ShapeError(
                f"{self.prefix}: expected input (B, {cfg.input_channels}, {cfg.input_size}, "
                f"{cfg.input_size}), got {x.shape}"
            )
        # channel-major inside the stack, batch-major at the boundaries
        h = ad.transpose(x, (1, 0, 2, 3))
        for i, b in enumerate(cfg.blocks):
            w = self.params[f"{self.prefix}.block{i}.conv.weight"]
            bias = self.params[f"{self.prefix}.block{i}.conv.bias"]
            h = ad.conv2d(h, w, bias, stride=1, pad=b.kernel // 2, layout="CNHW")
            # max-pool commutes with relu (values and gradients alike), and pooling
            # first leaves a quarter of the elements for the relu
            if b.pool:
                h = ad.maxpool2d(h, 2, 2)
            h = ad.relu(h)
        return ad.transpose(h, (1, 0, 2, 3))

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())


def build_backbone(cfg: BackboneConfig, seed: int, prefix: str = "fem", dtype=np.float32) -> Backbone:
    """Initialise a backbone deterministically from ``seed``."""
    params: dict[str, Tensor] = {}
    c_in = cfg.input_channels
    for i, b in enumerate(cfg.blocks):
        fan_in = c_in * b.kernel * b.kernel
        params[f"{prefix}.block{i}.conv.weight"] = he_init(
            (b.channels, c_in, b.kernel, b.kernel), fan_in, derive_seed(seed, i), dtype
        )
        params[f"{prefix}.block{i}.conv.bias"] = zeros_param((b.channels,), dtype)
        c_in = b.channels
    return Backbone(cfg, params, prefix)


class Linear:
    """Affine map over the last axis: ``v @ W + b`` with ``W`` of shape (in, out)."""

    def __init__(self, in_features: int, out_features: int, seed, prefix: str = "cls", dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.prefix = prefix
        self.params = {
            f"{prefix}.weight": he_init((in_features, out_features), in_features, seed, dtype),
            f"{prefix}.bias": zeros_param((out_features,), dtype),
        }

    @property
    def weight(self) -> Tensor:
        return self.params[f"{self.prefix}.weight"]

    @property
    def bias(self) -> Tensor:
        return self.params[f"{self.prefix}.bias"]

    def __call__(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.in_features:
            raise ad.ShapeError(f"{self.prefix}: expected {self.in_features} input channels, got {v.shape[-1]}")
        lead = v.shape[:-1]
        flat = v if v.values.ndim == 2 else ad.reshape(v, (-1, self.in_features))
        out = ad.bias_add(ad.matmul(flat, self.weight), self.bias)
        return out if v.values.ndim == 2 else ad.reshape(out, (*lead, self.out_features))
