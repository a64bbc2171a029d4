"""SResNet: a small residual encoder for 32x32 object crops.

Four variants are selected by two switches on :class:`EncoderConfig`:

================  =========  ==================
variant           use_sdcl   use_size_injection
================  =========  ==================
``plain``         no         no
``size``          no         yes
``sdcl``          yes        no
``sdcl+size``     yes        yes
================  =========  ==================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import BatchNorm, Conv2d, Linear, Module
from .autodiff.tensor import Tensor, concat
from .sdcl import DEFAULT_UPSCALE, SDConv2d

VARIANTS = {
    "plain": (False, False),
    "size": (False, True),
    "sdcl": (True, False),
    "sdcl+size": (True, True),
}

SIZE_SCALE = 32.0


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    use_sdcl: bool = False
    use_size_injection: bool = False
    block_depths: tuple[int, ...] = (3, 4, 3)
    block_widths: tuple[int, ...] = (32, 64, 128)
    stem_width: int = 32
    embedding_dim: int = 128
    num_classes: int | None = None
    in_channels: int = 3
    upscale: int = DEFAULT_UPSCALE
    # "standardized" feeds (h/32, w/32); "raw" feeds pixel counts
    size_mode: str = "standardized"
    block_strides: tuple[int, ...] = field(default=(1, 2, 2))

    def __post_init__(self):
        self.block_depths = tuple(self.block_depths)
        self.block_widths = tuple(self.block_widths)
        self.block_strides = tuple(self.block_strides)
        if len(self.block_depths) != 3 or len(self.block_widths) != 3:
            raise ConfigError("block_depths and block_widths must both have length 3")
        if self.embedding_dim != self.block_widths[-1]:
            raise ConfigError(
                f"embedding_dim ({self.embedding_dim}) must equal the last block width ({self.block_widths[-1]})"
            )
        if self.size_mode not in ("standardized", "raw"):
            raise ConfigError(f"unknown size_mode {self.size_mode!r}")
        if self.num_classes is not None and self.num_classes < 2:
            raise ConfigError(f"a classifier needs at least 2 classes, got {self.num_classes}")
        if self.upscale < 1:
            raise ConfigError(f"upscale must be >= 1, got {self.upscale}")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "EncoderConfig":
        try:
            sd, size = VARIANTS[variant]
        except KeyError:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None
        return cls(use_sdcl=sd, use_size_injection=size, **kwargs)

    @property
    def needs_sizes(self) -> bool:
        return self.use_sdcl or self.use_size_injection

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.use_sdcl, self.use_size_injection):
                return name
        raise AssertionError("unreachable")

    def to_dict(self) -> dict:
        return asdict(self)


class BasicBlock(Module):
    """Two 3x3 conv + BN layers with an identity or 1x1-projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, rng=rng)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, rng=rng)
        self.bn2 = BatchNorm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, rng=rng)
            self.proj_bn = BatchNorm(out_ch)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out))
        short = x if self.proj is None else self.proj_bn(self.proj(x))
        return (out + short).relu()


class SizeInjection(Module):
    """Concatenate (h, w) to the embedding, then Linear -> BN -> ReLU back to the same width."""

    def __init__(self, dim: int, size_mode: str = "standardized", rng=None):
        super().__init__()
        self.size_mode = size_mode
        self.fc = Linear(dim + 2, dim, rng=rng)
        self.bn = BatchNorm(dim)

    def size_features(self, sizes, dtype) -> Tensor:
        s = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
        if self.size_mode == "standardized":
            s = s / SIZE_SCALE
        return Tensor(s, dtype=dtype)

    def forward(self, emb: Tensor, sizes, bypass_bn: bool = False) -> Tensor:
        s = sizes if isinstance(sizes, Tensor) else self.size_features(sizes, emb.dtype)
        h = self.fc(concat([emb, s], axis=1))
        if not bypass_bn:
            h = self.bn(h)
        return h.relu()


def inject_size(layer: SizeInjection, embedding: Tensor, sizes, bypass_bn: bool = False) -> Tensor:
    return layer(embedding, sizes, bypass_bn=bypass_bn)


class SResNet(Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        if cfg.use_sdcl:
            self.stem = SDConv2d(cfg.in_channels, cfg.stem_width, 3, u_f=cfg.upscale, rng=rng)
        else:
            self.stem = Conv2d(cfg.in_channels, cfg.stem_width, 3, 1, rng=rng)
        self.stem_bn = BatchNorm(cfg.stem_width)
        blocks = []
        in_ch = cfg.stem_width
        for depth, width, stride in zip(cfg.block_depths, cfg.block_widths, cfg.block_strides):
            for i in range(depth):
                blocks.append(BasicBlock(in_ch, width, stride if i == 0 else 1, rng))
                in_ch = width
        self.blocks = blocks
        self.size_inject = SizeInjection(cfg.embedding_dim, cfg.size_mode, rng) if cfg.use_size_injection else None

    def first_layer_weight(self) -> np.ndarray:
        return self.stem.weight.data

    def forward(self, x: Tensor, sizes=None) -> Tensor:
        cfg = self.cfg
        if cfg.needs_sizes and sizes is None:
            raise ConfigError(f"variant {cfg.variant!r} requires per-sample sizes")
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        h = self.stem(x, sizes) if cfg.use_sdcl else self.stem(x)
        h = self.stem_bn(h).relu()
        for block in self.blocks:
            h = block(h)
        emb = F.global_avg_pool(h)
        if self.size_inject is not None:
            emb = self.size_inject(emb, sizes)
        return emb

    encode = forward


def encode(model: SResNet, batch: Tensor, sizes=None) -> Tensor:
    return model(batch, sizes)


class Classifier(Module):
    def __init__(self, dim: int, num_classes: int, rng=None):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"a classifier needs at least 2 classes, got {num_classes}")
        self.fc = Linear(dim, num_classes, rng=rng)

    def forward(self, emb: Tensor) -> Tensor:
        return self.fc(emb)


class ProjectionHead(Module):
    """dim -> hidden (BN + ReLU) -> out."""

    def __init__(self, dim: int = 128, hidden: int = 256, out: int = 256, rng=None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, bias=False, rng=rng)
        self.bn = BatchNorm(hidden)
        self.fc2 = Linear(hidden, out, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.bn(self.fc1(x)).relu())
