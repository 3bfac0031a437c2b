"""U-shaped residual denoiser.

Encoder of ``depth`` stride-2 stages, optional multi-head self-attention at
the bottleneck, mirrored decoder with skip concatenation.  With
``residual_output`` the head predicts a noise map that is subtracted from the
input; the result is clamped to [0, 1] either way.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import GeneratorConfig
from .errors import InvalidArgumentError


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.1),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.1),
    )


class BottleneckAttention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        tok = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(tok, tok, tok, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNetGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.inc = _double_conv(1, ch[0])
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch[i], ch[i], 4, stride=2, padding=1), nn.LeakyReLU(0.1),
                          _double_conv(ch[i], ch[i + 1]))
            for i in range(cfg.depth)
        )
        self.attn = BottleneckAttention(ch[-1], cfg.attention_heads) if cfg.use_self_attention else None
        self.up = nn.ModuleList(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in reversed(range(cfg.depth)))
        self.dec = nn.ModuleList(_double_conv(2 * ch[i], ch[i]) for i in reversed(range(cfg.depth)))
        self.head = nn.Conv2d(ch[0], 1, 1)

    @property
    def multiple(self) -> int:
        return 2 ** self.cfg.depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        m = self.multiple
        if h % m or w % m:
            raise InvalidArgumentError(
                f"input size {h}x{w} must be a multiple of {m} (2**depth, depth={self.cfg.depth})")
        skips = [self.inc(x)]
        for stage in self.down:
            skips.append(stage(skips[-1]))
        y = skips.pop()
        if self.attn is not None:
            y = self.attn(y)
        for up, dec in zip(self.up, self.dec):
            y = dec(torch.cat([up(y), skips.pop()], dim=1))
        y = self.head(y)
        if self.cfg.residual_output:
            y = x - y
        return y.clamp(0.0, 1.0)

    def residual_branch(self) -> nn.Module:
        return self.head


def build_generator(cfg: GeneratorConfig, seed: int | None = None) -> UNetGenerator:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return UNetGenerator(cfg)
    return UNetGenerator(cfg)


def denoise(model: UNetGenerator, ldct: torch.Tensor) -> torch.Tensor:
    """Y_hat = G(X) for a (B, 1, H, W) batch of normalized images."""
    return model(ldct)


def parameter_count(cfg: GeneratorConfig) -> int:
    return sum(p.numel() for p in UNetGenerator(cfg).parameters())
