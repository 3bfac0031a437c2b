"""Frozen vision-transformer feature extraction with hierarchical taps.

The tiny test backbone is a 12-block pre-norm ViT whose weights come from a
fixed-seed initializer; it never receives gradients of its own.  External
ViT checkpoints go through the same ``VisionBackbone`` surface: a state dict
with matching parameter names is loaded into a ViT built from the spec.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneSpec
from .data import NormalizedImage
from .errors import BackboneLoadError

INIT_STD = 0.02


@dataclass
class FeatureMap:
    values: torch.Tensor  # (C, H_f, W_f) or batched (B, C, H_f, W_f)
    level_tag: str

    def __post_init__(self):
        if self.level_tag not in ("low", "mid", "high", "dense"):
            raise ValueError(f"unknown level tag {self.level_tag!r}")


@dataclass
class FeaturePyramid:
    low: FeatureMap
    mid: FeatureMap
    high: FeatureMap

    def __post_init__(self):
        shapes = {tuple(m.values.shape[-2:]) for m in (self.low, self.mid, self.high)}
        if len(shapes) != 1:
            raise ValueError(f"pyramid levels disagree on spatial size: {shapes}")

    def levels(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.low.values, self.mid.values, self.high.values


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        h = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(h)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class TinyViT(nn.Module):
    """Patch embedding, class token, learned positions, and pre-norm blocks."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        d = spec.embed_dim
        self.patch_embed = nn.Conv2d(3, d, spec.patch_size, stride=spec.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + spec.grid_size ** 2, d))
        self.blocks = nn.ModuleList(_Block(d, spec.num_heads) for _ in range(spec.num_blocks))

    def init_weights(self, seed: int) -> None:
        """Conventional fresh-ViT scheme: N(0, 0.02) for embeddings and block weights, fan-in
        scaling for the patch projection.  Fan-in-scaled blocks would collapse all tokens
        toward one direction after 12 layers, leaving the dense grid with little spatial content."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.dim() == 1:  # layer-norm gains
                    p.fill_(1.0)
                elif name == "patch_embed.weight":
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p[0].numel()))
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * INIT_STD)

    def forward(self, x: torch.Tensor, taps: tuple[int, ...]) -> list[torch.Tensor]:
        """Token grids ``(B, C, H_f, W_f)`` after each 1-based block in ``taps``."""
        b = x.shape[0]
        g = self.spec.grid_size
        tok = self.patch_embed(x).flatten(2).transpose(1, 2)
        tok = torch.cat([self.cls_token.expand(b, -1, -1), tok], dim=1) + self.pos_embed
        out = []
        last = max(taps)
        for i, blk in enumerate(self.blocks, start=1):
            tok = blk(tok)
            if i in taps:
                grid = tok[:, 1:].transpose(1, 2).reshape(b, -1, g, g).contiguous()
                out.append(grid)
            if i == last:
                break
        return out


def _freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


class VisionBackbone:
    """Frozen feature extractor; holds no optimizer-visible parameters."""

    def __init__(self, spec: BackboneSpec, dtype: torch.dtype = torch.float32):
        self.spec = spec
        model = TinyViT(spec)
        if spec.kind == "tiny-test":
            model.init_weights(spec.init_seed)
        else:
            _load_external(model, spec)
        self.model = _freeze(model.to(dtype))
        self.dtype = dtype
        self._mean = torch.tensor(spec.mean, dtype=dtype).view(1, 3, 1, 1)
        self._std = torch.tensor(spec.std, dtype=dtype).view(1, 3, 1, 1)

    def to(self, dtype: torch.dtype) -> "VisionBackbone":
        """A copy in another float precision (used by 64-bit gradient checks)."""
        clone = VisionBackbone.__new__(VisionBackbone)
        clone.spec = self.spec
        clone.dtype = dtype
        model = TinyViT(self.spec)
        model.load_state_dict(self.model.state_dict())
        clone.model = _freeze(model.to(dtype))
        clone._mean = self._mean.to(dtype)
        clone._std = self._std.to(dtype)
        return clone

    def prepare_input(self, x, standardize: bool = True) -> torch.Tensor:
        """(B,1,H,W) in [0,1] -> (B,3,S,S), S = input_size."""
        x = _as_batch(x, self.dtype)
        size = self.spec.input_size
        if x.shape[-2:] != (size, size):
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        x = x.expand(-1, 3, -1, -1)
        if not standardize:
            return x
        return (x - self._mean) / self._std

    def extract_hierarchy(self, x) -> FeaturePyramid:
        maps = self.model(self.prepare_input(x), self.spec.tap_blocks)
        return FeaturePyramid(*(FeatureMap(m, tag) for m, tag in zip(maps, ("low", "mid", "high"))))

    def extract_dense(self, x) -> FeatureMap:
        (last,) = self.model(self.prepare_input(x), (self.spec.tap_blocks[-1],))
        return FeatureMap(last, "dense")

    def token_coordinates(self) -> list[tuple[int, int]]:
        return token_coordinates(self.spec)

    def checksum(self) -> str:
        return parameter_checksum(self.model)


def _as_batch(x, dtype) -> torch.Tensor:
    if isinstance(x, NormalizedImage):
        x = torch.from_numpy(np.asarray(x.pixels))
    elif isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if x.shape[1] != 1:
        raise ValueError(f"expected single-channel images, got shape {tuple(x.shape)}")
    return x.to(dtype)


def _load_external(model: TinyViT, spec: BackboneSpec) -> None:
    path = Path(spec.checkpoint_path)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise BackboneLoadError(f"backbone checkpoint not found: {path}") from exc
    except Exception as exc:
        raise BackboneLoadError(f"backbone checkpoint {path} is unreadable: {exc}") from exc
    if isinstance(state, dict) and "model" in state and isinstance(state["model"], dict):
        state = state["model"]
    try:
        model.load_state_dict(state, strict=True)
    except (RuntimeError, TypeError) as exc:
        raise BackboneLoadError(f"backbone checkpoint {path} does not match spec: {exc}") from exc


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def token_coordinates(spec: BackboneSpec) -> list[tuple[int, int]]:
    g = spec.grid_size
    return [(x, y) for y in range(g) for x in range(g)]


def prepare_input(img, spec: BackboneSpec, standardize: bool = True) -> torch.Tensor:
    return get_backbone(spec).prepare_input(img, standardize)


def extract_hierarchy(img, spec: BackboneSpec) -> FeaturePyramid:
    return get_backbone(spec).extract_hierarchy(img)


def extract_dense(img, spec: BackboneSpec) -> FeatureMap:
    return get_backbone(spec).extract_dense(img)


_CACHE: dict[str, VisionBackbone] = {}


def get_backbone(spec: BackboneSpec) -> VisionBackbone:
    """Process-wide cache keyed by BackboneSpec; backbones are immutable after load."""
    key = repr(spec)
    if key not in _CACHE:
        _CACHE[key] = VisionBackbone(spec)
    return _CACHE[key]
