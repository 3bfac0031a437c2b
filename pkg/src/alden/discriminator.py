"""Patch discriminator conditioned on NDCT semantics through attention fusion.

Fusion block (per pyramid level):

    a -> GroupNorm -> 1x1 conv -> tokens -> LayerNorm -> Q, K, V -> self-attn -> a'
    a' -> LayerNorm -> Q'
    f -> GroupNorm -> 1x1 conv -> tokens -> LayerNorm -> K', V'
    f' = attn(Q', K', V')
    out = concat(conv1x1(grid(GELU(LayerNorm(f')))), f)

The semantic level is bilinearly resized to the trunk stage before fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DiscriminatorConfig
from .errors import NumericError, ShapeMismatchError


@dataclass
class AttentionProjection:
    query: torch.Tensor
    key: torch.Tensor
    value: torch.Tensor
    d_k: int

    def __post_init__(self):
        n, d = self.query.shape[-2:]
        if self.key.shape[-2:] != (n, d) or self.value.shape[-2] != n:
            raise ShapeMismatchError(
                f"Q {tuple(self.query.shape)}, K {tuple(self.key.shape)}, V {tuple(self.value.shape)} disagree")


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, d_k: int | None = None,
              return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape[-2] < 1 or k.shape[-2] < 1:
        raise ShapeMismatchError("attention needs at least one token")
    d_k = q.shape[-1] if d_k is None else d_k
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(d_k)
    weights = scores.softmax(dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def self_attention(tokens: torch.Tensor | None, proj: AttentionProjection, return_weights: bool = False):
    """Attention over an explicit Q/K/V projection.

    ``tokens`` is accepted for symmetry with callers that keep the raw token
    matrix around; the projections already encode it.
    """
    for name, t in (("query", proj.query), ("key", proj.key), ("value", proj.value)):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in attention {name}")
    return attention(proj.query, proj.key, proj.value, proj.d_k, return_weights)


class _MultiHead(nn.Module):
    """Linear Q/K/V projections followed by split-head scaled dot-product attention."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, q_src, kv_src):
        b, n, d = q_src.shape
        hd = d // self.heads

        def split(t):
            return t.reshape(b, -1, self.heads, hd).transpose(1, 2)

        out, w = attention(split(self.to_q(q_src)), split(self.to_k(kv_src)), split(self.to_v(kv_src)),
                           hd, return_weights=True)
        if self.keep_weights:
            self.last_weights = w.detach()
        return out.transpose(1, 2).reshape(b, n, d)


class AttentionFeatureFusion(nn.Module):
    def __init__(self, semantic_channels: int, trunk_channels: int, embed_dim: int, heads: int, groups: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.a_norm = nn.GroupNorm(math.gcd(groups, semantic_channels), semantic_channels)
        self.a_proj = nn.Conv2d(semantic_channels, embed_dim, 1)
        self.a_ln = nn.LayerNorm(embed_dim)
        self.self_attn = _MultiHead(embed_dim, heads)
        self.q_ln = nn.LayerNorm(embed_dim)
        self.f_norm = nn.GroupNorm(math.gcd(groups, trunk_channels), trunk_channels)
        self.f_proj = nn.Conv2d(trunk_channels, embed_dim, 1)
        self.f_ln = nn.LayerNorm(embed_dim)
        self.cross_attn = _MultiHead(embed_dim, heads)
        self.out_ln = nn.LayerNorm(embed_dim)
        self.out_proj = nn.Conv2d(embed_dim, embed_dim, 1)

    def keep_attention_weights(self, flag: bool = True) -> None:
        self.self_attn.keep_weights = flag
        self.cross_attn.keep_weights = flag

    def forward(self, a: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        b, _, h, w = f.shape
        if a.shape[-2:] != (h, w):
            a = F.interpolate(a, size=(h, w), mode="bilinear", align_corners=False)
        if a.shape[0] != b:
            raise ShapeMismatchError(f"semantic batch {a.shape[0]} vs trunk batch {b}")
        # GroupNorm backward crashes on channels-last strides in some CPU builds
        a = a.contiguous(memory_format=torch.contiguous_format)
        f = f.contiguous(memory_format=torch.contiguous_format)
        a_tok = self.a_ln(self.a_proj(self.a_norm(a)).flatten(2).transpose(1, 2))
        a_prime = self.self_attn(a_tok, a_tok)
        q = self.q_ln(a_prime)
        f_tok = self.f_ln(self.f_proj(self.f_norm(f)).flatten(2).transpose(1, 2))
        if f_tok.shape[1] != q.shape[1]:
            raise ShapeMismatchError(f"semantic tokens {q.shape[1]} vs trunk tokens {f_tok.shape[1]}")
        f_prime = self.cross_attn(q, f_tok)
        fused = F.gelu(self.out_ln(f_prime)).transpose(1, 2).reshape(b, self.embed_dim, h, w)
        return torch.cat([self.out_proj(fused), f], dim=1)


def aff_fuse(module: AttentionFeatureFusion, a_level: torch.Tensor, f_level: torch.Tensor) -> torch.Tensor:
    return module(a_level, f_level)


class AnatomyAwareDiscriminator(nn.Module):
    """Strided conv trunk; AFF after each configured layer; 1-channel logit conv last."""

    def __init__(self, cfg: DiscriminatorConfig, semantic_channels: int):
        super().__init__()
        self.cfg = cfg
        chans = cfg.trunk_channels()
        self.convs = nn.ModuleList()
        self.fusions = nn.ModuleDict()
        cin = 1
        for idx, (cout, stride) in enumerate(zip(chans, cfg.strides), start=1):
            self.convs.append(nn.Conv2d(cin, cout, cfg.kernel_size, stride=stride, padding=1))
            cin = cout
            if idx in cfg.aff_layers:
                self.fusions[str(idx)] = AttentionFeatureFusion(
                    semantic_channels, cout, cfg.aff_embed_dim, cfg.num_heads, cfg.group_norm_groups)
                cin = cout + cfg.aff_embed_dim

    @property
    def conditioned(self) -> bool:
        return len(self.fusions) > 0

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k = self.cfg.kernel_size
        for s in self.cfg.strides:
            h = (h + 2 - k) // s + 1
            w = (w + 2 - k) // s + 1
        return h, w

    def forward(self, x: torch.Tensor, semantic=None) -> torch.Tensor:
        levels = None
        if self.conditioned:
            if semantic is None:
                raise ShapeMismatchError("conditioned discriminator needs a semantic pyramid")
            levels = dict(zip(self.cfg.aff_layers, semantic.levels() if hasattr(semantic, "levels") else semantic))
        n = len(self.convs)
        for idx, conv in enumerate(self.convs, start=1):
            x = conv(x)
            if idx == n:
                break
            x = F.leaky_relu(x, 0.2)
            if levels is not None and idx in levels:
                x = self.fusions[str(idx)](levels[idx], x)
        return x


def build_discriminator(cfg: DiscriminatorConfig, semantic_channels: int, conditioned: bool = True,
                        seed: int | None = None) -> AnatomyAwareDiscriminator:
    if not conditioned:
        from dataclasses import replace
        cfg = replace(cfg, aff_layers=())
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return AnatomyAwareDiscriminator(cfg, semantic_channels)
    return AnatomyAwareDiscriminator(cfg, semantic_channels)


def discriminate(model: AnatomyAwareDiscriminator, candidate: torch.Tensor, semantic) -> torch.Tensor:
    """Patch realism logits (B, 1, H_p, W_p) for ``candidate`` given Psi(Y)."""
    return model(candidate, semantic)
