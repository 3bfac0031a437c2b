"""Loss functions: L1 fidelity, adversarial (logit form), semantic contrastive, total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ObjectiveConfig
from .errors import InvalidArgumentError, NumericError, ShapeMismatchError

COSINE_EPS = 1e-8


@dataclass
class LossReport:
    l1: float
    adv_g: float
    adv_d: float
    scl: float
    total: float

    def __post_init__(self):
        for name in ("l1", "adv_g", "adv_d", "scl", "total"):
            if not math.isfinite(getattr(self, name)):
                raise NumericError(f"loss report field '{name}' is not finite")

    def as_record(self, step: int) -> str:
        return "\t".join([str(step)] + [repr(float(v)) for v in
                                        (self.l1, self.adv_g, self.adv_d, self.scl, self.total)])


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite {what}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"l1_loss: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def adversarial_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-mean log sigmoid(real) - mean log(1 - sigmoid(fake))."""
    _check_finite(real_logits, "real logits")
    _check_finite(fake_logits, "fake logits")
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def adversarial_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term -mean log sigmoid(fake)."""
    _check_finite(fake_logits, "fake logits")
    return F.softplus(-fake_logits).mean()


@dataclass
class ContrastiveBatch:
    """Anchors and their positive / negative features on one feature grid.

    Flat indices address a row-major ``H_f x W_f`` grid: ``idx = y * W_f + x``.
    ``anchor`` carries gradient from the denoised features; the positive and
    both negative sets are detached.
    """

    anchor_idx: torch.Tensor  # (B, K) long
    neg2_idx: torch.Tensor  # (B, K, M) long
    grid: tuple[int, int]
    anchor: torch.Tensor  # (B, K, C) from F_yhat
    positive: torch.Tensor  # (B, K, C) from F_y
    neg1: torch.Tensor  # (B, K, C) from F_x
    neg2: torch.Tensor  # (B, K, M, C) from F_y

    def anchor_coords(self) -> torch.Tensor:
        """(B, K, 2) integer (x, y) coordinates."""
        w = self.grid[1]
        return torch.stack([self.anchor_idx % w, self.anchor_idx // w], dim=-1)

    def neg2_coords(self) -> torch.Tensor:
        w = self.grid[1]
        return torch.stack([self.neg2_idx % w, self.neg2_idx // w], dim=-1)


def _gather(feat: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    # feat (B, C, H, W), idx (B, ...) -> (B, ..., C)
    b, c = feat.shape[:2]
    flat = feat.reshape(b, c, -1).transpose(1, 2)  # (B, HW, C)
    lead = idx.shape[1:]
    picked = torch.gather(flat, 1, idx.reshape(b, -1, 1).expand(-1, -1, c))
    return picked.reshape(b, *lead, c)


def sample_contrastive_batch(f_x: torch.Tensor, f_yhat: torch.Tensor, f_y: torch.Tensor,
                             cfg: ObjectiveConfig, seed: int) -> ContrastiveBatch:
    """Draw K anchors per image and M cross-location negatives per anchor.

    Anchors are distinct within an image; each anchor's M negatives are
    distinct and never equal the anchor.  Everything is a function of
    ``seed`` alone.
    """
    if not (f_x.shape == f_yhat.shape == f_y.shape) or f_x.dim() != 4:
        raise ShapeMismatchError(
            f"feature batches disagree: {tuple(f_x.shape)}, {tuple(f_yhat.shape)}, {tuple(f_y.shape)}")
    b, _, h, w = f_x.shape
    n = h * w
    if cfg.K > n:
        raise InvalidArgumentError(f"K={cfg.K} exceeds the {n} coordinates of a {h}x{w} grid")
    if cfg.M > n - 1:
        raise InvalidArgumentError(f"M={cfg.M} exceeds the {n - 1} non-anchor coordinates of a {h}x{w} grid")
    gen = torch.Generator().manual_seed(int(seed))
    anchor_idx = torch.rand(b, n, generator=gen).argsort(dim=1)[:, :cfg.K]
    # choose among the n-1 other positions, then skip over the anchor
    others = torch.rand(b, cfg.K, n - 1, generator=gen).argsort(dim=2)[:, :, :cfg.M]
    neg2_idx = others + (others >= anchor_idx.unsqueeze(-1)).long()
    f_x = f_x.detach()
    f_y = f_y.detach()
    return ContrastiveBatch(
        anchor_idx=anchor_idx,
        neg2_idx=neg2_idx,
        grid=(h, w),
        anchor=_gather(f_yhat, anchor_idx),
        positive=_gather(f_y, anchor_idx),
        neg1=_gather(f_x, anchor_idx),
        neg2=_gather(f_y, neg2_idx),
    )


def _unit(v: torch.Tensor, what: str, batch: ContrastiveBatch) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    zero = norm.squeeze(-1) == 0
    if zero.any():
        loc = tuple(int(i) for i in zero.nonzero()[0])
        if what == "neg2":
            i, k, m = loc
            flat = int(batch.neg2_idx[i, k, m])
        else:
            i, k = loc[:2]
            flat = int(batch.anchor_idx[i, k])
        x, y = flat % batch.grid[1], flat // batch.grid[1]
        raise NumericError(f"zero-norm {what} feature in sample {i} at coordinate (x={x}, y={y})")
    return v / (norm + COSINE_EPS)


def scl_loss(batch: ContrastiveBatch, cfg: ObjectiveConfig) -> torch.Tensor:
    """InfoNCE over one positive, one same-location LDCT negative, M cross-location negatives."""
    anchor = _unit(batch.anchor, "anchor", batch)
    pos = _unit(batch.positive, "positive", batch)
    neg1 = _unit(batch.neg1, "neg1", batch)
    s_pos = (anchor * pos).sum(-1)  # (B, K)
    s_neg1 = (anchor * neg1).sum(-1)
    logits = [s_pos.unsqueeze(-1), s_neg1.unsqueeze(-1)]
    if batch.neg2.shape[2] > 0:
        neg2 = _unit(batch.neg2, "neg2", batch)
        logits.append((anchor.unsqueeze(2) * neg2).sum(-1))  # (B, K, M)
    logits = torch.cat(logits, dim=-1) / cfg.tau
    return (torch.logsumexp(logits, dim=-1) - logits[..., 0]).mean()


def total_loss(l1, adv_g, scl, cfg: ObjectiveConfig):
    total = l1
    if cfg.enable_aad:
        total = total + cfg.lambda1 * adv_g
    if cfg.enable_scl:
        total = total + cfg.lambda2 * scl
    return total
