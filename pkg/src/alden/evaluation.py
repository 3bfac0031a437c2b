"""Image-quality metrics and dataset reports.

PSNR and SSIM are computed on window-normalized images with data range 1.
RMSE is reported in HU over the same window, i.e. ``rmse_normalized *
(window_max - window_min)``.  ``perceptual`` is a feature-space distance on
the frozen backbone, not LPIPS.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.signal import convolve2d

from .backbone import VisionBackbone
from .data import CTSlice, NormalizedImage, PairedSample, hu_to_unit, unit_to_hu
from .errors import AldenError, InvalidArgumentError, ShapeMismatchError
from .generator import UNetGenerator

PSNR_IDENTICAL = math.inf

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

METRICS = ("psnr", "ssim", "rmse", "perceptual")


def _pixels(x) -> np.ndarray:
    if isinstance(x, (CTSlice, NormalizedImage)):
        x = x.pixels
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    a, b = _pixels(pred), _pixels(target)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"metric inputs disagree: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, target, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    if data_range <= 0:
        raise InvalidArgumentError("data_range must be > 0")
    a, b = _pair(pred, target)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(data_range ** 2 / mse)


def _gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Mean SSIM over every fully-contained 11x11 Gaussian window."""
    a, b = _pair(pred, target)
    if a.ndim != 2:
        raise InvalidArgumentError(f"ssim expects 2-D images, got {a.shape}")
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise InvalidArgumentError(f"image {a.shape} is smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    w = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(x):
        # symmetric kernel, so convolution == correlation
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def rmse_hu(pred, target) -> float:
    a, b = _pair(pred, target)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def perceptual_distance(pred, target, backbone: VisionBackbone) -> float:
    """Mean squared difference of unit-normalized dense backbone features."""
    a, b = _pair(pred, target)
    with torch.no_grad():
        fa = backbone.extract_dense(torch.from_numpy(a).float()).values
        fb = backbone.extract_dense(torch.from_numpy(b).float()).values
    fa = fa / (fa.norm(dim=1, keepdim=True) + 1e-8)
    fb = fb / (fb.norm(dim=1, keepdim=True) + 1e-8)
    return float(((fa.double() - fb.double()) ** 2).mean())


@dataclass
class SampleMetrics:
    sample_id: str
    psnr: float
    ssim: float
    rmse: float
    perceptual: float


@dataclass
class MetricReport:
    per_sample: list[SampleMetrics]
    window_min: float
    window_max: float
    name: str = "model"
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate(self.per_sample)

    def records(self) -> list[dict]:
        rows = [{"row": self.name, **asdict(s)} for s in self.per_sample]
        rows.append({"row": self.name, "aggregate": self.aggregate,
                     "window": [self.window_min, self.window_max], "count": len(self.per_sample)})
        return rows


def aggregate(per_sample: Sequence[SampleMetrics]) -> dict[str, dict[str, float]]:
    out = {}
    for m in METRICS:
        vals = np.array([getattr(s, m) for s in per_sample], dtype=np.float64)
        if len(vals) == 0:
            out[m] = {"mean": math.nan, "std": math.nan}
        elif np.all(np.isinf(vals)):
            out[m] = {"mean": float(vals[0]), "std": 0.0}
        else:
            with np.errstate(invalid="ignore"):
                out[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def score_pair(pred_unit: np.ndarray, target_unit: np.ndarray, backbone: VisionBackbone,
               window_min: float, window_max: float, sample_id: str) -> SampleMetrics:
    return SampleMetrics(
        sample_id=sample_id,
        psnr=psnr(pred_unit, target_unit, 1.0),
        ssim=ssim(pred_unit, target_unit, 1.0),
        rmse=rmse_hu(unit_to_hu(pred_unit, window_min, window_max), unit_to_hu(target_unit, window_min, window_max)),
        perceptual=perceptual_distance(pred_unit, target_unit, backbone),
    )


def denoise_pixels(generator: UNetGenerator, ldct_unit: np.ndarray) -> np.ndarray:
    generator.eval()
    with torch.no_grad():
        out = generator(torch.from_numpy(np.asarray(ldct_unit, dtype=np.float32))[None, None])
    return out[0, 0].numpy()


def evaluate_dataset(generator: UNetGenerator | None, dataset: Sequence[PairedSample], backbone: VisionBackbone,
                     window_min: float, window_max: float, name: str = "model") -> MetricReport:
    """Denoise every LDCT (or pass it through when ``generator`` is None) and score against NDCT."""
    rows = []
    for s in dataset:
        try:
            x = hu_to_unit(s.ldct.pixels, window_min, window_max)
            y = hu_to_unit(s.ndct.pixels, window_min, window_max)
            pred = denoise_pixels(generator, x) if generator is not None else x
            rows.append(score_pair(pred, y, backbone, window_min, window_max, s.sample_id))
        except AldenError as exc:
            raise type(exc)(f"sample '{s.sample_id}': {exc}") from exc
    return MetricReport(rows, window_min, window_max, name=name)


def _fmt(v: float, digits: int) -> str:
    return "inf" if math.isinf(v) else f"{v:.{digits}f}"


def format_table(reports: Sequence[MetricReport], per_sample: bool = True) -> str:
    head = reports[0]
    lines = [f"# window [{head.window_min:g}, {head.window_max:g}] HU; PSNR/SSIM on unit range, RMSE in HU",
             f"{'row':<10} {'sample':<20} {'PSNR':>9} {'SSIM':>8} {'RMSE':>9} {'perceptual':>11}"]
    for rep in reports:
        if per_sample:
            for s in rep.per_sample:
                lines.append(f"{rep.name:<10} {s.sample_id:<20} {_fmt(s.psnr, 3):>9} {_fmt(s.ssim, 4):>8} "
                             f"{_fmt(s.rmse, 3):>9} {_fmt(s.perceptual, 6):>11}")
        agg = rep.aggregate
        lines.append(f"{rep.name:<10} {'MEAN':<20} {_fmt(agg['psnr']['mean'], 3):>9} {_fmt(agg['ssim']['mean'], 4):>8} "
                     f"{_fmt(agg['rmse']['mean'], 3):>9} {_fmt(agg['perceptual']['mean'], 6):>11}")
    return "\n".join(lines) + "\n"


def write_report(reports: Sequence[MetricReport], out_path: str | Path) -> tuple[Path, Path]:
    """JSON-lines records at ``out_path`` plus a human table next to it (``.txt``)."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for rep in reports:
            for rec in rep.records():
                fh.write(json.dumps(rec) + "\n")
    table = out_path.with_suffix(".txt")
    table.write_text(format_table(reports), encoding="utf-8")
    return out_path, table
