"""CT slices, synthetic phantoms, dose simulation, windowing and on-disk pairs.

On-disk layout: each slice is a raw little-endian float32 row-major file with
a ``<file>.meta`` sidecar holding ``height=``, ``width=`` and optionally
``hu_offset=`` lines.  A manifest is UTF-8 text with one
``ldct_path<TAB>ndct_path<TAB>sample_id`` record per line; relative paths are
resolved against the manifest's directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import DISPLAY_WINDOW, HU_MAX, HU_MIN, DoseSimConfig
from .errors import DataLoadError, InvalidArgumentError, ShapeMismatchError

MIN_SIDE = 16

# optical depth of the notional water path used by the dose surrogate
WATER_OPTICAL_DEPTH = 2.0


@dataclass(frozen=True, eq=False)
class CTSlice:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise InvalidArgumentError(f"CT slice must be 2-D, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise InvalidArgumentError(f"CT slice must be at least {MIN_SIDE}x{MIN_SIDE}, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise InvalidArgumentError("CT slice contains non-finite values")
        px = np.clip(px, HU_MIN, HU_MAX)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PairedSample:
    ldct: CTSlice
    ndct: CTSlice
    sample_id: str

    def __post_init__(self):
        if self.ldct.pixels.shape != self.ndct.pixels.shape:
            raise ShapeMismatchError(
                f"pair '{self.sample_id}': LDCT {self.ldct.pixels.shape} vs NDCT {self.ndct.pixels.shape}")


@dataclass(frozen=True, eq=False)
class NormalizedImage:
    pixels: np.ndarray
    window_min: float = DISPLAY_WINDOW[0]
    window_max: float = DISPLAY_WINDOW[1]

    def __post_init__(self):
        if not self.window_min < self.window_max:
            raise InvalidArgumentError(f"window_min {self.window_min} must be below window_max {self.window_max}")
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise InvalidArgumentError(f"normalized image must be 2-D, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidArgumentError("normalized image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)


def make_phantom(height: int, width: int, num_structures: int, seed: int) -> CTSlice:
    """Piecewise-smooth ellipse phantom.

    The first ellipse is the body (soft tissue); later ones are organs
    (0..80 HU) or bone (400..1200 HU) placed inside it.  Everything outside
    the body stays at exactly -1000 HU.
    """
    if height < MIN_SIDE or width < MIN_SIDE:
        raise InvalidArgumentError(f"phantom must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}")
    if num_structures < 1:
        raise InvalidArgumentError("num_structures must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    # normalized coordinates in [-1, 1]
    yy = 2.0 * yy / (height - 1) - 1.0
    xx = 2.0 * xx / (width - 1) - 1.0

    img = np.full((height, width), -1000.0)
    body_a = rng.uniform(0.75, 0.92)
    body_b = rng.uniform(0.6, 0.85)
    body = (xx / body_a) ** 2 + (yy / body_b) ** 2 <= 1.0
    img[body] = rng.uniform(20.0, 60.0)

    for _ in range(num_structures - 1):
        a = rng.uniform(0.08, 0.35) * body_a
        b = rng.uniform(0.08, 0.35) * body_b
        cx = rng.uniform(-0.55, 0.55) * body_a
        cy = rng.uniform(-0.55, 0.55) * body_b
        theta = rng.uniform(0.0, math.pi)
        c, s = math.cos(theta), math.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0) & body
        value = rng.uniform(400.0, 1200.0) if rng.random() < 0.3 else rng.uniform(0.0, 80.0)
        img[mask] = value

    texture = gaussian_filter(rng.standard_normal((height, width)), sigma=1.5)
    texture *= 6.0 / max(float(texture.std()), 1e-12)
    img[body] += texture[body]
    return CTSlice(img)


def simulate_low_dose(ndct: CTSlice, cfg: DoseSimConfig) -> CTSlice:
    """Image-domain low-dose surrogate.

    Each pixel's HU value becomes an optical depth along a notional water
    path; counts are drawn from Poisson(N0 * dose * exp(-depth)) and mapped
    back, so HU noise variance scales as 1/dose.  ``n + 0.5`` removes the
    first-order bias of the log estimator.  Full dose without electronic
    noise is the reference itself.
    """
    px = np.asarray(ndct.pixels, dtype=np.float64)
    if not np.all(np.isfinite(px)):
        raise InvalidArgumentError("input slice contains non-finite pixels")
    if cfg.dose_fraction == 1.0 and cfg.electronic_noise_sigma == 0.0:
        return CTSlice(ndct.pixels.copy())
    rng = np.random.default_rng(cfg.seed)
    depth = WATER_OPTICAL_DEPTH * np.clip(1.0 + px / 1000.0, 0.0, None)
    blank = cfg.photon_count_full_dose * cfg.dose_fraction
    counts = rng.poisson(blank * np.exp(-depth))
    depth_hat = -np.log((counts + 0.5) / blank)
    out = 1000.0 * (depth_hat / WATER_OPTICAL_DEPTH - 1.0)
    if cfg.electronic_noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.electronic_noise_sigma, size=out.shape)
    return CTSlice(out)


def normalize_hu(slice_: CTSlice, window_min: float = DISPLAY_WINDOW[0],
                 window_max: float = DISPLAY_WINDOW[1]) -> NormalizedImage:
    if not window_min < window_max:
        raise InvalidArgumentError(f"window_min {window_min} must be below window_max {window_max}")
    px = np.asarray(slice_.pixels, dtype=np.float64)
    scaled = np.clip((px - window_min) / (window_max - window_min), 0.0, 1.0)
    return NormalizedImage(scaled.astype(np.float32), float(window_min), float(window_max))


def denormalize(img: NormalizedImage) -> CTSlice:
    px = np.asarray(img.pixels, dtype=np.float64)
    return CTSlice(px * (img.window_max - img.window_min) + img.window_min)


def hu_to_unit(pixels: np.ndarray, window_min: float, window_max: float) -> np.ndarray:
    """Array form of ``normalize_hu`` for batched code paths."""
    return np.clip((np.asarray(pixels, dtype=np.float64) - window_min) / (window_max - window_min),
                   0.0, 1.0).astype(np.float32)


def unit_to_hu(pixels: np.ndarray, window_min: float, window_max: float) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) * (window_max - window_min) + window_min


# --- on-disk slices -----------------------------------------------------------

def write_slice(slice_: CTSlice, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(slice_.pixels, dtype="<f4").tobytes())
    meta = Path(str(path) + ".meta")
    meta.write_text(f"height={slice_.height}\nwidth={slice_.width}\nhu_offset=0\n", encoding="utf-8")
    return path


def _read_meta(meta: Path) -> dict[str, float]:
    fields: dict[str, float] = {}
    for line in meta.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = float(value)
    return fields


def read_slice(path: str | Path, sample_id: str = "?") -> CTSlice:
    path = Path(path)
    meta = Path(str(path) + ".meta")
    try:
        fields = _read_meta(meta)
        h, w = int(fields["height"]), int(fields["width"])
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataLoadError(f"sample '{sample_id}': missing file {exc.filename}") from exc
    except (KeyError, ValueError) as exc:
        raise DataLoadError(f"sample '{sample_id}': malformed sidecar {meta}: {exc}") from exc
    if len(raw) != 4 * h * w:
        raise DataLoadError(
            f"sample '{sample_id}': {path} holds {len(raw)} bytes, expected {4 * h * w} for {h}x{w}")
    px = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32)
    offset = fields.get("hu_offset", 0.0)
    if offset:
        px = px + np.float32(offset)
    if not np.all(np.isfinite(px)):
        raise DataLoadError(f"sample '{sample_id}': {path} contains non-finite values")
    try:
        return CTSlice(px)
    except InvalidArgumentError as exc:
        raise DataLoadError(f"sample '{sample_id}': {exc}") from exc


@dataclass(frozen=True)
class ManifestRecord:
    ldct_path: Path
    ndct_path: Path
    sample_id: str


def read_manifest(manifest_path: str | Path) -> list[ManifestRecord]:
    manifest_path = Path(manifest_path)
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataLoadError(f"manifest not found: {manifest_path}") from exc
    root = manifest_path.parent
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataLoadError(f"{manifest_path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        ldct, ndct, sid = parts
        records.append(ManifestRecord(root / ldct, root / ndct, sid))
    return records


def write_manifest(records: Iterable[tuple[str, str, str]], manifest_path: str | Path) -> Path:
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{ldct}\t{ndct}\t{sid}\n" for ldct, ndct, sid in records]
    manifest_path.write_text("".join(lines), encoding="utf-8")
    return manifest_path


def load_sample(record: ManifestRecord) -> PairedSample:
    ldct = read_slice(record.ldct_path, record.sample_id)
    ndct = read_slice(record.ndct_path, record.sample_id)
    try:
        return PairedSample(ldct, ndct, record.sample_id)
    except ShapeMismatchError as exc:
        raise DataLoadError(str(exc)) from exc


def load_dataset(manifest_path: str | Path) -> list[PairedSample]:
    return [load_sample(r) for r in read_manifest(manifest_path)]


def stack_pairs(samples: Sequence[PairedSample], window_min: float, window_max: float):
    """Normalized (ldct, ndct) arrays of shape (B, 1, H, W)."""
    ldct = np.stack([hu_to_unit(s.ldct.pixels, window_min, window_max) for s in samples])[:, None]
    ndct = np.stack([hu_to_unit(s.ndct.pixels, window_min, window_max) for s in samples])[:, None]
    return ldct, ndct


def make_phantom_pairs(count: int, size: int, num_structures: int, dose: DoseSimConfig,
                       seed: int, prefix: str = "phantom") -> list[PairedSample]:
    """In-memory paired dataset; sample ``i`` uses seeds derived from (seed, i)."""
    out = []
    for i in range(count):
        phantom_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        ndct = make_phantom(size, size, num_structures, phantom_seed)
        sim = DoseSimConfig(dose.dose_fraction, dose.photon_count_full_dose,
                            dose.electronic_noise_sigma, seed=phantom_seed + dose.seed)
        out.append(PairedSample(simulate_low_dose(ndct, sim), ndct, f"{prefix}_{i:04d}"))
    return out
