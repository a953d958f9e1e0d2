"""Region-weighted reconstruction loss with pluggable per-region metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import (
    ConfigError,
    DuplicateMetricError,
    FormatVersionError,
    ParseError,
    ShapeError,
    UnknownMetricError,
)
from .regions import REGIONS, RegionLabel, TokenGrid

Metric = Callable[[np.ndarray, np.ndarray], float]


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def mae(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


BUILTIN_METRICS: dict[str, Metric] = {"mse": mse, "mae": mae}


class MetricRegistry:
    """Name -> metric table.  Call ``freeze()`` before sharing across threads."""

    def __init__(self, builtins: bool = True):
        self._metrics: dict[str, Metric] = dict(BUILTIN_METRICS) if builtins else {}
        self._frozen = False

    def register(self, name: str, metric: Metric) -> Metric:
        if self._frozen:
            raise RuntimeError("metric registry is frozen")
        if name in self._metrics:
            raise DuplicateMetricError(f"metric {name!r} is already registered")
        if not callable(metric):
            raise TypeError("metric must be callable")
        self._metrics[name] = metric
        return metric

    def get(self, name: str) -> Metric:
        try:
            return self._metrics[name]
        except KeyError:
            raise UnknownMetricError(f"no metric registered as {name!r}") from None

    def freeze(self) -> "MetricRegistry":
        self._frozen = True
        return self

    def __contains__(self, name) -> bool:
        return name in self._metrics

    def names(self) -> list[str]:
        return sorted(self._metrics)


default_registry = MetricRegistry()


def register_metric(name: str, metric: Metric, registry: MetricRegistry | None = None) -> Metric:
    return (registry or default_registry).register(name, metric)


@dataclass(frozen=True)
class ImagePair:
    x: np.ndarray  # (H, W, C) ground truth
    x_hat: np.ndarray  # (H, W, C) generated

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        xh = np.asarray(self.x_hat, dtype=np.float64)
        if x.shape != xh.shape or x.ndim != 3:
            raise ShapeError(f"image pair must share an (H, W, C) shape, got {x.shape} and {xh.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xh))):
            raise ValueError("images must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_hat", xh)


@dataclass(frozen=True)
class RegionPixelMask:
    masks: Mapping[RegionLabel, np.ndarray]  # region -> (H, W) bool

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.masks.values())).shape

    def background(self) -> np.ndarray:
        covered = np.zeros(self.shape, dtype=bool)
        for m in self.masks.values():
            covered |= m
        return ~covered


def rasterize_labels(frame_labels, grid: TokenGrid, image_size: tuple[int, int]) -> RegionPixelMask:
    """Pixel masks from one frame's token labels; pixel (y, x) takes token (y // p, x // p)."""
    w, h = image_size
    if not grid.covers(image_size):
        raise ShapeError(f"token grid {grid.extent} does not cover image {image_size}")
    lab = np.asarray(frame_labels).reshape(grid.height_tokens, grid.width_tokens)
    ys = np.arange(h) // grid.patch_size
    xs = np.arange(w) // grid.patch_size
    pix = lab[ys[:, None], xs[None, :]]
    return RegionPixelMask({r: pix == r for r in REGIONS})


@dataclass(frozen=True)
class RegionLossConfig:
    weights: Mapping[RegionLabel, float] = field(default_factory=lambda: {r: 1.0 for r in REGIONS})
    metrics: Mapping[RegionLabel, str] = field(default_factory=lambda: {r: "mse" for r in REGIONS})
    lambda_region: float = 1.0
    normalize: bool = False

    def __post_init__(self):
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("region weights must be >= 0")
        if not any(w > 0 for w in self.weights.values()):
            raise ConfigError("at least one region weight must be positive")
        if self.lambda_region < 0:
            raise ConfigError("lambda_region must be >= 0")


def region_loss(pair: ImagePair, masks: RegionPixelMask, cfg: RegionLossConfig = RegionLossConfig(),
                registry: MetricRegistry | None = None) -> tuple[float, dict[RegionLabel, float]]:
    """Weighted sum over regions of ``metric(m_r * x, m_r * x_hat)``.

    Metrics see full-size images zeroed outside the region.  With
    ``cfg.normalize`` each term is rescaled by ``pixels / region_pixels`` so a
    mean-type metric becomes a per-region average.
    """
    registry = registry or default_registry
    if masks.shape != pair.x.shape[:2]:
        raise ShapeError(f"masks are {masks.shape}, images are {pair.x.shape[:2]}")
    total = 0.0
    per_region: dict[RegionLabel, float] = {}
    for region, weight in cfg.weights.items():
        metric = registry.get(cfg.metrics.get(region, "mse"))
        m = masks.masks.get(region)
        if m is None:
            raise ShapeError(f"no pixel mask for region {region!r}")
        mf = m[..., None].astype(np.float64)
        value = float(metric(mf * pair.x, mf * pair.x_hat))
        if cfg.normalize:
            area = int(m.sum())
            value = value * m.size / area if area else 0.0
        per_region[region] = value
        total += weight * value
    return total, per_region


def final_objective(dmd_loss: float, region_total: float, lambda_region: float) -> float:
    return dmd_loss + lambda_region * region_total


_IM_MAGIC = b"PSIM"
_IM_VERSION = 1


def save_raster(image, path) -> None:
    """Raster layout: ``b"PSIM"``, u32 version, u32 height, u32 width,
    u32 channels, then row-major little-endian float32 (H, W, C)."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ShapeError(f"raster must be (H, W) or (H, W, C), got {arr.shape}")
    h, w, c = arr.shape
    Path(path).write_bytes(_IM_MAGIC + struct.pack("<IIII", _IM_VERSION, h, w, c) + np.ascontiguousarray(arr).tobytes())


def load_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _IM_MAGIC or len(data) < 20:
        raise ParseError(f"{path}: not a raster file")
    version, h, w, c = struct.unpack_from("<IIII", data, 4)
    if version != _IM_VERSION:
        raise FormatVersionError(f"{path}: unsupported raster version {version}")
    if len(data) != 20 + 4 * h * w * c:
        raise ParseError(f"{path}: pixel payload does not match header")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(h, w, c).astype(np.float32)
