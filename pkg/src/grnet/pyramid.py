"""Multi-scale window max-pooling of feature maps."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, reshape, transpose, window_max
from .errors import ConfigError, DimensionError

DEFAULT_SCALES: tuple[tuple[int, int], ...] = (
    (1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (3, 1), (3, 3),
)


@dataclass(frozen=True)
class PyramidConfig:
    """Ordered window grids, one ``(rows, cols)`` pair per scale (scale 1 first)."""

    scales: tuple[tuple[int, int], ...] = DEFAULT_SCALES

    def __post_init__(self):
        scales = tuple((int(r), int(c)) for r, c in self.scales)
        if not scales:
            raise ConfigError("pyramid config needs at least one scale")
        for r, c in scales:
            if r < 1 or c < 1:
                raise ConfigError(f"scale {r}x{c}: window counts must be >= 1")
        object.__setattr__(self, "scales", scales)

    @classmethod
    def parse(cls, text: str) -> PyramidConfig:
        """Parse ``"1x1,2x2,3x3"``."""
        try:
            pairs = [tuple(int(v) for v in tok.lower().split("x")) for tok in text.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad scale list {text!r}") from exc
        if any(len(p) != 2 for p in pairs):
            raise ConfigError(f"bad scale list {text!r}")
        return cls(tuple(pairs))

    def __str__(self) -> str:
        return ",".join(f"{r}x{c}" for r, c in self.scales)

    @property
    def has_global(self) -> bool:
        return self.scales[0] == (1, 1)

    @property
    def windows_per_scale(self) -> list[int]:
        return [r * c for r, c in self.scales]

    @property
    def num_windows(self) -> int:
        return sum(self.windows_per_scale)

    @property
    def num_nodes(self) -> int:
        return sum(n * n for n in self.windows_per_scale)

    @property
    def max_rows(self) -> int:
        return max(r for r, _ in self.scales)

    @property
    def max_cols(self) -> int:
        return max(c for _, c in self.scales)

    def check_map(self, height: int, width: int) -> None:
        if height < self.max_rows or width < self.max_cols:
            raise DimensionError(
                f"feature map {height}x{width} is smaller than the "
                f"{self.max_rows}x{self.max_cols} window grid in scales {self}"
            )


def window_bounds(size: int, parts: int, k: int) -> tuple[int, int]:
    """Half-open ``[floor(k*size/parts), floor((k+1)*size/parts))``."""
    return (k * size) // parts, ((k + 1) * size) // parts


@functools.lru_cache(maxsize=64)
def window_index_sets(height: int, width: int, scales: tuple[tuple[int, int], ...]):
    """Flat (row-major) pixel indices of every window, scale by scale."""
    sets = []
    for rows, cols in scales:
        for r in range(rows):
            r0, r1 = window_bounds(height, rows, r)
            for c in range(cols):
                c0, c1 = window_bounds(width, cols, c)
                ys, xs = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
                idx = (ys * width + xs).reshape(-1)
                idx.setflags(write=False)
                sets.append(idx)
    return tuple(sets)


@dataclass
class FeatureMap:
    """A ``C x H x W`` activation grid."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"feature map must be C x H x W, got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class PyramidFeatures:
    """Window vectors stacked as ``[..., M, C]`` with ``M = sum_l R_l*C_l``."""

    vectors: Tensor
    config: PyramidConfig

    def scale(self, l: int) -> np.ndarray:
        """Vectors of scale ``l`` (1-based), row-major window order."""
        counts = self.config.windows_per_scale
        start = sum(counts[: l - 1])
        return self.vectors.data[..., start:start + counts[l - 1], :]

    def __len__(self) -> int:
        return self.vectors.shape[-2]


def _as_tensor(fm) -> Tensor:
    if isinstance(fm, Tensor):
        return fm
    if isinstance(fm, FeatureMap):
        return Tensor(fm.data)
    return Tensor(np.asarray(fm))


def extract_pyramid(fm, cfg: PyramidConfig) -> PyramidFeatures:
    """Max-pool ``fm`` (``C x H x W`` or batched ``B x C x H x W``) over every window."""
    x = _as_tensor(fm)
    if x.ndim not in (3, 4):
        raise DimensionError(f"feature map must be C x H x W (or batched), got {x.shape}")
    c, h, w = x.shape[-3:]
    cfg.check_map(h, w)
    flat = reshape(x, x.shape[:-2] + (h * w,))
    pooled = window_max(flat, window_index_sets(h, w, cfg.scales))
    return PyramidFeatures(transpose(pooled), cfg)


def global_aggregate(fm) -> np.ndarray:
    """The whole-map max-pooled vector (the 1x1 pyramid window)."""
    return extract_pyramid(fm, PyramidConfig(((1, 1),))).vectors.data[..., 0, :]
