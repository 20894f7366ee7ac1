"""Similarity-pyramid graph: node vectors and attention edge weights."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    bmm,
    elementwise_sq_diff,
    gather,
    l2_normalize,
    matmul,
    reshape,
    softmax,
    transpose,
)
from .errors import ConfigError, DimensionError, LogicError
from .pyramid import PyramidConfig, PyramidFeatures

EPS = 1e-12
MASK_MODES = ("full", "intra", "inter", "none")


@dataclass(frozen=True, eq=False)
class NodeLayout:
    """Node ordering for a pyramid config: ascending scale, then query window, then gallery window."""

    scale: np.ndarray  # 1-based scale of each node
    query_window: np.ndarray  # window index within the scale
    gallery_window: np.ndarray
    query_row: np.ndarray  # row into the stacked [M, C] pyramid features
    gallery_row: np.ndarray

    def __len__(self) -> int:
        return len(self.scale)


@functools.lru_cache(maxsize=64)
def node_layout(cfg: PyramidConfig) -> NodeLayout:
    scale, qi, gj, qrow, grow = [], [], [], [], []
    offset = 0
    for l, n in enumerate(cfg.windows_per_scale, start=1):
        for i in range(n):
            for j in range(n):
                scale.append(l)
                qi.append(i)
                gj.append(j)
                qrow.append(offset + i)
                grow.append(offset + j)
        offset += n
    arrays = [np.asarray(a, dtype=np.intp) for a in (scale, qi, gj, qrow, grow)]
    for a in arrays:
        a.setflags(write=False)
    return NodeLayout(*arrays)


@dataclass(frozen=True)
class SimilarityNode:
    scale: int
    query_window: int
    gallery_window: int
    vector: np.ndarray


@dataclass
class NodeSet:
    """Node vectors ``[..., N, D]`` in :func:`node_layout` order."""

    vectors: Tensor
    layout: NodeLayout

    def __len__(self) -> int:
        return len(self.layout)

    def __iter__(self) -> Iterator[SimilarityNode]:
        if self.vectors.ndim != 2:
            raise LogicError("iterating nodes requires a single (unbatched) pair")
        lay = self.layout
        for k in range(len(lay)):
            yield SimilarityNode(int(lay.scale[k]), int(lay.query_window[k]),
                                 int(lay.gallery_window[k]), self.vectors.data[k])


@dataclass
class EdgeTransform:
    """Incoming/outgoing edge transforms of one reasoning layer."""

    t_in: Parameter
    t_out: Parameter

    def __post_init__(self):
        if self.t_in.shape != self.t_out.shape or self.t_in.ndim != 2 \
                or self.t_in.shape[0] != self.t_in.shape[1]:
            raise DimensionError(
                f"edge transforms must be equal square matrices, got "
                f"{self.t_in.shape} and {self.t_out.shape}"
            )

    @property
    def dim(self) -> int:
        return self.t_in.shape[0]


@dataclass(frozen=True)
class EdgeMask:
    """Which (target, source) node pairs may exchange messages.

    ``mode``: ``full`` (every pair), ``intra`` (same scale only), ``inter``
    (different scales only, plus a self-loop per node) or ``none``
    (self-loops only).  ``keep_global`` additionally links the global node
    with every other node in both directions.  ``scales`` (1-based) restricts
    message passing to nodes of those scales; nodes outside it keep only a
    self-loop, and the global node is always a participant.
    """

    mode: str = "full"
    keep_global: bool = False
    scales: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mode!r}; expected one of {MASK_MODES}")
        if self.scales is not None:
            object.__setattr__(self, "scales", tuple(sorted(int(s) for s in self.scales)))

    def matrix(self, layout: NodeLayout) -> np.ndarray:
        return _mask_matrix(self, layout)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "keep_global": self.keep_global,
                "scales": list(self.scales) if self.scales is not None else None}

    @classmethod
    def from_dict(cls, d: dict) -> EdgeMask:
        scales = d.get("scales")
        return cls(d.get("mode", "full"), bool(d.get("keep_global", False)),
                   tuple(scales) if scales is not None else None)


@functools.lru_cache(maxsize=128)
def _mask_matrix(mask: EdgeMask, layout: NodeLayout) -> np.ndarray:
    s = layout.scale
    n = len(s)
    same = s[:, None] == s[None, :]
    if mask.mode == "full":
        m = np.ones((n, n), dtype=bool)
    elif mask.mode == "intra":
        m = same.copy()
    elif mask.mode == "inter":
        m = ~same
    else:
        m = np.zeros((n, n), dtype=bool)
    if mask.keep_global and n:
        m[0, :] = True
        m[:, 0] = True
    if mask.scales is not None:
        active = np.isin(s, mask.scales)
        active[0] = True
        m &= active[:, None] & active[None, :]
    if mask.mode in ("inter", "none") or mask.scales is not None:
        np.fill_diagonal(m, True)
    if not m.any(axis=1).all():
        bad = int(np.flatnonzero(~m.any(axis=1))[0])
        raise ConfigError(f"edge mask {mask} leaves node {bad} without sources")
    m.setflags(write=False)
    return m


def apply_rows(v: Tensor, mat: Tensor) -> Tensor:
    """Apply ``mat`` to each trailing-axis vector of ``v``: ``v @ mat.T``."""
    lead = v.shape[:-1]
    flat = reshape(v, (-1, v.shape[-1]))
    return reshape(matmul(flat, transpose(mat)), lead + (mat.shape[0],))


def similarity_vector(x: Tensor, y: Tensor, proj: Tensor, eps: float = EPS) -> Tensor:
    """``P |x - y|^2`` normalized to unit length (zero when ``x == y``)."""
    if x.shape != y.shape or x.shape[-1:] != (proj.shape[1],):
        raise DimensionError(
            f"similarity_vector: x {x.shape}, y {y.shape} incompatible with P {proj.shape}"
        )
    return l2_normalize(apply_rows(elementwise_sq_diff(x, y), proj), eps)


def build_nodes(q: PyramidFeatures, g: PyramidFeatures, proj: Tensor, eps: float = EPS) -> NodeSet:
    """One node per same-scale (query window, gallery window) pair."""
    if q.config != g.config:
        raise LogicError(f"pyramid configs differ: {q.config} vs {g.config}")
    if q.vectors.shape != g.vectors.shape:
        raise DimensionError(f"pyramid shapes differ: {q.vectors.shape} vs {g.vectors.shape}")
    layout = node_layout(q.config)
    xq = gather(q.vectors, layout.query_row, axis=-2)
    xg = gather(g.vectors, layout.gallery_row, axis=-2)
    return NodeSet(similarity_vector(xq, xg, proj, eps), layout)


def edge_logits(v: Tensor, et: EdgeTransform) -> Tensor:
    """``logit[t, s] = (T_out v_t) . (T_in v_s)``."""
    if v.shape[-1] != et.dim:
        raise DimensionError(f"edge transforms are {et.dim}-dim, node vectors {v.shape}")
    out = apply_rows(v, et.t_out)
    inc = apply_rows(v, et.t_in)
    if v.ndim == 2:
        return matmul(out, transpose(inc))
    return bmm(out, transpose(inc))


def edge_weights(v: Tensor, et: EdgeTransform, mask: np.ndarray) -> Tensor:
    """Row-stochastic ``[..., N, N]`` weights; entry ``(target, source)``."""
    n = v.shape[-2]
    if mask.shape != (n, n):
        raise DimensionError(f"mask {mask.shape} does not match {n} nodes")
    if not mask.any(axis=1).all():
        raise ConfigError("edge mask has a row with zero enabled sources")
    return softmax(edge_logits(v, et), mask)
