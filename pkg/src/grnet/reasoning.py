"""Graph reasoning over similarity nodes and the match classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add_bias,
    bmm,
    cross_entropy_with_logits,
    gather,
    matmul,
    mean,
    relu,
    reshape,
    transpose,
)
from .errors import ConfigError, DimensionError, InputError
from .pyramid import PyramidConfig, PyramidFeatures, extract_pyramid
from .simgraph import (
    EdgeMask,
    EdgeTransform,
    apply_rows,
    build_nodes,
    edge_weights,
    node_layout,
)

EDGE_MODES = ("recompute", "frozen")


@dataclass(frozen=True)
class ReasoningConfig:
    iterations: int = 3
    hidden: int = 128
    dim: int = 512
    edge_mode: str = "recompute"
    mask: EdgeMask = field(default_factory=EdgeMask)

    def __post_init__(self):
        for name in ("iterations", "hidden", "dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.edge_mode not in EDGE_MODES:
            raise ConfigError(f"edge_mode must be one of {EDGE_MODES}, got {self.edge_mode!r}")

    def layer_input_dims(self) -> list[int]:
        return [self.dim] + [self.hidden] * (self.iterations - 1)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "hidden": self.hidden, "dim": self.dim,
                "edge_mode": self.edge_mode, "mask": self.mask.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> ReasoningConfig:
        return cls(int(d["iterations"]), int(d["hidden"]), int(d["dim"]),
                   d.get("edge_mode", "recompute"), EdgeMask.from_dict(d.get("mask", {})))


@dataclass
class GcnLayer:
    weight: Parameter  # hidden x input_dim
    edges: EdgeTransform | None  # None: reuse the first layer's edge weights


@dataclass
class ModelParams:
    """Everything the network learns, plus the configs that fix its shapes."""

    channels: int
    pyramid: PyramidConfig
    reasoning: ReasoningConfig
    proj: Parameter
    layers: list[GcnLayer]
    head_weight: Parameter
    head_bias: Parameter

    def parameters(self) -> list[Parameter]:
        """All parameters in checkpoint order."""
        out = [self.proj]
        for layer in self.layers:
            if layer.edges is not None:
                out += [layer.edges.t_in, layer.edges.t_out]
            out.append(layer.weight)
        return out + [self.head_weight, self.head_bias]

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    @property
    def dtype(self):
        return self.proj.dtype

    @classmethod
    def zeros(cls, channels: int, pyramid: PyramidConfig, reasoning: ReasoningConfig,
              dtype=np.float64) -> ModelParams:
        """Shape-correct all-zero parameters; see ``training.init_params`` for random init."""
        if not pyramid.has_global:
            raise ConfigError(f"scale 1 must be the 1x1 global window, got {pyramid}")
        z = lambda shape: np.zeros(shape, dtype=dtype)  # noqa: E731
        layers = []
        for t, d in enumerate(reasoning.layer_input_dims(), start=1):
            edges = None
            if t == 1 or reasoning.edge_mode == "recompute":
                edges = EdgeTransform(Parameter(z((d, d)), f"layer{t}.t_in"),
                                      Parameter(z((d, d)), f"layer{t}.t_out"))
            layers.append(GcnLayer(Parameter(z((reasoning.hidden, d)), f"layer{t}.weight"), edges))
        return cls(
            channels, pyramid, reasoning,
            Parameter(z((reasoning.dim, channels)), "proj"),
            layers,
            Parameter(z((2, reasoning.hidden)), "head.weight"),
            Parameter(z((2,)), "head.bias", decay=False),
        )


@dataclass
class MatchResult:
    logits: Tensor
    score: np.ndarray | float


def propagate(v: Tensor, weights: Tensor) -> Tensor:
    """Each output row is the weight-row combination of the input rows."""
    if weights.shape[-1] != v.shape[-2] or weights.shape[:-2] != v.shape[:-2]:
        raise DimensionError(f"propagate: weights {weights.shape} vs node vectors {v.shape}")
    if v.ndim == 2:
        return matmul(weights, v)
    return bmm(weights, v)


def gcn_layer(v: Tensor, layer: GcnLayer, mask: np.ndarray,
              weights: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """One round of propagation, projection and ReLU.

    Returns ``(h, w)`` where ``w`` are the edge weights used, computed from
    ``v`` unless the layer has no edge transforms (then ``weights`` is reused).
    """
    if v.shape[-1] != layer.weight.shape[1]:
        raise DimensionError(f"layer expects {layer.weight.shape[1]}-dim nodes, got {v.shape}")
    if layer.edges is not None:
        weights = edge_weights(v, layer.edges, mask)
    elif weights is None:
        raise ConfigError("layer has no edge transforms and no weights to reuse")
    return relu(apply_rows(propagate(v, weights), layer.weight)), weights


def reason(node_vectors: Tensor, model: ModelParams) -> Tensor:
    """Run every layer; returns the final node vectors ``[..., N, hidden]``."""
    cfg = model.reasoning
    mask = cfg.mask.matrix(node_layout(model.pyramid))
    h, w = node_vectors, None
    for layer in model.layers:
        h, w = gcn_layer(h, layer, mask, w)
    return h


def head_logits(global_vec: Tensor, model: ModelParams) -> Tensor:
    if global_vec.ndim == 1:
        return add_bias(reshape(matmul(model.head_weight, reshape(global_vec, (-1, 1))), (2,)),
                        model.head_bias)
    return add_bias(matmul(global_vec, transpose(model.head_weight)), model.head_bias)


def forward_pyramids(q: PyramidFeatures, g: PyramidFeatures, model: ModelParams) -> Tensor:
    """Logits ``[..., 2]`` from precomputed pyramid features (batched or not)."""
    if q.vectors.shape[-1] != model.channels:
        raise DimensionError(f"model expects {model.channels} channels, got {q.vectors.shape}")
    nodes = build_nodes(q, g, model.proj)
    h = reason(nodes.vectors, model)
    lead = h.shape[:-2]
    glob = reshape(gather(h, np.array([0]), axis=-2), lead + (h.shape[-1],))
    return head_logits(glob, model)


def match_score(logits: np.ndarray) -> np.ndarray:
    """Probability of the "same item" class from 2-class logits."""
    logits = np.asarray(logits)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(logits[..., 0] - logits[..., 1]))


def forward(q, g, model: ModelParams) -> MatchResult:
    """Score a query/gallery pair of feature maps (or batches of them)."""
    qp = extract_pyramid(q, model.pyramid)
    gp = extract_pyramid(g, model.pyramid)
    logits = forward_pyramids(qp, gp, model)
    return MatchResult(logits, match_score(logits.data))


def loss(result: MatchResult | Tensor, label) -> Tensor:
    """Cross-entropy of the logits against label(s) in {0, 1}; mean over a batch."""
    logits = result.logits if isinstance(result, MatchResult) else result
    labels = np.asarray(label)
    if labels.dtype == bool or not np.isin(labels, (0, 1)).all():
        raise InputError(f"labels must be 0 or 1, got {label!r}")
    ce = cross_entropy_with_logits(logits, labels.astype(np.intp))
    return mean(ce)
