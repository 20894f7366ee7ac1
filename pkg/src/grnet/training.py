"""Pair sampling, initialization, SGD and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import GradCheckReport, Parameter, Tensor, grad_check, no_grad
from .config import RunConfig
from .data import Dataset, atomic_write
from .errors import DataError, NumericError
from .evaluation import GRNetScorer, evaluate_all, score_all
from .pyramid import PyramidConfig, PyramidFeatures, extract_pyramid
from .reasoning import ModelParams, ReasoningConfig, forward_pyramids, loss, reason
from .simgraph import EdgeMask, build_nodes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairSample:
    query: str
    gallery: str
    label: int


@dataclass(frozen=True)
class BatchSpec:
    identities: int = 32
    images_per_identity: int = 2
    neg_ratio: float = 1.0
    full_cross: bool = False

    @property
    def images(self) -> int:
        return self.identities * self.images_per_identity


def init_params(channels: int, pyramid: PyramidConfig, reasoning: ReasoningConfig,
                rng: np.random.Generator, dtype=np.float64) -> ModelParams:
    """He-normal weight matrices (std ``sqrt(2 / fan_in)``), zero biases."""
    model = ModelParams.zeros(channels, pyramid, reasoning, dtype)
    for p in model.parameters():
        if p.ndim == 2:
            p.data[...] = rng.normal(0.0, math.sqrt(2.0 / p.shape[1]), size=p.shape)
    return model


class PairSampler:
    """Draws identity-balanced query/gallery pair batches from one split."""

    def __init__(self, records, split: str = "train"):
        groups: dict[str, dict[str, list[str]]] = {}
        for r in records:
            if r.split == split:
                groups.setdefault(r.identity, {"query": [], "gallery": []})[r.role].append(r.id)
        self.identities = sorted(i for i, g in groups.items() if g["query"] and g["gallery"])
        self.groups = {i: {k: sorted(v) for k, v in groups[i].items()} for i in self.identities}

    def sample(self, spec: BatchSpec, rng: np.random.Generator) -> list[PairSample]:
        k = spec.identities
        if len(self.identities) < k:
            raise DataError(f"batch needs {k} identities with a query and a gallery image, "
                            f"only {len(self.identities)} available "
                            f"(short by {k - len(self.identities)})", "E_INSUFFICIENT_IDENTITIES")
        picked = [self.identities[i] for i in rng.choice(len(self.identities), k, replace=False)]
        per = spec.images_per_identity // 2
        queries, galleries = [], []
        for ident in picked:
            g = self.groups[ident]
            queries.append([g["query"][i] for i in rng.integers(len(g["query"]), size=per)])
            galleries.append([g["gallery"][i] for i in rng.integers(len(g["gallery"]), size=per)])

        pairs = [PairSample(queries[a][n], galleries[a][n], 1) for a in range(k) for n in range(per)]
        cross = [(a, b) for a in range(k) for b in range(k) if a != b]
        if spec.full_cross:
            chosen = range(len(cross))
        else:
            n_neg = min(int(round(spec.neg_ratio * len(pairs))), len(cross))
            chosen = np.sort(rng.choice(len(cross), n_neg, replace=False))
        for c in chosen:
            a, b = cross[c]
            pairs.append(PairSample(queries[a][rng.integers(per)], galleries[b][rng.integers(per)], 0))
        return pairs


def sample_batch(records, spec: BatchSpec, rng: np.random.Generator,
                 split: str = "train") -> list[PairSample]:
    return PairSampler(records, split).sample(spec, rng)


@dataclass
class SGD:
    """SGD with momentum and decoupled-from-bias L2 weight decay."""

    params: list[Parameter]
    momentum: float = 0.9
    weight_decay: float = 0.0005
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for p in self.params:
            self.buffers.setdefault(p.name, np.zeros_like(p.data))

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in {p.name}")
        for p in self.params:
            g = p.grad + self.weight_decay * p.data if p.decay else p.grad
            buf = self.buffers[p.name]
            buf *= self.momentum
            buf += g
            p.data -= lr * buf
            p.zero_grad()


def sgd_step(params, state: SGD, lr: float) -> None:
    state.params = list(params)
    state.step(lr)


def lr_at(epoch: int, base: float = 0.01, step_epochs: int = 20, factor: float = 10.0) -> float:
    return base * factor ** -(epoch // step_epochs)


@dataclass
class TrainResult:
    model: ModelParams
    log_lines: list[str]
    losses: list[float]
    reports: list = field(default_factory=list)


def _pyramid_cache(dataset: Dataset, cfg: PyramidConfig, dtype, ids) -> dict[str, np.ndarray]:
    ids = sorted(ids)
    with no_grad():
        maps = np.stack([dataset.feature(i) for i in ids]).astype(dtype)
        vecs = extract_pyramid(maps, cfg).vectors.data
    return dict(zip(ids, vecs))


def batch_loss(pairs: list[PairSample], pyr: dict[str, np.ndarray], model: ModelParams) -> Tensor:
    cfg = model.pyramid
    q = PyramidFeatures(Tensor(np.stack([pyr[p.query] for p in pairs])), cfg)
    g = PyramidFeatures(Tensor(np.stack([pyr[p.gallery] for p in pairs])), cfg)
    return loss(forward_pyramids(q, g, model), np.array([p.label for p in pairs]))


def train(dataset: Dataset, cfg: RunConfig, max_steps: int | None = None,
          on_line: Callable[[str], None] | None = None) -> TrainResult:
    """Fixed-schedule training; every random draw comes from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    pyramid = cfg.pyramid()
    model = init_params(dataset.channels, pyramid, cfg.reasoning(), rng, cfg.dtype)
    sampler = PairSampler(dataset.records, "train")
    spec = BatchSpec(cfg.identities_per_batch, cfg.images_per_identity, cfg.neg_ratio,
                     cfg.full_cross)
    steps_per_epoch = cfg.steps_per_epoch or max(1, len(sampler.identities) // spec.identities)
    pyr = _pyramid_cache(dataset, pyramid, cfg.dtype,
                         [r.id for r in dataset.records if r.split == "train"])
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    has_val = bool(dataset.select("val", "query"))

    lines: list[str] = []
    losses: list[float] = []

    def emit(line: str) -> None:
        lines.append(line)
        if on_line is not None:
            on_line(line)

    emit("# config " + cfg.to_json())
    step = 0
    total = cfg.epochs * steps_per_epoch if max_steps is None else max_steps
    epoch = 0
    while step < total:
        lr = lr_at(epoch, cfg.lr, cfg.lr_step_epochs, cfg.lr_factor)
        for _ in range(steps_per_epoch):
            if step >= total:
                break
            pairs = sampler.sample(spec, rng)
            value = batch_loss(pairs, pyr, model)
            value.backward()
            try:
                opt.step(lr)
            except NumericError as exc:
                raise NumericError(f"step {step + 1}: {exc}") from exc
            step += 1
            losses.append(value.item())
            emit(f"step={step} epoch={epoch} lr={lr!r} loss={value.item()!r}")
        if has_val and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            sm, attrs = score_all(dataset, GRNetScorer(model), "val")
            for rep in evaluate_all(sm, attrs, ks=cfg.ks):
                accs = " ".join(f"top{k}={v:.4f}" for k, v in rep.accuracy.items())
                emit(f"epoch={epoch} split=val protocol={rep.protocol.value} "
                     f"queries={rep.queries} {accs}")
        epoch += 1
    return TrainResult(model, lines, losses)


def write_log(path, lines: list[str]) -> None:
    atomic_write(path, "".join(line + "\n" for line in lines).encode("utf-8"))


def config_from_log(lines: list[str]) -> RunConfig:
    for line in lines:
        if line.startswith("# config "):
            return RunConfig.from_dict(json.loads(line[len("# config "):]))
    raise DataError("log has no config record", "E_LOG_FORMAT")


def gradcheck_toy(scales: str, channels: int, dim: int, hidden: int, iterations: int,
                  precision: str = "f64", seed: int = 0, edge_mode: str = "recompute",
                  mask: str = "full", attempts: int = 20) -> GradCheckReport:
    """Gradient check of the full batch loss on a small random instance.

    Draws are repeated until the global node's final vector is nonzero for
    every pair, so the check cannot pass vacuously through dead ReLUs.
    """
    dtype = np.float64 if precision == "f64" else np.float32
    pyramid = PyramidConfig.parse(scales)
    rcfg = ReasoningConfig(iterations, hidden, dim, edge_mode, EdgeMask(mask))
    side = max(pyramid.max_rows, pyramid.max_cols) + 1
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        model = init_params(channels, pyramid, rcfg, rng, dtype)
        for p in model.parameters():
            if p.ndim == 1:
                p.data[...] = rng.normal(0.0, 0.1, size=p.shape)
        maps = rng.uniform(0.0, 1.0, size=(4, channels, side, side)).astype(dtype)
        q = PyramidFeatures(extract_pyramid(maps[:2], pyramid).vectors, pyramid)
        g = PyramidFeatures(extract_pyramid(maps[2:], pyramid).vectors, pyramid)
        with no_grad():
            h = reason(build_nodes(q, g, model.proj).vectors, model).data[:, 0]
        if (h > 0).any(axis=1).all():
            break
    labels = np.array([1, 0])
    return grad_check(lambda: loss(forward_pyramids(q, g, model), labels), model.parameters())
