"""Retrieval scoring, baselines and protocol-filtered top-k accuracy."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Protocol as TypingProtocol, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import DataError, DimensionError, EmptyProtocolError, InputError
from .pyramid import PyramidConfig, PyramidFeatures, extract_pyramid, global_aggregate
from .reasoning import ModelParams, forward_pyramids

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 20, 50)


@dataclass(frozen=True)
class QueryAttributes:
    view: str = "front"
    occluded: bool = False
    cropped: bool = False

    @classmethod
    def of(cls, record) -> QueryAttributes:
        return cls(record.view, bool(record.occluded), bool(record.cropped))


class Protocol(str, enum.Enum):
    E = "E"
    HV = "HV"
    HO = "HO"
    HC = "HC"

    def selects(self, a: QueryAttributes) -> bool:
        if self is Protocol.E:
            return a.view == "front" and not a.occluded and not a.cropped
        if self is Protocol.HV:
            return a.view != "front"
        if self is Protocol.HO:
            return a.occluded
        return a.cropped


@dataclass
class ScoreMatrix:
    """``scores[q, g]`` (higher is more similar) plus per-query ground truth.

    Gallery columns are kept in ascending gallery-id order so that ranking
    ties resolve by id.
    """

    scores: np.ndarray
    query_ids: list[str]
    gallery_ids: list[str]
    truth: np.ndarray  # bool, same shape as scores

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=bool)
        q, g = len(self.query_ids), len(self.gallery_ids)
        if self.scores.shape != (q, g) or self.truth.shape != (q, g):
            raise DimensionError(f"score matrix {self.scores.shape} / truth {self.truth.shape} "
                                 f"do not match {q} queries x {g} gallery items")
        missing = np.flatnonzero(~self.truth.any(axis=1))
        if missing.size:
            raise DataError(f"query {self.query_ids[missing[0]]} has no ground-truth gallery item",
                            "E_NO_TRUTH")
        if list(self.gallery_ids) != sorted(self.gallery_ids):
            order = np.argsort(np.asarray(self.gallery_ids), kind="stable")
            self.gallery_ids = [self.gallery_ids[i] for i in order]
            self.scores = self.scores[:, order]
            self.truth = self.truth[:, order]

    def rows(self, mask: np.ndarray) -> ScoreMatrix:
        idx = np.flatnonzero(mask)
        return ScoreMatrix(self.scores[idx], [self.query_ids[i] for i in idx],
                           list(self.gallery_ids), self.truth[idx])

    def ranking(self) -> np.ndarray:
        """Gallery column order per query, best first, ties by ascending id."""
        return np.argsort(-self.scores, axis=1, kind="stable")


def topk_accuracy(sm: ScoreMatrix, k: int) -> float:
    """Fraction of queries with a ground-truth item among the ``k`` best."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    n_gallery = sm.scores.shape[1]
    if k > n_gallery:
        log.warning("top-%d requested with only %d gallery items; clamping", k, n_gallery)
        k = n_gallery
    if not len(sm.query_ids):
        return 0.0
    top = sm.ranking()[:, :k]
    hits = np.take_along_axis(sm.truth, top, axis=1).any(axis=1)
    return float(hits.mean())


@dataclass
class ProtocolReport:
    protocol: Protocol
    queries: int
    accuracy: dict[int, float]

    def lines(self) -> list[str]:
        return [f"protocol={self.protocol.value} k={k} queries={self.queries} accuracy={acc:.4f}"
                for k, acc in self.accuracy.items()]


def protocol_mask(attributes: Sequence[QueryAttributes], protocol: Protocol) -> np.ndarray:
    return np.array([protocol.selects(a) for a in attributes], dtype=bool)


def evaluate_protocol(sm: ScoreMatrix, attributes: Sequence[QueryAttributes],
                      protocol: Protocol | str, ks: Sequence[int] = DEFAULT_KS) -> ProtocolReport:
    protocol = Protocol(protocol)
    if len(attributes) != len(sm.query_ids):
        raise DataError(f"{len(attributes)} attribute records for {len(sm.query_ids)} queries",
                        "E_ATTRIBUTES")
    keep = protocol_mask(attributes, protocol)
    if not keep.any():
        raise EmptyProtocolError(f"protocol {protocol.value} selects no queries")
    sub = sm.rows(keep)
    return ProtocolReport(protocol, int(keep.sum()), {k: topk_accuracy(sub, k) for k in ks})


# ---------------------------------------------------------------------------
# baselines


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine along the last axis; zero-norm vectors score 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dot = np.sum(a * b, axis=-1)
    return np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)


def global_cosine(x_map: np.ndarray, y_map: np.ndarray) -> float:
    """Cosine similarity of the whole-map max-pooled vectors."""
    return float(cosine(global_aggregate(x_map), global_aggregate(y_map)))


def greedy_assignment(x_map: np.ndarray, y_map: np.ndarray,
                      grid: tuple[int, int] = (3, 3)) -> tuple[np.ndarray, np.ndarray]:
    """Best gallery window per query window (first index on ties) and its cosine."""
    cfg = PyramidConfig((tuple(grid),))
    xs = extract_pyramid(x_map, cfg).vectors.data
    ys = extract_pyramid(y_map, cfg).vectors.data
    sims = cosine(xs[:, None, :], ys[None, :, :])
    best = np.argmax(sims, axis=1)
    return best, sims[np.arange(len(xs)), best]


def greedy_local(x_map: np.ndarray, y_map: np.ndarray, grid: tuple[int, int] = (3, 3)) -> float:
    """Sum over query windows of the best cosine to any gallery window."""
    return float(greedy_assignment(x_map, y_map, grid)[1].sum())


class Scorer(TypingProtocol):
    name: str

    def score(self, queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
        """``Q x C x H x W`` and ``G x C x H x W`` maps to a ``Q x G`` score array."""


class GlobalCosineScorer:
    name = "global-cosine"

    def score(self, queries, gallery):
        qv = global_aggregate(queries)
        gv = global_aggregate(gallery)
        return cosine(qv[:, None, :], gv[None, :, :])


class GreedyLocalScorer:
    name = "greedy-local"

    def __init__(self, grid: tuple[int, int] = (3, 3)):
        self.cfg = PyramidConfig((tuple(grid),))

    def score(self, queries, gallery):
        qv = extract_pyramid(queries, self.cfg).vectors.data  # Q x M x C
        gv = extract_pyramid(gallery, self.cfg).vectors.data  # G x M x C
        sims = cosine(qv[:, None, :, None, :], gv[None, :, None, :, :])  # Q x G x M x M
        return sims.max(axis=-1).sum(axis=-1)


class GRNetScorer:
    """Ranks by the log-odds of the match probability.

    Same order as the probability itself, but without float saturation at
    1.0, which would otherwise turn confident matches into id-ordered ties.
    """

    name = "grnet"

    def __init__(self, model: ModelParams, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def score(self, queries, gallery):
        dtype = self.model.dtype
        cfg = self.model.pyramid
        with no_grad():
            qp = extract_pyramid(np.asarray(queries, dtype=dtype), cfg).vectors.data
            gp = extract_pyramid(np.asarray(gallery, dtype=dtype), cfg).vectors.data
            out = np.empty((len(qp), len(gp)))
            for qi in range(len(qp)):
                for start in range(0, len(gp), self.batch_size):
                    gb = gp[start:start + self.batch_size]
                    qb = np.repeat(qp[qi:qi + 1], len(gb), axis=0)
                    logits = forward_pyramids(PyramidFeatures(Tensor(qb), cfg),
                                              PyramidFeatures(Tensor(gb), cfg), self.model)
                    out[qi, start:start + len(gb)] = logits.data[:, 1] - logits.data[:, 0]
        return out


def score_all(dataset, scorer: Scorer, split: str = "test",
              category: str | None = None) -> tuple[ScoreMatrix, list[QueryAttributes]]:
    """Score every query of ``split`` against that split's full gallery."""
    queries = sorted(dataset.select(split, "query", category), key=lambda r: r.id)
    gallery = sorted(dataset.select(split, "gallery", category), key=lambda r: r.id)
    if not queries or not gallery:
        raise DataError(f"split {split!r} has {len(queries)} queries and {len(gallery)} "
                        f"gallery items", "E_EMPTY_SPLIT")
    qmaps = np.stack([dataset.feature(r.id) for r in queries])
    gmaps = np.stack([dataset.feature(r.id) for r in gallery])
    scores = scorer.score(qmaps, gmaps)
    g_ident = np.array([r.identity for r in gallery])
    truth = np.stack([g_ident == r.identity for r in queries])
    sm = ScoreMatrix(scores, [r.id for r in queries], [r.id for r in gallery], truth)
    return sm, [QueryAttributes.of(r) for r in queries]


def evaluate_all(sm: ScoreMatrix, attributes, protocols=tuple(Protocol),
                 ks: Sequence[int] = DEFAULT_KS) -> list[ProtocolReport]:
    """Reports for every protocol that selects at least one query."""
    reports = []
    for p in protocols:
        try:
            reports.append(evaluate_protocol(sm, attributes, p, ks))
        except EmptyProtocolError:
            log.info("protocol %s is empty; skipped", Protocol(p).value)
    return reports


def ranking_dump(sm: ScoreMatrix) -> list[str]:
    order = sm.ranking()
    return [f"{qid}\t" + " ".join(sm.gallery_ids[j] for j in row)
            for qid, row in zip(sm.query_ids, order)]
