"""Named model variants mirroring the scale/connection ablations, and a runner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset
from .errors import ConfigError
from .evaluation import GRNetScorer, GlobalCosineScorer, Protocol, Scorer, evaluate_protocol, score_all
from .pyramid import PyramidConfig
from .training import train


def _subset(cfg: RunConfig, keep: Callable[[int, int], bool]) -> dict:
    scales = [s for s in cfg.pyramid().scales[1:] if keep(*s)]
    if not scales:
        raise ConfigError(f"no local scales of {cfg.scales} survive this variant")
    return {"scales": str(PyramidConfig(((1, 1), *scales)))}


def _mask(mode: str) -> Callable[[RunConfig], dict]:
    return lambda cfg: {"mask": {"mode": mode, "keep_global": True, "scales": None}}


# Each variant maps a base config to the fields it overrides.  The
# connection-removal variants keep the global node linked to every local node.
VARIANTS: dict[str, Callable[[RunConfig], dict]] = {
    "global-only": lambda cfg: {"scales": "1x1"},
    "coarse-scales": lambda cfg: _subset(cfg, lambda r, c: max(r, c) <= 2),
    "fine-scales": lambda cfg: _subset(cfg, lambda r, c: max(r, c) >= 3),
    "no-local-edges": _mask("none"),
    "inter-only": _mask("inter"),
    "intra-only": _mask("intra"),
    "full": lambda cfg: {"mask": {"mode": "full", "keep_global": False, "scales": None}},
}


def variant_config(base: RunConfig, name: str) -> RunConfig:
    try:
        overrides = VARIANTS[name](base)
    except KeyError as exc:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from exc
    return base.replace(**overrides)


@dataclass
class VariantResult:
    name: str
    per_seed: list[dict[int, float]] = field(default_factory=list)

    def mean(self, k: int) -> float:
        return float(np.mean([acc[k] for acc in self.per_seed]))


def run_variants(
    datasets: Callable[[int], Dataset],
    base: RunConfig,
    names: Sequence[str],
    seeds: Sequence[int],
    max_steps: int | None = None,
    protocol: Protocol = Protocol.E,
    baselines: Sequence[Scorer] = (GlobalCosineScorer(),),
) -> list[VariantResult]:
    """Train/evaluate every variant on every seed; ``datasets(seed)`` supplies the data."""
    results = {n: VariantResult(n) for n in [b.name for b in baselines] + list(names)}
    for seed in seeds:
        ds = datasets(seed)
        for scorer in baselines:
            sm, attrs = score_all(ds, scorer)
            results[scorer.name].per_seed.append(evaluate_protocol(sm, attrs, protocol, base.ks).accuracy)
        for name in names:
            cfg = variant_config(base, name).replace(seed=seed)
            model = train(ds, cfg, max_steps=max_steps).model
            sm, attrs = score_all(ds, GRNetScorer(model))
            results[name].per_seed.append(evaluate_protocol(sm, attrs, protocol, base.ks).accuracy)
    return list(results.values())


def format_table(results: Sequence[VariantResult], ks: Sequence[int]) -> list[str]:
    head = "variant".ljust(16) + "".join(f"top{k}".rjust(9) for k in ks) + "  seeds"
    rows = [head]
    for r in results:
        rows.append(r.name.ljust(16) + "".join(f"{r.mean(k):9.4f}" for k in ks)
                    + f"  {len(r.per_seed)}")
    return rows
