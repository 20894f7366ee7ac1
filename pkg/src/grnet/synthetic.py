"""Planted-patch synthetic retrieval data.

Channels come in two groups.  "Texture" channels carry nonnegative noise
everywhere; "part" channels are quiet except where a part is stamped.  Each
identity owns a few random part signatures, and every map of that identity
stamps them into randomly chosen cells of a ``grid`` (so the two maps of a
pair are misaligned).  Every map also gets a few clutter parts of its own,
which is what makes whole-map pooling unreliable.

Queries can be occluded (one grid cell overwritten by strong clutter),
cropped (a border band zeroed) or shown from another view (a fixed channel
attenuation/permutation); the manifest records which.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, ManifestRecord, atomic_write, write_feature_file, write_manifest
from .errors import ConfigError
from .pyramid import window_bounds


@dataclass(frozen=True)
class SynthSpec:
    train_identities: int = 200
    val_identities: int = 0
    test_identities: int = 50
    distractors: int = 200
    channels: int = 16
    part_channels: int = 8
    height: int = 6
    width: int = 6
    grid: int = 3
    parts: int = 2
    clutter_parts: int = 2
    noise: float = 0.2
    part_noise: float = 0.3
    signal: float = 1.0
    jitter: float = 0.02
    occlusion_rate: float = 0.0
    cropping_rate: float = 0.0
    view_rate: float = 0.0
    occlusion_level: float = 1.5
    crop_band: int = 2
    seed: int = 0

    def __post_init__(self):
        if min(self.channels, self.height, self.width, self.grid, self.parts) < 1:
            raise ConfigError("channels, height, width, grid and parts must be >= 1")
        if not 1 <= self.part_channels <= self.channels:
            raise ConfigError("part_channels must be in [1, channels]")
        if self.grid > min(self.height, self.width):
            raise ConfigError(f"a {self.grid}x{self.grid} grid does not fit a "
                              f"{self.height}x{self.width} map")
        if self.parts + self.clutter_parts > self.grid * self.grid:
            raise ConfigError(f"{self.parts} parts + {self.clutter_parts} clutter parts "
                              f"do not fit {self.grid * self.grid} grid cells")
        if not 0 <= self.crop_band < min(self.height, self.width):
            raise ConfigError("crop band would remove the whole map")
        for name in ("occlusion_rate", "cropping_rate", "view_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if min(self.noise, self.part_noise, self.signal, self.jitter, self.occlusion_level) < 0:
            raise ConfigError("noise levels must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def view_transform(channels: int, view: str) -> tuple[np.ndarray, np.ndarray]:
    """Fixed ``(permutation, gain)`` per view; front is the identity."""
    perm = np.arange(channels)
    gain = np.ones(channels)
    if view == "side":
        gain[: channels // 2] = 0.5
    elif view == "back":
        gain[channels // 2:] = 0.5
        perm = np.roll(perm, 1)
    return perm, gain


class _Generator:
    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        g = spec.grid
        self.cells = [(window_bounds(spec.height, g, r), window_bounds(spec.width, g, c))
                      for r in range(g) for c in range(g)]

    def signature(self) -> np.ndarray:
        s = self.spec
        return s.signal * self.rng.uniform(0.2, 1.0, size=(s.parts, s.part_channels))

    def render(self, parts: np.ndarray) -> np.ndarray:
        s, rng = self.spec, self.rng
        k = s.part_channels
        fm = np.empty((s.channels, s.height, s.width))
        fm[:k] = s.part_noise * np.abs(rng.normal(size=(k, s.height, s.width)))
        fm[k:] = s.noise * np.abs(rng.normal(size=(s.channels - k, s.height, s.width)))
        clutter = s.signal * rng.uniform(0.2, 1.0, size=(s.clutter_parts, k))
        stamps = np.concatenate([parts, clutter])
        cells = rng.choice(len(self.cells), len(stamps), replace=False)
        for stamp, cell in zip(stamps, cells):
            (r0, r1), (c0, c1) = self.cells[cell]
            shape = (k, r1 - r0, c1 - c0)
            fm[:k, r0:r1, c0:c1] = stamp[:, None, None] * (1.0 + s.jitter * rng.normal(size=shape))
        return np.maximum(fm, 0.0)

    def perturb(self, fm: np.ndarray) -> tuple[np.ndarray, dict]:
        s, rng = self.spec, self.rng
        # fixed number of draws per query so the stream does not depend on the rates
        u = rng.uniform(size=4)
        (r0, r1), (c0, c1) = self.cells[int(rng.integers(len(self.cells)))]
        occluder = s.occlusion_level * np.abs(rng.normal(size=(s.channels, r1 - r0, c1 - c0)))
        side = int(rng.integers(4))
        occluded = bool(u[0] < s.occlusion_rate)
        cropped = bool(u[1] < s.cropping_rate)
        view = "front"
        if u[2] < s.view_rate:
            view = "side" if u[3] < 0.75 else "back"
        fm = fm.copy()
        if occluded:
            fm[:, r0:r1, c0:c1] = occluder
        if cropped and s.crop_band:
            b = s.crop_band
            band = [np.s_[:, :b, :], np.s_[:, -b:, :], np.s_[:, :, :b], np.s_[:, :, -b:]][side]
            fm[band] = 0.0
        if view != "front":
            perm, gain = view_transform(s.channels, view)
            fm = fm[perm] * gain[:, None, None]
        return fm, {"view": view, "occluded": occluded, "cropped": cropped}


def synthesize(spec: SynthSpec) -> Dataset:
    """Build the dataset in memory; record paths are relative to the output dir."""
    gen = _Generator(spec)
    records: list[ManifestRecord] = []
    feats: dict[str, np.ndarray] = {}

    def add(item_id, role, identity, fm, split, attrs=None):
        records.append(ManifestRecord(item_id, role, identity, f"features/{item_id}.spyr",
                                      split=split, **(attrs or {})))
        feats[item_id] = fm

    counter = 0
    for split, n in (("train", spec.train_identities), ("val", spec.val_identities),
                     ("test", spec.test_identities)):
        for _ in range(n):
            ident = f"id{counter:05d}"
            counter += 1
            sig = gen.signature()
            qmap, attrs = gen.perturb(gen.render(sig))
            add(f"{ident}_q", "query", ident, qmap, split, attrs)
            add(f"{ident}_g", "gallery", ident, gen.render(sig), split)
    for d in range(spec.distractors):
        add(f"dx{d:05d}_g", "gallery", f"dx{d:05d}", gen.render(gen.signature()), "test")
    return Dataset(records, feats)


def generate_synthetic(spec: SynthSpec, out_dir, dtype: str = "f32") -> Path:
    """Write feature files, ``manifest.jsonl`` and ``synth.json``; returns the manifest path."""
    out = Path(out_dir)
    ds = synthesize(spec)
    for r in ds.records:
        write_feature_file(out / r.path, ds.features[r.id], dtype)
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, ds.records)
    atomic_write(out / "synth.json",
                 (json.dumps({**spec.to_dict(), "dtype": dtype}, sort_keys=True) + "\n").encode())
    return manifest
