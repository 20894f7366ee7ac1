"""On-disk formats: feature files, manifests and model checkpoints."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .pyramid import PyramidConfig
from .reasoning import ModelParams, ReasoningConfig

DATA_ROOT_ENV = "GRNET_DATA_ROOT"

FEATURE_MAGIC = b"SPYR"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHB3I")
DTYPE_CODES = {"f32": 1, "f64": 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

CHECKPOINT_MAGIC = b"GRCK"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sHI")

VIEWS = ("front", "side", "back")
ROLES = ("query", "gallery")
SPLITS = ("train", "val", "test")


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# feature files


def encode_features(array: np.ndarray, dtype: str = "f32") -> bytes:
    if dtype not in DTYPE_CODES:
        raise DataError(f"unknown feature dtype {dtype!r}", "E_FEATURE_DTYPE")
    array = np.asarray(array)
    if array.ndim != 3:
        raise DataError(f"feature map must be C x H x W, got {array.shape}", "E_FEATURE_SHAPE")
    code = DTYPE_CODES[dtype]
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, code, *array.shape)
    return header + np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes()


def decode_features(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _FEATURE_HEADER.size:
        raise DataError(f"{source}: truncated feature header", "E_FEATURE_FORMAT")
    magic, version, code, c, h, w = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{source}: bad magic {magic!r}", "E_FEATURE_FORMAT")
    if version != FEATURE_VERSION:
        raise DataError(f"{source}: unsupported version {version}", "E_FEATURE_FORMAT")
    if code not in _CODE_DTYPES:
        raise DataError(f"{source}: unknown dtype code {code}", "E_FEATURE_FORMAT")
    dt = _CODE_DTYPES[code]
    expected = c * h * w * dt.itemsize
    payload = buf[_FEATURE_HEADER.size:]
    if len(payload) != expected:
        raise DataError(
            f"{source}: payload is {len(payload)} bytes, expected {expected}", "E_FEATURE_FORMAT"
        )
    return np.frombuffer(payload, dtype=dt).reshape(c, h, w).copy()


def write_feature_file(path, array: np.ndarray, dtype: str = "f32") -> None:
    atomic_write(path, encode_features(array, dtype))


def read_feature_file(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing feature file {path}", "E_MISSING_FEATURE") from exc
    return decode_features(buf, str(path))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    id: str
    role: str
    identity: str
    path: str
    view: str = "front"
    occluded: bool = False
    cropped: bool = False
    split: str = "test"
    category: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"record {self.id}: role must be one of {ROLES}", "E_MANIFEST_FIELD")
        if self.view not in VIEWS:
            raise DataError(f"record {self.id}: view must be one of {VIEWS}", "E_MANIFEST_FIELD")
        if self.split not in SPLITS:
            raise DataError(f"record {self.id}: split must be one of {SPLITS}", "E_MANIFEST_FIELD")

    def to_json(self) -> str:
        d = asdict(self)
        if d["category"] is None:
            del d["category"]
        return json.dumps(d, sort_keys=True)


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"missing manifest {path}", "E_MISSING_MANIFEST") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(ManifestRecord(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad record ({exc})", "E_MANIFEST_FIELD") from exc
    return records


def write_manifest(path, records) -> None:
    text = "".join(r.to_json() + "\n" for r in records)
    atomic_write(path, text.encode("utf-8"))


def data_root(manifest_path) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else Path(manifest_path).resolve().parent


def validate_manifest(records, root: Path | None = None, train_split: str = "train") -> None:
    """Reject duplicate ids, dangling feature paths and unpaired training identities."""
    seen: set[str] = set()
    for r in records:
        if r.id in seen:
            raise DataError(f"duplicate item id {r.id}", "E_DUPLICATE_ID")
        seen.add(r.id)
    if root is not None:
        for r in records:
            if not (root / r.path).is_file():
                raise DataError(f"item {r.id}: feature file {r.path} not found", "E_MISSING_FEATURE")
    roles: dict[str, set[str]] = {}
    for r in records:
        if r.split == train_split:
            roles.setdefault(r.identity, set()).add(r.role)
    for ident, have in sorted(roles.items()):
        if have != set(ROLES):
            missing = sorted(set(ROLES) - have)[0]
            raise DataError(
                f"identity {ident} has no {missing} image in split {train_split}",
                "E_UNPAIRED_IDENTITY",
            )


@dataclass
class Dataset:
    """Manifest records with their feature maps loaded into memory."""

    records: list[ManifestRecord]
    features: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def load(cls, manifest_path, dtype=np.float64, validate: bool = True) -> Dataset:
        records = read_manifest(manifest_path)
        root = data_root(manifest_path)
        if validate:
            validate_manifest(records, root)
        feats = {r.id: read_feature_file(root / r.path).astype(dtype) for r in records}
        return cls(records, feats)

    def select(self, split: str | None = None, role: str | None = None,
               category: str | None = None) -> list[ManifestRecord]:
        return [r for r in self.records
                if (split is None or r.split == split)
                and (role is None or r.role == role)
                and (category is None or r.category == category)]

    def feature(self, item_id: str) -> np.ndarray:
        try:
            return self.features[item_id]
        except KeyError as exc:
            raise DataError(f"no features for item {item_id}", "E_MISSING_FEATURE") from exc

    @property
    def channels(self) -> int:
        return next(iter(self.features.values())).shape[0]


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(model: ModelParams, run_config: dict | None = None) -> bytes:
    dtype = np.dtype(model.dtype).newbyteorder("<")
    params = model.parameters()
    header = {
        "precision": "f64" if dtype.itemsize == 8 else "f32",
        "channels": model.channels,
        "pyramid": str(model.pyramid),
        "reasoning": model.reasoning.to_dict(),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
        "run_config": run_config or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.data, dtype=dtype).tobytes() for p in params)
    return _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)) + blob + body


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[ModelParams, dict]:
    if len(buf) < _CHECKPOINT_HEADER.size:
        raise DataError(f"{source}: truncated checkpoint", "E_CHECKPOINT_FORMAT")
    magic, version, hlen = _CHECKPOINT_HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise DataError(f"{source}: not a version-{CHECKPOINT_VERSION} checkpoint",
                        "E_CHECKPOINT_FORMAT")
    start = _CHECKPOINT_HEADER.size
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: unreadable checkpoint header", "E_CHECKPOINT_FORMAT") from exc
    dtype = np.dtype("<f8" if header["precision"] == "f64" else "<f4")
    model = ModelParams.zeros(
        header["channels"],
        PyramidConfig.parse(header["pyramid"]),
        ReasoningConfig.from_dict(header["reasoning"]),
        dtype=dtype.newbyteorder("="),
    )
    named = model.named()
    offset = start + hlen
    for spec in header["params"]:
        p = named.get(spec["name"])
        if p is None or list(p.shape) != spec["shape"]:
            raise DataError(f"{source}: parameter {spec['name']} does not fit the model",
                            "E_CHECKPOINT_FORMAT")
        nbytes = p.size * dtype.itemsize
        if offset + nbytes > len(buf):
            raise DataError(f"{source}: truncated at parameter {spec['name']}",
                            "E_CHECKPOINT_FORMAT")
        p.data[...] = np.frombuffer(buf, dtype=dtype, count=p.size, offset=offset).reshape(p.shape)
        offset += nbytes
    if offset != len(buf):
        raise DataError(f"{source}: {len(buf) - offset} trailing bytes", "E_CHECKPOINT_FORMAT")
    return model, header


def save_checkpoint(path, model: ModelParams, run_config: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(model, run_config))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing checkpoint {path}", "E_MISSING_CHECKPOINT") from exc
    return decode_checkpoint(buf, str(path))
