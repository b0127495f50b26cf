"""Synthetic multimodal data and its binary file format.

Each sample has a class label shared by all modalities. Modality ``m`` of a
sample with class ``c`` is::

    x_m = class_mean[c, m] + style_scale * t_m * style_dir[m] + noise_std * e

where ``t_m ~ N(0, 1)`` is drawn independently per modality (a nuisance
factor only that modality sees) and ``e`` is white noise.

Binary layout (``MMDS1``): magic, little-endian uint32 header length, JSON
header, one row-major little-endian float32 block per modality, then the
labels as little-endian uint16.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distributions import RngStream
from .errors import ConfigError, FormatError

DATASET_MAGIC = b"MMDS1"
DATASET_VERSION = 1


@dataclass
class SyntheticConfig:
    n_modalities: int = 3
    n_classes: int = 5
    n_train: int = 3000
    n_test: int = 1000
    dims: tuple[int, ...] = (20, 20, 20)
    class_scale: float = 3.0
    style_scale: float = 1.0
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.dims, int):
            self.dims = (self.dims,) * self.n_modalities
        self.dims = tuple(int(d) for d in self.dims)
        self.validate()

    def validate(self) -> None:
        if self.n_modalities < 1:
            raise ConfigError("n_modalities must be >= 1")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_classes > np.iinfo(np.uint16).max + 1:
            raise ConfigError("n_classes does not fit the uint16 label encoding")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be positive")
        if len(self.dims) != self.n_modalities or any(d < 1 for d in self.dims):
            raise ConfigError(f"dims {self.dims} must list one positive size per modality")
        if not self.class_scale > 0:
            raise ConfigError("class_scale must be positive")
        if self.style_scale < 0 or self.noise_std < 0:
            raise ConfigError("style_scale and noise_std must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d) -> SyntheticConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MultimodalDataset:
    features: list[np.ndarray]
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    seed: int = 0
    styles: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.features:
            raise ConfigError("dataset needs at least one modality")
        n = len(self.labels)
        for m, f in enumerate(self.features):
            if f.ndim != 2 or f.shape[0] != n:
                raise ConfigError(f"modality {m} has shape {f.shape}, expected ({n}, D)")
        bad = np.flatnonzero((self.labels < 0) | (self.labels >= self.n_classes))
        if bad.size:
            raise ConfigError(f"row {int(bad[0])}: label {int(self.labels[bad[0]])} "
                              f"outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.features)

    def batch(self, idx) -> list[np.ndarray]:
        return [f[idx] for f in self.features]

    def select(self, modalities: Sequence[int]) -> MultimodalDataset:
        return MultimodalDataset([self.features[m] for m in modalities], self.labels,
                                 self.n_classes, self.split, self.seed)

    def subset(self, idx) -> MultimodalDataset:
        return MultimodalDataset([f[idx] for f in self.features], self.labels[idx],
                                 self.n_classes, self.split, self.seed)


def _class_means(cfg: SyntheticConfig, root: RngStream) -> list[np.ndarray]:
    return [cfg.class_scale * root.split("class-means", m).normal((cfg.n_classes, d))
            for m, d in enumerate(cfg.dims)]


def _style_directions(cfg: SyntheticConfig, root: RngStream) -> list[np.ndarray]:
    dirs = []
    for m, d in enumerate(cfg.dims):
        v = root.split("style-direction", m).normal(d)
        dirs.append(v / np.linalg.norm(v))
    return dirs


def generate_sample(cfg: SyntheticConfig, split: str, index: int):
    """Label, per-modality features and style factors of one sample.

    Depends only on (seed, split, index), so any sample can be regenerated alone.
    """
    root = RngStream(cfg.seed)
    return _sample(cfg, root, _class_means(cfg, root), _style_directions(cfg, root), split, index)


def _sample(cfg, root, means, dirs, split, index):
    r = root.split("sample", split, index)
    label = int(r.generator.integers(cfg.n_classes))
    styles = r.normal(cfg.n_modalities)
    feats = []
    for m, d in enumerate(cfg.dims):
        x = means[m][label] + cfg.style_scale * styles[m] * dirs[m] + cfg.noise_std * r.normal(d)
        feats.append(x.astype(np.float32).astype(np.float64))
    return label, feats, styles


def _generate_split(cfg, root, means, dirs, split, n) -> MultimodalDataset:
    labels = np.empty(n, dtype=np.int64)
    styles = np.empty((n, cfg.n_modalities))
    feats = [np.empty((n, d)) for d in cfg.dims]
    for i in range(n):
        labels[i], rows, styles[i] = _sample(cfg, root, means, dirs, split, i)
        for m in range(cfg.n_modalities):
            feats[m][i] = rows[m]
    return MultimodalDataset(feats, labels, cfg.n_classes, split, cfg.seed, styles)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[MultimodalDataset, MultimodalDataset]:
    """Train and test splits; features are rounded to float32 precision."""
    cfg.validate()
    root = RngStream(cfg.seed)
    means, dirs = _class_means(cfg, root), _style_directions(cfg, root)
    return (_generate_split(cfg, root, means, dirs, "train", cfg.n_train),
            _generate_split(cfg, root, means, dirs, "test", cfg.n_test))


# ---------------------------------------------------------------------------
# persistence


def dataset_to_bytes(ds: MultimodalDataset) -> bytes:
    header = {
        "format_version": DATASET_VERSION,
        "M": ds.n_modalities,
        "C": int(ds.n_classes),
        "N": len(ds),
        "dims": list(ds.dims),
        "seed": int(ds.seed),
        "split": ds.split,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [DATASET_MAGIC, struct.pack("<I", len(blob)), blob]
    parts += [f.astype("<f4").tobytes() for f in ds.features]
    parts.append(ds.labels.astype("<u2").tobytes())
    return b"".join(parts)


def dataset_from_bytes(buf: bytes) -> MultimodalDataset:
    n_magic = len(DATASET_MAGIC)
    if buf[:n_magic] != DATASET_MAGIC:
        raise FormatError("bad dataset magic", 0)
    if len(buf) < n_magic + 4:
        raise FormatError("truncated header length", len(buf))
    (hlen,) = struct.unpack_from("<I", buf, n_magic)
    pos = n_magic + 4
    if len(buf) < pos + hlen:
        raise FormatError("truncated header", len(buf))
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", pos) from None
    if header.get("format_version") != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {header.get('format_version')!r}", pos)
    pos += hlen
    n, dims = int(header["N"]), [int(d) for d in header["dims"]]
    if len(dims) != int(header["M"]):
        raise FormatError("header dims do not match M", n_magic + 4)
    features = []
    for m, d in enumerate(dims):
        size = 4 * n * d
        if len(buf) < pos + size:
            raise FormatError(f"truncated feature block for modality {m}", len(buf))
        features.append(np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d).astype(np.float64))
        pos += size
    if len(buf) < pos + 2 * n:
        raise FormatError("truncated label block", len(buf))
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=pos).astype(np.int64)
    pos += 2 * n
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} unexpected trailing bytes", pos)
    return MultimodalDataset(features, labels, int(header["C"]), header["split"], int(header["seed"]))


def save_dataset(ds: MultimodalDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> MultimodalDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def dataset_hash(*datasets: MultimodalDataset) -> str:
    h = hashlib.sha256()
    for ds in datasets:
        h.update(dataset_to_bytes(ds))
    return h.hexdigest()


def export_csv(ds: MultimodalDataset, path) -> None:
    """One row per sample: label, then each modality's features in order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"m{m}_{j}" for m, d in enumerate(ds.dims) for j in range(d)])
        for i in range(len(ds)):
            row = [int(ds.labels[i])]
            for f in ds.features:
                row.extend(repr(float(v)) for v in f[i])
            writer.writerow(row)
