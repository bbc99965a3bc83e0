"""Datasets: synthetic generator, IDX and CSV loaders, split manifests."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DataError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    LabelError,
    OutOfRangeError,
    SplitError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledSet:
    """Flattened images in ``[0, 1]`` with integer labels.

    ``class_map`` records the original class id of each dense label after a
    split remaps labels; it is the identity for freshly loaded data.
    """

    images: np.ndarray
    labels: np.ndarray
    class_map: Optional[dict[int, int]] = None
    class_index: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or self.labels.shape != (self.images.shape[0],):
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} do not line up")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise OutOfRangeError("pixel values must lie in [0, 1]")
        ids = np.unique(self.labels)
        self.class_index = {int(c): np.flatnonzero(self.labels == c) for c in ids}

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(self.class_index)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 35
    samples_per_class: int = 200
    side: int = 8
    template_scale: float = 1.0
    noise_sigma: float = 0.15
    seed: int = 7

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("side must be >= 2")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes and samples_per_class must be >= 1")


def gen_synthetic(spec: SyntheticSpec) -> LabeledSet:
    """Class templates plus clamped Gaussian noise.

    Each template is ``0.5 + template_scale * (u - 0.5)`` with ``u`` uniform in
    ``[0, 1]^(side*side)``; ``template_scale=1`` is a plain uniform template.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.side * spec.side
    u = rng.uniform(0.0, 1.0, size=(spec.num_classes, d))
    templates = np.clip(0.5 + spec.template_scale * (u - 0.5), 0.0, 1.0)
    noise = rng.normal(0.0, spec.noise_sigma, size=(spec.num_classes, spec.samples_per_class, d))
    images = np.clip(templates[:, None, :] + noise, 0.0, 1.0).astype(np.float32)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    return LabeledSet(images.reshape(-1, d), labels)


# ----------------------------------------------------------------------- IDX


def _read_idx(path, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise IdxTruncatedError(f"{what} file {path}: truncated header")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IdxMagicError(f"{what} file {path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(buf) < header:
        raise IdxTruncatedError(f"{what} file {path}: truncated header")
    dims = struct.unpack(f">{rank}I", buf[4:header])
    need = int(np.prod(dims))
    payload = buf[header:]
    if len(payload) < need:
        raise IdxTruncatedError(f"{what} file {path}: truncated payload ({len(payload)} of {need} bytes)")
    return dims, payload[:need]


def load_idx(images_path, labels_path) -> LabeledSet:
    """Read big-endian IDX ubyte image (rank 3) and label (rank 1) files."""
    dims, pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, "image")
    (n_labels,), raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "label")
    n = dims[0]
    if n != n_labels:
        raise IdxCountMismatchError(f"count mismatch: {n} images but {n_labels} labels")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, dims[1] * dims[2]).astype(np.float32) / np.float32(255)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return LabeledSet(images, labels)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``[n, rows, cols]`` and labels ``[n]`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes())


# ----------------------------------------------------------------------- CSV


def load_csv(path) -> LabeledSet:
    """Rows of ``label, p1, ..., pD`` with pixels in ``[0, 1]``; no header."""
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                label = int(row[0])
                pixels = [float(v) for v in row[1:]]
            except ValueError:
                raise DataError(f"{path}: malformed row {lineno}") from None
            if label < 0:
                raise LabelError(f"{path}: negative label on row {lineno}")
            if width is None:
                width = len(pixels)
                if width == 0:
                    raise DataError(f"{path}: row {lineno} has no pixels")
            elif len(pixels) != width:
                raise DataError(f"{path}: row {lineno} has {len(pixels)} pixels, expected {width}")
            if any(not (0.0 <= p <= 1.0) for p in pixels):
                raise OutOfRangeError(f"{path}: pixel out of range [0, 1] on row {lineno}")
            labels.append(label)
            rows.append(pixels)
    if not rows:
        raise DataError(f"{path}: no rows")
    return LabeledSet(np.asarray(rows, dtype=np.float64).astype(np.float32), np.asarray(labels))


def save_csv(path, data: LabeledSet) -> None:
    # %.9g round-trips float32 exactly
    with open(path, "w", newline="") as fh:
        for label, row in zip(data.labels, data.images):
            fh.write(str(int(label)) + "," + ",".join(f"{v:.9g}" for v in row.tolist()) + "\n")


# ----------------------------------------------------------------- manifests


@dataclass(frozen=True)
class SplitManifest:
    base: tuple[int, ...]
    val: tuple[int, ...]
    novel: tuple[int, ...]

    def __post_init__(self):
        lists = {"base": self.base, "val": self.val, "novel": self.novel}
        for name, ids in lists.items():
            if len(set(ids)) != len(ids):
                raise SplitError(f"manifest list {name!r} repeats a class id")
        names = list(lists)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                shared = set(lists[a]) & set(lists[b])
                if shared:
                    raise SplitError(f"manifest lists {a!r} and {b!r} overlap on {sorted(shared)}")

    def to_text(self) -> str:
        return "".join(f"{k}:{','.join(str(c) for c in getattr(self, k))}\n" for k in ("base", "val", "novel"))


def read_manifest(path) -> SplitManifest:
    lists: dict[str, tuple[int, ...]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep or key not in ("base", "val", "novel"):
            raise SplitError(f"{path}: line {lineno}: expected 'base:', 'val:' or 'novel:'")
        if key in lists:
            raise SplitError(f"{path}: duplicate {key!r} line")
        try:
            lists[key] = tuple(int(v) for v in rest.split(",") if v.strip())
        except ValueError:
            raise SplitError(f"{path}: line {lineno}: class ids must be integers") from None
    missing = [k for k in ("base", "val", "novel") if k not in lists]
    if missing:
        raise SplitError(f"{path}: missing lines {missing}")
    return SplitManifest(**lists)


def write_manifest(path, manifest: SplitManifest) -> None:
    Path(path).write_text(manifest.to_text())


def _subset(data: LabeledSet, class_ids: tuple[int, ...]) -> LabeledSet:
    order = sorted(class_ids)
    idx = np.concatenate([data.class_index[c] for c in order]) if order else np.zeros(0, dtype=np.int64)
    idx.sort()
    dense = {c: i for i, c in enumerate(order)}
    labels = np.asarray([dense[int(c)] for c in data.labels[idx]], dtype=np.int64)
    return LabeledSet(data.images[idx].reshape(len(idx), data.input_dim), labels, {i: c for c, i in dense.items()})


def apply_split(data: LabeledSet, manifest: SplitManifest) -> tuple[LabeledSet, LabeledSet, LabeledSet]:
    """Partition by class into (base, val, novel).

    Each part gets dense labels ``0..n-1`` in ascending original-id order;
    ``class_map`` maps dense label back to the original id.
    """
    present = set(data.class_index)
    for name in ("base", "val", "novel"):
        unknown = sorted(set(getattr(manifest, name)) - present)
        if unknown:
            raise SplitError(f"manifest list {name!r} names unknown class ids {unknown}")
    return _subset(data, manifest.base), _subset(data, manifest.val), _subset(data, manifest.novel)
