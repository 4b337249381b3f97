"""Dataset construction, MNIST IDX ingestion, and kernel-matrix caching.

All stochastic constructors take an explicit 64-bit seed and use numpy's
PCG64 generator, so every dataset is bit-reproducible. Input rows are
l2-normalized by default, which keeps the Gram diagonal bounded and the
kernel trace proportional to the sample count.
"""

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from ._kernelmatrix import KernelMatrix
from .errors import DataFormatError, EmptyDatasetError, StaleCacheError, ValidationError

ROW_NORM_TOL = 1e-12

TASK_REGRESSION = "regression"
TASK_BINARY = "binary"
TASK_MULTICLASS = "multiclass"
_TASKS = (TASK_REGRESSION, TASK_BINARY, TASK_MULTICLASS)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CACHE_MAGIC = b"NTKK"
CACHE_VERSION = 1
_PROVENANCE_TAGS = {"empirical": 0, "analytic": 1}
_TAG_TO_KIND = {tag: kind for kind, tag in _PROVENANCE_TAGS.items()}


@dataclass
class DataSet:
    """Inputs plus clean and noisy labels for one of three task kinds.

    ``clean_labels`` and ``noisy_labels`` coincide until a noise model is
    applied. Binary labels live in {+1, -1}; multiclass labels are class ids
    in 1..num_classes; regression targets are clean values in [-1, 1] (noisy
    regression targets may leave that interval).
    """

    inputs: np.ndarray
    clean_labels: np.ndarray
    noisy_labels: np.ndarray
    task: str
    num_classes: int = 0
    normalized: bool = True

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValidationError(f"inputs must be a 2-D matrix, got ndim={self.inputs.ndim}")
        n, d = self.inputs.shape
        if n < 1 or d < 1:
            raise ValidationError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
        if not np.all(np.isfinite(self.inputs)):
            raise ValidationError("inputs contain non-finite values")
        if self.task not in _TASKS:
            raise ValidationError(f"unknown task {self.task!r}")
        if self.normalized:
            norms = np.linalg.norm(self.inputs, axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > ROW_NORM_TOL:
                raise ValidationError(
                    f"normalized dataset has a row with |norm - 1| = {worst:.3e} > {ROW_NORM_TOL:.0e}"
                )
        self.clean_labels = self._check_labels(np.asarray(self.clean_labels), "clean_labels")
        self.noisy_labels = self._check_labels(
            np.asarray(self.noisy_labels), "noisy_labels", noisy=True
        )

    def _check_labels(self, labels, name, noisy=False):
        if labels.shape != (self.n,):
            raise ValidationError(f"{name} must have shape ({self.n},), got {labels.shape}")
        if self.task == TASK_MULTICLASS:
            if self.num_classes < 2:
                raise ValidationError("multiclass datasets need num_classes >= 2")
            labels = labels.astype(np.int64)
            if labels.min() < 1 or labels.max() > self.num_classes:
                raise ValidationError(f"{name} must be class ids in 1..{self.num_classes}")
            return labels
        labels = labels.astype(np.float64)
        if not np.all(np.isfinite(labels)):
            raise ValidationError(f"{name} contain non-finite values")
        if self.task == TASK_BINARY and not np.all(np.isin(labels, (-1.0, 1.0))):
            raise ValidationError(f"{name} for a binary task must be +1 or -1")
        if self.task == TASK_REGRESSION and not noisy:
            if labels.min() < -1.0 or labels.max() > 1.0:
                raise ValidationError(f"{name} for regression must lie in [-1, 1]")
        return labels

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def with_noisy_labels(self, noisy_labels) -> "DataSet":
        """New dataset sharing inputs and clean labels, with fresh noisy labels."""
        return replace(self, noisy_labels=np.array(noisy_labels))


def _l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("cannot l2-normalize a zero input row")
    return x / norms


def _read_exact(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if len(buf) < offset + count:
        raise DataFormatError(f"file truncated while reading {what}")
    return buf[offset : offset + count]


def _read_idx_images(path) -> np.ndarray:
    buf = open(path, "rb").read()
    magic, count, rows, cols = struct.unpack(">IIII", _read_exact(buf, 0, 16, "image header"))
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"bad IDX image magic 0x{magic:08x} in {path}")
    payload = _read_exact(buf, 16, count * rows * cols, "image pixels")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)


def _read_idx_labels(path) -> np.ndarray:
    buf = open(path, "rb").read()
    magic, count = struct.unpack(">II", _read_exact(buf, 0, 8, "label header"))
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"bad IDX label magic 0x{magic:08x} in {path}")
    payload = _read_exact(buf, 8, count, "label bytes")
    return np.frombuffer(payload, dtype=np.uint8)


def load_mnist_binary(image_path, label_path, class_a: int, class_b: int, limit=None) -> DataSet:
    """Two-digit MNIST subset with labels mapped to +1 (class_a) / -1 (class_b).

    Pixels are scaled to [0, 1] and rows are then l2-normalized. Selection is
    deterministic: the first ``limit`` matching examples in file order.
    """
    if class_a == class_b:
        raise ValidationError("class_a and class_b must differ")
    images = _read_idx_images(image_path)
    labels = _read_idx_labels(label_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"image/label count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    mask = (labels == class_a) | (labels == class_b)
    idx = np.flatnonzero(mask)
    if limit is not None:
        idx = idx[:limit]
    if idx.size < 2:
        raise EmptyDatasetError(
            f"only {idx.size} usable examples for classes {class_a}/{class_b}"
        )
    x = images[idx].astype(np.float64) / 255.0
    x = _l2_normalize_rows(x)
    y = np.where(labels[idx] == class_a, 1.0, -1.0)
    return DataSet(inputs=x, clean_labels=y, noisy_labels=y.copy(), task=TASK_BINARY)


TARGET_LINEAR_SIGN = "linear-sign"
TARGET_SMOOTH_POLY = "smooth-poly"


def synth_sphere(n: int, d: int, target: str, seed: int) -> DataSet:
    """Uniform points on the unit sphere with a linear-sign or smooth target.

    Inputs are normalized Gaussian draws; the direction ``w`` is a unit vector
    drawn from the same seeded stream (inputs first, then w, so the draw order
    is part of the reproducibility contract).

    linear-sign: y = sgn(w.x) in {+1, -1} (binary task; sgn(0) maps to +1).
    smooth-poly: y = clip((w.x) + (w.x)^2 - 1/d, -1, 1) (regression task).
    """
    if n < 1:
        raise ValidationError(f"need n >= 1, got {n}")
    if d < 2:
        raise ValidationError(f"need d >= 2, got {d}")
    rng = np.random.default_rng(seed)
    x = _l2_normalize_rows(rng.standard_normal((n, d)))
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    margin = x @ w
    if target == TARGET_LINEAR_SIGN:
        y = np.where(margin >= 0.0, 1.0, -1.0)
        task = TASK_BINARY
    elif target == TARGET_SMOOTH_POLY:
        y = np.clip(margin + margin**2 - 1.0 / d, -1.0, 1.0)
        task = TASK_REGRESSION
    else:
        raise ValidationError(f"unknown target family {target!r}")
    return DataSet(inputs=x, clean_labels=y, noisy_labels=y.copy(), task=task)


def split_dataset(data: DataSet, n_train: int):
    """Split one dataset into (train, test) by row index.

    Synthetic targets depend on a per-dataset random direction, so matched
    train/test pairs must come from a single draw; generate n_train + n_test
    points and split rather than sampling two differently seeded datasets.
    """
    if not 1 <= n_train < data.n:
        raise ValidationError(f"n_train must lie in 1..{data.n - 1}, got {n_train}")
    head = replace(
        data,
        inputs=data.inputs[:n_train],
        clean_labels=data.clean_labels[:n_train],
        noisy_labels=data.noisy_labels[:n_train],
    )
    tail = replace(
        data,
        inputs=data.inputs[n_train:],
        clean_labels=data.clean_labels[n_train:],
        noisy_labels=data.noisy_labels[n_train:],
    )
    return head, tail


@dataclass(frozen=True)
class Provenance:
    """How a cached kernel was produced.

    Only ``kind`` survives a save/load round trip; the width/depth/seed
    details are in-memory metadata (the cache file stores a one-byte tag).
    """

    kind: str
    width: int | None = None
    depth: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in _PROVENANCE_TAGS:
            raise ValidationError(f"unknown provenance kind {self.kind!r}")


@dataclass
class KernelCache:
    matrix: KernelMatrix
    provenance: Provenance
    input_digest: bytes


def dataset_digest(data: DataSet) -> bytes:
    """SHA-256 over the input matrix (shape header plus little-endian f64 payload)."""
    h = hashlib.sha256()
    h.update(struct.pack("<QQ", data.n, data.d))
    h.update(np.ascontiguousarray(data.inputs, dtype="<f8").tobytes())
    return h.digest()


def make_kernel_cache(matrix: KernelMatrix, provenance: Provenance, data: DataSet) -> KernelCache:
    return KernelCache(matrix=matrix, provenance=provenance, input_digest=dataset_digest(data))


def save_kernel(cache: KernelCache, path) -> None:
    """Write a cache file: magic, u16 version, u8 provenance tag, u64 n,
    32-byte input digest, then n*n little-endian f64 values row-major.
    Integer header fields are little-endian."""
    n = cache.matrix.n
    header = CACHE_MAGIC + struct.pack(
        "<HBQ", CACHE_VERSION, _PROVENANCE_TAGS[cache.provenance.kind], n
    )
    payload = np.ascontiguousarray(cache.matrix.values, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(cache.input_digest)
        f.write(payload)


def load_kernel(path, data: DataSet) -> KernelCache:
    """Read a cache file and verify its input digest against ``data``.

    The f64 payload round-trips bit-exactly. A digest mismatch raises
    StaleCacheError; any structural problem raises DataFormatError.
    """
    buf = open(path, "rb").read()
    magic = _read_exact(buf, 0, 4, "cache magic")
    if magic != CACHE_MAGIC:
        raise DataFormatError(f"bad kernel cache magic {magic!r} in {path}")
    version, tag, n = struct.unpack("<HBQ", _read_exact(buf, 4, 11, "cache header"))
    if version != CACHE_VERSION:
        raise DataFormatError(f"unsupported kernel cache version {version}")
    if tag not in _TAG_TO_KIND:
        raise DataFormatError(f"unknown provenance tag {tag}")
    digest = _read_exact(buf, 15, 32, "input digest")
    payload = _read_exact(buf, 47, n * n * 8, "kernel values")
    if len(buf) != 47 + n * n * 8:
        raise DataFormatError(f"kernel cache has {len(buf) - 47 - n * n * 8} trailing bytes")
    expected = dataset_digest(data)
    if digest != expected:
        raise StaleCacheError(
            f"kernel cache {path} was built from different inputs (digest mismatch)"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(n, n).astype(np.float64)
    matrix = KernelMatrix.from_values(values)
    return KernelCache(matrix=matrix, provenance=Provenance(kind=_TAG_TO_KIND[tag]), input_digest=digest)
