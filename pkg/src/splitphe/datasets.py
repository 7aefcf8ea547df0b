"""Dataset loading and preparation for the training harness.

Two on-disk formats are supported: delimited text with one labeled sample
per row, and the big-endian IDX container commonly used for image corpora.
Everything is materialized as float64 features plus one-hot labels; the
split/standardize helpers keep preprocessing deterministic so that runs
are reproducible from a seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature matrix plus one-hot labels, with class names for reporting."""

    features: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels.ndim != 2:
            raise DataError(f"labels must be one-hot 2-d, got shape {self.labels.shape}")
        if len(self.features) != len(self.labels):
            raise DataError(
                f"{len(self.features)} feature rows but {len(self.labels)} label rows"
            )
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.labels.shape[1])]

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx: np.ndarray, name: str = "") -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_names, name or self.name)


def one_hot(indices: np.ndarray, n_classes: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.min(initial=0) < 0 or (len(indices) and indices.max() >= n_classes):
        raise DataError(f"class index outside [0, {n_classes})")
    out = np.zeros((len(indices), n_classes), dtype=np.float64)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def load_csv(
    path,
    label_column: int = -1,
    delimiter: str = ",",
    header: bool | None = None,
    name: str = "",
) -> Dataset:
    """Load a delimited text file with one labeled sample per row.

    ``label_column`` indexes the label field (negatives count from the
    right).  ``header=None`` auto-detects: if any feature field of the
    first line fails to parse as a number, the line is treated as a header.
    Labels may be integers or strings; distinct values are mapped to class
    indices in sorted order (numeric sort when every label parses as a
    number).  Errors name the offending line.
    """
    rows: list[list[str]] = []
    with open(path) as src:
        lines = [(i + 1, line.rstrip("\n")) for i, line in enumerate(src)]
    lines = [(no, line) for no, line in lines if line.strip()]
    if not lines:
        raise DataError(f"{path}: no data rows")

    width = len(lines[0][1].split(delimiter))
    if width < 2:
        raise DataError(f"{path}:1: need at least one feature column and a label column")
    label_idx = label_column if label_column >= 0 else width + label_column
    if not 0 <= label_idx < width:
        raise DataError(f"{path}: label column {label_column} outside a {width}-column file")

    start = 0
    if header is None:
        first = lines[0][1].split(delimiter)
        feature_fields = [f for i, f in enumerate(first) if i != label_idx]
        header = not all(_is_number(f) for f in feature_fields)
    if header:
        start = 1
        if len(lines) == 1:
            raise DataError(f"{path}: header only, no data rows")

    raw_labels: list[str] = []
    features: list[list[float]] = []
    for lineno, line in lines[start:]:
        fields = line.split(delimiter)
        if len(fields) != width:
            raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(fields)}")
        try:
            features.append(
                [float(f) for i, f in enumerate(fields) if i != label_idx]
            )
        except ValueError:
            bad = next(f for i, f in enumerate(fields) if i != label_idx and not _is_number(f))
            raise DataError(f"{path}:{lineno}: feature field {bad!r} is not a number") from None
        raw_labels.append(fields[label_idx].strip())

    classes = sorted(set(raw_labels), key=_label_sort_key)
    index = {c: i for i, c in enumerate(classes)}
    label_idx_arr = np.array([index[lbl] for lbl in raw_labels])
    return Dataset(
        np.array(features),
        one_hot(label_idx_arr, len(classes)),
        class_names=classes,
        name=name or str(path),
    )


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _label_sort_key(text: str):
    try:
        return (0, float(text), "")
    except ValueError:
        return (1, 0.0, text)


def load_idx(images_path, labels_path, limit: int | None = None, name: str = "") -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1] and flattened."""
    with open(images_path, "rb") as src:
        head = src.read(16)
        if len(head) < 16:
            raise DataError(f"{images_path}: truncated IDX header")
        magic, count, height, width = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        take = count if limit is None else min(limit, count)
        data = src.read(take * height * width)
        if len(data) < take * height * width:
            raise DataError(f"{images_path}: file ends before image {take}")
    images = np.frombuffer(data, dtype=np.uint8).reshape(take, height * width) / 255.0

    with open(labels_path, "rb") as src:
        head = src.read(8)
        if len(head) < 8:
            raise DataError(f"{labels_path}: truncated IDX header")
        magic, label_count = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise DataError(f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        if label_count != count:
            raise DataError(
                f"{labels_path}: {label_count} labels for {count} images in {images_path}"
            )
        raw = src.read(take)
        if len(raw) < take:
            raise DataError(f"{labels_path}: file ends before label {take}")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, one_hot(labels, n_classes), name=name or str(images_path))


def synthetic_blobs(
    n: int, d_in: int, n_classes: int, seed: int = 0, spread: float = 0.6
) -> Dataset:
    """Gaussian class blobs with unit-norm centers; handy for smoke tests."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, d_in))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(0, n_classes, size=n)
    features = centers[labels] + spread * rng.standard_normal((n, d_in))
    return Dataset(features, one_hot(labels, n_classes), name="synthetic")


def train_test_split(
    ds: Dataset, test_fraction: float = 0.2, seed: int = 0, stratified: bool = True
) -> tuple[Dataset, Dataset]:
    """Seeded split; stratified keeps per-class proportions in both halves."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    if stratified:
        test_idx: list[int] = []
        train_idx: list[int] = []
        class_of = np.argmax(ds.labels, axis=1)
        for cls in range(ds.n_classes):
            members = np.flatnonzero(class_of == cls)
            members = members[rng.permutation(len(members))]
            cut = int(round(len(members) * test_fraction))
            test_idx.extend(members[:cut])
            train_idx.extend(members[cut:])
        train = np.array(sorted(train_idx), dtype=np.int64)
        test = np.array(sorted(test_idx), dtype=np.int64)
    else:
        order = rng.permutation(ds.n)
        cut = int(round(ds.n * test_fraction))
        test, train = np.sort(order[:cut]), np.sort(order[cut:])
    return ds.subset(train, ds.name + "/train"), ds.subset(test, ds.name + "/test")


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Z-score features using statistics of the first dataset only."""
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std < 1e-9, 1.0, std)

    def apply(ds: Dataset) -> Dataset:
        return Dataset((ds.features - mean) / std, ds.labels, ds.class_names, ds.name)

    return tuple(apply(ds) for ds in (train, *others))
