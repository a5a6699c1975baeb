"""
Evaluation datasets: IDX (MNIST-style), CSV tables and seeded synthetic blobs.

All loaders scale inputs into [0, 1] where the format allows it, matching
the default input box used for data-free bound estimation.
"""

import contextlib
import csv
import gzip
import io
import logging
import math
import os
import struct
from dataclasses import dataclass

import chardet
import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

LOGGER = logging.getLogger(__name__)


class DatasetError(Exception):
    """
    A dataset file is malformed or inconsistent.
    """


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_count = int(self.class_count)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.class_count
        ):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def image_like(self):
        return self.inputs.ndim == 4

    def head(self, limit):
        if limit is None:
            return self
        return Dataset(
            self.inputs[:limit], self.labels[:limit], self.class_count, self.name
        )

    def split(self, fraction=0.8):
        """Split into the first `fraction` of the records and the rest."""
        cut = int(round(len(self) * fraction))
        return (
            Dataset(self.inputs[:cut], self.labels[:cut], self.class_count, self.name),
            Dataset(self.inputs[cut:], self.labels[cut:], self.class_count, self.name),
        )


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as data_file:
        return data_file.read()


def _idx_header(data, path, magic, dims):
    size = 4 * (dims + 1)
    if len(data) < size:
        raise DatasetError(f"{path}: truncated IDX header")
    values = struct.unpack(f">{dims + 1}I", data[:size])
    if values[0] != magic:
        raise DatasetError(
            f"{path}: wrong magic 0x{values[0]:08x}, expected 0x{magic:08x}"
        )
    return values[1:], size


def load_idx(images_path, labels_path, limit=None, class_count=None):
    """
    Load an IDX image/label file pair as ``[n, rows, cols, 1]`` inputs in [0, 1].

    Files ending in ``.gz`` are decompressed transparently.
    """
    image_data = _read_bytes(images_path)
    label_data = _read_bytes(labels_path)
    (count, rows, cols), image_offset = _idx_header(
        image_data, images_path, IDX_IMAGES_MAGIC, 3
    )
    (label_count,), label_offset = _idx_header(
        label_data, labels_path, IDX_LABELS_MAGIC, 1
    )
    if count != label_count:
        raise DatasetError(f"{count} images but {label_count} labels")
    if limit is not None:
        count = min(count, limit)

    pixels = count * rows * cols
    if (
        len(image_data) - image_offset < pixels
        or len(label_data) - label_offset < count
    ):
        raise DatasetError("IDX payload shorter than its header declares")
    images = np.frombuffer(
        image_data, dtype=np.uint8, count=pixels, offset=image_offset
    )
    labels = np.frombuffer(label_data, dtype=np.uint8, count=count, offset=label_offset)
    inputs = (images.astype(np.float32) / 255.0).reshape(count, rows, cols, 1)
    if class_count is None:
        class_count = int(labels.max()) + 1 if count else 1
    LOGGER.info("loaded %d IDX records from %s", count, images_path)
    return Dataset(inputs, labels.astype(np.int64), class_count, "idx")


def find_idx_files(data_dir, split="test"):
    """
    Locate the ``train-*`` or ``t10k-*`` image/label pair in `data_dir`,
    accepting both MNIST file spellings and gzip-compressed copies.
    """
    prefix = "train" if split == "train" else "t10k"
    for separator in ("-", "."):
        for suffix in ("", ".gz"):
            images = os.path.join(
                data_dir, f"{prefix}-images{separator}idx3-ubyte{suffix}"
            )
            labels = os.path.join(
                data_dir, f"{prefix}-labels{separator}idx1-ubyte{suffix}"
            )
            if os.path.isfile(images) and os.path.isfile(labels):
                return images, labels
    raise DatasetError(f"{data_dir}: no {prefix}-images/{prefix}-labels IDX files")


def _decode(raw):
    with contextlib.suppress(UnicodeDecodeError):
        return raw.decode("utf-8-sig")
    encoding = chardet.detect(raw).get("encoding") or "latin-1"
    LOGGER.warning("CSV is not UTF-8, decoding as %s", encoding)
    return raw.decode(encoding, "replace")


def _parse_label(cell, row_number, label_column):
    try:
        value = float(cell)
    except ValueError:
        value = math.nan
    if not math.isfinite(value) or value != int(value) or value < 0:
        raise DatasetError(
            f"row {row_number} column '{label_column}': invalid label '{cell}'"
        )
    return int(value)


def load_csv(path, label_column, normalize=False, class_count=None):
    """
    Load a CSV table with a header row; every non-label column is a feature.

    With `normalize`, each feature column is min-max scaled to [0, 1]
    (constant columns become 0).
    """
    rows = list(csv.reader(io.StringIO(_decode(_read_bytes(path)))))
    rows = [row for row in rows if row]
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [name.strip() for name in rows[0]]
    if label_column not in header:
        raise DatasetError(f"{path}: no label column '{label_column}'")
    label_index = header.index(label_column)
    features = [name for name in header if name != label_column]

    inputs, labels = [], []
    for row_number, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetError(
                f"row {row_number}: {len(row)} cells, expected {len(header)}"
            )
        values = []
        for column, cell in enumerate(row):
            if column == label_index:
                continue
            try:
                value = float(cell)
            except ValueError:
                value = math.nan
            if not math.isfinite(value):
                raise DatasetError(
                    f"row {row_number} column '{header[column]}': "
                    f"non-numeric value '{cell}'"
                )
            values.append(value)
        inputs.append(values)
        labels.append(_parse_label(row[label_index], row_number, label_column))
    if not labels:
        raise DatasetError(f"{path}: no data rows")

    inputs = np.array(inputs, dtype=np.float64).reshape(len(labels), len(features))
    if normalize:
        low = inputs.min(axis=0)
        span = inputs.max(axis=0) - low
        inputs = np.divide(
            inputs - low, span, out=np.zeros_like(inputs), where=span > 0
        )
    if class_count is None:
        class_count = max(labels) + 1
    return Dataset(inputs, labels, class_count, "csv")


def blob_centers(seed, classes):
    """
    One centre per class, evenly spaced on a circle of radius 0.3 around
    (0.5, 0.5) with a seed-dependent phase.
    """
    phase = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi)
    angles = phase + 2.0 * np.pi * np.arange(classes) / classes
    return 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def synthetic_dataset(seed, n, classes=2):
    """
    Gaussian blobs in the unit square, one blob per class, clipped to [0, 1]^2.

    Deterministic for a fixed seed.  The blob spread is an eighth of the
    distance between neighbouring centres.
    """
    if n <= 0 or classes < 2:
        raise DatasetError("synthetic data needs n > 0 and at least 2 classes")
    rng = np.random.default_rng(seed)
    centers = blob_centers(seed, classes)
    chord = 0.6 * math.sin(math.pi / classes)
    labels = rng.permutation(np.arange(n) % classes)
    inputs = centers[labels] + rng.normal(0.0, chord / 8.0, size=(n, 2))
    return Dataset(np.clip(inputs, 0.0, 1.0), labels, classes, "synthetic")
