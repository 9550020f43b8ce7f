"""Datasets: IDX/Adult loaders, synthetic blobs, IID splitting and label-shift resampling."""
from __future__ import annotations

import csv
import gzip
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (ConsistencyError, FormatError, InsufficientSamplesError, SchemaError,
                     SizeError)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Features with integer class labels. Arrays are made read-only on construction."""
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.int64, copy=True)
        if x.shape[0] != y.shape[0]:
            raise ConsistencyError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def subset(self, idx: Sequence[int], name: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes,
                              name or self.name, dict(self.meta))

    def fraction_in(self, classes: Iterable[int]) -> float:
        return float(np.isin(self.labels, list(classes)).mean())


@dataclass(frozen=True)
class ShiftSpec:
    """Label shift between two complementary class groups."""
    group_a: frozenset
    group_b: frozenset
    target_ratio: float

    def __post_init__(self):
        a, b = frozenset(int(c) for c in self.group_a), frozenset(int(c) for c in self.group_b)
        if not 0.0 < self.target_ratio < 1.0:
            raise ValueError("target_ratio must lie strictly between 0 and 1")
        if a & b:
            raise ValueError("class groups must be disjoint")
        if not a or not b:
            raise ValueError("both class groups must be non-empty")
        if a | b != frozenset(range(len(a | b))):
            raise ValueError("class groups must cover all classes 0..C-1")
        object.__setattr__(self, "group_a", a)
        object.__setattr__(self, "group_b", b)

    @property
    def num_classes(self) -> int:
        return len(self.group_a) + len(self.group_b)

    @classmethod
    def even_odd(cls, num_classes: int, target_ratio: float) -> "ShiftSpec":
        """Group a = even classes. For two classes this is {0} vs {1}."""
        even = frozenset(range(0, num_classes, 2))
        return cls(even, frozenset(range(num_classes)) - even, target_ratio)

    def to_dict(self) -> dict:
        return {"group_a": sorted(self.group_a), "group_b": sorted(self.group_b),
                "target_ratio": self.target_ratio}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(frozenset(d["group_a"]), frozenset(d["group_b"]), float(d["target_ratio"]))


def relative_target_ratio(base_ratio: float, severity: float) -> float:
    """Group-a fraction after scaling the base odds by ``severity / (1 - severity)``.

    Used for already unbalanced label sets: a "60-40" shift multiplies the
    original odds by 1.5 rather than forcing an exact 60-40 split.
    """
    if not (0 < base_ratio < 1 and 0 < severity < 1):
        raise ValueError("ratios must lie strictly between 0 and 1")
    odds = base_ratio / (1 - base_ratio) * severity / (1 - severity)
    return odds / (1 + odds)


# --------------------------------------------------------------------------- #
# IDX (MNIST / Fashion-MNIST)
# --------------------------------------------------------------------------- #

def _read_maybe_gz(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream") from exc
    return raw


def _parse_idx_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x}")
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def _parse_idx_labels(raw: bytes, path) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX label header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(raw) != 8 + n:
        raise FormatError(f"{path}: expected {8 + n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "") -> LabeledDataset:
    """Load an IDX image/label pair (optionally gzipped).

    Features come back as ``(N, 1, rows, cols)`` float64 in [0, 1].
    """
    images = _parse_idx_images(_read_maybe_gz(images_path), images_path)
    labels = _parse_idx_labels(_read_maybe_gz(labels_path), labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise ConsistencyError(f"label {labels.max()} exceeds num_classes={num_classes}")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return LabeledDataset(x, labels.astype(np.int64), num_classes, name or Path(images_path).name)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# --------------------------------------------------------------------------- #
# Adult census
# --------------------------------------------------------------------------- #

CENSUS_COLUMNS = (
    "age", "workclass", "fnlwgt", "education", "education.num", "marital.status",
    "occupation", "relationship", "race", "sex", "capital.gain", "capital.loss",
    "hours.per.week", "native.country",
)
CENSUS_CONTINUOUS = ("age", "fnlwgt", "education.num", "capital.gain", "capital.loss",
                     "hours.per.week")
CENSUS_CATEGORIES = {
    "workclass": ("Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov", "Local-gov",
                  "State-gov", "Without-pay", "Never-worked"),
    "education": ("Bachelors", "Some-college", "11th", "HS-grad", "Prof-school", "Assoc-acdm",
                  "Assoc-voc", "9th", "7th-8th", "12th", "Masters", "1st-4th", "10th",
                  "Doctorate", "5th-6th", "Preschool"),
    "marital.status": ("Married-civ-spouse", "Divorced", "Never-married", "Separated",
                       "Widowed", "Married-spouse-absent", "Married-AF-spouse"),
    "occupation": ("Tech-support", "Craft-repair", "Other-service", "Sales", "Exec-managerial",
                   "Prof-specialty", "Handlers-cleaners", "Machine-op-inspct", "Adm-clerical",
                   "Farming-fishing", "Transport-moving", "Priv-house-serv", "Protective-serv",
                   "Armed-Forces"),
    "relationship": ("Wife", "Own-child", "Husband", "Not-in-family", "Other-relative",
                     "Unmarried"),
    "race": ("White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black"),
    "sex": ("Female", "Male"),
    "native.country": (
        "United-States", "Cambodia", "England", "Puerto-Rico", "Canada", "Germany",
        "Outlying-US(Guam-USVI-etc)", "India", "Japan", "Greece", "South", "China", "Cuba",
        "Iran", "Honduras", "Philippines", "Italy", "Poland", "Jamaica", "Vietnam", "Mexico",
        "Portugal", "Ireland", "France", "Dominican-Republic", "Laos", "Ecuador", "Taiwan",
        "Haiti", "Columbia", "Hungary", "Guatemala", "Nicaragua", "Scotland", "Thailand",
        "Yugoslavia", "El-Salvador", "Trinadad&Tobago", "Peru", "Hong", "Holand-Netherlands"),
}
# dropped by the ordinal encoding: fnlwgt is a sampling weight, education duplicates education.num
_ORDINAL_DROP = ("fnlwgt", "education")


def _census_rows(path):
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text), skipinitialspace=True)
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        row = [c.strip() for c in row]
        if row[0].lower() == "age":
            continue
        if row[0].startswith("|"):
            continue  # adult.test carries a comment line
        yield row


def load_census(csv_path, *, encoding: str = "onehot",
                stats: Optional[dict] = None) -> LabeledDataset:
    """Load an Adult-census CSV (with or without header).

    Rows containing ``?`` are dropped. ``encoding="onehot"`` expands every
    categorical attribute over its published vocabulary; ``"ordinal"`` replaces
    categories by their vocabulary index and drops ``fnlwgt``/``education``,
    giving 12 inputs. Numeric columns are z-normalised (population std) with
    ``stats`` if given, else with statistics of this file; zero-variance
    columns are emitted as zeros. Label 1 means ``>50K``.
    """
    if encoding not in ("onehot", "ordinal"):
        raise ValueError("encoding must be 'onehot' or 'ordinal'")
    records = []
    labels = []
    for lineno, row in enumerate(_census_rows(csv_path), 1):
        if len(row) != len(CENSUS_COLUMNS) + 1:
            raise SchemaError(f"row {lineno}: expected {len(CENSUS_COLUMNS) + 1} fields, got {len(row)}")
        if "?" in row:
            continue
        label = row[-1].rstrip(".")
        if label not in ("<=50K", ">50K"):
            raise SchemaError(f"row {lineno}: unknown income label {row[-1]!r}")
        rec = dict(zip(CENSUS_COLUMNS, row[:-1]))
        for col, vocab in CENSUS_CATEGORIES.items():
            if rec[col] not in vocab:
                raise SchemaError(f"row {lineno}: unknown {col} category {rec[col]!r}")
        for col in CENSUS_CONTINUOUS:
            try:
                rec[col] = float(rec[col])
            except ValueError as exc:
                raise SchemaError(f"row {lineno}: non-numeric {col} {rec[col]!r}") from exc
        records.append(rec)
        labels.append(int(label == ">50K"))

    if encoding == "onehot":
        numeric_cols = list(CENSUS_CONTINUOUS)
    else:
        numeric_cols = [c for c in CENSUS_COLUMNS if c not in _ORDINAL_DROP]

    def numeric(rec, col):
        if col in CENSUS_CATEGORIES:
            return float(CENSUS_CATEGORIES[col].index(rec[col]))
        return rec[col]

    num = np.array([[numeric(r, c) for c in numeric_cols] for r in records],
                   dtype=np.float64).reshape(len(records), len(numeric_cols))
    if stats is None:
        mean = num.mean(axis=0) if len(records) else np.zeros(len(numeric_cols))
        std = num.std(axis=0) if len(records) else np.zeros(len(numeric_cols))
        stats = {"columns": numeric_cols, "mean": mean.tolist(), "std": std.tolist()}
    mean, std = np.asarray(stats["mean"]), np.asarray(stats["std"])
    safe = np.where(std > 0, std, 1.0)
    z = np.where(std > 0, (num - mean) / safe, 0.0)

    if encoding == "onehot":
        blocks = []
        feature_names = []
        cont_iter = iter(range(len(numeric_cols)))
        for col in CENSUS_COLUMNS:
            if col in CENSUS_CONTINUOUS:
                j = next(cont_iter)
                blocks.append(z[:, j:j + 1])
                feature_names.append(col)
            else:
                vocab = CENSUS_CATEGORIES[col]
                oh = np.zeros((len(records), len(vocab)))
                for i, r in enumerate(records):
                    oh[i, vocab.index(r[col])] = 1.0
                blocks.append(oh)
                feature_names.extend(f"{col}={v}" for v in vocab)
        x = np.concatenate(blocks, axis=1)
    else:
        x = z
        feature_names = numeric_cols
    return LabeledDataset(x, np.asarray(labels, dtype=np.int64), 2, Path(csv_path).name,
                          {"stats": stats, "feature_names": feature_names, "encoding": encoding})


# --------------------------------------------------------------------------- #
# Synthetic data
# --------------------------------------------------------------------------- #

def synth_blobs(num_classes: int, samples_per_class: int, dim: int, seed: int = 0,
                separation: float = 3.0) -> LabeledDataset:
    """Unit-variance Gaussian clusters whose closest pair of means is ``separation`` apart."""
    if num_classes < 1 or samples_per_class < 1 or dim < 1:
        raise ValueError("num_classes, samples_per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    if num_classes > 1:
        d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        means *= separation / d[np.triu_indices(num_classes, 1)].min()
    x = means.repeat(samples_per_class, axis=0) + rng.standard_normal(
        (num_classes * samples_per_class, dim))
    y = np.arange(num_classes).repeat(samples_per_class)
    return LabeledDataset(x, y, num_classes, f"blobs{num_classes}x{samples_per_class}",
                          {"means": means.tolist(), "seed": seed, "separation": separation})


# --------------------------------------------------------------------------- #
# Splitting and shifting
# --------------------------------------------------------------------------- #

def split_iid(dataset: LabeledDataset, n_clients: int, sizes, seed: int = 0) -> list[LabeledDataset]:
    """Disjoint random partitions of the given sizes (an int means equal sizes)."""
    if isinstance(sizes, (int, np.integer)):
        sizes = [int(sizes)] * n_clients
    sizes = [int(s) for s in sizes]
    if len(sizes) != n_clients:
        raise SizeError(f"{n_clients} clients but {len(sizes)} sizes")
    if any(s < 0 for s in sizes):
        raise SizeError("sizes must be non-negative")
    if sum(sizes) > len(dataset):
        raise SizeError(f"requested {sum(sizes)} samples from a dataset of {len(dataset)}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    bounds = np.cumsum([0] + sizes)
    return [dataset.subset(perm[a:b], f"{dataset.name}[client{i}]")
            for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _allocate(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` proportional to ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    if total == 0 or weights.sum() == 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = total * weights / weights.sum()
    base = np.floor(exact).astype(np.int64)
    rem = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rem]] += 1
    return base


def apply_label_shift(pool: LabeledDataset, spec: ShiftSpec, out_size: int,
                      seed: int = 0) -> LabeledDataset:
    """Draw ``out_size`` samples without replacement so that exactly
    ``round(target_ratio * out_size)`` carry a group-a label.

    Within each group the per-class counts follow the pool's class proportions.
    """
    if spec.num_classes != pool.num_classes:
        raise ValueError("shift spec and pool disagree on the number of classes")
    n_a = _round_half_up(spec.target_ratio * out_size)
    hist = pool.label_histogram
    counts = np.zeros(pool.num_classes, dtype=np.int64)
    for group, n_group in ((sorted(spec.group_a), n_a), (sorted(spec.group_b), out_size - n_a)):
        alloc = _allocate(n_group, hist[group])
        if n_group and hist[group].sum() == 0:
            raise InsufficientSamplesError(f"pool has no samples of classes {group}")
        counts[group] = alloc
    short = counts > hist
    if short.any():
        c = int(np.flatnonzero(short)[0])
        raise InsufficientSamplesError(
            f"class {c}: need {counts[c]} samples, pool has {hist[c]}")
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(pool.num_classes):
        if counts[c]:
            idx = np.flatnonzero(pool.labels == c)
            picked.append(rng.choice(idx, size=counts[c], replace=False))
    idx = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
    idx = idx[rng.permutation(len(idx))]
    return pool.subset(idx, f"{pool.name}[shift{spec.target_ratio:g}]")


def save_dataset(path, dataset: LabeledDataset) -> None:
    meta = {"num_classes": dataset.num_classes, "name": dataset.name, "meta": dataset.meta}
    buf = io.BytesIO()
    np.savez(buf, features=dataset.features, labels=dataset.labels,
             header=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> LabeledDataset:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(z["header"].tobytes().decode())
        return LabeledDataset(z["features"], z["labels"], meta["num_classes"], meta["name"],
                              meta["meta"])
