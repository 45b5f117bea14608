"""Synthetic subpopulation-shift datasets.

Every example carries a class ``y``, a spurious attribute ``a`` and the
group id ``g = y * n_attributes + a``. Features are Gaussian: a block of
"core" coordinates whose mean depends on ``y`` followed by a block of
"spurious" coordinates whose mean depends on ``a``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "val_context", "val_tune", "test")
VAL_FRACTIONS = (0.85, 0.15)


@dataclass
class GroupedDataset:
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    n_classes: int = 2
    n_attributes: int = 2
    split_tag: str = "train"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError("x must be a 2-d array (n_examples, n_features)")
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        n = self.x.shape[0]
        if self.y.shape != (n,) or self.a.shape != (n,):
            raise ValueError("x, y and a must have the same number of rows")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"class labels must lie in [0, {self.n_classes})")
        if n and (self.a.min() < 0 or self.a.max() >= self.n_attributes):
            raise ValueError(f"attribute labels must lie in [0, {self.n_attributes})")
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def n_groups(self) -> int:
        return self.n_classes * self.n_attributes

    @property
    def g(self) -> np.ndarray:
        return self.y * self.n_attributes + self.a

    @property
    def group_counts(self) -> dict[int, int]:
        counts = np.bincount(self.g, minlength=self.n_groups)
        return {int(k): int(c) for k, c in enumerate(counts) if c > 0}

    def group_proportions(self) -> np.ndarray:
        counts = np.bincount(self.g, minlength=self.n_groups).astype(np.float64)
        return counts / max(len(self), 1)

    def subset(self, idx, split_tag: str | None = None) -> "GroupedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupedDataset(self.x[idx], self.y[idx], self.a[idx], self.n_classes,
                              self.n_attributes, split_tag or self.split_tag)

    def equals(self, other: "GroupedDataset") -> bool:
        return (
            self.split_tag == other.split_tag
            and self.n_classes == other.n_classes
            and self.n_attributes == other.n_attributes
            and self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
        )


@dataclass
class ShiftSpec:
    train_group_proportions: tuple[float, ...]
    test_group_proportions: tuple[float, ...]
    core_separation: float = 1.0
    spurious_separation: float = 2.0
    noise_sd: float = 1.0
    n_train: int = 5000
    n_val: int = 1200
    n_test: int = 4000
    core_dim: int = 2
    spurious_dim: int = 8
    n_classes: int = 2
    n_attributes: int = 2
    # None means "same mixture as train", the default for the Waterbirds-style setup
    val_group_proportions: tuple[float, ...] | None = field(default=None)

    def __post_init__(self):
        G = self.n_classes * self.n_attributes
        for name in ("train_group_proportions", "test_group_proportions", "val_group_proportions"):
            p = getattr(self, name)
            if p is None:
                continue
            p = tuple(float(v) for v in p)
            setattr(self, name, p)
            if len(p) != G:
                raise ValueError(f"{name} has {len(p)} entries, expected {G} groups")
            if min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be a probability vector, got {p}")
        for name in ("n_train", "n_val", "n_test", "core_dim", "spurious_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_classes < 2 or self.n_attributes < 1:
            raise ValueError("need at least 2 classes and 1 attribute value")
        if self.noise_sd <= 0:
            raise ValueError("noise_sd must be positive")

    @property
    def n_features(self) -> int:
        return self.core_dim + self.spurious_dim

    def to_dict(self) -> dict:
        return asdict(self)


# group order is g = y * 2 + a
WATERBIRDS_TRAIN = (0.22, 0.01, 0.04, 0.73)  # landbird/land, landbird/water, waterbird/land, waterbird/water
CELEBA_TRAIN = (0.44, 0.41, 0.14, 0.01)  # non-blond F, non-blond M, blond F, blond M
BALANCED_4 = (0.25, 0.25, 0.25, 0.25)


def waterbirds_like(**overrides) -> ShiftSpec:
    """Spurious correlation: label and background agree on 95% of training data."""
    kw = dict(train_group_proportions=WATERBIRDS_TRAIN, test_group_proportions=BALANCED_4)
    kw.update(overrides)
    return ShiftSpec(**kw)


def celeba_like(**overrides) -> ShiftSpec:
    """Class shift: blond is 15% of training data but half of the test data."""
    kw = dict(train_group_proportions=CELEBA_TRAIN, test_group_proportions=BALANCED_4)
    kw.update(overrides)
    return ShiftSpec(**kw)


PRESETS = {"waterbirds-like": waterbirds_like, "celeba-like": celeba_like}


def _level(k: np.ndarray, n_levels: int) -> np.ndarray:
    # evenly spaced in [-1, 1]; for two levels this is 2k - 1
    if n_levels == 1:
        return np.zeros_like(k, dtype=np.float64)
    return 2.0 * k / (n_levels - 1) - 1.0


def _sample_split(spec: ShiftSpec, proportions, n: int, rng, tag: str) -> GroupedDataset:
    A = spec.n_attributes
    g = rng.choice(len(proportions), size=n, p=np.asarray(proportions))
    y, a = g // A, g % A
    core = spec.core_separation * _level(y, spec.n_classes)[:, None] + spec.noise_sd * rng.standard_normal((n, spec.core_dim))
    spur = spec.spurious_separation * _level(a, A)[:, None] + spec.noise_sd * rng.standard_normal((n, spec.spurious_dim))
    return GroupedDataset(np.hstack([core, spur]), y, a, spec.n_classes, A, tag)


def make_spurious_gaussian(spec: ShiftSpec, seed: int):
    """Draw ``(train, val_context, val_tune, test)`` for a shift spec.

    Train and validation follow the training mixture (unless
    ``spec.val_group_proportions`` is set), test follows the test mixture. The
    validation draw is split 85/15 by group into context and tuning sets.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5eed]))
    train = _sample_split(spec, spec.train_group_proportions, spec.n_train, rng, "train")
    val_props = spec.val_group_proportions or spec.train_group_proportions
    val = _sample_split(spec, val_props, spec.n_val, rng, "val_context")
    test = _sample_split(spec, spec.test_group_proportions, spec.n_test, rng, "test")
    val_context, val_tune = split(val, VAL_FRACTIONS, seed, tags=("val_context", "val_tune"))
    return train, val_context, val_tune, test


def split(dataset: GroupedDataset, fractions, seed: int, tags=None) -> list[GroupedDataset]:
    """Stratified split: each group is cut by ``floor(n_g * f_k)`` per part,
    leftover examples go to the first part. Original row order is kept."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or fractions.size == 0 or fractions.min() < 0 or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must form a probability vector, got {fractions.tolist()}")
    tags = tags or [dataset.split_tag] * fractions.size
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5b1d]))
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    g = dataset.g
    for group in range(dataset.n_groups):
        idx = np.flatnonzero(g == group)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        sizes = np.floor(idx.size * fractions + 1e-9).astype(int)
        sizes[0] += idx.size - sizes.sum()
        start = 0
        for k, size in enumerate(sizes):
            if size == 0 and fractions[k] > 0:
                warnings.warn(f"group {group} contributes no examples to split part {k}", stacklevel=2)
            parts[k].append(idx[start:start + size])
            start += size
    out = []
    for k, chunks in enumerate(parts):
        sel = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        out.append(dataset.subset(sel, tags[k]))
    return out


# -- CSV persistence ---------------------------------------------------------

def save_csv(dataset: GroupedDataset, path) -> Path:
    path = Path(path)
    d = dataset.n_features
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(d)] + ["y", "a", "g", "split"])
        g = dataset.g
        for i in range(len(dataset)):
            w.writerow([format(v, ".17g") for v in dataset.x[i]]
                       + [int(dataset.y[i]), int(dataset.a[i]), int(g[i]), dataset.split_tag])
    return path


class CsvFormatError(ValueError):
    pass


def load_csv(path, n_classes: int | None = None, n_attributes: int | None = None,
             split_tag: str | None = None) -> GroupedDataset:
    """Inverse of :func:`save_csv`.

    Class and attribute counts are inferred from the rows when not given
    (at least 2 each); a header-only file yields an empty dataset.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, expected a header line") from None
        d = len(header) - 4
        if d < 1 or header[-4:] != ["y", "a", "g", "split"] or header[:d] != [f"x{j}" for j in range(d)]:
            raise CsvFormatError(f"{path}:1: unexpected header {header}")
        xs, ys, as_, gs, tags = [], [], [], [], set()
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 4:
                raise CsvFormatError(f"{path}:{lineno}: expected {d + 4} fields, got {len(row)}")
            try:
                xs.append([float(v) for v in row[:d]])
                ys.append(int(row[d]))
                as_.append(int(row[d + 1]))
                gs.append(int(row[d + 2]))
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
            tags.add(row[d + 3])
    if len(tags) > 1:
        raise CsvFormatError(f"{path}: mixed split tags {sorted(tags)}")
    y = np.array(ys, dtype=np.int64)
    a = np.array(as_, dtype=np.int64)
    g = np.array(gs, dtype=np.int64)
    if n_attributes is None:
        pos = y > 0
        inferred = np.unique((g[pos] - a[pos]) // y[pos]) if pos.any() else np.array([])
        n_attributes = max(2, int(a.max(initial=0)) + 1)
        # a single consistent candidate from the group ids wins; anything else
        # falls through to the row-level check below, which names the line
        if inferred.size == 1 and inferred[0] >= n_attributes:
            n_attributes = int(inferred[0])
    if n_classes is None:
        n_classes = max(2, int(y.max(initial=0)) + 1)
    bad = np.flatnonzero(g != y * n_attributes + a)
    if bad.size:
        raise CsvFormatError(f"{path}:{int(bad[0]) + 2}: group id does not equal y * {n_attributes} + a")
    tag = tags.pop() if tags else (split_tag or "train")
    x = np.array(xs, dtype=np.float64).reshape(len(xs), d)
    return GroupedDataset(x, y, a, n_classes, n_attributes, tag)
