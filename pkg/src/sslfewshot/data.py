"""Datasets, class-level splits, synthetic clusters and episode sampling.

Randomness always comes from an explicit ``numpy.random.Generator``. Derived
streams are keyed through :class:`numpy.random.SeedSequence`, so episode ``e``
of a run seeded with ``s`` uses ``rng_for(s, "episode", e)`` no matter which
thread or in what order it runs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Dataset",
    "SplitSpec",
    "EpisodeSpec",
    "Episode",
    "SyntheticSpec",
    "CapacityError",
    "ParseError",
    "rng_for",
    "generate_synthetic",
    "split_by_class",
    "sample_episode",
    "load_dataset",
    "save_dataset",
    "format_float",
]


class CapacityError(ValueError):
    """Not enough classes or samples to build an episode."""


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; string keys are hashed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [_key(k) for k in keys]))


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,) int
    class_names: tuple[str, ...]

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if feats.ndim != 2 or feats.shape[0] != labels.size:
            raise ValueError(f"{labels.size} labels for features of shape {feats.shape}")
        names = tuple(str(n) for n in self.class_names)
        if labels.size and (labels.min() < 0 or labels.max() >= len(names)):
            raise ValueError("label outside the class list")
        empty = np.setdiff1d(np.arange(len(names)), labels)
        if empty.size:
            raise ValueError(f"class {names[empty[0]]!r} has no samples")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.size

    def indices_of(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)

    def subset(self, classes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Features of ``classes`` and their labels re-indexed by position in ``classes``."""
        classes = np.asarray(classes, dtype=np.int64)
        lookup = np.full(self.num_classes, -1, dtype=np.int64)
        lookup[classes] = np.arange(classes.size)
        mask = lookup[self.labels] >= 0
        return self.features[mask], lookup[self.labels[mask]]


@dataclass(frozen=True)
class SplitSpec:
    base: tuple[int, ...]
    val: tuple[int, ...] = ()
    novel: tuple[int, ...] = ()

    def __post_init__(self):
        groups = [tuple(int(c) for c in g) for g in (self.base, self.val, self.novel)]
        for name, g in zip(("base", "val", "novel"), groups):
            if len(set(g)) != len(g):
                raise ValueError(f"duplicate class in {name} list")
        a, b, c = (set(g) for g in groups)
        if a & b or a & c or b & c:
            raise ValueError(f"class lists overlap: {sorted((a & b) | (a & c) | (b & c))}")
        object.__setattr__(self, "base", groups[0])
        object.__setattr__(self, "val", groups[1])
        object.__setattr__(self, "novel", groups[2])

    def train_classes(self, mode: str = "base") -> tuple[int, ...]:
        if mode == "base":
            return self.base
        if mode == "base+val":
            return self.base + self.val
        raise ValueError(f"unknown train-classes mode {mode!r}; expected 'base' or 'base+val'")


@dataclass(frozen=True)
class EpisodeSpec:
    way: int = 5
    shot: int = 1
    query: int = 16

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.query < 1:
            raise ValueError(f"need way >= 2, shot >= 1, query >= 1; got {self}")


@dataclass(frozen=True)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: tuple[int, ...]  # episode label -> dataset class
    support_idx: np.ndarray = field(repr=False)
    query_idx: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 30
    samples_per_class: int = 60
    input_dim: int = 16
    center_scale: float = 1.0
    noise_sigma: float = 0.5


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Gaussian clusters around centers drawn uniformly on a sphere."""
    if min(spec.num_classes, spec.samples_per_class, spec.input_dim) < 1:
        raise ValueError(f"all counts must be >= 1: {spec}")
    if spec.noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = rng_for(seed, "synthetic")
    centers = rng.standard_normal((spec.num_classes, spec.input_dim))
    centers *= spec.center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    noise = rng.standard_normal((labels.size, spec.input_dim)) * spec.noise_sigma
    names = [f"class{i:03d}" for i in range(spec.num_classes)]
    return Dataset(centers[labels] + noise, labels, names)


def split_by_class(
    num_classes: int,
    fractions: Sequence[float] | None = None,
    *,
    base: Sequence[int] | None = None,
    val: Sequence[int] | None = None,
    novel: Sequence[int] | None = None,
    seed: int = 0,
) -> SplitSpec:
    """Partition class indices into base / val / novel.

    Either give ``fractions`` (shuffled with ``seed``; base and val counts are
    rounded, novel takes the rest) or explicit lists.
    """
    if fractions is not None:
        if any(x is not None for x in (base, val, novel)):
            raise ValueError("give fractions or explicit lists, not both")
        fr = [float(f) for f in fractions]
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
        order = rng_for(seed, "split").permutation(num_classes)
        n_base = int(round(fr[0] * num_classes))
        n_val = min(int(round(fr[1] * num_classes)), num_classes - n_base)
        return SplitSpec(
            tuple(sorted(order[:n_base].tolist())),
            tuple(sorted(order[n_base:n_base + n_val].tolist())),
            tuple(sorted(order[n_base + n_val:].tolist())),
        )
    spec = SplitSpec(tuple(base or ()), tuple(val or ()), tuple(novel or ()))
    for c in spec.base + spec.val + spec.novel:
        if not 0 <= c < num_classes:
            raise ValueError(f"class {c} out of range for {num_classes} classes")
    return spec


def sample_episode(ds: Dataset, classes: Sequence[int], es: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw one N-way K-shot task with Q queries per class."""
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size < es.way:
        raise CapacityError(f"need {es.way} classes, only {classes.size} available")
    need = es.shot + es.query
    chosen = rng.choice(classes, size=es.way, replace=False)
    support, query = [], []
    for cls in chosen:
        idx = ds.indices_of(int(cls))
        if idx.size < need:
            raise CapacityError(
                f"class {int(cls)} has {idx.size} samples, episode needs {need} (short by {need - idx.size})"
            )
        pick = rng.choice(idx, size=need, replace=False)
        support.append(pick[: es.shot])
        query.append(pick[es.shot:])
    s_idx = np.concatenate(support)
    q_idx = np.concatenate(query)
    return Episode(
        support_x=ds.features[s_idx],
        support_y=np.repeat(np.arange(es.way), es.shot),
        query_x=ds.features[q_idx],
        query_y=np.repeat(np.arange(es.way), es.query),
        class_map=tuple(int(c) for c in chosen),
        support_idx=s_idx,
        query_idx=q_idx,
    )


# -- FSDS text format -----------------------------------------------------------

def format_float(x: float) -> str:
    """Shortest decimal that round-trips to the same float64."""
    return repr(float(x))


def save_dataset(ds: Dataset, path) -> None:
    lines = [f"FSDS 1 {len(ds)} {ds.input_dim} {ds.num_classes}", " ".join(ds.class_names)]
    for label, row in zip(ds.labels, ds.features):
        lines.append(" ".join([str(int(label))] + [format_float(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != "FSDS" or head[1] != "1":
        raise ParseError(f"expected 'FSDS 1 <n> <D> <num_classes>', got {lines[0]!r}", 1)
    try:
        n, dim, n_classes = (int(v) for v in head[2:])
    except ValueError:
        raise ParseError("non-integer header field", 1) from None
    if len(lines) < 2:
        raise ParseError("missing class-name line", 2)
    names = lines[1].split()
    if len(names) != n_classes:
        raise ParseError(f"header declares {n_classes} classes, found {len(names)} names", 2)
    body = lines[2:]
    if len(body) != n:
        raise ParseError(f"header declares {n} rows, found {len(body)}", 3 + min(len(body), n))
    feats = np.empty((n, dim))
    labels = np.empty(n, dtype=np.int64)
    for i, line in enumerate(body):
        lineno = i + 3
        parts = line.split()
        if len(parts) != dim + 1:
            raise ParseError(f"expected label and {dim} values, found {max(len(parts) - 1, 0)} values", lineno)
        try:
            label = int(parts[0])
        except ValueError:
            raise ParseError(f"bad label {parts[0]!r}", lineno) from None
        if not 0 <= label < n_classes:
            raise ParseError(f"unknown label {label}", lineno)
        try:
            feats[i] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        labels[i] = label
    try:
        return Dataset(feats, labels, names)
    except ValueError as exc:
        raise ParseError(str(exc)) from None
