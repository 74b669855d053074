"""Multi-domain episodic data: synthetic domains, CSV ingestion, episode sampling.

Each domain keeps disjoint train/test label splits; episodes are n-way
k-shot tasks drawn from one split of one domain. Synthetic domains place
Gaussian class clusters behind a per-domain affine transform, giving cheap,
controllable domain shift.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_from


@dataclass
class DomainSpec:
    id: str
    n_classes: int = 40
    d_in: int = 32
    noise_sigma: float = 0.3
    transform_scale: float = 1.0
    transform_cond_max: float = 8.0
    split_ratio: float = 0.5
    n_way_max: int = 8


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    n_query: int
    domain_id: str


@dataclass
class Domain:
    """Immutable after construction; episode sampling only reads it."""

    id: str
    d_in: int
    noise_sigma: float
    prototypes: np.ndarray | None
    transform_a: np.ndarray | None
    transform_c: np.ndarray | None
    split: dict[int, str]
    samples: dict[int, np.ndarray] | None = None
    label_names: list[str] | None = None
    _split_labels: dict[str, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        labels = np.asarray(sorted(self.split), dtype=np.int64)
        self._split_labels = {
            part: np.asarray([l for l in labels if self.split[l] == part], dtype=np.int64)
            for part in ("train", "test")
        }

    def labels_for_split(self, split: str) -> np.ndarray:
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        return self._split_labels[split]

    def draw(self, label: int, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.samples is not None:
            pool = self.samples[label]
            if count > len(pool):
                raise ValueError(
                    f"domain {self.id}: class {label} has {len(pool)} samples, need {count}"
                )
            idx = rng.choice(len(pool), size=count, replace=False)
            return pool[idx]
        x = self.prototypes[label] + rng.standard_normal((count, self.d_in)) * self.noise_sigma
        return x @ self.transform_a.T + self.transform_c


def _random_affine(
    rng: np.random.Generator, d: int, scale: float, cond_max: float
) -> tuple[np.ndarray, np.ndarray]:
    # Singular values confined to [scale/sqrt(c), scale*sqrt(c)] bound the
    # condition number by c.
    m = rng.standard_normal((d, d))
    u, _, vt = np.linalg.svd(m)
    lo = scale / math.sqrt(cond_max)
    hi = scale * math.sqrt(cond_max)
    s = rng.uniform(lo, hi, size=d)
    a = (u * s) @ vt
    c = rng.standard_normal(d) * scale
    return a, c


def make_domain(spec: DomainSpec, seed: int) -> Domain:
    """Build a synthetic domain; the domain id salts the seed."""
    if spec.n_classes < 2 * spec.n_way_max:
        raise ValueError(
            f"domain {spec.id}: {spec.n_classes} classes < 2 * n_way_max ({2 * spec.n_way_max})"
        )
    rng = rng_from(seed, "domain", spec.id)
    prototypes = rng.standard_normal((spec.n_classes, spec.d_in))
    a, c = _random_affine(rng, spec.d_in, spec.transform_scale, spec.transform_cond_max)
    order = rng.permutation(spec.n_classes)
    n_train = round(spec.split_ratio * spec.n_classes)
    split = {int(l): ("train" if i < n_train else "test") for i, l in enumerate(order)}
    return Domain(
        id=spec.id,
        d_in=spec.d_in,
        noise_sigma=spec.noise_sigma,
        prototypes=prototypes,
        transform_a=a,
        transform_c=c,
        split=split,
    )


def sample_episode(
    domain: Domain,
    way_range: tuple[int, int],
    shot_range: tuple[int, int],
    n_query: int,
    split: str,
    rng: np.random.Generator,
) -> Episode:
    """Variable-way variable-shot episode from one split of one domain.

    The way range is clipped to the split's class count; an empty range is
    an error.
    """
    labels = domain.labels_for_split(split)
    way_lo, way_hi = way_range
    way_hi = min(way_hi, len(labels))
    if way_lo < 2 or way_lo > way_hi:
        raise ValueError(
            f"domain {domain.id}: way range {way_range} infeasible for {len(labels)} classes"
        )
    shot_lo, shot_hi = shot_range
    if shot_lo < 1 or shot_lo > shot_hi:
        raise ValueError(f"invalid shot range {shot_range}")
    if n_query < 1:
        raise ValueError("n_query must be >= 1")
    n_way = int(rng.integers(way_lo, way_hi + 1))
    k_shot = int(rng.integers(shot_lo, shot_hi + 1))

    if domain.samples is not None:
        need = k_shot + n_query
        labels = np.asarray([l for l in labels if len(domain.samples[l]) >= need], dtype=np.int64)
        if len(labels) < n_way:
            raise ValueError(
                f"domain {domain.id}: only {len(labels)} classes have {need}+ samples, "
                f"need {n_way}"
            )
    classes = rng.choice(labels, size=n_way, replace=False)

    support_x, support_y, query_x, query_y = [], [], [], []
    for label in classes:
        batch = domain.draw(int(label), k_shot + n_query, rng)
        support_x.append(batch[:k_shot])
        query_x.append(batch[k_shot:])
        support_y.append(np.full(k_shot, label, dtype=np.int64))
        query_y.append(np.full(n_query, label, dtype=np.int64))
    return Episode(
        support_x=np.concatenate(support_x),
        support_y=np.concatenate(support_y),
        query_x=np.concatenate(query_x),
        query_y=np.concatenate(query_y),
        n_way=n_way,
        k_shot=k_shot,
        n_query=n_query,
        domain_id=domain.id,
    )


def load_dataset(path, split_ratio: float = 0.5, seed: int = 0) -> Domain:
    """Load a CSV domain: header ``f0,...,f{d-1},label``, one sample per row.

    The label split is induced by a seeded shuffle at ``split_ratio``. Row
    numbers in errors are 1-based over data rows (header excluded).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if d < 1 or header != expected:
            raise ValueError(f"{path}: header must be f0,...,f{d - 1},label, got {header}")
        rows: list[np.ndarray] = []
        labels: list[str] = []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != d + 1:
                raise ValueError(f"{path}: row {row_no} has {len(row)} columns, expected {d + 1}")
            try:
                feats = [float(v) for v in row[:d]]
            except ValueError:
                raise ValueError(f"{path}: row {row_no} has a non-numeric feature") from None
            if not all(math.isfinite(v) for v in feats):
                raise ValueError(f"{path}: row {row_no} contains a NaN/Inf feature")
            rows.append(np.asarray(feats, dtype=np.float64))
            labels.append(row[d])
    if not rows:
        raise ValueError(f"{path}: no data rows")

    label_names = sorted(set(labels))
    if len(label_names) < 2:
        raise ValueError(f"{path}: at least two distinct labels required")
    name_to_int = {name: i for i, name in enumerate(label_names)}
    samples: dict[int, list[np.ndarray]] = {i: [] for i in range(len(label_names))}
    for feats, name in zip(rows, labels):
        samples[name_to_int[name]].append(feats)

    rng = rng_from(seed, "dataset-split", str(path))
    order = rng.permutation(len(label_names))
    n_train = round(split_ratio * len(label_names))
    split = {int(l): ("train" if i < n_train else "test") for i, l in enumerate(order)}
    return Domain(
        id=str(path),
        d_in=d,
        noise_sigma=0.0,
        prototypes=None,
        transform_a=None,
        transform_c=None,
        split=split,
        samples={l: np.stack(v) for l, v in samples.items()},
        label_names=label_names,
    )
