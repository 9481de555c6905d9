"""Procedural desk-scale datasets and the CSV loader.

Everything is generated deterministically from the DatasetSpec seed;
the train/holdout split is disjoint by construction.
"""

import csv as _csv
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import SeededRng


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]


@dataclass
class SplitData:
    train: Dataset
    holdout: Dataset

    def split(self, name):
        if name not in ("train", "holdout"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.holdout


@dataclass
class DatasetSpec:
    kind: str                 # blobs | moons | bars8x8 | csv
    n: int = 200
    classes: int = 2
    dim: int = 2
    spread: float = 0.5
    noise: float = 0.1
    path: str = ""
    label_column: str = "label"
    seed: int = 0
    split_fraction: float = 0.75

    def to_dict(self):
        return asdict(self)


def _blobs(spec, rng):
    centers = rng.stream("centers").normal((spec.classes, spec.dim), 0.0, 3.0)
    y = np.arange(spec.n) % spec.classes
    noise = rng.stream("points").normal((spec.n, spec.dim), 0.0, 1.0)
    x = centers[y] + spec.spread * noise
    return x, y.astype(np.int64)


def _moons(spec, rng):
    n0 = spec.n // 2
    n1 = spec.n - n0
    t0 = rng.stream("t0").uniform(0.0, np.pi, size=n0)
    t1 = rng.stream("t1").uniform(0.0, np.pi, size=n1)
    x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([x0, x1])
    x += spec.noise * rng.stream("noise").normal((spec.n, 2))
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    return x, y


def _bars8x8(spec, rng):
    """8x8 one-channel images of a single bar; class is its orientation."""
    y = np.asarray(rng.stream("labels").integers(0, 2, size=spec.n), dtype=np.int64)
    pos = np.asarray(rng.stream("pos").integers(0, 8, size=spec.n))
    x = spec.noise * rng.stream("noise").normal((spec.n, 1, 8, 8))
    for i in range(spec.n):
        if y[i] == 0:
            x[i, 0, pos[i], :] += 1.0
        else:
            x[i, 0, :, pos[i]] += 1.0
    return x, y


def _from_csv(spec):
    with open(spec.path, newline="") as f:
        reader = _csv.DictReader(f)
        if reader.fieldnames is None or spec.label_column not in reader.fieldnames:
            raise ValueError(f"csv {spec.path}: no column {spec.label_column!r}")
        feat_cols = [c for c in reader.fieldnames if c != spec.label_column]
        xs, ys = [], []
        for row in reader:
            try:
                xs.append([float(row[c]) for c in feat_cols])
                ys.append(int(row[spec.label_column]))
            except (TypeError, ValueError) as e:
                raise ValueError(f"csv {spec.path}: bad row {row}") from e
    y = np.asarray(ys, dtype=np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    return np.asarray(xs, dtype=np.float64), y


def gen_dataset(spec):
    """Deterministic dataset + disjoint train/holdout split."""
    rng = SeededRng(spec.seed)
    if spec.kind == "blobs":
        x, y = _blobs(spec, rng)
    elif spec.kind == "moons":
        x, y = _moons(spec, rng)
    elif spec.kind == "bars8x8":
        x, y = _bars8x8(spec, rng)
    elif spec.kind == "csv":
        x, y = _from_csv(spec)
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    n = x.shape[0]
    perm = rng.stream("split").permutation(n)
    n_train = int(round(n * spec.split_fraction))
    tr, ho = perm[:n_train], perm[n_train:]
    return SplitData(Dataset(x[tr], y[tr]), Dataset(x[ho], y[ho]))


def draw_batches(dataset, count, batch_size, rng):
    """`count` disjoint random batches from one permutation draw."""
    n = len(dataset)
    if count * batch_size > n:
        raise ValueError(f"cannot draw {count}x{batch_size} from {n} samples")
    perm = rng.permutation(n)
    out = []
    for i in range(count):
        idx = perm[i * batch_size:(i + 1) * batch_size]
        out.append((dataset.x[idx], dataset.y[idx]))
    return out
