"""Synthetic two-domain datasets, few-shot target splits and vector augmentation.

Unlabeled target samples live in :class:`UnlabeledSet`, which has no label
field. Their ground truth is kept apart in ``SsdaDataset.unlabeled_truth``
and is only read by analysis code.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FORMAT_TAG = "cdac-dataset v1"


@dataclass(frozen=True)
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"bad labeled set shapes {self.x.shape} / {self.y.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class UnlabeledSet:
    x: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class SsdaDataset:
    source: LabeledSet
    target_labeled: LabeledSet
    target_unlabeled: UnlabeledSet
    target_test: LabeledSet
    num_classes: int
    unlabeled_truth: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def input_dim(self) -> int:
        return self.source.x.shape[1]

    @property
    def target_pool_size(self) -> int:
        return len(self.target_labeled) + len(self.target_unlabeled) + len(self.target_test)

    def without_target_labels(self) -> "SsdaDataset":
        """UDA view: labeled target shots are dropped from supervision."""
        empty = LabeledSet(np.zeros((0, self.input_dim)), np.zeros(0, dtype=np.int64))
        return replace(self, target_labeled=empty)


@dataclass(frozen=True)
class AugmentConfig:
    gaussian_sigma: float = 0.05
    scale_range: tuple[float, float] = (0.9, 1.1)
    dropout_prob: float = 0.05

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.gaussian_sigma < 0 or lo > hi or not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError(f"invalid augmentation config {self}")


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise, then a random per-sample scale, then coordinate dropout.

    Works on a single vector or a batch of row vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    batch = np.atleast_2d(x)
    out = batch + rng.normal(0.0, 1.0, size=batch.shape) * cfg.gaussian_sigma
    lo, hi = cfg.scale_range
    out = out * rng.uniform(lo, hi, size=(batch.shape[0], 1))
    keep = rng.random(batch.shape) >= cfg.dropout_prob
    out = np.where(keep, out, 0.0)
    return out.reshape(x.shape)


# ----------------------------------------------------------------- generators


def _moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = rng.permutation(np.arange(n) % 2)
    theta = rng.uniform(0.0, np.pi, size=n)
    outer = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    inner = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    x = np.where(y[:, None] == 0, outer, inner)
    return x + rng.normal(0.0, noise, size=x.shape), y.astype(np.int64)


def rotation_matrix(degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def _assemble(source, pool, test, num_classes, shots, seed, meta) -> SsdaDataset:
    xs, ys = source
    xp, yp = pool
    xt, yt = test
    base = SsdaDataset(
        source=LabeledSet(xs, ys),
        target_labeled=LabeledSet(np.zeros((0, xs.shape[1])), np.zeros(0, dtype=np.int64)),
        target_unlabeled=UnlabeledSet(xp),
        target_test=LabeledSet(xt, yt),
        num_classes=num_classes,
        unlabeled_truth=yp,
        meta=meta,
    )
    return split_shots(base, shots, seed) if shots else base


def make_two_moons_shift(n_per_domain: int = 500, rotation_degrees: float = 30.0, noise: float = 0.1,
                         seed: int = 0, shots: int = 3, n_test: int | None = None) -> SsdaDataset:
    """Two moons as source; the same generator rotated about the origin as target."""
    if not 0.0 <= rotation_degrees < 180.0:
        raise ValueError("rotation_degrees must lie in [0, 180)")
    n_test = n_per_domain if n_test is None else n_test
    if n_per_domain < 2 * (shots + 1) or n_test < 2:
        raise ValueError(f"too few samples per class for {shots} shots")
    rng = np.random.default_rng(seed)
    source = _moons(n_per_domain, noise, rng)
    R = rotation_matrix(rotation_degrees)
    xp, yp = _moons(n_per_domain, noise, rng)
    xt, yt = _moons(n_test, noise, rng)
    meta = {"generator": "two_moons", "n_per_domain": n_per_domain, "rotation_degrees": rotation_degrees,
            "noise": noise, "seed": seed, "shots": shots, "n_test": n_test}
    return _assemble(source, (xp @ R.T, yp), (xt @ R.T, yt), 2, shots, seed, meta)


def make_gaussian_blobs_shift(num_classes: int = 4, dim: int = 8, mean_shift: float = 2.0,
                              covariance_scale: float = 1.0, n_per_domain: int = 500, seed: int = 0,
                              shots: int = 3, n_test: int | None = None,
                              class_spread: float = 3.0) -> SsdaDataset:
    """Isotropic class Gaussians; target means move by ``mean_shift`` along one random unit direction."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    if not np.isfinite(covariance_scale) or covariance_scale <= 0:
        raise ValueError(f"degenerate covariance scale {covariance_scale}")
    n_test = n_per_domain if n_test is None else n_test
    if n_per_domain < num_classes * (shots + 1) or n_test < num_classes:
        raise ValueError(f"too few samples per class for {shots} shots")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_spread, size=(num_classes, dim))
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)

    def draw(n, shift, sd):
        y = rng.permutation(np.arange(n) % num_classes).astype(np.int64)
        return means[y] + shift * direction + sd * rng.normal(size=(n, dim)), y

    source = draw(n_per_domain, 0.0, 1.0)
    sd = float(np.sqrt(covariance_scale))
    pool = draw(n_per_domain, mean_shift, sd)
    test = draw(n_test, mean_shift, sd)
    meta = {"generator": "gaussian_blobs", "num_classes": num_classes, "dim": dim, "mean_shift": mean_shift,
            "covariance_scale": covariance_scale, "n_per_domain": n_per_domain, "seed": seed,
            "shots": shots, "n_test": n_test, "shift_direction": direction.tolist()}
    return _assemble(source, pool, test, num_classes, shots, seed, meta)


def split_shots(dataset: SsdaDataset, shots: int, seed: int) -> SsdaDataset:
    """Move ``shots`` samples per class from the unlabeled pool into the labeled target set.

    Selection: the first ``shots`` pool indices of each class under a seeded shuffle.
    """
    if shots < 0:
        raise ValueError("shots must be >= 0")
    truth = dataset.unlabeled_truth
    rng = np.random.default_rng([seed, 0x5407])
    order = rng.permutation(len(truth))
    chosen = []
    for c in range(dataset.num_classes):
        members = order[truth[order] == c]
        if len(members) <= shots:
            raise ValueError(f"class {c} has {len(members)} unlabeled samples; need more than {shots}")
        chosen.extend(members[:shots].tolist())
    chosen = np.array(sorted(chosen), dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(truth)), chosen)
    xu = dataset.target_unlabeled.x
    labeled = LabeledSet(np.concatenate([dataset.target_labeled.x, xu[chosen]]),
                         np.concatenate([dataset.target_labeled.y, truth[chosen]]))
    meta = dict(dataset.meta, shots=shots)
    return replace(dataset, target_labeled=labeled, target_unlabeled=UnlabeledSet(xu[rest]),
                   unlabeled_truth=truth[rest], meta=meta)


# ------------------------------------------------------------------ text I/O


def dump_dataset(dataset: SsdaDataset) -> str:
    """Header lines (``# key=value``) followed by CSV rows ``split,label,x0,...``.

    Floats are written with ``repr`` so a reload is bit-exact. Unlabeled rows
    carry their hidden ground truth in a separate ``truth`` column, never in ``label``.
    """
    buf = io.StringIO()
    buf.write(f"# format={FORMAT_TAG}\n")
    buf.write(f"# num_classes={dataset.num_classes}\n")
    buf.write(f"# input_dim={dataset.input_dim}\n")
    counts = {"source": len(dataset.source), "labeled": len(dataset.target_labeled),
              "unlabeled": len(dataset.target_unlabeled), "test": len(dataset.target_test)}
    buf.write(f"# counts={json.dumps(counts, sort_keys=True)}\n")
    buf.write(f"# meta={json.dumps(dataset.meta, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["split", "label", "truth"] + [f"x{i}" for i in range(dataset.input_dim)])

    def rows(tag, x, label, truth):
        for i in range(x.shape[0]):
            writer.writerow([tag, "" if label is None else int(label[i]), "" if truth is None else int(truth[i])]
                            + [repr(float(v)) for v in x[i]])

    rows("source", dataset.source.x, dataset.source.y, None)
    rows("labeled", dataset.target_labeled.x, dataset.target_labeled.y, None)
    rows("unlabeled", dataset.target_unlabeled.x, None, dataset.unlabeled_truth)
    rows("test", dataset.target_test.x, dataset.target_test.y, None)
    return buf.getvalue()


def load_dataset(text: str) -> SsdaDataset:
    header = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            header[key] = value
        elif line:
            body.append(line)
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"not a dataset file (format={header.get('format')!r})")
    dim = int(header["input_dim"])
    reader = csv.reader(body)
    next(reader)
    parts: dict[str, tuple[list, list, list]] = {s: ([], [], []) for s in ("source", "labeled", "unlabeled", "test")}
    for row in reader:
        tag, label, truth, *xs = row
        if tag not in parts or len(xs) != dim:
            raise ValueError(f"malformed dataset row: {row[:3]}")
        xs_, ys_, ts_ = parts[tag]
        xs_.append([float(v) for v in xs])
        ys_.append(int(label) if label else -1)
        ts_.append(int(truth) if truth else -1)

    def arr(tag):
        xs_, ys_, ts_ = parts[tag]
        x = np.array(xs_, dtype=np.float64).reshape(len(xs_), dim)
        return x, np.array(ys_, dtype=np.int64), np.array(ts_, dtype=np.int64)

    xs, ys, _ = arr("source")
    xl, yl, _ = arr("labeled")
    xu, _, tu = arr("unlabeled")
    xt, yt, _ = arr("test")
    counts = json.loads(header["counts"])
    got = {"source": len(xs), "labeled": len(xl), "unlabeled": len(xu), "test": len(xt)}
    if counts != got:
        raise ValueError(f"row counts {got} disagree with header {counts}")
    return SsdaDataset(LabeledSet(xs, ys), LabeledSet(xl, yl), UnlabeledSet(xu), LabeledSet(xt, yt),
                       int(header["num_classes"]), tu, json.loads(header["meta"]))


def save_dataset(dataset: SsdaDataset, path) -> None:
    Path(path).write_text(dump_dataset(dataset))


def read_dataset(path) -> SsdaDataset:
    return load_dataset(Path(path).read_text())
