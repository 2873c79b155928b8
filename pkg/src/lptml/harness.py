"""Experiment harness: datasets, constraint sampling, PCA, k-NN evaluation.

Everything downstream of the solver lives here: labeled datasets and
their CSV form, percentile threshold selection, uniform constraint
sampling by label agreement, PCA reduction, majority-vote k-NN with
fully specified tie-breaks, stratified cross-validation, and the
two-Gaussian synthetic generator with its poisoned variant.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Callable, Sequence

import numpy as np

from .approx import AllSubproblemsFailed, LptmlConfig, lptml, lptml_regularized
from .metric import (
    ConstraintSet,
    MetricMatrix,
    dissimilar,
    identity_metric,
    similar,
)

# y-axis stretch applied by the synthetic generator
STRETCH = 40.0
BUILTIN_DATASETS = ("iris", "wine")


class NotEnoughPairs(ValueError):
    """No eligible point pairs to sample constraints from."""


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class LabeledDataset:
    """Points in R^d with integer class codes.

    labels[i] indexes into label_names; names are the sorted distinct
    raw labels, so the "first class" is well defined whatever order the
    rows arrived in.
    """

    points: np.ndarray
    labels: np.ndarray
    label_names: tuple[str, ...]
    name: str = ""

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ValueError("points must be an n x d matrix with n >= 2")
        if not np.isfinite(pts).all():
            raise ValueError("points contain NaN or Inf")
        codes = np.asarray(self.labels, dtype=int)
        if codes.shape != (pts.shape[0],):
            raise ValueError("labels must have one entry per point")
        if codes.size and (codes.min() < 0 or codes.max() >= len(self.label_names)):
            raise ValueError("label codes fall outside label_names")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", codes)
        object.__setattr__(self, "label_names", tuple(str(s) for s in self.label_names))

    @classmethod
    def from_arrays(cls, points: np.ndarray, labels: Sequence[Any],
                    name: str = "") -> "LabeledDataset":
        """Build from raw labels of any printable type."""
        names, codes = np.unique(np.asarray(labels).astype(str), return_inverse=True)
        return cls(np.asarray(points, dtype=float), codes, tuple(names), name)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def class_indices(self, code: int) -> np.ndarray:
        return np.flatnonzero(self.labels == code)

    def subset(self, idx: np.ndarray, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.points[idx], self.labels[idx],
                              self.label_names, self.name if name is None else name)


def save_points_csv(ds: LabeledDataset, path: Any) -> None:
    """Write `f1,...,fd,label` rows with a header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{k + 1}" for k in range(ds.d)] + ["label"])
        for x, c in zip(ds.points, ds.labels):
            writer.writerow([repr(float(v)) for v in x] + [ds.label_names[c]])


def load_points_csv(path: Any, name: str | None = None) -> LabeledDataset:
    """Read a points CSV; the last column is the class label."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3:
        raise ValueError(f"{path}: need a header and at least two data rows")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise ValueError(f"{path}: need at least one feature column plus the label")
    try:
        pts = np.array([[float(v) for v in row[:-1]] for row in body])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric feature value ({exc})") from None
    labels = [row[-1] for row in body]
    ds_name = name if name is not None else str(path)
    return LabeledDataset.from_arrays(pts, labels, ds_name)


def _dataset_dir():
    return resources.files("lptml").joinpath("datasets")


def load_builtin(name: str) -> LabeledDataset:
    """Vendored fixture dataset, checksum-verified on every load."""
    if name not in BUILTIN_DATASETS:
        raise ValueError(f"unknown dataset {name!r}; have {BUILTIN_DATASETS}")
    root = _dataset_dir()
    raw = root.joinpath(f"{name}.csv").read_bytes()
    sums = json.loads(root.joinpath("checksums.json").read_text())
    digest = hashlib.sha256(raw).hexdigest()
    if digest != sums[name]:
        raise ValueError(f"checksum mismatch for {name}: {digest}")
    text = raw.decode()
    rows = [r for r in csv.reader(text.splitlines()) if r]
    pts = np.array([[float(v) for v in row[:-1]] for row in rows[1:]])
    labels = [row[-1] for row in rows[1:]]
    return LabeledDataset.from_arrays(pts, labels, name)


# ---------------------------------------------------------------------------
# thresholds and constraints


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Condensed vector of the n(n-1)/2 Euclidean pairwise distances."""
    diff = points[:, None, :] - points[None, :, :]
    dm = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu, ju = np.triu_indices(points.shape[0], k=1)
    return dm[iu, ju]


def _nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    # nearest-rank percentile: smallest value with at least pct% mass below
    m = sorted_vals.size
    idx = max(math.ceil(pct / 100.0 * m), 1) - 1
    return float(sorted_vals[idx])


def compute_thresholds(ds: LabeledDataset) -> tuple[float, float]:
    """(u, l) = nearest-rank 90th and 10th percentiles of all pairwise
    distances, so most similarity constraints start out satisfiable."""
    dists = np.sort(_pairwise_distances(ds.points))
    return _nearest_rank(dists, 90.0), _nearest_rank(dists, 10.0)


def _label_pools(ds: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    iu, ju = np.triu_indices(ds.n, k=1)
    same = ds.labels[iu] == ds.labels[ju]
    nonzero = np.any(ds.points[iu] != ds.points[ju], axis=1)
    sim_pool = np.column_stack([iu[same & nonzero], ju[same & nonzero]])
    dis_pool = np.column_stack([iu[~same & nonzero], ju[~same & nonzero]])
    return sim_pool, dis_pool


def generate_constraints(ds: LabeledDataset, n_sim: int | None = None,
                         n_dis: int | None = None, seed: int = 0,
                         u: float | None = None,
                         l: float | None = None) -> ConstraintSet:
    """Uniform label-driven pair sample with percentile thresholds.

    Similar pairs come from same-class pairs, dissimilar from
    cross-class pairs; both uniform without replacement, falling back
    to with replacement when a pool is smaller than the request.
    Coincident points are never paired (their constraints say nothing).
    Defaults: min(500, pool size) on each side; thresholds from
    compute_thresholds(ds) unless given.
    """
    sim_pool, dis_pool = _label_pools(ds)
    if sim_pool.shape[0] == 0 and dis_pool.shape[0] == 0:
        raise NotEnoughPairs(f"{ds.name or 'dataset'}: no usable point pairs")
    if u is None or l is None:
        u, l = compute_thresholds(ds)
    rng = np.random.default_rng(seed)

    def draw(pool: np.ndarray, count: int | None) -> np.ndarray:
        m = pool.shape[0]
        if count is None:
            count = min(500, m)
        if count == 0 or m == 0:
            return pool[:0]
        pick = rng.choice(m, size=count, replace=count > m)
        return pool[pick]

    sims = tuple(similar(ds.points[i], ds.points[j]) for i, j in draw(sim_pool, n_sim))
    diss = tuple(dissimilar(ds.points[i], ds.points[j]) for i, j in draw(dis_pool, n_dis))
    return ConstraintSet(sims, diss, u=u, l=l)


# ---------------------------------------------------------------------------
# PCA


def pca_reduce(ds: LabeledDataset, d_target: int) -> LabeledDataset:
    """Mean-centered projection onto the top principal directions.

    Components are ordered by descending eigenvalue; each direction is
    signed so its largest-magnitude coordinate is positive, which pins
    down the otherwise arbitrary eigenvector signs.
    """
    if not (1 <= d_target <= ds.d):
        raise ValueError(f"d_target must be in [1, {ds.d}], got {d_target}")
    centered = ds.points - ds.points.mean(axis=0)
    cov = centered.T @ centered / ds.n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d_target]
    W = evecs[:, order]
    flip = np.sign(W[np.abs(W).argmax(axis=0), np.arange(d_target)])
    flip[flip == 0] = 1.0
    W = W * flip
    return LabeledDataset(centered @ W, ds.labels, ds.label_names,
                          f"{ds.name}-pca{d_target}" if ds.name else f"pca{d_target}")


# ---------------------------------------------------------------------------
# k-NN


def _as_transform(G: Any, d: int) -> np.ndarray:
    if G is None:
        return np.eye(d)
    if isinstance(G, MetricMatrix):
        return G.G
    return np.asarray(G, dtype=float)


def knn_accuracy(train: LabeledDataset, test: LabeledDataset,
                 G: Any = None, k: int = 4) -> float:
    """Majority-vote k-NN accuracy under the linear map G.

    Ties are fully specified: equal distances favour the smaller train
    index (stable sort), vote ties favour the candidate label with the
    smaller mean neighbor distance, then the smaller label id.  A test
    point identical to a train point simply sees it as a zero-distance
    neighbor; nothing is excluded.
    """
    if train.d != test.d:
        raise ValueError(f"dimension mismatch: train d={train.d}, test d={test.d}")
    if train.label_names != test.label_names:
        raise ValueError("train and test must share one label namespace")
    if k < 1:
        raise ValueError("k must be positive")
    T = _as_transform(G, train.d)
    tr = train.points @ T.T
    te = test.points @ T.T
    k = min(k, train.n)
    correct = 0
    for x, want in zip(te, test.labels):
        dist = np.linalg.norm(tr - x, axis=1)
        near = np.argsort(dist, kind="stable")[:k]
        votes = np.bincount(train.labels[near], minlength=train.n_classes)
        top = votes.max()
        cands = np.flatnonzero(votes == top)
        if cands.size > 1:
            means = np.array([dist[near[train.labels[near] == c]].mean()
                              for c in cands])
            cands = cands[np.flatnonzero(means == means.min())]
        if cands[0] == want:
            correct += 1
    return correct / test.n


# ---------------------------------------------------------------------------
# learners


class IdentityLearner:
    """Baseline: keep Euclidean distances bit-for-bit."""

    name = "identity"
    config: dict[str, Any] = {}

    def __call__(self, cs: ConstraintSet, seed: int) -> MetricMatrix:
        return identity_metric(cs.dim)


@dataclass
class LptmlLearner:
    """Learn the metric on each fold's constraints via the sampling grid.

    When every grid cell fails the learner falls back to the identity,
    so cross-validation always yields a defined accuracy.
    """

    cfg: LptmlConfig = field(default_factory=LptmlConfig)
    eta: float | None = None
    reg: np.ndarray | None = None
    name: str = "lptml"

    def __call__(self, cs: ConstraintSet, seed: int) -> MetricMatrix:
        run_cfg = replace(self.cfg, master_seed=int(seed))
        handles = list(range(cs.size))
        try:
            if self.eta is not None:
                reg = np.eye(cs.dim) if self.reg is None else self.reg
                return lptml_regularized(handles, cs, run_cfg, self.eta, reg).best
            return lptml(handles, cs, run_cfg).best
        except AllSubproblemsFailed:
            return identity_metric(cs.dim)

    @property
    def config(self) -> dict[str, Any]:
        out = {"t": self.cfg.t, "epsilon": self.cfg.epsilon,
               "workers": self.cfg.workers}
        if self.eta is not None:
            out["eta"] = self.eta
        return out


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class EvalReport:
    accuracy_mean: float
    accuracy_std: float
    fold_accuracies: tuple[float, ...]
    config: dict[str, Any]

    def to_json(self) -> str:
        return json.dumps({
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
            "fold_accuracies": list(self.fold_accuracies),
            "config": self.config,
        }, indent=2, sort_keys=True)


def _stream_seed(master: int, *key: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=tuple(key))
    return int(ss.generate_state(1, np.uint64)[0])


def cross_validate(ds: LabeledDataset, learner: Callable[..., MetricMatrix],
                   folds: int = 2, repeats: int = 1, seed: int = 0,
                   k: int = 4, n_sim: int | None = None,
                   n_dis: int | None = None) -> EvalReport:
    """Stratified k-fold accuracy, re-splitting and re-sampling per repeat.

    Thresholds and constraints are computed from the training half
    only, so no information about the held-out points leaks into the
    learned metric.  All randomness is keyed off (seed, repeat, fold).
    """
    if folds < 2:
        raise ValueError("folds must be at least 2")
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    if counts.min() < folds:
        lacking = ds.label_names[int(counts.argmin())]
        raise ValueError(f"class {lacking!r} has {counts.min()} members; "
                         f"stratified {folds}-fold needs at least {folds}")
    accs: list[float] = []
    for r in range(repeats):
        split_rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(r, 0)))
        chunks: list[list[np.ndarray]] = [[] for _ in range(folds)]
        for c in range(ds.n_classes):
            idx = split_rng.permutation(ds.class_indices(c))
            for f, part in enumerate(np.array_split(idx, folds)):
                chunks[f].append(part)
        fold_idx = [np.sort(np.concatenate(parts)) for parts in chunks]
        for f in range(folds):
            test_idx = fold_idx[f]
            train_idx = np.sort(np.concatenate(
                [fold_idx[g] for g in range(folds) if g != f]))
            train = ds.subset(train_idx)
            test = ds.subset(test_idx)
            cs = generate_constraints(train, n_sim, n_dis,
                                      seed=_stream_seed(seed, r, 1, f))
            G = learner(cs, _stream_seed(seed, r, 2, f))
            accs.append(knn_accuracy(train, test, G, k=k))
    arr = np.asarray(accs)
    config = {"k": k, "folds": folds, "repeats": repeats, "seed": seed,
              "n_sim": n_sim, "n_dis": n_dis,
              "learner": getattr(learner, "name", type(learner).__name__)}
    config.update(getattr(learner, "config", {}))
    return EvalReport(float(arr.mean()), float(arr.std()),
                      tuple(float(a) for a in arr), config)


# ---------------------------------------------------------------------------
# synthetic data


def synth_two_gaussians(seed: int = 0, stretch: bool = True) -> LabeledDataset:
    """Two well separated Gaussians made hard by a y-axis stretch.

    50 points from N((-3,0), I) labeled "left" and 50 from N((3,0), I)
    labeled "right"; with stretch the y coordinate is multiplied by 40,
    which drowns the discriminating x coordinate under Euclidean
    distance.  stretch=False returns the raw draw (same points, same
    seed), which is what the poisoning step expects.
    """
    rng = np.random.default_rng(seed)
    left = rng.normal(size=(50, 2)) + np.array([-3.0, 0.0])
    right = rng.normal(size=(50, 2)) + np.array([3.0, 0.0])
    pts = np.vstack([left, right])
    labels = ["left"] * 50 + ["right"] * 50
    if stretch:
        pts = pts * np.array([1.0, STRETCH])
        return LabeledDataset.from_arrays(pts, labels, "synth2g")
    return LabeledDataset.from_arrays(pts, labels, "synth2g-raw")


def poison_dataset(ds: LabeledDataset, seed: int = 0) -> LabeledDataset:
    """Plant 5 far-out points in the first class, then stretch.

    ds must be the pre-stretch synthetic draw: the planted points are
    appended at their natural scale and the x40 y-stretch is applied to
    all 105 points afterwards, so the poison follows the same
    transformation as the clean data.
    """
    if ds.d != 2:
        raise ValueError("poisoning is defined for the 2-d synthetic dataset")
    rng = np.random.default_rng(seed)
    planted = rng.normal(size=(5, 2)) + np.array([-100.0, 0.0])
    pts = np.vstack([ds.points, planted]) * np.array([1.0, STRETCH])
    labels = np.concatenate([ds.labels, np.zeros(5, dtype=int)])
    return LabeledDataset(pts, labels, ds.label_names,
                          f"{ds.name or 'synth2g'}-poisoned")
