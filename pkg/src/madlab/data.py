"""Synthetic multi-mode dataset generation, augmentation pairs, splits.

Normal samples come from M well-separated Gaussian modes, each supported
on its own random low-dimensional subspace; anomalies are uniform-radius
shells (full-dimensional directions, hence off the normal manifold)
around a random mode plus inter-mode midpoints. Samples are organized
into groups (the analog of repeated studies of one subject) and a group
never straddles splits. Ground truth is carried on every sample for
evaluation only: training code receives a ``TrainingView`` that simply
does not contain it.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError

log = logging.getLogger(__name__)

# Three-way training label; +-1 match the ground-truth convention below.
LABEL_UNLABELED = 0
LABEL_NORMAL = 1
LABEL_ABNORMAL = -1

GT_NORMAL = 1
GT_ABNORMAL = -1

_GT_NAMES = {GT_NORMAL: "normal", GT_ABNORMAL: "abnormal"}
_GT_VALUES = {v: k for k, v in _GT_NAMES.items()}
_LABEL_NAMES = {LABEL_UNLABELED: "unlabeled", LABEL_NORMAL: "normal",
                LABEL_ABNORMAL: "abnormal"}
_LABEL_VALUES = {v: k for k, v in _LABEL_NAMES.items()}

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    features: np.ndarray
    label: int
    ground_truth: int
    mode_id: int
    group_id: int


@dataclass
class Dataset:
    """Columnar sample store for one split."""

    features: np.ndarray       # (n, dim) float64
    labels: np.ndarray         # (n,) int8: 0 / +1 / -1
    ground_truth: np.ndarray   # (n,) int8: +1 normal / -1 abnormal
    mode_ids: np.ndarray       # (n,) int64
    group_ids: np.ndarray      # (n,) int64
    split: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.int8)
        self.mode_ids = np.asarray(self.mode_ids, dtype=np.int64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        self.validate()

    def validate(self):
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise SchemaError("features must be a 2-d array")
        for name in ("labels", "ground_truth", "mode_ids", "group_ids"):
            if getattr(self, name).shape != (n,):
                raise SchemaError(f"{name} length does not match {n} samples")
        if self.split not in SPLITS:
            raise SchemaError(f"unknown split {self.split!r}")
        if not np.all(np.isfinite(self.features)):
            raise SchemaError("non-finite feature values")
        if not set(np.unique(self.labels)) <= set(_LABEL_NAMES):
            raise SchemaError("labels must be in {0, +1, -1}")
        if not set(np.unique(self.ground_truth)) <= set(_GT_NAMES):
            raise SchemaError("ground_truth must be in {+1, -1}")
        labeled = self.labels != LABEL_UNLABELED
        if np.any(self.labels[labeled] != self.ground_truth[labeled]):
            raise SchemaError("a labeled sample disagrees with its ground truth")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.labels[i]),
                      int(self.ground_truth[i]), int(self.mode_ids[i]),
                      int(self.group_ids[i]))

    def training_view(self) -> "TrainingView":
        """What the trainer is allowed to see: features and labels only."""
        return TrainingView(self.features, self.labels)


@dataclass(frozen=True)
class TrainingView:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class AugmentationConfig:
    """The vector-space augmentation family for contrastive pairs.

    Each view is (features * scale) + Gaussian noise with coordinates
    independently zeroed at ``dropout_prob``; the two views of a pair use
    independent draws.
    """

    noise_sigma: float = 1.0
    scale_jitter: float = 0.1
    dropout_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError(
                f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if self.scale_jitter < 0:
            raise ConfigError(f"scale_jitter must be >= 0, got {self.scale_jitter}")


@dataclass(frozen=True)
class GeneratorConfig:
    """Everything the synthetic generator needs.

    Scale conventions: ``mode_sigma`` is the generator's sigma unit. Mode
    centers are kept at pairwise distance >= 8 sigma and shells span
    [shell_inner, shell_outer] sigma around a random mode center. Each
    normal mode is a Gaussian supported on its own random
    ``normal_rank``-dimensional subspace (plus ``ambient_noise`` sigma of
    full-dimensional noise), with expected in-plane radial distance
    ``cloud_radius`` sigma. Shell anomalies draw full-dimensional
    directions, so they sit off the normal manifold even at radii where
    plain distance to the mode center looks ordinary; that is what makes
    them hard for raw geometry but learnable.
    """

    dim: int = 32
    modes: int = 4
    train_size: int = 2000
    val_size: int = 1000
    test_size: int = 1000
    contamination: float = 0.05
    labeled_ratio: float = 0.05
    labeled_normal_fraction: float = 0.5
    eval_abnormal_ratio: float = 0.5
    mode_sigma: float = 1.0
    cloud_radius: float = 5.0
    normal_rank: int = 26
    ambient_noise: float = 0.1
    shell_inner: float = 4.0
    shell_outer: float = 8.0
    center_spacing: float = 9.0
    midpoint_fraction: float = 0.3
    group_size: int = 4
    seed: int = 0

    MIN_CENTER_SEPARATION = 8.0  # in sigma units, per the generator contract

    def __post_init__(self):
        if self.dim < 1 or self.modes < 1 or self.group_size < 1:
            raise ConfigError("dim, modes and group_size must be >= 1")
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("contamination", "labeled_ratio", "eval_abnormal_ratio"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if not 0.0 <= self.labeled_normal_fraction <= 1.0:
            raise ConfigError("labeled_normal_fraction must be in [0, 1]")
        if not 0.0 <= self.midpoint_fraction <= 1.0:
            raise ConfigError("midpoint_fraction must be in [0, 1]")
        if self.mode_sigma <= 0 or self.cloud_radius <= 0:
            raise ConfigError("mode_sigma and cloud_radius must be > 0")
        if self.normal_rank < 1:
            raise ConfigError(f"normal_rank must be >= 1, got {self.normal_rank}")
        if self.ambient_noise < 0:
            raise ConfigError("ambient_noise must be >= 0")
        if not 0 < self.shell_inner < self.shell_outer:
            raise ConfigError("need 0 < shell_inner < shell_outer")
        if self.center_spacing < self.MIN_CENTER_SEPARATION:
            raise ConfigError(
                f"center_spacing must be >= {self.MIN_CENTER_SEPARATION}")

    @property
    def rank(self) -> int:
        """Effective subspace rank; clamped to the ambient dimension."""
        return min(self.normal_rank, self.dim)

    @property
    def plane_sigma(self) -> float:
        """Per-coordinate in-subspace std giving the target cloud radius."""
        return self.mode_sigma * self.cloud_radius / math.sqrt(self.rank)


def _draw_mode_centers(cfg: GeneratorConfig, rng) -> np.ndarray:
    if cfg.modes == 1:
        return rng.normal(0.0, cfg.mode_sigma, size=(1, cfg.dim))
    min_sep = cfg.MIN_CENTER_SEPARATION * cfg.mode_sigma
    scale = cfg.center_spacing * cfg.mode_sigma / math.sqrt(2 * cfg.dim)
    for _ in range(500):
        centers = rng.normal(0.0, scale, size=(cfg.modes, cfg.dim))
        d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
        if d[np.triu_indices(cfg.modes, 1)].min() >= min_sep:
            return centers
        scale *= 1.05
    raise ConfigError("could not place mode centers at the required separation")


def _draw_mode_bases(cfg: GeneratorConfig, rng) -> np.ndarray:
    """Per-mode orthonormal basis of the normal subspace: (M, dim, rank)."""
    bases = np.empty((cfg.modes, cfg.dim, cfg.rank))
    for m in range(cfg.modes):
        q, _ = np.linalg.qr(rng.normal(size=(cfg.dim, cfg.rank)))
        bases[m] = q
    return bases


def _spread_counts(total: int, n_bins: int) -> list[int]:
    base, extra = divmod(total, n_bins)
    return [base + (1 if i < extra else 0) for i in range(n_bins)]


def _normal_groups(cfg, centers, bases, n_samples, rng, next_group):
    """Homogeneous groups of normal samples, modes balanced then shuffled."""
    n_groups = max(1, math.ceil(n_samples / cfg.group_size))
    modes = np.resize(np.arange(cfg.modes), n_groups)
    rng.shuffle(modes)
    feats, mode_col, group_col = [], [], []
    for g, count in enumerate(_spread_counts(n_samples, n_groups)):
        if count == 0:
            continue
        m = int(modes[g])
        in_plane = rng.normal(size=(count, cfg.rank)) @ (
            cfg.plane_sigma * bases[m].T)
        ambient = cfg.ambient_noise * cfg.mode_sigma * rng.normal(
            size=(count, cfg.dim))
        feats.append(centers[m] + in_plane + ambient)
        mode_col.append(np.full(count, m))
        group_col.append(np.full(count, next_group + g))
    return (np.concatenate(feats), np.concatenate(mode_col),
            np.concatenate(group_col), next_group + n_groups)


def _abnormal_groups(cfg, centers, n_samples, rng, next_group):
    """Shell and inter-mode midpoint anomaly groups."""
    n_groups = max(1, math.ceil(n_samples / cfg.group_size))
    n_mid = round(cfg.midpoint_fraction * n_groups) if cfg.modes >= 2 else 0
    kinds = np.array(["mid"] * n_mid + ["shell"] * (n_groups - n_mid))
    rng.shuffle(kinds)
    feats, mode_col, group_col = [], [], []
    for g, count in enumerate(_spread_counts(n_samples, n_groups)):
        if count == 0:
            continue
        if kinds[g] == "mid":
            i, j = rng.choice(cfg.modes, size=2, replace=False)
            base = 0.5 * (centers[i] + centers[j])
            x = base + cfg.plane_sigma * rng.normal(size=(count, cfg.dim))
            mode = int(min(i, j))
        else:
            mode = int(rng.integers(cfg.modes))
            u = rng.normal(size=(count, cfg.dim))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            r = rng.uniform(cfg.shell_inner, cfg.shell_outer, size=(count, 1))
            x = centers[mode] + cfg.mode_sigma * r * u
        feats.append(x)
        mode_col.append(np.full(count, mode))
        group_col.append(np.full(count, next_group + g))
    return (np.concatenate(feats), np.concatenate(mode_col),
            np.concatenate(group_col), next_group + n_groups)


def generate_synthetic(cfg: GeneratorConfig):
    """Produce the (train, val, test) datasets for one seed.

    Train carries the configured contamination and the labeled subset
    (split ``labeled_normal_fraction`` : rest between known-normal and
    known-abnormal); val/test use ``eval_abnormal_ratio`` and stay fully
    unlabeled. Group ids are disjoint across splits by construction.
    """
    center_rng = np.random.default_rng([cfg.seed, 101])
    centers = _draw_mode_centers(cfg, center_rng)
    bases = _draw_mode_bases(cfg, np.random.default_rng([cfg.seed, 102]))

    datasets = []
    next_group = 0
    plans = [("train", cfg.train_size, cfg.contamination),
             ("val", cfg.val_size, cfg.eval_abnormal_ratio),
             ("test", cfg.test_size, cfg.eval_abnormal_ratio)]
    for split_idx, (split, size, ab_ratio) in enumerate(plans):
        rng = np.random.default_rng([cfg.seed, 200 + split_idx])
        n_ab = round(size * ab_ratio)
        n_norm = size - n_ab

        parts = []
        if n_norm > 0:
            f, m, g, next_group = _normal_groups(cfg, centers, bases, n_norm,
                                                 rng, next_group)
            parts.append((f, m, g, np.full(len(f), GT_NORMAL)))
        if n_ab > 0:
            f, m, g, next_group = _abnormal_groups(cfg, centers, n_ab, rng,
                                                   next_group)
            parts.append((f, m, g, np.full(len(f), GT_ABNORMAL)))

        features = np.concatenate([p[0] for p in parts])
        mode_ids = np.concatenate([p[1] for p in parts])
        group_ids = np.concatenate([p[2] for p in parts])
        gt = np.concatenate([p[3] for p in parts])

        perm = rng.permutation(size)
        features, mode_ids = features[perm], mode_ids[perm]
        group_ids, gt = group_ids[perm], gt[perm]

        labels = np.zeros(size, dtype=np.int8)
        if split == "train" and cfg.labeled_ratio > 0:
            n_labeled = round(size * cfg.labeled_ratio)
            n_lab_norm = round(n_labeled * cfg.labeled_normal_fraction)
            n_lab_ab = n_labeled - n_lab_norm
            norm_idx = np.flatnonzero(gt == GT_NORMAL)
            ab_idx = np.flatnonzero(gt == GT_ABNORMAL)
            if n_lab_ab > ab_idx.size:
                raise ConfigError(
                    f"labeled abnormal count {n_lab_ab} exceeds the "
                    f"{ab_idx.size} abnormal train samples")
            if n_lab_norm > norm_idx.size:
                raise ConfigError(
                    f"labeled normal count {n_lab_norm} exceeds the "
                    f"{norm_idx.size} normal train samples")
            label_rng = np.random.default_rng([cfg.seed, 300])
            labels[label_rng.choice(norm_idx, n_lab_norm, replace=False)] = LABEL_NORMAL
            labels[label_rng.choice(ab_idx, n_lab_ab, replace=False)] = LABEL_ABNORMAL

        datasets.append(Dataset(features, labels, gt, mode_ids, group_ids, split))

    return tuple(datasets)


def relabel(train_ds: Dataset, labeled_ratio: float,
            labeled_normal_fraction: float, seed) -> Dataset:
    """Re-draw the labeled subset of a train split at a new ratio.

    Generation-side operation (it reads ground truth, like the generator
    does); used for labeled-ratio sweeps over a fixed on-disk dataset.
    """
    if not 0.0 <= labeled_ratio < 1.0:
        raise ConfigError(f"labeled_ratio must be in [0, 1), got {labeled_ratio}")
    n = len(train_ds)
    n_labeled = round(n * labeled_ratio)
    n_lab_norm = round(n_labeled * labeled_normal_fraction)
    n_lab_ab = n_labeled - n_lab_norm
    norm_idx = np.flatnonzero(train_ds.ground_truth == GT_NORMAL)
    ab_idx = np.flatnonzero(train_ds.ground_truth == GT_ABNORMAL)
    if n_lab_ab > ab_idx.size or n_lab_norm > norm_idx.size:
        raise ConfigError(
            f"labeled counts {n_lab_norm}/{n_lab_ab} exceed available "
            f"{norm_idx.size}/{ab_idx.size} normal/abnormal samples")
    labels = np.zeros(n, dtype=np.int8)
    rng = np.random.default_rng([seed, 301])
    labels[rng.choice(norm_idx, n_lab_norm, replace=False)] = LABEL_NORMAL
    labels[rng.choice(ab_idx, n_lab_ab, replace=False)] = LABEL_ABNORMAL
    return Dataset(train_ds.features, labels, train_ds.ground_truth,
                   train_ds.mode_ids, train_ds.group_ids, train_ds.split)


def augment_pair(x, cfg: AugmentationConfig, rng):
    """Two independently augmented views of one sample's feature vector."""
    feats = x.features if isinstance(x, Sample) else np.asarray(x, dtype=np.float64)
    views = []
    for _ in range(2):
        scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)
        noise = rng.normal(0.0, cfg.noise_sigma, size=feats.shape)
        view = feats * scale + noise
        view[rng.random(feats.shape) < cfg.dropout_prob] = 0.0
        views.append(view)
    return views[0], views[1]


def augment_pairs(features: np.ndarray, cfg: AugmentationConfig, rng):
    """Vectorized pair augmentation for a whole batch: returns (A, B)."""
    n, d = features.shape
    out = []
    for _ in range(2):
        scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter, size=(n, 1))
        noise = rng.normal(0.0, cfg.noise_sigma, size=(n, d))
        view = features * scale + noise
        view[rng.random((n, d)) < cfg.dropout_prob] = 0.0
        out.append(view)
    return out[0], out[1]


def make_split_indices(group_ids, ratios, seed) -> dict:
    """Partition groups into splits by ratio; returns {group_id: split_idx}.

    Counts follow the largest-remainder rule so they sum exactly to the
    number of groups; assignment order is a seeded shuffle.
    """
    groups = list(group_ids)
    if len(set(groups)) != len(groups):
        raise ConfigError("group ids must be unique")
    ratios = [float(r) for r in ratios]
    if not ratios or any(r < 0 for r in ratios):
        raise ConfigError("ratios must be non-negative and non-empty")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    if len(groups) < len(ratios):
        raise ConfigError(
            f"{len(groups)} groups cannot cover {len(ratios)} splits")

    counts = [int(math.floor(r * len(groups))) for r in ratios]
    remainders = [r * len(groups) - c for r, c in zip(ratios, counts)]
    for i in sorted(range(len(ratios)), key=lambda i: -remainders[i]):
        if sum(counts) == len(groups):
            break
        counts[i] += 1

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(groups))
    assignment = {}
    pos = 0
    for split_idx, c in enumerate(counts):
        for j in order[pos:pos + c]:
            assignment[groups[j]] = split_idx
        pos += c
    return assignment


# --- CSV serialization -------------------------------------------------

def _header(dim: int) -> list[str]:
    return ["group_id", "mode_id", "ground_truth", "label"] + [
        f"f{i}" for i in range(dim)]


def save_csv(dataset: Dataset, path):
    """Write one split: decimal features at 9 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(dataset.dim))
        for i in range(len(dataset)):
            row = [int(dataset.group_ids[i]), int(dataset.mode_ids[i]),
                   _GT_NAMES[int(dataset.ground_truth[i])],
                   _LABEL_NAMES[int(dataset.labels[i])]]
            row.extend(format(v, ".9g") for v in dataset.features[i])
            writer.writerow(row)


def load_csv(path, split: str) -> Dataset:
    """Read one split back; schema violations raise SchemaError."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if len(header) < 5 or header[:4] != _header(0)[:4]:
            raise SchemaError(f"{path}: unexpected header {header[:4]}")
        dim = len(header) - 4
        if header != _header(dim):
            raise SchemaError(f"{path}: feature columns must be f0..f{dim - 1}")

        groups, modes, gts, labels, feats = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4 + dim:
                raise SchemaError(f"{path}:{lineno}: expected {4 + dim} fields")
            try:
                groups.append(int(row[0]))
                modes.append(int(row[1]))
                gts.append(_GT_VALUES[row[2]])
                labels.append(_LABEL_VALUES[row[3]])
                feats.append([float(v) for v in row[4:]])
            except (ValueError, KeyError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None

    features = np.asarray(feats, dtype=np.float64)
    if features.size and not np.all(np.isfinite(features)):
        raise SchemaError(f"{path}: non-finite feature values")
    try:
        return Dataset(features.reshape(len(groups), dim), np.array(labels),
                       np.array(gts), np.array(modes), np.array(groups), split)
    except SchemaError:
        raise
    except Exception as exc:  # invariant violations surface as schema errors
        raise SchemaError(f"{path}: {exc}") from exc


def save_splits(datasets, out_dir):
    """Write train.csv / val.csv / test.csv into ``out_dir``."""
    import os
    paths = []
    for ds in datasets:
        p = os.path.join(out_dir, f"{ds.split}.csv")
        save_csv(ds, p)
        paths.append(p)
    return paths


def load_splits(data_dir):
    """Load the three split files from ``data_dir``."""
    import os
    out = []
    for split in SPLITS:
        p = os.path.join(data_dir, f"{split}.csv")
        if not os.path.exists(p):
            raise SchemaError(f"missing data file {p}")
        out.append(load_csv(p, split))
    dims = {ds.dim for ds in out}
    if len(dims) != 1:
        raise SchemaError(f"splits disagree on feature dim: {sorted(dims)}")
    return tuple(out)
