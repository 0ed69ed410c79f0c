"""Synthetic domain pairs, SSDA splits, augmentation, and minibatch sampling.

Two generator families stand in for the usual image benchmarks at desk scale:
rotated two-moons (K = 2, nonlinear boundary) and affine-shifted Gaussian
blobs (any K). Everything downstream is a pure function of (parameters, seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError

ROLES = ("source", "target_labeled", "target_unlabeled", "target_val", "target_test")

# One identity floor per feature dimension when standardizing.
STD_FLOOR = 1e-12


@dataclass(frozen=True)
class DomainPair:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray  # ground truth, later hidden by the split
    descriptor: dict
    noise_std: float

    @property
    def num_classes(self) -> int:
        return int(max(self.source_y.max(), self.target_y.max())) + 1

    @property
    def dim(self) -> int:
        return self.source_x.shape[1]


@dataclass(frozen=True)
class SSDASplit:
    source_x: np.ndarray
    source_y: np.ndarray
    target_labeled_x: np.ndarray
    target_labeled_y: np.ndarray
    target_unlabeled_x: np.ndarray
    # diagnostics only: training code must never read this field
    hidden_unlabeled_y: np.ndarray
    target_val_x: np.ndarray
    target_val_y: np.ndarray
    target_test_x: np.ndarray
    target_test_y: np.ndarray
    num_classes: int

    @property
    def dim(self) -> int:
        return self.source_x.shape[1]


def _balanced_counts(n: int, k: int) -> np.ndarray:
    base = n // k
    counts = np.full(k, base, dtype=np.int64)
    counts[: n - base * k] += 1
    return counts


def _moon_points(t: np.ndarray, which: int) -> np.ndarray:
    if which == 0:
        return np.column_stack([np.cos(t), np.sin(t)])
    return np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])


def generate_two_moons_domains(
    n_per_domain: int, theta: float, noise_std: float, seed: int
) -> DomainPair:
    """Interleaving half-circles; the target draw is rotated by theta about
    its own centroid, so theta = 0 means identical distributions."""
    if n_per_domain < 8:
        raise ContractError(f"n_per_domain must be >= 8, got {n_per_domain}")
    if not 0.0 <= theta <= math.pi:
        raise ContractError(f"theta must be in [0, pi], got {theta}")
    if noise_std < 0:
        raise ContractError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        counts = _balanced_counts(n, 2)
        xs, ys = [], []
        for cls, cnt in enumerate(counts):
            t = rng.uniform(0.0, math.pi, cnt)
            pts = _moon_points(t, cls)
            pts = pts + noise_std * rng.standard_normal(pts.shape)
            xs.append(pts)
            ys.append(np.full(cnt, cls, dtype=np.int64))
        return np.vstack(xs), np.concatenate(ys)

    source_x, source_y = draw(n_per_domain)
    target_x, target_y = draw(n_per_domain)
    center = target_x.mean(axis=0)
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    target_x = (target_x - center) @ rot.T + center
    return DomainPair(
        source_x=source_x,
        source_y=source_y,
        target_x=target_x,
        target_y=target_y,
        descriptor={"generator": "two_moons", "theta": float(theta)},
        noise_std=float(noise_std),
    )


def _blob_means(num_classes: int, dim: int) -> np.ndarray:
    means = np.zeros((num_classes, dim))
    if dim == 1:
        means[:, 0] = np.linspace(-3.0, 3.0, num_classes)
    else:
        angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
        means[:, 0] = 3.0 * np.cos(angles)
        means[:, 1] = 3.0 * np.sin(angles)
    return means


def generate_blob_shift_domains(
    num_classes: int,
    n_per_domain: int,
    dim: int,
    affine: tuple[np.ndarray, np.ndarray],
    noise_std: float,
    seed: int,
) -> DomainPair:
    """Gaussian class blobs; every target draw maps through x -> A x + t."""
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    if dim < 1:
        raise ContractError(f"dim must be >= 1, got {dim}")
    if n_per_domain < 2 * num_classes:
        raise ContractError(
            f"n_per_domain must be >= {2 * num_classes}, got {n_per_domain}"
        )
    if noise_std < 0:
        raise ContractError(f"noise_std must be >= 0, got {noise_std}")
    matrix = np.asarray(affine[0], dtype=np.float64)
    shift = np.asarray(affine[1], dtype=np.float64)
    if matrix.shape != (dim, dim) or shift.shape != (dim,):
        raise ContractError(
            f"affine must be a ({dim},{dim}) matrix and a ({dim},) translation, "
            f"got {matrix.shape} and {shift.shape}"
        )
    if abs(np.linalg.det(matrix)) < 1e-12:
        raise ContractError("affine matrix is singular")
    rng = np.random.default_rng(seed)
    means = _blob_means(num_classes, dim)

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        counts = _balanced_counts(n, num_classes)
        xs, ys = [], []
        for cls, cnt in enumerate(counts):
            pts = means[cls] + noise_std * rng.standard_normal((cnt, dim))
            xs.append(pts)
            ys.append(np.full(cnt, cls, dtype=np.int64))
        return np.vstack(xs), np.concatenate(ys)

    source_x, source_y = draw(n_per_domain)
    target_x, target_y = draw(n_per_domain)
    target_x = target_x @ matrix.T + shift
    return DomainPair(
        source_x=source_x,
        source_y=source_y,
        target_x=target_x,
        target_y=target_y,
        descriptor={
            "generator": "blob_shift",
            "matrix": matrix.tolist(),
            "shift": shift.tolist(),
        },
        noise_std=float(noise_std),
    )


def rotation_affine(dim: int, angle: float, shift=None) -> tuple[np.ndarray, np.ndarray]:
    """Planar rotation in the first two dims, identity elsewhere."""
    if dim < 2:
        raise ContractError(f"rotation_affine needs dim >= 2, got {dim}")
    matrix = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    matrix[0, 0], matrix[0, 1], matrix[1, 0], matrix[1, 1] = c, -s, s, c
    t = np.zeros(dim) if shift is None else np.asarray(shift, dtype=np.float64)
    return matrix, t


def make_ssda_split(
    pair: DomainPair,
    shots: int,
    val_fraction: float,
    test_fraction: float,
    seed: int,
) -> SSDASplit:
    """Stratified disjoint split of the target domain.

    Features come out standardized to source mean/std (source statistics
    only; target statistics would leak through the unlabeled pool).
    """
    if shots < 1:
        raise ContractError(f"shots must be >= 1, got {shots}")
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ContractError(
            f"val/test fractions must be >= 0 and sum below 1, got "
            f"{val_fraction} + {test_fraction}"
        )
    k = pair.num_classes
    rng = np.random.default_rng(seed)

    labeled, unlabeled, val, test = [], [], [], []
    for cls in range(k):
        idx = np.where(pair.target_y == cls)[0]
        n_c = idx.size
        n_val = int(math.floor(val_fraction * n_c))
        n_test = int(math.floor(test_fraction * n_c))
        need = shots + n_val + n_test
        if n_c < need:
            raise ContractError(
                f"class {cls}: {n_c} target samples cannot cover "
                f"{shots} shots + {n_val} val + {n_test} test"
            )
        perm = idx[rng.permutation(n_c)]
        labeled.append(perm[:shots])
        val.append(perm[shots : shots + n_val])
        test.append(perm[shots + n_val : shots + n_val + n_test])
        unlabeled.append(perm[shots + n_val + n_test :])

    labeled = np.concatenate(labeled)
    val = np.concatenate(val)
    test = np.concatenate(test)
    unlabeled = np.concatenate(unlabeled)
    if unlabeled.size < 10 * labeled.size:
        raise ContractError(
            f"unlabeled pool ({unlabeled.size}) must be at least 10x the "
            f"labeled-target pool ({labeled.size}); use more target samples"
        )

    mean = pair.source_x.mean(axis=0)
    std = pair.source_x.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)

    def norm(x: np.ndarray) -> np.ndarray:
        return (x - mean) / std

    return SSDASplit(
        source_x=norm(pair.source_x),
        source_y=pair.source_y.copy(),
        target_labeled_x=norm(pair.target_x[labeled]),
        target_labeled_y=pair.target_y[labeled].copy(),
        target_unlabeled_x=norm(pair.target_x[unlabeled]),
        hidden_unlabeled_y=pair.target_y[unlabeled].copy(),
        target_val_x=norm(pair.target_x[val]),
        target_val_y=pair.target_y[val].copy(),
        target_test_x=norm(pair.target_x[test]),
        target_test_y=pair.target_y[test].copy(),
        num_classes=k,
    )


def corrupt_target_labels(split: SSDASplit, num_mislabeled: int, seed: int) -> SSDASplit:
    """Assign a uniformly random wrong class to chosen labeled-target rows."""
    n = split.target_labeled_y.size
    if not 0 <= num_mislabeled <= n:
        raise ContractError(
            f"num_mislabeled must be in [0, {n}], got {num_mislabeled}"
        )
    if num_mislabeled == 0:
        return split
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=num_mislabeled, replace=False)
    labels = split.target_labeled_y.copy()
    k = split.num_classes
    offsets = rng.integers(1, k, size=num_mislabeled)
    labels[chosen] = (labels[chosen] + offsets) % k
    return replace(split, target_labeled_y=labels)


# ---------------------------------------------------------------------------
# Augmentation


# Dropout is reserved for the top level: on low-dimensional inputs it can
# zero an entire row, and a freshly initialized model (zero biases) maps the
# zero vector to zero-norm logits, which the contrastive kernel rejects.
_LEVEL_TABLE = {
    0: (0.0, 0.0, (1.0, 1.0), False),
    1: (0.05, 0.0, (0.95, 1.05), False),
    2: (0.15, 0.0, (0.85, 1.15), True),
    3: (0.35, 0.25, (0.7, 1.3), True),
}


@dataclass(frozen=True)
class AugmentationPolicy:
    strength_level: int
    noise_sigma: float
    dropout_prob: float
    scale_range: tuple[float, float]
    rotate_pairs: bool

    @classmethod
    def from_level(cls, level: int) -> "AugmentationPolicy":
        if level not in _LEVEL_TABLE:
            raise ContractError(f"augmentation level must be 0..3, got {level}")
        sigma, drop, scale_range, rotate = _LEVEL_TABLE[level]
        return cls(level, sigma, drop, scale_range, rotate)

    @property
    def is_identity(self) -> bool:
        return (
            self.noise_sigma == 0.0
            and self.dropout_prob == 0.0
            and self.scale_range == (1.0, 1.0)
            and not self.rotate_pairs
        )


def augment(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Stochastic perturbation of a feature vector, component order fixed:
    gaussian noise, feature dropout, global scale, random planar rotation."""
    x = np.asarray(x, dtype=np.float64)
    if policy.is_identity:
        return x.copy()  # bit-exact, consumes no randomness
    out = x.copy()
    d = out.shape[0]
    if policy.noise_sigma > 0:
        out += policy.noise_sigma * rng.standard_normal(d)
    if policy.dropout_prob > 0:
        out[rng.random(d) < policy.dropout_prob] = 0.0
    lo, hi = policy.scale_range
    if lo != 1.0 or hi != 1.0:
        out *= rng.uniform(lo, hi)
    if policy.rotate_pairs and d >= 2:
        # bounded angle: the view must stay recognizable, a full-circle spin
        # erases class geometry on low-dimensional inputs
        i, j = rng.choice(d, size=2, replace=False)
        ang = rng.uniform(-math.pi / 8.0, math.pi / 8.0)
        c, s = math.cos(ang), math.sin(ang)
        xi, xj = out[i], out[j]
        out[i] = c * xi - s * xj
        out[j] = s * xi + c * xj
    return out


# ---------------------------------------------------------------------------
# Minibatch sampling


@dataclass(frozen=True)
class Batch:
    source_x: np.ndarray
    source_y: np.ndarray
    target_labeled_x: np.ndarray
    target_labeled_y: np.ndarray
    unlabeled_orig: np.ndarray
    unlabeled_strong: np.ndarray


class MinibatchSampler:
    """Stateful batch composition for one training run.

    Labeled streams draw i.i.d. with replacement (the k-shot pool is tiny);
    the unlabeled stream walks a shuffled cursor so every sample is visited
    once per epoch. ``double_labeled`` switches the labeled composition from
    B/2 + B/2 to B + B.
    """

    def __init__(
        self,
        split: SSDASplit,
        batch_size: int,
        mu: int,
        policy: AugmentationPolicy,
        rng: np.random.Generator,
        double_labeled: bool = False,
    ):
        if batch_size < 2:
            raise ContractError(f"batch_size must be >= 2, got {batch_size}")
        if not double_labeled and batch_size % 2 != 0:
            raise ContractError(
                f"batch_size must be even to split between the labeled streams, "
                f"got {batch_size}"
            )
        if mu < 1:
            raise ContractError(f"mu must be >= 1, got {mu}")
        if split.target_unlabeled_x.shape[0] < 2:
            raise ContractError("need at least 2 unlabeled target samples")
        self.split = split
        self.batch_size = batch_size
        self.mu = mu
        self.policy = policy
        self.rng = rng
        self.per_stream = batch_size if double_labeled else batch_size // 2
        n = split.target_unlabeled_x.shape[0]
        self._order = np.arange(n)
        self._cursor = n  # forces a shuffle on first use

    def _next_unlabeled_indices(self, count: int) -> np.ndarray:
        n = self._order.size
        taken = []
        while count > 0:
            if self._cursor >= n:
                self._order = self.rng.permutation(n)
                self._cursor = 0
            take = min(count, n - self._cursor)
            taken.append(self._order[self._cursor : self._cursor + take])
            self._cursor += take
            count -= take
        return np.concatenate(taken)

    def sample_minibatch(self) -> Batch:
        split, rng = self.split, self.rng
        src_idx = rng.integers(0, split.source_x.shape[0], size=self.per_stream)
        lt_idx = rng.integers(0, split.target_labeled_x.shape[0], size=self.per_stream)
        unl_idx = self._next_unlabeled_indices(self.mu * self.batch_size)
        orig = split.target_unlabeled_x[unl_idx]
        strong = np.stack([augment(row, self.policy, rng) for row in orig])
        return Batch(
            source_x=split.source_x[src_idx],
            source_y=split.source_y[src_idx],
            target_labeled_x=split.target_labeled_x[lt_idx],
            target_labeled_y=split.target_labeled_y[lt_idx],
            unlabeled_orig=orig,
            unlabeled_strong=strong,
        )


# ---------------------------------------------------------------------------
# CSV round trip


def export_split_csv(split: SSDASplit, path) -> None:
    """One row per sample: feature_0..d-1, label, domain, role.

    Unlabeled rows carry their hidden diagnostic label; anything reading the
    file for training purposes must treat that column as unavailable for the
    target_unlabeled role.
    """
    d = split.dim
    blocks = [
        (split.source_x, split.source_y, "source", "source"),
        (split.target_labeled_x, split.target_labeled_y, "target", "target_labeled"),
        (split.target_unlabeled_x, split.hidden_unlabeled_y, "target", "target_unlabeled"),
        (split.target_val_x, split.target_val_y, "target", "target_val"),
        (split.target_test_x, split.target_test_y, "target", "target_test"),
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{i}" for i in range(d)] + ["label", "domain", "role"])
        for x, y, domain, role in blocks:
            for row, label in zip(x, y):
                writer.writerow([repr(float(v)) for v in row] + [int(label), domain, role])


def import_split_csv(path) -> SSDASplit:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-3:] != ["label", "domain", "role"]:
            raise ContractError(f"unexpected CSV header tail: {header[-3:]}")
        d = len(header) - 3
        if [f"feature_{i}" for i in range(d)] != header[:d]:
            raise ContractError("feature columns must be feature_0..feature_{d-1}")
        rows: dict[str, list] = {role: [] for role in ROLES}
        labels: dict[str, list] = {role: [] for role in ROLES}
        for line in reader:
            role = line[d + 2]
            if role not in rows:
                raise ContractError(f"unknown role {role!r}")
            rows[role].append([float(v) for v in line[:d]])
            labels[role].append(int(line[d]))

    def arr(role: str) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(rows[role], dtype=np.float64).reshape(len(rows[role]), d)
        y = np.asarray(labels[role], dtype=np.int64)
        return x, y

    source_x, source_y = arr("source")
    tl_x, tl_y = arr("target_labeled")
    tu_x, tu_y = arr("target_unlabeled")
    val_x, val_y = arr("target_val")
    test_x, test_y = arr("target_test")
    all_labels = np.concatenate([source_y, tl_y, tu_y, val_y, test_y])
    if all_labels.size == 0:
        raise ContractError("CSV contains no samples")
    return SSDASplit(
        source_x=source_x,
        source_y=source_y,
        target_labeled_x=tl_x,
        target_labeled_y=tl_y,
        target_unlabeled_x=tu_x,
        hidden_unlabeled_y=tu_y,
        target_val_x=val_x,
        target_val_y=val_y,
        target_test_x=test_x,
        target_test_y=test_y,
        num_classes=int(all_labels.max()) + 1,
    )
