"""Class centroids: per-batch means, the cross-step EMA bank, pseudo-labels.

Batch centroids are computed on the tape (the inter-domain loss differentiates
through the target side); the bank itself stores plain arrays and is never
differentiated through, matching the usual treatment of momentum buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul
from .errors import ContractError, StrategyUnavailableError


@dataclass
class BatchCentroids:
    """Per-class feature means of one batch.

    ``centroids`` has one row per class; rows of absent classes are zero and
    flagged off in ``present``.
    """

    centroids: Tensor  # [num_classes, dim]
    present: np.ndarray  # bool [num_classes]
    counts: np.ndarray  # int [num_classes]


def batch_centroids(features: Tensor, labels, num_classes: int) -> BatchCentroids:
    """Arithmetic mean of the feature rows of each class.

    Implemented as a constant averaging matrix times the feature Tensor, so
    gradients flow into ``features`` when it is on the tape.
    """
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.values.ndim != 2:
        raise ContractError(f"features must be 2-D, got shape {feats.values.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = feats.values.shape[0]
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match {n} feature rows")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    counts = np.bincount(labels, minlength=num_classes)
    averaging = np.zeros((num_classes, n))
    rows = labels
    cols = np.arange(n)
    averaging[rows, cols] = 1.0 / counts[rows]
    centroids = matmul(Tensor(averaging), feats)
    return BatchCentroids(
        centroids=centroids,
        present=counts > 0,
        counts=counts.astype(np.int64),
    )


class CentroidBank:
    """EMA memory of source class centroids across steps.

    Update rule per class: ``new = rho * batch + (1 - rho) * old``, i.e. rho
    weights the current batch. A class seen for the first time is set to its
    batch centroid outright; classes absent from the batch keep their value.
    """

    def __init__(self, num_classes: int, dim: int, rho: float):
        if num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {num_classes}")
        if dim < 1:
            raise ContractError(f"dim must be >= 1, got {dim}")
        if not 0.0 <= rho <= 1.0:
            raise ContractError(f"rho must be in [0, 1], got {rho}")
        self.num_classes = num_classes
        self.dim = dim
        self.rho = float(rho)
        self.centroids = np.zeros((num_classes, dim))
        self.initialized = np.zeros(num_classes, dtype=bool)

    @property
    def fully_initialized(self) -> bool:
        return bool(self.initialized.all())

    def copy(self) -> "CentroidBank":
        dup = CentroidBank(self.num_classes, self.dim, self.rho)
        dup.centroids = self.centroids.copy()
        dup.initialized = self.initialized.copy()
        return dup


def ema_update(bank: CentroidBank, batch: BatchCentroids) -> CentroidBank:
    """Fold one batch's centroids into the bank, in place.

    Only detached values enter the bank; gradients never flow back out of it.
    """
    values = batch.centroids.values
    if values.shape != (bank.num_classes, bank.dim):
        raise ContractError(
            f"batch centroids shape {values.shape} does not match bank "
            f"({bank.num_classes}, {bank.dim})"
        )
    for k in np.where(batch.present)[0]:
        if bank.initialized[k]:
            bank.centroids[k] = bank.rho * values[k] + (1.0 - bank.rho) * bank.centroids[k]
        else:
            bank.centroids[k] = values[k].copy()
            bank.initialized[k] = True
    return bank


@dataclass
class PseudoLabels:
    labels: np.ndarray  # int [n]
    confidence: np.ndarray  # float [n], in [0, 1]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def pseudo_labels_argmax(logits) -> PseudoLabels:
    """Hard labels from classifier outputs; confidence is the softmax max."""
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ContractError(f"logits must be a non-empty 2-D array, got shape {values.shape}")
    probs = _softmax_rows(values)
    return PseudoLabels(
        labels=np.argmax(values, axis=1),
        confidence=probs.max(axis=1),
    )


def nearest_centroid_labels(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center per row; ties go to the lowest index."""
    d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def lloyd_refine(features: np.ndarray, centers: np.ndarray, iters: int) -> np.ndarray:
    """A few Lloyd iterations from explicit starting centers.

    Clusters that lose all points keep their previous center, so the number
    of centers never collapses.
    """
    centers = centers.copy()
    for _ in range(iters):
        assign = nearest_centroid_labels(features, centers)
        for k in range(centers.shape[0]):
            mask = assign == k
            if mask.any():
                centers[k] = features[mask].mean(axis=0)
    return centers


def pseudo_labels_kmeans(features, bank: CentroidBank, iters: int = 10) -> PseudoLabels:
    """Cluster-based labels: Lloyd seeded from the bank, nearest-center assign.

    Requires a fully initialized bank; cluster k inherits class k because the
    seeds are the class centroids themselves.
    """
    if not bank.fully_initialized:
        missing = np.where(~bank.initialized)[0].tolist()
        raise StrategyUnavailableError(
            f"k-means pseudo-labels need a fully initialized bank; classes "
            f"{missing} have never been observed"
        )
    if iters < 0:
        raise ContractError(f"iters must be >= 0, got {iters}")
    values = features.values if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != bank.dim:
        raise ContractError(
            f"features must be [n, {bank.dim}], got shape {values.shape}"
        )
    if values.shape[0] == 0:
        raise ContractError("pseudo_labels_kmeans: empty feature batch")
    centers = lloyd_refine(values, bank.centroids, iters)
    labels = nearest_centroid_labels(values, centers)
    return PseudoLabels(labels=labels, confidence=np.ones(values.shape[0]))
