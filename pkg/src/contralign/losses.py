"""Training objectives: supervised CE, the two contrastive alignment losses,
their weighted combination, and the consistency baselines.

Both contrastive losses use the same kernel h(u, v) = exp(cos(u, v) / tau)
over raw logits; normalization happens only inside the cosine, there is no
projection head. Per-anchor and per-class means (not sums) keep the loss
magnitudes independent of batch size and class coverage, so the alpha/beta
weights transfer across batch configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    abs_,
    add,
    cosine_similarity_matrix,
    exp,
    log,
    log_softmax,
    mean_all,
    mul,
    row_sum,
    scale,
    sub,
    sum_all,
    take_per_row,
    take_rows,
)
from .centroids import BatchCentroids, CentroidBank
from .errors import ContractError, DegenerateVectorError, EmptyAlignmentError

# Which loss the alpha weight multiplies. Published descriptions of this
# objective disagree between the two conventions; the sensitivity analyses
# put alpha on the instance loss, so that is the default and "interdomain"
# selects the other reading.
ALPHA_CONVENTIONS = ("instance", "interdomain")


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 4.0
    beta: float = 1.0
    tau: float = 5.0
    rho: float = 0.1
    fixmatch_threshold: float = 0.95
    alpha_on: str = "instance"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError(f"alpha/beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.tau <= 0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"rho must be in [0, 1], got {self.rho}")
        if not 0.0 < self.fixmatch_threshold < 1.0:
            raise ContractError(
                f"fixmatch_threshold must be in (0, 1), got {self.fixmatch_threshold}"
            )
        if self.alpha_on not in ALPHA_CONVENTIONS:
            raise ContractError(
                f"alpha_on must be one of {ALPHA_CONVENTIONS}, got {self.alpha_on!r}"
            )

    def slot_coefficients(self) -> tuple[float, float]:
        """(instance_coeff, interdomain_coeff) under the chosen convention."""
        if self.alpha_on == "instance":
            return self.alpha, self.beta
        return self.beta, self.alpha


@dataclass(frozen=True)
class LossBreakdown:
    l_sup: float
    l_clu: float
    l_ins: float
    l_total: float
    classes_used: int


def similarity_h(u, v, tau: float) -> float:
    """exp(cos(u, v) / tau), the kernel shared by both contrastive losses."""
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        raise DegenerateVectorError(
            f"similarity_h: near-zero norm input ({nu:.3e}, {nv:.3e})"
        )
    return math.exp(float(u @ v) / (nu * nv) / tau)


def supervised_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.values.shape
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match {n} logit rows")
    if n == 0:
        raise ContractError("supervised_loss: empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(
            f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]"
        )
    picked = take_per_row(log_softmax(logits), labels)
    return scale(mean_all(picked), -1.0)


def inter_domain_contrastive_loss(
    target: BatchCentroids, source_bank: CentroidBank, tau: float
) -> tuple[Tensor, int]:
    """Class-centroid alignment across domains.

    Each contributing class (present in the target batch, initialized in the
    source bank) anchors one term: its target centroid is pulled toward the
    same-class source centroid and pushed from every other class's centroid
    in both domains. Returns the mean over contributing classes plus their
    count. The bank enters as a constant; gradients reach only the target
    centroids.
    """
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    present = np.where(target.present)[0]
    initialized = np.where(source_bank.initialized)[0]
    contributing = np.where(target.present & source_bank.initialized)[0]
    if contributing.size == 0:
        raise EmptyAlignmentError(
            "no class is both present in the target batch and initialized in the bank"
        )
    inv_tau = 1.0 / tau

    anchors = take_rows(target.centroids, contributing)
    target_pool = take_rows(target.centroids, present)
    source_pool = Tensor(source_bank.centroids[initialized])

    h_ts = exp(scale(cosine_similarity_matrix(anchors, source_pool), inv_tau))
    h_tt = exp(scale(cosine_similarity_matrix(anchors, target_pool), inv_tau))

    # positive column: the anchor's own class within the initialized pool
    source_col = {c: j for j, c in enumerate(initialized)}
    pos_cols = np.array([source_col[c] for c in contributing])
    positive = take_per_row(h_ts, pos_cols)

    # target-side negatives exclude the anchor's own centroid; the source
    # side keeps every column (the positive belongs in the denominator)
    tt_mask = np.ones((contributing.size, present.size))
    target_col = {c: j for j, c in enumerate(present)}
    for i, c in enumerate(contributing):
        tt_mask[i, target_col[c]] = 0.0
    denominator = add(row_sum(h_ts), row_sum(mul(h_tt, Tensor(tt_mask))))

    loss = mean_all(sub(log(denominator), log(positive)))
    return loss, int(contributing.size)


def instance_contrastive_loss(logits_strong: Tensor, logits_orig: Tensor, tau: float) -> Tensor:
    """Augmentation-consistency alignment between views of unlabeled samples.

    Anchor i is the strongly augmented row i; its positive is the original
    row i. The denominator runs over every original row (positive included)
    plus the other strong rows, 2*B_u - 1 kernel terms per anchor. The caller
    is responsible for stop-gradienting the original branch.
    """
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    b = logits_strong.values.shape[0]
    if logits_orig.values.shape[0] != b:
        raise ContractError(
            f"row mismatch: {b} strong vs {logits_orig.values.shape[0]} original"
        )
    if b < 2:
        raise ContractError(f"need at least 2 rows for negatives, got {b}")
    inv_tau = 1.0 / tau

    h_so = exp(scale(cosine_similarity_matrix(logits_strong, logits_orig), inv_tau))
    h_ss = exp(scale(cosine_similarity_matrix(logits_strong, logits_strong), inv_tau))

    positive = take_per_row(h_so, np.arange(b))
    off_diagonal = Tensor(1.0 - np.eye(b))
    denominator = add(row_sum(h_so), row_sum(mul(h_ss, off_diagonal)))
    return mean_all(sub(log(denominator), log(positive)))


def total_loss(l_sup: Tensor, l_clu, l_ins, hp: Hyperparams) -> Tensor:
    """Weighted combination, linear in each component."""
    ins_coeff, clu_coeff = hp.slot_coefficients()
    total = l_sup
    if ins_coeff != 0.0:
        total = add(total, scale(_as_scalar(l_ins), ins_coeff))
    if clu_coeff != 0.0:
        total = add(total, scale(_as_scalar(l_clu), clu_coeff))
    return total


def _as_scalar(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(float(x))
    if t.values.size != 1:
        raise ContractError(f"loss component must be scalar, got shape {t.shape}")
    return t


def _softmax_pair(logits_strong: Tensor, logits_orig: Tensor) -> tuple[Tensor, Tensor]:
    if logits_strong.values.shape != logits_orig.values.shape:
        raise ContractError(
            f"shape mismatch: {logits_strong.values.shape} vs {logits_orig.values.shape}"
        )
    return exp(log_softmax(logits_strong)), exp(log_softmax(logits_orig))


def l1_consistency(logits_strong: Tensor, logits_orig: Tensor) -> Tensor:
    """Mean absolute difference between the two softmax outputs."""
    p, q = _softmax_pair(logits_strong, logits_orig)
    return mean_all(abs_(sub(p, q)))


def l2_consistency(logits_strong: Tensor, logits_orig: Tensor) -> Tensor:
    """Mean squared difference between the two softmax outputs."""
    p, q = _softmax_pair(logits_strong, logits_orig)
    d = sub(p, q)
    return mean_all(mul(d, d))


def fixmatch_consistency(logits_strong: Tensor, logits_orig: Tensor, threshold: float) -> Tensor:
    """Confidence-masked cross-entropy against original-branch argmax labels.

    Averaged over the rows whose original-branch max softmax probability
    meets the threshold; a batch with no confident row contributes exactly 0.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    if logits_strong.values.shape != logits_orig.values.shape:
        raise ContractError(
            f"shape mismatch: {logits_strong.values.shape} vs {logits_orig.values.shape}"
        )
    orig = logits_orig.values
    shifted = orig - orig.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    confident = probs.max(axis=1) >= threshold
    if not confident.any():
        return Tensor(0.0)
    labels = np.argmax(orig, axis=1)
    picked = take_per_row(log_softmax(logits_strong), labels)
    masked = mul(picked, Tensor(confident.astype(np.float64)))
    return scale(sum_all(masked), -1.0 / float(confident.sum()))
