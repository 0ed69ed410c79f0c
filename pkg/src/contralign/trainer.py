"""The training loop: batch loading, loss assembly, SGD updates, evaluation.

One step follows the method's algorithm box: supervised loss on the labeled
streams, instance-level alignment between original and strongly augmented
unlabeled views (gradients only through the strong branch), pseudo-labeling
of the originals, target batch centroids, the EMA bank update from source
batch centroids, and finally the inter-domain centroid alignment. Variants
mask components or swap the instance slot for a consistency baseline.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, backward, stop_gradient
from .centroids import (
    CentroidBank,
    batch_centroids,
    ema_update,
    lloyd_refine,
    nearest_centroid_labels,
    pseudo_labels_argmax,
)
from .data import AugmentationPolicy, Batch, MinibatchSampler, SSDASplit
from .errors import ContractError, DivergedRunError, EmptyAlignmentError
from .losses import (
    Hyperparams,
    LossBreakdown,
    fixmatch_consistency,
    instance_contrastive_loss,
    inter_domain_contrastive_loss,
    l1_consistency,
    l2_consistency,
    supervised_loss,
    total_loss,
)
from .model import Model, ModelConfig, forward, init_model
from .model import evaluate as model_evaluate

# variant -> (instance-slot kind, inter-domain enabled by default)
VARIANTS: dict[str, tuple[str | None, bool]] = {
    "CLDA": ("instance", True),
    "S+T": (None, False),
    "CLDA-no-instance": (None, True),
    "CLDA-no-interdomain": ("instance", False),
    "L1": ("l1", False),
    "L2": ("l2", False),
    "FIXMATCH": ("fixmatch", False),
    "CLDA-KMEANS": ("instance", True),
}

PSEUDO_LABEL_STRATEGIES = ("argmax", "kmeans")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * step / total_steps)) / 2."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step must be in [0, {total_steps}], got {step}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    total_steps: int = 1
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.base_lr <= 0:
            raise ContractError(f"base_lr must be > 0, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_momentum_step(
    model: Model,
    grads: dict[Tensor, np.ndarray],
    state: OptimizerState,
    lr: float,
    step: int = 0,
) -> tuple[Model, OptimizerState]:
    """Classic coupled weight decay: g' = g + wd*w; v <- m*v + g'; w <- w - lr*v."""
    for name, p in model.parameters().items():
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.values)
        if not np.isfinite(g).all():
            raise DivergedRunError(f"non-finite gradient in {name}", step=step)
        g = g + state.weight_decay * p.values
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.values)
        v = state.momentum * v + g
        state.velocity[name] = v
        p.values = p.values - lr * v
    return model, state


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "CLDA"
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    batch_size: int = 32
    mu: int = 4
    total_steps: int = 2000
    eval_every: int = 100
    seed: int = 0
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    augment_level: int = 2
    hidden_dims: tuple[int, ...] = (64, 64)
    init_scale: float = 0.1
    pseudo_label_strategy: str = "argmax"
    kmeans_every: int = 50
    kmeans_iters: int = 10
    double_labeled: bool = False
    # Table-5b-style runs drop the inter-domain term by default so the
    # consistency losses compare as drop-in replacements; this keeps it.
    keep_interdomain_in_consistency: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(
                f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}"
            )
        if self.pseudo_label_strategy not in PSEUDO_LABEL_STRATEGIES:
            raise ContractError(
                f"pseudo_label_strategy must be one of {PSEUDO_LABEL_STRATEGIES}, "
                f"got {self.pseudo_label_strategy!r}"
            )
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.eval_every < 1:
            raise ContractError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.kmeans_every < 1 or self.kmeans_iters < 0:
            raise ContractError(
                f"kmeans cadence must be >= 1 with iters >= 0, got "
                f"{self.kmeans_every}, {self.kmeans_iters}"
            )
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    @property
    def instance_slot(self) -> str | None:
        return VARIANTS[self.variant][0]

    @property
    def interdomain_enabled(self) -> bool:
        enabled = VARIANTS[self.variant][1]
        if self.instance_slot in ("l1", "l2", "fixmatch"):
            enabled = enabled or self.keep_interdomain_in_consistency
        return enabled

    @property
    def effective_strategy(self) -> str:
        if self.variant == "CLDA-KMEANS":
            return "kmeans"
        return self.pseudo_label_strategy


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    l_sup: float
    l_clu: float
    l_ins: float
    l_total: float
    classes_used: int

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            l_sup=self.l_sup,
            l_clu=self.l_clu,
            l_ins=self.l_ins,
            l_total=self.l_total,
            classes_used=self.classes_used,
        )


@dataclass(frozen=True)
class EvalRecord:
    step: int
    val_accuracy: float
    test_accuracy: float


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    best_step: int = 0
    best_val_accuracy: float = 0.0
    best_test_accuracy: float = 0.0
    final_val_accuracy: float = 0.0
    final_test_accuracy: float = 0.0
    best_model_state: dict[str, np.ndarray] = field(default_factory=dict)
    best_bank: CentroidBank | None = None


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Top-1 accuracy on a labeled set (empty sets are a contract error)."""
    return model_evaluate(model, x, y)


class _KmeansCache:
    """50-step-cadence centers for the k-means pseudo-label strategy."""

    def __init__(self, every: int, iters: int):
        self.every = every
        self.iters = iters
        self.centers: np.ndarray | None = None
        self.refreshed_at = 0

    def maybe_refresh(self, step: int, model: Model, bank: CentroidBank, x: np.ndarray):
        if not bank.fully_initialized:
            return
        if self.centers is None or step - self.refreshed_at >= self.every:
            logits = forward(model, x).values
            self.centers = lloyd_refine(logits, bank.centroids, self.iters)
            self.refreshed_at = step


def train(config: TrainConfig, split: SSDASplit) -> tuple[Model, CentroidBank, TrainHistory]:
    """Run the full loop; returns the final model, the bank, and the history.

    The history carries the best-validation snapshot (parameters + bank) for
    checkpointing; reported test accuracy conventionally uses that snapshot.
    """
    k = split.num_classes
    hp = config.hyperparams
    ins_coeff, clu_coeff = hp.slot_coefficients()
    instance_active = config.instance_slot is not None and ins_coeff != 0.0
    interdomain_active = config.interdomain_enabled and clu_coeff != 0.0

    seeds = np.random.SeedSequence(config.seed).generate_state(2)
    model = init_model(
        ModelConfig(
            input_dim=split.dim,
            num_classes=k,
            hidden_dims=config.hidden_dims,
            init_scale=config.init_scale,
            seed=int(seeds[0]),
        )
    )
    bank = CentroidBank(k, k, rho=hp.rho)
    opt = OptimizerState(
        base_lr=config.base_lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        total_steps=config.total_steps,
    )
    sampler = MinibatchSampler(
        split,
        config.batch_size,
        config.mu,
        AugmentationPolicy.from_level(config.augment_level),
        np.random.default_rng(int(seeds[1])),
        double_labeled=config.double_labeled,
    )
    kmeans = _KmeansCache(config.kmeans_every, config.kmeans_iters)
    use_kmeans = config.effective_strategy == "kmeans"
    history = TrainHistory()

    for step in range(1, config.total_steps + 1):
        lr = cosine_lr(step - 1, config.total_steps, config.base_lr)
        if interdomain_active and use_kmeans:
            # refresh outside the tape: a full-pool forward is not part of
            # the step's differentiated computation
            kmeans.maybe_refresh(step, model, bank, split.target_unlabeled_x)
        batch = sampler.sample_minibatch()

        with Tape() as tape:
            labeled_x = np.vstack([batch.source_x, batch.target_labeled_x])
            labeled_y = np.concatenate([batch.source_y, batch.target_labeled_y])
            labeled_logits = forward(model, labeled_x)
            l_sup = supervised_loss(labeled_logits, labeled_y)

            l_ins_t: Tensor | None = None
            l_clu_t: Tensor | None = None
            classes_used = 0
            orig_logits: Tensor | None = None
            if instance_active or interdomain_active:
                orig_logits = forward(model, batch.unlabeled_orig)

            if instance_active:
                strong_logits = forward(model, batch.unlabeled_strong)
                frozen = stop_gradient(orig_logits)
                slot = config.instance_slot
                if slot == "instance":
                    l_ins_t = instance_contrastive_loss(strong_logits, frozen, hp.tau)
                elif slot == "l1":
                    l_ins_t = l1_consistency(strong_logits, frozen)
                elif slot == "l2":
                    l_ins_t = l2_consistency(strong_logits, frozen)
                else:
                    l_ins_t = fixmatch_consistency(
                        strong_logits, frozen, hp.fixmatch_threshold
                    )

            if interdomain_active:
                if use_kmeans and kmeans.centers is not None:
                    pseudo = nearest_centroid_labels(orig_logits.values, kmeans.centers)
                else:
                    # cold start for the k-means strategy falls back to argmax
                    pseudo = pseudo_labels_argmax(orig_logits).labels
                target_bc = batch_centroids(orig_logits, pseudo, k)
                n_src = batch.source_x.shape[0]
                source_logit_values = labeled_logits.values[:n_src].copy()
                source_bc = batch_centroids(Tensor(source_logit_values), batch.source_y, k)
                ema_update(bank, source_bc)
                try:
                    l_clu_t, classes_used = inter_domain_contrastive_loss(
                        target_bc, bank, hp.tau
                    )
                except EmptyAlignmentError:
                    l_clu_t = None
                    classes_used = 0

            total = total_loss(
                l_sup,
                l_clu_t if l_clu_t is not None else Tensor(0.0),
                l_ins_t if l_ins_t is not None else Tensor(0.0),
                hp,
            )
            if not np.isfinite(total.values).all():
                raise DivergedRunError(
                    f"non-finite total loss at step {step}", step=step, history=history
                )
            grads = backward(total, tape)

        try:
            sgd_momentum_step(model, grads, opt, lr, step=step)
        except DivergedRunError as err:
            err.history = history
            raise

        history.steps.append(
            StepRecord(
                step=step,
                lr=lr,
                l_sup=l_sup.item(),
                l_clu=l_clu_t.item() if l_clu_t is not None else 0.0,
                l_ins=l_ins_t.item() if l_ins_t is not None else 0.0,
                l_total=total.item(),
                classes_used=classes_used,
            )
        )

        if step % config.eval_every == 0:
            val_acc = evaluate(model, split.target_val_x, split.target_val_y)
            test_acc = evaluate(model, split.target_test_x, split.target_test_y)
            history.evals.append(EvalRecord(step, val_acc, test_acc))
            if not history.best_model_state or val_acc > history.best_val_accuracy:
                history.best_step = step
                history.best_val_accuracy = val_acc
                history.best_test_accuracy = test_acc
                history.best_model_state = model.state_arrays()
                history.best_bank = bank.copy()

    history.final_val_accuracy = evaluate(model, split.target_val_x, split.target_val_y)
    history.final_test_accuracy = evaluate(model, split.target_test_x, split.target_test_y)
    if not history.best_model_state:
        # no eval ever ran; the final model is the only candidate
        history.best_step = config.total_steps
        history.best_val_accuracy = history.final_val_accuracy
        history.best_test_accuracy = history.final_test_accuracy
        history.best_model_state = model.state_arrays()
        history.best_bank = bank.copy()
    return model, bank, history


TRACE_COLUMNS = ("step", "lr", "l_sup", "l_clu", "l_ins", "l_total", "classes_used")


def write_loss_trace(history: TrainHistory, path) -> None:
    """Per-step CSV trace; floats via repr, so a rerun is byte-identical."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for rec in history.steps:
            writer.writerow(
                [
                    rec.step,
                    repr(rec.lr),
                    repr(rec.l_sup),
                    repr(rec.l_clu),
                    repr(rec.l_ins),
                    repr(rec.l_total),
                    rec.classes_used,
                ]
            )


def read_loss_trace(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ContractError(f"unexpected trace header {header}")
        return [
            StepRecord(
                step=int(row[0]),
                lr=float(row[1]),
                l_sup=float(row[2]),
                l_clu=float(row[3]),
                l_ins=float(row[4]),
                l_total=float(row[5]),
                classes_used=int(row[6]),
            )
            for row in reader
        ]
