"""Experiment orchestration: multi-seed runs, ablation grids, reports.

A run seed is split into four independent sub-seeds (data, split, label
corruption, training) so that, e.g., sweeping the corruption count never
perturbs the underlying dataset draw. Reports are JSON with sorted keys;
everything tabular is CSV. All outputs are deterministic functions of
config + seeds except the wall-clock field.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tape, Tensor, backward, grad_check, scale, stop_gradient
from .centroids import CentroidBank, batch_centroids
from .config import CONFIG_SCHEMA, apply_overrides
from .data import (
    DomainPair,
    SSDASplit,
    corrupt_target_labels,
    generate_blob_shift_domains,
    generate_two_moons_domains,
    make_ssda_split,
    rotation_affine,
)
from .errors import ConfigError, ContractError, DivergedRunError
from .losses import (
    Hyperparams,
    fixmatch_consistency,
    instance_contrastive_loss,
    inter_domain_contrastive_loss,
    l1_consistency,
    l2_consistency,
    supervised_loss,
)
from .model import Model, ModelConfig, init_model
from .trainer import TrainConfig, train, write_loss_trace

CHECKPOINT_FORMAT = "contralign-checkpoint-v1"


def derive_sub_seeds(seed: int) -> tuple[int, int, int, int]:
    """(data, split, corruption, training) sub-seeds for one run seed."""
    state = np.random.SeedSequence(seed).generate_state(4)
    return tuple(int(v) for v in state)


# ---------------------------------------------------------------------------
# config -> engine objects


@dataclass(frozen=True)
class ExperimentConfig:
    """A resolved flat mapping plus typed views into it."""

    mapping: dict

    def __post_init__(self):
        missing = [k for k in CONFIG_SCHEMA if k not in self.mapping]
        if missing:
            raise ConfigError(f"config mapping is missing keys: {missing}")
        self.train_config(seed=0)  # validate variant/hyperparams eagerly

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.mapping["seeds"])

    @property
    def out_dir(self) -> str:
        return self.mapping["out"]

    def hyperparams(self) -> Hyperparams:
        m = self.mapping
        return Hyperparams(
            alpha=m["train.alpha"],
            beta=m["train.beta"],
            tau=m["train.tau"],
            rho=m["train.rho"],
            fixmatch_threshold=m["train.fixmatch_threshold"],
            alpha_on=m["train.alpha_on"],
        )

    def train_config(self, seed: int) -> TrainConfig:
        m = self.mapping
        return TrainConfig(
            variant=m["train.variant"],
            hyperparams=self.hyperparams(),
            batch_size=m["train.batch_size"],
            mu=m["train.mu"],
            total_steps=m["train.total_steps"],
            eval_every=m["train.eval_every"],
            seed=seed,
            base_lr=m["train.base_lr"],
            momentum=m["train.momentum"],
            weight_decay=m["train.weight_decay"],
            augment_level=m["train.augment_level"],
            hidden_dims=tuple(m["train.hidden_dims"]),
            init_scale=m["train.init_scale"],
            pseudo_label_strategy=m["train.pseudo_label_strategy"],
            kmeans_every=m["train.kmeans_every"],
            kmeans_iters=m["train.kmeans_iters"],
            double_labeled=m["train.double_labeled"],
            keep_interdomain_in_consistency=m["train.keep_interdomain_in_consistency"],
        )

    def domain_pair(self, data_seed: int) -> DomainPair:
        m = self.mapping
        if m["dataset.kind"] == "moons":
            return generate_two_moons_domains(
                m["dataset.n_per_domain"],
                m["dataset.theta"],
                m["dataset.noise"],
                data_seed,
            )
        dim = m["dataset.dim"]
        affine = rotation_affine(
            dim, m["dataset.rotation"], shift=[m["dataset.shift"]] * dim
        )
        return generate_blob_shift_domains(
            m["dataset.num_classes"],
            m["dataset.n_per_domain"],
            dim,
            affine,
            m["dataset.noise"],
            data_seed,
        )

    def split_for_seed(self, seed: int) -> SSDASplit:
        data_seed, split_seed, corrupt_seed, _ = derive_sub_seeds(seed)
        pair = self.domain_pair(data_seed)
        m = self.mapping
        split = make_ssda_split(
            pair,
            m["split.shots"],
            m["split.val_fraction"],
            m["split.test_fraction"],
            seed=split_seed,
        )
        if m["split.corrupt_labels"]:
            split = corrupt_target_labels(split, m["split.corrupt_labels"], corrupt_seed)
        return split


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(config: ModelConfig, state: dict[str, np.ndarray], path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model": {
            "input_dim": config.input_dim,
            "num_classes": config.num_classes,
            "hidden_dims": list(config.hidden_dims),
            "init_scale": config.init_scale,
            "seed": config.seed,
        },
        "parameters": {
            name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
            for name, arr in sorted(state.items())
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Model:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(
            f"{path}: expected checkpoint format {CHECKPOINT_FORMAT!r}, "
            f"got {payload.get('format')!r}"
        )
    spec = payload["model"]
    config = ModelConfig(
        input_dim=spec["input_dim"],
        num_classes=spec["num_classes"],
        hidden_dims=tuple(spec["hidden_dims"]),
        init_scale=spec["init_scale"],
        seed=spec["seed"],
    )
    model = init_model(config)
    state = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["parameters"].items()
    }
    model.load_state_arrays(state)
    return model


# ---------------------------------------------------------------------------
# single-experiment execution


@dataclass(frozen=True)
class RunReport:
    config: dict
    per_seed: list
    aggregate: dict
    wall_clock_seconds: float
    engine_version: str = __version__

    def to_json_dict(self) -> dict:
        cfg = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in self.config.items()
        }
        return {
            "engine_version": self.engine_version,
            "config": cfg,
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


METRIC_NAMES = (
    "final_val_accuracy",
    "final_test_accuracy",
    "best_val_accuracy",
    "best_test_accuracy",
)


def _seed_worker(payload) -> dict:
    mapping, seed, out_dir = payload
    config = ExperimentConfig(mapping)
    _, _, _, train_seed = derive_sub_seeds(seed)
    split = config.split_for_seed(seed)
    out = Path(out_dir)
    trace_name = f"trace_seed{seed}.csv"
    result = {
        "seed": seed,
        "status": "ok",
        "error": None,
        "trace_csv": trace_name,
        "checkpoint": None,
        "steps_run": 0,
        "evals": [],
    }
    for name in METRIC_NAMES:
        result[name] = None
    result["best_step"] = None
    try:
        model, _, history = train(config.train_config(train_seed), split)
    except DivergedRunError as err:
        result["status"] = "diverged"
        result["error"] = str(err)
        if err.history is not None:
            result["steps_run"] = len(err.history.steps)
            write_loss_trace(err.history, out / trace_name)
        else:
            result["trace_csv"] = None
        return result
    write_loss_trace(history, out / trace_name)
    checkpoint_name = f"checkpoint_seed{seed}.json"
    save_checkpoint(model.config, history.best_model_state, out / checkpoint_name)
    result["checkpoint"] = checkpoint_name
    result["steps_run"] = len(history.steps)
    result["best_step"] = history.best_step
    result["evals"] = [
        [e.step, e.val_accuracy, e.test_accuracy] for e in history.evals
    ]
    for name in METRIC_NAMES:
        result[name] = getattr(history, name)
    return result


def _aggregate(per_seed: list) -> dict:
    ok = [r for r in per_seed if r["status"] == "ok"]
    agg: dict = {"seeds_ok": len(ok), "seeds_total": len(per_seed)}
    for name in METRIC_NAMES:
        if ok:
            values = np.array([r[name] for r in ok], dtype=np.float64)
            agg[name] = {
                "mean": float(values.mean()),
                "std": float(values.std()),  # population (ddof=0)
            }
        else:
            agg[name] = {"mean": None, "std": None}
    return agg


def run_experiment(
    config: ExperimentConfig,
    out_dir=None,
    workers: int = 1,
    figures: bool = True,
) -> RunReport:
    """Train every seed, write traces/checkpoints/report.json under out_dir."""
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    payloads = [(config.mapping, seed, str(out)) for seed in config.seeds]
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_seed_worker, payloads))
    else:
        per_seed = [_seed_worker(p) for p in payloads]
    report = RunReport(
        config=dict(config.mapping),
        per_seed=per_seed,
        aggregate=_aggregate(per_seed),
        wall_clock_seconds=time.perf_counter() - started,
    )
    (out / "report.json").write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
    if figures:
        from . import plots

        plots.render_run_figures(out, report)
    return report


# ---------------------------------------------------------------------------
# ablation grids

AXIS_KEYS = {
    "variant": "train.variant",
    "alpha": "train.alpha",
    "beta": "train.beta",
    "mu": "train.mu",
    "rho": "train.rho",
    "tau": "train.tau",
    "augment_level": "train.augment_level",
    "shots": "split.shots",
    "corrupt_labels": "split.corrupt_labels",
}


def _slug(value) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", str(value))


@dataclass(frozen=True)
class GridCell:
    index: int
    values: dict
    directory: str
    report: RunReport


def run_ablation_grid(
    config: ExperimentConfig,
    axes: dict,
    out_dir=None,
    workers: int = 1,
    figures: bool = True,
) -> list:
    """Cartesian product of axis values; every cell is a full run_experiment."""
    if not axes:
        raise ConfigError("ablation grid needs at least one axis")
    for name, values in axes.items():
        if name not in AXIS_KEYS:
            raise ConfigError(
                f"unknown ablation axis {name!r}; valid axes: {sorted(AXIS_KEYS)}"
            )
        if not values:
            raise ConfigError(f"axis {name!r} has no values")
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(axes)
    cells = []
    for index, combo in enumerate(itertools.product(*(axes[n] for n in names))):
        values = dict(zip(names, combo))
        overrides = {AXIS_KEYS[n]: v for n, v in values.items()}
        cell_mapping = apply_overrides(config.mapping, overrides)
        tag = "-".join(f"{n}{_slug(v)}" for n, v in values.items())
        cell_dir = out / f"cell_{index:03d}_{tag}"
        report = run_experiment(
            ExperimentConfig(cell_mapping), cell_dir, workers=workers, figures=False
        )
        cells.append(GridCell(index, values, cell_dir.name, report))

    grid_meta = {
        "axes": {n: list(axes[n]) for n in names},
        "cells": [
            {"dir": c.directory, "index": c.index, "values": c.values} for c in cells
        ],
    }
    (out / "grid.json").write_text(json.dumps(grid_meta, indent=2, sort_keys=True) + "\n")
    _write_grid_csv(out / "ablation.csv", names, cells)
    if figures:
        from . import plots

        plots.render_grid_figure(out, names, cells)
    return cells


def _write_grid_csv(path, names, cells) -> None:
    header = names + ["seeds_ok", "val_mean", "val_std", "test_mean", "test_std"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for cell in cells:
            agg = cell.report.aggregate
            row = [cell.values[n] for n in names] + [agg["seeds_ok"]]
            for metric in ("best_val_accuracy", "best_test_accuracy"):
                mean, std = agg[metric]["mean"], agg[metric]["std"]
                row.append("" if mean is None else repr(mean))
                row.append("" if std is None else repr(std))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class GradCheckReport:
    worst_errors: dict
    stop_gradient_exact: bool
    tolerance: float
    passed: bool

    def lines(self) -> list:
        width = max(len(n) for n in self.worst_errors)
        rows = [
            f"{name:<{width}}  worst rel err {err:.3e}  "
            f"{'PASS' if err < self.tolerance else 'FAIL'}"
            for name, err in self.worst_errors.items()
        ]
        rows.append(
            "original-branch gradient exactly zero: "
            + ("PASS" if self.stop_gradient_exact else "FAIL")
        )
        rows.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return rows


def _full_bank(rng, num_classes: int, dim: int) -> CentroidBank:
    bank = CentroidBank(num_classes, dim, rho=0.1)
    bank.centroids = rng.standard_normal((num_classes, dim))
    bank.initialized[:] = True
    return bank


def gradcheck_command(seed: int = 0, tolerance: float = 1e-4, eps: float = 1e-5) -> GradCheckReport:
    """Finite-difference verification of every loss over small random configs."""
    rng = np.random.default_rng(seed)
    tau = 1.0
    worst = {name: 0.0 for name in ("supervised", "interdomain", "instance", "l1", "l2", "fixmatch")}
    for num_classes in (2, 3, 5):
        for batch in (2, 4, 8):
            labels = rng.integers(0, num_classes, size=batch)
            logits = Tensor(rng.standard_normal((batch, num_classes)), requires_grad=True)
            worst["supervised"] = max(
                worst["supervised"],
                grad_check(lambda: supervised_loss(logits, labels), [logits], eps),
            )

            target = Tensor(rng.standard_normal((batch, num_classes)), requires_grad=True)
            bank = _full_bank(rng, num_classes, num_classes)
            worst["interdomain"] = max(
                worst["interdomain"],
                grad_check(
                    lambda: inter_domain_contrastive_loss(
                        batch_centroids(target, labels, num_classes), bank, tau
                    )[0],
                    [target],
                    eps,
                ),
            )

            strong = Tensor(rng.standard_normal((batch, num_classes)), requires_grad=True)
            orig = Tensor(rng.standard_normal((batch, num_classes)))
            worst["instance"] = max(
                worst["instance"],
                grad_check(lambda: instance_contrastive_loss(strong, orig, tau), [strong], eps),
            )
            worst["l1"] = max(
                worst["l1"], grad_check(lambda: l1_consistency(strong, orig), [strong], eps)
            )
            worst["l2"] = max(
                worst["l2"], grad_check(lambda: l2_consistency(strong, orig), [strong], eps)
            )
            # saturated original logits so some rows clear the confidence bar
            confident = Tensor(10.0 * np.eye(num_classes)[labels])
            worst["fixmatch"] = max(
                worst["fixmatch"],
                grad_check(
                    lambda: fixmatch_consistency(strong, confident, 0.95), [strong], eps
                ),
            )

    stop_exact = _stop_gradient_exactly_zero(rng)
    passed = stop_exact and all(err < tolerance for err in worst.values())
    return GradCheckReport(worst, stop_exact, tolerance, passed)


def _stop_gradient_exactly_zero(rng) -> bool:
    strong = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    orig = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    with Tape() as tape:
        frozen = stop_gradient(scale(orig, 1.0))  # scale puts orig on the tape
        loss = instance_contrastive_loss(strong, frozen, 1.0)
        grads = backward(loss, tape)
    return bool(np.all(grads[orig] == 0.0)) and bool(np.any(grads[strong] != 0.0))


# ---------------------------------------------------------------------------
# tidy plot data

PLOT_DATA_HEADER = ("axis", "value", "seed", "metric", "score")


def emit_plot_data(paths, out_path) -> int:
    """Flatten reports into long-format CSV rows; returns the row count."""
    rows = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            path = path / ("grid.json" if (path / "grid.json").exists() else "report.json")
        payload = json.loads(path.read_text())
        if "cells" in payload:
            axis = "/".join(payload["axes"])
            for cell in payload["cells"]:
                report = json.loads((path.parent / cell["dir"] / "report.json").read_text())
                value = "/".join(str(cell["values"][a]) for a in payload["axes"])
                rows.extend(_report_rows(report, axis, value))
        else:
            rows.extend(_report_rows(payload, "seed", None))
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_DATA_HEADER)
        writer.writerows(rows)
    return len(rows)


def _report_rows(report: dict, axis: str, value) -> list:
    rows = []
    for entry in report["per_seed"]:
        if entry["status"] != "ok":
            continue
        for metric in METRIC_NAMES:
            rows.append(
                (
                    axis,
                    str(entry["seed"]) if value is None else value,
                    entry["seed"],
                    metric,
                    repr(entry[metric]),
                )
            )
    return rows
