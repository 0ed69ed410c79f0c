"""Flat `key = value` experiment configuration.

Dotted keys group settings (`train.alpha = 4`), `#` starts a comment, and
every key not in the schema is a hard error. Parsing materializes all
defaults, so a resolved mapping always carries every key the engine reads;
reports echo it verbatim.
"""

from __future__ import annotations

import math

from .errors import ConfigError

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _as_bool(raw: str) -> bool:
    low = raw.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _as_int_tuple(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


# key -> (caster, default). Defaults mirror the library dataclass defaults;
# scenario files override explicitly rather than relying on drift-prone copies.
CONFIG_SCHEMA: dict[str, tuple] = {
    "dataset.kind": (str, "moons"),
    "dataset.n_per_domain": (int, 800),
    "dataset.theta": (float, math.pi / 4),
    "dataset.noise": (float, 0.1),
    "dataset.num_classes": (int, 4),
    "dataset.dim": (int, 4),
    "dataset.rotation": (float, math.pi / 6),
    "dataset.shift": (float, 1.0),
    "split.shots": (int, 3),
    "split.val_fraction": (float, 0.15),
    "split.test_fraction": (float, 0.25),
    "split.corrupt_labels": (int, 0),
    "train.variant": (str, "CLDA"),
    "train.alpha": (float, 4.0),
    "train.beta": (float, 1.0),
    "train.tau": (float, 5.0),
    "train.rho": (float, 0.1),
    "train.fixmatch_threshold": (float, 0.95),
    "train.alpha_on": (str, "instance"),
    "train.batch_size": (int, 32),
    "train.mu": (int, 4),
    "train.total_steps": (int, 2000),
    "train.eval_every": (int, 100),
    "train.base_lr": (float, 0.01),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 0.0005),
    "train.augment_level": (int, 2),
    "train.hidden_dims": (_as_int_tuple, (64, 64)),
    "train.init_scale": (float, 0.1),
    "train.pseudo_label_strategy": (str, "argmax"),
    "train.kmeans_every": (int, 50),
    "train.kmeans_iters": (int, 10),
    "train.double_labeled": (_as_bool, False),
    "train.keep_interdomain_in_consistency": (_as_bool, False),
    "seeds": (_as_int_tuple, (0, 1, 2, 3, 4)),
    "out": (str, "runs/experiment"),
}

DATASET_KINDS = ("moons", "blobs")


def parse_config_text(text: str) -> dict:
    """Parse config text into a fully resolved mapping (defaults filled in)."""
    seen: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        caster, _ = CONFIG_SCHEMA[key]
        try:
            seen[key] = caster(raw_value)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {err}") from err
    resolved = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    resolved.update(seen)
    _validate(resolved)
    return resolved


def parse_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    return parse_config_text(text)


def default_config() -> dict:
    resolved = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    _validate(resolved)
    return resolved


def apply_overrides(resolved: dict, overrides: dict) -> dict:
    """Return a copy with schema-checked overrides applied (CLI flags)."""
    out = dict(resolved)
    for key, value in overrides.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        caster, _ = CONFIG_SCHEMA[key]
        if isinstance(value, str):
            try:
                value = caster(value)
            except (ValueError, TypeError) as err:
                raise ConfigError(f"bad value for {key!r}: {err}") from err
        out[key] = value
    _validate(out)
    return out


def _validate(resolved: dict) -> None:
    if resolved["dataset.kind"] not in DATASET_KINDS:
        raise ConfigError(
            f"dataset.kind must be one of {DATASET_KINDS}, got {resolved['dataset.kind']!r}"
        )
    seeds = resolved["seeds"]
    if not seeds:
        raise ConfigError("seeds must be non-empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct, got {seeds}")
    if resolved["split.corrupt_labels"] < 0:
        raise ConfigError("split.corrupt_labels must be >= 0")


def format_config(resolved: dict) -> str:
    """Inverse of parse: a canonical flat text with every key materialized."""
    lines = []
    for key in CONFIG_SCHEMA:
        value = resolved[key]
        if isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"
