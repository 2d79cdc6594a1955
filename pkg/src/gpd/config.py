"""Flat key = value run configuration with explicit defaults.

The document format is one `key = value` pair per line; `#` starts a
comment. Unknown keys are rejected so typos fail loudly, and printing a
config emits every key in schema order, which makes parse -> print ->
parse a fixed point.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Dict

from .data import DatasetSpec
from .errors import ConfigError
from .expand import ExpansionPlan
from .losses import LossConfig
from .train import TrainConfig

# key -> (kind, default); kinds: str, int, float, bool, int_list, shape
SCHEMA = {
    "protocol": ("str", "scratch"),
    "arch": ("str", "convnet-small"),
    "epochs": ("int", 15),
    "batch_size": ("int", 64),
    "lr": ("float", 0.05),
    "momentum": ("float", 0.9),
    "weight_decay": ("float", 1e-4),
    "decay_epochs": ("int_list", (10, 13)),
    "decay_factor": ("float", 0.1),
    "seed": ("int", 0),
    "eval_every": ("int", 1),
    "hflip": ("bool", False),
    "ratio": ("int", 2),
    "branches": ("int", 2),
    "epsilon": ("float", 0.0),
    "ir_mode": ("str", "bn_safe"),
    "temperature": ("float", 4.0),
    "lambda": ("float", 1.0),
    "static_ckpt": ("str", ""),
    "init_ckpt": ("str", ""),
    "data.format": ("str", "synthetic"),
    "data.classes": ("int", 10),
    "data.train_samples": ("int", 5000),
    "data.eval_samples": ("int", 1000),
    "data.shape": ("shape", (1, 16, 16)),
    "data.noise": ("float", 1.5),
    "data.seed": ("int", 0),
    "data.mean": ("float", 0.0),
    "data.std": ("float", 1.0),
    "data.train_images": ("str", ""),
    "data.train_labels": ("str", ""),
    "data.eval_images": ("str", ""),
    "data.eval_labels": ("str", ""),
    "data.train_csv": ("str", ""),
    "data.eval_csv": ("str", ""),
    "out.dir": ("str", "runs/default"),
    "out.plot": ("bool", True),
}


def _parse_value(key: str, kind: str, raw: str) -> Any:
    raw = raw.strip()
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        if kind == "shape":
            dims = tuple(int(v) for v in raw.split("x"))
            if len(dims) != 3 or any(d < 1 for d in dims):
                raise ValueError(raw)
            return dims
    except ValueError as exc:
        raise ConfigError(f"cannot parse '{key} = {raw}' as {kind}") from exc
    raise ConfigError(f"unknown schema kind '{kind}'")


def _format_value(kind: str, value: Any) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "int_list":
        return ",".join(str(v) for v in value)
    if kind == "shape":
        return "x".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def defaults() -> Dict[str, Any]:
    return {key: default for key, (_, default) in SCHEMA.items()}


def parse_config(text: str) -> Dict[str, Any]:
    """Parse a document into a full settings dict (defaults filled in)."""
    values = defaults()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line.strip()}'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        values[key] = _parse_value(key, SCHEMA[key][0], raw)
    return values


def print_config(values: Dict[str, Any]) -> str:
    """Canonical document for a settings dict (every key, schema order)."""
    lines = []
    for key, (kind, _) in SCHEMA.items():
        lines.append(f"{key} = {_format_value(kind, values[key])}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> Dict[str, Any]:
    try:
        with open(path) as f:
            return parse_config(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from exc


def apply_env_overrides(values: Dict[str, Any], env=os.environ) -> Dict[str, Any]:
    """GPD_SEED overrides the training seed when set."""
    if "GPD_SEED" in env:
        raw = env["GPD_SEED"]
        try:
            values = dict(values)
            values["seed"] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"GPD_SEED must be an integer, got '{raw}'") from exc
    return values


@dataclass
class RunSettings:
    """Bridge between the flat document and the typed training objects."""

    train: TrainConfig
    out_dir: str
    plot: bool


def to_run_settings(values: Dict[str, Any]) -> RunSettings:
    protocol = values["protocol"]
    plan = ExpansionPlan(ratio=values["ratio"], branches=values["branches"],
                         epsilon=values["epsilon"], ir_mode=values["ir_mode"],
                         seed=values["seed"])
    loss = LossConfig(static_weight=values["lambda"],
                      temperature=values["temperature"],
                      use_static_teacher=(protocol == "distill"))
    dataset = DatasetSpec(
        format=values["data.format"], classes=values["data.classes"],
        train_samples=values["data.train_samples"], eval_samples=values["data.eval_samples"],
        shape=values["data.shape"], noise=values["data.noise"], seed=values["data.seed"],
        mean=values["data.mean"], std=values["data.std"],
        train_images=values["data.train_images"], train_labels=values["data.train_labels"],
        eval_images=values["data.eval_images"], eval_labels=values["data.eval_labels"],
        train_csv=values["data.train_csv"], eval_csv=values["data.eval_csv"],
    )
    try:
        cfg = TrainConfig(
            protocol=protocol, arch=values["arch"], epochs=values["epochs"],
            batch_size=values["batch_size"], lr=values["lr"],
            momentum=values["momentum"], weight_decay=values["weight_decay"],
            decay_epochs=values["decay_epochs"], decay_factor=values["decay_factor"],
            seed=values["seed"], eval_every=values["eval_every"],
            hflip=values["hflip"], plan=plan, loss=loss, dataset=dataset,
            static_ckpt=values["static_ckpt"], init_ckpt=values["init_ckpt"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunSettings(train=cfg, out_dir=values["out.dir"], plot=values["out.plot"])
