"""Flat key=value run configuration.

Every hyperparameter has a default, so an empty config file is runnable.
Unknown keys are rejected rather than silently ignored.  The effective
(fully defaulted) config is written next to run outputs and re-running
from it reproduces them bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

MODES = ("train", "prune", "baseline-layerwise", "baseline-cascade",
         "analyze", "compare")


@dataclass
class RunConfig:
    mode: str = "analyze"
    seed: int = 0
    out_dir: str = "out"

    # dataset
    dataset: str = "synth"  # synth | mnist | cifar10
    data_path: str = ""
    classes: int = 10
    samples: int = 2000  # synth train size; 0 = all for file datasets
    eval_samples: int = 1000
    channels: int = 3
    image_size: int = 32
    noise: float = 1.0
    separation: float = 2.0

    # model
    arch: str = "nin-mini"
    widths: str = ""  # comma-separated; empty = architecture default
    checkpoint: str = ""  # analyze mode: load instead of building fresh

    # schedule (defaults follow the published CIFAR-10 settings)
    epochs_feature: int = 30
    epochs_select: int = 10
    epochs_retrain: int = 10
    batch_size: int = 64
    lr_main: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 20
    momentum: float = 0.0
    lr_mask: float = 1e-3
    alpha_reg: float = 1e-3
    beta_distill: float = 1.0
    temperature: float = 1.0
    sigma: float = 1e-6
    pnr: float = 0.5
    refine_sweeps: int = 2
    refine_samples: int = 512

    # baseline modes
    pfr_targets: str = "0.25"

    def widths_list(self) -> list[int]:
        if not self.widths:
            return []
        return [int(v) for v in self.widths.split(",")]

    def pfr_targets_list(self) -> list[float]:
        return [float(v) for v in self.pfr_targets.split(",")]

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; known: {MODES}")
        if self.dataset not in ("synth", "mnist", "cifar10"):
            raise ValueError(f"unknown dataset {self.dataset!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    return value


def parse_assignments(lines, source: str) -> dict:
    """Parse key=value lines (blank lines and # comments allowed)."""
    out = {}
    for ln, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{source}:{ln}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | None, overrides=()) -> RunConfig:
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_assignments(fh, path))
    values.update(parse_assignments(overrides, "--set"))
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def write_effective(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        for f in sorted(fields(RunConfig), key=lambda f: f.name):
            fh.write(f"{f.name}={getattr(cfg, f.name)}\n")
