"""Flat ``key = value`` run configuration files."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .train import STAGES, TrainConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or out-of-range setting."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pathway_widths(text: str) -> tuple[tuple[int, int], ...]:
    """``64:2,128:2`` -> ((64, 2), (128, 2)): output channels and pool factor per block."""
    out = []
    for item in text.split(","):
        width, pool = item.split(":")
        out.append((int(width), int(pool)))
    return tuple(out)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "auto", "none") else int(text)


@dataclass
class RunConfig:
    """Every key has a default; ``epochs = auto`` means 100 (Stage I) / 50 (Stage II)."""

    dataset: str = "ucihar"
    root: str = "data/UCI HAR Dataset"
    stage: str = "1-static"
    batch_size: int = 64
    epochs: int | None = None
    lr: float = 1e-3
    seed: int = 42
    freeze_experts: bool = True
    out: str = "model.ck"
    val_fraction: float = 0.1
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-5
    train_subjects: int = 16  # MotionSense only; UCI-HAR uses its published split
    pathway_widths: tuple = ((64, 2), (128, 2), (256, 2), (256, 2))
    guidance_widths: tuple = (32, 64, 64)

    def validate(self) -> "RunConfig":
        if self.dataset not in ("ucihar", "motionsense"):
            raise ConfigError(f"dataset must be ucihar or motionsense, got {self.dataset!r}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {', '.join(STAGES)}, got {self.stage!r}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            initial_lr=self.lr,
            seed=self.seed,
            freeze_experts=self.freeze_experts,
            val_fraction=self.val_fraction,
            patience=self.patience,
            factor=self.factor,
            min_lr=self.min_lr,
            pathway_widths=tuple(self.pathway_widths),
            guidance_widths=tuple(self.guidance_widths),
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["pathway_widths"] = ",".join(f"{w}:{p}" for w, p in self.pathway_widths)
        d["guidance_widths"] = ",".join(str(w) for w in self.guidance_widths)
        return d


_PARSERS = {
    "batch_size": int,
    "epochs": _optional_int,
    "lr": float,
    "seed": int,
    "freeze_experts": _bool,
    "val_fraction": float,
    "patience": int,
    "factor": float,
    "min_lr": float,
    "train_subjects": int,
    "pathway_widths": _pathway_widths,
    "guidance_widths": _int_list,
}
KEYS = tuple(f.name for f in fields(RunConfig))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS.get(key, str)(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    cfg = RunConfig(**{**asdict(base or RunConfig()), **values})
    return cfg.validate()


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
