"""Flat ``key = value`` run configuration.

One file covers the model, loss weights, optimiser, schedule, seeds, data
paths and metric thresholds.  Lines starting with ``#`` are comments; every
key has a default (see ``RunConfig``), and unknown keys are rejected so that
typos fail loudly instead of being ignored.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Iterable

from .losses import LossWeights
from .metrics import ADD_DIAMETER_FRACTION, ADDS_THRESHOLD, AUC_MAX_THRESHOLD
from .model import ModelConfig
from .refine import IcpConfig
from .training import TrainConfig

_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))


@dataclass(frozen=True)
class RunConfig:
    # model
    d_emb: int = 64
    n_points: int = 128
    fusion_depth: int = 2
    grid_size: int = 256
    se_ratio: int = 8
    nonlocal_ratio: int = 2
    head_widths: tuple = (256, 128)
    global_width: int = 256
    fold_width: int = 256
    appearance_dim: int = ModelConfig.appearance_dim
    use_pointfusion: bool = True
    coord_scale: float = 10.0
    grid_seed: int = 0
    init_seed: int = 0
    # loss weights
    lambda_pose: float = 1.0
    lambda_cano: float = 1.0
    lambda_posed: float = 1.0
    # optimiser and schedule
    lr: float = 1e-3
    lr_final_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 40
    batch_size: int = 32
    max_seconds: float = 0.0
    chamfer_targets: int = 1024
    train_seed: int = 0
    eval_seed: int = 0
    # data
    data: str = ""
    # metrics and refinement
    auc_max_threshold: float = AUC_MAX_THRESHOLD
    adds_threshold: float = ADDS_THRESHOLD
    add_fraction: float = ADD_DIAMETER_FRACTION
    icp_max_iterations: int = 50
    icp_convergence_tol: float = 1e-9
    icp_max_correspondence_dist: float = 0.05

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_KEYS})

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_pose, self.lambda_cano, self.lambda_posed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           lr_final_fraction=self.lr_final_fraction, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps, seed=self.train_seed,
                           weights=self.loss_weights(), max_seconds=self.max_seconds,
                           chamfer_targets=self.chamfer_targets)

    def icp_config(self) -> IcpConfig:
        return IcpConfig(self.icp_max_iterations, self.icp_convergence_tol,
                         self.icp_max_correspondence_dist)

    def with_overrides(self, pairs: Iterable[str]) -> "RunConfig":
        """Apply ``key=value`` strings (e.g. from repeated ``--set`` flags)."""
        updates = {}
        for item in pairs:
            if "=" not in item:
                raise ValueError(f"expected key=value, got {item!r}")
            key, value = item.split("=", 1)
            updates[key.strip()] = value.strip()
        cfg = replace(self, **_parse_values(updates, "<overrides>"))
        cfg.model_config()
        return cfg

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.keys()}
        d["head_widths"] = list(self.head_widths)
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(getattr(self, k))}\n" for k in self.keys())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _convert(key: str, raw: str, where: str):
    default = getattr(RunConfig, key)
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return type(default)(raw)
    except ValueError:
        raise ValueError(f"{where}: bad value {raw!r} for {key} "
                         f"(expected {type(default).__name__})") from None


def _parse_values(raw: dict, where: str) -> dict:
    known = set(RunConfig.keys())
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"{where}: unknown config keys {unknown}")
    return {k: _convert(k, v, where) for k, v in raw.items()}


def parse_config(text: str, where: str = "<string>") -> RunConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{where}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ValueError(f"{where}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    cfg = RunConfig(**_parse_values(raw, where))
    cfg.model_config()  # validate early
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))
