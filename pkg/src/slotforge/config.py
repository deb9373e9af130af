"""Flat key=value training configuration with fail-fast unknown keys."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import UsageError
from .masking import MaskingConfig


@dataclass
class TrainConfig:
    """Optimization schedule, masking choice, and model dimensions.

    decay_horizon = 0 stretches the exponential decay over the run's total
    step count; max_steps = 0 means no cap below epochs * steps-per-epoch.
    """

    lr_base: float = 4e-4
    warmup_frac: float = 0.02
    decay_rate: float = 0.5
    decay_horizon: int = 0
    epochs: int = 10
    batch_size: int = 16
    max_steps: int = 0
    mask_strategy: str = "background"
    mask_percent: float = 70.0
    head_select: str = "random"      # random | fused
    per_batch_head: bool = False     # one head draw per batch instead of per image
    heads: int = 4
    slots: int = 6
    slot_dim: int = 64
    iterations: int = 3
    epsilon: float = 1e-8
    layer_norm: bool = True
    attn_mlp_hidden: int = 0         # 0 -> slot_dim
    decoder_hidden: int = 1024
    pos_encoding: str = "learned"    # learned | sinusoidal
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise UsageError(f"warmup_frac must be in [0, 1], got {self.warmup_frac}")
        if self.head_select not in ("random", "fused"):
            raise UsageError(f"head_select must be random or fused, got {self.head_select!r}")

    def masking(self) -> MaskingConfig:
        return MaskingConfig(self.mask_strategy, self.mask_percent, self.seed)


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _convert(name: str, raw: str, target_type: type):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw.strip("\"'")
    except ValueError as exc:
        raise UsageError(f"config key {name!r}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """key = value lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{source}:{lineno}: expected key = value")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)


def build_train_config(*mappings: dict[str, str]) -> TrainConfig:
    """Later mappings override earlier ones; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    types = {"lr_base": float, "warmup_frac": float, "decay_rate": float,
             "mask_percent": float, "epsilon": float}
    merged: dict[str, str] = {}
    for mapping in mappings:
        merged.update(mapping)
    kwargs = {}
    for key, raw in merged.items():
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        default = getattr(TrainConfig, key)
        target = types.get(key, type(default))
        kwargs[key] = _convert(key, str(raw), target)
    return TrainConfig(**kwargs)
