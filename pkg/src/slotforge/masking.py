"""Patch masking: rank tokens by channel mean and zero out the top slice.

High-mean patches empirically sit on background, so dropping the top m%
leaves object patches for the grouping model. A uniform random strategy is
kept as a baseline. All functions are pure; ``CALL_COUNTS`` is a test hook
that lets pipeline tests assert inference never masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .features import FeatureMap

STRATEGIES = ("none", "random", "background")

# Test hook: incremented on every call, keyed by function name.
CALL_COUNTS = {"patch_means": 0, "select_background_indices": 0,
               "apply_mask": 0, "select_random_indices": 0}


def reset_call_counts() -> None:
    for key in CALL_COUNTS:
        CALL_COUNTS[key] = 0


@dataclass
class MaskingConfig:
    strategy: str = "background"
    m_percent: float = 70.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown masking strategy {self.strategy!r}")
        if not 0.0 <= self.m_percent <= 100.0:
            raise ContractError(
                f"m_percent must be in [0, 100], got {self.m_percent}")


@dataclass
class MaskReport:
    masked_indices: list[int]
    means: np.ndarray


def mask_count(n: int, m_percent: float) -> int:
    """Round-half-up of m/100 * N."""
    return int(np.floor(m_percent / 100.0 * n + 0.5))


def patch_means(fmap: FeatureMap) -> np.ndarray:
    """Per-patch mean over channels, the saliency proxy for ranking."""
    CALL_COUNTS["patch_means"] += 1
    return fmap.tokens.mean(axis=1)


def select_background_indices(means: np.ndarray, m_percent: float) -> list[int]:
    """Indices of the round(m/100*N) largest means.

    Ties break toward keeping the lower patch index unmasked: a stable
    ascending sort puts equal means in index order, and the masked set is
    the tail of that order.
    """
    CALL_COUNTS["select_background_indices"] += 1
    means = np.asarray(means, dtype=np.float64)
    count = mask_count(means.size, m_percent)
    if count == 0:
        return []
    order = np.argsort(means, kind="stable")
    return sorted(int(i) for i in order[means.size - count:])


def select_random_indices(n: int, m_percent: float, seed: int) -> list[int]:
    """Uniform sample without replacement of round(m/100*N) indices."""
    CALL_COUNTS["select_random_indices"] += 1
    count = mask_count(n, m_percent)
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


def apply_mask(fmap: FeatureMap, indices) -> FeatureMap:
    """Copy of the map with the given rows zeroed; the input is untouched."""
    CALL_COUNTS["apply_mask"] += 1
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= fmap.n_patches):
        raise ContractError(
            f"mask index out of range: valid [0, {fmap.n_patches}), "
            f"got {int(idx.min())}..{int(idx.max())}")
    tokens = fmap.tokens.copy()
    tokens[idx] = 0.0
    return FeatureMap(fmap.grid_h, fmap.grid_w, tokens, fmap.token_kind)


def masked_map(fmap: FeatureMap, cfg: MaskingConfig,
               random_seed: int | None = None) -> tuple[FeatureMap, MaskReport]:
    """Apply the configured strategy; returns the new map plus a report."""
    means = patch_means(fmap)
    if cfg.strategy == "none":
        indices: list[int] = []
    elif cfg.strategy == "background":
        indices = select_background_indices(means, cfg.m_percent)
    else:
        seed = cfg.seed if random_seed is None else random_seed
        indices = select_random_indices(fmap.n_patches, cfg.m_percent, seed)
    return apply_mask(fmap, indices), MaskReport(indices, means)


def format_report(report: MaskReport, m_percent: float) -> str:
    """Text dump for the mask-preview subcommand."""
    lines = [
        f"patches: {report.means.size}",
        f"m_percent: {m_percent:g}",
        f"masked ({len(report.masked_indices)}): "
        + " ".join(str(i) for i in report.masked_indices),
        "means:",
    ]
    lines += [f"  [{i:4d}] {m:.6f}" for i, m in enumerate(report.means)]
    return "\n".join(lines)
