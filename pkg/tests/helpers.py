"""Shared test utilities: finite differences and tiny model builders."""

from __future__ import annotations

from typing import Callable

import numpy as np

from slotforge.attention import HeadBank
from slotforge.decoder import DecoderParams

FD_STEP = 1e-5


def fd_grad(f: Callable[[], float], arr: np.ndarray,
            step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of f() w.r.t. every element of arr,
    mutating arr in place and restoring it."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """Elementwise relative error with a floor against 0/0 blowups."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def tiny_bank(rng: np.random.Generator, h: int = 2, k: int = 2, d: int = 4,
              d_feats: int = 4, t: int = 3, **kw) -> HeadBank:
    return HeadBank(h=h, k_slots=k, d_slots=d, d_feats=d_feats, t_iters=t,
                    rng=rng, **kw)


def tiny_decoder(rng: np.random.Generator, n: int = 6, d: int = 4,
                 d_feats: int = 4, hidden: int = 8, **kw) -> DecoderParams:
    return DecoderParams(n_patches=n, d_slots=d, d_feats=d_feats,
                         hidden=hidden, rng=rng, **kw)
