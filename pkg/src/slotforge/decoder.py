"""Spatial broadcast decoding of slots into patch reconstructions.

Each slot is copied to every patch position, offset by a positional
encoding, and pushed through a shared 3-layer MLP whose last channel is an
alpha logit. Alphas softmax across slots per patch; the reconstruction is
the alpha-weighted sum of the per-slot feature predictions. Training
minimizes mean squared error against the original (unmasked) tokens, so a
masked input forces the model to inpaint what was dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .attention import SlotSet, _glorot
from .errors import ContractError
from .features import FeatureMap


def sinusoidal_encoding(n_patches: int, dim: int) -> np.ndarray:
    """Fixed 1-D sin/cos encoding over the flattened patch index."""
    pos = np.arange(n_patches)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(np.float64)


class DecoderParams:
    """Positional encodings plus the shared per-patch MLP.

    The MLP maps d_slots -> hidden -> hidden -> d_feats + 1 with ReLU
    between layers and a linear output; the extra channel is the alpha
    logit. ``pos_encoding="sinusoidal"`` freezes the positional table.
    """

    def __init__(self, n_patches: int, d_slots: int, d_feats: int,
                 hidden: int = 1024, pos_encoding: str = "learned",
                 rng: np.random.Generator | None = None):
        if pos_encoding not in ("learned", "sinusoidal"):
            raise ContractError(f"unknown pos_encoding {pos_encoding!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_patches = n_patches
        self.d_slots = d_slots
        self.d_feats = d_feats
        self.hidden = hidden
        self.pos_encoding = pos_encoding
        if pos_encoding == "learned":
            self.pos_embed = Tensor(rng.normal(0.0, 0.02, (n_patches, d_slots)))
        else:
            self.pos_embed = Tensor(sinusoidal_encoding(n_patches, d_slots))
        out = d_feats + 1
        self.w1 = Tensor(_glorot(rng, d_slots, hidden))
        self.b1 = Tensor(np.zeros(hidden))
        self.w2 = Tensor(_glorot(rng, hidden, hidden))
        self.b2 = Tensor(np.zeros(hidden))
        self.w3 = Tensor(_glorot(rng, hidden, out))
        self.b3 = Tensor(np.zeros(out))

    def parameters(self) -> list[Parameter]:
        return [
            Parameter(self.pos_embed, "decoder.pos",
                      trainable=self.pos_encoding == "learned"),
            Parameter(self.w1, "decoder.mlp.w1"),
            Parameter(self.b1, "decoder.mlp.b1"),
            Parameter(self.w2, "decoder.mlp.w2"),
            Parameter(self.b2, "decoder.mlp.b2"),
            Parameter(self.w3, "decoder.mlp.w3"),
            Parameter(self.b3, "decoder.mlp.b3"),
        ]


@dataclass
class DecodedScene:
    per_slot_feats: Tensor   # (K*N, d_feats), slot-major blocks of N rows
    alphas: Tensor           # (K, N), columns sum to 1 across slots
    reconstruction: Tensor   # (N, d_feats)
    k_slots: int
    n_patches: int

    def per_slot_array(self) -> np.ndarray:
        """View as (K, N, d_feats)."""
        return self.per_slot_feats.data.reshape(
            self.k_slots, self.n_patches, -1)


def decode(slots: SlotSet, params: DecoderParams,
           n_patches: int | None = None) -> DecodedScene:
    """Broadcast-decode one slot set into per-slot features and alphas."""
    n = params.n_patches if n_patches is None else n_patches
    if n != params.n_patches:
        raise ContractError(
            f"decoder built for {params.n_patches} patches, asked for {n}")
    k, d_slots = slots.slots.data.shape
    if d_slots != params.d_slots:
        raise ContractError(
            f"slot width {d_slots} != decoder d_slots {params.d_slots}")

    x = ad.repeat_rows(slots.slots, n)                # (K*N, d_slots)
    x = ad.add(x, ad.tile_rows(params.pos_embed, k))  # + positions per copy
    h = ad.relu(ad.add(ad.matmul(x, params.w1), params.b1))
    h = ad.relu(ad.add(ad.matmul(h, params.w2), params.b2))
    y = ad.add(ad.matmul(h, params.w3), params.b3)    # (K*N, d_feats + 1)

    feats = ad.slice_cols(y, 0, params.d_feats)
    alpha_logits = ad.reshape(ad.slice_cols(y, params.d_feats,
                                            params.d_feats + 1), (k, n))
    alphas = ad.softmax(alpha_logits, axis=0)
    weighted = ad.mul(feats, ad.reshape(alphas, (k * n, 1)))
    reconstruction = ad.sum_blocks(weighted, k)       # (N, d_feats)
    return DecodedScene(feats, alphas, reconstruction, k, n)


def reconstruction_loss(scene: DecodedScene, target: FeatureMap) -> Tensor:
    """Mean squared error against the original, unmasked tokens."""
    recon = scene.reconstruction
    if recon.data.shape != target.tokens.shape:
        raise ContractError(
            f"reconstruction {recon.data.shape} vs target "
            f"{target.tokens.shape}")
    diff = ad.sub(recon, target.tokens)
    return ad.mean_all(ad.mul(diff, diff))
