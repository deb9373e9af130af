"""Inference: all heads, fusion, decode, masks. Never masks the input."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import HeadBank, SlotSet, evaluate_attention, run_all_heads
from .decoder import DecodedScene, DecoderParams, decode
from .errors import ContractError
from .features import FeatureMap
from .fusion import fuse
from .metrics import SegmentationResult, masks_from_alphas


@dataclass
class InferenceResult:
    segmentation: SegmentationResult
    fused: SlotSet
    scene: DecodedScene
    reference: int


def infer_features(fmap: FeatureMap, bank: HeadBank, decoder: DecoderParams,
                   seed: int = 0, metric: str = "cosine",
                   matcher: str = "hungarian",
                   reference: int | str = "random",
                   heads: int | None = None,
                   mask_source: str = "alphas") -> InferenceResult:
    """Segment one feature map with the trained model.

    Runs every head on the raw (unmasked) tokens, fuses the slot sets onto
    a reference head, decodes the fused slots, and reads masks off the
    decoder alphas (or, optionally, the final attention weights of the
    fused slots under the reference head's query projection).
    """
    if fmap.d_feats != bank.d_feats:
        raise ContractError(
            f"feature width {fmap.d_feats} does not match checkpoint "
            f"d_feats {bank.d_feats}")
    if fmap.n_patches != decoder.n_patches:
        raise ContractError(
            f"feature map has {fmap.n_patches} patches, decoder was built "
            f"for {decoder.n_patches}")
    if mask_source not in ("alphas", "attention"):
        raise ContractError(f"unknown mask source {mask_source!r}")

    rng = np.random.default_rng(seed)
    results = run_all_heads(fmap, bank, rng)
    use = bank.h if heads is None else heads
    if not 1 <= use <= bank.h:
        raise ContractError(f"--heads must be in [1, {bank.h}], got {use}")
    slot_sets = [s for s, _ in results[:use]]

    if reference == "random":
        ref = int(rng.integers(use))
    else:
        ref = int(reference)
        if not 0 <= ref < use:
            raise ContractError(
                f"reference head {ref} out of range for {use} heads")
    fused = fuse(slot_sets, ref, metric, matcher)
    scene = decode(fused, decoder)

    if mask_source == "alphas":
        alphas = scene.alphas.data
    else:
        feats_k, feats_v = bank.project(fmap)
        state = evaluate_attention(feats_k, feats_v, fused, bank,
                                   slot_sets[ref].head_index)
        alphas = state.weights.data.T  # (K, N)
    seg = masks_from_alphas(alphas, fmap.grid_h, fmap.grid_w)
    return InferenceResult(seg, fused, scene, ref)
