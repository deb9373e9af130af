"""Patch-token feature maps: file I/O, ground truth grids, synthetic scenes.

Feature file layout: 8-byte magic ``SLTK0001``, u32 grid_h, u32 grid_w,
u32 d_feats, u8 token kind (0=key, 1=query, 2=value), then grid_h*grid_w*
d_feats little-endian float32 values, row-major over (patch, channel).
float32 on disk, widened to float64 in memory.

Ground truth travels as a plain text grid: one integer label per patch
cell, row-major, whitespace separated, one line per grid row, 0 meaning
background. Each positive label is one object instance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError, DataFormatError

FEATURE_MAGIC = b"SLTK0001"

TOKEN_KINDS = ("key", "query", "value")

Box = tuple[int, int, int, int]  # (row_min, col_min, row_max, col_max) inclusive


@dataclass
class FeatureMap:
    """N x D grid of patch tokens for one image, N = grid_h * grid_w."""

    grid_h: int
    grid_w: int
    tokens: np.ndarray  # (N, d_feats) float64
    token_kind: str = "key"

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ContractError(f"tokens must be 2-D, got {self.tokens.shape}")
        n, d = self.tokens.shape
        if n != self.grid_h * self.grid_w:
            raise ContractError(
                f"token count {n} != grid {self.grid_h}x{self.grid_w}")
        if d <= 0:
            raise ContractError("d_feats must be positive")
        if self.token_kind not in TOKEN_KINDS:
            raise ContractError(f"unknown token kind {self.token_kind!r}")

    @property
    def n_patches(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_feats(self) -> int:
        return self.tokens.shape[1]


@dataclass
class GroundTruth:
    """Per-object binary masks over the patch grid plus their tight boxes."""

    grid_h: int
    grid_w: int
    instance_masks: list[np.ndarray] = field(default_factory=list)  # bool (N,)
    boxes: list[Box] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.instance_masks = [np.asarray(m, dtype=bool) for m in self.instance_masks]
        if len(self.boxes) != len(self.instance_masks):
            raise ContractError("one box per instance mask required")


def mask_box(mask: np.ndarray, grid_h: int, grid_w: int) -> Box:
    """Tight bounding box of a nonempty N-vector mask, inclusive coords."""
    grid = np.asarray(mask, dtype=bool).reshape(grid_h, grid_w)
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    if rows.size == 0:
        raise ContractError("mask_box called on an empty mask")
    return (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


# ---------------------------------------------------------------------------
# Feature file I/O
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IIIB")


def save_features(fmap: FeatureMap, path: str) -> None:
    """Inverse of load_features; payload narrowed to float32."""
    kind = TOKEN_KINDS.index(fmap.token_kind)
    payload = np.ascontiguousarray(fmap.tokens, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(_HEADER.pack(fmap.grid_h, fmap.grid_w, fmap.d_feats, kind))
        fh.write(payload.tobytes())


def load_features(path: str) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic at byte 0, expected {FEATURE_MAGIC!r}")
    off = len(FEATURE_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise DataFormatError(
            f"{path}: truncated header at byte {off}: need {_HEADER.size} "
            f"bytes, {len(blob) - off} found")
    grid_h, grid_w, d_feats, kind = _HEADER.unpack_from(blob, off)
    off += _HEADER.size
    if kind >= len(TOKEN_KINDS):
        raise DataFormatError(
            f"{path}: unknown token kind {kind} at byte {off - 1}")
    expected = grid_h * grid_w * d_feats * 4
    actual = len(blob) - off
    if actual != expected:
        raise DataFormatError(
            f"{path}: payload at byte {off} has {actual} bytes, "
            f"expected {expected}")
    tokens = np.frombuffer(blob, dtype="<f4", offset=off).astype(np.float64)
    return FeatureMap(grid_h, grid_w, tokens.reshape(grid_h * grid_w, d_feats),
                      TOKEN_KINDS[kind])


# ---------------------------------------------------------------------------
# Ground-truth grid I/O
# ---------------------------------------------------------------------------

def labels_to_ground_truth(labels: np.ndarray) -> GroundTruth:
    """Build masks/boxes from a (grid_h, grid_w) integer label grid."""
    labels = np.asarray(labels, dtype=int)
    grid_h, grid_w = labels.shape
    flat = labels.reshape(-1)
    masks: list[np.ndarray] = []
    boxes: list[Box] = []
    for lab in sorted(set(flat.tolist()) - {0}):
        mask = flat == lab
        masks.append(mask)
        boxes.append(mask_box(mask, grid_h, grid_w))
    return GroundTruth(grid_h, grid_w, masks, boxes)


def save_label_grid(labels: np.ndarray, path: str) -> None:
    labels = np.asarray(labels, dtype=int)
    with open(path, "w", encoding="utf-8") as fh:
        for row in labels:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_label_grid(path: str) -> np.ndarray:
    rows: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append([int(tok) for tok in line.split()])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path}: empty label grid")
    width = len(rows[0])
    for i, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DataFormatError(
                f"{path}:{i}: ragged row, {len(row)} labels vs {width}")
    return np.asarray(rows, dtype=int)


def load_ground_truth(path: str) -> GroundTruth:
    return labels_to_ground_truth(load_label_grid(path))


def save_ground_truth(gt: GroundTruth, path: str) -> None:
    labels = np.zeros(gt.grid_h * gt.grid_w, dtype=int)
    for i, mask in enumerate(gt.instance_masks, start=1):
        labels[mask] = i
    save_label_grid(labels.reshape(gt.grid_h, gt.grid_w), path)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    """Recipe for a random scene with known disjoint rectangular objects.

    background_mean must exceed object_mean_range's top so that mean-ranked
    masking lands on background patches.
    """

    grid_h: int = 8
    grid_w: int = 8
    n_objects: int = 2
    d_feats: int = 16
    background_mean: float = 2.0
    object_mean_range: tuple[float, float] = (0.0, 0.5)
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.object_mean_range
        if lo > hi:
            raise ContractError("object_mean_range must be (lo, hi) with lo <= hi")
        if self.background_mean <= hi:
            raise ContractError(
                "background_mean must exceed object_mean_range.hi "
                f"({self.background_mean} <= {hi})")


_PLACEMENT_RETRIES = 200
# Per-channel spread of each object's prototype around its mean. Residuals
# are orthogonalized against the all-ones direction and earlier prototypes
# so objects get reliably distinct feature directions at any seed.
_PROTOTYPE_STD = 1.0


def _object_prototypes(rng: np.random.Generator, count: int, d: int,
                       means: list[float]) -> list[np.ndarray]:
    basis = [np.ones(d) / np.sqrt(d)]
    protos = []
    for mean in means[:count]:
        g = rng.standard_normal(d)
        for b in basis:
            g -= (g @ b) * b
        norm = np.linalg.norm(g)
        if norm > 1e-12:  # orthogonal directions exhausted only when count >= d
            g /= norm
            basis.append(g)
        else:
            g = rng.standard_normal(d)
            g /= np.linalg.norm(g)
        protos.append(mean + _PROTOTYPE_STD * np.sqrt(d) * g)
    return protos


def _place_rectangles(spec: SyntheticSceneSpec,
                      rng: np.random.Generator) -> list[Box]:
    """Disjoint axis-aligned rectangles; side lengths span 2..grid/2-ish."""
    boxes: list[Box] = []
    occupied = np.zeros((spec.grid_h, spec.grid_w), dtype=bool)
    side_lo = max(1, min(2, spec.grid_h, spec.grid_w))
    for _ in range(spec.n_objects):
        placed = False
        for _attempt in range(_PLACEMENT_RETRIES):
            h = int(rng.integers(side_lo, max(side_lo, spec.grid_h // 2) + 1))
            w = int(rng.integers(side_lo, max(side_lo, spec.grid_w // 2) + 1))
            if h > spec.grid_h or w > spec.grid_w:
                continue
            r = int(rng.integers(0, spec.grid_h - h + 1))
            c = int(rng.integers(0, spec.grid_w - w + 1))
            if occupied[r:r + h, c:c + w].any():
                continue
            occupied[r:r + h, c:c + w] = True
            boxes.append((r, c, r + h - 1, c + w - 1))
            placed = True
            break
        if not placed:
            raise CapacityError(
                f"could not place {spec.n_objects} disjoint objects in a "
                f"{spec.grid_h}x{spec.grid_w} grid after "
                f"{_PLACEMENT_RETRIES} attempts")
    return boxes


def generate_scene(spec: SyntheticSceneSpec) -> tuple[FeatureMap, GroundTruth]:
    """Deterministic synthetic scene: background tokens cluster near a high
    constant vector, each object around its own low-mean prototype."""
    rng = np.random.default_rng(spec.seed)
    boxes = _place_rectangles(spec, rng)
    n = spec.grid_h * spec.grid_w
    tokens = rng.normal(spec.background_mean, spec.noise_std, size=(n, spec.d_feats))
    labels = np.zeros((spec.grid_h, spec.grid_w), dtype=int)
    lo, hi = spec.object_mean_range
    means = [float(rng.uniform(lo, hi)) for _ in boxes]
    protos = _object_prototypes(rng, len(boxes), spec.d_feats, means)
    for i, (r0, c0, r1, c1) in enumerate(boxes, start=1):
        labels[r0:r1 + 1, c0:c1 + 1] = i
        idx = np.flatnonzero(labels.reshape(-1) == i)
        tokens[idx] = protos[i - 1] + rng.normal(
            0.0, spec.noise_std, size=(idx.size, spec.d_feats))
    fmap = FeatureMap(spec.grid_h, spec.grid_w, tokens)
    return fmap, labels_to_ground_truth(labels)
