"""Class-agnostic localization metrics over patch-grid masks.

Predicted masks come from the decoder alphas by argmax per patch. CorLoc
counts an image as correct when any predicted box overlaps any ground
truth box with IoU above 0.5; masks are scored by Hungarian-matched mean
IoU (one-to-one) and mean best overlap (unconstrained).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .features import Box, GroundTruth, mask_box
from .fusion import hungarian


@dataclass
class SegmentationResult:
    grid_h: int
    grid_w: int
    labels: np.ndarray                 # (N,) winning slot per patch
    per_slot_masks: list[np.ndarray]   # K bool vectors partitioning patches
    boxes: dict[int, Box] = field(default_factory=dict)  # slot -> tight box


@dataclass
class ImageRecord:
    index: int
    corloc_hit: bool
    miou: float
    mbo: float


@dataclass
class EvalReport:
    corloc: float
    miou: float
    mbo: float
    per_image: list[ImageRecord]
    skipped: int = 0   # images without ground-truth masks


def masks_from_alphas(alphas: np.ndarray, grid_h: int,
                      grid_w: int) -> SegmentationResult:
    """Argmax alphas into a partition of the patch grid; ties take the
    lower slot index. Empty slots produce no box."""
    alphas = np.asarray(alphas, dtype=np.float64)
    k, n = alphas.shape
    if n != grid_h * grid_w:
        raise ContractError(
            f"alphas cover {n} patches but grid is {grid_h}x{grid_w}")
    labels = np.argmax(alphas, axis=0)
    masks = [labels == s for s in range(k)]
    boxes = {s: mask_box(m, grid_h, grid_w)
             for s, m in enumerate(masks) if m.any()}
    return SegmentationResult(grid_h, grid_w, labels, masks, boxes)


def segmentation_from_labels(labels: np.ndarray) -> SegmentationResult:
    """Rebuild a segmentation from a dumped (grid_h, grid_w) label grid.

    Every distinct label counts as one predicted mask; unlike ground-truth
    grids there is no background value here, 0 is a regular slot.
    """
    labels = np.asarray(labels, dtype=int)
    grid_h, grid_w = labels.shape
    flat = labels.reshape(-1)
    masks = [flat == lab for lab in sorted(set(flat.tolist()))]
    boxes = {s: mask_box(m, grid_h, grid_w) for s, m in enumerate(masks)}
    return SegmentationResult(grid_h, grid_w, flat, masks, boxes)


def box_iou(a: Box, b: Box) -> float:
    """IoU in inclusive patch-cell coordinates."""
    for box in (a, b):
        if box[0] > box[2] or box[1] > box[3]:
            raise ContractError(f"invalid box {box}")
    inter_h = min(a[2], b[2]) - max(a[0], b[0]) + 1
    inter_w = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if inter_h <= 0 or inter_w <= 0:
        return 0.0
    inter = inter_h * inter_w
    area = lambda box: (box[2] - box[0] + 1) * (box[3] - box[1] + 1)
    return inter / (area(a) + area(b) - inter)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def corloc(results: list[SegmentationResult], gts: list[GroundTruth]) -> float:
    """Fraction of images (with at least one GT box) where some predicted
    box exceeds 0.5 IoU with some ground-truth box."""
    if len(results) != len(gts):
        raise ContractError(
            f"{len(results)} predictions vs {len(gts)} ground truths")
    hits = 0
    considered = 0
    for res, gt in zip(results, gts):
        if not gt.boxes:
            continue
        considered += 1
        if _image_hit(res, gt):
            hits += 1
    return hits / considered if considered else 0.0


def _image_hit(res: SegmentationResult, gt: GroundTruth) -> bool:
    return any(box_iou(pb, gb) > 0.5
               for pb in res.boxes.values() for gb in gt.boxes)


def matched_mask_metrics(pred_masks: list[np.ndarray],
                         gt_masks: list[np.ndarray]) -> tuple[float, float]:
    """(mIoU, mBo) for one image.

    mIoU assigns ground-truth masks to predictions one-to-one by maximizing
    total IoU (zero-padded to square when counts differ) and averages the
    matched IoUs over ground-truth masks. mBo drops the one-to-one
    constraint: each ground-truth mask takes its best-overlapping
    prediction. mBo >= mIoU always.
    """
    n_gt = len(gt_masks)
    if n_gt == 0:
        raise ContractError("matched_mask_metrics needs at least one GT mask")
    n_pred = len(pred_masks)
    iou = np.zeros((n_gt, n_pred))
    for g, gm in enumerate(gt_masks):
        for p, pm in enumerate(pred_masks):
            iou[g, p] = mask_iou(gm, pm)
    side = max(n_gt, n_pred)
    padded = np.zeros((side, side))
    padded[:n_gt, :n_pred] = iou
    assignment = hungarian(padded, "maximize")
    miou = sum(padded[g, assignment.mapping[g]] for g in range(n_gt)) / n_gt
    mbo = float(iou.max(axis=1).mean()) if n_pred else 0.0
    return float(miou), mbo


def evaluate(results: list[SegmentationResult],
             gts: list[GroundTruth]) -> EvalReport:
    """Average per-image metrics over a dataset; images without ground
    truth are skipped and counted."""
    if len(results) != len(gts):
        raise ContractError(
            f"{len(results)} predictions vs {len(gts)} ground truths")
    records: list[ImageRecord] = []
    skipped = 0
    for i, (res, gt) in enumerate(zip(results, gts)):
        if not gt.instance_masks:
            skipped += 1
            continue
        miou, mbo = matched_mask_metrics(res.per_slot_masks, gt.instance_masks)
        records.append(ImageRecord(i, _image_hit(res, gt), miou, mbo))
    if records:
        cl = sum(r.corloc_hit for r in records) / len(records)
        miou = sum(r.miou for r in records) / len(records)
        mbo = sum(r.mbo for r in records) / len(records)
    else:
        cl = miou = mbo = 0.0
    return EvalReport(cl, miou, mbo, records, skipped)


def write_report_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "corloc_hit", "miou", "mbo"])
        for rec in report.per_image:
            writer.writerow([rec.index, int(rec.corloc_hit),
                             f"{rec.miou:.6f}", f"{rec.mbo:.6f}"])
        writer.writerow(["summary", f"{report.corloc:.6f}",
                         f"{report.miou:.6f}", f"{report.mbo:.6f}"])
