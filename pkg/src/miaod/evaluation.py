"""Detection metrics, the selected-true-positive statistic and uncertainty heatmaps."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .detector import Detection, DetectorModel, decode_and_nms, iou_matrix, predict
from .losses import discrepancy, mil_image_score, weighted_discrepancy
from .synthdata import ImageSample, encode_pgm


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    cls: int
    box: tuple[float, float, float, float]
    score: float


@dataclass
class CycleMetrics:
    cycle: int
    labeled_fraction: float
    per_class_ap: list[float]
    mAP: float
    mean_selected_uncertainty: float = float("nan")
    tp_selected: int = 0
    losses: dict[str, float] = field(default_factory=dict)


def average_precision(detections, gts: dict[str, np.ndarray], iou_threshold: float = 0.5,
                      use_07_metric: bool = False) -> float:
    """VOC-style AP for one class.

    ``detections`` is a sequence of (image_id, box, score) ordered by descending
    score; ``gts`` maps image id to an (M, 4) array of that class's boxes. Each
    gt can be matched once; a detection hitting an already-matched gt is a
    false positive.
    """
    npos = sum(len(np.asarray(b).reshape(-1, 4)) for b in gts.values())
    if npos == 0 or len(detections) == 0:
        return 0.0
    used = {k: np.zeros(len(np.asarray(v).reshape(-1, 4)), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(detections))
    for d, (image_id, box, _score) in enumerate(detections):
        boxes = np.asarray(gts.get(image_id, np.zeros((0, 4)))).reshape(-1, 4)
        if len(boxes) == 0:
            continue
        ious = iou_matrix(np.asarray(box)[None], boxes)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold and not used[image_id][j]:
            used[image_id][j] = True
            tp[d] = 1.0
    if use_07_metric:
        ctp = np.cumsum(tp)
        recall = ctp / npos
        precision = ctp / np.arange(1, len(tp) + 1)
        ap = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            p = precision[recall >= t].max() if np.any(recall >= t) else 0.0
            ap += p / 11.0
        return float(ap)
    # All-point interpolation: each true positive adds 1/npos recall at the best
    # precision reached at or after its rank. Counts are integers, so the area is
    # accumulated as an exact fraction and rounded once.
    hits = tp.astype(bool)
    ctp = np.cumsum(hits)
    best = Fraction(0)
    area = Fraction(0)
    for rank in range(len(hits) - 1, -1, -1):
        best = max(best, Fraction(int(ctp[rank]), rank + 1))
        if hits[rank]:
            area += best
    return float(area / npos)


def map_from_detections(dets: dict[str, list[Detection]], samples: list[ImageSample],
                        num_classes: int, iou_threshold: float = 0.5) -> tuple[list[float], float]:
    aps = []
    for c in range(num_classes):
        gts = {s.id: s.gt_boxes[s.gt_classes == c] for s in samples}
        recs = [(sid, d.box, d.score) for sid in sorted(dets) for d in dets[sid] if d.cls == c]
        recs.sort(key=lambda r: -r[2])  # stable: ties keep image order
        aps.append(average_precision(recs, gts, iou_threshold))
    return aps, float(np.mean(aps))


def detect(model: DetectorModel, samples: list[ImageSample], score_threshold: float = 0.05,
           nms_iou: float = 0.5) -> dict[str, list[Detection]]:
    out = predict(model, np.stack([s.pixels for s in samples]))
    return {s.id: decode_and_nms(out.image(b), model.grid, score_threshold, nms_iou)
            for b, s in enumerate(samples)}


def evaluate_map(model: DetectorModel, test_set: list[ImageSample], score_threshold: float = 0.05,
                 iou_threshold: float = 0.5) -> tuple[list[float], float]:
    """Per-class AP and their mean over the test images."""
    dets = detect(model, test_set, score_threshold)
    return map_from_detections(dets, test_set, model.num_classes, iou_threshold)


def top_k_indices(u: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties resolve to the lower index."""
    k = min(max(1, k), len(u))
    return np.argsort(-u, kind="stable")[:k]


def count_tp_topk(u: np.ndarray, anchor_boxes: np.ndarray, gt_boxes: np.ndarray, k: int,
                  iou_threshold: float = 0.5) -> int:
    gt_boxes = np.asarray(gt_boxes).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return 0
    top = top_k_indices(u, k)
    ious = iou_matrix(anchor_boxes[top], gt_boxes)
    return int(np.sum(ious.max(axis=1) >= iou_threshold))


def tp_selected(model: DetectorModel, selected: list[ImageSample], k: int,
                iou_threshold: float = 0.5) -> int:
    """Among each selected image's k most uncertain anchors, count those covering an object."""
    if not selected:
        return 0
    out = predict(model, np.stack([s.pixels for s in selected]))
    u = discrepancy(out.y_f1, out.y_f2)[1].data
    boxes = model.grid.boxes()
    return sum(count_tp_topk(u[b], boxes, s.gt_boxes, k, iou_threshold) for b, s in enumerate(selected))


# ---------------------------------------------------------------- heatmaps


def accumulate_footprints(values: np.ndarray, anchor_boxes: np.ndarray, size: int) -> np.ndarray:
    heat = np.zeros((size, size))
    for v, (x0, y0, x1, y1) in zip(values, anchor_boxes):
        xa, ya = max(0, int(np.floor(x0))), max(0, int(np.floor(y0)))
        xb, yb = min(size, int(np.ceil(x1))), min(size, int(np.ceil(y1)))
        heat[ya:yb, xa:xb] += v
    return heat


def normalize_8bit(heat: np.ndarray) -> np.ndarray:
    lo, hi = float(heat.min()), float(heat.max())
    if hi - lo <= 0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def heatmaps(model: DetectorModel, image: np.ndarray, weighted: bool,
             unit_weights: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Raw (uncertainty, classification-score) footprint sums for one image."""
    out = predict(model, np.asarray(image)[None])
    y1, y2, ym = out.y_f1.data[0], out.y_f2.data[0], out.y_fmil.data[0]
    score = mil_image_score(ym, y1, y2).data
    if weighted:
        w = np.ones_like(score) if unit_weights else score
        u = weighted_discrepancy(y1, y2, w)[1].data
    else:
        u = discrepancy(y1, y2)[1].data
    boxes = model.grid.boxes()
    size = model.grid.image_size
    return accumulate_footprints(u, boxes, size), accumulate_footprints(score.sum(axis=1), boxes, size)


def dump_heatmap(model: DetectorModel, image: np.ndarray, path, weighted: bool = False,
                 unit_weights: bool = False) -> tuple[Path, Path]:
    """Write the uncertainty heatmap to ``path`` and the score map next to it (``*_cls.pgm``)."""
    path = Path(path)
    unc, cls = heatmaps(model, image, weighted, unit_weights)
    cls_path = path.with_name(path.stem + "_cls.pgm")
    path.write_bytes(encode_pgm(normalize_8bit(unc)))
    cls_path.write_bytes(encode_pgm(normalize_8bit(cls)))
    return path, cls_path
