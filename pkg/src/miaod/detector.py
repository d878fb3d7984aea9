"""Desk-scale single-stage detector.

Every anchor is an instance. Its input is the 16x16 pixel window centred on the
anchor (zero padded at the border) plus a one-hot code of the anchor size; a
two-layer ReLU MLP ``g`` maps that to a feature vector shared by four heads:
the adversarial classifiers ``f1``/``f2`` (sigmoid), the box regressor ``fr``
and the MIL scorer ``fmil`` (raw scores).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
POS_IOU, NEG_IOU = 0.5, 0.4
MAX_LOG_SCALE = np.log(1000.0 / 8.0)

GROUPS = ("g", "f1", "f2", "fr", "fmil")


@dataclass(frozen=True)
class AnchorGrid:
    image_size: int
    stride: int
    sizes: tuple[float, ...]
    anchors: np.ndarray  # (N, 4) cx, cy, w, h

    @property
    def N(self) -> int:
        return len(self.anchors)

    @property
    def num_sizes(self) -> int:
        return len(self.sizes)

    @property
    def num_locations(self) -> int:
        return len(self.anchors) // len(self.sizes)

    def boxes(self) -> np.ndarray:
        return cxcywh_to_xyxy(self.anchors)


def build_anchors(image_size: int = 64, stride: int = 8, sizes=(8, 12, 16)) -> AnchorGrid:
    """Row-major grid of anchors; the size index varies fastest."""
    if stride <= 0 or image_size % stride:
        raise ValueError(f"stride {stride} does not divide image size {image_size}")
    if not sizes:
        raise ValueError("at least one anchor size is required")
    cells = image_size // stride
    centers = stride / 2.0 + stride * np.arange(cells)
    rows = [(cx, cy, s, s) for cy in centers for cx in centers for s in sizes]
    return AnchorGrid(image_size, stride, tuple(float(s) for s in sizes),
                      np.array(rows, dtype=np.float64))


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def compute_iou(box_a, box_b) -> float:
    return float(iou_matrix(np.asarray(box_a)[None], np.asarray(box_b)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


# ---------------------------------------------------------------- targets


@dataclass
class AssignmentResult:
    y_cls: np.ndarray  # (N, C)
    y_loc: np.ndarray  # (N, 4), zero for non-positives
    flags: np.ndarray  # (N,) POSITIVE / NEGATIVE / IGNORE
    matched_gt: np.ndarray  # (N,) gt index for positives, -1 elsewhere


def encode_boxes(gt_xyxy: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    gw = gt_xyxy[..., 2] - gt_xyxy[..., 0]
    gh = gt_xyxy[..., 3] - gt_xyxy[..., 1]
    gx = gt_xyxy[..., 0] + gw / 2
    gy = gt_xyxy[..., 1] + gh / 2
    ax, ay, aw, ah = (anchors[..., k] for k in range(4))
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    ax, ay, aw, ah = (anchors[..., k] for k in range(4))
    cx = ax + offsets[..., 0] * aw
    cy = ay + offsets[..., 1] * ah
    w = aw * np.exp(np.clip(offsets[..., 2], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    h = ah * np.exp(np.clip(offsets[..., 3], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    return cxcywh_to_xyxy(np.stack([cx, cy, w, h], axis=-1))


def assign_targets(grid: AnchorGrid, gt_boxes, gt_classes, num_classes: int) -> AssignmentResult:
    n = grid.N
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    y_cls = np.zeros((n, num_classes))
    y_loc = np.zeros((n, 4))
    flags = np.full(n, NEGATIVE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return AssignmentResult(y_cls, y_loc, flags, matched)

    iou = iou_matrix(grid.boxes(), gt_boxes)  # (N, M)
    best_gt = np.argmax(iou, axis=1)  # first maximum -> lowest gt index on ties
    best_iou = iou[np.arange(n), best_gt]
    flags[best_iou >= NEG_IOU] = IGNORE
    pos = best_iou >= POS_IOU
    flags[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    # forced matches: each gt claims its best anchor not already claimed by an earlier gt
    claimed = np.zeros(n, dtype=bool)
    for j in range(len(gt_boxes)):
        col = np.where(claimed, -1.0, iou[:, j])
        a = int(np.argmax(col))
        if claimed[a]:
            break  # more gt objects than anchors
        claimed[a] = True
        flags[a] = POSITIVE
        matched[a] = j

    pos_idx = np.flatnonzero(flags == POSITIVE)
    y_cls[pos_idx, gt_classes[matched[pos_idx]]] = 1.0
    y_loc[pos_idx] = encode_boxes(gt_boxes[matched[pos_idx]], grid.anchors[pos_idx])
    return AssignmentResult(y_cls, y_loc, flags, matched)


# ---------------------------------------------------------------- model


@dataclass
class DetectorModel:
    params: dict[str, Tensor]
    num_classes: int
    grid: AnchorGrid
    patch: int = 16
    hidden: int = 64
    input_shift: float = 0.1
    input_scale: float = 0.3
    _index: np.ndarray = field(default=None, repr=False, compare=False)

    def group(self, name: str) -> dict[str, Tensor]:
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group {name!r}")
        return {k: v for k, v in self.params.items() if k.split(".")[0] == name}

    def tensors(self, groups=GROUPS) -> list[Tensor]:
        return [t for name in groups for t in self.group(name).values()]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> DetectorModel:
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return DetectorModel(params, self.num_classes, self.grid, self.patch, self.hidden,
                             self.input_shift, self.input_scale, self._index)

    def patch_index(self) -> np.ndarray:
        if self._index is None:
            self._index = _patch_index(self.grid, self.patch)
        return self._index


def _patch_index(grid: AnchorGrid, patch: int) -> np.ndarray:
    """Flat indices into the padded image for each location's window."""
    pad = patch // 2
    side = grid.image_size + 2 * pad
    locs = grid.anchors[:: grid.num_sizes, :2]
    off = np.arange(patch)
    rows = []
    for cx, cy in locs:
        x0 = int(np.floor(cx)) - patch // 2 + pad
        y0 = int(np.floor(cy)) - patch // 2 + pad
        rows.append(((y0 + off)[:, None] * side + (x0 + off)[None, :]).reshape(-1))
    return np.array(rows)


def init_model(num_classes: int, grid: AnchorGrid | None = None, seed: int = 0,
               hidden: int = 64, patch: int = 16, prior: float = 0.01) -> DetectorModel:
    """He-initialised feature extractor; f1 and f2 get independent draws."""
    grid = grid or build_anchors()
    rng = np.random.default_rng(seed)
    d_in = patch * patch + grid.num_sizes
    bias_cls = -np.log((1 - prior) / prior)

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    raw = {
        "g.w1": normal((d_in, hidden), np.sqrt(2.0 / d_in)),
        "g.b1": np.zeros(hidden),
        "g.w2": normal((hidden, hidden), np.sqrt(2.0 / hidden)),
        "g.b2": np.zeros(hidden),
        "f1.w": normal((hidden, num_classes), 0.05),
        "f1.b": np.full(num_classes, bias_cls),
        "f2.w": normal((hidden, num_classes), 0.05),
        "f2.b": np.full(num_classes, bias_cls),
        "fr.w": normal((hidden, 4), 0.01),
        "fr.b": np.zeros(4),
        "fmil.w": normal((hidden, num_classes), 0.05),
        "fmil.b": np.zeros(num_classes),
    }
    params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
    return DetectorModel(params, num_classes, grid, patch, hidden)


def zero_model(num_classes: int, grid: AnchorGrid | None = None, **kw) -> DetectorModel:
    model = init_model(num_classes, grid, **kw)
    for t in model.params.values():
        t.data[...] = 0.0
    return model


def instance_inputs(model: DetectorModel, images: np.ndarray) -> np.ndarray:
    """(B, H, W) pixels -> (B*N, patch*patch + num_sizes) anchor inputs."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    grid = model.grid
    if images.shape[1:] != (grid.image_size, grid.image_size):
        raise ad.ShapeError(f"image shape {images.shape[1:]} does not match grid {grid.image_size}")
    pad = model.patch // 2
    padded = np.pad((images - model.input_shift) / model.input_scale, ((0, 0), (pad, pad), (pad, pad)))
    b = len(images)
    patches = padded.reshape(b, -1)[:, model.patch_index()]  # (B, L, P)
    a = grid.num_sizes
    patches = np.repeat(patches, a, axis=1)  # (B, L*A, P)
    onehot = np.tile(np.eye(a), (grid.num_locations, 1))
    onehot = np.broadcast_to(onehot, (b,) + onehot.shape)
    return np.concatenate([patches, onehot], axis=2).reshape(b * grid.N, -1)


@dataclass
class ForwardOutput:
    y_f1: Tensor  # (B, N, C) probabilities
    y_f2: Tensor
    y_fr: Tensor  # (B, N, 4)
    y_fmil: Tensor  # (B, N, C) raw scores
    features: Tensor  # (B, N, D)

    def image(self, b: int) -> ForwardOutput:
        """Plain-array view of one image's outputs (no gradient tracking)."""
        return ForwardOutput(*(Tensor(t.data[b]) for t in
                               (self.y_f1, self.y_f2, self.y_fr, self.y_fmil, self.features)))


def forward_batch(model: DetectorModel, images) -> ForwardOutput:
    p = model.params
    x = Tensor(instance_inputs(model, images))
    b = x.shape[0] // model.grid.N
    n, c = model.grid.N, model.num_classes
    h = ad.relu(ad.linear(x, p["g.w1"], p["g.b1"]))
    feat = ad.relu(ad.linear(h, p["g.w2"], p["g.b2"]))
    y1 = ad.sigmoid(ad.linear(feat, p["f1.w"], p["f1.b"]))
    y2 = ad.sigmoid(ad.linear(feat, p["f2.w"], p["f2.b"]))
    yr = ad.linear(feat, p["fr.w"], p["fr.b"])
    ym = ad.linear(feat, p["fmil.w"], p["fmil.b"])
    return ForwardOutput(ad.reshape(y1, (b, n, c)), ad.reshape(y2, (b, n, c)),
                         ad.reshape(yr, (b, n, 4)), ad.reshape(ym, (b, n, c)),
                         ad.reshape(feat, (b, n, model.hidden)))


def forward(model: DetectorModel, image) -> ForwardOutput:
    """Single image; outputs are (N, C), (N, C), (N, 4), (N, C)."""
    out = forward_batch(model, np.asarray(image)[None])
    n, c = model.grid.N, model.num_classes
    return ForwardOutput(ad.reshape(out.y_f1, (n, c)), ad.reshape(out.y_f2, (n, c)),
                         ad.reshape(out.y_fr, (n, 4)), ad.reshape(out.y_fmil, (n, c)),
                         ad.reshape(out.features, (n, model.hidden)))


def predict(model: DetectorModel, images, batch: int = 64) -> ForwardOutput:
    """Gradient-free batched forward returning (B, N, ...) tensors."""
    images = np.asarray(images)
    outs = []
    with ad.no_grad():
        for i in range(0, len(images), batch):
            outs.append(forward_batch(model, images[i:i + batch]))
    return ForwardOutput(*(Tensor(np.concatenate([getattr(o, f).data for o in outs]))
                           for f in ("y_f1", "y_f2", "y_fr", "y_fmil", "features")))


# ---------------------------------------------------------------- decoding


@dataclass(frozen=True)
class Detection:
    cls: int
    box: tuple[float, float, float, float]
    score: float


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    iou = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= iou[i] > iou_threshold
    return keep


def decode_and_nms(output: ForwardOutput, grid: AnchorGrid, score_threshold: float = 0.05,
                   iou_threshold: float = 0.5, max_detections: int = 100) -> list[Detection]:
    """Per-class thresholding and NMS on one image's (N, C) outputs."""
    if not (0 <= score_threshold <= 1 and 0 <= iou_threshold <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    p1, p2, reg = (np.asarray(getattr(t, "data", t)) for t in (output.y_f1, output.y_f2, output.y_fr))
    scores = (p1 + p2) / 2.0
    boxes = decode_boxes(reg, grid.anchors)
    dets: list[Detection] = []
    for c in range(scores.shape[1]):
        idx = np.flatnonzero(scores[:, c] > score_threshold)
        if idx.size == 0:
            continue
        for k in nms(boxes[idx], scores[idx, c], iou_threshold):
            i = idx[k]
            dets.append(Detection(c, tuple(float(v) for v in boxes[i]), float(scores[i, c])))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_detections]
