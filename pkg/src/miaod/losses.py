"""Detection, discrepancy and multiple-instance objectives.

All functions accept per-image arrays of shape (N, C) or batches of shape
(B, N, C). Scalar losses over a batch are the sum of the per-image losses,
which is how the training objectives aggregate over a set of images.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .detector import IGNORE, POSITIVE, AssignmentResult, ForwardOutput


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    clamp_eps: float = 1e-12
    instance_norm: str = "mean"  # "mean" or "sum" over instances inside l_dis

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.focal_gamma < 0:
            raise ValueError("focal gamma must be non-negative")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.instance_norm not in ("mean", "sum"):
            raise ValueError(f"instance_norm must be 'mean' or 'sum', not {self.instance_norm!r}")
        if not 0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _per_image_weights(flags: np.ndarray, select) -> np.ndarray:
    """Mask of selected anchors divided by max(1, #positives) of their image, shape (..., N, 1)."""
    flags = np.asarray(flags)
    npos = np.maximum(1, (flags == POSITIVE).sum(axis=-1, keepdims=True))
    return (select(flags) / npos)[..., None]


def _power_slope(base: np.ndarray, exponent: float) -> np.ndarray:
    """d/db of b**exponent, taken as 0 at b = 0 when exponent > 1."""
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = exponent * np.power(base, exponent - 1)
    return np.where(base == 0, 0.0, slope) if exponent > 1 else slope


def focal_loss(p, y_cls, flags, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    p, y = _t(p), _value(y_cls)
    if p.shape != y.shape or np.shape(flags) != p.shape[:-1]:
        raise ad.ShapeError(f"focal_loss: p {p.shape}, y {y.shape}, flags {np.shape(flags)}")
    w = _per_image_weights(flags, lambda f: (f != IGNORE).astype(np.float64))
    x = p.data
    q = 1.0 - x
    # logs clamp at CLAMP_EPS and pass no gradient where clamped, matching ad.log
    xc, qc = np.maximum(x, ad.CLAMP_EPS), np.maximum(q, ad.CLAMP_EPS)
    lx, lq = np.log(xc), np.log(qc)
    a_pos, a_neg = alpha * y * w, (1 - alpha) * (1.0 - y) * w
    with np.errstate(divide="ignore", invalid="ignore"):
        qg, xg = np.power(q, gamma), np.power(x, gamma)
        loss = -np.sum(a_pos * qg * lx + a_neg * xg * lq)

    def vjp(g):
        dq, dx = _power_slope(q, gamma), _power_slope(x, gamma)
        d_pos = -dq * lx + qg * np.where(x >= ad.CLAMP_EPS, 1.0 / xc, 0.0)
        d_neg = dx * lq - xg * np.where(q >= ad.CLAMP_EPS, 1.0 / qc, 0.0)
        return (-g * (a_pos * d_pos + a_neg * d_neg),)

    return ad.primitive("focal", loss, (p,), vjp)


def smooth_l1(pred, target, flags) -> Tensor:
    pred, target = _t(pred), _value(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"smooth_l1: {pred.shape} vs {target.shape}")
    w = _per_image_weights(flags, lambda f: (f == POSITIVE).astype(np.float64))
    d = pred - target
    small = np.abs(d.data) < 1.0
    quad = 0.5 * ad.power(d, 2)
    lin = ad.abs_(d) - 0.5
    per = quad * small.astype(np.float64) + lin * (~small).astype(np.float64)
    return ad.sum_(per * w)


def detection_loss(output: ForwardOutput, targets: AssignmentResult, cfg: LossConfig = LossConfig()) -> Tensor:
    a = cfg.focal_alpha
    g = cfg.focal_gamma
    fl1 = focal_loss(output.y_f1, targets.y_cls, targets.flags, a, g)
    fl2 = focal_loss(output.y_f2, targets.y_cls, targets.flags, a, g)
    reg = smooth_l1(output.y_fr, targets.y_loc, targets.flags)
    return fl1 + fl2 + reg


def _aggregate(u: Tensor, cfg: LossConfig) -> Tensor:
    per_image = ad.mean(u, axis=-1) if cfg.instance_norm == "mean" else ad.sum_(u, axis=-1)
    return ad.sum_(per_image)


def discrepancy(y_f1, y_f2, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor]:
    """Returns (l_dis, u) with u the per-instance L1 gap between classifiers."""
    y_f1, y_f2 = _t(y_f1), _t(y_f2)
    if y_f1.shape != y_f2.shape:
        raise ad.ShapeError(f"discrepancy: {y_f1.shape} vs {y_f2.shape}")
    u = ad.sum_(ad.abs_(y_f1 - y_f2), axis=-1)
    return _aggregate(u, cfg), u


def weighted_discrepancy(y_f1, y_f2, w, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor]:
    y_f1, y_f2, w = _t(y_f1), _t(y_f2), _t(w)
    if not (y_f1.shape == y_f2.shape == w.shape):
        raise ad.ShapeError(f"weighted_discrepancy: {y_f1.shape}, {y_f2.shape}, {w.shape}")
    if np.any(w.data < 0):
        raise ValueError("instance weights must be non-negative")
    u = ad.sum_(ad.abs_(w * (y_f1 - y_f2)), axis=-1)
    return _aggregate(u, cfg), u


def mil_image_score(y_fmil, y_f1, y_f2) -> Tensor:
    """Class softmax of the MIL scores times instance softmax of the mean classifier output."""
    y_fmil, y_f1, y_f2 = _t(y_fmil), _t(y_f1), _t(y_f2)
    if not (y_fmil.shape == y_f1.shape == y_f2.shape):
        raise ad.ShapeError("mil_image_score: shape mismatch")
    class_part = ad.softmax(y_fmil, axis=-1)
    instance_part = ad.softmax((y_f1 + y_f2) * 0.5, axis=-2)
    return class_part * instance_part


def image_cls_loss(score, y_image, cfg: LossConfig = LossConfig()) -> Tensor:
    score, y = _t(score), _value(y_image)
    if score.shape[:-2] + score.shape[-1:] != y.shape:
        raise ad.ShapeError(f"image_cls_loss: score {score.shape}, labels {y.shape}")
    eps = cfg.clamp_eps
    s = ad.clamp(ad.sum_(score, axis=-2), eps, 1.0 - eps)
    bce = y * ad.log(s) + (1.0 - y) * ad.log(1.0 - s)
    return ad.neg(ad.sum_(bce))


def pseudo_labels(y_f1, y_f2) -> np.ndarray:
    avg = (_value(y_f1) + _value(y_f2)) / 2.0
    return (avg.max(axis=-2) > 0.5).astype(np.float64)


# ---------------------------------------------------------------- objectives


@dataclass
class LabeledBatch:
    output: ForwardOutput
    targets: AssignmentResult  # batched arrays (B, N, ...)
    image_labels: np.ndarray  # (B, C), derived from instance labels


def stack_targets(targets: list[AssignmentResult]) -> AssignmentResult:
    return AssignmentResult(*(np.stack([getattr(t, f) for t in targets])
                              for f in ("y_cls", "y_loc", "flags", "matched_gt")))


def labeled_term(batch: LabeledBatch, cfg: LossConfig, image_loss: bool) -> Tensor:
    out = batch.output
    det = detection_loss(out, batch.targets, cfg)
    if not image_loss:
        return det
    score = mil_image_score(out.y_fmil, out.y_f1, out.y_f2)
    return det + image_cls_loss(score, batch.image_labels, cfg)


def unlabeled_discrepancy(out: ForwardOutput, cfg: LossConfig, reweight: bool,
                          unit_weights: bool = False) -> Tensor:
    if not reweight:
        return discrepancy(out.y_f1, out.y_f2, cfg)[0]
    if unit_weights:
        w = Tensor(np.ones(out.y_f1.shape))
    else:
        w = mil_image_score(out.y_fmil, out.y_f1, out.y_f2)
    return weighted_discrepancy(out.y_f1, out.y_f2, w, cfg)[0]


def objective_max(labeled: LabeledBatch, unlabeled: ForwardOutput | None, cfg: LossConfig,
                  reweight: bool, unit_weights: bool = False, image_loss: bool = True) -> Tensor:
    """Value minimised while the classifiers are pushed apart on unlabeled images."""
    lab = labeled_term(labeled, cfg, reweight and image_loss)
    if unlabeled is None or unlabeled.y_f1.shape[0] == 0:
        return lab
    dis = unlabeled_discrepancy(unlabeled, cfg, reweight, unit_weights)
    return lab - cfg.lam * dis


def objective_min(labeled: LabeledBatch, unlabeled: ForwardOutput | None, cfg: LossConfig,
                  reweight: bool, unit_weights: bool = False, image_loss: bool = True) -> Tensor:
    """Value minimised while the feature extractor pulls the classifiers together."""
    lab = labeled_term(labeled, cfg, reweight and image_loss)
    if unlabeled is None or unlabeled.y_f1.shape[0] == 0:
        return lab
    dis = unlabeled_discrepancy(unlabeled, cfg, reweight, unit_weights)
    total = lab + cfg.lam * dis
    if reweight and image_loss:
        pseudo = pseudo_labels(unlabeled.y_f1, unlabeled.y_f2)
        score = mil_image_score(unlabeled.y_fmil, unlabeled.y_f1, unlabeled.y_f2)
        total = total + image_cls_loss(score, pseudo, cfg)
    return total
