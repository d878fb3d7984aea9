"""Pool management, three-phase training and image selection for one active-learning run."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .detector import (
    AssignmentResult,
    DetectorModel,
    assign_targets,
    build_anchors,
    forward_batch,
    init_model,
    predict,
)
from .evaluation import CycleMetrics, evaluate_map, top_k_indices, tp_selected
from .losses import (
    LabeledBatch,
    LossConfig,
    discrepancy,
    labeled_term,
    mil_image_score,
    objective_max,
    objective_min,
    stack_targets,
    weighted_discrepancy,
)
from .synthdata import ImageSample

log = logging.getLogger(__name__)

STRATEGIES = ("random", "entropy", "mean_unc", "max_unc", "coreset", "miaod_iul", "miaod_iur")
ADVERSARIAL = ("mean_unc", "max_unc", "miaod_iul", "miaod_iur")
UNCERTAINTY_MODE = {"mean_unc": "mean", "max_unc": "max", "miaod_iul": "topk", "miaod_iur": "topk"}


class PoolExhausted(RuntimeError):
    pass


class TrainingFault(RuntimeError):
    """A numeric fault during training, tagged with where it happened."""

    def __init__(self, phase: str, cycle: int, epoch: int, cause: Exception):
        self.phase, self.cycle, self.epoch = phase, cycle, epoch
        super().__init__(f"{phase} failed at cycle {cycle}, epoch {epoch}: {cause}")


@dataclass(frozen=True)
class CycleConfig:
    init_fraction: float = 0.10
    step_fraction: float = 0.05
    num_cycles: int = 5
    epochs_label_set: int = 10
    epochs_max: int = 2
    epochs_min: int = 2
    maxmin_repeats: int = 3
    learning_rate: float = 0.01
    adversarial_lr: float = 0.001
    lr_decay_at: float = 0.8
    lr_decay: float = 0.1
    momentum: float = 0.9
    grad_clip: float = 3.0
    batch_size: int = 8
    k: int = 20
    strategy: str = "miaod_iur"
    weighted_selection: bool = False
    seed: int = 0
    hidden: int = 64
    stride: int = 8
    anchor_sizes: tuple[int, ...] = (8, 12, 16)
    score_threshold: float = 0.05
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        object.__setattr__(self, "anchor_sizes", tuple(self.anchor_sizes))
        if not (0 < self.init_fraction <= 1 and 0 < self.step_fraction <= 1):
            raise ValueError("fractions must lie in (0, 1]")
        if self.init_fraction + self.num_cycles * self.step_fraction > 1 + 1e-12:
            raise ValueError("init_fraction + num_cycles * step_fraction exceeds 1")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.num_cycles < 1 or self.batch_size < 1 or self.maxmin_repeats < 0:
            raise ValueError("num_cycles and batch_size must be positive, maxmin_repeats non-negative")
        if min(self.epochs_label_set, self.epochs_max, self.epochs_min) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative (0 disables clipping)")
        if self.learning_rate <= 0 or self.adversarial_lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rates must be positive and momentum in [0, 1)")

    @property
    def lam(self) -> float:
        return self.loss.lam

    @property
    def reweight(self) -> bool:
        return self.strategy == "miaod_iur"


# ---------------------------------------------------------------- data


class ImageBank:
    """Stacked pixels and cached anchor targets for a list of samples."""

    def __init__(self, samples: list[ImageSample], num_classes: int, grid=None):
        self.samples = samples
        self.num_classes = num_classes
        self.grid = grid
        self.index = {s.id: i for i, s in enumerate(samples)}
        if len(self.index) != len(samples):
            raise ValueError("duplicate sample ids")
        self.pixels = np.stack([s.pixels for s in samples]) if samples else np.zeros((0, 0, 0))
        self.image_labels = np.stack([s.image_labels for s in samples]) if samples else None
        self._targets: dict[int, AssignmentResult] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def positions(self, ids: Iterable[str]) -> np.ndarray:
        return np.array([self.index[i] for i in ids], dtype=np.intp)

    def targets(self, pos: np.ndarray) -> AssignmentResult:
        out = []
        for p in pos:
            p = int(p)
            if p not in self._targets:
                s = self.samples[p]
                self._targets[p] = assign_targets(self.grid, s.gt_boxes, s.gt_classes, self.num_classes)
            out.append(self._targets[p])
        return stack_targets(out)


# ---------------------------------------------------------------- pool


@dataclass
class PoolState:
    all_ids: tuple[str, ...]
    labeled: set[str]
    unlabeled: set[str]
    cycle: int = 0
    history: list[dict] = field(default_factory=list)

    def check(self) -> None:
        if self.labeled & self.unlabeled:
            raise AssertionError("labeled and unlabeled pools overlap")
        if self.labeled | self.unlabeled != set(self.all_ids):
            raise AssertionError("pool lost or gained ids")

    def labeled_sorted(self) -> list[str]:
        return sorted(self.labeled)

    def unlabeled_sorted(self) -> list[str]:
        return sorted(self.unlabeled)


def budget(n: int, fraction: float) -> int:
    return int(round(n * fraction))


def init_pool(dataset: list[ImageSample], cfg: CycleConfig) -> PoolState:
    if not dataset:
        raise ValueError("dataset is empty")
    ids = tuple(sorted(s.id for s in dataset))
    count = budget(len(ids), cfg.init_fraction)
    if count == 0:
        raise ValueError(f"init_fraction {cfg.init_fraction} labels no images out of {len(ids)}")
    rng = np.random.default_rng([cfg.seed, 101])
    chosen = {ids[i] for i in rng.choice(len(ids), size=count, replace=False)}
    return PoolState(ids, chosen, set(ids) - chosen)


# ---------------------------------------------------------------- training


class SGD:
    """Momentum SGD over a fixed list of parameters."""

    def __init__(self, params: list[ad.Tensor], lr: float, momentum: float, clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        scale = 1.0
        if self.clip > 0:
            norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None))
            if norm > self.clip:
                scale = self.clip / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += scale * p.grad
            p.data -= self.lr * v


def _freeze_to(model: DetectorModel, groups: tuple[str, ...]) -> list[ad.Tensor]:
    trainable = []
    for name in ("g", "f1", "f2", "fr", "fmil"):
        for t in model.group(name).values():
            t.requires_grad = name in groups
            t.grad = None
            if name in groups:
                trainable.append(t)
    return trainable


def _release(model: DetectorModel) -> None:
    for t in model.params.values():
        t.requires_grad = True
        t.grad = None


def _batch_rng(cfg: CycleConfig, cycle: int, phase: str, epoch: int) -> np.random.Generator:
    code = sum(ord(ch) * 31 ** i for i, ch in enumerate(phase)) % (2 ** 31)
    return np.random.default_rng([cfg.seed, cycle, code, epoch])


def _labeled_batch(model: DetectorModel, bank: ImageBank, pos: np.ndarray) -> LabeledBatch:
    out = forward_batch(model, bank.pixels[pos])
    return LabeledBatch(out, bank.targets(pos), bank.image_labels[pos])


def _run_epochs(model: DetectorModel, bank: ImageBank, labeled: np.ndarray, unlabeled: np.ndarray | None,
                groups: tuple[str, ...], loss_fn: Callable, epochs: int, lr_at: Callable[[int], float],
                cfg: CycleConfig, cycle: int, phase: str) -> list[float]:
    """Mini-batch descent on ``groups``; returns the mean loss of each epoch."""
    trainable = _freeze_to(model, groups)
    opt = SGD(trainable, lr_at(0), cfg.momentum, cfg.grad_clip)
    bs = cfg.batch_size
    history = []
    try:
        for epoch in range(epochs):
            opt.lr = lr_at(epoch)
            rng = _batch_rng(cfg, cycle, phase, epoch)
            order = labeled[rng.permutation(len(labeled))]
            u_order = unlabeled[rng.permutation(len(unlabeled))] if unlabeled is not None and len(unlabeled) else None
            total = 0.0
            nb = math.ceil(len(order) / bs)
            for b in range(nb):
                lab_pos = order[b * bs:(b + 1) * bs]
                u_pos = None
                if u_order is not None:
                    u_pos = np.take(u_order, np.arange(b * bs, b * bs + bs), mode="wrap")
                try:
                    with ad.Tape() as tape:
                        lab = _labeled_batch(model, bank, lab_pos)
                        unl = forward_batch(model, bank.pixels[u_pos]) if u_pos is not None else None
                        loss = loss_fn(lab, unl)
                        # step on the per-image mean; the objectives themselves are sums
                        step_loss = loss * (1.0 / len(lab_pos))
                    tape.backward(step_loss)
                except ad.NumericFault as exc:
                    raise TrainingFault(phase, cycle, epoch, exc) from exc
                opt.step()
                for t in trainable:
                    t.grad = None
                tape.clear()
                total += float(step_loss.data)
            history.append(total / max(nb, 1))
    finally:
        _release(model)
    return history


def _lr_schedule(cfg: CycleConfig) -> Callable[[int], float]:
    cut = int(math.ceil(cfg.lr_decay_at * cfg.epochs_label_set))
    return lambda e: cfg.learning_rate * (cfg.lr_decay if e >= cut else 1.0)


def train_label_set(model: DetectorModel, bank: ImageBank, labeled_ids, cfg: CycleConfig,
                    with_mil: bool, cycle: int = 0) -> tuple[DetectorModel, list[float]]:
    """Fit all parameters to the labeled images; returns the trained copy and per-epoch losses."""
    labeled = bank.positions(sorted(labeled_ids))
    if len(labeled) == 0:
        raise ValueError("labeled set is empty")
    model = model.copy()
    groups = ("g", "f1", "f2", "fr", "fmil") if with_mil else ("g", "f1", "f2", "fr")

    def loss_fn(lab, _unl):
        return labeled_term(lab, cfg.loss, with_mil)

    hist = _run_epochs(model, bank, labeled, None, groups, loss_fn, cfg.epochs_label_set,
                       _lr_schedule(cfg), cfg, cycle, "label_set")
    return model, hist


def max_step(model: DetectorModel, bank: ImageBank, labeled_ids, unlabeled_ids, cfg: CycleConfig,
             reweight: bool, cycle: int = 0, repeat: int = 0) -> DetectorModel:
    """Push the classifiers apart on unlabeled images with the feature extractor frozen."""
    model = model.copy()
    groups = ("f1", "f2", "fr", "fmil") if reweight else ("f1", "f2", "fr")

    def loss_fn(lab, unl):
        return objective_max(lab, unl, cfg.loss, reweight)

    _run_epochs(model, bank, bank.positions(sorted(labeled_ids)), bank.positions(sorted(unlabeled_ids)),
                groups, loss_fn, cfg.epochs_max, lambda e: cfg.adversarial_lr, cfg, cycle, f"max{repeat}")
    return model


def min_step(model: DetectorModel, bank: ImageBank, labeled_ids, unlabeled_ids, cfg: CycleConfig,
             reweight: bool, cycle: int = 0, repeat: int = 0) -> DetectorModel:
    """Pull the classifiers together by training the feature extractor; f1, f2 and fr stay fixed."""
    model = model.copy()
    groups = ("g", "fmil") if reweight else ("g",)

    def loss_fn(lab, unl):
        return objective_min(lab, unl, cfg.loss, reweight)

    _run_epochs(model, bank, bank.positions(sorted(labeled_ids)), bank.positions(sorted(unlabeled_ids)),
                groups, loss_fn, cfg.epochs_min, lambda e: cfg.adversarial_lr, cfg, cycle, f"min{repeat}")
    return model


# ---------------------------------------------------------------- scoring


def instance_uncertainty(model: DetectorModel, pixels: np.ndarray, weighted: bool = False) -> np.ndarray:
    """(B, N) per-instance discrepancies for a stack of images."""
    out = predict(model, pixels)
    if weighted:
        w = mil_image_score(out.y_fmil, out.y_f1, out.y_f2)
        return weighted_discrepancy(out.y_f1, out.y_f2, w)[1].data
    return discrepancy(out.y_f1, out.y_f2)[1].data


def aggregate_uncertainty(u: np.ndarray, mode: str, k: int) -> np.ndarray:
    """Image scores from (B, N) instance uncertainties: mean of the k largest per row."""
    u = np.atleast_2d(u)
    n = u.shape[1]
    if mode == "mean":
        k = n
    elif mode == "max":
        k = 1
    elif mode != "topk":
        raise ValueError(f"unknown uncertainty mode {mode!r}")
    k = min(max(1, k), n)
    if k == n:
        return u.mean(axis=1)
    top = -np.sort(-u, axis=1)[:, :k]
    return top.mean(axis=1)


def image_uncertainty(model: DetectorModel, image: np.ndarray, cfg: CycleConfig, mode: str = "topk") -> float:
    u = instance_uncertainty(model, np.asarray(image)[None], cfg.weighted_selection)
    return float(aggregate_uncertainty(u, mode, cfg.k)[0])


def binary_entropy(p: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    p = np.clip(p, eps, 1 - eps)
    return -(p * np.log(p) + (1 - p) * np.log(1 - p))


def entropy_scores(model: DetectorModel, pixels: np.ndarray) -> np.ndarray:
    out = predict(model, pixels)
    p = (out.y_f1.data + out.y_f2.data) / 2.0
    return binary_entropy(p).sum(axis=2).mean(axis=1)


def random_score(seed: int, cycle: int, image_id: str) -> float:
    key = [seed, cycle] + list(image_id.encode())
    return float(np.random.default_rng(key).random())


def baseline_score(model: DetectorModel, image: np.ndarray, strategy: str, seed: int = 0,
                   cycle: int = 0, image_id: str = "") -> float:
    if strategy == "entropy":
        return float(entropy_scores(model, np.asarray(image)[None])[0])
    if strategy == "random":
        return random_score(seed, cycle, image_id)
    if strategy == "coreset":
        raise ValueError("coreset selects jointly; use k_center_greedy")
    raise ValueError(f"{strategy!r} is not a baseline strategy")


def pooled_features(model: DetectorModel, pixels: np.ndarray) -> np.ndarray:
    return predict(model, pixels).features.data.mean(axis=1)


def k_center_greedy(features: np.ndarray, centers: np.ndarray, count: int) -> list[int]:
    """Greedy k-center: repeatedly take the point farthest from all chosen centers.

    ``centers`` is a boolean mask of points already covered. With no centers the
    first pick is the point whose largest distance to any other point is
    smallest.
    """
    x = np.asarray(features, dtype=np.float64)
    centers = np.asarray(centers, dtype=bool)

    def dist_to(i):
        return np.linalg.norm(x - x[i], axis=1)

    picks: list[int] = []
    if centers.any():
        idx = np.flatnonzero(centers)
        mind = np.min(np.stack([dist_to(i) for i in idx]), axis=0)
    else:
        full = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
        first = int(np.argmin(full.max(axis=1)))
        picks.append(first)
        mind = full[first]
    taken = centers.copy()
    if picks:
        taken[picks[0]] = True
    while len(picks) < count:
        cand = np.where(taken, -np.inf, mind)
        i = int(np.argmax(cand))
        if not np.isfinite(cand[i]):
            break
        picks.append(i)
        taken[i] = True
        mind = np.minimum(mind, dist_to(i))
    return picks


def rank_by_score(scores: dict[str, float], count: int) -> list[str]:
    """Top ``count`` ids by descending score; ties go to the lexicographically smaller id."""
    return [i for i, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:count]]


def select_images(model: DetectorModel, pool: PoolState, bank: ImageBank, cfg: CycleConfig) -> list[str]:
    count = budget(len(pool.all_ids), cfg.step_fraction)
    unl = pool.unlabeled_sorted()
    if len(unl) < count or count == 0:
        raise PoolExhausted(f"{len(unl)} unlabeled images left, need {count}")
    strategy = cfg.strategy
    if strategy == "random":
        rng = np.random.default_rng([cfg.seed, pool.cycle, 202])
        return sorted(unl[i] for i in rng.choice(len(unl), size=count, replace=False))
    if strategy == "coreset":
        lab = pool.labeled_sorted()
        feats = pooled_features(model, bank.pixels[bank.positions(lab + unl)])
        mask = np.zeros(len(lab) + len(unl), dtype=bool)
        mask[: len(lab)] = True
        picks = k_center_greedy(feats, mask, count)
        return [unl[i - len(lab)] for i in picks]
    pixels = bank.pixels[bank.positions(unl)]
    if strategy == "entropy":
        scores = entropy_scores(model, pixels)
    else:
        u = instance_uncertainty(model, pixels, cfg.weighted_selection)
        scores = aggregate_uncertainty(u, UNCERTAINTY_MODE[strategy], cfg.k)
    return rank_by_score(dict(zip(unl, scores.tolist())), count)


# ---------------------------------------------------------------- cycle


PhaseObserver = Callable[[str, DetectorModel, DetectorModel, "PoolState"], None]


def model_seed(cfg: CycleConfig, cycle: int) -> int:
    """Initialisation seed shared by every strategy for a given (seed, cycle)."""
    return int(np.random.default_rng([cfg.seed, cycle, 303]).integers(2 ** 31))


def fresh_model(cfg: CycleConfig, num_classes: int, image_size: int, cycle: int) -> DetectorModel:
    grid = build_anchors(image_size, cfg.stride, cfg.anchor_sizes)
    return init_model(num_classes, grid, seed=model_seed(cfg, cycle), hidden=cfg.hidden)


def run_cycle(model: DetectorModel | None, pool: PoolState, bank: ImageBank, cfg: CycleConfig,
              test_set: list[ImageSample] | None = None, observer: PhaseObserver | None = None,
              select: bool = True) -> tuple[DetectorModel, PoolState, CycleMetrics]:
    """Train from scratch on the labeled pool, evaluate, then move a batch of selected images to it.

    ``model`` only serves as a template for the anchor grid and class count; the
    cycle always starts from a fresh initialisation keyed by (seed, cycle).
    """
    pool.check()
    cycle = pool.cycle
    num_classes = model.num_classes if model is not None else bank.num_classes
    image_size = bank.pixels.shape[1]
    model = fresh_model(cfg, num_classes, image_size, cycle)
    if bank.grid is None:
        bank.grid = model.grid
    labeled, unlabeled = pool.labeled_sorted(), pool.unlabeled_sorted()
    fraction = len(labeled) / len(pool.all_ids)
    log.info("cycle %d: %d labeled (%.3f), strategy %s", cycle, len(labeled), fraction, cfg.strategy)

    trained, label_losses = train_label_set(model, bank, labeled, cfg, cfg.reweight, cycle)
    if observer:
        observer("label_set", model, trained, pool)
    model = trained
    if cfg.strategy in ADVERSARIAL and unlabeled:
        for r in range(cfg.maxmin_repeats):
            after = max_step(model, bank, labeled, unlabeled, cfg, cfg.reweight, cycle, r)
            if observer:
                observer("max_step", model, after, pool)
            model = after
            after = min_step(model, bank, labeled, unlabeled, cfg, cfg.reweight, cycle, r)
            if observer:
                observer("min_step", model, after, pool)
            model = after

    aps, m_ap = evaluate_map(model, test_set, cfg.score_threshold) if test_set else ([], float("nan"))
    metrics = CycleMetrics(cycle, fraction, aps, m_ap,
                           losses={"label_set_first": label_losses[0] if label_losses else float("nan"),
                                   "label_set_last": label_losses[-1] if label_losses else float("nan")})
    selected: list[str] = []
    if select and unlabeled:
        selected = select_images(model, pool, bank, cfg)
        sel_samples = [bank.samples[i] for i in bank.positions(selected)]
        metrics.tp_selected = tp_selected(model, sel_samples, cfg.k)
        u = instance_uncertainty(model, bank.pixels[bank.positions(selected)])
        metrics.mean_selected_uncertainty = float(aggregate_uncertainty(u, "topk", cfg.k).mean())
        pool.labeled |= set(selected)
        pool.unlabeled -= set(selected)
    pool.history.append({"cycle": cycle, "selected": selected, "metrics": metrics})
    pool.cycle += 1
    pool.check()
    return model, pool, metrics


def run_active_learning(train: list[ImageSample], test: list[ImageSample] | None, cfg: CycleConfig,
                        num_classes: int, observer: PhaseObserver | None = None,
                        on_cycle: Callable[[DetectorModel, PoolState, CycleMetrics], None] | None = None
                        ) -> tuple[PoolState, list[CycleMetrics]]:
    """All cycles of one run."""
    pool = init_pool(train, cfg)
    bank = ImageBank(train, num_classes)
    results = []
    for _ in range(cfg.num_cycles):
        model, pool, metrics = run_cycle(None, pool, bank, cfg, test, observer)
        results.append(metrics)
        if on_cycle:
            on_cycle(model, pool, metrics)
    return pool, results


def with_strategy(cfg: CycleConfig, strategy: str) -> CycleConfig:
    return replace(cfg, strategy=strategy)
