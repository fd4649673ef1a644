"""Losses, augmentation, the training loop and cross-validation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from . import ops
from .analysis import SampleRecord, laplacian_sharpness, rms_contrast
from .geometry import GazemapSpec, angular_error_deg, render_gazemaps
from .models import Context, GazeNet, NetworkConfig
from .optim import AdamState, adam_step, is_weight
from .synth import Dataset
from .tensor import Tape, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-4
    l2: float = 1e-4
    gazemap_weight: float = 1e-5
    epochs: int = 20
    max_steps: Optional[int] = None  # caps epochs * batches_per_epoch when set
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 5000
    translate_frac: float = 0.02
    scale_range: Tuple[float, float] = (0.95, 1.05)
    seed: int = 0
    gazemap_supervision: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr_decay_every < 1:
            raise ValueError("batch_size, epochs and lr_decay_every must be positive")
        if self.lr <= 0 or self.l2 < 0 or self.gazemap_weight < 0:
            raise ValueError("lr must be positive; l2 and gazemap_weight non-negative")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be positive, got {self.max_steps}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale_range {self.scale_range}")

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``."""
        return self.lr * self.lr_decay_factor ** ((step - 1) // self.lr_decay_every)

    def total_steps(self, n_samples: int) -> int:
        per_epoch = math.ceil(n_samples / min(self.batch_size, n_samples))
        steps = self.epochs * per_epoch
        return steps if self.max_steps is None else min(steps, self.max_steps)


TRAIN_PRESETS: Dict[str, TrainConfig] = {
    "paper": TrainConfig(),
    # one-core budget: a few hundred steps at a higher rate, decayed once near the end.
    # The map term is weighted up so the hourglasses learn gazemaps within that budget.
    "desk": TrainConfig(lr=1e-3, epochs=8, max_steps=600, lr_decay_every=450, gazemap_weight=1e-3),
}


def get_train_preset(name: str) -> TrainConfig:
    try:
        return TRAIN_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}") from None


@dataclass(frozen=True)
class LossBreakdown:
    gaze: float
    gazemap: float
    l2: float
    total: float


# ------------------------------------------------------------------ losses

def gazemap_loss(logits: Tensor, gt: np.ndarray, weight: float) -> Tensor:
    """Weighted binary cross-entropy summed over pixels of both maps, averaged over the batch."""
    gt = np.asarray(gt)
    if tuple(gt.shape) != tuple(logits.shape):
        raise ValueError(f"gazemap shape mismatch: logits {logits.shape} vs target {gt.shape}")
    if gt.dtype != bool:
        raise ValueError(f"gazemap target must be boolean, got {gt.dtype}")
    n = logits.shape[0]
    bce = ops.bce_with_logits_sum(logits, gt.astype(logits.dtype))
    return bce * Tensor(np.asarray(weight / n, dtype=logits.dtype))


def gaze_loss(pred: Tensor, gt) -> Tensor:
    """Mean over the batch of the squared L2 distance between angle pairs."""
    gt_t = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if tuple(gt_t.shape) != tuple(pred.shape):
        raise ValueError(f"gaze shape mismatch: {pred.shape} vs {gt_t.shape}")
    d = pred - gt_t
    return (d * d).sum() * Tensor(np.asarray(1.0 / pred.shape[0], dtype=pred.dtype))


def l2_penalty(net: GazeNet, l2: float) -> float:
    """Value of the weight penalty whose gradient the optimizer adds (reporting only)."""
    if not l2:
        return 0.0
    return float(l2 * sum(float(np.sum(np.square(p.data, dtype=np.float64)))
                          for name, p in net.store.items() if is_weight(name)))


# ------------------------------------------------------------------ augmentation

def augment(image: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """Random translation and scaling about the centre, bilinear, edge-replicated."""
    h, w = image.shape
    lo, hi = cfg.scale_range
    s = rng.uniform(lo, hi)
    ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
    tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w
    if s == 1.0 and ty == 0.0 and tx == 0.0:
        return image.copy()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # output pixel o samples input at c + (o - c - t) / s
    offset = (cy - (cy + ty) / s, cx - (cx + tx) / s)
    return ndimage.affine_transform(image, np.diag([1.0 / s, 1.0 / s]), offset=offset, order=1,
                                    mode="nearest").astype(image.dtype, copy=False)


def augment_batch(images: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    return np.stack([augment(im, rng, cfg) for im in images])


# ------------------------------------------------------------------ training

@dataclass
class FoldResult:
    held_out: Tuple[int, ...]
    records: List[SampleRecord]
    loss_curve: List[Tuple[int, LossBreakdown]]
    seconds: float = 0.0

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.angular_error for r in self.records])

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


def gazemap_targets(net_cfg: NetworkConfig, gaze: np.ndarray) -> np.ndarray:
    gh, gw = net_cfg.gazemap_size
    return render_gazemaps(GazemapSpec(width=gw, height=gh), gaze)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def train(train_set: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig,
          net: Optional[GazeNet] = None,
          on_step: Optional[Callable[[int, LossBreakdown], None]] = None) -> Tuple[GazeNet, List[Tuple[int, LossBreakdown]]]:
    """Train ``net`` (built from ``cfg.seed`` when omitted) and return it with the per-step loss curve."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if tuple(train_set.size) != tuple(net_cfg.input_size):
        raise ValueError(f"dataset images are {train_set.size}, network expects {net_cfg.input_size}")
    net = net if net is not None else GazeNet(net_cfg, seed=cfg.seed)
    images = train_set.images()
    gaze = train_set.gaze.astype(np.float32)
    maps = gazemap_targets(net_cfg, train_set.gaze)
    n = len(train_set)
    batch = min(cfg.batch_size, n)
    steps = cfg.total_steps(n)
    data_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 2])
    ctx = Context(train=True, rng=np.random.default_rng([cfg.seed, 3]))
    state = AdamState()
    curve: List[Tuple[int, LossBreakdown]] = []
    batches = _batches(n, batch, data_rng)
    h, w = net_cfg.input_size
    for step in range(1, steps + 1):
        idx = next(batches)
        x = augment_batch(images[idx], aug_rng, cfg).reshape(len(idx), 1, h, w)
        try:
            with Tape() as tape:
                out = net(Tensor(x), ctx)
                lg = gaze_loss(out["gaze_angles"], gaze[idx])
                if cfg.gazemap_supervision:
                    lm = gazemap_loss(out["gazemap_logits"], maps[idx], cfg.gazemap_weight)
                    loss = lg + lm
                else:
                    lm = None
                    loss = lg
            penalty = l2_penalty(net, cfg.l2)
            total = float(loss.item()) + penalty
            if not math.isfinite(total):
                raise TrainingDiverged(step, f"total loss {total}")
            net.store.zero_grad()
            tape.backward(loss, net.store)
            adam_step(net.store, state, cfg.lr_at(step), cfg.l2)
        except TrainingDiverged:
            raise
        except FloatingPointError as e:
            raise TrainingDiverged(step, str(e)) from e
        br = LossBreakdown(gaze=float(lg.item()), gazemap=0.0 if lm is None else float(lm.item()),
                           l2=penalty, total=total)
        curve.append((step, br))
        if on_step is not None:
            on_step(step, br)
    return net, curve


def predict(net: GazeNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode angle predictions for ``N x H x W`` images."""
    h, w = net.cfg.input_size
    if images.shape[1:] != (h, w):
        raise ValueError(f"images are {images.shape[1:]}, network expects {(h, w)}")
    ctx = Context(train=False)
    out = np.empty((len(images), 2), dtype=np.float64)
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            res = net(Tensor(chunk.reshape(len(chunk), 1, h, w)), ctx)
            out[start:start + len(chunk)] = res["gaze_angles"].data
    return out


def evaluate(net: GazeNet, dataset: Dataset, batch_size: int = 64) -> List[SampleRecord]:
    images = dataset.images()
    pred = predict(net, images, batch_size)
    err = angular_error_deg(pred, dataset.gaze)
    records = []
    for i, r in enumerate(dataset.rows):
        img = images[i]
        records.append(SampleRecord(
            sample_id=r.filename, person_id=r.person_id,
            gaze_pitch=r.gaze_pitch, gaze_yaw=r.gaze_yaw, head_pitch=r.head_pitch, head_yaw=r.head_yaw,
            pred_pitch=float(pred[i, 0]), pred_yaw=float(pred[i, 1]), angular_error=float(err[i]),
            rms_contrast=rms_contrast(img), sharpness=laplacian_sharpness(img)))
    return records


def train_fold(train_set: Dataset, test_set: Dataset, net_cfg: NetworkConfig, cfg: TrainConfig,
               on_step=None) -> Tuple[FoldResult, GazeNet]:
    overlap = set(train_set.person_ids) & set(test_set.person_ids)
    if overlap:
        raise ValueError(f"persons {sorted(overlap)} appear in both train and test sets")
    t0 = time.perf_counter()
    net, curve = train(train_set, net_cfg, cfg, on_step=on_step)
    records = evaluate(net, test_set)
    return FoldResult(tuple(test_set.person_ids), records, curve, time.perf_counter() - t0), net


# ------------------------------------------------------------------ protocols

def parse_scheme(scheme: str) -> Optional[int]:
    """``"lopo"`` -> None; ``"kfold:K"`` -> K."""
    if scheme == "lopo":
        return None
    if scheme.startswith("kfold:"):
        try:
            k = int(scheme.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad scheme {scheme!r}; expected lopo or kfold:K") from None
        if k < 2:
            raise ValueError(f"k-fold needs k >= 2, got {k}")
        return k
    raise ValueError(f"bad scheme {scheme!r}; expected lopo or kfold:K")


def fold_partitions(person_ids: Sequence[int], scheme: str) -> List[Tuple[int, ...]]:
    """Held-out person groups; k-fold splits persons in id order into contiguous groups."""
    persons = sorted(set(person_ids))
    k = parse_scheme(scheme)
    if k is None:
        if len(persons) < 2:
            raise ValueError("leave-one-person-out needs at least 2 persons")
        return [(p,) for p in persons]
    if k > len(persons):
        raise ValueError(f"k-fold with k={k} exceeds the {len(persons)} persons available")
    return [tuple(int(p) for p in g) for g in np.array_split(np.array(persons), k)]


@dataclass
class CrossValidationResult:
    folds: List[FoldResult]

    @property
    def fold_means(self) -> List[float]:
        return [f.mean_error for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_means))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_means))


def cross_validate(dataset: Dataset, scheme: str, net_cfg: NetworkConfig, cfg: TrainConfig,
                   folds: Optional[Sequence[int]] = None,
                   on_fold: Optional[Callable[[int, FoldResult, GazeNet], None]] = None) -> CrossValidationResult:
    """Run the protocol; ``folds`` selects a subset of fold indices (default: all)."""
    parts = fold_partitions(dataset.person_ids, scheme)
    chosen = range(len(parts)) if folds is None else folds
    results = []
    for i in chosen:
        held = parts[i]
        test = dataset.select_persons(held)
        train_set = dataset.select_persons([p for p in dataset.person_ids if p not in held])
        res, net = train_fold(train_set, test, net_cfg, cfg)
        log.info("fold %d (held out %s): mean error %.3f deg in %.0f s", i, held, res.mean_error, res.seconds)
        results.append(res)
        if on_fold is not None:
            on_fold(i, res, net)
    return CrossValidationResult(results)
