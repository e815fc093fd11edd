"""Target assignment on the pyramid, the focal + smooth-L1 objective, and
the deterministic epoch/optimization loop."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import VideoRecord, load_features
from .errors import ConfigError, DataError
from .model import LocalizerModel, ModelOutputs, pyramid_lengths, \
    pyramid_strides
from .optim import AdamW


@dataclass
class AssignmentConfig:
    """Per-level regression ranges double from ``range_base`` frames; the
    first level starts at 0 and the last is unbounded, so the ranges
    partition [0, inf)."""

    range_base: float = 8.0
    center_radius: float = 1.5

    def validate(self) -> None:
        if self.range_base <= 0:
            raise ConfigError(
                f"assignment: range_base must be positive, got "
                f"{self.range_base}"
            )
        if self.center_radius <= 0:
            raise ConfigError(
                f"assignment: center_radius must be positive, got "
                f"{self.center_radius}"
            )


def level_ranges(levels: int, base: float = 8.0) -> list[tuple[float, float]]:
    """Regression range (in frames) owned by each level.

    A larger base assigns each segment one level finer: the owning stride
    is roughly d_max * 4 / base, and a finer stride means more boundary
    precision per unit of regression error."""
    ranges = []
    for l in range(levels):
        lo = 0.0 if l == 0 else base * (2.0 ** (l - 1))
        hi = math.inf if l == levels - 1 else base * (2.0 ** l)
        ranges.append((lo, hi))
    return ranges


@dataclass
class Targets:
    labels: list[np.ndarray]
    offsets: list[np.ndarray]
    num_pos: int


def segments_in_frames(video: VideoRecord) -> list[tuple[float, float]]:
    return [(s.start_sec * video.fps, s.end_sec * video.fps)
            for s in video.segments]


def assign_targets(segments: list[tuple[float, float]], t_frames: int,
                   levels: int, cfg: AssignmentConfig) -> Targets:
    """Label every pyramid location and compute its boundary offsets.

    A location is positive iff its frame position lies inside a segment,
    within ``center_radius`` strides of the segment center, and the larger
    boundary distance falls in the level's frame range.  Offsets are
    stride-normalized distances to the two boundaries.
    """
    cfg.validate()
    for s, e in segments:
        if not 0.0 <= s < e <= t_frames + 1e-9:
            raise DataError(
                f"assign_targets: segment [{s}, {e}] outside frame range "
                f"[0, {t_frames}]"
            )
    lengths = pyramid_lengths(t_frames, levels)
    strides = pyramid_strides(levels)
    ranges = level_ranges(levels, cfg.range_base)
    labels, offsets = [], []
    num_pos = 0
    for n_l, stride, (lo, hi) in zip(lengths, strides, ranges):
        lab = np.zeros(n_l)
        off = np.zeros((n_l, 2))
        pos = np.arange(n_l) * stride
        for s, e in segments:
            center = 0.5 * (s + e)
            inside = (pos >= s) & (pos <= e)
            near = np.abs(pos - center) <= cfg.center_radius * stride
            d_s = pos - s
            d_e = e - pos
            d_max = np.maximum(d_s, d_e)
            fits = (d_max >= lo) & (d_max < hi)
            take = inside & near & fits
            lab[take] = 1.0
            off[take, 0] = d_s[take] / stride
            off[take, 1] = d_e[take] / stride
        labels.append(lab)
        offsets.append(off)
        num_pos += int(lab.sum())
    return Targets(labels=labels, offsets=offsets, num_pos=num_pos)


def _as_list(x):
    # a bare array is one level's worth of values, not a list of levels
    if isinstance(x, (Tensor, np.ndarray)):
        return [x]
    return list(x)


def focal_loss(logits, labels, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Alpha-balanced sigmoid focal loss, normalized by max(#positives, 1).

    Uses the overflow-safe decomposition in terms of softplus so extreme
    logits neither saturate nor produce non-finite values.
    """
    logit_list = _as_list(logits)
    label_list = [np.asarray(l, dtype=np.float64) for l in _as_list(labels)]
    if len(logit_list) != len(label_list):
        raise ad.ShapeError(
            f"focal_loss: {len(logit_list)} logit tensors vs "
            f"{len(label_list)} label arrays"
        )
    num_pos = sum(float(l.sum()) for l in label_list)
    total = None
    for x, y in zip(logit_list, label_list):
        y = y.reshape(x.shape)
        neg_x = ad.scale(x, -1.0)
        pos_elem = ad.mul(ad.pow_const(ad.sigmoid(neg_x), gamma),
                          ad.softplus(neg_x))
        neg_elem = ad.mul(ad.pow_const(ad.sigmoid(x), gamma),
                          ad.softplus(x))
        elem = ad.add(ad.mul_const_array(pos_elem, alpha * y),
                      ad.mul_const_array(neg_elem, (1.0 - alpha) * (1.0 - y)))
        term = ad.tsum(elem)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / max(num_pos, 1.0))


def smooth_l1(pred_offsets, target_offsets, pos_masks=None) -> Tensor:
    """Huber penalty (0.5 d^2 inside |d|<1, |d|-0.5 outside), averaged over
    the offset coordinates of positive locations."""
    preds = _as_list(pred_offsets)
    targets = [np.asarray(t, dtype=np.float64)
               for t in _as_list(target_offsets)]
    if pos_masks is None:
        masks = [np.ones(p.shape[0], dtype=bool) for p in preds]
    else:
        masks = [np.asarray(m, dtype=bool) for m in _as_list(pos_masks)]
    count = 0
    total = None
    for p, t, m in zip(preds, targets, masks):
        idx = np.flatnonzero(m)
        if idx.size == 0:
            continue
        sel = ad.select_rows(p, idx)
        diff = ad.add_const_array(sel, -t[idx])
        term = ad.smooth_l1_sum(diff)
        total = term if total is None else ad.add(total, term)
        count += idx.size * p.shape[1]
    if total is None:
        return ad.tensor(np.zeros(1))
    return ad.scale(total, 1.0 / count)


def total_loss(outputs: ModelOutputs, targets: Targets,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Unweighted sum of the confidence and boundary terms."""
    cls_term = focal_loss(outputs.logits, targets.labels, alpha, gamma)
    masks = [l > 0.5 for l in targets.labels]
    reg_term = smooth_l1(outputs.offsets, targets.offsets, masks)
    return ad.add(cls_term, reg_term)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    seed: int = 0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    assignment: AssignmentConfig = field(default_factory=AssignmentConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"train: epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(
                f"train: batch_size must be >= 1, got {self.batch_size}"
            )
        if self.lr <= 0:
            raise ConfigError(f"train: lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(
                f"train: weight_decay must be >= 0, got {self.weight_decay}"
            )
        if self.warmup_epochs < 0:
            raise ConfigError(
                f"train: warmup_epochs must be >= 0, got "
                f"{self.warmup_epochs}"
            )
        self.assignment.validate()


# numpy SeedSequence stream tags; keep stable or checkpoints stop resuming
STREAM_INIT = 0
STREAM_ORDER = 1
STREAM_NOISE = 2
STREAM_EVAL = 3


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, STREAM_INIT]))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, STREAM_ORDER, epoch])
    )
    return rng.permutation(n)


def train_noise_key(seed: int, epoch: int, video_index: int) -> tuple:
    return (seed, STREAM_NOISE, epoch, video_index)


def eval_noise_key(seed: int, video_index: int) -> tuple:
    return (seed, STREAM_EVAL, video_index)


@dataclass
class LoadedVideo:
    record: VideoRecord
    features: np.ndarray
    targets: Targets


def load_training_set(videos: list[VideoRecord], root: str, levels: int,
                      assignment: AssignmentConfig,
                      input_dim: int) -> list[LoadedVideo]:
    """Materialize features and targets, failing before any training step."""
    if not videos:
        raise DataError("train: empty dataset")
    loaded = []
    for v in videos:
        v.validate()
        path = os.path.join(root, v.feature_file)
        feats = load_features(path)
        if feats.shape[1] != input_dim:
            raise DataError(
                f"video {v.id}: feature dim {feats.shape[1]} does not match "
                f"configured input_dim {input_dim}"
            )
        expected_t = int(round(v.duration_sec * v.fps))
        if feats.shape[0] != expected_t:
            raise DataError(
                f"video {v.id}: feature length {feats.shape[0]} does not "
                f"match duration {v.duration_sec}s at {v.fps} fps"
            )
        targets = assign_targets(segments_in_frames(v), feats.shape[0],
                                 levels, assignment)
        loaded.append(LoadedVideo(record=v, features=feats, targets=targets))
    return loaded


@dataclass
class EpochStats:
    epoch: int
    loss: float


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup to cfg.lr, then cosine decay toward zero at cfg.epochs.

    Pure in (cfg, epoch) so a resumed run retraces the same schedule; the
    decay is what lets the boundary regression settle to sub-stride
    precision instead of bouncing at a constant step size.
    """
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = max(1, cfg.epochs - cfg.warmup_epochs)
    frac = min(1.0, (epoch - cfg.warmup_epochs) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def run_epochs(model: LocalizerModel, loaded: list[LoadedVideo],
               opt: AdamW, cfg: TrainConfig, *, first_epoch: int = 0,
               last_epoch: int | None = None, noise: bool = True,
               denoise: bool = True,
               on_epoch_end=None) -> list[EpochStats]:
    """Run epochs [first_epoch, last_epoch) with seed-derived batch order.

    Batches average per-video losses by accumulating scaled gradients, so
    variable-length videos need no padding.  ``on_epoch_end(epoch, model)``
    may return True to stop early.
    """
    cfg.validate()
    stop = last_epoch if last_epoch is not None else cfg.epochs
    stats = []
    n = len(loaded)
    for epoch in range(first_epoch, stop):
        opt.lr = epoch_lr(cfg, epoch)
        order = epoch_order(cfg.seed, epoch, n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            opt.zero_grad()
            for vid_idx in batch:
                item = loaded[int(vid_idx)]
                out = model(
                    Tensor(item.features),
                    train_noise_key(cfg.seed, epoch, int(vid_idx)),
                    noise=noise, denoise=denoise,
                )
                loss = total_loss(out, item.targets, cfg.focal_alpha,
                                  cfg.focal_gamma)
                scaled = ad.scale(loss, 1.0 / len(batch))
                scaled.backward()
                epoch_loss += loss.item()
            opt.step()
        stats.append(EpochStats(epoch=epoch, loss=epoch_loss / n))
        if on_epoch_end is not None and on_epoch_end(epoch, model):
            break
    return stats


def append_loss_log(path: str, stats: list[EpochStats]) -> None:
    new_file = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if new_file:
            fh.write("epoch,loss\n")
        for s in stats:
            fh.write(f"{s.epoch},{s.loss:.6f}\n")
