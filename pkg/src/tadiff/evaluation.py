"""Proposal decoding, duplicate suppression, AP/AR localization metrics,
and the Fisher feature-separability score."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import VideoRecord, load_features, video_domain
from .errors import ConfigError, DataError
from .model import LocalizerModel
from .training import AssignmentConfig, assign_targets, eval_noise_key, \
    segments_in_frames

TIOU_THRESHOLDS = (0.75, 0.85, 0.95)
AR_PROPOSAL_COUNTS = (1, 5, 10)


@dataclass(frozen=True)
class TemporalInterval:
    start_sec: float
    end_sec: float

    def validate(self) -> None:
        if not 0.0 <= self.start_sec < self.end_sec:
            raise DataError(
                f"interval [{self.start_sec}, {self.end_sec}] is invalid"
            )

    @property
    def length(self) -> float:
        return self.end_sec - self.start_sec


@dataclass(frozen=True)
class Proposal:
    interval: TemporalInterval
    score: float
    video_id: str


def temporal_iou(a: TemporalInterval, b: TemporalInterval) -> float:
    inter = min(a.end_sec, b.end_sec) - max(a.start_sec, b.start_sec)
    if inter <= 0.0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


@dataclass
class EvalConfig:
    protocol: str = "intra"
    train_fraction: float = 0.75
    split_seed: int = 0
    score_threshold: float = 0.001
    max_per_video: int = 100
    nms_iou: float = 0.5
    tiou_thresholds: tuple = TIOU_THRESHOLDS
    proposal_counts: tuple = AR_PROPOSAL_COUNTS

    def validate(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError(
                f"eval: score_threshold must lie in [0, 1], got "
                f"{self.score_threshold}"
            )
        if self.max_per_video < 1:
            raise ConfigError(
                f"eval: max_per_video must be >= 1, got {self.max_per_video}"
            )
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError(
                f"eval: nms_iou must lie in [0, 1], got {self.nms_iou}"
            )
        if not self.tiou_thresholds:
            raise ConfigError("eval: tiou_thresholds must be non-empty")
        if not self.proposal_counts:
            raise ConfigError("eval: proposal_counts must be non-empty")


def decode_proposals(logits: list[np.ndarray], offsets: list[np.ndarray],
                     strides: list[int], t_frames: int, fps: float,
                     video_id: str, score_threshold: float = 0.001,
                     max_per_video: int = 100) -> list[Proposal]:
    """Map per-location head outputs to scored second-unit intervals.

    Location i at stride k with offsets (d_s, d_e) spans frames
    [(i - d_s) k, (i + d_e) k], clipped to the video; empty intervals and
    sub-threshold scores are dropped, then the top ``max_per_video`` by
    score are kept.
    """
    cands = []
    for logit, off, stride in zip(logits, offsets, strides):
        scores = 1.0 / (1.0 + np.exp(-np.asarray(logit).reshape(-1)))
        off = np.asarray(off)
        pos = np.arange(off.shape[0]) * stride
        start_f = np.clip(pos - off[:, 0] * stride, 0.0, t_frames)
        end_f = np.clip(pos + off[:, 1] * stride, 0.0, t_frames)
        for i in range(off.shape[0]):
            if scores[i] < score_threshold or end_f[i] <= start_f[i]:
                continue
            cands.append(Proposal(
                interval=TemporalInterval(start_f[i] / fps, end_f[i] / fps),
                score=float(scores[i]), video_id=video_id,
            ))
    cands.sort(key=lambda p: (-p.score, p.interval.start_sec,
                              p.interval.end_sec))
    return cands[:max_per_video]


def nms(proposals: list[Proposal], iou_threshold: float) -> list[Proposal]:
    """Greedy suppression: walk by descending score (ties: earlier start,
    then lexicographic bounds) and drop anything overlapping a kept
    proposal more than ``iou_threshold``."""
    ordered = sorted(proposals,
                     key=lambda p: (-p.score, p.interval.start_sec,
                                    p.interval.end_sec))
    kept: list[Proposal] = []
    for p in ordered:
        if all(temporal_iou(p.interval, k.interval) <= iou_threshold
               for k in kept):
            kept.append(p)
    return kept


def _gt_by_video(annotations: dict[str, list[TemporalInterval]]) -> int:
    total = sum(len(v) for v in annotations.values())
    if total == 0:
        raise DataError("metrics: no ground-truth segments in the eval set")
    return total


def average_precision(proposals: list[Proposal],
                      annotations: dict[str, list[TemporalInterval]],
                      tiou_threshold: float) -> float:
    """Interpolated-area AP (percent) with greedy highest-tIoU matching."""
    total_gt = _gt_by_video(annotations)
    ordered = sorted(proposals,
                     key=lambda p: (-p.score, p.video_id,
                                    p.interval.start_sec,
                                    p.interval.end_sec))
    matched: dict[str, np.ndarray] = {
        vid: np.zeros(len(gts), dtype=bool)
        for vid, gts in annotations.items()
    }
    tp = np.zeros(len(ordered))
    for rank, p in enumerate(ordered):
        gts = annotations.get(p.video_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[p.video_id][j]:
                continue
            iou = temporal_iou(p.interval, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou > tiou_threshold:
            matched[p.video_id][best_j] = True
            tp[rank] = 1.0
    if not len(ordered):
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.arange(1, len(ordered) + 1)
    # precision at recall r = max precision at any recall >= r
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for i in range(len(ordered)):
        if tp[i]:
            area += (recall[i] - prev_r) * interp[i]
            prev_r = recall[i]
    return 100.0 * area


def recall_at_n(proposals_by_video: dict[str, list[Proposal]],
                annotations: dict[str, list[TemporalInterval]],
                n: int, tiou_threshold: float) -> float:
    """Fraction of GTs covered by some top-n proposal (percent)."""
    total_gt = _gt_by_video(annotations)
    hit = 0
    for vid, gts in annotations.items():
        props = sorted(proposals_by_video.get(vid, []),
                       key=lambda p: (-p.score, p.interval.start_sec,
                                      p.interval.end_sec))[:n]
        for gt in gts:
            if any(temporal_iou(p.interval, gt) > tiou_threshold
                   for p in props):
                hit += 1
    return 100.0 * hit / total_gt


def average_recall(proposals_by_video: dict[str, list[Proposal]],
                   annotations: dict[str, list[TemporalInterval]],
                   n: int, tiou_thresholds=TIOU_THRESHOLDS) -> float:
    """Recall@n averaged over the tIoU threshold set."""
    vals = [recall_at_n(proposals_by_video, annotations, n, t)
            for t in tiou_thresholds]
    return float(np.mean(vals))


def fisher_score(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean-separation over within-class scatter:
    ||mu_real - mu_forged||^2 / (tr(cov_real) + tr(cov_forged))."""
    feats = np.asarray(features, dtype=np.float64)
    labs = np.asarray(labels).reshape(-1)
    if feats.ndim != 2 or feats.shape[0] != labs.shape[0]:
        raise DataError(
            f"fisher_score: features {feats.shape} do not align with "
            f"{labs.shape[0]} labels"
        )
    real = feats[labs == 0]
    forged = feats[labs == 1]
    if len(real) < 2 or len(forged) < 2:
        raise DataError(
            f"fisher_score: need >= 2 samples per class, got "
            f"{len(real)} real / {len(forged)} forged"
        )
    sep = float(np.sum((real.mean(axis=0) - forged.mean(axis=0)) ** 2))
    scatter = float(real.var(axis=0).sum() + forged.var(axis=0).sum())
    return sep / max(scatter, 1e-12)


@dataclass
class EvalReport:
    protocol: str
    ap: dict[float, float]
    ap_avg: float
    ar: dict[int, float]
    ar_avg: float
    fisher: float
    fisher_pre: float
    per_domain: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "ap": {f"{t:.2f}": round(v, 4) for t, v in self.ap.items()},
            "ap_avg": round(self.ap_avg, 4),
            "ar": {str(n): round(v, 4) for n, v in self.ar.items()},
            "ar_avg": round(self.ar_avg, 4),
            "fisher": round(self.fisher, 6),
            "fisher_pre": round(self.fisher_pre, 6),
            "per_domain": self.per_domain,
        }


def csv_header() -> str:
    return "protocol,ap75,ap85,ap95,ap_avg,ar1,ar5,ar10,ar_avg,fisher"


def csv_row(report: EvalReport) -> str:
    cells = [report.protocol]
    cells += [f"{report.ap[t]:.2f}" for t in TIOU_THRESHOLDS]
    cells.append(f"{report.ap_avg:.2f}")
    cells += [f"{report.ar[n]:.2f}" for n in AR_PROPOSAL_COUNTS]
    cells.append(f"{report.ar_avg:.2f}")
    cells.append(f"{report.fisher:.2f}")
    return ",".join(cells)


def write_results_csv(path: str, reports: list[EvalReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(csv_header() + "\n")
        for r in reports:
            fh.write(csv_row(r) + "\n")


def video_annotations(videos: list[VideoRecord]
                      ) -> dict[str, list[TemporalInterval]]:
    ann = {}
    for v in videos:
        ann[v.id] = [TemporalInterval(s.start_sec, s.end_sec)
                     for s in v.segments]
        for iv in ann[v.id]:
            iv.validate()
    return ann


def _metric_block(proposals_by_video, annotations, cfg: EvalConfig
                  ) -> tuple[dict, float, dict, float]:
    flat = [p for plist in proposals_by_video.values() for p in plist]
    ap = {t: average_precision(flat, annotations, t)
          for t in cfg.tiou_thresholds}
    ap_avg = float(np.mean(list(ap.values())))
    ar = {n: average_recall(proposals_by_video, annotations, n,
                            cfg.tiou_thresholds)
          for n in cfg.proposal_counts}
    ar_avg = float(np.mean(list(ar.values())))
    return ap, ap_avg, ar, ar_avg


def evaluate_model(model: LocalizerModel, videos: list[VideoRecord],
                   root: str, cfg: EvalConfig, assignment: AssignmentConfig,
                   *, protocol: str, eval_seed: int, noise: bool = True,
                   denoise: bool = True) -> EvalReport:
    """Decode, suppress, and score the test videos of one protocol split.

    Stochasticity is pinned: the refinement chain runs with eta = 0 and a
    generator keyed on (eval_seed, video index), so repeated calls agree
    bitwise.  Fisher scores compare refined (and pre-refinement) level
    features at locations inside vs outside annotated segments.
    """
    cfg.validate()
    if not videos:
        raise DataError("evaluate: empty test split")
    annotations = video_annotations(videos)
    proposals_by_video: dict[str, list[Proposal]] = {}
    fisher_feats: list[np.ndarray] = []
    fisher_pre_feats: list[np.ndarray] = []
    fisher_labels: list[np.ndarray] = []
    ordered = sorted(videos, key=lambda v: v.id)
    for idx, video in enumerate(ordered):
        feats = load_features(os.path.join(root, video.feature_file))
        if feats.shape[1] != model.cfg.input_dim:
            raise DataError(
                f"video {video.id}: feature dim {feats.shape[1]} does not "
                f"match model input_dim {model.cfg.input_dim}"
            )
        with ad.no_grad():
            out = model(Tensor(feats), eval_noise_key(eval_seed, idx),
                        noise=noise, denoise=denoise, eta=0.0)
        t_frames = feats.shape[0]
        props = decode_proposals(
            [l.data for l in out.logits], [o.data for o in out.offsets],
            out.strides, t_frames, video.fps, video.id,
            cfg.score_threshold, cfg.max_per_video,
        )
        proposals_by_video[video.id] = nms(props, cfg.nms_iou)
        segs = segments_in_frames(video)
        for feat_t, pre_t, stride in zip(out.levels, out.pre_levels,
                                         out.strides):
            pos = np.arange(feat_t.shape[0]) * stride
            inside = np.zeros(feat_t.shape[0], dtype=bool)
            for s, e in segs:
                inside |= (pos >= s) & (pos < e)
            fisher_feats.append(feat_t.data)
            fisher_pre_feats.append(pre_t.data)
            fisher_labels.append(inside.astype(np.float64))
    labels = np.concatenate(fisher_labels)
    fisher = fisher_score(np.concatenate(fisher_feats), labels)
    fisher_pre = fisher_score(np.concatenate(fisher_pre_feats), labels)
    ap, ap_avg, ar, ar_avg = _metric_block(proposals_by_video, annotations,
                                           cfg)
    per_domain: dict[str, dict[str, float]] = {}
    for domain in sorted({video_domain(v) for v in ordered}):
        members = [v for v in ordered if video_domain(v) == domain]
        if not any(v.segments for v in members):
            continue
        sub_ann = video_annotations(members)
        sub_props = {v.id: proposals_by_video[v.id] for v in members}
        d_ap, d_ap_avg, d_ar, d_ar_avg = _metric_block(sub_props, sub_ann,
                                                       cfg)
        per_domain[domain] = {
            "ap_avg": round(d_ap_avg, 4),
            "ar_avg": round(d_ar_avg, 4),
            "videos": len(members),
        }
    return EvalReport(protocol=protocol, ap=ap, ap_avg=ap_avg, ar=ar,
                      ar_avg=ar_avg, fisher=fisher, fisher_pre=fisher_pre,
                      per_domain=per_domain)
