"""Shared numeric helpers and brute-force metric oracles for the test
suite."""

import numpy as np

from tadiff.autodiff import Tensor
from tadiff.evaluation import Proposal, TemporalInterval, temporal_iou


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


ACCEPTANCE_LINES: list[tuple[int, str]] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    """Collect one pass/fail line per acceptance criterion; the conftest
    terminal hook prints them after the run summary."""
    verdict = "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES.append(
        (number, f"criterion {number} {name}: {verdict} ({detail})")
    )


def gradcheck(build, arrays, h=1e-5, tol=1e-6):
    """Compare tape gradients of ``build(tensors) -> scalar`` against
    central finite differences over every element of ``arrays``.

    Returns the worst relative error so callers can report it; asserts
    against ``tol``.
    """
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(tensors)
    loss.backward()
    worst = 0.0
    for which, base in enumerate(arrays):
        flat = base.reshape(-1)
        grad = tensors[which].grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build([Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            dn = build([Tensor(a) for a in arrays]).item()
            flat[i] = orig
            num = (up - dn) / (2.0 * h)
            worst = max(worst, rel_err(float(grad[i]), num))
    assert worst < tol, f"gradcheck: worst relative error {worst:.3e}"
    return worst


def iv(a, b) -> TemporalInterval:
    return TemporalInterval(float(a), float(b))


def prop(a, b, score, vid="v0") -> Proposal:
    return Proposal(interval=iv(a, b), score=float(score), video_id=vid)


def oracle_nms(proposals, thr):
    """Greedy suppression by repeated min-by-key extraction."""
    remaining = list(proposals)
    kept = []
    key = lambda p: (-p.score, p.interval.start_sec, p.interval.end_sec)
    while remaining:
        best = min(remaining, key=key)
        remaining.remove(best)
        if all(temporal_iou(best.interval, k.interval) <= thr for k in kept):
            kept.append(best)
    return kept


def oracle_ap(proposals, annotations, thr):
    """Interpolated AP with an independent per-rank precision scan."""
    order = sorted(proposals, key=lambda p: (-p.score, p.video_id,
                                             p.interval.start_sec,
                                             p.interval.end_sec))
    total_gt = sum(len(g) for g in annotations.values())
    used = {vid: [False] * len(gts) for vid, gts in annotations.items()}
    flags = []
    for p in order:
        gts = annotations.get(p.video_id, [])
        ious = [0.0 if used[p.video_id][j] else temporal_iou(p.interval, g)
                for j, g in enumerate(gts)]
        j = int(np.argmax(ious)) if ious else -1
        if j >= 0 and ious[j] > thr:
            used[p.video_id][j] = True
            flags.append(1)
        else:
            flags.append(0)
    area, prev_recall, tp = 0.0, 0.0, 0
    for i, f in enumerate(flags):
        tp += f
        if not f:
            continue
        recall = tp / total_gt
        # interpolated precision: best precision at any rank with recall >= r
        best = 0.0
        cum = 0
        for k, fk in enumerate(flags):
            cum += fk
            if cum / total_gt >= recall - 1e-12:
                best = max(best, cum / (k + 1))
        area += (recall - prev_recall) * best
        prev_recall = recall
    return 100.0 * area


def oracle_recall(by_video, annotations, n, thr):
    total_gt = sum(len(g) for g in annotations.values())
    hits = 0
    for vid, gts in annotations.items():
        top = sorted(by_video.get(vid, []),
                     key=lambda p: (-p.score, p.interval.start_sec,
                                    p.interval.end_sec))[:n]
        for g in gts:
            hits += any(temporal_iou(p.interval, g) > thr for p in top)
    return 100.0 * hits / total_gt


def random_instance(rng):
    """Small metric instance: up to 3 videos, at most 5 GTs total (one
    guaranteed), 1-10 proposals on a half-integer grid with frequent
    score ties."""
    n_vids = int(rng.integers(1, 4))
    vids = [f"v{i}" for i in range(n_vids)]
    annotations = {}
    total = 0
    for v in vids:
        k = min(int(rng.integers(0, 3)), 5 - total)
        gts = []
        for _ in range(k):
            a = float(rng.integers(0, 16)) / 2.0
            b = a + float(rng.integers(1, 9)) / 2.0
            gts.append(iv(a, b))
        annotations[v] = gts
        total += k
    if total == 0:
        annotations[vids[0]] = [iv(1, 3)]
    proposals = []
    for _ in range(int(rng.integers(1, 11))):
        a = float(rng.integers(0, 16)) / 2.0
        b = a + float(rng.integers(1, 9)) / 2.0
        score = round(float(rng.uniform(0.05, 1.0)), 1)  # ties likely
        proposals.append(prop(a, b, score, vid=str(rng.choice(vids))))
    return proposals, annotations


def module_gradcheck(params, loss_fn, h=1e-5, tol=1e-6, sample=None):
    """Finite-difference check for in-place module parameters.

    ``loss_fn()`` must rebuild the scalar loss deterministically from the
    current parameter values.  ``sample`` optionally restricts the check to
    (name, flat_index) pairs; by default every element is checked.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {n: p.grad.copy() for n, p in params.items()}
    if sample is None:
        sample = [(n, i) for n, p in params.items()
                  for i in range(p.data.size)]
    worst = 0.0
    for name, i in sample:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        dn = loss_fn().item()
        flat[i] = orig
        num = (up - dn) / (2.0 * h)
        worst = max(worst, rel_err(float(analytic[name].reshape(-1)[i]), num))
    assert worst < tol, f"module_gradcheck: worst relative error {worst:.3e}"
    return worst
