"""CLEAR-MOT, IDF1, MT/ML and TrackAP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BBox, iou, iou_matrix


class SequenceMismatch(ValueError):
    pass


class MissingScores(ValueError):
    pass


@dataclass
class TrajectorySet:
    """Tracks of one sequence: ``tracks[id][frame] -> BBox``, optional ``scores[id][frame]``."""

    tracks: dict[int, dict[int, BBox]] = field(default_factory=dict)
    sequence_length: int = 0
    fps: float = 30.0
    scores: dict[int, dict[int, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for tid, boxes in self.tracks.items():
            for f in boxes:
                if not 0 <= f < self.sequence_length:
                    raise ValueError(f"track {tid} has frame {f} outside [0, {self.sequence_length})")

    def __len__(self) -> int:
        return len(self.tracks)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrajectorySet):
            return NotImplemented
        return (self.tracks == other.tracks and self.sequence_length == other.sequence_length
                and self.fps == other.fps
                and {k: v for k, v in self.scores.items() if v}
                == {k: v for k, v in other.scores.items() if v})

    def add(self, tid: int, frame: int, box: BBox, score: float | None = None) -> None:
        self.tracks.setdefault(tid, {})[frame] = box
        if score is not None:
            self.scores.setdefault(tid, {})[frame] = score

    def frame_view(self) -> list[list[tuple[int, BBox]]]:
        view: list[list[tuple[int, BBox]]] = [[] for _ in range(self.sequence_length)]
        for tid in sorted(self.tracks):
            for f, box in self.tracks[tid].items():
                view[f].append((tid, box))
        return view

    def track_score(self, tid: int) -> float:
        s = self.scores.get(tid)
        if not s:
            raise MissingScores(f"track {tid} has no scores")
        return float(np.mean(list(s.values())))

    def num_boxes(self) -> int:
        return sum(len(b) for b in self.tracks.values())


@dataclass
class MotReport:
    MOTA: float
    IDF1: float
    MT: float
    ML: float
    FP: int
    FN: int
    IDsw: int
    num_gt: int
    num_matches: int

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def _check_same(pred: TrajectorySet, gt: TrajectorySet) -> None:
    if pred.sequence_length != gt.sequence_length:
        raise SequenceMismatch(
            f"prediction covers {pred.sequence_length} frames, ground truth {gt.sequence_length}")


def _max_iou_matching(sim: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Maximum-cardinality matching over pairs with ``sim >= threshold``, then maximum total IoU."""
    if sim.size == 0:
        return []
    valid = sim >= threshold
    if not valid.any():
        return []
    # every valid pair is worth more than any difference in IoU totals
    big = float(min(sim.shape) + 1)
    weight = np.where(valid, big + sim, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return [(r, c) for r, c in zip(rows, cols) if valid[r, c]]


@dataclass
class _Matching:
    fp: int
    fn: int
    idsw: int
    num_gt: int
    # per frame: {gt id: pred id}
    matches: list[dict[int, int]]


def _clear_mot_matching(pred: TrajectorySet, gt: TrajectorySet, threshold: float) -> _Matching:
    _check_same(pred, gt)
    pview, gview = pred.frame_view(), gt.frame_view()
    prev: dict[int, int] = {}
    last: dict[int, int] = {}
    fp = fn = idsw = num_gt = 0
    all_matches = []
    for f in range(gt.sequence_length):
        gids = [g for g, _ in gview[f]]
        pids = [p for p, _ in pview[f]]
        gboxes = {g: b for g, b in gview[f]}
        pboxes = {p: b for p, b in pview[f]}
        cur: dict[int, int] = {}
        for g, p in prev.items():
            if g in gboxes and p in pboxes and iou(gboxes[g], pboxes[p]) >= threshold:
                cur[g] = p
        used_p = set(cur.values())
        rest_g = [g for g in gids if g not in cur]
        rest_p = [p for p in pids if p not in used_p]
        if rest_g and rest_p:
            sim = iou_matrix(np.array([gboxes[g].as_tuple() for g in rest_g]),
                             np.array([pboxes[p].as_tuple() for p in rest_p]))
            for r, c in _max_iou_matching(sim, threshold):
                cur[rest_g[r]] = rest_p[c]
        for g, p in cur.items():
            if g in last and last[g] != p:
                idsw += 1
            last[g] = p
        num_gt += len(gids)
        fn += len(gids) - len(cur)
        fp += len(pids) - len(cur)
        prev = cur
        all_matches.append(cur)
    return _Matching(fp, fn, idsw, num_gt, all_matches)


def idf1(pred: TrajectorySet, gt: TrajectorySet, iou_threshold: float = 0.5) -> float:
    _check_same(pred, gt)
    gids, pids = sorted(gt.tracks), sorted(pred.tracks)
    total_gt, total_pred = gt.num_boxes(), pred.num_boxes()
    if total_gt + total_pred == 0:
        return 1.0
    if not gids or not pids:
        return 0.0
    idtp = _overlap_counts(pred, gt, pids, gids, iou_threshold)
    rows, cols = linear_sum_assignment(idtp, maximize=True)
    tp = float(idtp[rows, cols].sum())
    return 2 * tp / (total_gt + total_pred)


def _overlap_counts(pred, gt, pids, gids, threshold) -> np.ndarray:
    """``counts[p, g]`` = frames where pred ``p`` and gt ``g`` overlap at IoU >= threshold."""
    counts = np.zeros((len(pids), len(gids)))
    pidx = {p: i for i, p in enumerate(pids)}
    gidx = {g: i for i, g in enumerate(gids)}
    pview, gview = pred.frame_view(), gt.frame_view()
    for f in range(gt.sequence_length):
        if not pview[f] or not gview[f]:
            continue
        sim = iou_matrix(np.array([b.as_tuple() for _, b in pview[f]]),
                         np.array([b.as_tuple() for _, b in gview[f]]))
        pi = [pidx[p] for p, _ in pview[f]]
        gi = [gidx[g] for g, _ in gview[f]]
        counts[np.ix_(pi, gi)] += sim >= threshold
    return counts


def _coverage(m: _Matching, gt: TrajectorySet) -> dict[int, float]:
    hits = {g: 0 for g in gt.tracks}
    for cur in m.matches:
        for g in cur:
            hits[g] += 1
    return {g: hits[g] / len(gt.tracks[g]) for g in gt.tracks if gt.tracks[g]}


def mt_ml(pred: TrajectorySet, gt: TrajectorySet, iou_threshold: float = 0.5) -> tuple[float, float]:
    cov = _coverage(_clear_mot_matching(pred, gt, iou_threshold), gt)
    if not cov:
        return 0.0, 0.0
    vals = np.array(list(cov.values()))
    return float(np.mean(vals >= 0.8)), float(np.mean(vals <= 0.2))


def clear_mot(pred: TrajectorySet, gt: TrajectorySet, iou_threshold: float = 0.5) -> MotReport:
    m = _clear_mot_matching(pred, gt, iou_threshold)
    mota = 1.0 - (m.fp + m.fn + m.idsw) / m.num_gt if m.num_gt else float(m.fp == 0)
    cov = _coverage(m, gt)
    vals = np.array(list(cov.values())) if cov else np.zeros(0)
    mt = float(np.mean(vals >= 0.8)) if len(vals) else 0.0
    ml = float(np.mean(vals <= 0.2)) if len(vals) else 0.0
    return MotReport(
        MOTA=mota, IDF1=idf1(pred, gt, iou_threshold), MT=mt, ML=ml,
        FP=m.fp, FN=m.fn, IDsw=m.idsw, num_gt=m.num_gt,
        num_matches=sum(len(c) for c in m.matches),
    )


def track_iou(pred_track: dict[int, BBox], gt_track: dict[int, BBox],
              sequence_length: int | None = None) -> float:
    """Mean per-frame IoU over the union of frames where either track has a box."""
    frames = set(pred_track) | set(gt_track)
    if sequence_length is not None:
        frames = {f for f in frames if 0 <= f < sequence_length}
    if not frames:
        return 0.0
    total = 0.0
    for f in frames:
        if f in pred_track and f in gt_track:
            total += iou(pred_track[f], gt_track[f])
    return total / len(frames)


def track_iou_matrix(pred: TrajectorySet, gt: TrajectorySet,
                     pids: list[int] | None = None,
                     gids: list[int] | None = None) -> np.ndarray:
    """Vectorized ``track_iou`` for every (pred, gt) pair."""
    pids = sorted(pred.tracks) if pids is None else pids
    gids = sorted(gt.tracks) if gids is None else gids
    sums = np.zeros((len(pids), len(gids)))
    if not pids or not gids:
        return sums
    pidx = {p: i for i, p in enumerate(pids)}
    gidx = {g: i for i, g in enumerate(gids)}
    pview, gview = pred.frame_view(), gt.frame_view()
    for f in range(min(pred.sequence_length, gt.sequence_length)):
        if not pview[f] or not gview[f]:
            continue
        sim = iou_matrix(np.array([b.as_tuple() for _, b in pview[f]]),
                         np.array([b.as_tuple() for _, b in gview[f]]))
        pi = [pidx[p] for p, _ in pview[f]]
        gi = [gidx[g] for g, _ in gview[f]]
        sums[np.ix_(pi, gi)] += sim
    plen = np.array([len(pred.tracks[p]) for p in pids], dtype=np.float64)
    glen = np.array([len(gt.tracks[g]) for g in gids], dtype=np.float64)
    both = _overlap_counts(pred, gt, pids, gids, -1.0)
    union = plen[:, None] + glen[None, :] - both
    return np.divide(sums, union, out=np.zeros_like(sums), where=union > 0)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a score-ordered TP/FP indicator vector."""
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # precision envelope, non-increasing in recall
    env = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _score_order(pred: TrajectorySet) -> list[int]:
    for tid in pred.tracks:
        if not pred.scores.get(tid):
            raise MissingScores(f"predicted track {tid} has no scores")
    return sorted(pred.tracks, key=lambda t: (-pred.track_score(t), t))


def track_ap(pred: TrajectorySet, gt: TrajectorySet,
             thresholds: tuple[float, ...] = (0.5, 0.75)) -> tuple[float, ...]:
    """TrackAP at each threshold; greedy score-ordered matching on track IoU."""
    _check_same(pred, gt)
    order = _score_order(pred)
    gids = sorted(gt.tracks)
    tious = track_iou_matrix(pred, gt, order, gids)
    out = []
    for thr in thresholds:
        taken = np.zeros(len(gids), dtype=bool)
        tp = np.zeros(len(order))
        for i in range(len(order)):
            if not gids:
                break
            cand = np.where(taken, -1.0, tious[i])
            j = int(np.argmax(cand))
            if cand[j] >= thr:
                taken[j] = True
                tp[i] = 1
        out.append(average_precision(tp, len(gids)))
    return tuple(out)


def evaluate(pred: TrajectorySet, gt: TrajectorySet, iou_threshold: float = 0.5) -> dict[str, float]:
    """Everything the CLI reports, as a flat dict."""
    report = clear_mot(pred, gt, iou_threshold).as_dict()
    if all(pred.scores.get(t) for t in pred.tracks):
        report["AP50"], report["AP75"] = track_ap(pred, gt)
    return report
