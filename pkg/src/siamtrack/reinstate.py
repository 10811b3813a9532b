"""Deciding whether a new track is a terminated one coming back.

Two deciders: the embedding-distance threshold rule, and a small trained
classifier over appearance and kinematic features (run online on the first
frames of the new track, or offline over completed tracks).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BBox
from .learn import DimensionMismatch, MlpModel

TOP_K = 5
CENTROID_WINDOW = 20
DISTANCE_THRESHOLD = 0.5
BUFFER_SECONDS = 30.0


class NoEmbeddings(ValueError):
    pass


class Decision(enum.Enum):
    REINSTATE = "reinstate"
    NEW_TRACK = "new_track"


class EmbeddingBuffer:
    """Per-track appearance history bounded by age.

    After ``evict(t)`` no entry is older than ``t - round(capacity_seconds * fps)``.
    """

    def __init__(self, capacity_seconds: float = BUFFER_SECONDS, fps: float = 30.0):
        self.capacity_seconds = capacity_seconds
        self.fps = fps
        self.horizon = int(round(capacity_seconds * fps))
        self.entries: dict[int, list[tuple[int, np.ndarray]]] = {}

    def add(self, key: int, frame: int, embedding: np.ndarray) -> None:
        items = self.entries.setdefault(key, [])
        if items and items[-1][0] == frame:
            items[-1] = (frame, embedding)
        elif items and items[-1][0] > frame:
            raise ValueError(f"frame {frame} is older than buffered frame {items[-1][0]}")
        else:
            items.append((frame, embedding))

    def evict(self, current_frame: int) -> list[int]:
        """Drop stale entries; returns keys whose history became empty."""
        oldest = current_frame - self.horizon
        emptied = []
        for key in list(self.entries):
            items = self.entries[key]
            cut = 0
            while cut < len(items) and items[cut][0] < oldest:
                cut += 1
            if cut:
                del items[:cut]
            if not items:
                del self.entries[key]
                emptied.append(key)
        return emptied

    def get(self, key: int) -> list[tuple[int, np.ndarray]]:
        return self.entries.get(key, [])

    def vectors(self, key: int) -> np.ndarray:
        items = self.get(key)
        if not items:
            return np.zeros((0, 0))
        return np.stack([e for _, e in items])

    def merge(self, src: int, dst: int) -> None:
        """Move ``src`` history under ``dst``, keeping frames ordered."""
        moved = self.entries.pop(src, [])
        merged = sorted(self.entries.get(dst, []) + moved, key=lambda fe: fe[0])
        if merged:
            self.entries[dst] = merged

    def drop(self, key: int) -> None:
        self.entries.pop(key, None)

    def __contains__(self, key: int) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())


def _embedding_array(x) -> np.ndarray:
    if hasattr(x, "embeddings"):
        x = [e for _, e in x.embeddings]
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise NoEmbeddings("track has no embeddings")
    return arr.reshape(len(arr), -1)


def match_distance(pending, terminated, k: int = TOP_K) -> float:
    """Mean of the ``min(k, pairs)`` smallest l2 distances between the two embedding sets."""
    a = _embedding_array(pending)
    b = _embedding_array(terminated)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"embedding sizes differ: {a.shape[1]} vs {b.shape[1]}")
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2).ravel()
    kk = min(k, d.size)
    return float(np.sort(np.partition(d, kk - 1)[:kk]).mean())


def decide_threshold(distance: float | None, threshold: float = DISTANCE_THRESHOLD) -> Decision:
    if distance is None:
        return Decision.NEW_TRACK
    if distance < 0:
        raise ValueError("distance must be non-negative")
    return Decision.REINSTATE if distance < threshold else Decision.NEW_TRACK


def select_by_distance(candidates: Mapping[int, tuple[float, int]],
                       threshold: float = DISTANCE_THRESHOLD) -> int | None:
    """Best candidate key from ``{key: (distance, terminated_at)}``, or None.

    Lowest distance wins; ties go to the most recent termination.
    """
    if not candidates:
        return None
    key = min(candidates, key=lambda c: (candidates[c][0], -candidates[c][1], c))
    if decide_threshold(candidates[key][0], threshold) is Decision.REINSTATE:
        return key
    return None


@dataclass(frozen=True)
class ReinstateFeatures:
    embedding_distance: float
    center_gap: tuple[float, float]
    size_gap: tuple[float, float]
    velocity_gap: tuple[float, float]
    time_gap: int
    old_confidence: float
    new_confidence: float
    # velocity of the old track, needed to extrapolate across the gap
    old_velocity: tuple[float, float] = (0.0, 0.0)
    old_height: float = 1.0
    fps: float = 30.0
    # distance between mean embeddings near the gap; averaging suppresses per-frame noise
    centroid_distance: float = 0.0

    def __post_init__(self) -> None:
        if self.time_gap <= 0:
            raise ValueError("time_gap must be positive")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("non-finite feature")

    def to_vector(self) -> np.ndarray:
        s = self.old_height
        gap_s = self.time_gap / self.fps
        rx = self.center_gap[0] - self.old_velocity[0] * self.time_gap
        ry = self.center_gap[1] - self.old_velocity[1] * self.time_gap
        return np.array([
            self.embedding_distance,
            self.center_gap[0] / s, self.center_gap[1] / s,
            self.size_gap[0] / s, self.size_gap[1] / s,
            self.velocity_gap[0] * self.fps / s, self.velocity_gap[1] * self.fps / s,
            gap_s,
            self.old_confidence, self.new_confidence,
            rx / s, ry / s,
            np.hypot(rx, ry) / s / (1.0 + gap_s),
            self.centroid_distance,
        ])


FEATURE_DIM = 14


def _boxes(track) -> list[tuple[int, BBox]]:
    return sorted(track.boxes.items())


def _window_stats(items: Sequence[tuple[int, BBox]]):
    c = np.array([[b.cx, b.cy] for _, b in items])
    s = np.array([[b.w, b.h] for _, b in items])
    if len(items) > 1:
        vel = (c[-1] - c[0]) / (items[-1][0] - items[0][0])
    else:
        vel = np.zeros(2)
    return c.mean(0), s.mean(0), vel


def _confidence(track, frames=None) -> float:
    vis = track.visibilities
    vals = [vis[f] for f in vis if frames is None or f in frames]
    return float(np.mean(vals)) if vals else 0.0


def extract_features(pending, terminated, k: int = TOP_K, pending_window: int | None = None,
                     old_embeddings=None, fps: float = 30.0) -> ReinstateFeatures:
    """Appearance and kinematic comparison of a new track against a terminated one.

    Kinematics use the last ``k`` boxes of the old track and the first ``k`` of
    the new one. ``pending_window`` restricts the new track to its first frames
    (online use); ``old_embeddings`` replaces the old track's full history
    (e.g. with the buffer contents).
    """
    new_items = _boxes(pending)
    old_items = _boxes(terminated)
    if not new_items or not old_items:
        raise ValueError("both tracks need boxes")
    if pending_window is not None:
        new_items = new_items[:pending_window]
    new_frames = {f for f, _ in new_items}
    new_embs = [e for f, e in pending.embeddings if f in new_frames]
    old_embs = old_embeddings if old_embeddings is not None else [e for _, e in terminated.embeddings]
    dist = match_distance(new_embs, old_embs, k)
    centroid = np.linalg.norm(np.mean(_embedding_array(new_embs)[:CENTROID_WINDOW], axis=0)
                              - np.mean(_embedding_array(old_embs)[-CENTROID_WINDOW:], axis=0))
    o_c, o_s, o_v = _window_stats(old_items[-k:])
    n_c, n_s, n_v = _window_stats(new_items[:k])
    return ReinstateFeatures(
        embedding_distance=dist,
        center_gap=tuple(n_c - o_c),
        size_gap=tuple(n_s - o_s),
        velocity_gap=tuple(n_v - o_v),
        time_gap=new_items[0][0] - old_items[-1][0],
        old_confidence=_confidence(terminated),
        new_confidence=_confidence(pending, new_frames),
        old_velocity=tuple(o_v),
        old_height=float(o_s[1]),
        fps=fps,
        centroid_distance=float(centroid),
    )


def classifier_probability(features: ReinstateFeatures | Iterable[ReinstateFeatures],
                           model: MlpModel) -> np.ndarray | float:
    if isinstance(features, ReinstateFeatures):
        x = features.to_vector()
    else:
        x = np.stack([f.to_vector() for f in features])
    if x.shape[-1] != model.layer_dims[0]:
        raise DimensionMismatch(f"features have {x.shape[-1]} values, model expects "
                                f"{model.layer_dims[0]}")
    out = model.forward(x)
    return float(out[0]) if out.ndim == 1 else out[:, 0]


def decide_classifier(features: ReinstateFeatures, model: MlpModel,
                      mode: str = "online") -> Decision:
    """Reinstate when the classifier output is strictly above 0.5.

    ``mode`` only records how the features were gathered; online callers pass
    features from the first frames of the new track, offline callers from the
    whole track.
    """
    if mode not in ("online", "offline"):
        raise ValueError(f"mode must be online or offline, got {mode!r}")
    p = classifier_probability(features, model)
    return Decision.REINSTATE if p > 0.5 else Decision.NEW_TRACK


def offline_links(tracks: Sequence, model: MlpModel, fps: float,
                  buffer_seconds: float = BUFFER_SECONDS, k: int = TOP_K) -> list[tuple[int, int]]:
    """Post-pass linking of completed tracks, returned as ``(old_index, new_index)``.

    Every ordered pair where the new track starts after the old one ends, within
    the buffer horizon, is scored with whole-track features. Links are chosen
    jointly: a maximum-weight matching of track ends to track starts, weighted
    by the classifier log-odds and restricted to probabilities above 0.5. Each
    track thus gets at most one successor and one predecessor, and a chain of
    confident links beats a single link skipping over its middle.
    """
    horizon = int(round(buffer_seconds * fps))
    firsts = [min(t.boxes) for t in tracks]
    lasts = [max(t.boxes) for t in tracks]
    pairs, feats = [], []
    for j, new in enumerate(tracks):
        if not new.embeddings:
            continue
        for i, old in enumerate(tracks):
            gap = firsts[j] - lasts[i]
            if i == j or gap <= 0 or gap > horizon:
                continue
            old_embs = [e for f, e in old.embeddings if f >= firsts[j] - horizon]
            if not old_embs:
                continue
            pairs.append((i, j))
            feats.append(extract_features(new, old, k=k, old_embeddings=old_embs, fps=fps))
    if not pairs:
        return []
    probs = np.atleast_1d(classifier_probability(feats, model))
    keep = [n for n in range(len(pairs)) if probs[n] > 0.5]
    if not keep:
        return []
    olds = sorted({pairs[n][0] for n in keep})
    news = sorted({pairs[n][1] for n in keep})
    row = {t: r for r, t in enumerate(olds)}
    col = {t: c for c, t in enumerate(news)}
    weight = np.zeros((len(olds), len(news)))
    for n in keep:
        p = min(float(probs[n]), 1 - 1e-12)
        weight[row[pairs[n][0]], col[pairs[n][1]]] = np.log(p / (1 - p))
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return sorted((olds[r], news[c]) for r, c in zip(rows, cols) if weight[r, c] > 0)
