"""Per-frame cue bundles and the providers that produce them.

A provider stands in for the three network branches: for every frame it
returns the detections, and for every queried track the Siamese response
(visibility and motion) measured inside the track's search region.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import (DEFAULT_SEARCH_RATIO, BBox, MotionDelta, check_visibility,
                   encode_motion, iou, search_region)


class OutOfBounds(IndexError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int, path: str | None = None):
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.path = path


class MissingEmbedding(RuntimeError):
    pass


@dataclass
class Detection:
    box: BBox
    score: float
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


@dataclass
class TrackResponse:
    visibility: float
    motion: MotionDelta
    # appearance of whatever the track branch locked onto, when available
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        check_visibility(self.visibility)


@dataclass
class FrameCues:
    frame: int
    detections: list[Detection] = field(default_factory=list)
    responses: dict[int, TrackResponse] = field(default_factory=dict)


class CueProvider(Protocol):
    num_frames: int
    fps: float
    has_embeddings: bool

    def query(self, frame: int, active_targets: Mapping[int, BBox]) -> FrameCues: ...


def _check_frame(frame: int, num_frames: int) -> None:
    if frame < 0 or frame >= num_frames:
        raise OutOfBounds(f"frame {frame} outside sequence of {num_frames} frames")


def associate_in_region(target: BBox, detections: Sequence[Detection],
                        search_ratio: float = DEFAULT_SEARCH_RATIO) -> TrackResponse:
    """Model-free track response: best-IoU detection whose center lies in the search region.

    Visibility is that IoU, motion points at the detection. No candidate gives
    visibility 0 and zero motion.
    """
    region = search_region(target, search_ratio)
    best, best_iou = None, 0.0
    for det in detections:
        if not region.contains_point(det.box.cx, det.box.cy):
            continue
        v = iou(target, det.box)
        if v > best_iou:
            best, best_iou = det, v
    if best is None:
        return TrackResponse(0.0, MotionDelta.zero())
    return TrackResponse(min(max(best_iou, 0.0), 1.0), encode_motion(target, best.box),
                         best.embedding)


class ScriptedProvider:
    """Replays fixed detections; responses come from a ground-truth world or a fallback.

    ``world`` maps frame -> {person id: box}. When given, each queried target is
    identified with the person it overlaps most at the previous frame and the
    response is exact: visibility 1 and the true motion while the person stays
    inside the search region, visibility 0 otherwise. Without a world the
    detection-association fallback is used.
    """

    def __init__(self, detections: Sequence[Sequence[Detection]],
                 world: Mapping[int, Mapping[int, BBox]] | None = None,
                 fps: float = 30.0, search_ratio: float = DEFAULT_SEARCH_RATIO,
                 has_embeddings: bool | None = None):
        self.frames = [list(d) for d in detections]
        self.num_frames = len(self.frames)
        self.world = world
        self.fps = fps
        self.search_ratio = search_ratio
        if has_embeddings is None:
            has_embeddings = any(d.embedding is not None for f in self.frames for d in f)
        self.has_embeddings = has_embeddings

    def _world_response(self, frame: int, target: BBox) -> TrackResponse:
        prev = self.world.get(frame - 1, {})
        best_pid, best_iou = None, 0.0
        for pid, box in sorted(prev.items()):
            v = iou(target, box)
            if v > best_iou:
                best_pid, best_iou = pid, v
        if best_pid is None or best_iou < 0.5:
            return TrackResponse(0.0, MotionDelta.zero())
        nxt = self.world.get(frame, {}).get(best_pid)
        if nxt is None:
            return TrackResponse(0.0, MotionDelta.zero())
        region = search_region(target, self.search_ratio)
        if not region.contains_point(nxt.cx, nxt.cy):
            return TrackResponse(0.0, MotionDelta.zero())
        return TrackResponse(1.0, encode_motion(target, nxt))

    def query(self, frame: int, active_targets: Mapping[int, BBox]) -> FrameCues:
        _check_frame(frame, self.num_frames)
        dets = self.frames[frame]
        responses = {}
        for key, box in active_targets.items():
            if self.world is not None:
                responses[key] = self._world_response(frame, box)
            else:
                responses[key] = associate_in_region(box, dets, self.search_ratio)
        return FrameCues(frame, list(dets), responses)


class FileProvider:
    """Replays a MOTChallenge detection file, optionally with a line-aligned embedding file."""

    def __init__(self, frames: list[list[Detection]], fps: float = 30.0,
                 search_ratio: float = DEFAULT_SEARCH_RATIO, has_embeddings: bool = False):
        self.frames = frames
        self.num_frames = len(frames)
        self.fps = fps
        self.search_ratio = search_ratio
        self.has_embeddings = has_embeddings

    @classmethod
    def load(cls, det_path: str | Path, emb_path: str | Path | None = None, *,
             fps: float = 30.0, num_frames: int | None = None,
             search_ratio: float = DEFAULT_SEARCH_RATIO,
             min_score: float = 0.0) -> "FileProvider":
        from .io import read_embeddings, read_mot_rows

        rows = read_mot_rows(det_path)
        embeddings = None
        if emb_path is not None:
            embeddings = read_embeddings(emb_path)
            if len(embeddings) != len(rows):
                raise ParseError(
                    f"embedding file has {len(embeddings)} rows, detection file has {len(rows)}",
                    line=min(len(embeddings), len(rows)) + 1, path=str(emb_path))
        n = max((r.frame for r in rows), default=0)
        if num_frames is not None:
            n = max(n, num_frames)
        frames: list[list[Detection]] = [[] for _ in range(n)]
        for i, row in enumerate(rows):
            # detector confidences outside [0, 1] (e.g. DPM) are squashed
            score = row.conf if 0.0 <= row.conf <= 1.0 else float(1.0 / (1.0 + np.exp(-row.conf)))
            if score < min_score:
                continue
            emb = embeddings[i] if embeddings is not None else None
            frames[row.frame - 1].append(Detection(row.box, score, emb))
        return cls(frames, fps=fps, search_ratio=search_ratio,
                   has_embeddings=embeddings is not None)

    def query(self, frame: int, active_targets: Mapping[int, BBox]) -> FrameCues:
        _check_frame(frame, self.num_frames)
        dets = self.frames[frame]
        responses = {k: associate_in_region(b, dets, self.search_ratio)
                     for k, b in active_targets.items()}
        return FrameCues(frame, list(dets), responses)
