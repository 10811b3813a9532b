"""Online track lifecycle: continue, terminate, initiate or reinstate.

Each step consumes the cues of the next frame. Active tracks whose response
visibility reaches the threshold move by the regressed motion; the rest are
terminated. Detections overlapping a continued track are merged into it, the
remaining confident detections start pending tracks. A pending track is
followed for a few frames and then either reinstates a terminated track or
receives a fresh ID.

Offline mode adds a post-pass at ``finish``: the completed tracks are linked
end to start by a classifier that sees whole tracks, so fragments the online
decision missed can still be joined.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BBox, decode_motion, iou_matrix
from .cues import CueProvider, FrameCues, MissingEmbedding
from .learn import MlpModel, load_model
from .metrics import TrajectorySet
from .reinstate import (EmbeddingBuffer, classifier_probability, extract_features,
                        match_distance, offline_links, select_by_distance)

log = logging.getLogger(__name__)

REINSTATE_MODES = ("off", "threshold", "online", "offline")


class FrameGap(ValueError):
    pass


class TrackState(enum.Enum):
    ACTIVE = "active"
    TERMINATED = "terminated"
    FINISHED = "finished"


@dataclass
class Track:
    uid: int
    started_at: int
    id: int | None = None
    state: TrackState = TrackState.ACTIVE
    boxes: dict[int, BBox] = field(default_factory=dict)
    visibilities: dict[int, float] = field(default_factory=dict)
    embeddings: list[tuple[int, np.ndarray]] = field(default_factory=list)
    terminated_at: int | None = None

    @property
    def pending(self) -> bool:
        return self.id is None

    @property
    def confidence(self) -> float:
        """Running mean of the per-frame visibility scores."""
        return float(np.mean(list(self.visibilities.values()))) if self.visibilities else 0.0

    @property
    def last_frame(self) -> int:
        return next(reversed(self.boxes))

    @property
    def last_box(self) -> BBox:
        return self.boxes[self.last_frame]

    def append(self, frame: int, box: BBox, visibility: float, embedding=None) -> None:
        if self.boxes and frame <= self.last_frame:
            raise ValueError(f"frame {frame} not after {self.last_frame}")
        self.boxes[frame] = box
        self.visibilities[frame] = float(visibility)
        if embedding is not None:
            self.embeddings.append((frame, np.asarray(embedding, dtype=np.float64)))

    def terminate(self, frame: int) -> None:
        self.state = TrackState.TERMINATED
        self.terminated_at = frame


@dataclass
class SolverConfig:
    iou_merge_threshold: float = 0.3
    visibility_threshold: float = 0.3
    detection_score_threshold: float = 0.5
    search_ratio: float = 2.0
    duplicate_iou: float = 0.9
    use_track_branch: bool = True
    reinstate_mode: str = "threshold"
    reid_distance_threshold: float = 0.5
    top_k: int = 5
    buffer_seconds: float = 30.0
    pending_frames: int = 5
    fps: float = 30.0
    classifier_model: str = ""
    # offline mode only: classifier for the in-pass decisions (threshold rule when empty)
    online_model: str = ""

    def __post_init__(self) -> None:
        for name in ("iou_merge_threshold", "visibility_threshold",
                     "detection_score_threshold", "duplicate_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.search_ratio < 1:
            raise ValueError(f"search_ratio must be >= 1, got {self.search_ratio}")
        if self.reinstate_mode not in REINSTATE_MODES:
            raise ValueError(f"reinstate_mode must be one of {REINSTATE_MODES}")
        if self.reid_distance_threshold < 0 or self.top_k < 1 or self.pending_frames < 1:
            raise ValueError("reid_distance_threshold >= 0, top_k >= 1 and pending_frames >= 1")
        if self.buffer_seconds <= 0 or self.fps <= 0:
            raise ValueError("buffer_seconds and fps must be positive")

    @property
    def uses_embeddings(self) -> bool:
        return self.reinstate_mode != "off" or not self.use_track_branch


@dataclass
class SolverState:
    current_frame: int = -1
    tracks: dict[int, Track] = field(default_factory=dict)
    next_uid: int = 0
    next_id: int = 1
    buffer: EmbeddingBuffer = field(default_factory=EmbeddingBuffer)


class Solver:
    def __init__(self, config: SolverConfig | None = None, fps: float | None = None,
                 classifier: MlpModel | None = None, online_classifier: MlpModel | None = None):
        self.config = config or SolverConfig()
        self.fps = fps or self.config.fps
        self.state = SolverState(buffer=EmbeddingBuffer(self.config.buffer_seconds, self.fps))
        self.classifier = classifier
        if self.config.reinstate_mode in ("online", "offline") and classifier is None:
            if not self.config.classifier_model:
                raise ValueError(f"reinstate_mode={self.config.reinstate_mode} needs a classifier")
            self.classifier = load_model(self.config.classifier_model)
        self.online_classifier = online_classifier
        if self.config.reinstate_mode == "online":
            self.online_classifier = self.classifier
        elif online_classifier is None and self.config.online_model:
            self.online_classifier = load_model(self.config.online_model)

    # queries -----------------------------------------------------------------

    def active_tracks(self) -> list[Track]:
        return [t for t in self.state.tracks.values() if t.state is TrackState.ACTIVE]

    def active_targets(self) -> dict[int, BBox]:
        return {t.uid: t.last_box for t in self.active_tracks()}

    # step --------------------------------------------------------------------

    def step(self, cues: FrameCues) -> SolverState:
        st, cfg = self.state, self.config
        t = cues.frame
        if t != st.current_frame + 1:
            raise FrameGap(f"expected frame {st.current_frame + 1}, got {t}")
        # age out the buffer first so decisions at t never see embeddings older than the horizon
        for key in st.buffer.evict(t):
            tr = st.tracks.get(key)
            if tr is not None and tr.state is TrackState.TERMINATED:
                tr.state = TrackState.FINISHED
        dets = cues.detections
        if cfg.use_track_branch:
            used = self._track_branch(t, cues)
        else:
            used = self._reid_association(t, dets)
        for j, det in enumerate(dets):
            if j in used or det.score < cfg.detection_score_threshold:
                continue
            self._spawn(t, det)
        self._suppress_duplicates(t)
        self._decide_pending(t)
        st.current_frame = t
        return st

    def _track_branch(self, t: int, cues: FrameCues) -> set[int]:
        cfg = self.config
        continued: list[tuple[Track, BBox, float, object]] = []
        for tr in sorted(self.active_tracks(), key=lambda x: x.uid):
            resp = cues.responses.get(tr.uid)
            if resp is None:
                raise KeyError(f"cues for frame {t} lack a response for track {tr.uid}")
            if resp.visibility >= cfg.visibility_threshold:
                continued.append((tr, decode_motion(tr.last_box, resp.motion),
                                  resp.visibility, resp.embedding))
            else:
                tr.terminate(t)
        dets = cues.detections
        match: dict[int, int] = {}
        if continued and dets:
            sim = iou_matrix(np.array([b.as_tuple() for _, b, _, _ in continued]),
                             np.array([d.box.as_tuple() for d in dets]))
            cand = [(-sim[i, j], -dets[j].score, continued[i][0].uid, j, i)
                    for i, j in zip(*np.nonzero(sim > cfg.iou_merge_threshold))]
            cand.sort()
            taken = set()
            for _, _, _, j, i in cand:
                if i in match or j in taken:
                    continue
                match[i] = j
                taken.add(j)
        for i, (tr, box, v, emb) in enumerate(continued):
            if i in match:
                det = dets[match[i]]
                box = det.box
                if det.embedding is not None:
                    emb = det.embedding
            tr.append(t, box, v, emb)
            if emb is not None and not tr.pending:
                self.state.buffer.add(tr.uid, t, tr.embeddings[-1][1])
        return set(match.values())

    def _reid_association(self, t: int, dets) -> set[int]:
        """Appearance-only association used when the track branch is disabled."""
        cfg = self.config
        active = sorted(self.active_tracks(), key=lambda x: x.uid)
        usable = [j for j, d in enumerate(dets)
                  if d.embedding is not None and d.score >= cfg.detection_score_threshold]
        matched: dict[int, int] = {}
        if active and usable:
            cost = np.full((len(active), len(usable)), np.inf)
            for a, tr in enumerate(active):
                recent = [e for _, e in tr.embeddings[-cfg.top_k:]]
                if not recent:
                    continue
                R = np.stack(recent)
                for u, j in enumerate(usable):
                    cost[a, u] = np.linalg.norm(R - dets[j].embedding, axis=1).min()
            valid = cost < cfg.reid_distance_threshold
            if valid.any():
                rows, cols = linear_sum_assignment(np.where(valid, cost, 1e6))
                matched = {r: usable[c] for r, c in zip(rows, cols) if valid[r, c]}
        for a, tr in enumerate(active):
            if a in matched:
                det = dets[matched[a]]
                tr.append(t, det.box, det.score, det.embedding)
                if not tr.pending:
                    self.state.buffer.add(tr.uid, t, tr.embeddings[-1][1])
            else:
                tr.terminate(t)
        return set(matched.values())

    def _spawn(self, t: int, det) -> None:
        st = self.state
        tr = Track(uid=st.next_uid, started_at=t)
        st.next_uid += 1
        tr.append(t, det.box, det.score, det.embedding)
        st.tracks[tr.uid] = tr
        if self.config.reinstate_mode == "off":
            self._confirm(tr)

    def _confirm(self, tr: Track) -> None:
        tr.id = self.state.next_id
        self.state.next_id += 1
        for f, e in tr.embeddings:
            self.state.buffer.add(tr.uid, f, e)

    def _suppress_duplicates(self, t: int) -> None:
        cfg = self.config
        live = [tr for tr in self.active_tracks() if tr.last_frame == t]
        if len(live) < 2:
            return
        # confirmed before pending, then older first
        live.sort(key=lambda x: (x.pending, x.uid))
        sim = iou_matrix(np.array([tr.last_box.as_tuple() for tr in live]),
                         np.array([tr.last_box.as_tuple() for tr in live]))
        dead = set()
        for i in range(len(live)):
            if i in dead:
                continue
            for j in range(i + 1, len(live)):
                if j not in dead and sim[i, j] > cfg.duplicate_iou:
                    dead.add(j)
        for j in dead:
            self._drop_frame(live[j], t)

    def _drop_frame(self, tr: Track, t: int) -> None:
        del tr.boxes[t]
        del tr.visibilities[t]
        if tr.embeddings and tr.embeddings[-1][0] == t:
            tr.embeddings.pop()
            if not tr.pending:
                items = self.state.buffer.get(tr.uid)
                if items and items[-1][0] == t:
                    items.pop()
        if not tr.boxes:
            # a duplicate born this frame never existed
            del self.state.tracks[tr.uid]
            if not tr.pending:
                self.state.buffer.drop(tr.uid)
            return
        tr.terminate(t)

    # reinstatement -----------------------------------------------------------

    def _decide_pending(self, t: int, final: bool = False) -> None:
        cfg = self.config
        for tr in sorted(self.state.tracks.values(), key=lambda x: x.uid):
            if not tr.pending:
                continue
            ready = (final or tr.state is not TrackState.ACTIVE
                     or t - tr.started_at + 1 >= cfg.pending_frames)
            if not ready:
                continue
            target = self._reinstatement_target(tr)
            if target is None:
                self._confirm(tr)
            else:
                self._reinstate(target, tr)

    def _candidates(self, pending: Track) -> list[Track]:
        return [tr for tr in self.state.tracks.values()
                if tr.state is TrackState.TERMINATED and not tr.pending
                and tr.uid in self.state.buffer and tr.last_frame < pending.started_at]

    def _reinstatement_target(self, pending: Track) -> Track | None:
        cfg = self.config
        if not pending.embeddings:
            return None
        cands = self._candidates(pending)
        if not cands:
            return None
        buf = self.state.buffer
        rule = cfg.reinstate_mode
        if rule == "offline":
            rule = "threshold" if self.online_classifier is None else "online"
        if rule == "threshold":
            dists = {c.uid: (match_distance([e for _, e in pending.embeddings],
                                            buf.vectors(c.uid), cfg.top_k), c.terminated_at)
                     for c in cands}
            key = select_by_distance(dists, cfg.reid_distance_threshold)
            return None if key is None else self.state.tracks[key]
        if rule == "online":
            feats = [extract_features(pending, c, k=cfg.top_k, pending_window=cfg.pending_frames,
                                      old_embeddings=buf.vectors(c.uid), fps=self.fps)
                     for c in cands]
            probs = np.atleast_1d(classifier_probability(feats, self.online_classifier))
            best = int(np.argmax(probs))
            return cands[best] if probs[best] > 0.5 else None
        return None

    def _reinstate(self, old: Track, pending: Track) -> None:
        st = self.state
        old.boxes.update(pending.boxes)
        old.visibilities.update(pending.visibilities)
        old.embeddings.extend(pending.embeddings)
        for f, e in pending.embeddings:
            st.buffer.add(old.uid, f, e)
        old.state = pending.state
        old.terminated_at = pending.terminated_at
        del st.tracks[pending.uid]
        log.debug("track %d reinstated at frame %d", old.id, pending.started_at)

    # output ------------------------------------------------------------------

    def finish(self, sequence_length: int | None = None) -> TrajectorySet:
        st = self.state
        self._decide_pending(st.current_frame, final=True)
        for tr in st.tracks.values():
            tr.state = TrackState.FINISHED
        tracks = sorted(st.tracks.values(), key=lambda x: x.id)
        n = st.current_frame + 1 if sequence_length is None else sequence_length
        if self.config.reinstate_mode == "offline" and tracks:
            tracks = self._offline_merge(tracks)
        out = TrajectorySet({}, n, self.fps)
        for tr in tracks:
            out.tracks[tr.id] = dict(tr.boxes)
            out.scores[tr.id] = dict(tr.visibilities)
        return out

    def _offline_merge(self, tracks: list[Track]) -> list[Track]:
        usable = [tr for tr in tracks if tr.embeddings]
        links = offline_links(usable, self.classifier, self.fps,
                              self.config.buffer_seconds, self.config.top_k)
        nxt = {usable[i].uid: usable[j].uid for i, j in links}
        has_prev = set(nxt.values())
        by_uid = {tr.uid: tr for tr in tracks}
        merged = []
        for tr in tracks:
            if tr.uid in has_prev:
                continue
            head = tr
            cur = tr.uid
            while cur in nxt:
                cur = nxt[cur]
                tail = by_uid[cur]
                head.boxes.update(tail.boxes)
                head.visibilities.update(tail.visibilities)
                head.embeddings.extend(tail.embeddings)
            head.boxes = dict(sorted(head.boxes.items()))
            head.visibilities = dict(sorted(head.visibilities.items()))
            merged.append(head)
        merged.sort(key=lambda x: x.id)
        for new_id, tr in enumerate(merged, start=1):
            tr.id = new_id
        return merged


def run(provider: CueProvider, config: SolverConfig | None = None,
        classifier: MlpModel | None = None, online_classifier: MlpModel | None = None) -> TrajectorySet:
    """Single online pass over the provider."""
    config = config or SolverConfig()
    if config.uses_embeddings and provider.num_frames and not provider.has_embeddings:
        raise MissingEmbedding("this configuration needs embeddings but the provider has none")
    solver = Solver(config, fps=getattr(provider, "fps", None), classifier=classifier,
                    online_classifier=online_classifier)
    for t in range(provider.num_frames):
        targets = solver.active_targets() if config.use_track_branch else {}
        solver.step(provider.query(t, targets))
    return solver.finish(provider.num_frames)
