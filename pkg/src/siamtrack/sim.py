"""Synthetic worlds with ground truth and a simulated cue stream.

People walk with constant speed and slowly turning heading, bouncing off the
arena walls. A person is hidden when scripted, before entering, after leaving,
or when a nearer person (larger box bottom) covers most of their box. Ground
truth holds visible boxes only.

The provider turns the world into cues. Without noise, cues agree exactly with
the ground truth. With noise, detections are jittered, missed and polluted by
false positives, embeddings drift and get mixed with occluders, and the track
branch occasionally loses its target or jumps to a neighbour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Mapping

import numpy as np

from .core import BBox, MotionDelta, encode_motion, iou_matrix, search_region
from .cues import Detection, FrameCues, OutOfBounds, TrackResponse
from .metrics import TrajectorySet

NOISE_FIELDS = ("box_jitter", "miss_rate", "fp_rate", "emb_noise", "visibility_flip_rate",
                "drift_rate", "appearance_drift", "lookalike_rate", "occluder_blend",
                "motion_noise", "shuffle_period")
RATE_FIELDS = ("miss_rate", "visibility_flip_rate", "drift_rate", "lookalike_rate",
               "occluder_blend", "random_occlusion_rate")

# rng stream ids
_WORLD, _DET, _FP, _RESP, _NEG, _PROTO, _OBJECT = range(7)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_people: int = 3
    frames: int = 100
    fps: float = 10.0
    arena_w: float = 1280.0
    arena_h: float = 720.0
    min_height: float = 80.0
    max_height: float = 140.0
    aspect: float = 0.4
    speed_min: float = 1.0
    speed_max: float = 3.0
    turn_rate: float = 0.05
    layout: str = "random"  # random | lanes | crossing | partial
    entry_spread: float = 0.0
    occlusion_script: str = ""  # "pid:start-end;pid:start-end", frames, both ends inclusive
    random_occlusion_rate: float = 0.0  # full occlusions started per person per second
    occlusion_min_s: float = 1.0
    occlusion_max_s: float = 4.0
    # seconds a person stays partly covered by the occluding object around a full occlusion
    occlusion_fade_s: float = 0.0
    hide_coverage: float = 0.7
    partial_coverage: float = 0.3
    embedding_dim: int = 128
    # noise
    box_jitter: float = 0.0
    miss_rate: float = 0.0
    fp_rate: float = 0.0
    emb_noise: float = 0.0
    visibility_flip_rate: float = 0.0
    drift_rate: float = 0.0
    appearance_drift: float = 0.0
    lookalike_rate: float = 0.0
    occluder_blend: float = 0.0
    motion_noise: float = 0.0
    shuffle_period: int = 0

    def __post_init__(self) -> None:
        if self.frames < 1 or self.n_people < 0:
            raise ValueError("frames >= 1 and n_people >= 0 required")
        for name in RATE_FIELDS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in NOISE_FIELDS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.layout not in ("random", "lanes", "crossing", "partial"):
            raise ValueError(f"unknown layout {self.layout!r}")
        parse_occlusion_script(self.occlusion_script)

    def without_noise(self) -> "WorldConfig":
        return replace(self, **{f: 0 for f in NOISE_FIELDS})

    @property
    def noiseless(self) -> bool:
        return all(getattr(self, f) == 0 for f in NOISE_FIELDS)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<world>") -> "WorldConfig":
        from .io import apply_kv, dataclass_types, parse_kv
        return apply_kv(cls, parse_kv(text, source), dataclass_types(cls))


def parse_occlusion_script(script: str) -> list[tuple[int, int, int]]:
    out = []
    for part in filter(None, (p.strip() for p in script.split(";"))):
        try:
            pid, span = part.split(":")
            start, end = span.split("-")
            out.append((int(pid), int(start), int(end)))
        except ValueError:
            raise ValueError(f"bad occlusion script entry {part!r}; use pid:start-end") from None
    return out


@dataclass
class World:
    config: WorldConfig
    boxes: np.ndarray        # (frames, n, 4) x, y, w, h
    present: np.ndarray      # (frames, n) inside the scene
    visible: np.ndarray      # (frames, n)
    coverage: np.ndarray     # (frames, n) fraction covered by the main occluder
    occluder: np.ndarray     # (frames, n) main occluder or -1; values >= n are static objects
    prototypes: np.ndarray   # (n + objects, dim) unit vectors
    drift_dirs: np.ndarray   # (n + objects, dim) unit vectors orthogonal to the prototypes

    def box(self, frame: int, pid: int) -> BBox:
        return BBox(*self.boxes[frame, pid])

    def visible_ids(self, frame: int) -> np.ndarray:
        return np.nonzero(self.visible[frame])[0]

    def appearance(self, pid: int, frame: int) -> np.ndarray:
        theta = self.config.appearance_drift * frame / self.config.fps
        if theta == 0:
            return self.prototypes[pid]
        return math.cos(theta) * self.prototypes[pid] + math.sin(theta) * self.drift_dirs[pid]

    def ground_truth(self) -> TrajectorySet:
        cfg = self.config
        gt = TrajectorySet({}, cfg.frames, cfg.fps)
        for f in range(cfg.frames):
            for pid in self.visible_ids(f):
                gt.add(int(pid) + 1, f, self.box(f, int(pid)))
        return gt


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _prototypes(cfg: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, _PROTO])
    n, d = cfg.n_people, cfg.embedding_dim
    protos = _unit(rng.normal(size=(max(n, 1), d)))[:n]
    look = rng.random(n)
    partner = rng.integers(0, max(n, 1), size=n)
    tweak = _unit(rng.normal(size=(max(n, 1), d)))[:n]
    for i in range(1, n):
        if look[i] < cfg.lookalike_rate:
            j = int(partner[i]) % i
            # about 0.35 away from an earlier identity
            protos[i] = _unit(protos[j] + 0.36 * tweak[i])
    raw = rng.normal(size=(max(n, 1), d))[:n]
    ortho = raw - (raw * protos).sum(1, keepdims=True) * protos
    return protos, _unit(ortho) if n else ortho


def _initial_state(cfg: WorldConfig, rng: np.random.Generator):
    n = cfg.n_people
    h = rng.uniform(cfg.min_height, cfg.max_height, size=n)
    w = h * cfg.aspect
    speed = rng.uniform(cfg.speed_min, cfg.speed_max, size=n)
    heading = rng.uniform(0, 2 * math.pi, size=n)
    cx = rng.uniform(w / 2, cfg.arena_w - w / 2)
    cy = rng.uniform(h / 2, cfg.arena_h - h / 2)
    turn = np.full(n, cfg.turn_rate)
    if cfg.layout == "lanes":
        # horizontal lanes far enough apart never to overlap
        h[:] = cfg.min_height
        w[:] = h * cfg.aspect
        gap = cfg.arena_h / max(n, 1)
        cy = gap * (np.arange(n) + 0.5)
        heading = np.where(np.arange(n) % 2 == 0, 0.0, math.pi)
        turn[:] = 0.0
    elif cfg.layout == "crossing":
        # two people meeting head-on, vertically offset by a tenth of their height
        h[:] = cfg.min_height
        w[:] = h * cfg.aspect
        meet = cfg.arena_w / 2
        travel = speed.mean() * cfg.frames / 2
        speed[:] = speed.mean()
        cx[:] = meet
        if n >= 1:
            cx[0], heading[0] = meet - travel, 0.0
        if n >= 2:
            cx[1], heading[1] = meet + travel, math.pi
        cy[:] = cfg.arena_h / 2
        if n >= 2:
            cy[1] += 0.1 * h[1]
        for k in range(2, n):
            cy[k] = (k - 1) * cfg.arena_h / n * 0.3
            cx[k] = w[k] + (k * 3 * w[k]) % (cfg.arena_w - 2 * w[k])
            heading[k] = 0.0
        turn[:] = 0.0
    elif cfg.layout == "partial":
        # person 0 walks behind a slow person 1, half covered at the closest point
        h[:] = cfg.min_height
        w[:] = h * cfg.aspect
        if n >= 2:
            cy[0] = cfg.arena_h / 2
            cy[1] = cy[0] + 0.5 * h[0]
            cx[1] = cfg.arena_w / 2
            speed[1] = 0.0
            travel = speed[0] * cfg.frames / 2
            cx[0] = cx[1] - travel
            heading[0] = 0.0
        turn[:] = 0.0
    return cx, cy, w, h, speed, heading, turn


def _occlusions(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coverage of each box by its worst nearer neighbour."""
    n = len(boxes)
    if n == 0:
        return np.zeros(0), np.full(0, -1)
    x2 = boxes[:, 0] + boxes[:, 2]
    y2 = boxes[:, 1] + boxes[:, 3]
    ix = np.minimum(x2[:, None], x2[None, :]) - np.maximum(boxes[:, None, 0], boxes[None, :, 0])
    iy = np.minimum(y2[:, None], y2[None, :]) - np.maximum(boxes[:, None, 1], boxes[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    frac = inter / (boxes[:, 2] * boxes[:, 3])[:, None]
    order = y2 + np.arange(n) * 1e-9
    nearer = order[None, :] > order[:, None]
    frac = np.where(nearer, frac, 0.0)
    occ = frac.argmax(axis=1)
    cov = frac[np.arange(n), occ]
    return cov, np.where(cov > 0, occ, -1)


def simulate_world(cfg: WorldConfig) -> World:
    rng = np.random.default_rng([cfg.seed, _WORLD])
    n, F = cfg.n_people, cfg.frames
    cx, cy, w, h, speed, heading, turn = _initial_state(cfg, rng)
    enter = np.zeros(n, dtype=int)
    leave = np.full(n, F, dtype=int)
    if cfg.entry_spread > 0:
        enter = (rng.random(n) * cfg.entry_spread * F).astype(int)
    hidden = np.zeros((F, n), dtype=bool)
    for pid, start, end in parse_occlusion_script(cfg.occlusion_script):
        if 0 <= pid < n:
            hidden[max(start, 0):min(end + 1, F), pid] = True
    if cfg.random_occlusion_rate > 0:
        p_start = cfg.random_occlusion_rate / cfg.fps
        starts = rng.random((F, n)) < p_start
        lengths = rng.uniform(cfg.occlusion_min_s, cfg.occlusion_max_s, size=(F, n)) * cfg.fps
        for f, pid in zip(*np.nonzero(starts)):
            hidden[f:min(F, f + int(lengths[f, pid])), pid] = True
    turns = rng.normal(size=(F, n)) * turn
    boxes = np.zeros((F, n, 4))
    for f in range(F):
        boxes[f, :, 0] = cx - w / 2
        boxes[f, :, 1] = cy - h / 2
        boxes[f, :, 2] = w
        boxes[f, :, 3] = h
        heading = heading + turns[f]
        cx = cx + speed * np.cos(heading)
        cy = cy + speed * np.sin(heading)
        # bounce off the walls
        lo, hi = w / 2, cfg.arena_w - w / 2
        out = (cx < lo) | (cx > hi)
        cx = np.clip(cx, lo, hi)
        heading = np.where(out, math.pi - heading, heading)
        lo, hi = h / 2, cfg.arena_h - h / 2
        out = (cy < lo) | (cy > hi)
        cy = np.clip(cy, lo, hi)
        heading = np.where(out, -heading, heading)
    frame_idx = np.arange(F)[:, None]
    present = (frame_idx >= enter[None, :]) & (frame_idx < leave[None, :])
    coverage = np.zeros((F, n))
    occluder = np.full((F, n), -1)
    visible = np.zeros((F, n), dtype=bool)
    for f in range(F):
        ids = np.nonzero(present[f] & ~hidden[f])[0]
        cov, occ = _occlusions(boxes[f, ids])
        coverage[f, ids] = cov
        occluder[f, ids] = np.where(occ >= 0, ids[np.maximum(occ, 0)], -1)
        visible[f, ids] = cov < cfg.hide_coverage
    fade_cov, fade_obj, n_objects = _fades(hidden, int(round(cfg.occlusion_fade_s * cfg.fps)),
                                           cfg.hide_coverage)
    take = visible & (fade_cov > coverage)
    coverage[take] = fade_cov[take]
    occluder[take] = n + fade_obj[take]
    protos, drift = _prototypes(cfg)
    if n_objects:
        orng = np.random.default_rng([cfg.seed, _OBJECT])
        objs = _unit(orng.normal(size=(n_objects, cfg.embedding_dim)))
        raw = orng.normal(size=objs.shape)
        protos = np.vstack([protos, objs])
        drift = np.vstack([drift, _unit(raw - (raw * objs).sum(1, keepdims=True) * objs)])
    return World(cfg, boxes, present, visible, coverage, occluder, protos, drift)


def _fades(hidden: np.ndarray, length: int, peak: float):
    """Partial coverage ramps next to each hidden run, one occluding object per run."""
    F, n = hidden.shape
    cov = np.zeros((F, n))
    obj = np.full((F, n), -1)
    count = 0
    if length <= 0:
        return cov, obj, 0
    ramp = peak * (1 - np.arange(1, length + 1) / (length + 1))
    for pid in range(n):
        col = np.concatenate([[0], hidden[:, pid].astype(int), [0]])
        starts = np.nonzero(np.diff(col) == 1)[0]
        ends = np.nonzero(np.diff(col) == -1)[0]
        for a, b in zip(starts, ends):
            for k in range(length):
                for f in (b + k, a - 1 - k):
                    if 0 <= f < F and not hidden[f, pid] and ramp[k] > cov[f, pid]:
                        cov[f, pid] = ramp[k]
                        obj[f, pid] = count
            count += 1
    return cov, obj, count


class SimProvider:
    """Cue stream over a simulated world; see the module docstring for the noise model."""

    def __init__(self, world: World, search_ratio: float = 2.0):
        self.world = world
        self.cfg = world.config
        self.num_frames = self.cfg.frames
        self.fps = self.cfg.fps
        self.has_embeddings = True
        self.search_ratio = search_ratio
        self._det_cache: dict[int, list[Detection]] = {}

    # appearance ----------------------------------------------------------------

    def _observed_embedding(self, pid: int, frame: int, noise: np.ndarray) -> np.ndarray:
        w, cfg = self.world, self.cfg
        emb = w.appearance(pid, frame)
        if cfg.occluder_blend > 0 and w.coverage[frame, pid] >= cfg.partial_coverage:
            occ = w.occluder[frame, pid]
            if occ >= 0:
                mix = min(1.0, cfg.occluder_blend * w.coverage[frame, pid])
                emb = (1 - mix) * emb + mix * w.appearance(int(occ), frame)
        if cfg.emb_noise > 0:
            emb = emb + cfg.emb_noise * noise / math.sqrt(len(noise))
        if cfg.noiseless:
            return emb.copy()
        return emb / np.linalg.norm(emb)

    # detections ----------------------------------------------------------------

    def detections(self, frame: int) -> list[Detection]:
        if frame in self._det_cache:
            return self._det_cache[frame]
        w, cfg = self.world, self.cfg
        rng = np.random.default_rng([cfg.seed, _DET, frame])
        dets = []
        for pid in range(cfg.n_people):
            # draw for every person so rates never shift other draws
            u_miss, u_score = rng.random(2)
            jit = rng.normal(size=4)
            noise = rng.normal(size=cfg.embedding_dim)
            if not w.visible[frame, pid] or u_miss < cfg.miss_rate:
                continue
            x, y, bw, bh = w.boxes[frame, pid]
            s = cfg.box_jitter
            box = BBox(x + jit[0] * s * bw, y + jit[1] * s * bh,
                       bw * math.exp(jit[2] * s), bh * math.exp(jit[3] * s))
            score = 1.0 if cfg.noiseless else 0.55 + 0.45 * float(u_score)
            dets.append(Detection(box, score, self._observed_embedding(pid, frame, noise)))
        if cfg.fp_rate > 0:
            frng = np.random.default_rng([cfg.seed, _FP, frame])
            for _ in range(int(frng.poisson(cfg.fp_rate))):
                bh = frng.uniform(cfg.min_height, cfg.max_height)
                bw = bh * cfg.aspect
                box = BBox(frng.uniform(0, cfg.arena_w - bw), frng.uniform(0, cfg.arena_h - bh), bw, bh)
                emb = _unit(frng.normal(size=cfg.embedding_dim))
                dets.append(Detection(box, 0.3 + 0.5 * float(frng.random()), emb))
        self._det_cache[frame] = dets
        if len(self._det_cache) > 4:
            self._det_cache.pop(next(iter(self._det_cache)))
        return dets

    # track branch --------------------------------------------------------------

    def _identify(self, frame: int, target: BBox) -> int | None:
        ids = self.world.visible_ids(frame - 1) if frame > 0 else np.zeros(0, dtype=int)
        if len(ids) == 0:
            return None
        sim = iou_matrix(np.array([target.as_tuple()]), self.world.boxes[frame - 1, ids])[0]
        k = int(np.argmax(sim))
        return int(ids[k]) if sim[k] >= 0.5 else None

    def _shuffle_target(self, frame: int, pid: int) -> int | None:
        ids = [int(i) for i in self.world.visible_ids(frame)
               if self.world.visible[frame - 1, i]]
        if pid not in ids or len(ids) < 2:
            return None
        return ids[(ids.index(pid) + 1) % len(ids)]

    def response(self, frame: int, uid: int, target: BBox) -> TrackResponse:
        w, cfg = self.world, self.cfg
        pid = self._identify(frame, target)
        if pid is None:
            rng = np.random.default_rng([cfg.seed, _NEG, frame, uid])
            v = 0.0 if cfg.noiseless else 0.2 * float(rng.random())
            return TrackResponse(v, MotionDelta.zero())
        rng = np.random.default_rng([cfg.seed, _RESP, frame, pid])
        u_flip, u_drift, u_v = rng.random(3)
        mnoise = rng.normal(size=4)
        enoise = rng.normal(size=cfg.embedding_dim)
        region = search_region(target, self.search_ratio)
        follow = None
        v = 0.0
        if cfg.shuffle_period and frame % cfg.shuffle_period == 0:
            follow = self._shuffle_target(frame, pid)
            v = 1.0
        if follow is None:
            nxt = w.box(frame, pid) if w.visible[frame, pid] else None
            if nxt is not None and region.contains_point(nxt.cx, nxt.cy):
                if u_flip < cfg.visibility_flip_rate:
                    return TrackResponse(0.3 * float(u_v), MotionDelta.zero())
                follow = pid
                v = 1.0 if cfg.noiseless else 0.7 + 0.3 * float(u_v)
            elif cfg.drift_rate > 0 and u_drift < cfg.drift_rate:
                follow = self._nearest_in_region(frame, region, exclude=pid)
                v = 0.5 + 0.5 * float(u_v)
        if follow is None:
            v = 0.0 if cfg.noiseless else 0.2 * float(u_v)
            return TrackResponse(v, MotionDelta.zero())
        x, y, bw, bh = w.boxes[frame, follow]
        s = cfg.motion_noise
        dest = BBox(x + mnoise[0] * s * bw, y + mnoise[1] * s * bh,
                    bw * math.exp(mnoise[2] * s), bh * math.exp(mnoise[3] * s))
        return TrackResponse(v, encode_motion(target, dest),
                             self._observed_embedding(follow, frame, enoise))

    def _nearest_in_region(self, frame: int, region: BBox, exclude: int) -> int | None:
        best, best_d = None, math.inf
        for q in self.world.visible_ids(frame):
            q = int(q)
            if q == exclude:
                continue
            b = self.world.box(frame, q)
            if region.contains_point(b.cx, b.cy):
                d = math.hypot(b.cx - region.cx, b.cy - region.cy)
                if d < best_d:
                    best, best_d = q, d
        return best

    def query(self, frame: int, active_targets: Mapping[int, BBox]) -> FrameCues:
        if frame < 0 or frame >= self.num_frames:
            raise OutOfBounds(f"frame {frame} outside sequence of {self.num_frames} frames")
        responses = {uid: self.response(frame, uid, box) for uid, box in active_targets.items()}
        return FrameCues(frame, list(self.detections(frame)), responses)


def generate(config: WorldConfig, noiseless: bool = False,
             search_ratio: float = 2.0) -> tuple[TrajectorySet, SimProvider]:
    cfg = config.without_noise() if noiseless else config
    world = simulate_world(cfg)
    return world.ground_truth(), SimProvider(world, search_ratio)


def scenario_library() -> dict[str, WorldConfig]:
    """Named scenarios; each carries its own noise, use ``without_noise()`` for the clean version."""
    common_noise = dict(box_jitter=0.03, miss_rate=0.05, fp_rate=0.3, emb_noise=0.25,
                        visibility_flip_rate=0.01, drift_rate=0.3, motion_noise=0.02)
    return {
        "crossing": WorldConfig(n_people=2, frames=80, layout="crossing", speed_min=2.0,
                                speed_max=2.0, hide_coverage=0.95, **common_noise),
        "partial-occlusion": WorldConfig(n_people=2, frames=100, layout="partial",
                                         speed_min=1.5, speed_max=1.5, hide_coverage=0.95,
                                         occluder_blend=0.8, **common_noise),
        "full-occlusion": WorldConfig(n_people=3, frames=80, layout="lanes",
                                      occlusion_script="0:25-44", **common_noise),
        "long-gap": WorldConfig(n_people=3, frames=160, layout="lanes",
                                occlusion_script="1:30-109", appearance_drift=0.1,
                                **common_noise),
        "id-shuffle": WorldConfig(n_people=4, frames=60, layout="lanes", shuffle_period=20),
        "crowded": WorldConfig(n_people=32, frames=120, arena_w=1920, arena_h=1080,
                               min_height=60, max_height=120, **common_noise),
        "crowded-occlusion": crowded_occlusion(),
    }


def crowded_occlusion(seed: int = 0, frames: int = 200) -> WorldConfig:
    """Noisy crowd with scripted-style full occlusions; the component ablation benchmark."""
    return WorldConfig(
        seed=seed, n_people=32, frames=frames, fps=10.0, arena_w=1920, arena_h=1080,
        min_height=60, max_height=120, speed_min=0.8, speed_max=2.5, turn_rate=0.05,
        random_occlusion_rate=0.08, occlusion_min_s=1.0, occlusion_max_s=6.0,
        occlusion_fade_s=1.5,
        box_jitter=0.03, miss_rate=0.1, fp_rate=0.5, emb_noise=0.3,
        visibility_flip_rate=0.01, drift_rate=0.3, appearance_drift=0.08,
        lookalike_rate=0.3, occluder_blend=0.9, motion_noise=0.02,
    )


def with_seed(config: WorldConfig, seed: int) -> WorldConfig:
    return replace(config, seed=seed)
