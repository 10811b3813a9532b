"""MOTChallenge CSV files, embedding files, seqinfo.ini, JTA poses and key-value configs."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .core import BBox
from .cues import ParseError
from .metrics import TrajectorySet

MIN_GT_VISIBILITY = 0.05


class NonPositiveBox(ParseError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MotRow:
    frame: int  # 1-based, as in the file
    id: int
    bb_left: float
    bb_top: float
    bb_width: float
    bb_height: float
    conf: float
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0
    visibility: float | None = None

    @property
    def box(self) -> BBox:
        return BBox(self.bb_left, self.bb_top, self.bb_width, self.bb_height)


def _parse_row(text: str, lineno: int, path: str | None) -> MotRow:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) < 6 or len(parts) > 10:
        raise ParseError(f"expected 6 to 10 comma-separated fields, got {len(parts)}", lineno, path)
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(f"non-numeric field ({exc})", lineno, path) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite field", lineno, path)
    frame, tid = vals[0], vals[1]
    if frame != int(frame) or frame < 1:
        raise ParseError(f"frame must be a positive integer, got {parts[0]}", lineno, path)
    if tid != int(tid):
        raise ParseError(f"id must be an integer, got {parts[1]}", lineno, path)
    if vals[4] <= 0 or vals[5] <= 0:
        raise NonPositiveBox(f"box width and height must be positive, got {parts[4]}x{parts[5]}",
                             lineno, path)
    conf = vals[6] if len(vals) > 6 else 1.0
    visibility = None
    world = (-1.0, -1.0, -1.0)
    if len(vals) == 9:
        # gt layout: ..., conf flag, class, visibility
        visibility = vals[8]
    elif len(vals) == 10:
        world = (vals[7], vals[8], vals[9])
    return MotRow(int(frame), int(tid), vals[2], vals[3], vals[4], vals[5], conf,
                  *world, visibility=visibility)


def read_mot_rows(path: str | Path, min_visibility: float = MIN_GT_VISIBILITY) -> list[MotRow]:
    """All rows of a MOT file, in file order; gt rows below ``min_visibility`` are dropped."""
    path = str(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            row = _parse_row(line, lineno, path)
            if row.visibility is not None and row.visibility < min_visibility:
                continue
            rows.append(row)
    return rows


@dataclass
class MotData:
    rows: list[MotRow]
    # keyed by 0-based frame
    frames: dict[int, list[MotRow]]
    num_frames: int


def read_mot(path: str | Path, min_visibility: float = MIN_GT_VISIBILITY) -> MotData:
    rows = read_mot_rows(path, min_visibility)
    frames: dict[int, list[MotRow]] = {}
    for r in rows:
        frames.setdefault(r.frame - 1, []).append(r)
    return MotData(rows, dict(sorted(frames.items())),
                   max((r.frame for r in rows), default=0))


def read_trajectories(path: str | Path, sequence_length: int | None = None,
                      fps: float = 30.0, min_visibility: float = MIN_GT_VISIBILITY) -> TrajectorySet:
    """Result or gt file as a TrajectorySet; a conf of -1 means "no score"."""
    data = read_mot(path, min_visibility)
    n = data.num_frames if sequence_length is None else sequence_length
    if data.num_frames > n:
        from .metrics import SequenceMismatch
        raise SequenceMismatch(f"{path} has frame {data.num_frames} beyond sequence length {n}")
    ts = TrajectorySet({}, n, fps)
    for r in data.rows:
        if r.id in ts.tracks and (r.frame - 1) in ts.tracks[r.id]:
            raise ParseError(f"duplicate id {r.id} in frame {r.frame}", 0, str(path))
        ts.add(r.id, r.frame - 1, r.box, None if r.conf == -1 else r.conf)
    return ts


def _fmt(v: float) -> str:
    # repr round-trips exactly through float()
    return repr(float(v))


def write_results(trajectories: TrajectorySet, path: str | Path) -> None:
    lines = []
    for tid in sorted(trajectories.tracks):
        scores = trajectories.scores.get(tid, {})
        for f, b in trajectories.tracks[tid].items():
            conf = scores.get(f, -1.0)
            lines.append((f, tid, f"{f + 1},{tid},{_fmt(b.x)},{_fmt(b.y)},{_fmt(b.w)},"
                                  f"{_fmt(b.h)},{_fmt(conf)},-1,-1,-1\n"))
    lines.sort(key=lambda t: (t[0], t[1]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(line for _, _, line in lines)


def read_embeddings(path: str | Path) -> list[np.ndarray]:
    """One comma-separated vector per non-blank line, aligned with the detection file."""
    out = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                vec = np.array([float(p) for p in line.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"non-numeric embedding value ({exc})", lineno, str(path)) from None
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ParseError(f"embedding length {len(vec)} != {dim}", lineno, str(path))
            if not np.all(np.isfinite(vec)):
                raise ParseError("non-finite embedding value", lineno, str(path))
            out.append(vec)
    return out


def write_embeddings(vectors: Iterable[np.ndarray], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in vectors:
            fh.write(",".join(_fmt(x) for x in v) + "\n")


def read_seqinfo(path: str | Path) -> dict[str, Any]:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    seq = cp["Sequence"] if "Sequence" in cp else {}
    out: dict[str, Any] = {}
    if "frameRate" in seq:
        out["fps"] = float(seq["frameRate"])
    if "seqLength" in seq:
        out["sequence_length"] = int(seq["seqLength"])
    if "name" in seq:
        out["name"] = seq["name"]
    return out


def write_seqinfo(path: str | Path, name: str, fps: float, sequence_length: int) -> None:
    Path(path).write_text(
        f"[Sequence]\nname={name}\nframeRate={fps:g}\nseqLength={sequence_length}\n",
        encoding="utf-8")


# JTA poses -----------------------------------------------------------------

NUM_JOINTS = 22
JTA_SHORT_SIDE = 1080
DOWNSAMPLED_SHORT_SIDE = 900


@dataclass
class PoseAnnotation:
    person_id: int
    frame: int
    # (22, 4): x, y, camera distance in meters, visible flag
    joints: np.ndarray

    def __post_init__(self) -> None:
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.shape != (NUM_JOINTS, 4):
            raise ValueError(f"expected {NUM_JOINTS} joints of 4 values, got {self.joints.shape}")


def pose_to_bbox(pose: PoseAnnotation, scale: float = 1.0,
                 enlarge: float = 0.05, min_size: tuple[float, float] = (25.0, 50.0),
                 max_distance: float = 25.0, min_visible_fraction: float = 0.5) -> BBox | None:
    """Person box from joints: scale, tight fit over visible joints, grow each side, filter.

    For 1080p JTA frames downsampled to a 900 short side pass ``scale=jta_scale()``.
    """
    visible = pose.joints[:, 3] > 0
    if visible.sum() < min_visible_fraction * NUM_JOINTS or not visible.any():
        return None
    pts = pose.joints[visible, :2] * scale
    if float(pose.joints[visible, 2].mean()) > max_distance:
        return None
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        return None
    box = BBox(x0 - enlarge * w, y0 - enlarge * h, w * (1 + 2 * enlarge), h * (1 + 2 * enlarge))
    if box.w < min_size[0] or box.h < min_size[1]:
        return None
    return box


def read_poses(path: str | Path) -> list[PoseAnnotation]:
    """Lines of ``person_id,frame`` followed by 22 ``x,y,z,visible`` tuples."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 2 + 4 * NUM_JOINTS:
                raise ParseError(f"expected {2 + 4 * NUM_JOINTS} fields, got {len(parts)}",
                                 lineno, str(path))
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"non-numeric field ({exc})", lineno, str(path)) from None
            out.append(PoseAnnotation(int(vals[0]), int(vals[1]),
                                      np.array(vals[2:]).reshape(NUM_JOINTS, 4)))
    return out


def jta_scale(short_side: float = JTA_SHORT_SIDE, target: float = DOWNSAMPLED_SHORT_SIDE) -> float:
    return target / short_side


# key-value config ----------------------------------------------------------

def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def coerce(value: str, kind: type, key: str) -> Any:
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind in (int, float):
            return kind(value)
        if kind is str:
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def apply_kv(obj_cls, values: dict[str, str], types: dict[str, type]):
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {k: coerce(v, types[k], k) for k, v in values.items()}
    return obj_cls(**kwargs)


def dataclass_types(cls) -> dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints[f.type] for f in fields(cls) if f.type in hints}


def load_solver_config(path: str | Path | None):
    from .solver import SolverConfig

    if path is None:
        return SolverConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values = parse_kv(text, str(path))
    try:
        return apply_kv(SolverConfig, values, dataclass_types(SolverConfig))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


SOLVER_CONFIG_COMMENTS = {
    "iou_merge_threshold": "detection/track merge when IoU > 0.3",
    "visibility_threshold": "terminate when visibility v < 0.3",
    "detection_score_threshold": "minimum detector score to start a track",
    "search_ratio": "search extension ratio r = 2",
    "duplicate_iou": "suppress the younger of two active tracks above this IoU",
    "use_track_branch": "false tracks by embedding association only",
    "reinstate_mode": "off | threshold | online | offline",
    "reid_distance_threshold": "reinstate when mean distance < 0.5",
    "top_k": "average over the 5 most similar box pairs",
    "buffer_seconds": "embedding buffer of 30 seconds",
    "pending_frames": "frames a new track is followed before the reinstatement decision",
    "fps": "frame rate when the sequence does not provide one",
    "classifier_model": "model file for online/offline reinstatement",
    "online_model": "offline mode: model for the in-pass decisions, threshold rule when empty",
}


def dump_solver_config(cfg) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        comment = SOLVER_CONFIG_COMMENTS.get(f.name)
        if comment:
            lines.append(f"# {comment}")
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
