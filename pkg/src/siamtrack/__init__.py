"""Online multi-object tracking with a Siamese track branch and re-identification."""

from .core import BBox, MotionDelta, decode_motion, encode_motion, iou, search_region
from .cues import Detection, FileProvider, FrameCues, ScriptedProvider, TrackResponse
from .metrics import TrajectorySet, clear_mot, evaluate, idf1, mt_ml, track_ap, track_iou
from .solver import Solver, SolverConfig, run

__version__ = "0.1.0"

__all__ = [
    "BBox", "MotionDelta", "decode_motion", "encode_motion", "iou", "search_region",
    "Detection", "FileProvider", "FrameCues", "ScriptedProvider", "TrackResponse",
    "TrajectorySet", "clear_mot", "evaluate", "idf1", "mt_ml", "track_ap", "track_iou",
    "Solver", "SolverConfig", "run",
]
