import numpy as np
import pytest
from hypothesis import given, strategies as st

from siamtrack.core import BBox
from siamtrack.cues import ParseError
from siamtrack.io import (MIN_GT_VISIBILITY, ConfigError, NonPositiveBox, PoseAnnotation,
                          dump_solver_config, jta_scale, load_solver_config, pose_to_bbox,
                          read_embeddings, read_mot, read_mot_rows, read_poses, read_seqinfo,
                          read_trajectories, write_embeddings, write_results, write_seqinfo)
from siamtrack.metrics import TrajectorySet
from siamtrack.sim import WorldConfig, generate
from siamtrack.solver import SolverConfig


def test_detection_row(tmp_path):
    p = tmp_path / "det.txt"
    p.write_text("1,-1,10,20,30,40,0.9,-1,-1,-1\n")
    data = read_mot(p)
    (row,) = data.frames[0]
    assert row.box == BBox(10, 20, 30, 40) and row.conf == 0.9 and row.id == -1


def test_empty_file(tmp_path):
    p = tmp_path / "det.txt"
    p.write_text("")
    assert read_mot(p).num_frames == 0


@pytest.mark.parametrize("text,line", [("1,a,b\n", 1), ("1,1,0,0,5,5,1,-1,-1,-1\n0,1,0,0,5,5\n", 2),
                                       ("1,1,0,0,5\n", 1), ("1,1.5,0,0,5,5\n", 1),
                                       ("1,1,0,0,5,5\n\n1,1,0,0,nan,5\n", 3)])
def test_parse_errors_carry_line(tmp_path, text, line):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(ParseError) as err:
        read_mot(p)
    assert err.value.line == line


def test_non_positive_box(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1,1,0,0,5,5\n2,1,0,0,0,5\n")
    with pytest.raises(NonPositiveBox) as err:
        read_mot(p)
    assert err.value.line == 2


def test_visibility_filter_drops_exactly_low_rows(tmp_path):
    rng = np.random.default_rng(0)
    vis = np.concatenate([[0.0, 0.04, 0.049999999, 0.05, 0.050000001, 1.0],
                          rng.uniform(0, 0.1, 200)])
    p = tmp_path / "gt.txt"
    p.write_text("".join(f"{i + 1},1,0,0,10,10,1,1,{v!r}\n" for i, v in enumerate(vis.tolist())))
    kept = [r.frame - 1 for r in read_mot_rows(p)]
    assert kept == [i for i, v in enumerate(vis) if not v < MIN_GT_VISIBILITY]
    assert 0.05 in [r.visibility for r in read_mot_rows(p)]


def test_single_box_written_one_based(tmp_path):
    ts = TrajectorySet(sequence_length=1)
    ts.add(1, 0, BBox(1.5, 2, 3, 4), score=0.5)
    p = tmp_path / "res.txt"
    write_results(ts, p)
    assert p.read_text() == "1,1,1.5,2.0,3.0,4.0,0.5,-1,-1,-1\n"


def test_empty_set_empty_file(tmp_path):
    p = tmp_path / "res.txt"
    write_results(TrajectorySet(sequence_length=3), p)
    assert p.read_text() == ""


def test_rows_sorted_by_frame_then_id(tmp_path):
    ts = TrajectorySet(sequence_length=3)
    for tid in (5, 2):
        for f in (2, 0, 1):
            ts.add(tid, f, BBox(f, tid, 1, 1))
    p = tmp_path / "res.txt"
    write_results(ts, p)
    keys = [tuple(int(v) for v in line.split(",")[:2]) for line in p.read_text().splitlines()]
    assert keys == sorted(keys)


def _random_set(rng):
    n = int(rng.integers(1, 40))
    ts = TrajectorySet(sequence_length=n)
    for tid in rng.choice(1000, size=int(rng.integers(0, 8)), replace=False):
        scored = rng.random() < 0.7
        for f in rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False):
            box = BBox(rng.normal() * 10 ** rng.uniform(-3, 4), rng.normal() * 500,
                       rng.uniform(1e-6, 2000), 10 ** rng.uniform(-5, 4))
            ts.add(int(tid), int(f), box, float(rng.random()) if scored else None)
    return ts


def test_roundtrip_random_sets(tmp_path):
    rng = np.random.default_rng(7)
    p = tmp_path / "res.txt"
    for _ in range(100):
        ts = _random_set(rng)
        write_results(ts, p)
        back = read_trajectories(p, sequence_length=ts.sequence_length, min_visibility=0.0)
        assert back == ts


def test_roundtrip_simulator_output(tmp_path):
    gt, _ = generate(WorldConfig(seed=3, n_people=6, frames=50, random_occlusion_rate=0.1))
    p = tmp_path / "gt.txt"
    write_results(gt, p)
    back = read_trajectories(p, sequence_length=gt.sequence_length, fps=gt.fps)
    assert back == gt


def test_embeddings_roundtrip(tmp_path):
    vecs = list(np.random.default_rng(1).normal(size=(5, 7)))
    p = tmp_path / "emb.txt"
    write_embeddings(vecs, p)
    back = read_embeddings(p)
    assert all(np.array_equal(a, b) for a, b in zip(vecs, back))
    p.write_text("1,2\n1,2,3\n")
    with pytest.raises(ParseError) as err:
        read_embeddings(p)
    assert err.value.line == 2


def test_seqinfo_roundtrip(tmp_path):
    p = tmp_path / "seqinfo.ini"
    write_seqinfo(p, "demo", 14, 750)
    assert read_seqinfo(p) == {"fps": 14.0, "sequence_length": 750, "name": "demo"}


def _pose(points, distance=10.0, visible=None):
    joints = np.zeros((22, 4))
    joints[:, :2] = points
    joints[:, 2] = distance
    joints[:, 3] = 1 if visible is None else visible
    return PoseAnnotation(1, 0, joints)


def _span(x1, y1):
    pts = np.zeros((22, 2))
    pts[1] = (x1, y1)
    pts[2:] = (x1 / 2, y1 / 2)
    return pts


def test_pose_box_enlarged_five_percent_per_side():
    box = pose_to_bbox(_pose(_span(100, 200)))
    assert np.allclose(box.as_tuple(), (-5, -10, 110, 220), rtol=0, atol=1e-12)


def test_pose_far_away_excluded():
    assert pose_to_bbox(_pose(_span(100, 200), distance=30.0)) is None


def test_pose_half_body_rule():
    ten = np.zeros(22)
    ten[:10] = 1
    assert pose_to_bbox(_pose(_span(100, 200), visible=ten)) is None
    ten[10] = 1
    pts = _span(100, 200)
    pts[10] = (100, 0)
    assert pose_to_bbox(_pose(pts, visible=ten)) is not None


def test_pose_too_small_excluded():
    assert pose_to_bbox(_pose(_span(20, 200))) is None
    assert pose_to_bbox(_pose(_span(100, 40))) is None


def test_pose_downsample_scale():
    box = pose_to_bbox(_pose(_span(108, 216)), scale=jta_scale())
    assert box.w == pytest.approx(90 * 1.1) and box.h == pytest.approx(180 * 1.1)


@given(st.integers(0, 2**32 - 1))
def test_pose_box_contains_visible_joints(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1000, (22, 2))
    vis = (rng.random(22) < 0.8).astype(float)
    pose = _pose(pts, distance=rng.uniform(1, 24), visible=vis)
    box = pose_to_bbox(pose)
    if box is None:
        return
    for x, y in pts[vis > 0]:
        assert box.x <= x <= box.x + box.w and box.y <= y <= box.y + box.h


def test_read_poses(tmp_path):
    joints = np.arange(88, dtype=float)
    p = tmp_path / "poses.txt"
    p.write_text("3,7," + ",".join(map(repr, joints.tolist())) + "\n")
    (pose,) = read_poses(p)
    assert pose.person_id == 3 and pose.frame == 7
    assert np.array_equal(pose.joints.ravel(), joints)
    p.write_text("3,7,1,2\n")
    with pytest.raises(ParseError):
        read_poses(p)


def test_solver_config_roundtrip(tmp_path):
    cfg = SolverConfig(reinstate_mode="threshold", top_k=3, use_track_branch=False)
    p = tmp_path / "solver.cfg"
    p.write_text(dump_solver_config(cfg))
    assert load_solver_config(p) == cfg
    assert load_solver_config(None) == SolverConfig()


def test_solver_config_dump_names_thresholds():
    text = dump_solver_config(SolverConfig())
    assert "IoU > 0.3" in text and "v < 0.3" in text and "30 seconds" in text


@pytest.mark.parametrize("text", ["bogus = 1\n", "top_k = many\n", "top_k\n", "top_k = 1\ntop_k = 2\n",
                                  "visibility_threshold = 2\n"])
def test_solver_config_errors(tmp_path, text):
    p = tmp_path / "solver.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_solver_config(p)
