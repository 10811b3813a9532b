"""Training the reinstatement classifier and running the component ablation on simulated crowds."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .core import iou_matrix
from .learn import BCELoss, MlpModel, sgd_train, step_schedule
from .metrics import TrajectorySet, evaluate
from .reinstate import FEATURE_DIM, extract_features
from .sim import WorldConfig, crowded_occlusion, generate
from .solver import Solver, SolverConfig, Track

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "track-only": dict(use_track_branch=True, reinstate_mode="off"),
    "reid-only": dict(use_track_branch=False, reinstate_mode="threshold"),
    "track+reid": dict(use_track_branch=True, reinstate_mode="threshold"),
    "online": dict(use_track_branch=True, reinstate_mode="online"),
    "offline": dict(use_track_branch=True, reinstate_mode="offline"),
}
EVAL_SEEDS = tuple(range(10))
TRAIN_SEEDS = tuple(range(100, 106))


def run_tracks(provider, config: SolverConfig, classifier: MlpModel | None = None) -> list[Track]:
    """Like ``solver.run`` but returns the internal tracks (with embeddings)."""
    solver = Solver(config, fps=provider.fps, classifier=classifier)
    for t in range(provider.num_frames):
        targets = solver.active_targets() if config.use_track_branch else {}
        solver.step(provider.query(t, targets))
    solver.finish(provider.num_frames)
    return sorted(solver.state.tracks.values(), key=lambda tr: tr.id)


def label_tracks(tracks: list[Track], gt: TrajectorySet, min_iou: float = 0.5,
                 min_purity: float = 0.5) -> list[int | None]:
    """Majority ground-truth identity of each track, or None when no identity dominates."""
    frames = gt.frame_view()
    labels = []
    for tr in tracks:
        votes: Counter = Counter()
        for f, box in tr.boxes.items():
            view = frames[f]
            if not view:
                continue
            sim = iou_matrix(np.array([box.as_tuple()]), np.array([b.as_tuple() for _, b in view]))[0]
            k = int(np.argmax(sim))
            if sim[k] >= min_iou:
                votes[view[k][0]] += 1
        if votes:
            gid, n = votes.most_common(1)[0]
            labels.append(gid if n >= min_purity * len(tr.boxes) else None)
        else:
            labels.append(None)
    return labels


def reinstate_examples(world: WorldConfig, mode: str, solver_config: SolverConfig | None = None,
                       online_model: MlpModel | None = None):
    """Feature/label pairs from the tracks of one simulated run.

    Every (earlier track, later track) pair within the buffer horizon becomes an
    example, positive when both carry the same ground-truth identity. ``online``
    restricts the later track to its first ``pending_frames`` frames and uses a
    run without reinstatement. ``offline`` uses whole tracks; given
    ``online_model`` the examples of a run that reinstates with it (the
    fragments the offline post-pass will actually see) are added to those of a
    run without reinstatement, which supplies positives when online
    reinstatement leaves no fragments behind.
    """
    if mode not in ("online", "offline"):
        raise ValueError(f"mode must be online or offline, got {mode!r}")
    if mode == "offline" and online_model is not None:
        parts = [_pair_examples(world, mode, solver_config, None),
                 _pair_examples(world, mode, solver_config, online_model)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    return _pair_examples(world, mode, solver_config, None)


def _pair_examples(world: WorldConfig, mode: str, solver_config: SolverConfig | None,
                   online_model: MlpModel | None):
    base_mode = "off" if online_model is None else "online"
    cfg = replace(solver_config or SolverConfig(), reinstate_mode=base_mode,
                  use_track_branch=True, fps=world.fps)
    gt, provider = generate(world)
    tracks = [tr for tr in run_tracks(provider, cfg, online_model) if tr.embeddings]
    labels = label_tracks(tracks, gt)
    horizon = int(round(cfg.buffer_seconds * world.fps))
    window = cfg.pending_frames if mode == "online" else None
    X, y = [], []
    for j, new in enumerate(tracks):
        start = min(new.boxes)
        for i, old in enumerate(tracks):
            gap = start - max(old.boxes)
            if i == j or gap <= 0 or gap > horizon:
                continue
            old_embs = [e for f, e in old.embeddings if f >= start - horizon]
            if not old_embs:
                continue
            feat = extract_features(new, old, k=cfg.top_k, pending_window=window,
                                    old_embeddings=old_embs, fps=world.fps)
            X.append(feat.to_vector())
            y.append(float(labels[i] is not None and labels[i] == labels[j]))
    return np.array(X).reshape(-1, FEATURE_DIM), np.array(y)


def train_reinstater(X: np.ndarray, y: np.ndarray, mode: str, seed: int = 0,
                     hidden: int = 256, steps: int = 3000, lr: float = 0.05) -> MlpModel:
    """Two hidden ReLU layers, sigmoid output, BCE; input standardization folded into layer one."""
    if len(X) == 0 or y.min() == y.max():
        raise ValueError("training set needs both positive and negative examples")
    mean = X.mean(0)
    std = X.std(0)
    std[std < 1e-8] = 1.0
    Z = (X - mean) / std
    model = MlpModel.init([X.shape[1], hidden, hidden, 1], seed=seed, tag=mode)
    model = sgd_train(model, Z, y[:, None], BCELoss(), step_schedule(lr, steps), steps=steps,
                      batch_size=64, seed=seed)
    return model.fold_standardization(mean, std)


def train_from_worlds(worlds, mode: str, seed: int = 0, jobs: int = 1,
                      online_model: MlpModel | None = None, **kw) -> MlpModel:
    parts = _map(_examples_job, [(w, mode, online_model) for w in worlds], jobs)
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    log.info("%s reinstater: %d examples, %d positive", mode, len(y), int(y.sum()))
    return train_reinstater(X, y, mode, seed=seed, **kw)


def _examples_job(args):
    world, mode, online_model = args
    return reinstate_examples(world, mode, online_model=online_model)


def run_variant(world: WorldConfig, variant: str, classifiers: dict[str, MlpModel] | None = None) -> dict:
    opts = VARIANTS[variant]
    cfg = SolverConfig(fps=world.fps, **opts)
    classifiers = classifiers or {}
    model = classifiers.get(opts["reinstate_mode"])
    gt, provider = generate(world)
    solver = Solver(cfg, fps=world.fps, classifier=model, online_classifier=classifiers.get("online"))
    for t in range(provider.num_frames):
        targets = solver.active_targets() if cfg.use_track_branch else {}
        solver.step(provider.query(t, targets))
    return evaluate(solver.finish(provider.num_frames), gt)


def _variant_job(args):
    world, variant, classifiers = args
    return variant, world.seed, run_variant(world, variant, classifiers)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def ablation(seeds=EVAL_SEEDS, train_seeds=TRAIN_SEEDS, frames: int = 200, jobs: int = 1,
             variants=tuple(VARIANTS), base: WorldConfig | None = None) -> dict[str, dict]:
    """Seed-averaged metrics of each solver variant on the crowded occlusion benchmark.

    Classifiers are trained on ``train_seeds`` worlds, disjoint from the evaluation seeds.
    """
    base = base or crowded_occlusion(frames=frames)
    if set(seeds) & set(train_seeds):
        raise ValueError("training and evaluation seeds overlap")
    classifiers = {}
    train_worlds = [replace(base, seed=s) for s in train_seeds]
    modes = {VARIANTS[v]["reinstate_mode"] for v in variants}
    if modes & {"online", "offline"}:
        classifiers["online"] = train_from_worlds(train_worlds, "online", jobs=jobs)
    if "offline" in modes:
        # the offline post-pass runs on top of online reinstatement
        classifiers["offline"] = train_from_worlds(train_worlds, "offline", jobs=jobs,
                                                   online_model=classifiers["online"])
    jobs_list = [(replace(base, seed=s), v, classifiers) for v in variants for s in seeds]
    results = _map(_variant_job, jobs_list, jobs)
    table: dict[str, dict] = {}
    for v in variants:
        rows = [r for name, _, r in results if name == v]
        table[v] = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        table[v]["per_seed_AP50"] = [r["AP50"] for name, _, r in results if name == v]
    return table
