"""Toy track head on synthetic appearance vectors.

A sample pairs a target vector (appearance of the tracked person in the
previous frame) with a search vector (appearance of whatever sits in the
search region now, plus a noisy location code). The search region holds the
target, an unrelated background patch, or a different person. A Siamese head
sees both vectors; the plain head sees only the search vector, which cannot
tell a distractor person from the target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .learn import MlpModel, TrackHeadLoss, sgd_train, step_schedule


@dataclass(frozen=True)
class ToyConfig:
    dim: int = 16
    identities: int = 40
    pose_noise: float = 0.1       # per component
    background_scale: float = 0.3
    distractor_rate: float = 0.5  # share of negatives that are other people
    hidden: int = 64
    steps: int = 4000
    lr: float = 0.05


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_samples(n: int, cfg: ToyConfig, rng: np.random.Generator, protos: np.ndarray):
    """Returns target vectors, search vectors and targets ``[is_pos, v_gt, m4]``."""
    ids = rng.integers(0, len(protos), size=n)
    target = protos[ids] + cfg.pose_noise * rng.normal(size=(n, cfg.dim))
    positive = rng.random(n) < 0.5
    distractor = ~positive & (rng.random(n) < cfg.distractor_rate)
    other = (ids + rng.integers(1, len(protos), size=n)) % len(protos)
    seen = np.where(positive[:, None], protos[ids], protos[other])
    background = cfg.background_scale * _unit(rng.normal(size=(n, cfg.dim)))
    appearance = np.where((positive | distractor)[:, None], seen, background)
    appearance = appearance + cfg.pose_noise * rng.normal(size=(n, cfg.dim))
    motion = rng.normal(scale=0.2, size=(n, 4))
    location = motion + 0.01 * rng.normal(size=(n, 4))
    search = np.hstack([appearance, location])
    y = np.zeros((n, 6))
    y[:, 0] = positive
    y[:, 1] = positive
    y[:, 2:] = np.where(positive[:, None], motion, 0.0)
    return target, search, y


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def train_head(x: np.ndarray, y: np.ndarray, cfg: ToyConfig, seed: int) -> MlpModel:
    model = MlpModel.init([x.shape[1], cfg.hidden, cfg.hidden, 5], seed=seed, output="linear")
    return sgd_train(model, x, y, TrackHeadLoss(), step_schedule(cfg.lr, cfg.steps),
                     steps=cfg.steps, batch_size=64, seed=seed)


def siamese_ablation(seed: int, cfg: ToyConfig = ToyConfig(), n_train: int = 8000,
                     n_test: int = 4000) -> dict[str, float]:
    """Held-out visibility AUC of phi(target, search) and phi(search)."""
    rng = np.random.default_rng(seed)
    protos = _unit(rng.normal(size=(cfg.identities, cfg.dim)))
    t_tr, s_tr, y_tr = make_samples(n_train, cfg, rng, protos)
    t_te, s_te, y_te = make_samples(n_test, cfg, rng, protos)
    out = {}
    for name, train_x, test_x in (("siamese", np.hstack([t_tr, s_tr]), np.hstack([t_te, s_te])),
                                  ("search_only", s_tr, s_te)):
        model = train_head(train_x, y_tr, cfg, seed)
        pred = model.forward(test_x)
        out[name] = auc(pred[:, 0], y_te[:, 0])
        pos = y_te[:, 0] == 1
        out[name + "_motion_mae"] = float(np.abs(pred[pos, 1:] - y_te[pos, 2:]).mean())
    return out
