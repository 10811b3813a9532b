"""Training losses, a small numpy MLP and plain SGD.

The MLP backs both the toy track head (visibility + motion from concatenated
target and search features) and the reinstatement classifier.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .core import MotionDelta

PROB_EPS = 1e-7
TRIPLET_MARGIN = 0.2


class LengthMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class EmptySet(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


# losses ----------------------------------------------------------------------

def smooth_l1(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LengthMismatch(f"{pred.shape} vs {target.shape}")
    d = np.abs(pred - target)
    return float(np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum())


def smooth_l1_grad(pred, target) -> np.ndarray:
    """Gradient with respect to ``pred``."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.clip(d, -1.0, 1.0)


def bce(pred: float, target: float) -> float:
    p = min(max(float(pred), PROB_EPS), 1.0 - PROB_EPS)
    return -(target * math.log(p) + (1.0 - target) * math.log(1.0 - p))


def bce_grad(pred: float, target: float) -> float:
    p = min(max(float(pred), PROB_EPS), 1.0 - PROB_EPS)
    return (p - target) / (p * (1.0 - p))


@dataclass(frozen=True)
class TrackSample:
    """One target for the track loss.

    ``kind`` is ``"positive"`` (the target box holds a person) or ``"negative"``.
    ``m_gt`` exists only for visible positives.
    """

    kind: str
    v_gt: int
    v_hat: float
    m_hat: MotionDelta
    m_gt: MotionDelta | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("positive", "negative"):
            raise ValueError(f"kind must be positive or negative, got {self.kind!r}")
        if self.v_gt not in (0, 1):
            raise ValueError("v_gt must be 0 or 1")
        if self.kind == "negative" and self.v_gt != 0:
            raise ValueError("negatives always have v_gt = 0")
        has_motion = self.kind == "positive" and self.v_gt == 1
        if has_motion != (self.m_gt is not None):
            raise ValueError("m_gt is required exactly for visible positives")


def track_loss(sample: TrackSample) -> float:
    if sample.kind == "negative":
        return bce(sample.v_hat, 0)
    loss = bce(sample.v_hat, sample.v_gt)
    if sample.v_gt == 1:
        loss += smooth_l1(sample.m_hat, sample.m_gt)
    return loss


def track_loss_grad(sample: TrackSample) -> tuple[float, np.ndarray]:
    """Gradients with respect to ``v_hat`` and ``m_hat``."""
    target = 0 if sample.kind == "negative" else sample.v_gt
    gv = bce_grad(sample.v_hat, target)
    gm = np.zeros(4)
    if sample.kind == "positive" and sample.v_gt == 1:
        gm = smooth_l1_grad(sample.m_hat, sample.m_gt)
    return gv, gm


def _as_set(items, name: str) -> np.ndarray:
    arr = np.asarray(items, dtype=np.float64)
    if arr.size == 0:
        raise EmptySet(f"{name} must not be empty")
    return arr.reshape(len(arr), -1)


def triplet_loss(anchor, positives, negatives, alpha: float = TRIPLET_MARGIN) -> float:
    """Hardest-positive / hardest-negative margin loss with l2 distances."""
    a = np.asarray(anchor, dtype=np.float64).ravel()
    pos = _as_set(positives, "positives")
    neg = _as_set(negatives, "negatives")
    dp = np.linalg.norm(pos - a, axis=1).max()
    dn = np.linalg.norm(neg - a, axis=1).min()
    return float(max(0.0, dp - dn + alpha))


def triplet_loss_grad(anchor, positives, negatives, alpha: float = TRIPLET_MARGIN):
    """Gradients with respect to ``(anchor, positives, negatives)``."""
    a = np.asarray(anchor, dtype=np.float64).ravel()
    pos = _as_set(positives, "positives")
    neg = _as_set(negatives, "negatives")
    ga, gp, gn = np.zeros_like(a), np.zeros_like(pos), np.zeros_like(neg)
    dpos = np.linalg.norm(pos - a, axis=1)
    dneg = np.linalg.norm(neg - a, axis=1)
    i, j = int(dpos.argmax()), int(dneg.argmin())
    if dpos[i] - dneg[j] + alpha <= 0:
        return ga, gp, gn
    up = (a - pos[i]) / dpos[i]
    un = (a - neg[j]) / dneg[j]
    ga += up - un
    gp[i] = -up
    gn[j] = un
    return ga, gp, gn


# MLP -------------------------------------------------------------------------

ACTIVATIONS = {"relu": 1}
OUTPUTS = {"sigmoid": 1, "linear": 2}
TAGS = {"none": 0, "online": 1, "offline": 2}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def weight_count(layer_dims: Sequence[int]) -> int:
    return sum((i + 1) * o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass
class MlpModel:
    """Fully connected net; each layer is stored as an ``out x (in + 1)`` block, bias last."""

    layer_dims: list[int]
    weights: np.ndarray
    activation: str = "relu"
    output: str = "sigmoid"
    tag: str = "none"

    def __post_init__(self) -> None:
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if len(self.layer_dims) < 2:
            raise DimensionMismatch("need at least input and output sizes")
        if self.weights.size != weight_count(self.layer_dims):
            raise DimensionMismatch(
                f"{self.weights.size} weights for dims {self.layer_dims}, "
                f"expected {weight_count(self.layer_dims)}")
        if self.activation not in ACTIVATIONS or self.output not in OUTPUTS or self.tag not in TAGS:
            raise ValueError("unknown activation, output or tag")

    @classmethod
    def init(cls, layer_dims: Sequence[int], seed: int | np.random.Generator = 0,
             output: str = "sigmoid", tag: str = "none") -> "MlpModel":
        rng = np.random.default_rng(seed)
        parts = []
        for i, o in zip(layer_dims[:-1], layer_dims[1:]):
            lim = math.sqrt(6.0 / (i + o))
            block = np.zeros((o, i + 1))
            block[:, :i] = rng.uniform(-lim, lim, size=(o, i))
            parts.append(block.ravel())
        return cls(list(layer_dims), np.concatenate(parts), output=output, tag=tag)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int], output: str = "sigmoid") -> "MlpModel":
        return cls(list(layer_dims), np.zeros(weight_count(layer_dims)), output=output)

    def copy(self) -> "MlpModel":
        return replace(self, weights=self.weights.copy(), layer_dims=list(self.layer_dims))

    def blocks(self, weights: np.ndarray | None = None) -> list[np.ndarray]:
        w = self.weights if weights is None else weights
        out, pos = [], 0
        for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            n = o * (i + 1)
            out.append(w[pos:pos + n].reshape(o, i + 1))
            pos += n
        return out

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.layer_dims[0]:
            raise DimensionMismatch(f"input has {x.shape[-1]} features, model expects "
                                    f"{self.layer_dims[0]}")
        return x

    def forward(self, x) -> np.ndarray:
        return self._forward(x)[0]

    def _forward(self, x):
        x = self._check_input(x)
        single = x.ndim == 1
        h = x.reshape(1, -1) if single else x
        acts = [h]
        blocks = self.blocks()
        for k, blk in enumerate(blocks):
            z = h @ blk[:, :-1].T + blk[:, -1]
            if k < len(blocks) - 1:
                h = np.maximum(z, 0.0)
            elif self.output == "sigmoid":
                h = _sigmoid(z)
            else:
                h = z
            acts.append(h)
        out = acts[-1][0] if single else acts[-1]
        return out, acts, single

    def backward(self, x, grad_out) -> np.ndarray:
        """Gradient of ``sum(grad_out * forward(x))`` with respect to the flat weights."""
        _, acts, single = self._forward(x)
        g = np.asarray(grad_out, dtype=np.float64)
        g = g.reshape(1, -1) if single else g
        blocks = self.blocks()
        grads = [None] * len(blocks)
        if self.output == "sigmoid":
            y = acts[-1]
            g = g * y * (1.0 - y)
        for k in range(len(blocks) - 1, -1, -1):
            h_in = acts[k]
            gb = np.empty_like(blocks[k])
            gb[:, :-1] = g.T @ h_in
            gb[:, -1] = g.sum(axis=0)
            grads[k] = gb
            if k > 0:
                g = (g @ blocks[k][:, :-1]) * (acts[k] > 0)
        return np.concatenate([gb.ravel() for gb in grads])

    def input_grad(self, x, grad_out) -> np.ndarray:
        """Gradient of ``sum(grad_out * forward(x))`` with respect to ``x``."""
        _, acts, single = self._forward(x)
        g = np.asarray(grad_out, dtype=np.float64)
        g = g.reshape(1, -1) if single else g
        blocks = self.blocks()
        if self.output == "sigmoid":
            y = acts[-1]
            g = g * y * (1.0 - y)
        for k in range(len(blocks) - 1, -1, -1):
            g = g @ blocks[k][:, :-1]
            if k > 0:
                g = g * (acts[k] > 0)
        return g[0] if single else g

    def fold_standardization(self, mean: np.ndarray, std: np.ndarray) -> "MlpModel":
        """Model that accepts raw inputs where this one expects ``(x - mean) / std``."""
        m = self.copy()
        first = m.blocks()[0]
        w = first[:, :-1] / std
        first[:, -1] -= w @ mean
        first[:, :-1] = w
        return m


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    return model.forward(x)


# training --------------------------------------------------------------------

class BCELoss:
    """Mean binary cross entropy on a single sigmoid output."""

    def __call__(self, out: np.ndarray, y: np.ndarray):
        p = np.clip(out[:, 0], PROB_EPS, 1.0 - PROB_EPS)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        val = float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())
        grad = np.zeros_like(out)
        grad[:, 0] = (p - y) / (p * (1 - p)) / len(y)
        return val, grad


class TrackHeadLoss:
    """Mean track loss for a linear head emitting ``[visibility logit, dx, dy, dw, dh]``.

    Target rows are ``[is_positive, v_gt, mdx, mdy, mdw, mdh]``.
    """

    def __call__(self, out: np.ndarray, y: np.ndarray):
        n = len(out)
        v = _sigmoid(out[:, 0])
        target_v = y[:, 1] * y[:, 0]
        pc = np.clip(v, PROB_EPS, 1 - PROB_EPS)
        cls = -(target_v * np.log(pc) + (1 - target_v) * np.log(1 - pc))
        with_motion = (y[:, 0] == 1) & (y[:, 1] == 1)
        d = out[:, 1:5] - y[:, 2:6]
        ad = np.abs(d)
        motion = np.where(ad < 1, 0.5 * d * d, ad - 0.5).sum(axis=1) * with_motion
        grad = np.zeros_like(out)
        grad[:, 0] = (v - target_v) / n
        grad[:, 1:5] = np.clip(d, -1, 1) * with_motion[:, None] / n
        return float((cls + motion).mean()), grad


def step_schedule(base_lr: float, steps: int) -> Callable[[int], float]:
    """Constant rate, divided by 10 at two thirds and again at five sixths of training."""
    first, second = int(steps * 2 / 3), int(steps * 5 / 6)

    def lr(step: int) -> float:
        if step < first:
            return base_lr
        if step < second:
            return base_lr / 10
        return base_lr / 100
    return lr


def sgd_train(model: MlpModel, X, Y, loss, lr_schedule: Callable[[int], float] | float = 0.1,
              steps: int = 1000, batch_size: int | None = 32, seed: int = 0,
              weight_decay: float = 1e-4, history: list | None = None) -> MlpModel:
    """Mini-batch SGD; returns a trained copy. ``batch_size=None`` uses the full set."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    if X.shape[1] != model.layer_dims[0]:
        raise DimensionMismatch(f"data has {X.shape[1]} features, model expects {model.layer_dims[0]}")
    schedule = lr_schedule if callable(lr_schedule) else (lambda _s, c=lr_schedule: c)
    m = model.copy()
    rng = np.random.default_rng(seed)
    n = len(X)
    for step in range(steps):
        if batch_size is None or batch_size >= n:
            xb, yb = X, Y
        else:
            idx = rng.integers(0, n, size=batch_size)
            xb, yb = X[idx], Y[idx]
        out = m.forward(xb)
        val, gout = loss(out, yb)
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss at step {step}")
        g = m.backward(xb, gout)
        if weight_decay:
            g = g + weight_decay * m.weights
        m.weights -= schedule(step) * g
        if history is not None:
            history.append(val)
    return m


def pair_sampler(sequence_length: int, delta: int, seed: int = 0) -> Iterator[tuple[int, int]]:
    """Endless stream of training frame pairs, each followed by its reverse.

    ``t`` is uniform over the sequence and ``t'`` uniform in ``[t + 1, t + delta]``,
    clipped to the last frame.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    if sequence_length < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(seed)
    while True:
        t = int(rng.integers(0, sequence_length - 1))
        hi = min(delta, sequence_length - 1 - t)
        t2 = t + int(rng.integers(1, hi + 1))
        yield t, t2
        yield t2, t


# model files -----------------------------------------------------------------

MAGIC = b"SMLP"
VERSION = 1
_HEADER = struct.Struct("<4sHBBBH")


def model_to_bytes(model: MlpModel) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, TAGS[model.tag], ACTIVATIONS[model.activation],
                        OUTPUTS[model.output], len(model.layer_dims))
    dims = struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims)
    return head + dims + model.weights.astype("<f4").tobytes()


def model_from_bytes(data: bytes) -> MlpModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated header")
    magic, version, tag, act, outp, ndims = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError("not a model file")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    pos = _HEADER.size
    dims = list(struct.unpack_from(f"<{ndims}I", data, pos))
    pos += 4 * ndims
    weights = np.frombuffer(data, dtype="<f4", offset=pos).astype(np.float64)
    inv = {v: k for k, v in TAGS.items()}, {v: k for k, v in ACTIVATIONS.items()}, \
        {v: k for k, v in OUTPUTS.items()}
    try:
        return MlpModel(dims, weights, activation=inv[1][act], output=inv[2][outp], tag=inv[0][tag])
    except KeyError as exc:
        raise ModelFormatError(f"unknown header field {exc}") from None


def save_model(model: MlpModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> MlpModel:
    return model_from_bytes(Path(path).read_bytes())
