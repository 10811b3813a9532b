import math

import numpy as np
import pytest
from scipy.stats import chisquare

from oracles import numeric_grad, relative_error
from siamtrack import learn
from siamtrack.core import MotionDelta
from siamtrack.learn import (BCELoss, DimensionMismatch, EmptySet, LengthMismatch, ModelFormatError,
                             MlpModel, TrackHeadLoss, TrackSample, bce, bce_grad, mlp_forward,
                             model_from_bytes, model_to_bytes, pair_sampler, sgd_train, smooth_l1,
                             smooth_l1_grad, step_schedule, track_loss, track_loss_grad,
                             triplet_loss, triplet_loss_grad, weight_count)

REL_TOL = 1e-4


def assert_grad_close(analytic, numeric):
    assert relative_error(analytic, numeric) <= REL_TOL


def away_from(values, kinks, margin=1e-3):
    return all(abs(abs(v) - k) > margin for v in np.ravel(values) for k in kinks)


# examples -------------------------------------------------------------------

def test_smooth_l1_examples():
    assert smooth_l1([1, 2], [1, 2]) == 0
    assert smooth_l1([0.5], [0]) == 0.125
    assert smooth_l1([2.0], [0]) == 1.5
    with pytest.raises(LengthMismatch):
        smooth_l1([1, 2], [1])


def test_bce_examples():
    assert bce(0.5, 1) == pytest.approx(math.log(2))
    assert bce(1.0, 1) < 1e-6
    assert bce(0.9, 0) == pytest.approx(-math.log(0.1))
    assert math.isfinite(bce(0.0, 1))


def _motion(v):
    return MotionDelta(*map(float, v))


def test_track_loss_examples():
    m = MotionDelta(0.1, -0.2, 0.05, 0.0)
    assert track_loss(TrackSample("positive", 1, 0.5, m, m)) == pytest.approx(math.log(2))
    assert track_loss(TrackSample("negative", 0, 0.5, m)) == pytest.approx(math.log(2))
    far = MotionDelta(9, 9, 9, 9)
    assert track_loss(TrackSample("positive", 0, 0.5, far)) == pytest.approx(math.log(2))


def test_track_sample_contract():
    m = MotionDelta.zero()
    with pytest.raises(ValueError):
        TrackSample("positive", 1, 0.5, m)
    with pytest.raises(ValueError):
        TrackSample("positive", 0, 0.5, m, m)
    with pytest.raises(ValueError):
        TrackSample("negative", 1, 0.5, m)


def test_triplet_examples():
    a = np.zeros(2)
    assert triplet_loss(a, [[0.1, 0]], [[1.0, 0]], 0.2) == 0
    assert triplet_loss(a, [[0.5, 0]], [[0, 0.5]], 0.2) == pytest.approx(0.2)
    assert triplet_loss(a, [[0.9, 0], [0.1, 0]], [[0, 0.4], [3, 0]], 0.2) == pytest.approx(0.7)
    with pytest.raises(EmptySet):
        triplet_loss(a, [], [[1, 0]])
    with pytest.raises(EmptySet):
        triplet_loss(a, [[1, 0]], [])


def test_triplet_default_margin():
    assert learn.TRIPLET_MARGIN == 0.2


def test_triplet_nonnegative_and_zero_when_satisfied():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.normal(size=3)
        pos, neg = rng.normal(size=(3, 3)), rng.normal(size=(4, 3))
        val = triplet_loss(a, pos, neg)
        assert val >= 0
        dp = np.linalg.norm(pos - a, axis=1).max()
        dn = np.linalg.norm(neg - a, axis=1).min()
        if dn - dp >= 0.2:
            assert val == 0


# gradient checks at 100 random points each -----------------------------------

def test_grad_smooth_l1():
    rng = np.random.default_rng(1)
    done = 0
    while done < 100:
        p, t = rng.normal(scale=2, size=4), rng.normal(size=4)
        if not away_from(p - t, [1.0]):
            continue
        assert_grad_close(smooth_l1_grad(p, t), numeric_grad(lambda x: smooth_l1(x, t), p))
        done += 1


def test_grad_bce():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p, y = rng.uniform(0.01, 0.99), int(rng.integers(0, 2))
        num = numeric_grad(lambda x: bce(x[0], y), [p])
        assert_grad_close(bce_grad(p, y), num)


def _sample(rng):
    kind = "negative" if rng.random() < 0.3 else "positive"
    v_gt = 0 if kind == "negative" else int(rng.integers(0, 2))
    m_gt = _motion(rng.normal(size=4)) if v_gt else None
    return kind, v_gt, m_gt


def test_grad_track_loss():
    rng = np.random.default_rng(3)
    done = 0
    while done < 100:
        kind, v_gt, m_gt = _sample(rng)
        v_hat = rng.uniform(0.02, 0.98)
        m_hat = rng.normal(scale=1.5, size=4)
        if m_gt is not None and not away_from(m_hat - np.array(m_gt), [1.0]):
            continue

        def f(x):
            return track_loss(TrackSample(kind, v_gt, x[0], _motion(x[1:]), m_gt))

        gv, gm = track_loss_grad(TrackSample(kind, v_gt, v_hat, _motion(m_hat), m_gt))
        assert_grad_close(np.concatenate([[gv], gm]), numeric_grad(f, np.concatenate([[v_hat], m_hat])))
        done += 1


def test_grad_triplet():
    rng = np.random.default_rng(4)
    done = 0
    while done < 100:
        a, pos, neg = rng.normal(size=5), rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        dp = np.sort(np.linalg.norm(pos - a, axis=1))
        dn = np.sort(np.linalg.norm(neg - a, axis=1))
        # keep the hardest pair unique and the hinge away from its kink
        if dp[-1] - dp[-2] < 1e-3 or dn[1] - dn[0] < 1e-3 or abs(dp[-1] - dn[0] + 0.2) < 1e-3:
            continue
        ga, gp, gn = triplet_loss_grad(a, pos, neg)
        assert_grad_close(ga, numeric_grad(lambda x: triplet_loss(x, pos, neg), a))
        assert_grad_close(gp, numeric_grad(lambda x: triplet_loss(a, x, neg), pos))
        assert_grad_close(gn, numeric_grad(lambda x: triplet_loss(a, pos, x), neg))
        done += 1


def test_grad_triplet_through_mlp():
    rng = np.random.default_rng(5)
    model = MlpModel.init([6, 8, 4], seed=0, output="linear")
    done = 0
    while done < 100:
        xs = rng.normal(size=(5, 6))  # anchor, 2 positives, 2 negatives

        def loss(w):
            emb = MlpModel(model.layer_dims, w, output="linear").forward(xs)
            return triplet_loss(emb[0], emb[1:3], emb[3:], alpha=1.0)

        emb = model.forward(xs)
        if loss(model.weights) == 0:
            continue
        ga, gp, gn = triplet_loss_grad(emb[0], emb[1:3], emb[3:], alpha=1.0)
        analytic = model.backward(xs, np.vstack([ga, gp, gn]))
        assert_grad_close(analytic, numeric_grad(loss, model.weights))
        done += 1


@pytest.mark.parametrize("output", ["sigmoid", "linear"])
def test_grad_mlp_weights_and_inputs(output):
    rng = np.random.default_rng(6)
    for _ in range(100):
        model = MlpModel.init([4, 6, 5, 3], seed=rng, output=output)
        model.weights += rng.normal(scale=0.1, size=model.weights.shape)
        x = rng.normal(size=4)
        g = rng.normal(size=3)

        def f_w(w):
            return float(g @ MlpModel(model.layer_dims, w, output=output).forward(x))

        assert_grad_close(model.backward(x, g), numeric_grad(f_w, model.weights))
        assert_grad_close(model.input_grad(x, g), numeric_grad(lambda v: float(g @ model.forward(v)), x))


def test_grad_track_head_loss():
    rng = np.random.default_rng(7)
    loss = TrackHeadLoss()
    for _ in range(100):
        out = rng.normal(scale=0.5, size=(3, 5))
        y = np.zeros((3, 6))
        y[:, 0] = rng.integers(0, 2, 3)
        y[:, 1] = y[:, 0] * rng.integers(0, 2, 3)
        y[:, 2:] = rng.normal(scale=0.3, size=(3, 4)) * y[:, 1:2]
        _, grad = loss(out, y)
        assert_grad_close(grad, numeric_grad(lambda o: loss(o, y)[0], out))


# indicator rule ----------------------------------------------------------------

def test_no_motion_term_without_visible_target(monkeypatch):
    calls = []
    real = learn.smooth_l1

    def spy(pred, target):
        calls.append(1)
        return real(pred, target)

    monkeypatch.setattr(learn, "smooth_l1", spy)
    m = MotionDelta(3, -2, 1, 0.5)
    for sample in (TrackSample("positive", 0, 0.3, m), TrackSample("negative", 0, 0.3, m)):
        track_loss(sample)
        assert not calls
        gv, gm = track_loss_grad(sample)
        assert np.all(gm == 0)
    track_loss(TrackSample("positive", 1, 0.3, m, MotionDelta.zero()))
    assert calls == [1]


def test_track_head_loss_ignores_motion_of_invisible():
    out = np.array([[0.0, 5.0, 5.0, 5.0, 5.0]])
    for y in ([0, 0, 1, 1, 1, 1], [1, 0, 0, 0, 0, 0]):
        val, grad = TrackHeadLoss()(out, np.array([y], dtype=float))
        assert val == pytest.approx(math.log(2))
        assert np.all(grad[:, 1:] == 0)


# MLP ---------------------------------------------------------------------------

def test_weight_count():
    assert weight_count([3, 4, 1]) == 4 * 4 + 5 * 1
    assert MlpModel.init([14, 256, 256, 1]).weights.size == 15 * 256 + 257 * 256 + 257


def test_zero_model_gives_half():
    assert mlp_forward(MlpModel.zeros([5, 7, 1]), np.ones(5))[0] == 0.5


def test_identity_linear_layer():
    w = np.hstack([np.eye(3), np.zeros((3, 1))]).ravel()
    x = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(MlpModel([3, 3], w, output="linear").forward(x), x)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        MlpModel.zeros([3, 1]).forward(np.ones(4))
    with pytest.raises(DimensionMismatch):
        MlpModel([3, 1], np.zeros(3))


def test_fold_standardization():
    rng = np.random.default_rng(8)
    model = MlpModel.init([4, 6, 1], seed=1)
    mean, std = rng.normal(size=4), rng.uniform(0.5, 2, 4)
    x = rng.normal(size=(10, 4))
    folded = model.fold_standardization(mean, std)
    assert np.allclose(folded.forward(x), model.forward((x - mean) / std), atol=1e-12)


def test_model_file_roundtrip(tmp_path):
    model = MlpModel.init([3, 5, 1], seed=2, tag="online")
    back = model_from_bytes(model_to_bytes(model))
    assert back.layer_dims == [3, 5, 1] and back.tag == "online" and back.output == "sigmoid"
    assert np.array_equal(back.weights, model.weights.astype(np.float32).astype(np.float64))
    learn.save_model(model, tmp_path / "m.bin")
    assert np.array_equal(learn.load_model(tmp_path / "m.bin").weights, back.weights)


def test_model_file_errors():
    data = model_to_bytes(MlpModel.zeros([2, 1]))
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(data[:3])
    with pytest.raises(DimensionMismatch):
        model_from_bytes(data[:-4])


# training ------------------------------------------------------------------------

def _separable(seed=0, n=400):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    margin = X @ np.array([1.0, -0.7]) + 0.1
    keep = np.abs(margin) > 0.05
    return X[keep], (margin[keep] > 0).astype(float)[:, None]


def test_sgd_separable_accuracy():
    X, y = _separable()
    model = sgd_train(MlpModel.init([2, 16, 1], seed=0), X, y, BCELoss(),
                      step_schedule(0.5, 3000), steps=3000, batch_size=32, seed=0)
    acc = np.mean((model.forward(X)[:, 0] > 0.5) == (y[:, 0] == 1))
    assert acc >= 0.99


def test_sgd_loss_non_increasing_over_windows():
    X, y = _separable(1)
    hist = []
    sgd_train(MlpModel.init([2, 8, 1], seed=3), X, y, BCELoss(), 0.2, steps=1000,
              batch_size=None, history=hist)
    windows = np.array(hist).reshape(-1, 50).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_sgd_zero_steps_and_determinism():
    X, y = _separable(2)
    model = MlpModel.init([2, 8, 1], seed=4)
    same = sgd_train(model, X, y, BCELoss(), 0.1, steps=0)
    assert np.array_equal(same.weights, model.weights)
    a = sgd_train(model, X, y, BCELoss(), 0.1, steps=200, seed=9)
    b = sgd_train(model, X, y, BCELoss(), 0.1, steps=200, seed=9)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert not np.array_equal(a.weights, model.weights)


def test_step_schedule_drops_twice():
    lr = step_schedule(1.0, 600)
    assert [lr(0), lr(399), lr(400), lr(499), lr(500), lr(599)] == [1, 1, 0.1, 0.1, 0.01, 0.01]


# pair sampler ------------------------------------------------------------------------

def _pairs(length, delta, n, seed=0):
    gen = pair_sampler(length, delta, seed)
    return [(next(gen), next(gen)) for _ in range(n)]


def test_pair_sampler_delta_one():
    for fwd, _ in _pairs(50, 1, 1000):
        assert fwd[1] - fwd[0] == 1


def test_pair_sampler_emits_reverse():
    for fwd, rev in _pairs(40, 10, 2000):
        assert rev == (fwd[1], fwd[0])
        assert 0 <= fwd[0] < fwd[1] < 40


def test_pair_sampler_gap_uniform():
    length, delta = 2000, 30
    gaps = [b - a for (a, b), _ in _pairs(length, delta, 100_000, seed=11) if a <= length - 1 - delta]
    counts = np.bincount(gaps, minlength=delta + 1)[1:]
    assert counts.sum() > 95_000
    assert chisquare(counts).pvalue > 0.01


def test_pair_sampler_rejects_bad_delta():
    with pytest.raises(ValueError):
        next(pair_sampler(10, 0))
